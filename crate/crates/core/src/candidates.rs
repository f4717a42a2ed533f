//! Top-K candidate maintenance: jump-flood warm-up, temporal reuse,
//! self + 4 neighbour propagation with stochastic injection, and an
//! exhaustive oracle.
//!
//! Every pass is double-buffered: it reads the previous field and writes a
//! fresh one, so cells can be processed in any order.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::field::{CandidateField, INVALID_ID, MAX_K};
use crate::rng::RngState;
use crate::score::{ranks_before, ScoreTable};
use crate::site::{normalization_scale, SiteStore};

/// `B = 2^ceil(log2 max(W, H))`.
pub fn jump_bound(width: usize, height: usize) -> u64 {
    (width.max(height).max(1) as u64).next_power_of_two()
}

/// Number of flood events in a full refresh: `ceil(log2 max(W, H))`.
pub fn flood_event_count(width: usize, height: usize) -> u32 {
    jump_bound(width, height).trailing_zeros()
}

/// Jump distance at refresh event `t`: `B/2, B/4, ..., 1`, then 1 forever.
pub fn jump_step(t: u64, bound: u64) -> Result<u64> {
    if bound < 2 || !bound.is_power_of_two() {
        return invalid(format!("jump bound must be a power of two >= 2, got {bound}"));
    }
    let log_b = bound.trailing_zeros() as u64;
    let e = t.min(log_b - 1) + 1;
    Ok((bound >> e).max(1))
}

/// Iterator over the jump schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JumpSchedule {
    pub bound: u64,
    pub t: u64,
}

impl JumpSchedule {
    pub fn new(width: usize, height: usize) -> Self {
        JumpSchedule { bound: jump_bound(width, height).max(2), t: 0 }
    }
}

impl Iterator for JumpSchedule {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let s = jump_step(self.t, self.bound).ok()?;
        self.t += 1;
        Some(s)
    }
}

/// Neighbourhood read by a propagation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// Self plus the four axis neighbours at the jump distance.
    Cross,
    /// Self plus all eight neighbours of the 3x3 block (flood events).
    Box,
}

const CROSS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const BOX: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

impl Stencil {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Stencil::Cross => &CROSS,
            Stencil::Box => &BOX,
        }
    }
}

/// Parameters shared by every pass of a refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationParams {
    /// Random site ids injected per cell per pass.
    pub inject: usize,
    pub seed: u64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams { inject: 4, seed: 0 }
    }
}

/// Fixed-capacity sorted list used for top-K selection.
#[derive(Clone, Copy)]
pub(crate) struct TopK {
    ids: [u32; MAX_K],
    logits: [f64; MAX_K],
    len: usize,
    k: usize,
}

impl TopK {
    #[inline]
    pub(crate) fn new(k: usize) -> Self {
        TopK { ids: [INVALID_ID; MAX_K], logits: [f64::NEG_INFINITY; MAX_K], len: 0, k }
    }

    #[inline]
    fn contains(&self, id: u32) -> bool {
        // Unused slots hold INVALID_ID, which is never offered, so the whole
        // fixed-size array can be scanned without branches.
        self.ids.iter().fold(false, |acc, &x| acc | (x == id))
    }

    /// Offers a candidate; `score` is evaluated only for unseen ids.
    #[inline]
    pub(crate) fn offer(&mut self, id: u32, score: impl FnOnce() -> f64) {
        if self.contains(id) {
            return;
        }
        self.insert(id, score());
    }

    /// Inserts an id known not to be in the list.
    #[inline]
    pub(crate) fn insert(&mut self, id: u32, l: f64) {
        if l.is_nan() {
            return;
        }
        let mut pos = if self.len < self.k {
            self.len += 1;
            self.len - 1
        } else {
            let last = self.k - 1;
            if !ranks_before(l, id, self.logits[last], self.ids[last]) {
                return;
            }
            last
        };
        while pos > 0 && ranks_before(l, id, self.logits[pos - 1], self.ids[pos - 1]) {
            self.ids[pos] = self.ids[pos - 1];
            self.logits[pos] = self.logits[pos - 1];
            pos -= 1;
        }
        self.ids[pos] = id;
        self.logits[pos] = l;
    }

    #[inline]
    pub(crate) fn write(&self, out: &mut [u32]) {
        out[..self.len].copy_from_slice(&self.ids[..self.len]);
        out[self.len..].fill(INVALID_ID);
    }
}

/// Clears the field and writes every active site into slot 0 of the cell
/// containing its (rounded) position. Collisions keep the higher logit at
/// the cell center, lower id on ties.
pub fn jfa_seed(table: &ScoreTable, field: &mut CandidateField) {
    field.clear();
    let k = field.k;
    for &id in &table.active_ids {
        let Some(cell) = cell_of_position(field, table.sites[id as usize].px, table.sites[id as usize].py) else {
            continue;
        };
        let (cx, cy) = (cell % field.width, cell / field.width);
        let c = field.cell_center(cx, cy);
        let slot = &mut field.ids[cell * k];
        let l = table.logit(id, c[0], c[1]);
        if *slot == INVALID_ID || ranks_before(l, id, table.logit(*slot, c[0], c[1]), *slot) {
            *slot = id;
        }
    }
}

fn cell_of_position(field: &CandidateField, x: f64, y: f64) -> Option<usize> {
    if !(x.is_finite() && y.is_finite()) || x < -0.5 || y < -0.5 {
        return None;
    }
    let px = (x.round() as usize).min(field.image_width - 1);
    let py = (y.round() as usize).min(field.image_height - 1);
    Some(field.cell_of_pixel(px, py))
}

/// Merges the given sites into the lists of the cells containing them.
/// Used to make freshly created sites visible to propagation.
pub fn seed_sites(table: &ScoreTable, field: &mut CandidateField, ids: &[u32]) {
    let k = field.k;
    for &id in ids {
        if !table.is_active(id) {
            continue;
        }
        let site = &table.sites[id as usize];
        let Some(cell) = cell_of_position(field, site.px, site.py) else {
            continue;
        };
        let c = field.cell_center(cell % field.width, cell / field.width);
        let mut top = TopK::new(k);
        for &other in field.list(cell) {
            if other != INVALID_ID && table.is_active(other) {
                top.offer(other, || table.logit(other, c[0], c[1]));
            }
        }
        top.offer(id, || table.logit(id, c[0], c[1]));
        top.write(field.list_mut(cell));
    }
}

/// One propagation pass. For each cell, the union of its previous list, the
/// previous lists of the stencil neighbours at distance `step`, and
/// `params.inject` uniformly drawn active ids is scored at the cell center
/// and the best `k` distinct ids are kept.
pub fn propagate_pass(
    table: &ScoreTable,
    prev: &CandidateField,
    step: u64,
    stencil: Stencil,
    params: PropagationParams,
) -> CandidateField {
    let mut next = prev.clone();
    propagate_into(table, prev, &mut next, step, stencil, params);
    next
}

fn propagate_into(
    table: &ScoreTable,
    prev: &CandidateField,
    next: &mut CandidateField,
    step: u64,
    stencil: Stencil,
    params: PropagationParams,
) {
    let (w, h, k) = (prev.width, prev.height, prev.k);
    let step = step.max(1) as i64;
    let offsets = stencil.offsets();
    let n_active = table.active_ids.len() as u32;
    let step_index = prev.passes;
    let n_sites = table.sites.len();
    next.ids
        .par_chunks_mut(w * k)
        .enumerate()
        .for_each_init(
            || vec![0u32; n_sites],
            |seen, (cy, row)| {
                for cx in 0..w {
                    let cell = cy * w + cx;
                    // Each id is scored at most once per cell: once rejected
                    // or accepted, a later offer cannot change the outcome.
                    let stamp = cell as u32 + 1;
                    let c = prev.cell_center(cx, cy);
                    let mut top = TopK::new(k);
                    let mut offer = |id: u32, top: &mut TopK| {
                        if let Some(s) = seen.get_mut(id as usize) {
                            if *s != stamp && table.sites[id as usize].active {
                                *s = stamp;
                                top.insert(id, table.logit(id, c[0], c[1]));
                            }
                        }
                    };
                    for &id in prev.list(cell) {
                        offer(id, &mut top);
                    }
                    for &(ox, oy) in offsets {
                        let nx = cx as i64 + ox * step;
                        let ny = cy as i64 + oy * step;
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            for &id in prev.list(ny as usize * w + nx as usize) {
                                offer(id, &mut top);
                            }
                        }
                    }
                    if n_active > 0 && params.inject > 0 {
                        let mut rng = RngState::for_pixel(params.seed, step_index, cell as u32);
                        for _ in 0..params.inject {
                            offer(table.active_ids[rng.below(n_active) as usize], &mut top);
                        }
                    }
                    top.write(&mut row[cx * k..(cx + 1) * k]);
                }
            },
        );
    next.passes = prev.passes + 1;
}

/// How a refresh treats the existing field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshMode {
    /// Reuse the current lists and run step-1 passes.
    WarmStart,
    /// Seed, flood along the jump schedule, then run step-1 passes.
    Full,
}

/// Runs a refresh in place and bumps the generation counter.
pub fn refresh_with_table(
    table: &ScoreTable,
    field: &mut CandidateField,
    mode: RefreshMode,
    passes: usize,
    params: PropagationParams,
) {
    let mut scratch = field.clone();
    let run = |field: &mut CandidateField, scratch: &mut CandidateField, step: u64, stencil: Stencil| {
        propagate_into(table, field, scratch, step, stencil, params);
        std::mem::swap(field, scratch);
    };
    if mode == RefreshMode::Full {
        jfa_seed(table, field);
        let events = flood_event_count(field.width, field.height);
        let bound = jump_bound(field.width, field.height).max(2);
        for t in 0..events as u64 {
            let step = jump_step(t, bound).expect("bound is a power of two");
            run(field, &mut scratch, step, Stencil::Box);
        }
    }
    for _ in 0..passes {
        run(field, &mut scratch, 1, Stencil::Cross);
    }
    field.generation += 1;
}

/// Convenience wrapper building the score table from a store.
pub fn refresh(
    store: &SiteStore,
    field: &mut CandidateField,
    mode: RefreshMode,
    passes: usize,
    params: PropagationParams,
) -> Result<()> {
    let s = normalization_scale(field.image_width, field.image_height)?;
    let table = ScoreTable::new(store, s);
    refresh_with_table(&table, field, mode, passes, params);
    Ok(())
}

/// Exhaustive top-k at a position: every active site, ordered by logit with
/// ids breaking ties. `k` may exceed the field list limit.
pub fn exact_topk_table(x: [f64; 2], table: &ScoreTable, k: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = table
        .active_ids
        .iter()
        .map(|&id| (table.logit(id, x[0], x[1]), id))
        .filter(|(l, _)| !l.is_nan())
        .collect();
    let k = k.min(all.len());
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        if ranks_before(a.0, a.1, b.0, b.1) {
            std::cmp::Ordering::Less
        } else if ranks_before(b.0, b.1, a.0, a.1) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    };
    if k > 0 && k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(_, id)| id).collect()
}

pub fn exact_topk(x: [f64; 2], store: &SiteStore, s: f64, k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    Ok(exact_topk_table(x, &ScoreTable::new(store, s), k))
}

/// True when the cell's valid ids form the same set as the exact top-k.
pub fn cell_matches_exact(field: &CandidateField, table: &ScoreTable, cx: usize, cy: usize) -> bool {
    let c = field.cell_center(cx, cy);
    let mut exact = exact_topk_table(c, table, field.k);
    let mut got: Vec<u32> = field.list(cy * field.width + cx).iter().copied().filter(|i| *i != INVALID_ID).collect();
    exact.sort_unstable();
    got.sort_unstable();
    exact == got
}

/// Fraction of the given cells whose list matches the exact top-k set.
pub fn match_rate(field: &CandidateField, table: &ScoreTable, cells: &[(usize, usize)]) -> f64 {
    if cells.is_empty() {
        return 1.0;
    }
    let hits = cells.par_iter().filter(|(x, y)| cell_matches_exact(field, table, *x, *y)).count();
    hits as f64 / cells.len() as f64
}

/// 8-bit mask (255 = list matches the exhaustive oracle) over all cells.
pub fn match_mask(field: &CandidateField, table: &ScoreTable) -> Vec<u8> {
    (0..field.cell_count())
        .into_par_iter()
        .map(|c| if cell_matches_exact(field, table, c % field.width, c / field.width) { 255 } else { 0 })
        .collect()
}

/// Collision-free test layout: `n` distinct pixel cells, each site offset
/// from its cell center by one of four layered subpixel offsets
/// `(+-1/4, +-1/4)` chosen round-robin. Radius is the mean spacing.
pub fn collision_free_sites(n: usize, width: usize, height: usize, rng: &mut impl rand::Rng) -> Result<SiteStore> {
    let cells = width * height;
    if n == 0 || n > cells {
        return invalid(format!("need 1..={cells} sites, got {n}"));
    }
    let mut order: Vec<u32> = (0..cells as u32).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells);
        order.swap(i, j);
    }
    let radius = (cells as f64 / n as f64).sqrt();
    const LAYERS: [[f64; 2]; 4] = [[-0.25, -0.25], [0.25, 0.25], [0.25, -0.25], [-0.25, 0.25]];
    let sites = order[..n]
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let o = LAYERS[i % 4];
            let x = ((c as usize % width) as f64 + o[0]).clamp(0.0, (width - 1) as f64);
            let y = ((c as usize / width) as f64 + o[1]).clamp(0.0, (height - 1) as f64);
            crate::site::Site { pos: [x, y], radius, color: [rng.random(), rng.random(), rng.random()], ..Default::default() }
        })
        .collect();
    Ok(SiteStore::from_sites(sites))
}

/// Top-K convergence protocol: seed, then pass `t` propagates with the
/// cross stencil at `jump_step(t)`. Returns the exact-match rate over
/// `pixels` random cells after each requested pass count, averaged over
/// `trials` layouts.
pub fn topk_convergence(
    width: usize,
    height: usize,
    n_sites: usize,
    pass_counts: &[usize],
    trials: usize,
    pixels: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    if trials == 0 || pixels == 0 {
        return invalid("trials and pixels must be at least 1");
    }
    let s = normalization_scale(width, height)?;
    let bound = jump_bound(width, height).max(2);
    let max_passes = pass_counts.iter().copied().max().unwrap_or(0);
    let mut totals = vec![0.0; pass_counts.len()];
    for trial in 0..trials as u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial));
        let store = collision_free_sites(n_sites, width, height, &mut rng)?;
        let cells: Vec<(usize, usize)> =
            (0..pixels).map(|_| (rng.random_range(0..width), rng.random_range(0..height))).collect();
        let table = ScoreTable::new(&store, s);
        let params = PropagationParams { inject: 4, seed: seed.wrapping_add(trial) };
        let mut field = CandidateField::new(width, height, 8)?;
        let mut scratch = field.clone();
        jfa_seed(&table, &mut field);
        for t in 0..=max_passes {
            for (i, &p) in pass_counts.iter().enumerate() {
                if p == t {
                    totals[i] += match_rate(&field, &table, &cells);
                }
            }
            if t < max_passes {
                propagate_into(&table, &field, &mut scratch, jump_step(t as u64, bound)?, Stencil::Cross, params);
                std::mem::swap(&mut field, &mut scratch);
            }
        }
    }
    Ok(totals.into_iter().map(|v| v / trials as f64).collect())
}

/// Writes `candidates.bin` (little-endian u32 grid, `k` ids per cell) and
/// `match_mask.pgm` into `dir`.
pub fn write_debug_dump(field: &CandidateField, table: &ScoreTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("candidates.bin"), field.to_le_bytes())?;
    let mask = match_mask(field, table);
    let mut pgm = format!("P5\n{} {}\n255\n", field.width, field.height).into_bytes();
    pgm.extend_from_slice(&mask);
    std::fs::write(dir.join("match_mask.pgm"), pgm)?;
    Ok(())
}
