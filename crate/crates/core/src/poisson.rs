//! Poisson equation `lap u = f` on a masked domain with Dirichlet sites.
//!
//! The scalar `u` lives in the red channel of each site's color; the other
//! two channels stay at zero. Boundary sites sit on the mask contour and are
//! frozen, so their value is enforced exactly throughout optimization.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{refresh_with_table, PropagationParams, RefreshMode};
use crate::config::MergeMode;
use crate::error::{invalid, Result, SadError};
use crate::field::CandidateField;
use crate::grad::{backward_from_pixel_grads, GradBuffer};
use crate::image::{save_gray, ImageBuffer};
use crate::render::{render_id_map, render_image, save_id_map};
use crate::score::ScoreTable;
use crate::site::{normalization_scale, param, ClampBounds, Site, SiteStore, PARAM_COUNT};
use crate::train::{adam_step, AdamParams};

/// Boolean domain on the pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    /// Pixels whose center lies strictly inside the circle of radius `r`
    /// around the image center.
    pub fn disk(width: usize, height: usize, r: f64) -> Self {
        let (cx, cy) = disk_center(width, height);
        Mask::from_fn(width, height, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy < r * r
        })
    }

    /// Thresholds luminance at 0.5.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let lum = img.luminance();
        Mask { width: img.width, height: img.height, data: lum.iter().map(|&l| l > 0.5).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Mask::from_image(&ImageBuffer::load(path)?))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Mask pixels whose four neighbours are also in the mask. These are
    /// where the stencil is evaluated.
    pub fn interior(&self) -> Vec<usize> {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::new();
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                if self.get(x, y) && self.get(x - 1, y) && self.get(x + 1, y) && self.get(x, y - 1) && self.get(x, y + 1) {
                    out.push(y * w + x);
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub fn disk_center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// `R^2 - rho^2` inside the disk, 0 outside. Satisfies `lap u = -4` with
/// `u = 0` on the circle.
pub fn disk_solution(width: usize, height: usize, r: f64) -> Vec<f64> {
    let (cx, cy) = disk_center(width, height);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let rho2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            out.push((r * r - rho2).max(0.0));
        }
    }
    out
}

/// Closed contour loops of the mask at the 0.5 level, by marching squares
/// over the mask padded with background. Vertices sit on midpoints between
/// pixel centers. Saddle cells keep foreground corners apart.
pub fn contour(mask: &Mask) -> Vec<Vec<[f64; 2]>> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    // Edge points are keyed by (kind, x, y): kind 0 is the horizontal edge
    // between (x, y) and (x + 1, y), kind 1 the vertical edge between
    // (x, y) and (x, y + 1).
    type Key = (u8, i64, i64);
    let mut adj: std::collections::BTreeMap<Key, Vec<Key>> = std::collections::BTreeMap::new();
    let mut link = |a: Key, b: Key| {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    };
    for y in -1..h {
        for x in -1..w {
            let tl = inside(x, y);
            let tr = inside(x + 1, y);
            let bl = inside(x, y + 1);
            let br = inside(x + 1, y + 1);
            let top = (0u8, x, y);
            let bottom = (0u8, x, y + 1);
            let left = (1u8, x, y);
            let right = (1u8, x + 1, y);
            let mut edges = Vec::with_capacity(4);
            if tl != tr {
                edges.push(top);
            }
            if tr != br {
                edges.push(right);
            }
            if bl != br {
                edges.push(bottom);
            }
            if tl != bl {
                edges.push(left);
            }
            match edges.len() {
                2 => link(edges[0], edges[1]),
                4 if tl => {
                    link(top, left);
                    link(right, bottom);
                }
                4 => {
                    link(top, right);
                    link(left, bottom);
                }
                _ => {}
            }
        }
    }
    let point = |k: Key| match k.0 {
        0 => [k.1 as f64 + 0.5, k.2 as f64],
        _ => [k.1 as f64, k.2 as f64 + 0.5],
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut loops = Vec::new();
    for &start in adj.keys() {
        if seen.contains(&start) {
            continue;
        }
        let mut poly = vec![point(start)];
        seen.insert(start);
        let mut prev = start;
        let mut cur = adj[&start][0];
        while cur != start {
            seen.insert(cur);
            poly.push(point(cur));
            let next = adj[&cur].iter().copied().find(|&n| n != prev).unwrap_or(prev);
            prev = cur;
            cur = next;
        }
        loops.push(poly);
    }
    loops
}

fn loop_length(poly: &[[f64; 2]]) -> f64 {
    (0..poly.len()).map(|i| dist(poly[i], poly[(i + 1) % poly.len()])).sum()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Total length of all raw contour loops.
pub fn contour_length(mask: &Mask) -> f64 {
    contour(mask).iter().map(|p| loop_length(p)).sum()
}

/// Passes of `[1/4, 1/2, 1/4]` vertex smoothing applied before boundary
/// sites are placed. The raw staircase overestimates a disk's perimeter by
/// about 6%; two passes bring it within 1%.
pub const CONTOUR_SMOOTHING: usize = 2;

pub fn smooth_loop(poly: &[[f64; 2]], passes: usize) -> Vec<[f64; 2]> {
    let n = poly.len();
    let mut cur = poly.to_vec();
    for _ in 0..passes {
        cur = (0..n)
            .map(|i| {
                let (a, b, c) = (cur[(i + n - 1) % n], cur[i], cur[(i + 1) % n]);
                [0.25 * a[0] + 0.5 * b[0] + 0.25 * c[0], 0.25 * a[1] + 0.5 * b[1] + 0.25 * c[1]]
            })
            .collect();
    }
    cur
}

/// Total length of the smoothed loops that boundary sites are placed on.
pub fn boundary_length(mask: &Mask) -> f64 {
    contour(mask).iter().map(|p| loop_length(&smooth_loop(p, CONTOUR_SMOOTHING))).sum()
}

/// Rotates a loop to start where it crosses the horizontal line through
/// its vertex centroid, at the crossing with the largest x.
fn rotate_to_start(poly: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = poly.len();
    let cy = poly.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let mut best: Option<(f64, usize, [f64; 2])> = None;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] - cy) * (b[1] - cy) > 0.0 || a[1] == b[1] {
            continue;
        }
        let t = (cy - a[1]) / (b[1] - a[1]);
        let p = [a[0] + t * (b[0] - a[0]), cy];
        if best.is_none_or(|(x, _, _)| p[0] > x) {
            best = Some((p[0], i, p));
        }
    }
    let Some((_, i, p)) = best else {
        return poly.to_vec();
    };
    let mut out = vec![p];
    for j in 1..=n {
        let q = poly[(i + j) % n];
        if q != p {
            out.push(q);
        }
    }
    out
}

/// Evenly spaced points along a closed polyline, starting at its first
/// vertex.
fn sample_loop(poly: &[[f64; 2]], count: usize) -> Vec<[f64; 2]> {
    let len = loop_length(poly);
    let n = poly.len();
    let mut out = Vec::with_capacity(count);
    let (mut seg, mut seg_start) = (0, 0.0);
    for j in 0..count {
        let target = len * j as f64 / count as f64;
        while seg < n - 1 && seg_start + dist(poly[seg], poly[(seg + 1) % n]) < target {
            seg_start += dist(poly[seg], poly[(seg + 1) % n]);
            seg += 1;
        }
        let (a, b) = (poly[seg], poly[(seg + 1) % n]);
        let l = dist(a, b);
        let t = if l > 0.0 { ((target - seg_start) / l).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Places `n_boundary` sites along the smoothed mask contour at equal arc-length
/// spacing, each carrying `value`. Loops receive sites in proportion to
/// their length. The caller freezes them.
pub fn init_boundary_sites(mask: &Mask, n_boundary: usize, value: f64, log_tau: f64, radius: f64) -> Result<Vec<Site>> {
    let loops: Vec<_> = contour(mask).iter().map(|p| smooth_loop(p, CONTOUR_SMOOTHING)).collect();
    if loops.is_empty() {
        return Err(SadError::InvalidDomain("mask has no contour".into()));
    }
    let lengths: Vec<f64> = loops.iter().map(|l| loop_length(l)).collect();
    let total: f64 = lengths.iter().sum();
    // Largest-remainder apportionment.
    let quotas: Vec<f64> = lengths.iter().map(|l| l / total * n_boundary as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..loops.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = n_boundary - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    let max = [(mask.width - 1) as f64, (mask.height - 1) as f64];
    let mut sites = Vec::with_capacity(n_boundary);
    for (poly, &c) in loops.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        for p in sample_loop(&rotate_to_start(poly), c) {
            sites.push(Site {
                pos: [p[0].clamp(0.0, max[0]), p[1].clamp(0.0, max[1])],
                log_tau,
                radius,
                color: [value, 0.0, 0.0],
                dir: [1.0, 0.0],
                aniso: 0.0,
            });
        }
    }
    Ok(sites)
}

/// Uniformly samples `n` distinct mask pixels for interior sites with value
/// `value` and a subpixel jitter.
pub fn init_interior_sites(mask: &Mask, n: usize, value: f64, log_tau: f64, radius: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Site>> {
    let mut pixels: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
    if n > pixels.len() {
        return invalid(format!("cannot place {n} interior sites on {} mask pixels", pixels.len()));
    }
    // Partial Fisher-Yates.
    let len = pixels.len();
    for i in 0..n {
        let j = rng.random_range(i..len);
        pixels.swap(i, j);
    }
    let mut picked = pixels[..n].to_vec();
    picked.sort_unstable();
    let w = mask.width;
    let max = [(mask.width - 1) as f64, (mask.height - 1) as f64];
    Ok(picked
        .into_iter()
        .map(|i| {
            let jx: f64 = rng.random_range(-0.3..0.3);
            let jy: f64 = rng.random_range(-0.3..0.3);
            Site {
                pos: [((i % w) as f64 + jx).clamp(0.0, max[0]), ((i / w) as f64 + jy).clamp(0.0, max[1])],
                log_tau,
                radius,
                color: [value, 0.0, 0.0],
                dir: [1.0, 0.0],
                aniso: 0.0,
            }
        })
        .collect())
}

/// A scalar SAD field over a masked domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub store: SiteStore,
    pub mask: Mask,
}

impl ScalarField {
    /// Renders `u` on the pixel grid.
    pub fn render(&self, field: &CandidateField) -> Result<Vec<f64>> {
        Ok(render_image(&self.store, field)?.pixels.iter().map(|c| c[0]).collect())
    }
}

/// 5-point Laplacian residual `lap u - f` at each listed pixel.
pub fn stencil_residual(u: &[f64], width: usize, interior: &[usize], f: f64) -> Vec<f64> {
    interior.iter().map(|&i| u[i - 1] + u[i + 1] + u[i - width] + u[i + width] - 4.0 * u[i] - f).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// Mean squared stencil residual over the interior pixels.
    pub loss: f64,
    pub grads: GradBuffer,
}

/// Mean squared residual of `lap u = f` and its gradient with respect to
/// every site parameter. Frozen sites receive gradients too; the optimizer
/// ignores them.
pub fn poisson_residual(sf: &ScalarField, field: &CandidateField, f: f64, mode: MergeMode, tile: usize) -> Result<Residual> {
    let (w, h) = (sf.mask.width, sf.mask.height);
    if field.image_width != w || field.image_height != h {
        return invalid("candidate field and mask sizes differ");
    }
    let interior = sf.mask.interior();
    if interior.is_empty() {
        return Err(SadError::InvalidDomain("mask has no interior pixels".into()));
    }
    let u = sf.render(field)?;
    let r = stencil_residual(&u, w, &interior, f);
    let n = interior.len() as f64;
    let loss = r.iter().map(|v| v * v).sum::<f64>() / n;
    let mut dldu = vec![[0.0; 3]; w * h];
    for (&i, &ri) in interior.iter().zip(&r) {
        let g = 2.0 * ri / n;
        dldu[i][0] -= 4.0 * g;
        dldu[i - 1][0] += g;
        dldu[i + 1][0] += g;
        dldu[i - w][0] += g;
        dldu[i + w][0] += g;
    }
    let mut grads = backward_from_pixel_grads(&sf.store, field, &dldu, mode, tile)?;
    for g in &mut grads.grads {
        g[param::COLOR_G] = 0.0;
        g[param::COLOR_B] = 0.0;
    }
    Ok(Residual { loss, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoissonConfig {
    pub interior_sites: usize,
    pub boundary_sites: usize,
    pub steps: usize,
    /// Constant source term.
    pub source: f64,
    /// Dirichlet value on the contour.
    pub boundary_value: f64,
    pub seed: u64,
    pub k: usize,
    pub init_log_tau: f64,
    /// Learning rates in parameter-slot order.
    pub lr: [f64; PARAM_COUNT],
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cand_passes: usize,
    pub merge_mode: MergeMode,
    pub tile_size: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        PoissonConfig {
            interior_sites: 2000,
            boundary_sites: 512,
            steps: 2000,
            source: -4.0,
            boundary_value: 0.0,
            seed: 0,
            k: 8,
            init_log_tau: 5.0,
            lr: [0.05, 0.05, 0.02, 0.05, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cand_passes: 1,
            merge_mode: MergeMode::Deterministic,
            tile_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonRow {
    pub step: usize,
    pub residual_mse: f64,
    /// MSE against a known solution over mask pixels, when one is given.
    pub error_mse: Option<f64>,
}

pub const POISSON_HISTORY_HEADER: &str = "step,residual_mse,error_mse";

impl PoissonRow {
    pub fn to_csv(&self) -> String {
        match self.error_mse {
            Some(e) => format!("{},{:e},{:e}", self.step, self.residual_mse, e),
            None => format!("{},{:e},", self.step, self.residual_mse),
        }
    }
}

pub struct PoissonSolver {
    pub config: PoissonConfig,
    pub field: ScalarField,
    pub candidates: CandidateField,
    pub history: Vec<PoissonRow>,
    pub step: usize,
    truth: Option<Vec<f64>>,
    adam: AdamParams,
}

impl PoissonSolver {
    /// Builds boundary and interior sites on the mask. Interior sites start
    /// at the boundary value.
    pub fn new(mask: Mask, config: PoissonConfig) -> Result<Self> {
        let (w, h) = (mask.width, mask.height);
        if w < 3 || h < 3 {
            return Err(SadError::InvalidDomain(format!("{w}x{h} grid is too small")));
        }
        if mask.interior().is_empty() {
            return Err(SadError::InvalidDomain("mask has no interior pixels".into()));
        }
        if config.k == 0 || config.k > crate::field::MAX_K {
            return invalid(format!("k must be in 1..={}", crate::field::MAX_K));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let area = mask.count() as f64;
        let spacing = (area / (config.interior_sites + config.boundary_sites).max(1) as f64).sqrt().max(1.0);
        let boundary = init_boundary_sites(&mask, config.boundary_sites, config.boundary_value, config.init_log_tau, spacing)?;
        let interior = init_interior_sites(&mask, config.interior_sites, config.boundary_value, config.init_log_tau, spacing, &mut rng)?;
        let mut store = SiteStore::new();
        for s in boundary {
            let id = store.push(s);
            store.frozen[id as usize] = true;
        }
        for s in interior {
            store.push(s);
        }
        let mut candidates = CandidateField::new(w, h, config.k)?;
        let table = ScoreTable::new(&store, normalization_scale(w, h)?);
        refresh_with_table(&table, &mut candidates, RefreshMode::Full, config.cand_passes.max(4), Self::params(&config));
        let adam = AdamParams { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: config.adam_eps };
        Ok(PoissonSolver { config, field: ScalarField { store, mask }, candidates, history: Vec::new(), step: 0, truth: None, adam })
    }

    fn params(config: &PoissonConfig) -> PropagationParams {
        PropagationParams { inject: 4, seed: config.seed }
    }

    /// Enables error tracking against a known solution.
    pub fn with_truth(mut self, truth: Vec<f64>) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn error_mse(&self, u: &[f64]) -> Option<f64> {
        let truth = self.truth.as_ref()?;
        let mask = &self.field.mask;
        let (sum, n) = u
            .iter()
            .zip(truth)
            .zip(&mask.data)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), ((a, b), _)| (s + (a - b) * (a - b), n + 1));
        Some(sum / n.max(1) as f64)
    }

    /// Refresh, residual, Adam. The row reports the residual before the
    /// update.
    pub fn step(&mut self) -> Result<PoissonRow> {
        self.step += 1;
        let (w, h) = (self.field.mask.width, self.field.mask.height);
        if self.step > 1 {
            let table = ScoreTable::new(&self.field.store, normalization_scale(w, h)?);
            refresh_with_table(&table, &mut self.candidates, RefreshMode::WarmStart, self.config.cand_passes, Self::params(&self.config));
        }
        let res = poisson_residual(&self.field, &self.candidates, self.config.source, self.config.merge_mode, self.config.tile_size)?;
        if !res.loss.is_finite() {
            return Err(SadError::Numeric(format!("residual became non-finite at step {}", self.step)));
        }
        let error_mse = match self.truth {
            Some(_) => self.error_mse(&self.field.render(&self.candidates)?),
            None => None,
        };
        let bounds = ClampBounds { width: w, height: h, clamp_color: false };
        adam_step(&mut self.field.store, &res.grads, self.step as u64, &self.adam, bounds)?;
        let row = PoissonRow { step: self.step, residual_mse: res.loss, error_mse };
        if self.step % 100 == 0 {
            info!("step {:>5}  residual {:.4e}  error {:?}", row.step, row.residual_mse, row.error_mse);
        }
        self.history.push(row);
        Ok(row)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            self.step()?;
        }
        Ok(())
    }

    /// Residual and error of the current model after a final refresh.
    pub fn evaluate(&mut self) -> Result<PoissonRow> {
        let (w, h) = (self.field.mask.width, self.field.mask.height);
        let table = ScoreTable::new(&self.field.store, normalization_scale(w, h)?);
        refresh_with_table(&table, &mut self.candidates, RefreshMode::WarmStart, 4, Self::params(&self.config));
        let u = self.field.render(&self.candidates)?;
        let r = stencil_residual(&u, w, &self.field.mask.interior(), self.config.source);
        Ok(PoissonRow {
            step: self.step,
            residual_mse: r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64,
            error_mse: self.error_mse(&u),
        })
    }

    /// FNV-1a over the parameter bits of every frozen site, in id order.
    pub fn frozen_hash(&self) -> u64 {
        let store = &self.field.store;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (i, site) in store.sites.iter().enumerate().filter(|(i, _)| store.frozen[*i]) {
            for byte in (i as u64).to_le_bytes().into_iter().chain(site.to_params().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h = (h ^ byte as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Writes `solution.png`, `shaded.png` and `sites.png`.
    pub fn save_panels(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (w, h) = (self.field.mask.width, self.field.mask.height);
        let u = self.field.render(&self.candidates)?;
        let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
        save_gray(dir.join("solution.png"), w, h, &u, lo, hi)?;
        shade(&u, w, h, hi - lo).save(dir.join("shaded.png"))?;
        let ids = render_id_map(&self.field.store, &self.candidates)?;
        save_id_map(dir.join("sites.png"), &ids, w, h)
    }
}

/// Lambertian shading of `u` as a heightfield, with heights scaled so the
/// full range spans a quarter of the image width.
pub fn shade(u: &[f64], w: usize, h: usize, range: f64) -> ImageBuffer {
    let k = if range > 0.0 { 0.25 * w as f64 / range } else { 1.0 };
    let at = |x: usize, y: usize| u[y * w + x] * k;
    let light = {
        let l = [-0.5f64, -0.6, 0.8];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    ImageBuffer::from_fn(w, h, |x, y| {
        let dx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
        let dy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        let d = ((-dx * light[0] - dy * light[1] + light[2]) / n).clamp(0.0, 1.0);
        let v = 0.15 + 0.85 * d;
        [v, v, v]
    })
}
