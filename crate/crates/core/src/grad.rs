//! Analytic gradients of the reconstruction loss and removal deltas.
//!
//! Per pixel, with `c = sum_i w_i c_i`, `e = c - I` and upstream `dL/dc`:
//!
//! - `dL/dc_i = w_i dL/dc`
//! - `dL/dl_i = w_i (dL/dc . c_i - dL/dc . c)`
//! - `dl/dlog_tau = l_i`, `dl/dr = tau s`, `dl/dq = -tau s / (2 sqrt q)`
//! - `dq/dp = -2 G (x - p)`, and `dq/d(dir, aniso)` from the metric
//!   expanded on the raw (unnormalized) direction.
//!
//! Candidate lists are constants: gradients only flow through the weights
//! of listed candidates.

use crate::config::MergeMode;
use crate::error::{Result, SadError};
use crate::field::{CandidateField, INVALID_ID};
use crate::image::ImageBuffer;
use crate::reduce::{reduce_naive, reduce_tiled, Accum, Fixed, Sink};
use crate::render::{table_for, PixelEval};
use crate::score::ScoreTable;
use crate::site::{param, SiteStore, PARAM_COUNT};

/// Accumulator slots per site: the ten parameter gradients plus the
/// removal delta.
pub const GRAD_SLOTS: usize = PARAM_COUNT + 1;
pub const REMOVAL_SLOT: usize = PARAM_COUNT;

/// Removal delta used when a site carries (almost) all of a pixel's weight:
/// the largest possible per-pixel squared error.
pub const SOLE_OWNER_DELTA: f64 = 3.0;

/// Per-site gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    /// `dL/dparam`, indexed by [`crate::site::param`].
    pub grads: Vec<[f64; PARAM_COUNT]>,
    /// Removal delta summed over pixels, divided by the number of pixels
    /// with a non-empty candidate list.
    pub removal: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(n: usize) -> Self {
        GradBuffer { grads: vec![[0.0; PARAM_COUNT]; n], removal: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: GradBuffer,
    /// Mean over pixels of `||c - I||^2`.
    pub loss: f64,
    pub valid_pixels: usize,
    /// Contributions that bypassed the tile tables.
    pub overflowed: usize,
}

/// `||c' - I||^2 - ||c - I||^2` where `c'` renormalizes the blend without
/// site `k`. Returns `+inf` when `w_k >= 1 - 1e-6`.
pub fn removal_delta_pixel(rendered: [f64; 3], target: [f64; 3], w_k: f64, c_k: [f64; 3]) -> f64 {
    if w_k >= 1.0 - 1e-6 {
        return f64::INFINITY;
    }
    let mut before = 0.0;
    let mut after = 0.0;
    for ch in 0..3 {
        let c2 = (rendered[ch] - w_k * c_k[ch]) / (1.0 - w_k);
        before += (rendered[ch] - target[ch]).powi(2);
        after += (c2 - target[ch]).powi(2);
    }
    after - before
}

#[derive(Clone, Copy)]
enum Upstream<'a> {
    /// MSE against a target image; also produces loss and removal deltas.
    Target(&'a ImageBuffer),
    /// Caller-supplied `dL/dc` per pixel.
    PixelGrad(&'a [[f64; 3]]),
}

/// Per-site values reused by every pixel.
struct SiteConst {
    ef: Vec<[f64; 4]>,
}

impl SiteConst {
    fn new(store: &SiteStore) -> Self {
        SiteConst {
            ef: store.sites.iter().map(|s| [s.aniso.exp(), (-s.aniso).exp(), s.dir[0], s.dir[1]]).collect(),
        }
    }
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn sq_err(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Removal delta for candidate `k`, evaluated from the remaining
/// candidates so that dominant weights do not cancel catastrophically.
#[inline]
pub(crate) fn removal_from_eval(ev: &PixelEval, store: &SiteStore, k: usize, rendered: [f64; 3], target: [f64; 3]) -> f64 {
    let w_k = ev.weights[k];
    if w_k >= 1.0 - 1e-6 {
        return SOLE_OWNER_DELTA;
    }
    if w_k == 0.0 {
        return 0.0;
    }
    let c2 = if w_k < 0.5 {
        let ck = store.sites[ev.ids[k] as usize].color;
        let inv = 1.0 / (1.0 - w_k);
        [(rendered[0] - w_k * ck[0]) * inv, (rendered[1] - w_k * ck[1]) * inv, (rendered[2] - w_k * ck[2]) * inv]
    } else {
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for j in 0..ev.n {
            if j == k {
                continue;
            }
            let cj = store.sites[ev.ids[j] as usize].color;
            let e = ev.exps[j];
            num[0] += e * cj[0];
            num[1] += e * cj[1];
            num[2] += e * cj[2];
            den += e;
        }
        if den <= 0.0 {
            return SOLE_OWNER_DELTA;
        }
        [num[0] / den, num[1] / den, num[2] / den]
    };
    sq_err(c2, target) - sq_err(rendered, target)
}

/// Gradient contributions of one pixel. Returns the pixel's squared error
/// (zero for caller-supplied upstream gradients).
#[inline]
fn pixel_backward(
    table: &ScoreTable,
    consts: &SiteConst,
    store: &SiteStore,
    up: Upstream<'_>,
    list: &[u32],
    x: usize,
    y: usize,
    width: usize,
    red: &mut impl Sink<GRAD_SLOTS>,
) -> f64 {
    let (xf, yf) = (x as f64, y as f64);
    let Some(ev) = PixelEval::new(table, list, xf, yf) else {
        return 0.0;
    };
    let c = ev.blend(store);
    let (dldc, target, loss) = match up {
        Upstream::Target(img) => {
            let t = img.pixels[y * width + x];
            let e = [c[0] - t[0], c[1] - t[1], c[2] - t[2]];
            ([2.0 * e[0], 2.0 * e[1], 2.0 * e[2]], Some(t), dot3(e, e))
        }
        Upstream::PixelGrad(g) => (g[y * width + x], None, 0.0),
    };
    let gbar = dot3(dldc, c);
    for i in 0..ev.n {
        let id = ev.ids[i];
        let site = &store.sites[id as usize];
        let p = &table.sites[id as usize];
        let w = ev.weights[i];
        let mut out = [0.0; GRAD_SLOTS];
        out[param::COLOR_R] = w * dldc[0];
        out[param::COLOR_G] = w * dldc[1];
        out[param::COLOR_B] = w * dldc[2];
        let dl = w * (dot3(dldc, site.color) - gbar);
        out[param::LOG_TAU] = dl * ev.logits[i];
        out[param::RADIUS] = dl * p.tau_s;
        let dx = xf - p.px;
        let dy = yf - p.py;
        let gx = p.g00 * dx + p.g01 * dy;
        let gy = p.g01 * dx + p.g11 * dy;
        let q = dx * gx + dy * gy;
        let sq = q.max(0.0).sqrt();
        if sq > 1e-12 {
            let dldq = -dl * p.tau_s / (2.0 * sq);
            out[param::POS_X] = dldq * (-2.0 * gx);
            out[param::POS_Y] = dldq * (-2.0 * gy);
            let [e, f, ux, uy] = consts.ef[id as usize];
            let (dxx, dxy, dyy) = (dx * dx, 2.0 * dx * dy, dy * dy);
            let dq_da = dxx * (e * ux * ux - f * uy * uy) + dxy * (e + f) * ux * uy + dyy * (e * uy * uy - f * ux * ux);
            let dq_dux = dxx * (2.0 * e * ux) + dxy * (e - f) * uy + dyy * (2.0 * f * ux);
            let dq_duy = dxx * (2.0 * f * uy) + dxy * (e - f) * ux + dyy * (2.0 * e * uy);
            out[param::ANISO] = dldq * dq_da;
            out[param::DIR_X] = dldq * dq_dux;
            out[param::DIR_Y] = dldq * dq_duy;
        }
        if let Some(t) = target {
            out[REMOVAL_SLOT] = removal_from_eval(&ev, store, i, c, t);
        }
        for v in &mut out {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        red.add(id, &out);
    }
    if loss.is_finite() {
        loss
    } else {
        0.0
    }
}

fn count_valid(table: &ScoreTable, field: &CandidateField) -> usize {
    let mut n = 0;
    for y in 0..field.image_height {
        for x in 0..field.image_width {
            if field.pixel_list(x, y).iter().any(|id| *id != INVALID_ID && table.is_active(*id)) {
                n += 1;
            }
        }
    }
    n
}

fn run<A: Accum>(store: &SiteStore, field: &CandidateField, up: Upstream<'_>, tile: usize) -> Result<(Vec<[f64; GRAD_SLOTS]>, f64, usize, ScoreTable)> {
    let table = table_for(store, field)?;
    let consts = SiteConst::new(store);
    let w = field.image_width;
    let r = reduce_tiled::<A, GRAD_SLOTS, _>(w, field.image_height, tile, store.len(), |x, y, red| {
        pixel_backward(&table, &consts, store, up, field.pixel_list(x, y), x, y, w, red)
    });
    Ok((r.values(), r.scalar.value(), r.overflowed, table))
}

fn dispatch(store: &SiteStore, field: &CandidateField, up: Upstream<'_>, mode: MergeMode, tile: usize) -> Result<(Vec<[f64; GRAD_SLOTS]>, f64, usize, ScoreTable)> {
    match mode {
        MergeMode::Deterministic => run::<Fixed>(store, field, up, tile),
        MergeMode::Fast => run::<f64>(store, field, up, tile),
    }
}

/// Loss and gradients of `mean ||render - target||^2`.
pub fn backward(store: &SiteStore, field: &CandidateField, target: &ImageBuffer, mode: MergeMode, tile: usize) -> Result<Backward> {
    if target.width != field.image_width || target.height != field.image_height {
        return Err(SadError::InvalidInput(format!(
            "target is {}x{} but the candidate field covers {}x{}",
            target.width, target.height, field.image_width, field.image_height
        )));
    }
    let (sums, loss_sum, overflowed, table) = dispatch(store, field, Upstream::Target(target), mode, tile)?;
    Ok(finish_backward(store, field, &table, &sums, loss_sum, overflowed))
}

/// Reference for [`backward`]: the same per-pixel contributions summed in
/// row-major pixel order with the fixed-point accumulator, no tiling.
pub fn backward_naive(store: &SiteStore, field: &CandidateField, target: &ImageBuffer) -> Result<Backward> {
    if target.width != field.image_width || target.height != field.image_height {
        return Err(SadError::InvalidInput("target and candidate field sizes differ".into()));
    }
    let table = table_for(store, field)?;
    let consts = SiteConst::new(store);
    let w = field.image_width;
    let r = reduce_naive::<Fixed, GRAD_SLOTS, _>(w, field.image_height, store.len(), |x, y, mut sink| {
        pixel_backward(&table, &consts, store, Upstream::Target(target), field.pixel_list(x, y), x, y, w, &mut sink)
    });
    Ok(finish_backward(store, field, &table, &r.values(), r.scalar.value(), 0))
}

fn finish_backward(store: &SiteStore, field: &CandidateField, table: &ScoreTable, sums: &[[f64; GRAD_SLOTS]], loss_sum: f64, overflowed: usize) -> Backward {
    let p = (field.image_width * field.image_height) as f64;
    let valid = count_valid(table, field);
    let mut grads = GradBuffer::zeros(store.len());
    for (i, s) in sums.iter().enumerate() {
        for j in 0..PARAM_COUNT {
            grads.grads[i][j] = s[j] / p;
        }
        grads.removal[i] = if valid > 0 { s[REMOVAL_SLOT] / valid as f64 } else { 0.0 };
    }
    Backward { grads, loss: loss_sum / p, valid_pixels: valid, overflowed }
}

/// Gradients for an arbitrary per-pixel upstream `dL/dc` (row-major, one
/// entry per pixel). No normalization is applied.
pub fn backward_from_pixel_grads(store: &SiteStore, field: &CandidateField, dldc: &[[f64; 3]], mode: MergeMode, tile: usize) -> Result<GradBuffer> {
    if dldc.len() != field.image_width * field.image_height {
        return Err(SadError::InvalidInput(format!("expected {} pixel gradients, got {}", field.image_width * field.image_height, dldc.len())));
    }
    let (sums, _, _, _) = dispatch(store, field, Upstream::PixelGrad(dldc), mode, tile)?;
    let mut grads = GradBuffer::zeros(store.len());
    for (i, s) in sums.iter().enumerate() {
        grads.grads[i].copy_from_slice(&s[..PARAM_COUNT]);
    }
    Ok(grads)
}

/// Forward-only loss with a fixed candidate field.
pub fn loss(store: &SiteStore, field: &CandidateField, target: &ImageBuffer) -> Result<f64> {
    let img = crate::render::render_image(store, field)?;
    let sum: f64 = img.pixels.iter().zip(&target.pixels).map(|(a, b)| sq_err(*a, *b)).sum();
    Ok(sum / img.pixels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::{refresh, PropagationParams, RefreshMode};
    use crate::site::Site;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(n: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> SiteStore {
        SiteStore::from_sites(
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(-3.1..3.1);
                    Site {
                        pos: [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)],
                        log_tau: rng.random_range(3.0..5.0),
                        radius: rng.random_range(1.0..4.0),
                        color: [rng.random(), rng.random(), rng.random()],
                        dir: [a.cos(), a.sin()],
                        aniso: rng.random_range(-1.0..1.0),
                    }
                })
                .collect(),
        )
    }

    fn field_for(store: &SiteStore, w: usize, h: usize) -> CandidateField {
        let mut f = CandidateField::new(w, h, 8).unwrap();
        refresh(store, &mut f, RefreshMode::Full, 8, PropagationParams::default()).unwrap();
        f
    }

    #[test]
    fn perfect_reconstruction_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = random_store(30, 32, 32, &mut rng);
        let f = field_for(&store, 32, 32);
        let target = crate::render::render_image(&store, &f).unwrap();
        let b = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        assert_eq!(b.loss, 0.0);
        assert!(b.grads.grads.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn single_site_color_gradient() {
        let store = SiteStore::from_sites(vec![Site { pos: [7.0, 3.0], color: [0.2, 0.5, 0.9], ..Site::default() }]);
        let f = field_for(&store, 16, 8);
        let target = ImageBuffer::filled(16, 8, [0.4, 0.4, 0.4]);
        let b = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        let g = b.grads.grads[0];
        let want = [2.0 * (0.2 - 0.4), 2.0 * (0.5 - 0.4), 2.0 * (0.9 - 0.4)];
        for ch in 0..3 {
            assert!((g[param::COLOR_R + ch] - want[ch]).abs() < 1e-12);
        }
        for j in [param::POS_X, param::POS_Y, param::LOG_TAU, param::RADIUS, param::DIR_X, param::DIR_Y, param::ANISO] {
            assert_eq!(g[j], 0.0);
        }
        assert_eq!(b.grads.removal[0], SOLE_OWNER_DELTA);
    }

    #[test]
    fn dimension_mismatch() {
        let store = SiteStore::from_sites(vec![Site::default()]);
        let f = field_for(&store, 8, 8);
        assert!(backward(&store, &f, &ImageBuffer::new(8, 9), MergeMode::Deterministic, 16).is_err());
        assert!(backward_from_pixel_grads(&store, &f, &[[0.0; 3]; 3], MergeMode::Deterministic, 16).is_err());
    }

    #[test]
    fn removal_examples() {
        assert_eq!(removal_delta_pixel([0.3, 0.2, 0.1], [0.0; 3], 0.0, [1.0; 3]), 0.0);
        let d = removal_delta_pixel([0.5; 3], [0.0; 3], 0.5, [1.0; 3]);
        assert!((d + 0.75).abs() < 1e-15);
        assert!(removal_delta_pixel([0.5; 3], [0.0; 3], 1.0, [1.0; 3]).is_infinite());
    }

    #[test]
    fn removal_matches_rerender() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let n = rng.random_range(2..=8);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let target = [rng.random(), rng.random(), rng.random()];
            let blend = |skip: Option<usize>| {
                let z: f64 = (0..n).filter(|j| Some(*j) != skip).map(|j| logits[j].exp()).sum();
                let mut c = [0.0; 3];
                for j in (0..n).filter(|j| Some(*j) != skip) {
                    for ch in 0..3 {
                        c[ch] += logits[j].exp() / z * colors[j][ch];
                    }
                }
                c
            };
            let c = blend(None);
            let k = rng.random_range(0..n);
            let w_k = logits[k].exp() / (0..n).map(|j| logits[j].exp()).sum::<f64>();
            let direct = sq_err(blend(Some(k)), target) - sq_err(c, target);
            assert!((removal_delta_pixel(c, target, w_k, colors[k]) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_weight_site_has_zero_removal() {
        let store = SiteStore::from_sites(vec![
            Site { pos: [2.0, 2.0], log_tau: 20.0, color: [1.0, 0.0, 0.0], ..Site::default() },
            Site { pos: [13.0, 13.0], log_tau: 20.0, color: [0.0, 1.0, 0.0], ..Site::default() },
            Site { pos: [2.0, 13.0], log_tau: 20.0, ..Site::default() },
        ]);
        let mut f = CandidateField::new(16, 16, 8).unwrap();
        for c in 0..256 {
            f.list_mut(c)[..2].copy_from_slice(&[0, 1]);
        }
        let target = ImageBuffer::filled(16, 16, [0.5; 3]);
        let b = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        assert_eq!(b.grads.removal[2], 0.0);
        assert!(b.grads.grads[2].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (w, h) = (32, 32);
        for _ in 0..3 {
            let store = random_store(20, w, h, &mut rng);
            let f = field_for(&store, w, h);
            let target = ImageBuffer::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
            let b = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
            for id in 0..store.len() {
                for j in 0..PARAM_COUNT {
                    let hstep = 1e-5;
                    let at = |delta: f64| {
                        let mut s = store.clone();
                        let v = s.sites[id].to_params()[j];
                        s.sites[id].set_param(j, v + delta);
                        loss(&s, &f, &target).unwrap()
                    };
                    let fd = (at(hstep) - at(-hstep)) / (2.0 * hstep);
                    let an = b.grads.grads[id][j];
                    if an.abs() < 1e-6 {
                        assert!((an - fd).abs() < 1e-8, "site {id} slot {j}: {an} vs {fd}");
                    } else {
                        assert!(((an - fd) / an).abs() < 1e-4, "site {id} slot {j}: {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn tiled_equals_naive_with_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let store = random_store(300, 32, 32, &mut rng);
        let mut f = field_for(&store, 32, 32);
        // Pixel lists in the first tile cycle through all 300 ids.
        for y in 0..16 {
            for x in 0..16 {
                let p = y * 16 + x;
                let list: Vec<u32> = (0..8).map(|j| ((p * 8 + j) % 300) as u32).collect();
                f.list_mut(y * 32 + x).copy_from_slice(&list);
            }
        }
        let target = ImageBuffer::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
        let tiled = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        let naive = backward_naive(&store, &f, &target).unwrap();
        assert!(tiled.overflowed > 0);
        assert_eq!(tiled.loss.to_bits(), naive.loss.to_bits());
        assert_eq!(tiled.grads, naive.grads);
    }

    #[test]
    fn fast_mode_close_to_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = random_store(60, 48, 40, &mut rng);
        let f = field_for(&store, 48, 40);
        let target = ImageBuffer::from_fn(48, 40, |x, y| [(x as f64 / 48.0), (y as f64 / 40.0), 0.5]);
        let a = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        let b = backward(&store, &f, &target, MergeMode::Fast, 16).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grads.grads.iter().flatten().zip(b.grads.grads.iter().flatten()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-9));
        }
    }

    #[test]
    fn pixel_grad_variant_matches_target_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = random_store(25, 24, 24, &mut rng);
        let f = field_for(&store, 24, 24);
        let target = ImageBuffer::from_fn(24, 24, |_, _| [rng.random(), rng.random(), rng.random()]);
        let img = crate::render::render_image(&store, &f).unwrap();
        let p = (24 * 24) as f64;
        let up: Vec<[f64; 3]> = img.pixels.iter().zip(&target.pixels).map(|(c, t)| std::array::from_fn(|ch| 2.0 * (c[ch] - t[ch]) / p)).collect();
        let a = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        let b = backward_from_pixel_grads(&store, &f, &up, MergeMode::Deterministic, 16).unwrap();
        // The second variant quantizes terms already divided by P, so each
        // of its ~4600 terms may lose up to 2^-60.
        for (x, y) in a.grads.grads.iter().flatten().zip(b.grads.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * x.abs() + 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let store = random_store(30, 32, 32, &mut rng);
        let f = field_for(&store, 32, 32);
        let target = ImageBuffer::from_fn(32, 32, |x, _| [x as f64 / 32.0, 0.3, 0.7]);
        let b = backward(&store, &f, &target, MergeMode::Deterministic, 16).unwrap();
        let mut stepped = store.clone();
        for (site, g) in stepped.sites.iter_mut().zip(&b.grads.grads) {
            let mut p = site.to_params();
            for j in 0..PARAM_COUNT {
                p[j] -= 1e-3 * g[j];
            }
            *site = Site::from_params(&p);
        }
        assert!(loss(&stepped, &f, &target).unwrap() < b.loss);
    }
}
