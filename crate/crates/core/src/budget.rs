//! Adaptive site budget: statistics, densification by splitting, pruning
//! by removal delta, and the schedule simulator that picks percentile
//! scaling for a target bit rate.

use log::warn;

use crate::codec::target_count;
use crate::config::{MergeMode, TrainConfig};
use crate::error::{invalid, Result};
use crate::field::CandidateField;
use crate::grad::removal_from_eval;
use crate::image::ImageBuffer;
use crate::reduce::{reduce_tiled, Accum, Fixed};
use crate::render::{table_for, PixelEval};
use crate::site::{SiteStore, ANISO_RANGE, LOG_TAU_RANGE, RADIUS_RANGE};

/// Largest percentile a scaled schedule may use.
pub const PERCENTILE_CAP: f64 = 0.95;
/// Below this mass the covariance is not trusted.
pub const MIN_COVARIANCE_MASS: f64 = 4.0;
/// Eigenvalue ratios closer to one than this count as isotropic.
pub const ISOTROPY_RATIO: f64 = 1.05;

const STAT_SLOTS: usize = 9;

/// Per-site soft statistics over one pass of the image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SiteStats {
    /// `sum_x w_i(x)`.
    pub mass: f64,
    /// `sum_x w_i(x) ||c(x) - I(x)||^2`.
    pub energy: f64,
    /// Moments of pixel positions weighted by `w_i ||c - I||^2`.
    pub w: f64,
    pub wx: f64,
    pub wy: f64,
    pub wxx: f64,
    pub wxy: f64,
    pub wyy: f64,
    /// Removal delta summed over pixels, divided by the valid pixel count.
    pub removal: f64,
}

impl SiteStats {
    /// Centered covariance `(cxx, cxy, cyy)` of the residual-weighted
    /// positions, or `None` without weight.
    pub fn covariance(&self) -> Option<(f64, f64, f64)> {
        if self.w <= 0.0 {
            return None;
        }
        let mx = self.wx / self.w;
        let my = self.wy / self.w;
        Some((self.wxx / self.w - mx * mx, self.wxy / self.w - mx * my, self.wyy / self.w - my * my))
    }
}

/// Mass, energy, moments and removal delta for every site.
pub fn accumulate_stats(store: &SiteStore, field: &CandidateField, target: &ImageBuffer, mode: MergeMode, tile: usize) -> Result<Vec<SiteStats>> {
    if target.width != field.image_width || target.height != field.image_height {
        return invalid("target and candidate field dimensions differ");
    }
    match mode {
        MergeMode::Deterministic => stats_with::<Fixed>(store, field, target, tile),
        MergeMode::Fast => stats_with::<f64>(store, field, target, tile),
    }
}

fn stats_with<A: Accum>(store: &SiteStore, field: &CandidateField, target: &ImageBuffer, tile: usize) -> Result<Vec<SiteStats>> {
    let table = table_for(store, field)?;
    let w = field.image_width;
    let r = reduce_tiled::<A, STAT_SLOTS, _>(w, field.image_height, tile, store.len(), |x, y, red| {
        let Some(ev) = PixelEval::new(&table, field.pixel_list(x, y), x as f64, y as f64) else {
            return 0.0;
        };
        let c = ev.blend(store);
        let t = target.pixels[y * w + x];
        let err = (0..3).map(|ch| (c[ch] - t[ch]).powi(2)).sum::<f64>();
        let (xf, yf) = (x as f64, y as f64);
        for i in 0..ev.n {
            let wi = ev.weights[i];
            let rho = wi * err;
            let removal = removal_from_eval(&ev, store, i, c, t);
            red.add(ev.ids[i], &[wi, rho, rho, rho * xf, rho * yf, rho * xf * xf, rho * xf * yf, rho * yf * yf, removal]);
        }
        1.0
    });
    let valid = r.scalar.value();
    Ok(r.values()
        .into_iter()
        .map(|v| SiteStats {
            mass: v[0],
            energy: v[1],
            w: v[2],
            wx: v[3],
            wy: v[4],
            wxx: v[5],
            wxy: v[6],
            wyy: v[7],
            removal: if valid > 0.0 { v[8] / valid } else { 0.0 },
        })
        .collect())
}

/// Error density `E / max(m, eps)^alpha`; `None` for sites with `m <= 1`,
/// which never take part in the ranking.
pub fn densify_score(stats: &SiteStats, alpha: f64, eps: f64) -> Option<f64> {
    if stats.mass <= 1.0 {
        return None;
    }
    Some(stats.energy / stats.mass.max(eps).powf(alpha))
}

/// Number of sites an event with the given percentile touches.
pub fn event_count(active: usize, percentile: f64) -> usize {
    (percentile * active as f64).round() as usize
}

/// Split offset `0.5 sqrt(m)` clamped to `[1.5, 48]` pixels.
pub fn split_offset(mass: f64) -> f64 {
    (0.5 * mass.max(0.0).sqrt()).clamp(1.5, 48.0)
}

/// Split axis, child direction and child anisotropy for one parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPlan {
    pub axis: [f64; 2],
    pub dir: [f64; 2],
    pub aniso: f64,
    /// True when the residual covariance was used.
    pub from_covariance: bool,
}

/// Principal axis of the residual covariance when it is informative,
/// otherwise the local image gradient.
pub fn plan_split(stats: &SiteStats, parent_dir: [f64; 2], parent_aniso: f64, gradient: [f64; 2]) -> SplitPlan {
    if stats.mass >= MIN_COVARIANCE_MASS {
        if let Some((cxx, cxy, cyy)) = stats.covariance() {
            let tr = cxx + cyy;
            let disc = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
            let (lmax, lmin) = (0.5 * tr + disc, 0.5 * tr - disc);
            if lmax > 0.0 && (lmin <= 0.0 || lmax / lmin > ISOTROPY_RATIO) {
                let axis = principal_axis(cxx, cxy, cyy, lmax);
                let aniso = if lmin > 0.0 { 0.5 * (lmax / lmin).ln() } else { ANISO_RANGE.1 };
                return SplitPlan { axis, dir: axis, aniso: aniso.clamp(ANISO_RANGE.0, ANISO_RANGE.1), from_covariance: true };
            }
        }
    }
    let n = (gradient[0] * gradient[0] + gradient[1] * gradient[1]).sqrt();
    let axis = if n > 1e-12 && n.is_finite() { [gradient[0] / n, gradient[1] / n] } else { [1.0, 0.0] };
    SplitPlan { axis, dir: parent_dir, aniso: (0.8 * parent_aniso).clamp(ANISO_RANGE.0, ANISO_RANGE.1), from_covariance: false }
}

fn principal_axis(cxx: f64, cxy: f64, cyy: f64, lmax: f64) -> [f64; 2] {
    // Rows of (C - lmax I); pick the better conditioned one.
    let a = [cxy, lmax - cxx];
    let b = [lmax - cyy, cxy];
    let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
    let v = if na >= nb { a } else { b };
    let n = na.max(nb);
    if n <= 1e-300 {
        return [1.0, 0.0];
    }
    [v[0] / n, v[1] / n]
}

/// Outcome of one densify event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyReport {
    /// `(parent slot, new slot)` per split.
    pub splits: Vec<(u32, u32)>,
    pub from_covariance: usize,
    pub skipped_capacity: bool,
}

/// Splits the `round(percentile * active)` eligible sites with the highest
/// error density. The parent slot holds one child, a new slot the other.
pub fn densify(
    store: &mut SiteStore,
    stats: &[SiteStats],
    target: &ImageBuffer,
    gradients: &[[f64; 2]],
    percentile: f64,
    config: &TrainConfig,
) -> Result<DensifyReport> {
    if !(0.0..=1.0).contains(&percentile) {
        return invalid(format!("densify percentile must be in [0, 1], got {percentile}"));
    }
    let mut report = DensifyReport::default();
    let want = event_count(store.count_active(), percentile);
    if want == 0 {
        return Ok(report);
    }
    let mut ranked: Vec<(f64, u32)> = (0..store.len())
        .filter(|&i| store.active[i] && !store.frozen[i])
        .filter_map(|i| densify_score(&stats[i], config.alpha, config.eps_densify).map(|s| (s, i as u32)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(want);
    if let Some(cap) = config.max_sites {
        if store.len() + ranked.len() > cap {
            warn!("densify skipped: {} slots + {} splits exceeds capacity {cap}", store.len(), ranked.len());
            report.skipped_capacity = true;
            return Ok(report);
        }
    }
    let (w, h) = (target.width, target.height);
    let max = [(w - 1) as f64, (h - 1) as f64];
    for (_, id) in ranked {
        let i = id as usize;
        let parent = store.sites[i];
        let px = (parent.pos[0].round().clamp(0.0, max[0])) as usize;
        let py = (parent.pos[1].round().clamp(0.0, max[1])) as usize;
        let plan = plan_split(&stats[i], parent.dir, parent.aniso, gradients[py * w + px]);
        if plan.from_covariance {
            report.from_covariance += 1;
        }
        let off = split_offset(stats[i].mass);
        let mut children = [parent; 2];
        for (c, sign) in children.iter_mut().zip([1.0, -1.0]) {
            c.pos = [
                (parent.pos[0] + sign * off * plan.axis[0]).clamp(0.0, max[0]),
                (parent.pos[1] + sign * off * plan.axis[1]).clamp(0.0, max[1]),
            ];
            c.log_tau = (parent.log_tau - 0.25).clamp(LOG_TAU_RANGE.0, LOG_TAU_RANGE.1);
            c.radius = (parent.radius * 0.85).clamp(RADIUS_RANGE.0, RADIUS_RANGE.1);
            c.dir = plan.dir;
            c.aniso = plan.aniso;
            c.color = target.sample_nearest(c.pos);
        }
        store.sites[i] = children[0];
        store.reset_adam(id);
        let new_id = store.push(children[1]);
        report.splits.push((id, new_id));
    }
    Ok(report)
}

/// Deactivates the `round(percentile * active)` unfrozen sites with the
/// smallest removal delta (lower id first on ties). At least one site is
/// always kept. Returns the removed ids.
pub fn prune(store: &mut SiteStore, stats: &[SiteStats], percentile: f64) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&percentile) {
        return invalid(format!("prune percentile must be in [0, 1], got {percentile}"));
    }
    let active = store.count_active();
    let want = event_count(active, percentile).min(active.saturating_sub(1));
    if want == 0 {
        return Ok(Vec::new());
    }
    let mut ranked: Vec<(f64, u32)> = (0..store.len())
        .filter(|&i| store.active[i] && !store.frozen[i])
        .map(|i| (stats[i].removal, i as u32))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let removed: Vec<u32> = ranked.into_iter().take(want).map(|(_, id)| id).collect();
    for &id in &removed {
        store.deactivate(id);
    }
    Ok(removed)
}

/// Percentiles after applying a schedule scale.
pub fn scaled_percentiles(config: &TrainConfig, scale: f64) -> (f64, f64) {
    (
        (config.densify_percentile * scale).min(PERCENTILE_CAP),
        (config.prune_percentile * scale).min(PERCENTILE_CAP),
    )
}

/// Site count after running the event calendar with scaled percentiles,
/// assuming every event touches its full quota.
pub fn simulate_count(n0: usize, config: &TrainConfig, scale: f64) -> usize {
    let (pd, pp) = scaled_percentiles(config, scale);
    let mut n = n0;
    for t in 1..=config.iters {
        if config.is_prune_iter(t) {
            n -= event_count(n, pp).min(n.saturating_sub(1));
        }
        if config.is_densify_iter(t) {
            n += event_count(n, pd);
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePlan {
    pub scale: f64,
    pub target_count: usize,
    pub simulated_count: usize,
    /// False when no scale reaches the target within 5%.
    pub reachable: bool,
}

/// One-dimensional search for the percentile scale whose simulated final
/// count is closest to `floor(target_bpp * W * H / 128)`.
pub fn plan_schedule(n0: usize, config: &TrainConfig, width: usize, height: usize) -> Result<SchedulePlan> {
    let Some(bpp) = config.target_bpp else {
        return invalid("plan_schedule needs a target bit rate");
    };
    let target = target_count(bpp, width, height);
    let max_scale = PERCENTILE_CAP / config.densify_percentile.min(config.prune_percentile).max(1e-12);
    let err = |s: f64| (simulate_count(n0, config, s) as i64 - target as i64).unsigned_abs();
    let mut best = (err(0.0), 0.0);
    // Coarse log-spaced scan, then a local refinement around the best point.
    let steps = 400;
    let lo = 1e-3f64;
    for i in 0..=steps {
        let s = lo * (max_scale / lo).powf(i as f64 / steps as f64);
        let e = err(s);
        if e < best.0 {
            best = (e, s);
        }
    }
    let (mut a, mut b) = (best.1 / 1.03, best.1 * 1.03);
    for _ in 0..60 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        let (e1, e2) = (err(m1), err(m2));
        for (e, s) in [(e1, m1), (e2, m2)] {
            if e < best.0 {
                best = (e, s);
            }
        }
        if e1 <= e2 {
            b = m2;
        } else {
            a = m1;
        }
    }
    let simulated = simulate_count(n0, config, best.1);
    let reachable = (simulated as f64 - target as f64).abs() <= 0.05 * target.max(1) as f64;
    if !reachable {
        warn!("target of {target} sites is not reachable from {n0}; closest simulated count {simulated}");
    }
    Ok(SchedulePlan { scale: best.1, target_count: target, simulated_count: simulated, reachable })
}
