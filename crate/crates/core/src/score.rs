//! The anisotropic additively weighted distance score.
//!
//! Every consumer (rendering, candidate maintenance, gradients, hard
//! ownership) scores through the functions here so that rankings agree
//! bit-for-bit.

use crate::error::{invalid, Result, SadError};
use crate::site::{Site, SiteStore};

/// Symmetric 2x2 metric `[[g00, g01], [g01, g11]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub g00: f64,
    pub g01: f64,
    pub g11: f64,
}

impl Metric {
    pub const IDENTITY: Metric = Metric { g00: 1.0, g01: 0.0, g11: 1.0 };

    pub fn det(&self) -> f64 {
        self.g00 * self.g11 - self.g01 * self.g01
    }

    #[inline]
    pub fn quad(&self, dx: f64, dy: f64) -> f64 {
        dx * dx * self.g00 + 2.0 * dx * dy * self.g01 + dy * dy * self.g11
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.g00 + self.g11;
        let diff = self.g00 - self.g11;
        let disc = (0.25 * diff * diff + self.g01 * self.g01).sqrt();
        (0.5 * tr - disc, 0.5 * tr + disc)
    }
}

/// Metric coefficients for an arbitrary (not necessarily unit) direction.
/// The perpendicular is `(-u_y, u_x)`; it only enters through `v v^T`.
#[inline]
pub fn metric_raw(dir: [f64; 2], aniso: f64) -> Metric {
    let e = aniso.exp();
    let f = (-aniso).exp();
    let (ux, uy) = (dir[0], dir[1]);
    Metric {
        g00: e * ux * ux + f * uy * uy,
        g01: (e - f) * ux * uy,
        g11: e * uy * uy + f * ux * ux,
    }
}

/// `G = e^a u u^T + e^{-a} v v^T` for a unit direction `u`.
pub fn metric_from_site(dir: [f64; 2], aniso: f64) -> Result<Metric> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return invalid(format!("anisotropy direction must be unit length, got norm {n}"));
    }
    if !aniso.is_finite() {
        return invalid("anisotropy must be finite");
    }
    Ok(metric_raw(dir, aniso))
}

/// `s * ||x - p||_G - s * r`. Negative inside the site's effective radius.
#[inline]
pub fn d_mix(x: [f64; 2], site: &Site, s: f64) -> f64 {
    let g = metric_raw(site.dir, site.aniso);
    let q = g.quad(x[0] - site.pos[0], x[1] - site.pos[1]);
    q.max(0.0).sqrt() * s - site.radius * s
}

/// `-tau * d_mix`.
#[inline]
pub fn logit(x: [f64; 2], site: &Site, s: f64) -> f64 {
    -site.tau() * d_mix(x, site, s)
}

/// Squared-distance power score `||x - p||^2 - w`; unused by the renderer.
pub fn power_distance(x: [f64; 2], center: [f64; 2], weight: f64) -> f64 {
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    dx * dx + dy * dy - weight
}

/// Euclidean additively weighted distance `||x - p|| - r`.
pub fn apollonius_distance(x: [f64; 2], center: [f64; 2], radius: f64) -> f64 {
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    (dx * dx + dy * dy).sqrt() - radius
}

/// Per-site constants for fast logit evaluation.
///
/// `logit = tau_rs - tau_s * sqrt(q)` with `tau_s = tau * s` and
/// `tau_rs = tau * r * s`, which is the same expression as [`logit`] with
/// the products regrouped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreparedSite {
    pub px: f64,
    pub py: f64,
    pub g00: f64,
    pub g01: f64,
    pub g11: f64,
    pub tau_s: f64,
    pub tau_rs: f64,
    pub active: bool,
}

impl PreparedSite {
    pub fn new(site: &Site, s: f64, active: bool) -> Self {
        let g = metric_raw(site.dir, site.aniso);
        let tau = site.tau();
        PreparedSite {
            px: site.pos[0],
            py: site.pos[1],
            g00: g.g00,
            g01: g.g01,
            g11: g.g11,
            tau_s: tau * s,
            tau_rs: tau * site.radius * s,
            active,
        }
    }

    #[inline(always)]
    pub fn logit(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.px;
        let dy = y - self.py;
        let q = dx * dx * self.g00 + 2.0 * dx * dy * self.g01 + dy * dy * self.g11;
        self.tau_rs - self.tau_s * q.max(0.0).sqrt()
    }
}

/// Prepared scoring table for a whole store.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub sites: Vec<PreparedSite>,
    pub scale: f64,
    /// Ids of active sites, ascending.
    pub active_ids: Vec<u32>,
}

impl ScoreTable {
    pub fn new(store: &SiteStore, scale: f64) -> Self {
        let sites = store
            .sites
            .iter()
            .zip(&store.active)
            .map(|(s, a)| PreparedSite::new(s, scale, *a))
            .collect();
        ScoreTable { sites, scale, active_ids: store.active_ids() }
    }

    #[inline(always)]
    pub fn logit(&self, id: u32, x: f64, y: f64) -> f64 {
        self.sites[id as usize].logit(x, y)
    }

    #[inline(always)]
    pub fn is_active(&self, id: u32) -> bool {
        self.sites.get(id as usize).is_some_and(|s| s.active)
    }
}

/// Ordering used everywhere for candidate lists: higher logit first, ties
/// broken by the lower id.
#[inline(always)]
pub fn ranks_before(logit_a: f64, id_a: u32, logit_b: f64, id_b: u32) -> bool {
    logit_a > logit_b || (logit_a == logit_b && id_a < id_b)
}

/// Hard ownership: the active site minimising `d_mix`, lowest id on ties.
pub fn hard_owner(x: [f64; 2], store: &SiteStore, s: f64) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (i, site) in store.sites.iter().enumerate() {
        if !store.active[i] {
            continue;
        }
        let d = d_mix(x, site, s);
        match best {
            Some((bd, _)) if d >= bd => {}
            _ => best = Some((d, i as u32)),
        }
    }
    best.map(|(_, id)| id).ok_or(SadError::EmptyModel)
}
