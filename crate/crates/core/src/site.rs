//! Sites and the site store.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of optimizable scalars per site.
pub const PARAM_COUNT: usize = 10;

/// Index of each scalar inside a flattened parameter vector.
pub mod param {
    pub const POS_X: usize = 0;
    pub const POS_Y: usize = 1;
    pub const LOG_TAU: usize = 2;
    pub const RADIUS: usize = 3;
    pub const COLOR_R: usize = 4;
    pub const COLOR_G: usize = 5;
    pub const COLOR_B: usize = 6;
    pub const DIR_X: usize = 7;
    pub const DIR_Y: usize = 8;
    pub const ANISO: usize = 9;
}

pub const LOG_TAU_RANGE: (f64, f64) = (2.0, 20.0);
pub const RADIUS_RANGE: (f64, f64) = (1.0, 512.0);
pub const ANISO_RANGE: (f64, f64) = (-2.0, 2.0);

/// Position written into inactive sites.
pub const INACTIVE_POS: [f64; 2] = [-1.0, -1.0];

/// One adaptive primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    /// Continuous pixel coordinates; pixel centers sit on integers.
    pub pos: [f64; 2],
    pub log_tau: f64,
    /// Additive weight in pixels.
    pub radius: f64,
    pub color: [f64; 3],
    /// Anisotropy direction, unit length after every optimizer step.
    pub dir: [f64; 2],
    /// Log-anisotropy: the metric has eigenvalue `exp(aniso)` along `dir`.
    pub aniso: f64,
}

impl Default for Site {
    fn default() -> Self {
        Site {
            pos: [0.0, 0.0],
            log_tau: 7.5,
            radius: 1.0,
            color: [0.0; 3],
            dir: [1.0, 0.0],
            aniso: 0.0,
        }
    }
}

impl Site {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn to_params(&self) -> [f64; PARAM_COUNT] {
        [
            self.pos[0],
            self.pos[1],
            self.log_tau,
            self.radius,
            self.color[0],
            self.color[1],
            self.color[2],
            self.dir[0],
            self.dir[1],
            self.aniso,
        ]
    }

    pub fn from_params(p: &[f64; PARAM_COUNT]) -> Self {
        Site {
            pos: [p[0], p[1]],
            log_tau: p[2],
            radius: p[3],
            color: [p[4], p[5], p[6]],
            dir: [p[7], p[8]],
            aniso: p[9],
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut p = self.to_params();
        p[idx] = value;
        *self = Site::from_params(&p);
    }
}

/// Bounds applied by [`SiteStore::clamp_project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampBounds {
    pub width: usize,
    pub height: usize,
    /// Image fitting keeps colors in `[0, 1]`; scalar fields disable this.
    pub clamp_color: bool,
}

/// Dense site array. Slots are never removed; pruning only clears `active`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteStore {
    pub sites: Vec<Site>,
    pub active: Vec<bool>,
    /// Sites excluded from optimizer updates and budget events.
    pub frozen: Vec<bool>,
    pub adam_m: Vec<[f64; PARAM_COUNT]>,
    pub adam_v: Vec<[f64; PARAM_COUNT]>,
}

impl SiteStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sites(sites: Vec<Site>) -> Self {
        let mut store = SiteStore::new();
        for s in sites {
            store.push(s);
        }
        store
    }

    /// Appends an active, unfrozen site and returns its id.
    pub fn push(&mut self, site: Site) -> u32 {
        let id = self.sites.len() as u32;
        self.sites.push(site);
        self.active.push(true);
        self.frozen.push(false);
        self.adam_m.push([0.0; PARAM_COUNT]);
        self.adam_v.push([0.0; PARAM_COUNT]);
        id
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn is_active(&self, id: u32) -> bool {
        self.active.get(id as usize).copied().unwrap_or(false)
    }

    pub fn active_ids(&self) -> Vec<u32> {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Marks a site inactive and writes the sentinel position.
    pub fn deactivate(&mut self, id: u32) {
        let i = id as usize;
        self.active[i] = false;
        self.sites[i].pos = INACTIVE_POS;
        self.reset_adam(id);
    }

    pub fn reset_adam(&mut self, id: u32) {
        self.adam_m[id as usize] = [0.0; PARAM_COUNT];
        self.adam_v[id as usize] = [0.0; PARAM_COUNT];
    }

    /// Copy holding only the active sites, in id order. Used to check that
    /// inactive slots never influence results.
    pub fn compacted(&self) -> SiteStore {
        let mut out = SiteStore::new();
        for i in 0..self.len() {
            if self.active[i] {
                let id = out.push(self.sites[i]);
                out.frozen[id as usize] = self.frozen[i];
                out.adam_m[id as usize] = self.adam_m[i];
                out.adam_v[id as usize] = self.adam_v[i];
            }
        }
        out
    }

    /// Restores every site invariant: positions inside the image, parameter
    /// ranges, unit direction. Frozen and inactive sites are left untouched.
    pub fn clamp_project(&mut self, bounds: ClampBounds) {
        let max_x = bounds.width.saturating_sub(1) as f64;
        let max_y = bounds.height.saturating_sub(1) as f64;
        for i in 0..self.sites.len() {
            if !self.active[i] || self.frozen[i] {
                continue;
            }
            let s = &mut self.sites[i];
            s.pos[0] = clamp_finite(s.pos[0], 0.0, max_x);
            s.pos[1] = clamp_finite(s.pos[1], 0.0, max_y);
            s.log_tau = clamp_finite(s.log_tau, LOG_TAU_RANGE.0, LOG_TAU_RANGE.1);
            s.radius = clamp_finite(s.radius, RADIUS_RANGE.0, RADIUS_RANGE.1);
            s.aniso = clamp_finite(s.aniso, ANISO_RANGE.0, ANISO_RANGE.1);
            if bounds.clamp_color {
                for c in &mut s.color {
                    *c = clamp_finite(*c, 0.0, 1.0);
                }
            }
            let n = (s.dir[0] * s.dir[0] + s.dir[1] * s.dir[1]).sqrt();
            if n > 1e-12 && n.is_finite() {
                s.dir = [s.dir[0] / n, s.dir[1] / n];
            } else {
                s.dir = [1.0, 0.0];
            }
        }
    }

    /// Checks the documented invariants for every active site.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let n = self.sites.len();
        if self.active.len() != n || self.frozen.len() != n || self.adam_m.len() != n || self.adam_v.len() != n {
            return invalid("site store arrays have mismatched lengths");
        }
        for (i, s) in self.sites.iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let dn = (s.dir[0] * s.dir[0] + s.dir[1] * s.dir[1]).sqrt();
            let ok = (dn - 1.0).abs() <= 1e-6
                && in_range(s.log_tau, LOG_TAU_RANGE)
                && in_range(s.radius, RADIUS_RANGE)
                && in_range(s.aniso, ANISO_RANGE)
                && s.color.iter().all(|c| (0.0..=1.0).contains(c))
                && (0.0..=(width.saturating_sub(1)) as f64).contains(&s.pos[0])
                && (0.0..=(height.saturating_sub(1)) as f64).contains(&s.pos[1]);
            if !ok {
                return invalid(format!("site {i} violates parameter invariants: {s:?}"));
            }
        }
        Ok(())
    }
}

fn in_range(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

fn clamp_finite(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

/// `1 / max(width, height)`: the resolution-independent distance scale.
pub fn normalization_scale(width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return invalid(format!("image dimensions must be positive, got {width}x{height}"));
    }
    Ok(1.0 / width.max(height) as f64)
}
