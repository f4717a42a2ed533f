//! Training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-parameter Adam base learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Pixels per step.
    pub pos: f64,
    pub log_tau: f64,
    /// Pixels per step.
    pub radius: f64,
    pub color: f64,
    pub dir: f64,
    pub aniso: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { pos: 0.15, log_tau: 0.015, radius: 0.075, color: 0.015, dir: 0.0075, aniso: 0.0075 }
    }
}

impl LearningRates {
    /// Rate for each slot of the flattened parameter vector.
    pub fn per_param(&self) -> [f64; crate::site::PARAM_COUNT] {
        [self.pos, self.pos, self.log_tau, self.radius, self.color, self.color, self.color, self.dir, self.dir, self.aniso]
    }
}

/// How tile partial sums are combined into the global buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MergeMode {
    /// Fixed-point accumulation: bit-identical to the naive sum regardless
    /// of tiling or thread count.
    #[default]
    Deterministic,
    /// Native floating point, order-dependent in the last bits.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    /// Candidate list length.
    pub k: usize,
    /// Random ids injected per pixel per propagation pass.
    pub inject_count: usize,
    /// Uniform share of the initialization density.
    pub lambda_init: f64,
    /// Initial site count.
    pub init_sites: usize,
    pub init_log_tau: f64,
    /// `None` uses the expected site spacing `sqrt(H*W/n)`.
    pub init_radius: Option<f64>,

    pub densify_freq: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_percentile: f64,
    pub alpha: f64,
    pub eps_densify: f64,
    pub prune_freq: usize,
    pub prune_start: usize,
    pub prune_end: usize,
    pub prune_percentile: f64,
    /// When false, pruning waits until the densify window has closed.
    pub prune_during_densify: bool,
    pub target_bpp: Option<f64>,
    /// Hard cap on store slots; densify events that would exceed it are skipped.
    pub max_sites: Option<usize>,

    pub seed: u64,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    /// Iterations between warm-start candidate refreshes.
    pub cand_update_period: usize,
    /// Step-1 passes per refresh.
    pub cand_passes: usize,
    pub tau_diffusion_lambda: Option<f64>,
    pub merge_mode: MergeMode,
    /// Side of the square tiles used by the gradient reduction.
    pub tile_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 4000,
            k: 8,
            inject_count: 4,
            lambda_init: 0.3,
            init_sites: 4000,
            init_log_tau: 7.5,
            init_radius: None,
            densify_freq: 20,
            densify_start: 20,
            densify_end: 3000,
            densify_percentile: 0.01,
            alpha: 0.7,
            eps_densify: 1e-8,
            prune_freq: 40,
            prune_start: 100,
            prune_end: 3000,
            prune_percentile: 0.033,
            prune_during_densify: true,
            target_bpp: None,
            max_sites: None,
            seed: 0,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cand_update_period: 1,
            cand_passes: 1,
            tau_diffusion_lambda: None,
            merge_mode: MergeMode::Deterministic,
            tile_size: 16,
        }
    }
}

impl TrainConfig {
    /// Sets the iteration budget and rescales the densify/prune windows
    /// proportionally to the 4000-iteration protocol.
    pub fn with_iters(mut self, iters: usize) -> Self {
        let scale = |v: usize| ((v as f64) * iters as f64 / self.iters.max(1) as f64).round() as usize;
        self.densify_start = scale(self.densify_start);
        self.densify_end = scale(self.densify_end);
        self.prune_start = scale(self.prune_start);
        self.prune_end = scale(self.prune_end);
        self.iters = iters;
        self
    }

    /// Turns off all budget events.
    pub fn without_budget(mut self) -> Self {
        self.densify_percentile = 0.0;
        self.prune_percentile = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > crate::field::MAX_K {
            return invalid(format!("k must be in 1..={}, got {}", crate::field::MAX_K, self.k));
        }
        if self.densify_freq == 0 || self.prune_freq == 0 || self.cand_update_period == 0 {
            return invalid("event frequencies must be at least 1");
        }
        for (name, p) in [("densify_percentile", self.densify_percentile), ("prune_percentile", self.prune_percentile)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_init) {
            return invalid(format!("lambda_init must be in [0, 1], got {}", self.lambda_init));
        }
        if let Some(l) = self.tau_diffusion_lambda {
            if !(0.0..=1.0).contains(&l) {
                return invalid(format!("tau_diffusion_lambda must be in [0, 1], got {l}"));
            }
        }
        for (name, a, b) in [
            ("densify", self.densify_start, self.densify_end),
            ("prune", self.prune_start, self.prune_end),
        ] {
            if a > b || b > self.iters {
                return invalid(format!("{name} window [{a}, {b}] must lie within [0, {}]", self.iters));
            }
        }
        if self.init_sites == 0 {
            return invalid("init_sites must be at least 1");
        }
        if let Some(b) = self.target_bpp {
            if !(b.is_finite() && b > 0.0) {
                return invalid(format!("target_bpp must be positive, got {b}"));
            }
        }
        if self.tile_size == 0 {
            return invalid("tile_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return invalid("adam betas must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }

    /// True when iteration `t` (1-based) is a densify event.
    pub fn is_densify_iter(&self, t: usize) -> bool {
        t >= self.densify_start && t <= self.densify_end && t % self.densify_freq == 0
    }

    /// True when iteration `t` (1-based) is a prune event.
    pub fn is_prune_iter(&self, t: usize) -> bool {
        let start = if self.prune_during_densify { self.prune_start } else { self.prune_start.max(self.densify_end + 1) };
        t >= start && t < self.prune_end && t % self.prune_freq == 0
    }
}
