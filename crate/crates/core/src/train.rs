//! Initialization, the Adam loop, tau diffusion and the fitting driver.

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::budget::{accumulate_stats, densify, plan_schedule, prune, scaled_percentiles, SchedulePlan};
use crate::candidates::{refresh_with_table, seed_sites, PropagationParams, RefreshMode};
use crate::config::TrainConfig;
use crate::error::{invalid, Result};
use crate::field::{CandidateField, INVALID_ID};
use crate::grad::{backward, GradBuffer};
use crate::image::ImageBuffer;
use crate::quality::psnr_from_mse;
use crate::score::ScoreTable;
use crate::site::{normalization_scale, param, ClampBounds, Site, SiteStore, PARAM_COUNT, RADIUS_RANGE};

/// Per-site parameters not taken from the image at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitDefaults {
    pub log_tau: f64,
    /// `None` uses `sqrt(H*W/n)`.
    pub radius: Option<f64>,
}

impl Default for InitDefaults {
    fn default() -> Self {
        InitDefaults { log_tau: 7.5, radius: None }
    }
}

/// Sampling density `(1 - lambda) |grad I| / sum |grad I| + lambda / (H W)`.
/// Falls back to uniform when the image has no gradient.
pub fn init_density(target: &ImageBuffer, lambda_init: f64) -> Vec<f64> {
    let mags: Vec<f64> = target.sobel().iter().map(|g| g[0].hypot(g[1])).collect();
    let total: f64 = mags.iter().sum();
    let p = mags.len() as f64;
    if total <= 0.0 || !total.is_finite() {
        return vec![1.0 / p; mags.len()];
    }
    mags.iter().map(|m| (1.0 - lambda_init) * m / total + lambda_init / p).collect()
}

/// Samples `n` distinct pixels from the initialization density, places a
/// site near each with a small random subpixel offset, and colors it with
/// the target pixel.
pub fn init_sites(target: &ImageBuffer, n: usize, lambda_init: f64, defaults: InitDefaults, rng: &mut ChaCha8Rng) -> Result<SiteStore> {
    target.validate()?;
    let p = target.len();
    if n == 0 || n > p {
        return invalid(format!("cannot place {n} sites on {p} pixels"));
    }
    if !(0.0..=1.0).contains(&lambda_init) {
        return invalid(format!("lambda_init must be in [0, 1], got {lambda_init}"));
    }
    let density = init_density(target, lambda_init);
    // Weighted sampling without replacement: keep the n largest
    // ln(u) / p keys. Zero-density pixels rank after all others and fill
    // any remainder uniformly.
    let mut keys: Vec<(bool, f64, usize)> = density
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            if d > 0.0 {
                (true, u.ln() / d, i)
            } else {
                (false, u.ln(), i)
            }
        })
        .collect();
    keys.select_nth_unstable_by(n - 1, |a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    keys.truncate(n);
    keys.sort_by_key(|k| k.2);
    let radius = defaults.radius.unwrap_or_else(|| ((p as f64) / n as f64).sqrt()).clamp(RADIUS_RANGE.0, RADIUS_RANGE.1);
    let (w, h) = (target.width, target.height);
    let sites = keys
        .into_iter()
        .map(|(_, _, i)| {
            let (x, y) = (i % w, i / w);
            let jx: f64 = rng.random_range(-0.3..0.3);
            let jy: f64 = rng.random_range(-0.3..0.3);
            Site {
                pos: [(x as f64 + jx).clamp(0.0, (w - 1) as f64), (y as f64 + jy).clamp(0.0, (h - 1) as f64)],
                log_tau: defaults.log_tau,
                radius,
                color: target.get(x, y),
                dir: [1.0, 0.0],
                aniso: 0.0,
            }
        })
        .collect();
    Ok(SiteStore::from_sites(sites))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: [f64; PARAM_COUNT],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn from_config(c: &TrainConfig) -> Self {
        AdamParams { lr: c.lr.per_param(), beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// One bias-corrected Adam update on every active, unfrozen site followed
/// by [`SiteStore::clamp_project`]. Non-finite gradient components are
/// skipped; the number skipped is returned.
pub fn adam_step(store: &mut SiteStore, grads: &GradBuffer, t: u64, adam: &AdamParams, bounds: ClampBounds) -> Result<u64> {
    if t == 0 {
        return invalid("adam step index starts at 1");
    }
    if grads.len() != store.len() {
        return invalid(format!("gradient buffer has {} sites, store has {}", grads.len(), store.len()));
    }
    let bc1 = 1.0 - adam.beta1.powf(t as f64);
    let bc2 = 1.0 - adam.beta2.powf(t as f64);
    let mut skipped = 0;
    for i in 0..store.len() {
        if !store.active[i] || store.frozen[i] {
            continue;
        }
        let mut p = store.sites[i].to_params();
        let m = &mut store.adam_m[i];
        let v = &mut store.adam_v[i];
        for j in 0..PARAM_COUNT {
            let g = grads.grads[i][j];
            if !g.is_finite() {
                skipped += 1;
                continue;
            }
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * g;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= adam.lr[j] * mh / (vh.sqrt() + adam.eps);
        }
        store.sites[i] = Site::from_params(&p);
    }
    store.clamp_project(bounds);
    Ok(skipped)
}

/// Replaces each site's `log_tau` gradient by `(1 - lambda) g_i + lambda *
/// mean(g_j)` over the site and its neighbours. Neighbours are the sites
/// sharing a candidate list with a pixel the site owns (slot 0).
pub fn tau_diffusion(store: &SiteStore, field: &CandidateField, lambda: f64, grads: &mut GradBuffer) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("tau diffusion lambda must be in [0, 1], got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(());
    }
    let n = store.len();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for cell in 0..field.cell_count() {
        let list = field.list(cell);
        let owner = list[0];
        if owner == INVALID_ID || !store.is_active(owner) {
            continue;
        }
        for &other in &list[1..] {
            if other != INVALID_ID && other != owner && store.is_active(other) {
                pairs.push((owner, other));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut sum: Vec<f64> = (0..n).map(|i| grads.grads[i][param::LOG_TAU]).collect();
    let mut count = vec![1.0f64; n];
    for &(a, b) in &pairs {
        sum[a as usize] += grads.grads[b as usize][param::LOG_TAU];
        count[a as usize] += 1.0;
    }
    for i in 0..n {
        if store.active[i] {
            let own = grads.grads[i][param::LOG_TAU];
            grads.grads[i][param::LOG_TAU] = (1.0 - lambda) * own + lambda * sum[i] / count[i];
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    /// Loss before the update of this iteration.
    pub loss: f64,
    pub psnr: f64,
    pub active: usize,
    pub ms: f64,
}

pub const HISTORY_HEADER: &str = "iteration,loss,psnr,active_sites,wall_ms";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.17e},{:.6},{},{:.3}", self.iter, self.loss, self.psnr, self.active, self.ms)
    }
}

pub fn write_history_csv(mut out: impl Write, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Stateful training loop; [`fit`] drives it to completion.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub target: &'a ImageBuffer,
    pub store: SiteStore,
    pub field: CandidateField,
    pub iter: usize,
    pub history: Vec<HistoryRow>,
    pub schedule: Option<SchedulePlan>,
    /// Percentiles in use after schedule scaling.
    pub densify_percentile: f64,
    pub prune_percentile: f64,
    pub nonfinite_skipped: u64,
    adam: AdamParams,
    bounds: ClampBounds,
    gradients: Vec<[f64; 2]>,
    start: Instant,
}

impl<'a> Trainer<'a> {
    /// Initializes sites from the target per the config.
    pub fn new(target: &'a ImageBuffer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let defaults = InitDefaults { log_tau: config.init_log_tau, radius: config.init_radius };
        let n = config.init_sites.min(target.len());
        let store = init_sites(target, n, config.lambda_init, defaults, &mut rng)?;
        Self::with_store(target, config, store)
    }

    /// Starts from an existing store.
    pub fn with_store(target: &'a ImageBuffer, config: TrainConfig, store: SiteStore) -> Result<Self> {
        config.validate()?;
        target.validate()?;
        let (w, h) = (target.width, target.height);
        let schedule = match config.target_bpp {
            Some(_) => Some(plan_schedule(store.count_active(), &config, w, h)?),
            None => None,
        };
        let (densify_percentile, prune_percentile) = scaled_percentiles(&config, schedule.map_or(1.0, |s| s.scale));
        if let Some(s) = schedule {
            info!(
                "schedule: scale {:.4}, target {} sites, simulated {} (densify {:.4}, prune {:.4})",
                s.scale, s.target_count, s.simulated_count, densify_percentile, prune_percentile
            );
        }
        let mut field = CandidateField::new(w, h, config.k)?;
        let table = ScoreTable::new(&store, normalization_scale(w, h)?);
        refresh_with_table(&table, &mut field, RefreshMode::Full, config.cand_passes.max(4), Self::params_of(&config));
        Ok(Trainer {
            adam: AdamParams::from_config(&config),
            bounds: ClampBounds { width: w, height: h, clamp_color: true },
            gradients: target.sobel(),
            config,
            target,
            store,
            field,
            iter: 0,
            history: Vec::new(),
            schedule,
            densify_percentile,
            prune_percentile,
            nonfinite_skipped: 0,
            start: Instant::now(),
        })
    }

    fn params_of(config: &TrainConfig) -> PropagationParams {
        PropagationParams { inject: config.inject_count, seed: config.seed }
    }

    fn table(&self) -> ScoreTable {
        ScoreTable::new(&self.store, 1.0 / self.target.width.max(self.target.height) as f64)
    }

    /// One iteration: refresh, backward, optional tau diffusion, Adam,
    /// then any scheduled budget events.
    pub fn step(&mut self) -> Result<HistoryRow> {
        self.iter += 1;
        let t = self.iter;
        let cfg = &self.config;
        if t > 1 && (t - 1) % cfg.cand_update_period == 0 {
            let table = self.table();
            refresh_with_table(&table, &mut self.field, RefreshMode::WarmStart, cfg.cand_passes, Self::params_of(cfg));
        }
        let mut out = backward(&self.store, &self.field, self.target, cfg.merge_mode, cfg.tile_size)?;
        if let Some(l) = cfg.tau_diffusion_lambda {
            tau_diffusion(&self.store, &self.field, l, &mut out.grads)?;
        }
        self.nonfinite_skipped += adam_step(&mut self.store, &out.grads, t as u64, &self.adam, self.bounds)?;

        let do_prune = cfg.is_prune_iter(t) && self.prune_percentile > 0.0;
        let do_densify = cfg.is_densify_iter(t) && self.densify_percentile > 0.0;
        if do_prune || do_densify {
            let stats = accumulate_stats(&self.store, &self.field, self.target, cfg.merge_mode, cfg.tile_size)?;
            if do_prune {
                let removed = prune(&mut self.store, &stats, self.prune_percentile)?;
                debug!("iter {t}: pruned {}", removed.len());
            }
            if do_densify {
                let rep = densify(&mut self.store, &stats, self.target, &self.gradients, self.densify_percentile, &self.config)?;
                debug!("iter {t}: split {} ({} from covariance)", rep.splits.len(), rep.from_covariance);
                let table = self.table();
                let new_ids: Vec<u32> = rep.splits.iter().flat_map(|&(a, b)| [a, b]).collect();
                seed_sites(&table, &mut self.field, &new_ids);
            }
        }
        let row = HistoryRow {
            iter: t,
            loss: out.loss,
            psnr: psnr_from_mse(out.loss / 3.0),
            active: self.store.count_active(),
            ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        self.history.push(row);
        Ok(row)
    }

    /// Runs until `self.iter == iters`.
    pub fn run_to(&mut self, iters: usize) -> Result<()> {
        while self.iter < iters {
            let row = self.step()?;
            if row.iter % 100 == 0 {
                info!("iter {:>5}  loss {:.6e}  psnr {:.2}  sites {}", row.iter, row.loss, row.psnr, row.active);
            }
        }
        Ok(())
    }

    /// Refreshes candidates with extra passes and renders the model.
    pub fn render_final(&mut self, passes: usize) -> Result<ImageBuffer> {
        let table = self.table();
        refresh_with_table(&table, &mut self.field, RefreshMode::WarmStart, passes, Self::params_of(&self.config));
        crate::render::render_image(&self.store, &self.field)
    }

    pub fn finish(self) -> FitResult {
        FitResult {
            store: self.store,
            field: self.field,
            history: self.history,
            schedule: self.schedule,
            nonfinite_skipped: self.nonfinite_skipped,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub store: SiteStore,
    pub field: CandidateField,
    pub history: Vec<HistoryRow>,
    pub schedule: Option<SchedulePlan>,
    pub nonfinite_skipped: u64,
}

/// Full protocol: initialize, then `config.iters` iterations.
pub fn fit(target: &ImageBuffer, config: TrainConfig) -> Result<FitResult> {
    let iters = config.iters;
    let mut tr = Trainer::new(target, config)?;
    tr.run_to(iters)?;
    Ok(tr.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MergeMode;

    fn checkerboard(w: usize, h: usize, cell: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| [((x / cell + y / cell) % 2) as f64; 3])
    }

    #[test]
    fn init_uniform_and_fallback() {
        let img = checkerboard(32, 32, 8);
        let d = init_density(&img, 1.0);
        assert!(d.iter().all(|v| (v - 1.0 / 1024.0).abs() < 1e-15));
        let flat = ImageBuffer::filled(16, 16, [0.5; 3]);
        let d = init_density(&flat, 0.0);
        assert!(d.iter().all(|v| (v - 1.0 / 256.0).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = init_sites(&flat, 256, 0.0, InitDefaults::default(), &mut rng).unwrap();
        assert_eq!(s.len(), 256);
        assert!(init_sites(&flat, 257, 0.0, InitDefaults::default(), &mut rng).is_err());
    }

    #[test]
    fn init_prefers_edges() {
        let img = checkerboard(128, 128, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_sites(&img, 1000, 0.0, InitDefaults::default(), &mut rng).unwrap();
        let grads = img.sobel();
        let edge = |x: usize, y: usize| grads[y * 128 + x] != [0.0, 0.0];
        let n_edge_px = (0..128 * 128).filter(|i| edge(i % 128, i / 128)).count() as f64;
        let n_flat_px = 128.0 * 128.0 - n_edge_px;
        let on_edge = store.sites.iter().filter(|s| edge(s.pos[0].round() as usize, s.pos[1].round() as usize)).count() as f64;
        let edge_density = on_edge / n_edge_px;
        let flat_density = (1000.0 - on_edge) / n_flat_px;
        assert!(edge_density >= 5.0 * flat_density.max(1e-9), "{edge_density} vs {flat_density}");
        // Distinct cells, colors from the target.
        let mut cells: Vec<(i64, i64)> = store.sites.iter().map(|s| (s.pos[0].round() as i64, s.pos[1].round() as i64)).collect();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), 1000);
        for s in &store.sites {
            assert_eq!(s.color, img.sample_nearest(s.pos));
            if s.pos[0] > 0.0 && s.pos[0] < 127.0 {
                assert_ne!(s.pos[0].fract(), 0.0);
            }
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = SiteStore::from_sites(vec![Site { pos: [10.0, 10.0], log_tau: 6.0, radius: 5.0, color: [0.5; 3], ..Site::default() }]);
        let before = store.sites[0].to_params();
        let mut g = GradBuffer::zeros(1);
        g.grads[0] = [0.3, -2.0, 1e-3, -5.0, 0.1, -0.1, 0.0, 0.0, 0.0, 0.7];
        let adam = AdamParams::from_config(&TrainConfig::default());
        let bounds = ClampBounds { width: 64, height: 64, clamp_color: true };
        adam_step(&mut store, &g, 1, &adam, bounds).unwrap();
        let after = store.sites[0].to_params();
        for j in [0, 1, 2, 3, 4, 5, 9] {
            let want = -adam.lr[j] * g.grads[0][j].signum();
            assert!((after[j] - before[j] - want).abs() < 1e-6, "slot {j}");
        }
        assert_eq!(after[6], before[6]);
    }

    #[test]
    fn adam_zero_gradient_and_nonfinite() {
        let mut store = SiteStore::from_sites(vec![Site { pos: [3.0, 4.0], color: [0.2; 3], ..Site::default() }]);
        let before = store.clone();
        let adam = AdamParams::from_config(&TrainConfig::default());
        let bounds = ClampBounds { width: 8, height: 8, clamp_color: true };
        adam_step(&mut store, &GradBuffer::zeros(1), 1, &adam, bounds).unwrap();
        assert_eq!(store.sites, before.sites);
        let mut g = GradBuffer::zeros(1);
        g.grads[0][0] = f64::NAN;
        g.grads[0][1] = f64::INFINITY;
        assert_eq!(adam_step(&mut store, &g, 2, &adam, bounds).unwrap(), 2);
        assert_eq!(store.sites[0].pos, [3.0, 4.0]);
        assert!(adam_step(&mut store, &g, 0, &adam, bounds).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // L = (x - 3)^2 on the x position.
        let mut store = SiteStore::from_sites(vec![Site { pos: [10.0, 0.0], ..Site::default() }]);
        let adam = AdamParams::from_config(&TrainConfig::default());
        let bounds = ClampBounds { width: 64, height: 64, clamp_color: true };
        let loss = |s: &SiteStore| (s.sites[0].pos[0] - 3.0).powi(2);
        let l0 = loss(&store);
        for t in 1..=2 {
            let mut g = GradBuffer::zeros(1);
            g.grads[0][0] = 2.0 * (store.sites[0].pos[0] - 3.0);
            adam_step(&mut store, &g, t, &adam, bounds).unwrap();
        }
        assert!(loss(&store) < l0);
    }

    #[test]
    fn frozen_sites_untouched() {
        let mut store = SiteStore::from_sites(vec![Site { pos: [3.0, 4.0], ..Site::default() }, Site::default()]);
        store.frozen[0] = true;
        let mut g = GradBuffer::zeros(2);
        g.grads[0] = [1.0; PARAM_COUNT];
        g.grads[1] = [1.0; PARAM_COUNT];
        let adam = AdamParams::from_config(&TrainConfig::default());
        let frozen = store.sites[0];
        adam_step(&mut store, &g, 1, &adam, ClampBounds { width: 8, height: 8, clamp_color: true }).unwrap();
        assert_eq!(store.sites[0], frozen);
        assert_eq!(store.adam_m[0], [0.0; PARAM_COUNT]);
    }

    #[test]
    fn tau_diffusion_examples() {
        let store = SiteStore::from_sites(vec![Site::default(), Site { pos: [3.0, 0.0], ..Site::default() }]);
        let mut f = CandidateField::new(4, 1, 2).unwrap();
        f.ids.copy_from_slice(&[0, 1, 0, 1, 1, 0, 1, 0]);
        let mut g = GradBuffer::zeros(2);
        g.grads[0][param::LOG_TAU] = 0.5;
        g.grads[1][param::LOG_TAU] = -0.5;
        let orig = g.clone();
        tau_diffusion(&store, &f, 0.0, &mut g).unwrap();
        assert_eq!(g, orig);
        tau_diffusion(&store, &f, 1.0, &mut g).unwrap();
        assert_eq!(g.grads[0][param::LOG_TAU], 0.0);
        assert_eq!(g.grads[1][param::LOG_TAU], 0.0);
        assert!(tau_diffusion(&store, &f, 1.5, &mut g).is_err());
    }

    #[test]
    fn constant_image_is_exact() {
        let img = ImageBuffer::filled(32, 32, [0.25, 0.5, 0.75]);
        let cfg = TrainConfig { init_sites: 16, ..TrainConfig::default() }.with_iters(200).without_budget();
        let res = fit(&img, cfg).unwrap();
        let out = crate::render::render_image(&res.store, &res.field).unwrap();
        assert!(crate::quality::psnr(&out, &img).unwrap() >= 60.0);
    }

    #[test]
    fn invariants_hold_and_runs_reproduce() {
        let img = ImageBuffer::from_fn(48, 40, |x, y| [x as f64 / 48.0, y as f64 / 40.0, ((x / 6 + y / 6) % 2) as f64]);
        let cfg = TrainConfig { init_sites: 150, seed: 9, merge_mode: MergeMode::Deterministic, ..TrainConfig::default() }.with_iters(120);
        let mut tr = Trainer::new(&img, cfg.clone()).unwrap();
        for _ in 0..120 {
            tr.step().unwrap();
            tr.store.validate(48, 40).unwrap();
        }
        let a = tr.finish();
        let b = fit(&img, cfg).unwrap();
        assert_eq!(a.store, b.store);
        let losses = |r: &FitResult| r.history.iter().map(|h| (h.loss, h.active)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
    }

    #[test]
    fn frozen_sites_survive_fit() {
        let img = ImageBuffer::from_fn(32, 32, |x, _| [x as f64 / 32.0; 3]);
        let cfg = TrainConfig { init_sites: 40, ..TrainConfig::default() }.with_iters(60);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = init_sites(&img, 40, 0.5, InitDefaults::default(), &mut rng).unwrap();
        store.frozen[3] = true;
        store.frozen[17] = true;
        let keep = (store.sites[3], store.sites[17]);
        let mut tr = Trainer::with_store(&img, cfg, store).unwrap();
        tr.run_to(60).unwrap();
        assert_eq!((tr.store.sites[3], tr.store.sites[17]), keep);
        assert!(tr.store.is_active(3) && tr.store.is_active(17));
    }

    #[test]
    fn history_csv() {
        let rows = [HistoryRow { iter: 1, loss: 0.5, psnr: 7.78, active: 10, ms: 1.5 }];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iteration,loss,psnr,active_sites,wall_ms\n1,"));
    }
}
