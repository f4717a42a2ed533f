//! Forward rendering and diagnostic maps.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Result, SadError};
use crate::field::{CandidateField, INVALID_ID, MAX_K};
use crate::image::{id_color, save_gray, ImageBuffer};
use crate::score::ScoreTable;
use crate::site::{normalization_scale, SiteStore};

/// Softmax evaluation of one pixel's candidate list.
#[derive(Clone, Copy)]
pub(crate) struct PixelEval {
    pub n: usize,
    pub ids: [u32; MAX_K],
    pub logits: [f64; MAX_K],
    /// `exp(logit - max_logit)`.
    pub exps: [f64; MAX_K],
    pub weights: [f64; MAX_K],
    pub sum_exp: f64,
}

impl PixelEval {
    /// Returns `None` when the list holds no valid active id.
    #[inline]
    pub(crate) fn new(table: &ScoreTable, list: &[u32], x: f64, y: f64) -> Option<Self> {
        let mut ev = PixelEval {
            n: 0,
            ids: [INVALID_ID; MAX_K],
            logits: [0.0; MAX_K],
            exps: [0.0; MAX_K],
            weights: [0.0; MAX_K],
            sum_exp: 0.0,
        };
        let mut max = f64::NEG_INFINITY;
        for &id in list {
            if id == INVALID_ID || !table.is_active(id) {
                continue;
            }
            let l = table.logit(id, x, y);
            ev.ids[ev.n] = id;
            ev.logits[ev.n] = l;
            max = max.max(l);
            ev.n += 1;
        }
        if ev.n == 0 || !max.is_finite() {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..ev.n {
            let e = (ev.logits[i] - max).exp();
            ev.exps[i] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for i in 0..ev.n {
            ev.weights[i] = ev.exps[i] * inv;
        }
        ev.sum_exp = sum;
        Some(ev)
    }

    #[inline]
    pub(crate) fn blend(&self, store: &SiteStore) -> [f64; 3] {
        // Written as c_0 + sum w_i (c_i - c_0) so that equal colors blend
        // to exactly that color even though the weights only sum to 1 up
        // to rounding.
        let c0 = store.sites[self.ids[0] as usize].color;
        let mut c = c0;
        for i in 1..self.n {
            let ci = store.sites[self.ids[i] as usize].color;
            let w = self.weights[i];
            c[0] += w * (ci[0] - c0[0]);
            c[1] += w * (ci[1] - c0[1]);
            c[2] += w * (ci[2] - c0[2]);
        }
        c
    }
}

/// Softmax weights of the valid candidates at `x`, in list order.
pub fn pixel_weights(x: [f64; 2], ids: &[u32], store: &SiteStore, s: f64) -> Result<Vec<(u32, f64)>> {
    if ids.len() > MAX_K {
        return Err(SadError::InvalidInput(format!("candidate list longer than {MAX_K}")));
    }
    let table = ScoreTable::new(store, s);
    let ev = PixelEval::new(&table, ids, x[0], x[1]).ok_or(SadError::EmptyCandidates {
        x: x[0].round() as usize,
        y: x[1].round() as usize,
    })?;
    Ok((0..ev.n).map(|i| (ev.ids[i], ev.weights[i])).collect())
}

pub(crate) fn table_for(store: &SiteStore, field: &CandidateField) -> Result<ScoreTable> {
    let s = normalization_scale(field.image_width, field.image_height)?;
    Ok(ScoreTable::new(store, s))
}

/// Evaluates `f` on every pixel in parallel, row-major.
fn map_pixels<T: Send + Default + Clone>(
    field: &CandidateField,
    table: &ScoreTable,
    f: impl Fn(&PixelEval) -> T + Sync,
) -> Result<Vec<T>> {
    let w = field.image_width;
    let mut out = vec![T::default(); w * field.image_height];
    out.par_chunks_mut(w).enumerate().try_for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let ev = PixelEval::new(table, field.pixel_list(x, y), x as f64, y as f64)
                .ok_or(SadError::EmptyCandidates { x, y })?;
            *slot = f(&ev);
        }
        Ok::<(), SadError>(())
    })?;
    Ok(out)
}

/// Soft color blend at every pixel.
pub fn render_image(store: &SiteStore, field: &CandidateField) -> Result<ImageBuffer> {
    let table = table_for(store, field)?;
    let pixels = map_pixels(field, &table, |ev| ev.blend(store))?;
    Ok(ImageBuffer { width: field.image_width, height: field.image_height, pixels })
}

/// Builds a candidate field from scratch (seed, flood, then `passes` step-1
/// passes) and renders it. This is the decoder path.
pub fn render_fresh(
    store: &SiteStore,
    width: usize,
    height: usize,
    k: usize,
    passes: usize,
    params: crate::candidates::PropagationParams,
) -> Result<(ImageBuffer, CandidateField)> {
    if store.count_active() == 0 {
        return Err(SadError::EmptyModel);
    }
    let mut field = CandidateField::new(width, height, k)?;
    crate::candidates::refresh(store, &mut field, crate::candidates::RefreshMode::Full, passes, params)?;
    let img = render_image(store, &field)?;
    Ok((img, field))
}

/// The candidate with the highest logit at every pixel.
pub fn render_id_map(store: &SiteStore, field: &CandidateField) -> Result<Vec<u32>> {
    let table = table_for(store, field)?;
    map_pixels(field, &table, |ev| {
        let mut best = 0;
        for i in 1..ev.n {
            if crate::score::ranks_before(ev.logits[i], ev.ids[i], ev.logits[best], ev.ids[best]) {
                best = i;
            }
        }
        ev.ids[best]
    })
}

/// Pixels whose 4-neighbourhood (including themselves) holds at least two
/// distinct ids.
pub fn boundary_map(ids: &[u32], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let c = ids[y * width + x];
            let differs = |nx: usize, ny: usize| ids[ny * width + nx] != c;
            out[y * width + x] = (x > 0 && differs(x - 1, y))
                || (x + 1 < width && differs(x + 1, y))
                || (y > 0 && differs(x, y - 1))
                || (y + 1 < height && differs(x, y + 1));
        }
    }
    out
}

/// Weight-averaged `log_tau` at every pixel.
pub fn render_tau_map(store: &SiteStore, field: &CandidateField) -> Result<Vec<f64>> {
    let table = table_for(store, field)?;
    map_pixels(field, &table, |ev| (0..ev.n).map(|i| ev.weights[i] * store.sites[ev.ids[i] as usize].log_tau).sum())
}

/// Writes the ownership map with a pseudo-random color per id.
pub fn save_id_map(path: impl AsRef<Path>, ids: &[u32], width: usize, height: usize) -> Result<()> {
    let img = ImageBuffer { width, height, pixels: ids.iter().map(|id| id_color(*id)).collect() };
    img.save(path)
}

/// Writes boundaries as black on white.
pub fn save_boundary_map(path: impl AsRef<Path>, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let v: Vec<f64> = mask.iter().map(|b| if *b { 0.0 } else { 1.0 }).collect();
    save_gray(path, width, height, &v, 0.0, 1.0)
}

/// Writes the tau map as grayscale over the clamp range of `log_tau`.
pub fn save_tau_map(path: impl AsRef<Path>, tau: &[f64], width: usize, height: usize) -> Result<()> {
    let (lo, hi) = crate::site::LOG_TAU_RANGE;
    save_gray(path, width, height, tau, lo, hi)
}
