//! Tile-local reduction of per-pixel, per-site contributions.
//!
//! Each tile accumulates into a small open-addressing table keyed by site
//! id (256 slots, at most 8 probes). Contributions that find no slot go to
//! a per-tile overflow list. Tile results are merged into the global buffer
//! in tile order.
//!
//! The [`Fixed`] accumulator makes the result independent of summation
//! order, so the tiled sum is bit-identical to a naive per-pixel loop.

use rayon::prelude::*;

use crate::config::MergeMode;

pub const TABLE_SLOTS: usize = 256;
pub const MAX_PROBES: usize = 8;
pub const EMPTY_KEY: u32 = 0xffff_ffff;
const HASH_MUL: u32 = 2_654_435_761;

/// A summable scalar.
pub trait Accum: Copy + Default + Send + Sync {
    fn add(&mut self, v: f64);
    fn merge(&mut self, other: &Self);
    fn value(&self) -> f64;
}

impl Accum for f64 {
    #[inline(always)]
    fn add(&mut self, v: f64) {
        *self += v;
    }
    #[inline(always)]
    fn merge(&mut self, other: &Self) {
        *self += *other;
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        *self
    }
}

/// Fixed-point accumulator with 2^-60 resolution. Integer addition is
/// associative, so any grouping of the same terms gives the same bits.
/// Terms are clamped to `±2^42` and truncated toward zero; non-finite
/// terms count as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Fixed(pub i128);

const FIXED_ONE: f64 = (1u64 << 60) as f64;
const FIXED_LIMIT: f64 = (1u64 << 42) as f64;
const I64_RANGE: f64 = 9_223_372_036_854_775_808.0;

impl Fixed {
    #[inline(always)]
    pub fn quantize(v: f64) -> i128 {
        if !v.is_finite() {
            return 0;
        }
        let y = v.clamp(-FIXED_LIMIT, FIXED_LIMIT) * FIXED_ONE;
        if y.abs() < I64_RANGE {
            return y as i64 as i128;
        }
        // |y| >= 2^63 is already an integer: shift the mantissa into place.
        let bits = y.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as u32 - 1075;
        let mag = (((bits & ((1 << 52) - 1)) | (1 << 52)) as i128) << exp;
        if y < 0.0 {
            -mag
        } else {
            mag
        }
    }
}

impl Accum for Fixed {
    #[inline(always)]
    fn add(&mut self, v: f64) {
        self.0 = self.0.wrapping_add(Fixed::quantize(v));
    }
    #[inline(always)]
    fn merge(&mut self, other: &Self) {
        self.0 = self.0.wrapping_add(other.0);
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        self.0 as f64 / FIXED_ONE
    }
}

#[inline(always)]
fn slot_of(id: u32) -> usize {
    (id.wrapping_mul(HASH_MUL) >> 24) as usize
}

/// Destination of per-site contribution vectors.
pub trait Sink<const N: usize> {
    fn add(&mut self, id: u32, v: &[f64; N]);
}

impl<A: Accum, const N: usize> Sink<N> for TileReducer<A, N> {
    #[inline]
    fn add(&mut self, id: u32, v: &[f64; N]) {
        TileReducer::add(self, id, v)
    }
}

impl<const N: usize> Sink<N> for &mut dyn FnMut(u32, &[f64; N]) {
    #[inline]
    fn add(&mut self, id: u32, v: &[f64; N]) {
        self(id, v)
    }
}

/// Bounded tile-local hash table.
pub struct TileReducer<A: Accum, const N: usize> {
    keys: Box<[u32; TABLE_SLOTS]>,
    vals: Box<[[A; N]; TABLE_SLOTS]>,
    used: Vec<usize>,
    overflow: Vec<(u32, [A; N])>,
}

impl<A: Accum, const N: usize> Default for TileReducer<A, N> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Accum, const N: usize> TileReducer<A, N> {
    pub fn new() -> Self {
        TileReducer {
            keys: Box::new([EMPTY_KEY; TABLE_SLOTS]),
            vals: Box::new([[A::default(); N]; TABLE_SLOTS]),
            used: Vec::with_capacity(TABLE_SLOTS),
            overflow: Vec::new(),
        }
    }

    /// Adds one contribution vector for `id`.
    #[inline]
    pub fn add(&mut self, id: u32, v: &[f64; N]) {
        let mut slot = slot_of(id);
        for _ in 0..MAX_PROBES {
            let k = self.keys[slot];
            if k == id {
                let acc = &mut self.vals[slot];
                for j in 0..N {
                    acc[j].add(v[j]);
                }
                return;
            }
            if k == EMPTY_KEY {
                self.keys[slot] = id;
                self.used.push(slot);
                let acc = &mut self.vals[slot];
                for j in 0..N {
                    acc[j] = A::default();
                    acc[j].add(v[j]);
                }
                return;
            }
            slot = (slot + 1) % TABLE_SLOTS;
        }
        let mut acc = [A::default(); N];
        for j in 0..N {
            acc[j].add(v[j]);
        }
        self.overflow.push((id, acc));
    }

    pub fn overflow_len(&self) -> usize {
        self.overflow.len()
    }

    pub fn occupied(&self) -> usize {
        self.used.len()
    }

    /// Moves the table contents out and resets it for the next tile.
    pub fn drain(&mut self) -> Vec<(u32, [A; N])> {
        let mut out = Vec::with_capacity(self.used.len() + self.overflow.len());
        for &slot in &self.used {
            out.push((self.keys[slot], self.vals[slot]));
            self.keys[slot] = EMPTY_KEY;
        }
        self.used.clear();
        out.append(&mut self.overflow);
        out
    }
}

/// Result of a tiled reduction.
pub struct Reduced<A: Accum, const N: usize> {
    pub per_site: Vec<[A; N]>,
    /// Sum of the per-pixel scalar returned by the pixel callback.
    pub scalar: A,
    /// Number of contributions that bypassed the tile tables.
    pub overflowed: usize,
}

/// Runs `pixel(x, y, reducer)` over every pixel, tile by tile, and merges
/// the tile tables into one vector per site in tile order.
pub fn reduce_tiled<A, const N: usize, F>(width: usize, height: usize, tile: usize, n_sites: usize, pixel: F) -> Reduced<A, N>
where
    A: Accum,
    F: Fn(usize, usize, &mut TileReducer<A, N>) -> f64 + Sync,
{
    let tile = tile.max(1);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let parts: Vec<(Vec<(u32, [A; N])>, A, usize)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map_init(TileReducer::<A, N>::new, |red, t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut scalar = A::default();
            for y in ty * tile..((ty + 1) * tile).min(height) {
                for x in tx * tile..((tx + 1) * tile).min(width) {
                    scalar.add(pixel(x, y, red));
                }
            }
            let overflowed = red.overflow_len();
            (red.drain(), scalar, overflowed)
        })
        .collect();
    let mut per_site = vec![[A::default(); N]; n_sites];
    let mut scalar = A::default();
    let mut overflowed = 0;
    for (entries, s, o) in parts {
        for (id, v) in entries {
            let acc = &mut per_site[id as usize];
            for j in 0..N {
                acc[j].merge(&v[j]);
            }
        }
        scalar.merge(&s);
        overflowed += o;
    }
    Reduced { per_site, scalar, overflowed }
}

/// Plain nested loop over pixels in row-major order; the reference for
/// [`reduce_tiled`].
pub fn reduce_naive<A, const N: usize, F>(width: usize, height: usize, n_sites: usize, pixel: F) -> Reduced<A, N>
where
    A: Accum,
    F: Fn(usize, usize, &mut dyn FnMut(u32, &[f64; N])) -> f64,
{
    let mut per_site = vec![[A::default(); N]; n_sites];
    let mut scalar = A::default();
    for y in 0..height {
        for x in 0..width {
            let s = pixel(x, y, &mut |id, v| {
                for j in 0..N {
                    per_site[id as usize][j].add(v[j]);
                }
            });
            scalar.add(s);
        }
    }
    Reduced { per_site, scalar, overflowed: 0 }
}

impl<A: Accum, const N: usize> Reduced<A, N> {
    pub fn values(&self) -> Vec<[f64; N]> {
        self.per_site.iter().map(|v| std::array::from_fn(|j| v[j].value())).collect()
    }
}

/// Per-pixel contribution lists reduced with the chosen merge mode.
/// Returns the per-site sums.
pub fn accumulate_tiled<const N: usize>(
    width: usize,
    height: usize,
    tile: usize,
    n_sites: usize,
    mode: MergeMode,
    contributions: &[Vec<(u32, [f64; N])>],
) -> Vec<[f64; N]> {
    let pixel = |x: usize, y: usize| &contributions[y * width + x];
    match mode {
        MergeMode::Deterministic => reduce_tiled::<Fixed, N, _>(width, height, tile, n_sites, |x, y, r| {
            for (id, v) in pixel(x, y) {
                r.add(*id, v);
            }
            0.0
        })
        .values(),
        MergeMode::Fast => reduce_tiled::<f64, N, _>(width, height, tile, n_sites, |x, y, r| {
            for (id, v) in pixel(x, y) {
                r.add(*id, v);
            }
            0.0
        })
        .values(),
    }
}

/// Naive row-major summation of the same contributions.
pub fn accumulate_naive<const N: usize>(
    width: usize,
    height: usize,
    n_sites: usize,
    mode: MergeMode,
    contributions: &[Vec<(u32, [f64; N])>],
) -> Vec<[f64; N]> {
    let pixel = |x: usize, y: usize, sink: &mut dyn FnMut(u32, &[f64; N])| {
        for (id, v) in &contributions[y * width + x] {
            sink(*id, v);
        }
        0.0
    };
    match mode {
        MergeMode::Deterministic => reduce_naive::<Fixed, N, _>(width, height, n_sites, pixel).values(),
        MergeMode::Fast => reduce_naive::<f64, N, _>(width, height, n_sites, pixel).values(),
    }
}
