//! 128-bit packed site records, per-image quantization ranges and the
//! `.sad` container.
//!
//! Record layout (four little-endian `u32` words):
//!
//! | word | bits    | content                                   |
//! |------|---------|-------------------------------------------|
//! | w0   | 0..15   | x, 15-bit unorm over `[0, W-1]`           |
//! | w0   | 15..30  | y, 15-bit unorm over `[0, H-1]`           |
//! | w0   | 30      | reserved, zero                            |
//! | w0   | 31      | active flag                               |
//! | w1   | 0..11   | red, 11-bit unorm over the color range    |
//! | w1   | 11..22  | green, 11-bit unorm                       |
//! | w1   | 22..32  | blue, 10-bit unorm                        |
//! | w2   | 0..16   | log_tau, 16-bit unorm                     |
//! | w2   | 16..32  | radius, 16-bit unorm                      |
//! | w3   | 0..16   | direction angle, 16-bit unorm over [-pi, pi] |
//! | w3   | 16..32  | aniso as IEEE-754 half                    |
//!
//! Container: `"SADF"`, version `u16`, width `u16`, height `u16`, count
//! `u32`, reserved `u32`, ten `f32` range scalars, then the records.

use std::path::Path;

use half::f16;

use crate::error::{invalid, Result, SadError};
use crate::site::{Site, SiteStore};

pub const MAGIC: [u8; 4] = *b"SADF";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 18;
pub const RANGES_BYTES: usize = 40;
pub const RECORD_BYTES: usize = 16;
pub const BITS_PER_SITE: usize = 128;
/// Smallest stored range width.
pub const MIN_SCALE: f32 = 1e-6;

const ACTIVE_BIT: u32 = 1 << 31;

/// Per-image quantization ranges; each value `v` is coded over
/// `[min, min + scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRanges {
    pub log_tau_min: f32,
    pub log_tau_scale: f32,
    pub radius_min: f32,
    pub radius_scale: f32,
    pub color_min: [f32; 3],
    pub color_scale: [f32; 3],
}

impl QuantRanges {
    /// The ten scalars in file order.
    pub fn to_array(&self) -> [f32; 10] {
        [
            self.log_tau_min,
            self.log_tau_scale,
            self.radius_min,
            self.radius_scale,
            self.color_min[0],
            self.color_min[1],
            self.color_min[2],
            self.color_scale[0],
            self.color_scale[1],
            self.color_scale[2],
        ]
    }

    pub fn from_array(a: [f32; 10]) -> Self {
        QuantRanges {
            log_tau_min: a[0],
            log_tau_scale: a[1],
            radius_min: a[2],
            radius_scale: a[3],
            color_min: [a[4], a[5], a[6]],
            color_scale: [a[7], a[8], a[9]],
        }
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f32, f32) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, MIN_SCALE);
    }
    let mut min = lo as f32;
    if min as f64 > lo {
        min = f32_below(min);
    }
    // Cover hi after rounding min to f32.
    let scale = ((hi - min as f64) as f32).max(MIN_SCALE);
    let scale = if (min as f64 + scale as f64) < hi { f32::from_bits(scale.to_bits() + 1) } else { scale };
    (min, scale)
}

fn f32_below(v: f32) -> f32 {
    if v == 0.0 {
        -f32::from_bits(1)
    } else if v > 0.0 {
        f32::from_bits(v.to_bits() - 1)
    } else {
        f32::from_bits(v.to_bits() + 1)
    }
}

/// Min and scale over the active sites for `log_tau`, `radius` and each
/// color channel.
pub fn compute_ranges(store: &SiteStore) -> QuantRanges {
    let active = || store.sites.iter().zip(&store.active).filter(|(_, a)| **a).map(|(s, _)| s);
    let (ltm, lts) = range_of(active().map(|s| s.log_tau));
    let (rm, rs) = range_of(active().map(|s| s.radius));
    let mut cm = [0.0; 3];
    let mut cs = [0.0; 3];
    for ch in 0..3 {
        (cm[ch], cs[ch]) = range_of(active().map(|s| s.color[ch]));
    }
    QuantRanges { log_tau_min: ltm, log_tau_scale: lts, radius_min: rm, radius_scale: rs, color_min: cm, color_scale: cs }
}

#[inline]
fn unorm_encode(v: f64, min: f64, scale: f64, bits: u32) -> u32 {
    let max = ((1u64 << bits) - 1) as f64;
    let t = if scale > 0.0 { (v - min) / scale } else { 0.0 };
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    (t * max).round() as u32
}

#[inline]
fn unorm_decode(code: u32, min: f64, scale: f64, bits: u32) -> f64 {
    let max = ((1u64 << bits) - 1) as f64;
    min + scale * code as f64 / max
}

/// One 128-bit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PackedSite(pub [u32; 4]);

impl PackedSite {
    pub fn is_active(&self) -> bool {
        self.0[0] & ACTIVE_BIT != 0
    }

    pub fn to_le_bytes(&self) -> [u8; RECORD_BYTES] {
        let mut b = [0u8; RECORD_BYTES];
        for (i, w) in self.0.iter().enumerate() {
            b[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn from_le_bytes(b: &[u8]) -> Self {
        PackedSite(std::array::from_fn(|i| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap())))
    }
}

/// Angle code over `[-pi, pi]`: `round((theta + pi) / (2 pi) * 65535)`.
pub fn angle_code(theta: f64) -> u16 {
    let pi = std::f64::consts::PI;
    let t = ((theta + pi) / (2.0 * pi)).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

pub fn angle_from_code(code: u16) -> f64 {
    let pi = std::f64::consts::PI;
    code as f64 / 65535.0 * 2.0 * pi - pi
}

/// Packs a site. Inactive sites produce an all-zero record.
pub fn pack_site(site: &Site, active: bool, ranges: &QuantRanges, width: usize, height: usize) -> PackedSite {
    if !active {
        return PackedSite([0; 4]);
    }
    let span = |n: usize| (n.saturating_sub(1)) as f64;
    let xc = unorm_encode(site.pos[0], 0.0, span(width), 15);
    let yc = unorm_encode(site.pos[1], 0.0, span(height), 15);
    let w0 = xc | (yc << 15) | ACTIVE_BIT;
    let c = |ch: usize, bits: u32| unorm_encode(site.color[ch], ranges.color_min[ch] as f64, ranges.color_scale[ch] as f64, bits);
    let w1 = c(0, 11) | (c(1, 11) << 11) | (c(2, 10) << 22);
    let lt = unorm_encode(site.log_tau, ranges.log_tau_min as f64, ranges.log_tau_scale as f64, 16);
    let rd = unorm_encode(site.radius, ranges.radius_min as f64, ranges.radius_scale as f64, 16);
    let w2 = lt | (rd << 16);
    let theta = site.dir[1].atan2(site.dir[0]);
    let w3 = angle_code(theta) as u32 | ((f16::from_f64(site.aniso).to_bits() as u32) << 16);
    PackedSite([w0, w1, w2, w3])
}

/// Inverse of [`pack_site`]. Returns the site and its active flag.
pub fn unpack_site(p: &PackedSite, ranges: &QuantRanges, width: usize, height: usize) -> (Site, bool) {
    let [w0, w1, w2, w3] = p.0;
    let active = w0 & ACTIVE_BIT != 0;
    let span = |n: usize| (n.saturating_sub(1)) as f64;
    let mask = |bits: u32| (1u32 << bits) - 1;
    let pos = [unorm_decode(w0 & mask(15), 0.0, span(width), 15), unorm_decode((w0 >> 15) & mask(15), 0.0, span(height), 15)];
    let c = |code: u32, ch: usize, bits: u32| unorm_decode(code, ranges.color_min[ch] as f64, ranges.color_scale[ch] as f64, bits);
    let color = [c(w1 & mask(11), 0, 11), c((w1 >> 11) & mask(11), 1, 11), c(w1 >> 22, 2, 10)];
    let log_tau = unorm_decode(w2 & 0xffff, ranges.log_tau_min as f64, ranges.log_tau_scale as f64, 16);
    let radius = unorm_decode(w2 >> 16, ranges.radius_min as f64, ranges.radius_scale as f64, 16);
    let theta = angle_from_code((w3 & 0xffff) as u16);
    let aniso = f16::from_bits((w3 >> 16) as u16).to_f64();
    (Site { pos, log_tau, radius, color, dir: [theta.cos(), theta.sin()], aniso }, active)
}

/// Parameter-space bits per pixel: `count * 128 / (W * H)`.
pub fn bpp(count: usize, width: usize, height: usize) -> f64 {
    (count * BITS_PER_SITE) as f64 / (width * height) as f64
}

/// Site count for a bit rate: `floor(bpp * W * H / 128)`.
pub fn target_count(bpp: f64, width: usize, height: usize) -> usize {
    (bpp * (width * height) as f64 / BITS_PER_SITE as f64).floor() as usize
}

/// Decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct SadFile {
    pub width: usize,
    pub height: usize,
    pub ranges: QuantRanges,
    pub records: Vec<PackedSite>,
}

impl SadFile {
    /// Packs the active sites of a store.
    pub fn from_store(store: &SiteStore, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > u16::MAX as usize || height > u16::MAX as usize {
            return invalid(format!("image size {width}x{height} does not fit the container"));
        }
        let ranges = compute_ranges(store);
        let records = (0..store.len())
            .filter(|&i| store.active[i])
            .map(|i| pack_site(&store.sites[i], true, &ranges, width, height))
            .collect();
        Ok(SadFile { width, height, ranges, records })
    }

    /// Unpacks every record into a store (inactive records stay inactive).
    pub fn to_store(&self) -> SiteStore {
        let mut store = SiteStore::new();
        for r in &self.records {
            let (site, active) = unpack_site(r, &self.ranges, self.width, self.height);
            let id = store.push(site);
            if !active {
                store.deactivate(id);
            }
        }
        store
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + RANGES_BYTES + RECORD_BYTES * self.records.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in self.ranges.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let need = |offset: usize, n: usize, what: &str| -> Result<()> {
            if b.len() < offset + n {
                return Err(SadError::Framing { offset: b.len(), reason: format!("truncated {what}, expected {n} bytes at offset {offset}") });
            }
            Ok(())
        };
        need(0, 4, "magic")?;
        if b[0..4] != MAGIC {
            return Err(SadError::Framing { offset: 0, reason: "bad magic".into() });
        }
        need(4, HEADER_BYTES - 4, "header")?;
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(SadError::UnsupportedVersion(version));
        }
        let width = u16_at(6) as usize;
        let height = u16_at(8) as usize;
        let count = u32_at(10) as usize;
        if u32_at(14) != 0 {
            return Err(SadError::Framing { offset: 14, reason: "reserved header field is not zero".into() });
        }
        if width == 0 || height == 0 {
            return Err(SadError::Framing { offset: 6, reason: "zero image dimension".into() });
        }
        need(HEADER_BYTES, RANGES_BYTES, "quantization ranges")?;
        let ranges: [f32; 10] = std::array::from_fn(|i| f32::from_le_bytes(b[HEADER_BYTES + 4 * i..HEADER_BYTES + 4 * i + 4].try_into().unwrap()));
        if ranges.iter().any(|v| !v.is_finite()) {
            return Err(SadError::Framing { offset: HEADER_BYTES, reason: "non-finite quantization range".into() });
        }
        let body = HEADER_BYTES + RANGES_BYTES;
        let expected = body + RECORD_BYTES * count;
        need(body, RECORD_BYTES * count, "site records")?;
        if b.len() != expected {
            return Err(SadError::Framing { offset: expected, reason: format!("{} trailing bytes", b.len() - expected) });
        }
        let records = b[body..].chunks_exact(RECORD_BYTES).map(PackedSite::from_le_bytes).collect();
        Ok(SadFile { width, height, ranges: QuantRanges::from_array(ranges), records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn bpp(&self) -> f64 {
        bpp(self.records.len(), self.width, self.height)
    }
}

/// Packs and writes the active sites of a store.
pub fn write_file(path: impl AsRef<Path>, store: &SiteStore, width: usize, height: usize) -> Result<SadFile> {
    let f = SadFile::from_store(store, width, height)?;
    f.write(path)?;
    Ok(f)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<SadFile> {
    SadFile::read(path)
}
