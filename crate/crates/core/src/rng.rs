//! 32-bit xorshift stream used for per-pixel stochastic injection.
//!
//! Streams are derived from `(seed, step index, pixel id)` through an integer
//! mixer, so the same triple yields the same stream on every platform and the
//! order in which pixels are visited does not matter.

/// Marsaglia xorshift32 state. Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState(u32);

#[inline]
fn mix32(mut h: u32) -> u32 {
    // lowbias32 finalizer
    h ^= h >> 16;
    h = h.wrapping_mul(0x7feb_352d);
    h ^= h >> 15;
    h = h.wrapping_mul(0x846c_a68b);
    h ^= h >> 16;
    h
}

impl RngState {
    pub fn new(seed: u32) -> Self {
        let s = mix32(seed);
        RngState(if s == 0 { 0x9e37_79b9 } else { s })
    }

    /// Stream for one pixel at one propagation step.
    pub fn for_pixel(seed: u64, step_index: u64, pixel_id: u32) -> Self {
        let folded = (seed ^ (seed >> 32)) as u32;
        let step = (step_index ^ (step_index >> 32)) as u32;
        let h = mix32(folded ^ mix32(step.wrapping_add(0x632b_e5ab)) ^ mix32(pixel_id.wrapping_mul(0x9e37_79b9).wrapping_add(1)));
        Self::new(h)
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        self.0 = x;
        x
    }

    /// Uniform integer in `0..n` (multiply-shift reduction). `n` must be > 0.
    #[inline]
    pub fn below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }

    pub fn state(&self) -> u32 {
        self.0
    }
}
