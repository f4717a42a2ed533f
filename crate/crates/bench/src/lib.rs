//! Fixtures shared by the kernel benchmarks.

use sad_core::candidates::collision_free_sites;
use sad_core::{refresh, CandidateField, ImageBuffer, PropagationParams, RefreshMode, SiteStore};

/// Smooth test pattern with a few hard edges.
pub fn pattern(w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
        let edge = if (fx - 0.5).powi(2) + (fy - 0.5).powi(2) < 0.09 { 0.7 } else { 0.2 };
        [edge, 0.5 + 0.5 * (9.0 * fx).sin() * (7.0 * fy).cos(), fx]
    })
}

/// Collision-free sites on a square grid with a converged candidate field.
pub fn model(side: usize, sites: usize, seed: u64) -> (SiteStore, CandidateField) {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let store = collision_free_sites(sites, side, side, &mut rng).expect("sites fit the grid");
    let mut field = CandidateField::new(side, side, 8).expect("valid field");
    refresh(&store, &mut field, RefreshMode::Full, 4, PropagationParams::default()).expect("valid store");
    (store, field)
}
