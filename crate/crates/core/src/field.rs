//! Per-pixel top-K candidate lists.

use crate::error::{invalid, Result};

/// Marker for an empty candidate slot.
pub const INVALID_ID: u32 = 0xffff_ffff;

/// Largest supported list length.
pub const MAX_K: usize = 16;

/// Fixed-size candidate list per cell. With `cell_size == 1` a cell is a
/// pixel; larger values cover `cell_size x cell_size` pixel blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateField {
    /// Image width in pixels.
    pub image_width: usize,
    pub image_height: usize,
    /// Grid dimensions in cells.
    pub width: usize,
    pub height: usize,
    pub cell_size: usize,
    pub k: usize,
    pub ids: Vec<u32>,
    /// Number of completed refreshes.
    pub generation: u64,
    /// Number of propagation passes run so far; seeds the injection stream.
    pub passes: u64,
}

impl CandidateField {
    pub fn new(image_width: usize, image_height: usize, k: usize) -> Result<Self> {
        Self::with_cell_size(image_width, image_height, k, 1)
    }

    pub fn with_cell_size(image_width: usize, image_height: usize, k: usize, cell_size: usize) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return invalid("candidate field needs positive dimensions");
        }
        if k == 0 || k > MAX_K {
            return invalid(format!("k must be in 1..={MAX_K}, got {k}"));
        }
        if cell_size == 0 {
            return invalid("cell size must be positive");
        }
        let width = image_width.div_ceil(cell_size);
        let height = image_height.div_ceil(cell_size);
        Ok(CandidateField {
            image_width,
            image_height,
            width,
            height,
            cell_size,
            k,
            ids: vec![INVALID_ID; width * height * k],
            generation: 0,
            passes: 0,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn list(&self, cell: usize) -> &[u32] {
        &self.ids[cell * self.k..(cell + 1) * self.k]
    }

    #[inline]
    pub fn list_mut(&mut self, cell: usize) -> &mut [u32] {
        let k = self.k;
        &mut self.ids[cell * k..(cell + 1) * k]
    }

    /// Cell index covering a pixel.
    #[inline]
    pub fn cell_of_pixel(&self, x: usize, y: usize) -> usize {
        (y / self.cell_size) * self.width + x / self.cell_size
    }

    /// Candidate list used when shading pixel `(x, y)`.
    #[inline]
    pub fn pixel_list(&self, x: usize, y: usize) -> &[u32] {
        self.list(self.cell_of_pixel(x, y))
    }

    /// Position at which a cell's list is scored: the cell center in pixel
    /// coordinates (the pixel itself when `cell_size == 1`).
    #[inline]
    pub fn cell_center(&self, cx: usize, cy: usize) -> [f64; 2] {
        let half = (self.cell_size as f64 - 1.0) * 0.5;
        [(cx * self.cell_size) as f64 + half, (cy * self.cell_size) as f64 + half]
    }

    pub fn clear(&mut self) {
        self.ids.fill(INVALID_ID);
    }

    pub fn valid_count(&self, cell: usize) -> usize {
        self.list(cell).iter().filter(|id| **id != INVALID_ID).count()
    }

    /// Raw little-endian dump of the id grid.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.ids.iter().flat_map(|id| id.to_le_bytes()).collect()
    }
}
