//! Hand-crafted texture descriptor for 224x224 patches.
//!
//! Layout (123 values): three 16-bin colour histograms (R, G, B), a 59-bin
//! uniform local-binary-pattern histogram, and a 16-bin gradient-orientation
//! histogram weighted by gradient magnitude. Every block is L1-normalised.

use std::ops::Range;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::imaging::{Raster, PATCH_SIZE};
use crate::num::Scalar;

pub const COLOR_BINS: usize = 16;
pub const LBP_BINS: usize = 59;
pub const ORIENTATION_BINS: usize = 16;
pub const FEATURE_DIM: usize = 3 * COLOR_BINS + LBP_BINS + ORIENTATION_BINS;

pub const COLOR_BLOCKS: [Range<usize>; 3] = [0..16, 16..32, 32..48];
pub const LBP_BLOCK: Range<usize> = 48..107;
pub const ORIENTATION_BLOCK: Range<usize> = 107..123;

/// Fixed-length descriptor produced by [`featurize`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<F> {
    values: Vec<F>,
}

impl<F: Scalar> FeatureVector<F> {
    /// Wraps raw values. Used for synthetic feature sets and tests; no
    /// normalisation invariant is enforced here.
    pub fn from_values(values: Vec<F>) -> Self {
        FeatureVector { values }
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, r: Range<usize>) -> &[F] {
        &self.values[r]
    }
}

/// Maps each 8-bit pattern to its uniform-LBP bin: the 58 patterns with at
/// most two circular bit transitions get their own bin, everything else
/// shares bin 58.
pub fn uniform_lbp_table() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u8; 256];
        let mut next = 0u8;
        for (pattern, slot) in table.iter_mut().enumerate() {
            let p = pattern as u8;
            if (p ^ p.rotate_right(1)).count_ones() <= 2 {
                *slot = next;
                next += 1;
            } else {
                *slot = (LBP_BINS - 1) as u8;
            }
        }
        debug_assert_eq!(usize::from(next), LBP_BINS - 1);
        table
    })
}

pub fn featurize<F: Scalar>(patch: &Raster) -> Result<FeatureVector<F>> {
    if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
        return Err(Error::InvalidDimensions(format!(
            "featurize expects {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let w = patch.width() as usize;
    let h = patch.height() as usize;
    let mut counts = [0u64; 3 * COLOR_BINS + LBP_BINS];

    for px in patch.pixels().chunks_exact(3) {
        for ch in 0..3 {
            counts[ch * COLOR_BINS + usize::from(px[ch] >> 4)] += 1;
        }
    }

    let luma = patch.luma();
    let table = uniform_lbp_table();
    let mut orient = [0f64; ORIENTATION_BINS];
    let lbp_base = 3 * COLOR_BINS;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let at = |dx: isize, dy: isize| {
                luma[(y as isize + dy) as usize * w + (x as isize + dx) as usize]
            };
            let c = at(0, 0);
            // Neighbours clockwise from the top; bit n set when neighbour >= centre.
            let ring = [
                at(0, -1),
                at(1, -1),
                at(1, 0),
                at(1, 1),
                at(0, 1),
                at(-1, 1),
                at(-1, 0),
                at(-1, -1),
            ];
            let mut pattern = 0u8;
            for (n, &v) in ring.iter().enumerate() {
                pattern |= u8::from(v >= c) << n;
            }
            counts[lbp_base + usize::from(table[usize::from(pattern)])] += 1;

            let gx = f64::from(at(1, 0)) - f64::from(at(-1, 0));
            let gy = f64::from(at(0, 1)) - f64::from(at(0, -1));
            let mag = gx.hypot(gy);
            if mag > 0.0 {
                let angle = gy.atan2(gx) + std::f64::consts::PI;
                let bin = ((angle / std::f64::consts::TAU) * ORIENTATION_BINS as f64) as usize;
                orient[bin.min(ORIENTATION_BINS - 1)] += mag;
            }
        }
    }

    let mut values = Vec::with_capacity(FEATURE_DIM);
    let pixel_total = (w * h) as f64;
    for ch in 0..3 {
        let block = &counts[ch * COLOR_BINS..(ch + 1) * COLOR_BINS];
        values.extend(block.iter().map(|&c| F::of(c as f64 / pixel_total)));
    }
    let lbp_total = ((w - 2) * (h - 2)) as f64;
    values.extend(counts[lbp_base..].iter().map(|&c| F::of(c as f64 / lbp_total)));
    let orient_total: f64 = orient.iter().sum();
    if orient_total > 0.0 {
        values.extend(orient.iter().map(|&m| F::of(m / orient_total)));
    } else {
        // Flat patch: no preferred direction.
        values.extend((0..ORIENTATION_BINS).map(|_| F::of(1.0 / ORIENTATION_BINS as f64)));
    }
    debug_assert_eq!(values.len(), FEATURE_DIM);
    Ok(FeatureVector { values })
}
