//! Shared-frame normalization of a pair's footprints and the positional
//! embeddings derived from it.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_index::GeoBBox;

/// Footprint in the pair's shared [0, 1] frame. `top` is the larger latitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBBox {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl NormalizedBBox {
    /// The frame of a lone image: bottom 0, top 1, left 0, right 1.
    pub const UNIT: NormalizedBBox = NormalizedBBox {
        top: 1.0,
        bottom: 0.0,
        left: 0.0,
        right: 1.0,
    };

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.top - self.bottom
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.top, self.bottom, self.left, self.right]
    }
}

/// Maps both footprints into the frame spanned by their union.
pub fn normalize_pair(a: &GeoBBox, b: &GeoBBox) -> Result<(NormalizedBBox, NormalizedBBox)> {
    let phi_lo = a.phi_min.min(b.phi_min);
    let phi_hi = a.phi_max.max(b.phi_max);
    let lam_lo = a.lambda_min.min(b.lambda_min);
    let lam_hi = a.lambda_max.max(b.lambda_max);
    let (dphi, dlam) = (phi_hi - phi_lo, lam_hi - lam_lo);
    if !(dphi > 0.0 && dlam > 0.0) {
        return Err(Error::Degenerate(format!(
            "pair union has zero extent ({dphi} x {dlam} degrees)"
        )));
    }
    let norm = |g: &GeoBBox| NormalizedBBox {
        top: (g.phi_max - phi_lo) / dphi,
        bottom: (g.phi_min - phi_lo) / dphi,
        left: (g.lambda_min - lam_lo) / dlam,
        right: (g.lambda_max - lam_lo) / dlam,
    };
    Ok((norm(a), norm(b)))
}

/// Splits `nb` into an even `rows x cols` grid in row-major order. Row 0 is
/// the top strip. With `flipped`, column 0 is the rightmost strip, matching
/// a horizontally mirrored image.
pub fn patch_bboxes(nb: &NormalizedBBox, rows: usize, cols: usize, flipped: bool) -> Vec<NormalizedBBox> {
    let dy = nb.height() / rows as f64;
    let dx = nb.width() / cols as f64;
    let edge_y = |k: usize| if k == rows { nb.bottom } else { nb.top - dy * k as f64 };
    let edge_x = |k: usize| if k == cols { nb.right } else { nb.left + dx * k as f64 };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cc = if flipped { cols - 1 - c } else { c };
            out.push(NormalizedBBox {
                top: edge_y(r),
                bottom: edge_y(r + 1),
                left: edge_x(cc),
                right: edge_x(cc + 1),
            });
        }
    }
    out
}

/// Sinusoidal encoding of the four box coordinates.
///
/// Each coordinate (in the order top, bottom, left, right) gets a block of
/// `d / 4` columns; column `m` of a block holds `sin` (even `m`) or `cos`
/// (odd `m`) of `coord * scale * 10000^(-2 floor(m/2) / (d/4))`.
pub fn sinusoidal_embed(boxes: &[NormalizedBBox], d: usize, scale: f64) -> Result<Array2<f64>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "embedding dim must be a positive multiple of 4, got {d}"
        )));
    }
    let block = d / 4;
    let freqs: Vec<f64> = (0..block)
        .map(|m| {
            let k = (m / 2) as f64;
            10000f64.powf(-2.0 * k / block as f64)
        })
        .collect();
    let mut out = Array2::zeros((boxes.len(), d));
    for (row, b) in boxes.iter().enumerate() {
        for (q, coord) in b.as_array().into_iter().enumerate() {
            let x = coord * scale;
            for (m, f) in freqs.iter().enumerate() {
                let phase = x * f;
                out[[row, q * block + m]] = if m % 2 == 0 { phase.sin() } else { phase.cos() };
            }
        }
    }
    Ok(out)
}

/// Angular frequency of column `m` within a coordinate block of width `block`.
pub fn block_frequency(m: usize, block: usize) -> f64 {
    10000f64.powf(-2.0 * (m / 2) as f64 / block as f64)
}

/// Adds the image-slot row of `slot_table` to every row of `per_patch`.
pub fn compose_positional(per_patch: ArrayView2<f64>, slot: usize, slot_table: ArrayView2<f64>) -> Result<Array2<f64>> {
    if slot >= slot_table.nrows() || slot_table.ncols() != per_patch.ncols() {
        return Err(Error::Shape(format!(
            "slot {slot} / table {:?} incompatible with embeddings {:?}",
            slot_table.dim(),
            per_patch.dim()
        )));
    }
    Ok(&per_patch + &slot_table.row(slot))
}

/// Gradient of a loss w.r.t. the slot row, given the upstream gradient of
/// [`compose_positional`]'s output.
pub fn compose_positional_slot_grad(upstream: ArrayView2<f64>) -> Array1<f64> {
    upstream.sum_axis(Axis(0))
}
