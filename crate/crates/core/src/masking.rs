//! IoU-driven mask ratio and per-image random patch masks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_index::{iou, GeoBBox};

/// Mask-ratio bounds: `m1` at zero overlap, `m2` at full overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub m1: f64,
    pub m2: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { m1: 0.75, m2: 0.85 }
    }
}

impl MaskConfig {
    pub fn new(m1: f64, m2: f64) -> Result<Self> {
        let cfg = MaskConfig { m1, m2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m1 && self.m1 <= self.m2 && self.m2 <= 1.0) {
            return Err(Error::Config(format!(
                "mask bounds must satisfy 0 <= m1 <= m2 <= 1, got ({}, {})",
                self.m1, self.m2
            )));
        }
        Ok(())
    }

    /// The six (m1, m2) settings of the mask-ratio ablation.
    pub fn ablation_presets() -> [MaskConfig; 6] {
        [
            (0.75, 0.75),
            (0.75, 0.80),
            (0.75, 0.85),
            (0.75, 0.90),
            (0.80, 0.80),
            (0.80, 0.85),
        ]
        .map(|(m1, m2)| MaskConfig { m1, m2 })
    }
}

/// Linear interpolation between the bounds by pair overlap.
pub fn dynamic_mask_ratio(iou: f64, cfg: &MaskConfig) -> f64 {
    let iou = iou.clamp(0.0, 1.0);
    cfg.m1 + iou * (cfg.m2 - cfg.m1)
}

/// Boolean patch grid, `true` = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub mask: Array2<bool>,
    pub keep_count: usize,
}

impl PatchMask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        PatchMask {
            mask: Array2::from_elem((rows, cols), false),
            keep_count: rows * cols,
        }
    }

    pub fn from_grid(mask: Array2<bool>) -> Self {
        let keep_count = mask.iter().filter(|m| !**m).count();
        PatchMask { mask, keep_count }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.len() - self.keep_count
    }

    pub fn grid(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// Masked flag by row-major patch index.
    pub fn is_masked(&self, patch: usize) -> bool {
        let cols = self.mask.ncols();
        self.mask[[patch / cols, patch % cols]]
    }

    /// Row-major indices of the visible patches, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.is_masked(p)).collect()
    }

    pub fn complement(&self) -> PatchMask {
        PatchMask::from_grid(self.mask.mapv(|m| !m))
    }
}

/// Number of masked patches for `n` patches at `ratio`: round half up, then
/// kept inside `[1, n - 1]` whenever `0 < ratio < 1`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    let raw = (n as f64 * ratio + 0.5).floor() as usize;
    if ratio <= 0.0 {
        0
    } else if ratio >= 1.0 {
        n
    } else if n >= 2 {
        raw.clamp(1, n - 1)
    } else {
        raw.min(n)
    }
}

/// Masks `masked_count(rows * cols, ratio)` patches chosen uniformly without
/// replacement. At least one patch always stays visible.
pub fn sample_mask<R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> PatchMask {
    let n = rows * cols;
    let k = masked_count(n, ratio).min(n.saturating_sub(1));
    let mut mask = Array2::from_elem((rows, cols), false);
    for p in rand::seq::index::sample(rng, n, k).into_iter() {
        mask[[p / cols, p % cols]] = true;
    }
    PatchMask {
        mask,
        keep_count: n - k,
    }
}

/// Masks for both images of a pair at the ratio given by their augmented
/// overlap. The two masks come from independent generators seeded by `rng`.
pub fn mask_pair<R: Rng + ?Sized>(
    bbox_i: &GeoBBox,
    bbox_j: &GeoBBox,
    grid: (usize, usize),
    cfg: &MaskConfig,
    rng: &mut R,
) -> (PatchMask, PatchMask, f64) {
    let seeds: [u64; 2] = [rng.random(), rng.random()];
    mask_pair_seeded(bbox_i, bbox_j, grid, cfg, seeds)
}

pub fn mask_pair_seeded(
    bbox_i: &GeoBBox,
    bbox_j: &GeoBBox,
    grid: (usize, usize),
    cfg: &MaskConfig,
    seeds: [u64; 2],
) -> (PatchMask, PatchMask, f64) {
    let ratio = dynamic_mask_ratio(iou(bbox_i, bbox_j), cfg);
    let mi = sample_mask(grid.0, grid.1, ratio, &mut ChaCha8Rng::seed_from_u64(seeds[0]));
    let mj = sample_mask(grid.0, grid.1, ratio, &mut ChaCha8Rng::seed_from_u64(seeds[1]));
    (mi, mj, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::rng_for;
    use proptest::prelude::*;

    #[test]
    fn ratio_endpoints_and_midpoint() {
        let cfg = MaskConfig::default();
        assert_eq!(dynamic_mask_ratio(0.0, &cfg), 0.75);
        assert_eq!(dynamic_mask_ratio(1.0, &cfg), 0.85);
        assert!((dynamic_mask_ratio(0.5, &cfg) - 0.80).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(MaskConfig::new(0.9, 0.8).is_err());
        assert!(MaskConfig::new(-0.1, 0.8).is_err());
        assert!(MaskConfig::new(0.8, 1.1).is_err());
        assert_eq!(MaskConfig::ablation_presets().len(), 6);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let m = sample_mask(4, 4, 0.0, &mut rng_for(1, &[]));
        assert_eq!(m.keep_count, 16);
        assert!(m.mask.iter().all(|v| !v));
    }

    #[test]
    fn fourteen_grid_at_three_quarters() {
        // round(196 * 0.75) = 147
        let m = sample_mask(14, 14, 0.75, &mut rng_for(2, &[]));
        assert_eq!(m.masked_count(), 147);
        assert_eq!(m.keep_count, 49);
    }

    #[test]
    fn per_patch_frequency_matches_ratio() {
        let mut rng = rng_for(3, &[]);
        let n_samples = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n_samples {
            let m = sample_mask(4, 4, 0.75, &mut rng);
            for (p, c) in counts.iter_mut().enumerate() {
                *c += m.is_masked(p) as usize;
            }
        }
        for c in counts {
            let f = c as f64 / n_samples as f64;
            assert!((f - 0.75).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn pair_ratio_follows_overlap() {
        let cfg = MaskConfig::default();
        let a = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let far = GeoBBox::new(5.0, 6.0, 5.0, 6.0).unwrap();
        let (mi, mj, r) = mask_pair(&a, &far, (4, 4), &cfg, &mut rng_for(4, &[]));
        assert_eq!(r, 0.75);
        assert_eq!(mi.masked_count(), 12);
        assert_eq!(mj.masked_count(), 12);
        let (_, _, r) = mask_pair(&a, &a, (4, 4), &cfg, &mut rng_for(4, &[]));
        assert_eq!(r, 0.85);
    }

    #[test]
    fn swapping_seeds_swaps_masks() {
        let cfg = MaskConfig::default();
        let a = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let (x, y, _) = mask_pair_seeded(&a, &a, (8, 8), &cfg, [10, 20]);
        let (y2, x2, _) = mask_pair_seeded(&a, &a, (8, 8), &cfg, [20, 10]);
        assert_eq!(x, x2);
        assert_eq!(y, y2);
        assert_ne!(x, y);
    }

    #[test]
    fn constant_bounds_reduce_to_fixed_ratio() {
        let cfg = MaskConfig::new(0.75, 0.75).unwrap();
        for v in [0.0, 0.3, 1.0] {
            assert_eq!(dynamic_mask_ratio(v, &cfg), 0.75);
        }
    }

    proptest! {
        #[test]
        fn ratio_is_affine_and_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64, m1 in 0.0..=1.0f64, m2 in 0.0..=1.0f64) {
            let cfg = MaskConfig { m1: m1.min(m2), m2: m1.max(m2) };
            let (ra, rb) = (dynamic_mask_ratio(a, &cfg), dynamic_mask_ratio(b, &cfg));
            prop_assert!(ra >= cfg.m1 - 1e-15 && ra <= cfg.m2 + 1e-15);
            if a <= b { prop_assert!(ra <= rb + 1e-15); }
            prop_assert!(((rb - ra) - (cfg.m2 - cfg.m1) * (b - a)).abs() < 1e-12);
        }

        #[test]
        fn mask_counts_consistent(rows in 1usize..12, cols in 1usize..12, ratio in 0.0..0.999f64, seed in any::<u64>()) {
            let m = sample_mask(rows, cols, ratio, &mut rng_for(seed, &[]));
            let n = rows * cols;
            prop_assert_eq!(m.keep_count + m.masked_count(), n);
            prop_assert_eq!(m.mask.iter().filter(|v| !**v).count(), m.keep_count);
            prop_assert!(m.keep_count >= 1);
            if n >= 2 && ratio > 0.0 {
                prop_assert!(m.masked_count() >= 1);
            }
            let again = sample_mask(rows, cols, ratio, &mut rng_for(seed, &[]));
            prop_assert_eq!(m, again);
        }
    }
}
