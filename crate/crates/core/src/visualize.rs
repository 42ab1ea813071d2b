//! Reconstruction panels: one row per image with the input, its mask, the
//! prediction, the cross-visible pixels and the loss weight.

use ndarray::{s, Array3, ArrayView3};
use serde::Serialize;

use crate::augmentation::{apply_crop, CropParams};
use crate::error::Result;
use crate::exec::derive_seed;
use crate::masking::MaskConfig;
use crate::model::{LossOutput, MaskedAutoencoder, MaskedPair};
use crate::pipeline::{AugmentedPair, Dataset};
use crate::visibility::{Visibility, WeightPolicy};

pub const PANELS: [&str; 5] = ["pair", "mask", "prediction", "cross", "weight"];
/// Pixels of background between panels.
pub const GUTTER: usize = 2;
const MASK_GRAY: f64 = 0.5;

/// Builds the masked pair for two dataset images, each taken whole and
/// resized to `input_size`. With `complementary` the second image sees
/// exactly the patches the first one hides.
pub fn panel_pair(
    dataset: &Dataset,
    ids: (&str, &str),
    input_size: usize,
    patch_size: usize,
    mask: &MaskConfig,
    seed: u64,
    complementary: bool,
) -> Result<MaskedPair> {
    let whole = |id: &str| {
        let rec = dataset.record(id)?;
        let px = dataset.pixels(id)?;
        apply_crop(
            rec,
            px,
            CropParams::full(rec.height_px, rec.width_px),
            false,
            input_size,
        )
    };
    let seeds = [derive_seed(seed, &[0]), derive_seed(seed, &[1])];
    let mut pair = AugmentedPair::new(whole(ids.0)?, whole(ids.1)?)?.into_masked(mask, input_size / patch_size, seeds);
    if complementary {
        pair.views[1].mask = pair.views[0].mask.complement();
    }
    Ok(pair)
}

/// Per-image numbers written next to the panel image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewSummary {
    pub id: String,
    pub masked_pixels: usize,
    pub self_pixels: usize,
    pub cross_pixels: usize,
    pub not_visible_pixels: usize,
    pub mean_cross_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelSummary {
    pub panels: Vec<&'static str>,
    pub policy: WeightPolicy,
    pub mask_ratio: f64,
    pub loss: f64,
    pub views: Vec<ViewSummary>,
}

pub struct Panels {
    /// `rows` panel rows stacked vertically, RGB in [0, 1].
    pub image: Array3<f64>,
    pub summary: PanelSummary,
}

/// Renders the panel grid for `pair` under `policy`.
pub fn render_panels(model: &MaskedAutoencoder, pair: &MaskedPair, policy: WeightPolicy) -> Result<Panels> {
    let out = model.forward_loss(pair, policy)?;
    let p = model.config.patch_size;
    let size = model.config.input_size;
    let rows = pair.views.len();
    let (h, w) = (
        rows * size + (rows - 1) * GUTTER,
        PANELS.len() * size + (PANELS.len() - 1) * GUTTER,
    );
    let mut image = Array3::ones((h, w, 3));
    let recon = out.recon_pixels();
    let mut views = Vec::with_capacity(rows);
    for (vi, view) in pair.views.iter().enumerate() {
        let masked = |y: usize, x: usize| view.mask.mask[[y / p, x / p]];
        let category = &out.visibility[vi].category;
        let weights = &out.weights[vi].weights;
        let mut tiles = vec![view.pixels.clone(); PANELS.len()];
        for ((y, x, c), v) in view.pixels.indexed_iter() {
            if masked(y, x) {
                tiles[1][[y, x, c]] = MASK_GRAY;
                tiles[2][[y, x, c]] = recon[vi][[y, x, c]].clamp(0.0, 1.0);
            }
            tiles[3][[y, x, c]] = if category[[y, x]] == Visibility::CrossVisible {
                *v
            } else {
                0.0
            };
            tiles[4][[y, x, c]] = weights[[y, x]];
        }
        let top = vi * (size + GUTTER);
        for (k, tile) in tiles.iter().enumerate() {
            let left = k * (size + GUTTER);
            image.slice_mut(s![top..top + size, left..left + size, ..]).assign(tile);
        }
        views.push(summarize(&out, vi, pair.ids.get(vi).cloned().unwrap_or_default()));
    }
    Ok(Panels {
        image,
        summary: PanelSummary {
            panels: PANELS.to_vec(),
            policy,
            mask_ratio: pair.mask_ratio,
            loss: out.loss,
            views,
        },
    })
}

fn summarize(out: &LossOutput, vi: usize, id: String) -> ViewSummary {
    let vis = &out.visibility[vi];
    let cross = vis.count(Visibility::CrossVisible);
    let cross_weight: f64 = vis
        .category
        .indexed_iter()
        .filter(|(_, c)| **c == Visibility::CrossVisible)
        .map(|(at, _)| out.weights[vi].weights[at])
        .sum();
    let self_pixels = vis.count(Visibility::SelfVisible);
    ViewSummary {
        id,
        masked_pixels: vis.category.len() - self_pixels,
        self_pixels,
        cross_pixels: cross,
        not_visible_pixels: vis.count(Visibility::NotVisible),
        mean_cross_weight: (cross > 0).then(|| cross_weight / cross as f64),
    }
}

/// The `k`-th panel of row `row`.
pub fn panel(image: ArrayView3<'_, f64>, size: usize, row: usize, k: usize) -> ArrayView3<'_, f64> {
    let (top, left) = (row * (size + GUTTER), k * (size + GUTTER));
    image.slice_move(s![top..top + size, left..left + size, ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::MemorySource;
    use crate::geo_index::{GeoBBox, ImageRecord};
    use crate::model::ModelConfig;

    fn dataset() -> Dataset {
        let rec = |id: &str, lon: f64| ImageRecord {
            id: id.into(),
            path: format!("{id}.png"),
            bbox: GeoBBox::new(0.0, 1.0, lon, lon + 1.0).unwrap(),
            width_px: 48,
            height_px: 48,
            timestamp: None,
        };
        let records = vec![rec("a", 0.0), rec("b", 0.5), rec("far", 10.0)];
        let mut images = MemorySource::default();
        for (k, r) in records.iter().enumerate() {
            let px = Array3::from_shape_fn((48, 48, 3), |(y, x, c)| ((y * 7 + x * 3 + c + k) % 17) as f64 / 16.0);
            images.images.insert(r.id.clone(), px);
        }
        Dataset::new(records, images).unwrap()
    }

    fn cross_mask(panels: &Panels, row: usize) -> Vec<bool> {
        let cross = panel(panels.image.view(), 32, row, 3);
        let orig = panel(panels.image.view(), 32, row, 0);
        (0..32 * 32)
            .map(|k| {
                let (y, x) = (k / 32, k % 32);
                (0..3).all(|c| cross[[y, x, c]] == orig[[y, x, c]]) && (0..3).any(|c| cross[[y, x, c]] != 0.0)
            })
            .collect()
    }

    #[test]
    fn untrained_model_renders_every_panel() {
        let ds = dataset();
        let model = MaskedAutoencoder::new(ModelConfig::default(), 1).unwrap();
        let pair = panel_pair(&ds, ("a", "b"), 32, 8, &MaskConfig::default(), 3, false).unwrap();
        let panels = render_panels(&model, &pair, WeightPolicy::Ours).unwrap();
        assert_eq!(panels.image.dim(), (2 * 32 + GUTTER, 5 * 32 + 4 * GUTTER, 3));
        assert!(panels.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(panels.summary.loss.is_finite());
        assert_eq!(panels.summary.views.len(), 2);
    }

    #[test]
    fn identical_pair_cross_panel_matches_oracle() {
        let ds = dataset();
        let model = MaskedAutoencoder::new(ModelConfig::default(), 1).unwrap();
        for complementary in [false, true] {
            let pair = panel_pair(&ds, ("a", "a"), 32, 8, &MaskConfig::default(), 5, complementary).unwrap();
            let panels = render_panels(&model, &pair, WeightPolicy::Ours).unwrap();
            let (mi, mj) = (&pair.views[0].mask.mask, &pair.views[1].mask.mask);
            let oracle: Vec<bool> = (0..32 * 32)
                .map(|k| {
                    let (r, c) = (k / 32 / 8, k % 32 / 8);
                    mi[[r, c]] && !mj[[r, c]]
                })
                .collect();
            assert_eq!(cross_mask(&panels, 0), oracle);
            if complementary {
                let masked: Vec<bool> = (0..32 * 32).map(|k| mi[[k / 32 / 8, k % 32 / 8]]).collect();
                assert_eq!(cross_mask(&panels, 0), masked);
                assert_eq!(
                    panels.summary.views[0].cross_pixels,
                    panels.summary.views[0].masked_pixels
                );
            }
        }
    }

    #[test]
    fn disjoint_pair_has_empty_cross_panel() {
        let ds = dataset();
        let model = MaskedAutoencoder::new(ModelConfig::default(), 1).unwrap();
        let pair = panel_pair(&ds, ("a", "far"), 32, 8, &MaskConfig::default(), 5, true).unwrap();
        let panels = render_panels(&model, &pair, WeightPolicy::Ours).unwrap();
        assert!(cross_mask(&panels, 0).iter().all(|c| !c));
        assert!(cross_mask(&panels, 1).iter().all(|c| !c));
        assert_eq!(panels.summary.views[0].mean_cross_weight, None);
    }
}
