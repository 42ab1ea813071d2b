//! Turns an anchor id into a masked pair ready for the model: neighbor draw
//! (self-pair when the anchor has none), independent crops, shared-frame
//! normalization, and overlap-dependent masking.

use std::collections::HashMap;

use crate::augmentation::{augment_pair, AugmentConfig, AugmentedImage, ImageSource, MemorySource};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, rng_for};
use crate::geo_index::{iou, ImageRecord, NeighborIndex};
use crate::imagery::Pixels;
use crate::masking::{mask_pair_seeded, MaskConfig};
use crate::model::{MaskedPair, MaskedView};
use crate::relpos::{normalize_pair, NormalizedBBox};

/// Records plus their decoded pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
    images: MemorySource,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, images: MemorySource) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            r.validate()?;
            if by_id.insert(r.id.clone(), k).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            let px = images.get(&r.id)?;
            if (px.dim().0, px.dim().1) != (r.height_px, r.width_px) {
                return Err(Error::Shape(format!(
                    "image `{}` is {}x{}, metadata says {}x{}",
                    r.id,
                    px.dim().0,
                    px.dim().1,
                    r.height_px,
                    r.width_px
                )));
            }
        }
        Ok(Dataset { records, by_id, images })
    }

    /// Decodes every record through `source` up front.
    pub fn load(records: Vec<ImageRecord>, source: &dyn ImageSource) -> Result<Self> {
        let images = MemorySource::preload(&records, source)?;
        Self::new(records, images)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: &str) -> Result<&ImageRecord> {
        self.by_id
            .get(id)
            .map(|&k| &self.records[k])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn pixels(&self, id: &str) -> Result<&Pixels> {
        self.images.get(id)
    }
}

/// Two augmented images with their shared-frame footprints.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub image_i: AugmentedImage,
    pub image_j: AugmentedImage,
    pub frame_i: NormalizedBBox,
    pub frame_j: NormalizedBBox,
    /// IoU of the post-crop footprints.
    pub iou: f64,
}

impl AugmentedPair {
    pub fn new(image_i: AugmentedImage, image_j: AugmentedImage) -> Result<Self> {
        let (frame_i, frame_j) = normalize_pair(&image_i.bbox, &image_j.bbox)?;
        let iou = iou(&image_i.bbox, &image_j.bbox);
        Ok(AugmentedPair {
            image_i,
            image_j,
            frame_i,
            frame_j,
            iou,
        })
    }

    /// Masks both images and packages them for the model.
    pub fn into_masked(self, mask: &MaskConfig, grid: usize, seeds: [u64; 2]) -> MaskedPair {
        let (mask_i, mask_j, ratio) =
            mask_pair_seeded(&self.image_i.bbox, &self.image_j.bbox, (grid, grid), mask, seeds);
        let ids = vec![self.image_i.source_id.clone(), self.image_j.source_id.clone()];
        let view = |img: AugmentedImage, frame, slot, mask| MaskedView {
            pixels: img.pixels,
            frame,
            flipped: img.flipped,
            slot,
            mask,
        };
        MaskedPair {
            views: vec![
                view(self.image_i, self.frame_i, 0, mask_i),
                view(self.image_j, self.frame_j, 1, mask_j),
            ],
            mask_ratio: ratio,
            ids,
        }
    }
}

/// What the sampler needs to know besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSettings {
    pub augment: AugmentConfig,
    pub mask: MaskConfig,
    pub patch_size: usize,
}

impl PairSettings {
    pub fn grid(&self) -> usize {
        self.augment.input_size / self.patch_size
    }
}

/// Builds the masked pair for `anchor_id`. Every random choice is derived
/// from `seed`, so the result depends on nothing else.
pub fn sample_pair(
    dataset: &Dataset,
    index: &NeighborIndex,
    anchor_id: &str,
    settings: &PairSettings,
    seed: u64,
) -> Result<MaskedPair> {
    let anchor = dataset.record(anchor_id)?;
    let neighbor_id = index
        .sample_neighbor(anchor_id, &mut rng_for(seed, &[0]))?
        .unwrap_or(anchor_id);
    let neighbor = dataset.record(neighbor_id)?;
    let (img_i, img_j) = augment_pair(
        anchor,
        dataset.pixels(anchor_id)?,
        neighbor,
        dataset.pixels(neighbor_id)?,
        &mut rng_for(seed, &[1]),
        &settings.augment,
    )?;
    let seeds = [derive_seed(seed, &[2, 0]), derive_seed(seed, &[2, 1])];
    Ok(AugmentedPair::new(img_i, img_j)?.into_masked(&settings.mask, settings.grid(), seeds))
}
