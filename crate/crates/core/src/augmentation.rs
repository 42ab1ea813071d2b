//! Random-resized-crop of each image in a pair, with the georeferenced
//! footprint carried through the crop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_index::{GeoBBox, ImageRecord};
use crate::imagery::{load_png, resize_bilinear, Pixels};

/// Crop window in source pixels: top row `i`, left column `j`, size `h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub i: usize,
    pub j: usize,
    pub h: usize,
    pub w: usize,
}

impl CropParams {
    pub fn full(height: usize, width: usize) -> Self {
        CropParams {
            i: 0,
            j: 0,
            h: height,
            w: width,
        }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.i + self.h > height || self.j + self.w > width {
            return Err(Error::CropOutOfBounds {
                crop: *self,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Footprint of a crop. Row offsets count down from the top edge, which sits
/// at `phi_max`; column offsets count right from `lambda_min`.
pub fn crop_bbox(src: &GeoBBox, crop: &CropParams, height: usize, width: usize) -> Result<GeoBBox> {
    crop.check(height, width)?;
    let (hf, wf) = (height as f64, width as f64);
    let dphi = src.lat_extent();
    let dlambda = src.lon_extent();
    let phi_max = if crop.i == 0 {
        src.phi_max
    } else {
        src.phi_max - dphi * crop.i as f64 / hf
    };
    let phi_min = if crop.i + crop.h == height {
        src.phi_min
    } else {
        src.phi_max - dphi * (crop.i + crop.h) as f64 / hf
    };
    let lambda_min = if crop.j == 0 {
        src.lambda_min
    } else {
        src.lambda_min + dlambda * crop.j as f64 / wf
    };
    let lambda_max = if crop.j + crop.w == width {
        src.lambda_max
    } else {
        src.lambda_min + dlambda * (crop.j + crop.w) as f64 / wf
    };
    Ok(GeoBBox {
        phi_min,
        phi_max,
        lambda_min,
        lambda_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub input_size: usize,
    pub crop_scale_lo: f64,
    pub crop_scale_hi: f64,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    /// Horizontal flips. Off by default; when on, the flip is recorded on the
    /// output so geometry consumers mirror their pixel axis.
    pub flip_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            input_size: 32,
            crop_scale_lo: 0.2,
            crop_scale_hi: 1.0,
            aspect_lo: 3.0 / 4.0,
            aspect_hi: 4.0 / 3.0,
            flip_enabled: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.crop_scale_lo, self.crop_scale_hi);
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "crop scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(self.aspect_lo > 0.0 && self.aspect_lo <= self.aspect_hi) {
            return Err(Error::Config(format!(
                "aspect range must satisfy 0 < lo <= hi, got ({}, {})",
                self.aspect_lo, self.aspect_hi
            )));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedImage {
    pub pixels: Pixels,
    pub bbox: GeoBBox,
    pub source_id: String,
    pub crop: CropParams,
    pub flipped: bool,
}

/// A crop window together with the area fraction it was drawn for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub params: CropParams,
    pub area_fraction: f64,
}

/// Draws a crop window.
///
/// The area fraction is uniform on `[crop_scale_lo, crop_scale_hi]`. The log
/// aspect ratio is uniform on the configured range intersected with the
/// ratios for which a window of that area fits inside the image, so no draw
/// is ever rejected.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R, cfg: &AugmentConfig) -> CropDraw {
    let (hf, wf) = (height as f64, width as f64);
    let scale = if cfg.crop_scale_lo < cfg.crop_scale_hi {
        rng.random_range(cfg.crop_scale_lo..=cfg.crop_scale_hi)
    } else {
        cfg.crop_scale_lo
    };
    let area = scale * hf * wf;
    // w = sqrt(area * r) <= W and h = sqrt(area / r) <= H
    let fit_lo = area / (hf * hf);
    let fit_hi = wf * wf / area;
    let mut lo = cfg.aspect_lo.max(fit_lo);
    let mut hi = cfg.aspect_hi.min(fit_hi);
    if lo > hi {
        // The configured range misses the feasible one; use its nearest edge.
        let r = if cfg.aspect_hi < fit_lo { fit_lo } else { fit_hi };
        lo = r;
        hi = r;
    }
    let ratio = if lo < hi {
        rng.random_range(lo.ln()..=hi.ln()).exp()
    } else {
        lo
    };
    let w = ((area * ratio).sqrt().round() as usize).clamp(1, width);
    let h = ((area / ratio).sqrt().round() as usize).clamp(1, height);
    let i = rng.random_range(0..=height - h);
    let j = rng.random_range(0..=width - w);
    CropDraw {
        params: CropParams { i, j, h, w },
        area_fraction: scale,
    }
}

/// Crops, propagates the footprint, and resizes to the model input size.
pub fn random_resized_crop<R: Rng + ?Sized>(
    record: &ImageRecord,
    pixels: &Pixels,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<AugmentedImage> {
    cfg.validate()?;
    let (h, w, _) = pixels.dim();
    if (h, w) != (record.height_px, record.width_px) {
        return Err(Error::Shape(format!(
            "image `{}` is {h}x{w}, metadata says {}x{}",
            record.id, record.height_px, record.width_px
        )));
    }
    let draw = sample_crop(h, w, rng, cfg);
    let flipped = cfg.flip_enabled && rng.random_bool(0.5);
    apply_crop(record, pixels, draw.params, flipped, cfg.input_size)
}

/// Deterministic crop + resize, used by the sampler and by visualization.
pub fn apply_crop(
    record: &ImageRecord,
    pixels: &Pixels,
    crop: CropParams,
    flipped: bool,
    input_size: usize,
) -> Result<AugmentedImage> {
    let (h, w, _) = pixels.dim();
    let bbox = crop_bbox(&record.bbox, &crop, h, w)?;
    let window = pixels.slice(s![crop.i..crop.i + crop.h, crop.j..crop.j + crop.w, ..]);
    let mut out = resize_bilinear(window, input_size, input_size);
    if flipped {
        out.invert_axis(ndarray::Axis(1));
        out = out.as_standard_layout().to_owned();
    }
    Ok(AugmentedImage {
        pixels: out,
        bbox,
        source_id: record.id.clone(),
        crop,
        flipped,
    })
}

/// Independent crops of the two images. Each image gets its own generator
/// seeded from `rng`, so the pair draws share no state.
pub fn augment_pair<R: Rng + ?Sized>(
    rec_i: &ImageRecord,
    px_i: &Pixels,
    rec_j: &ImageRecord,
    px_j: &Pixels,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(AugmentedImage, AugmentedImage)> {
    let mut rng_i = ChaCha8Rng::seed_from_u64(rng.random());
    let mut rng_j = ChaCha8Rng::seed_from_u64(rng.random());
    Ok((
        random_resized_crop(rec_i, px_i, &mut rng_i, cfg)?,
        random_resized_crop(rec_j, px_j, &mut rng_j, cfg)?,
    ))
}

/// Something that can produce the pixels of a record.
pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> Result<Pixels>;
}

/// Reads PNGs from disk; relative paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct FileSource {
    pub root: PathBuf,
}

impl FileSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileSource { root: root.into() }
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

impl ImageSource for FileSource {
    fn load(&self, record: &ImageRecord) -> Result<Pixels> {
        load_png(self.resolve(record))
    }
}

/// Pixels held in memory, keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: HashMap<String, Pixels>,
}

impl MemorySource {
    pub fn preload(records: &[ImageRecord], from: &dyn ImageSource) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| Ok((r.id.clone(), from.load(r)?)))
            .collect::<Result<_>>()?;
        Ok(MemorySource { images })
    }

    pub fn get(&self, id: &str) -> Result<&Pixels> {
        self.images.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}

impl ImageSource for MemorySource {
    fn load(&self, record: &ImageRecord) -> Result<Pixels> {
        self.get(&record.id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::rng_for;
    use crate::geo_index::iou;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    /// Geolocates pixel-corner coordinates through a rasterized grid: pixel
    /// row r spans latitudes [phi_max - (r+1) d, phi_max - r d].
    fn raster_crop_oracle(src: &GeoBBox, c: &CropParams, hh: usize, ww: usize) -> GeoBBox {
        let dlat = src.lat_extent() / hh as f64;
        let dlon = src.lon_extent() / ww as f64;
        let row_top = |r: usize| src.phi_max - r as f64 * dlat;
        let col_left = |col: usize| src.lambda_min + col as f64 * dlon;
        // Corner pixels of the crop and their outer edges.
        let top_pixel = c.i;
        let bottom_pixel = c.i + c.h - 1;
        let left_pixel = c.j;
        let right_pixel = c.j + c.w - 1;
        GeoBBox {
            phi_max: row_top(top_pixel),
            phi_min: row_top(bottom_pixel) - dlat,
            lambda_min: col_left(left_pixel),
            lambda_max: col_left(right_pixel) + dlon,
        }
    }

    fn record(b: GeoBBox, h: usize, w: usize) -> ImageRecord {
        ImageRecord {
            id: "r".into(),
            path: "r.png".into(),
            bbox: b,
            width_px: w,
            height_px: h,
            timestamp: None,
        }
    }

    fn close(a: &GeoBBox, b: &GeoBBox, tol: f64) -> bool {
        (a.phi_min - b.phi_min).abs() < tol
            && (a.phi_max - b.phi_max).abs() < tol
            && (a.lambda_min - b.lambda_min).abs() < tol
            && (a.lambda_max - b.lambda_max).abs() < tol
    }

    #[test]
    fn identity_crop_keeps_bbox() {
        let src = GeoBBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        assert_eq!(crop_bbox(&src, &CropParams::full(100, 80), 100, 80).unwrap(), src);
    }

    #[test]
    fn crop_examples_against_raster_oracle() {
        let unit = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let c = CropParams {
            i: 0,
            j: 0,
            h: 50,
            w: 100,
        };
        let oracle = raster_crop_oracle(&unit, &c, 100, 100);
        assert!(close(&oracle, &GeoBBox::new(0.5, 1.0, 0.0, 1.0).unwrap(), 1e-12));
        assert!(close(&crop_bbox(&unit, &c, 100, 100).unwrap(), &oracle, 1e-12));

        let src = GeoBBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let c = CropParams {
            i: 25,
            j: 50,
            h: 50,
            w: 25,
        };
        let oracle = raster_crop_oracle(&src, &c, 100, 100);
        assert!(close(&oracle, &GeoBBox::new(12.5, 17.5, 35.0, 37.5).unwrap(), 1e-12));
        assert!(close(&crop_bbox(&src, &c, 100, 100).unwrap(), &oracle, 1e-12));
    }

    #[test]
    fn out_of_bounds_crop_rejected() {
        let src = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let c = CropParams {
            i: 60,
            j: 0,
            h: 50,
            w: 10,
        };
        assert!(matches!(
            crop_bbox(&src, &c, 100, 100),
            Err(Error::CropOutOfBounds { .. })
        ));
        let empty = CropParams {
            i: 0,
            j: 0,
            h: 0,
            w: 10,
        };
        assert!(crop_bbox(&src, &empty, 100, 100).is_err());
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Pixels {
        let mut rng = rng_for(seed, &[]);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn degenerate_scale_keeps_bbox() {
        let b = GeoBBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let rec = record(b, 48, 48);
        let cfg = AugmentConfig {
            crop_scale_lo: 1.0,
            crop_scale_hi: 1.0,
            aspect_lo: 1.0,
            aspect_hi: 1.0,
            ..Default::default()
        };
        let out = random_resized_crop(&rec, &noise_image(48, 48, 1), &mut rng_for(3, &[]), &cfg).unwrap();
        assert_eq!(out.bbox, b);
        assert_eq!(out.pixels.dim(), (32, 32, 3));
    }

    #[test]
    fn seeded_crop_is_bit_identical() {
        let rec = record(GeoBBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 64, 64);
        let px = noise_image(64, 64, 2);
        let cfg = AugmentConfig::default();
        let a = random_resized_crop(&rec, &px, &mut rng_for(8, &[]), &cfg).unwrap();
        let b = random_resized_crop(&rec, &px, &mut rng_for(8, &[]), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn area_fraction_is_uniform() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_for(17, &[]);
        let bins = 8;
        let n = 10_000;
        let mut hist = vec![0usize; bins];
        for _ in 0..n {
            let d = sample_crop(1000, 1000, &mut rng, &cfg);
            assert!((0.2..=1.0).contains(&d.area_fraction));
            let realized = (d.params.h * d.params.w) as f64 / 1e6;
            assert!(
                (realized - d.area_fraction).abs() < 0.01,
                "{realized} vs {}",
                d.area_fraction
            );
            let ratio = d.params.w as f64 / d.params.h as f64;
            assert!(ratio > 0.74 && ratio < 1.34);
            let k = (((realized - 0.2) / 0.8) * bins as f64)
                .floor()
                .clamp(0.0, bins as f64 - 1.0);
            hist[k as usize] += 1;
        }
        for c in hist {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / bins as f64).abs() < 0.02, "bin frequency {f}");
        }
    }

    #[test]
    fn self_pair_gets_distinct_crops() {
        let rec = record(GeoBBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 64, 64);
        let px = noise_image(64, 64, 4);
        let (a, b) = augment_pair(&rec, &px, &rec, &px, &mut rng_for(21, &[]), &AugmentConfig::default()).unwrap();
        assert_ne!(a.bbox, b.bbox);
        assert!(rec.bbox.contains(&a.bbox) && rec.bbox.contains(&b.bbox));
    }

    #[test]
    fn identity_crops_preserve_pair_iou() {
        // Two 1x1 boxes offset so the overlap is 0.4 of the union.
        let shift = 1.0 - 0.8 / 1.4;
        let a = record(GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap(), 40, 40);
        let b = record(GeoBBox::new(0.0, 1.0, shift, 1.0 + shift).unwrap(), 40, 40);
        assert!((iou(&a.bbox, &b.bbox) - 0.4).abs() < 1e-12);
        let ca = apply_crop(&a, &noise_image(40, 40, 1), CropParams::full(40, 40), false, 32).unwrap();
        let cb = apply_crop(&b, &noise_image(40, 40, 2), CropParams::full(40, 40), false, 32).unwrap();
        assert!((iou(&ca.bbox, &cb.bbox) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn flip_mirrors_pixels_only_when_enabled() {
        let rec = record(GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap(), 32, 32);
        let px = noise_image(32, 32, 5);
        let plain = apply_crop(&rec, &px, CropParams::full(32, 32), false, 32).unwrap();
        let flipped = apply_crop(&rec, &px, CropParams::full(32, 32), true, 32).unwrap();
        assert_eq!(plain.bbox, flipped.bbox);
        assert_eq!(flipped.pixels[[3, 0, 1]], plain.pixels[[3, 31, 1]]);
        let mut rng = rng_for(1, &[]);
        for _ in 0..20 {
            assert!(
                !random_resized_crop(&rec, &px, &mut rng, &AugmentConfig::default())
                    .unwrap()
                    .flipped
            );
        }
    }

    fn arb_case() -> impl Strategy<Value = (GeoBBox, usize, usize, CropParams, CropParams)> {
        (
            (-40.0..40.0f64, 0.01..3.0f64, -80.0..80.0f64, 0.01..3.0f64),
            2usize..200,
            2usize..200,
        )
            .prop_flat_map(|((p, dp, l, dl), hh, ww)| {
                let b = GeoBBox {
                    phi_min: p,
                    phi_max: p + dp,
                    lambda_min: l,
                    lambda_max: l + dl,
                };
                (1..=hh, 1..=ww).prop_flat_map(move |(h, w)| {
                    (0..=hh - h, 0..=ww - w, 1..=h, 1..=w).prop_flat_map(move |(i, j, h2, w2)| {
                        (0..=h - h2, 0..=w - w2).prop_map(move |(i2, j2)| {
                            (
                                b,
                                hh,
                                ww,
                                CropParams { i, j, h, w },
                                CropParams {
                                    i: i2,
                                    j: j2,
                                    h: h2,
                                    w: w2,
                                },
                            )
                        })
                    })
                })
            })
    }

    proptest! {
        #[test]
        fn crop_composition_ratio_and_containment((src, hh, ww, outer, inner) in arb_case()) {
            let once_outer = crop_bbox(&src, &outer, hh, ww).unwrap();
            prop_assert!(src.contains(&once_outer));
            once_outer.validate("c").unwrap();

            let rel = 1e-12;
            let lat_per_px = src.lat_extent() / hh as f64;
            prop_assert!(((once_outer.lat_extent() / outer.h as f64) - lat_per_px).abs() <= rel * lat_per_px.abs().max(1.0) * 10.0);

            let twice = crop_bbox(&once_outer, &inner, outer.h, outer.w).unwrap();
            let composed = CropParams { i: outer.i + inner.i, j: outer.j + inner.j, h: inner.h, w: inner.w };
            let direct = crop_bbox(&src, &composed, hh, ww).unwrap();
            let scale = src.phi_max.abs().max(src.lambda_max.abs()).max(src.lambda_min.abs()).max(src.phi_min.abs());
            prop_assert!(close(&twice, &direct, 1e-12 * scale.max(1.0) * 10.0));
            prop_assert!(once_outer.contains(&twice));
        }
    }
}
