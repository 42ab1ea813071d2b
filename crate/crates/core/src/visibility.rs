//! Pixel correspondences between the two images of a pair, the
//! self/cross/not-visible classification, and the visibility-bounded
//! reconstruction loss.
//!
//! Pixel coordinates are continuous `(u, v)` = (column, row) with `(0, 0)` at
//! the top-left image corner and `(W, H)` at the bottom-right one; pixel
//! `(c, r)` covers `[c, c+1) x [r, r+1)` and is represented by its center.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::relpos::NormalizedBBox;

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn apply3(m: &Mat3, u: f64, v: f64) -> (f64, f64) {
    (m[0][0] * u + m[0][1] * v + m[0][2], m[1][0] * u + m[1][1] * v + m[1][2])
}

/// Affine maps between an image's pixel coordinates and the shared frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    pub to_shared: Mat3,
    pub from_shared: Mat3,
    pub height: usize,
    pub width: usize,
}

impl FrameTransform {
    /// `flipped` marks a horizontally mirrored image: pixel column 0 then
    /// sits at the right edge of the footprint.
    pub fn new(nb: &NormalizedBBox, height: usize, width: usize, flipped: bool) -> Result<Self> {
        let (l, r, t, b) = (nb.left, nb.right, nb.top, nb.bottom);
        if !(r > l && t > b) || height == 0 || width == 0 {
            return Err(Error::Degenerate(format!(
                "cannot build frame transform for {nb:?} at {height}x{width}"
            )));
        }
        let (hf, wf) = (height as f64, width as f64);
        let (sx, ox, isx, iox) = if flipped {
            (-(r - l) / wf, r, -wf / (r - l), wf * r / (r - l))
        } else {
            ((r - l) / wf, l, wf / (r - l), wf * l / (l - r))
        };
        let to_shared = [[sx, 0.0, ox], [0.0, (b - t) / hf, t], [0.0, 0.0, 1.0]];
        let from_shared = [[isx, 0.0, iox], [0.0, hf / (b - t), hf * t / (t - b)], [0.0, 0.0, 1.0]];
        Ok(FrameTransform {
            to_shared,
            from_shared,
            height,
            width,
        })
    }

    pub fn to_shared_point(&self, u: f64, v: f64) -> (f64, f64) {
        apply3(&self.to_shared, u, v)
    }

    pub fn from_shared_point(&self, x: f64, y: f64) -> (f64, f64) {
        apply3(&self.from_shared, x, y)
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// The composite map taking pixels of image i to pixels of image j.
pub fn pair_matrix(t_i: &FrameTransform, t_j: &FrameTransform) -> Mat3 {
    matmul3(&t_j.from_shared, &t_i.to_shared)
}

/// Maps a point of image i into image j; `None` when it lands outside j.
pub fn correspond(u: f64, v: f64, t_i: &FrameTransform, t_j: &FrameTransform) -> Option<(f64, f64)> {
    let (x, y) = apply3(&pair_matrix(t_i, t_j), u, v);
    t_j.in_bounds(x, y).then_some((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    SelfVisible,
    CrossVisible,
    NotVisible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMap {
    pub category: Array2<Visibility>,
    /// `(u, v)` in the neighbor image for cross-visible pixels.
    pub correspondence: Array2<Option<(f64, f64)>>,
}

impl VisibilityMap {
    pub fn count(&self, cat: Visibility) -> usize {
        self.category.iter().filter(|c| **c == cat).count()
    }

    /// Every pixel is self-visible or, with no neighbor, not visible.
    pub fn single(mask: &PatchMask, patch_size: usize) -> Self {
        let (rows, cols) = mask.grid();
        let (h, w) = (rows * patch_size, cols * patch_size);
        let category = Array2::from_shape_fn((h, w), |(y, x)| {
            if mask.mask[[y / patch_size, x / patch_size]] {
                Visibility::NotVisible
            } else {
                Visibility::SelfVisible
            }
        });
        VisibilityMap {
            category,
            correspondence: Array2::from_elem((h, w), None),
        }
    }
}

/// Classifies every pixel of image i. A masked pixel is cross-visible when
/// its center maps inside image j and the patch containing that point is
/// visible in j.
pub fn classify_pixels(
    mask_i: &PatchMask,
    mask_j: &PatchMask,
    t_i: &FrameTransform,
    t_j: &FrameTransform,
    patch_size: usize,
) -> Result<VisibilityMap> {
    let (h, w) = (t_i.height, t_i.width);
    let (ri, ci) = mask_i.grid();
    let (rj, cj) = mask_j.grid();
    if ri * patch_size != h || ci * patch_size != w {
        return Err(Error::Shape(format!(
            "mask grid {ri}x{ci} with patch {patch_size} does not cover {h}x{w}"
        )));
    }
    if rj * patch_size != t_j.height || cj * patch_size != t_j.width {
        return Err(Error::Shape("neighbor mask does not match its frame".into()));
    }
    let m = pair_matrix(t_i, t_j);
    let mut category = Array2::from_elem((h, w), Visibility::NotVisible);
    let mut correspondence = Array2::from_elem((h, w), None);
    for y in 0..h {
        for x in 0..w {
            if !mask_i.mask[[y / patch_size, x / patch_size]] {
                category[[y, x]] = Visibility::SelfVisible;
                continue;
            }
            let (u, v) = apply3(&m, x as f64 + 0.5, y as f64 + 0.5);
            if !t_j.in_bounds(u, v) {
                continue;
            }
            let (pr, pc) = (v.floor() as usize / patch_size, u.floor() as usize / patch_size);
            if !mask_j.mask[[pr, pc]] {
                category[[y, x]] = Visibility::CrossVisible;
                correspondence[[y, x]] = Some((u, v));
            }
        }
    }
    Ok(VisibilityMap {
        category,
        correspondence,
    })
}

/// Loss weighting policies of the loss-weight ablation, written as
/// (self-visible, cross-visible) weights; not-visible pixels always weigh 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// (0, bounded by the neighbor-copy error)
    #[default]
    Ours,
    /// (0, 1)
    FullCross,
    /// (0, 0)
    NoCross,
    /// (1, 1): reconstruct everything.
    FullAll,
}

impl WeightPolicy {
    pub const ALL: [WeightPolicy; 4] = [
        WeightPolicy::Ours,
        WeightPolicy::FullCross,
        WeightPolicy::NoCross,
        WeightPolicy::FullAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightPolicy::Ours => "ours",
            WeightPolicy::FullCross => "full_cross",
            WeightPolicy::NoCross => "no_cross",
            WeightPolicy::FullAll => "full_all",
        }
    }
}

impl std::str::FromStr for WeightPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weight policy `{s}`")))
    }
}

impl std::fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const WEIGHT_EPS: f64 = 1e-8;

/// Per-pixel loss weights. These are constants for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeightMap {
    pub weights: Array2<f64>,
    /// Numerator of the ratio for cross-visible pixels whose weight is the
    /// unclamped ratio. Only used to form the non-detached gradient in tests
    /// and diagnostics.
    pub ratio_numerator: Array2<Option<f64>>,
}

fn channel_mse(a: ArrayView3<f64>, ay: usize, ax: usize, b: ArrayView3<f64>, by: usize, bx: usize) -> f64 {
    let c = a.dim().2;
    (0..c)
        .map(|k| {
            let d = a[[ay, ax, k]] - b[[by, bx, k]];
            d * d
        })
        .sum::<f64>()
        / c as f64
}

/// Weights for image i. `img_i`, `img_j` and `recon_i` must all be in the
/// space the comparison is made in (the loss-target space by default).
/// Neighbor values are taken from the pixel containing the correspondence.
pub fn loss_weights(
    vis: &VisibilityMap,
    img_i: ArrayView3<f64>,
    img_j: ArrayView3<f64>,
    recon_i: ArrayView3<f64>,
    policy: WeightPolicy,
) -> Result<LossWeightMap> {
    let (h, w) = vis.category.dim();
    if img_i.dim().0 != h || img_i.dim().1 != w || recon_i.dim() != img_i.dim() {
        return Err(Error::Shape(format!(
            "visibility {h}x{w} vs image {:?} / recon {:?}",
            img_i.dim(),
            recon_i.dim()
        )));
    }
    let (hj, wj, _) = img_j.dim();
    let mut weights = Array2::zeros((h, w));
    let mut ratio_numerator = Array2::from_elem((h, w), None);
    for y in 0..h {
        for x in 0..w {
            weights[[y, x]] = match (vis.category[[y, x]], policy) {
                (Visibility::SelfVisible, WeightPolicy::FullAll) => 1.0,
                (Visibility::SelfVisible, _) => 0.0,
                (Visibility::NotVisible, _) => 1.0,
                (Visibility::CrossVisible, WeightPolicy::NoCross) => 0.0,
                (Visibility::CrossVisible, WeightPolicy::FullCross | WeightPolicy::FullAll) => 1.0,
                (Visibility::CrossVisible, WeightPolicy::Ours) => {
                    let (u, v) = vis.correspondence[[y, x]]
                        .ok_or_else(|| Error::Shape(format!("cross pixel ({x}, {y}) without correspondence")))?;
                    let (cy, cx) = ((v.floor() as usize).min(hj - 1), (u.floor() as usize).min(wj - 1));
                    let num = channel_mse(img_j, cy, cx, img_i, y, x);
                    let den = channel_mse(recon_i, y, x, img_i, y, x);
                    if num == 0.0 {
                        0.0
                    } else {
                        let ratio = num / den.max(WEIGHT_EPS);
                        if ratio < 1.0 && den > WEIGHT_EPS {
                            ratio_numerator[[y, x]] = Some(num);
                        }
                        ratio.min(1.0)
                    }
                }
            };
        }
    }
    Ok(LossWeightMap {
        weights,
        ratio_numerator,
    })
}

/// How the loss gradient treats the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightGradient {
    /// Weights are constants (the training path).
    #[default]
    Detached,
    /// Differentiates through the weight ratio as well. Only meaningful when
    /// the weights were computed in the loss-target space.
    ThroughWeights,
}

/// One image's contribution to the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub recon: ArrayView3<'a, f64>,
    pub target: ArrayView3<'a, f64>,
    pub weights: &'a LossWeightMap,
}

/// Neumaier summation; keeps the loss accurate to about an ulp so central
/// differences at small steps are not swamped by accumulation error.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.carry
    }
}

fn pixel_error(t: &LossTerm<'_>, y: usize, x: usize) -> f64 {
    channel_mse(t.recon, y, x, t.target, y, x)
}

/// `sum_p w(p) * mse_c(recon(p), target(p)) / sum_p w(p)` over all images;
/// zero when every weight is zero.
pub fn weighted_recon_loss(terms: &[LossTerm<'_>]) -> Result<f64> {
    let mut num = CompensatedSum::default();
    let mut den = CompensatedSum::default();
    for t in terms {
        check_term(t)?;
        let (h, w, _) = t.recon.dim();
        for y in 0..h {
            for x in 0..w {
                let wt = t.weights.weights[[y, x]];
                if wt != 0.0 {
                    num.add(wt * pixel_error(t, y, x));
                    den.add(wt);
                }
            }
        }
    }
    let (num, den) = (num.total(), den.total());
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn check_term(t: &LossTerm<'_>) -> Result<()> {
    let (h, w, _) = t.recon.dim();
    if t.recon.dim() != t.target.dim() || t.weights.weights.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "recon {:?}, target {:?}, weights {:?}",
            t.recon.dim(),
            t.target.dim(),
            t.weights.weights.dim()
        )));
    }
    Ok(())
}

/// Loss value and its gradient w.r.t. each term's reconstruction.
pub fn weighted_recon_loss_grad(terms: &[LossTerm<'_>], mode: WeightGradient) -> Result<(f64, Vec<Array3<f64>>)> {
    let mut s = CompensatedSum::default();
    let mut wsum = CompensatedSum::default();
    for t in terms {
        check_term(t)?;
        let (h, w, _) = t.recon.dim();
        for y in 0..h {
            for x in 0..w {
                let wt = t.weights.weights[[y, x]];
                if wt != 0.0 {
                    s.add(wt * pixel_error(t, y, x));
                    wsum.add(wt);
                }
            }
        }
    }
    let (s, wsum) = (s.total(), wsum.total());
    let mut grads: Vec<Array3<f64>> = terms.iter().map(|t| Array3::zeros(t.recon.dim())).collect();
    if wsum <= 0.0 {
        return Ok((0.0, grads));
    }
    let loss = s / wsum;
    for (t, g) in terms.iter().zip(grads.iter_mut()) {
        let (h, w, c) = t.recon.dim();
        for y in 0..h {
            for x in 0..w {
                let wt = t.weights.weights[[y, x]];
                let active = match mode {
                    WeightGradient::Detached => None,
                    WeightGradient::ThroughWeights => t.weights.ratio_numerator[[y, x]],
                };
                for k in 0..c {
                    let de = 2.0 * (t.recon[[y, x, k]] - t.target[[y, x, k]]) / c as f64;
                    g[[y, x, k]] = match active {
                        // w = N / e, so w * e is constant and only the
                        // normalizer sees dw = -N / e^2 de.
                        Some(n) => {
                            let e = pixel_error(t, y, x);
                            let dw = -n / (e * e) * de;
                            -loss * dw / wsum
                        }
                        None => wt * de / wsum,
                    };
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Per-patch mean/variance normalization of a target image (the usual
/// normalized-pixel reconstruction target).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStats {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub patch_size: usize,
}

pub const NORM_PIX_EPS: f64 = 1e-6;

pub fn patch_stats(img: ArrayView3<f64>, patch_size: usize) -> PatchStats {
    let (h, w, c) = img.dim();
    let (rows, cols) = (h / patch_size, w / patch_size);
    let n = (patch_size * patch_size * c) as f64;
    let mut mean = Array2::zeros((rows, cols));
    let mut std = Array2::zeros((rows, cols));
    for r in 0..rows {
        for q in 0..cols {
            let block = img.slice(ndarray::s![
                r * patch_size..(r + 1) * patch_size,
                q * patch_size..(q + 1) * patch_size,
                ..
            ]);
            let m = block.sum() / n;
            // Unbiased variance, as torch.var does by default.
            let var = block.mapv(|v| (v - m) * (v - m)).sum() / (n - 1.0).max(1.0);
            mean[[r, q]] = m;
            std[[r, q]] = (var + NORM_PIX_EPS).sqrt();
        }
    }
    PatchStats { mean, std, patch_size }
}

impl PatchStats {
    pub fn normalize(&self, img: ArrayView3<f64>) -> Array3<f64> {
        let p = self.patch_size;
        let mut out = img.to_owned();
        out.indexed_iter_mut().for_each(|((y, x, _), v)| {
            *v = (*v - self.mean[[y / p, x / p]]) / self.std[[y / p, x / p]];
        });
        out
    }

    pub fn denormalize(&self, img: ArrayView3<f64>) -> Array3<f64> {
        let p = self.patch_size;
        let mut out = img.to_owned();
        out.indexed_iter_mut().for_each(|((y, x, _), v)| {
            *v = *v * self.std[[y / p, x / p]] + self.mean[[y / p, x / p]];
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::rng_for;
    use crate::geo_index::GeoBBox;
    use crate::masking::sample_mask;
    use crate::relpos::normalize_pair;
    use rand::Rng;

    const UNIT: NormalizedBBox = NormalizedBBox::UNIT;

    #[test]
    fn unit_frame_corners() {
        // T_i at (u, v) = (0, 0): x = left = 0, y = top = 1.
        // At (224, 224): x = 0 + 224 * 1/224 = 1, y = 1 + 224 * (0 - 1)/224 = 0.
        let t = FrameTransform::new(&UNIT, 224, 224, false).unwrap();
        assert_eq!(t.to_shared_point(0.0, 0.0), (0.0, 1.0));
        assert_eq!(t.to_shared_point(224.0, 224.0), (1.0, 0.0));
        assert_eq!(t.to_shared[2], [0.0, 0.0, 1.0]);
        assert_eq!(t.from_shared[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = rng_for(1, &[]);
        for flipped in [false, true] {
            let nb = NormalizedBBox {
                top: 0.93,
                bottom: 0.12,
                left: 0.31,
                right: 0.77,
            };
            let t = FrameTransform::new(&nb, 32, 48, flipped).unwrap();
            let id = matmul3(&t.from_shared, &t.to_shared);
            for (r, row) in id.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((v - (r == c) as u8 as f64).abs() < 1e-10);
                }
            }
            for _ in 0..1000 {
                let (u, v) = (rng.random_range(0.0..48.0), rng.random_range(0.0..32.0));
                let (x, y) = t.to_shared_point(u, v);
                let (u2, v2) = t.from_shared_point(x, y);
                assert!((u - u2).abs() < 1e-10 && (v - v2).abs() < 1e-10);
            }
        }
        assert!(FrameTransform::new(&NormalizedBBox { right: 0.0, ..UNIT }, 8, 8, false).is_err());
    }

    #[test]
    fn coincident_frames_are_identity() {
        let t = FrameTransform::new(&UNIT, 16, 16, false).unwrap();
        for (u, v) in [(0.5, 0.5), (3.25, 15.5), (15.9, 0.0)] {
            assert_eq!(correspond(u, v, &t, &t), Some((u, v)));
        }
    }

    #[test]
    fn disjoint_frames_never_correspond() {
        let (a, b) = normalize_pair(
            &GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            &GeoBBox::new(0.0, 1.0, 2.0, 3.0).unwrap(),
        )
        .unwrap();
        let ta = FrameTransform::new(&a, 16, 16, false).unwrap();
        let tb = FrameTransform::new(&b, 16, 16, false).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(correspond(x as f64 + 0.5, y as f64 + 0.5, &ta, &tb), None);
            }
        }
    }

    #[test]
    fn half_overlap_correspondence_matches_geolocation() {
        // i spans lon [0, 1], j spans lon [0.5, 1.5]; the point 3/4 across i
        // is at lon 0.75, which is 1/4 across j.
        let gi = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let gj = GeoBBox::new(0.0, 1.0, 0.5, 1.5).unwrap();
        let (a, b) = normalize_pair(&gi, &gj).unwrap();
        let ta = FrameTransform::new(&a, 32, 32, false).unwrap();
        let tb = FrameTransform::new(&b, 32, 32, false).unwrap();
        let (u, v) = correspond(0.75 * 32.0, 0.5 * 32.0, &ta, &tb).unwrap();
        assert!((u / 32.0 - 0.25).abs() < 1e-12);
        assert!((v / 32.0 - 0.5).abs() < 1e-12);
    }

    /// Per-pixel classification written directly from the category
    /// definitions, geolocating through the geographic boxes.
    fn brute_force_categories(
        gi: &GeoBBox,
        gj: &GeoBBox,
        mi: &PatchMask,
        mj: &PatchMask,
        size: usize,
        patch: usize,
    ) -> Array2<Visibility> {
        Array2::from_shape_fn((size, size), |(y, x)| {
            if !mi.mask[[y / patch, x / patch]] {
                return Visibility::SelfVisible;
            }
            let lon = gi.lambda_min + (x as f64 + 0.5) / size as f64 * gi.lon_extent();
            let lat = gi.phi_max - (y as f64 + 0.5) / size as f64 * gi.lat_extent();
            let u = (lon - gj.lambda_min) / gj.lon_extent() * size as f64;
            let v = (gj.phi_max - lat) / gj.lat_extent() * size as f64;
            if u < 0.0 || v < 0.0 || u >= size as f64 || v >= size as f64 {
                return Visibility::NotVisible;
            }
            if mj.mask[[v as usize / patch, u as usize / patch]] {
                Visibility::NotVisible
            } else {
                Visibility::CrossVisible
            }
        })
    }

    #[test]
    fn all_visible_mask_is_all_self() {
        let t = FrameTransform::new(&UNIT, 16, 16, false).unwrap();
        let mi = PatchMask::all_visible(4, 4);
        let mj = sample_mask(4, 4, 0.75, &mut rng_for(1, &[]));
        let vis = classify_pixels(&mi, &mj, &t, &t, 4).unwrap();
        assert_eq!(vis.count(Visibility::SelfVisible), 256);
    }

    #[test]
    fn complementary_masks_on_coincident_frames_are_cross() {
        let t = FrameTransform::new(&UNIT, 32, 32, false).unwrap();
        let mi = sample_mask(4, 4, 0.5, &mut rng_for(2, &[]));
        let mj = mi.complement();
        let vis = classify_pixels(&mi, &mj, &t, &t, 8).unwrap();
        let g = GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(vis.category, brute_force_categories(&g, &g, &mi, &mj, 32, 8));
        for ((y, x), c) in vis.category.indexed_iter() {
            let masked = mi.mask[[y / 8, x / 8]];
            assert_eq!(*c == Visibility::CrossVisible, masked);
        }
    }

    #[test]
    fn disjoint_frames_masked_pixels_not_visible() {
        let (a, b) = normalize_pair(
            &GeoBBox::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            &GeoBBox::new(3.0, 4.0, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let ta = FrameTransform::new(&a, 16, 16, false).unwrap();
        let tb = FrameTransform::new(&b, 16, 16, false).unwrap();
        let mi = sample_mask(4, 4, 0.75, &mut rng_for(3, &[]));
        let vis = classify_pixels(&mi, &PatchMask::all_visible(4, 4), &ta, &tb, 4).unwrap();
        assert_eq!(vis.count(Visibility::CrossVisible), 0);
        assert_eq!(vis.count(Visibility::NotVisible), 12 * 16);
    }

    #[test]
    fn flipped_neighbor_maps_mirrored_columns() {
        let t = FrameTransform::new(&UNIT, 8, 8, false).unwrap();
        let tf = FrameTransform::new(&UNIT, 8, 8, true).unwrap();
        let (u, v) = correspond(1.5, 2.5, &t, &tf).unwrap();
        assert!((u - 6.5).abs() < 1e-12 && (v - 2.5).abs() < 1e-12);
    }

    fn constant(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((h, w, 3), v)
    }

    fn single_cross_case(neighbor: f64, recon: f64) -> LossWeightMap {
        let mut cat = Array2::from_elem((1, 2), Visibility::SelfVisible);
        cat[[0, 1]] = Visibility::CrossVisible;
        let mut corr = Array2::from_elem((1, 2), None);
        corr[[0, 1]] = Some((0.5, 0.5));
        let vis = VisibilityMap {
            category: cat,
            correspondence: corr,
        };
        loss_weights(
            &vis,
            constant(1, 2, 0.5).view(),
            constant(1, 1, neighbor).view(),
            constant(1, 2, recon).view(),
            WeightPolicy::Ours,
        )
        .unwrap()
    }

    #[test]
    fn weight_branches() {
        let w = single_cross_case(0.5, 0.9);
        assert_eq!(w.weights[[0, 0]], 0.0);
        assert_eq!(w.weights[[0, 1]], 0.0);

        // Copying the neighbor (error 0.4^2) is worse than the recon (0.1^2).
        let w = single_cross_case(0.9, 0.6);
        assert_eq!(w.weights[[0, 1]], 1.0);

        // Neighbor error 0.1^2 vs recon error 0.2^2 -> 0.25.
        let w = single_cross_case(0.6, 0.7);
        assert!((w.weights[[0, 1]] - 0.25).abs() < 1e-12);
        assert!(w.ratio_numerator[[0, 1]].is_some());

        // Exact reconstruction: the floor keeps the ratio finite and clamps.
        let w = single_cross_case(0.6, 0.5);
        assert_eq!(w.weights[[0, 1]], 1.0);
    }

    #[test]
    fn loss_examples() {
        let img = constant(2, 2, 0.3);
        let ones = LossWeightMap {
            weights: Array2::ones((2, 2)),
            ratio_numerator: Array2::from_elem((2, 2), None),
        };
        let zeros = LossWeightMap {
            weights: Array2::zeros((2, 2)),
            ..ones.clone()
        };
        let t = LossTerm {
            recon: img.view(),
            target: img.view(),
            weights: &ones,
        };
        assert_eq!(weighted_recon_loss(&[t]).unwrap(), 0.0);

        let other = constant(2, 2, 0.9);
        let t = LossTerm {
            recon: other.view(),
            target: img.view(),
            weights: &zeros,
        };
        assert_eq!(weighted_recon_loss(&[t, t]).unwrap(), 0.0);

        // One not-visible pixel off by 0.5 in each of 3 channels:
        // 3 * 0.25 / 3 = 0.25, normalized by weight sum 1.
        let target = constant(1, 1, 0.0);
        let recon = constant(1, 1, 0.5);
        let one = LossWeightMap {
            weights: Array2::ones((1, 1)),
            ratio_numerator: Array2::from_elem((1, 1), None),
        };
        let t = LossTerm {
            recon: recon.view(),
            target: target.view(),
            weights: &one,
        };
        assert!((weighted_recon_loss(&[t]).unwrap() - 0.25).abs() < 1e-15);
    }

    fn fd_check(mode: WeightGradient, frozen: bool) -> (f64, f64) {
        // A tiny pair with cross pixels whose weights sit strictly inside (0, 1).
        let mut rng = rng_for(9, &[]);
        let t = FrameTransform::new(&UNIT, 4, 4, false).unwrap();
        let mi = PatchMask::from_grid(ndarray::arr2(&[[true, true], [false, true]]));
        let mj = mi.complement();
        let vis = classify_pixels(&mi, &mj, &t, &t, 2).unwrap();
        let img_i = Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>());
        let img_j = &img_i + &Array3::from_shape_fn((4, 4, 3), |_| 0.05 * (rng.random::<f64>() - 0.5));
        let mut recon = Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>());
        let weights_at =
            |r: &Array3<f64>| loss_weights(&vis, img_i.view(), img_j.view(), r.view(), WeightPolicy::Ours).unwrap();
        let base_w = weights_at(&recon);
        let strictly_inside = base_w
            .weights
            .iter()
            .zip(vis.category.iter())
            .filter(|(w, c)| **c == Visibility::CrossVisible && **w > 0.0 && **w < 1.0)
            .count();
        assert!(strictly_inside > 0);
        let eval = |r: &Array3<f64>| {
            let w = if frozen { base_w.clone() } else { weights_at(r) };
            weighted_recon_loss(&[LossTerm {
                recon: r.view(),
                target: img_i.view(),
                weights: &w,
            }])
            .unwrap()
        };
        let (_, g) = weighted_recon_loss_grad(
            &[LossTerm {
                recon: recon.view(),
                target: img_i.view(),
                weights: &base_w,
            }],
            mode,
        )
        .unwrap();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        let mut max_gap: f64 = 0.0;
        for idx in 0..recon.len() {
            let orig = recon.as_slice().unwrap()[idx];
            recon.as_slice_mut().unwrap()[idx] = orig + h;
            let up = eval(&recon);
            recon.as_slice_mut().unwrap()[idx] = orig - h;
            let down = eval(&recon);
            recon.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g[0].as_slice().unwrap()[idx];
            max_err = max_err.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
            max_gap = max_gap.max((fd - a).abs());
        }
        (max_err, max_gap)
    }

    #[test]
    fn detached_gradient_matches_frozen_weights() {
        let (err, _) = fd_check(WeightGradient::Detached, true);
        assert!(err < 1e-4, "{err}");
        let (_, gap) = fd_check(WeightGradient::Detached, false);
        assert!(gap > 1e-3, "naive and detached gradients should differ, gap {gap}");
        let (err, _) = fd_check(WeightGradient::ThroughWeights, false);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn norm_pix_round_trip() {
        let mut rng = rng_for(4, &[]);
        let img = Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>());
        let stats = patch_stats(img.view(), 4);
        let n = stats.normalize(img.view());
        let block = n.slice(ndarray::s![0..4, 4..8, ..]);
        assert!(block.mean().unwrap().abs() < 1e-12);
        let back = stats.denormalize(n.view());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
