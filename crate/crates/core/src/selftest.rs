//! Named runtime property checks backing `nmae selftest`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{rng_for, Execution};
use crate::geo_index::{build_index_brute_force, build_index_with, GeoBBox, ImageRecord};
use crate::masking::{dynamic_mask_ratio, masked_count, sample_mask, MaskConfig, PatchMask};
use crate::model::{MaskedAutoencoder, MaskedPair, MaskedView, ModelConfig};
use crate::relpos::{normalize_pair, NormalizedBBox};
use crate::visibility::{classify_pixels, correspond, FrameTransform, Visibility, WeightGradient, WeightPolicy};

/// A deliberately broken code path, to prove the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Train with gradients that flow through the loss weights.
    WeightDetachment,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight-detachment" => Ok(Fault::WeightDetachment),
            other => Err(Error::Config(format!(
                "unknown fault `{other}` (known: weight-detachment)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Relative error with an absolute floor, as used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// The 16x16, patch-4, width-32 instance used for gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        patch_size: 4,
        enc_dim: 32,
        dec_dim: 32,
        ..ModelConfig::default()
    }
}

/// An overlapping pair whose neighbor is a slightly perturbed copy, so
/// cross-visible weights fall strictly inside (0, 1).
pub fn gradcheck_pair(cfg: &ModelConfig, seed: u64) -> MaskedPair {
    let g = cfg.grid();
    let n = cfg.input_size;
    let mut rng = rng_for(seed, &[]);
    let base = Array3::from_shape_fn((n, n, cfg.channels), |_| rng.random::<f64>());
    let copy = base.mapv(|v| v + 0.02 * (rng.random::<f64>() - 0.5));
    let mask_i = sample_mask(g, g, 0.5, &mut rng);
    let mask_j = mask_i.complement();
    let frame = NormalizedBBox::UNIT;
    MaskedPair {
        views: vec![
            MaskedView {
                pixels: base,
                frame,
                flipped: false,
                slot: 0,
                mask: mask_i,
            },
            MaskedView {
                pixels: copy,
                frame,
                flipped: false,
                slot: 1,
                mask: mask_j,
            },
        ],
        mask_ratio: 0.5,
        ids: vec!["gc-i".into(), "gc-j".into()],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central differences of the loss with weights frozen at their forward
/// values, against the analytic gradient computed in `mode`. Every
/// `stride`-th scalar of each tensor is probed.
pub fn gradient_check(
    model: &MaskedAutoencoder,
    pair: &MaskedPair,
    policy: WeightPolicy,
    mode: WeightGradient,
    stride: usize,
    exec: Execution,
) -> Result<GradCheck> {
    let (out, grads) = model.loss_and_grad(pair, policy, mode)?;
    let mut probes = Vec::new();
    for (pi, p) in model.store.params().iter().enumerate() {
        probes.extend(
            (pi % stride.max(1)..p.value.len())
                .step_by(stride.max(1))
                .map(|k| (pi, k)),
        );
    }
    let errs = exec.map_indexed(probes.len(), |n| {
        let (pi, k) = probes[n];
        let mut probe = model.clone();
        let cols = probe.store.params()[pi].value.ncols();
        let (r, c) = (k / cols, k % cols);
        let orig = probe.store.params()[pi].value[[r, c]];
        probe.store.params_mut()[pi].value[[r, c]] = orig + FD_STEP;
        let up = probe.loss_with_weights(pair, &out.weights)?;
        probe.store.params_mut()[pi].value[[r, c]] = orig - FD_STEP;
        let down = probe.loss_with_weights(pair, &out.weights)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        Ok::<_, Error>(relative_error(grads.tensors()[pi][[r, c]], numeric))
    });
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: probes.len(),
    };
    for (&(pi, _), e) in probes.iter().zip(errs) {
        let e = e?;
        if e > worst.max_rel_err {
            worst.max_rel_err = e;
            worst.worst_param = model.store.params()[pi].name.clone();
        }
    }
    Ok(worst)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Geolocates pixel centers of i directly from the footprints and maps them
/// into j, independently of the affine matrices.
fn geolocate(u: f64, v: f64, a: &GeoBBox, size_a: usize, b: &GeoBBox, size_b: usize) -> (f64, f64) {
    let lon = a.lambda_min + u / size_a as f64 * a.lon_extent();
    let lat = a.phi_max - v / size_a as f64 * a.lat_extent();
    (
        (lon - b.lambda_min) / b.lon_extent() * size_b as f64,
        (b.phi_max - lat) / b.lat_extent() * size_b as f64,
    )
}

fn random_bbox<R: Rng>(rng: &mut R) -> GeoBBox {
    let (p, l) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let (h, w) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    GeoBBox {
        phi_min: p,
        phi_max: p + h,
        lambda_min: l,
        lambda_max: l + w,
    }
}

fn check_gradient(exec: Execution) -> Result<(bool, String)> {
    let cfg = gradcheck_config();
    let model = MaskedAutoencoder::new(cfg.clone(), 17)?;
    let pair = gradcheck_pair(&cfg, 3);
    let r = gradient_check(&model, &pair, WeightPolicy::Ours, WeightGradient::Detached, 5, exec)?;
    Ok((
        r.max_rel_err < GRAD_TOLERANCE,
        format!(
            "max rel err {:.2e} over {} scalars (worst {})",
            r.max_rel_err, r.checked, r.worst_param
        ),
    ))
}

fn check_weight_detachment(fault: Option<Fault>, exec: Execution) -> Result<(bool, String)> {
    let cfg = gradcheck_config();
    let model = MaskedAutoencoder::new(cfg.clone(), 23)?;
    let pair = gradcheck_pair(&cfg, 4);
    let out = model.forward_loss(&pair, WeightPolicy::Ours)?;
    let interior = out
        .weights
        .iter()
        .zip(&out.visibility)
        .map(|(w, v)| {
            w.weights
                .iter()
                .zip(v.category.iter())
                .filter(|(w, c)| **c == Visibility::CrossVisible && **w > 0.0 && **w < 1.0)
                .count()
        })
        .sum::<usize>();
    if interior == 0 {
        return Ok((false, "fixture has no cross pixels with weight inside (0, 1)".into()));
    }
    let mode = match fault {
        Some(Fault::WeightDetachment) => WeightGradient::ThroughWeights,
        None => WeightGradient::Detached,
    };
    let r = gradient_check(&model, &pair, WeightPolicy::Ours, mode, 3, exec)?;
    Ok((
        r.max_rel_err < GRAD_TOLERANCE,
        format!(
            "training gradient vs frozen-weight differences: max rel err {:.2e} ({} interior cross pixels)",
            r.max_rel_err, interior
        ),
    ))
}

fn check_geometry() -> Result<(bool, String)> {
    let mut rng = rng_for(31, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (random_bbox(&mut rng), random_bbox(&mut rng));
        let (na, nb) = normalize_pair(&a, &b)?;
        let flipped = rng.random_bool(0.3);
        let ta = FrameTransform::new(&na, 32, 32, flipped)?;
        let tb = FrameTransform::new(&nb, 32, 32, false)?;
        for _ in 0..20 {
            let (u, v) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
            let (x, y) = ta.to_shared_point(u, v);
            let (u2, v2) = ta.from_shared_point(x, y);
            worst = worst.max((u - u2).abs()).max((v - v2).abs());
            if !flipped {
                let (eu, ev) = geolocate(u, v, &a, 32, &b, 32);
                if let Some((cu, cv)) = correspond(u, v, &ta, &tb) {
                    worst = worst.max((cu - eu).abs()).max((cv - ev).abs());
                    if let Some((bu, bv)) = correspond(cu, cv, &tb, &ta) {
                        worst = worst.max((bu - u).abs()).max((bv - v).abs());
                    }
                }
            }
        }
    }
    Ok((
        worst < 1e-9,
        format!("max round-trip / geolocation error {worst:.2e} px"),
    ))
}

fn check_partition() -> Result<(bool, String)> {
    let mut rng = rng_for(37, &[]);
    let (size, patch) = (32, 8);
    let mut mismatches = 0usize;
    for _ in 0..20 {
        let (a, b) = (random_bbox(&mut rng), random_bbox(&mut rng));
        let (na, nb) = normalize_pair(&a, &b)?;
        let ta = FrameTransform::new(&na, size, size, false)?;
        let tb = FrameTransform::new(&nb, size, size, false)?;
        let mi = sample_mask(4, 4, 0.6, &mut rng);
        let mj = sample_mask(4, 4, 0.6, &mut rng);
        let vis = classify_pixels(&mi, &mj, &ta, &tb, patch)?;
        for ((y, x), cat) in vis.category.indexed_iter() {
            let expected = oracle_category(&mi, &mj, (x, y), &a, &b, size, patch);
            mismatches += usize::from(expected != *cat);
        }
        let total = vis.count(Visibility::SelfVisible)
            + vis.count(Visibility::CrossVisible)
            + vis.count(Visibility::NotVisible);
        mismatches += total.abs_diff(size * size);
    }
    Ok((
        mismatches == 0,
        format!("{mismatches} pixel mismatches against the geolocation oracle"),
    ))
}

fn oracle_category(
    mi: &PatchMask,
    mj: &PatchMask,
    (x, y): (usize, usize),
    a: &GeoBBox,
    b: &GeoBBox,
    size: usize,
    patch: usize,
) -> Visibility {
    if !mi.mask[[y / patch, x / patch]] {
        return Visibility::SelfVisible;
    }
    let (u, v) = geolocate(x as f64 + 0.5, y as f64 + 0.5, a, size, b, size);
    let inside = u >= 0.0 && v >= 0.0 && u < size as f64 && v < size as f64;
    if inside && !mj.mask[[v as usize / patch, u as usize / patch]] {
        Visibility::CrossVisible
    } else {
        Visibility::NotVisible
    }
}

fn check_mask_ratio() -> Result<(bool, String)> {
    let cfg = MaskConfig::default();
    let mut rng = rng_for(41, &[]);
    let n = 196;
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let iou = rng.random_range(0.0..=1.0);
        let ratio = dynamic_mask_ratio(iou, &cfg);
        let m = sample_mask(14, 14, ratio, &mut rng);
        worst = worst.max((m.masked_count() as f64 / n as f64 - ratio).abs());
        if m.masked_count() != masked_count(n, ratio) {
            return Ok((
                false,
                format!("masked count {} != {}", m.masked_count(), masked_count(n, ratio)),
            ));
        }
    }
    let ends = dynamic_mask_ratio(0.0, &cfg) == 0.75 && dynamic_mask_ratio(1.0, &cfg) == 0.85;
    Ok((
        ends && worst <= 0.5 / n as f64,
        format!("max |fraction - ratio| {worst:.2e} (bound {:.2e})", 0.5 / n as f64),
    ))
}

fn check_index(exec: Execution) -> Result<(bool, String)> {
    let mut rng = rng_for(43, &[]);
    let records: Vec<ImageRecord> = (0..200)
        .map(|k| {
            let p = rng.random_range(0.0..8.0);
            let l = rng.random_range(0.0..8.0);
            Ok(ImageRecord {
                id: format!("r{k}"),
                path: String::new(),
                bbox: GeoBBox::new(p, p + rng.random_range(0.2..2.0), l, l + rng.random_range(0.2..2.0))?,
                width_px: 1,
                height_px: 1,
                timestamp: None,
            })
        })
        .collect::<Result<_>>()?;
    for alpha in [0.0, 0.1, 0.5] {
        if build_index_with(&records, alpha, exec)? != build_index_brute_force(&records, alpha)? {
            return Ok((false, format!("sweep and brute force differ at alpha {alpha}")));
        }
    }
    Ok((true, "sweep equals brute force at alpha 0, 0.1, 0.5".into()))
}

/// Runs every check in a fixed order.
pub fn run_selftest(fault: Option<Fault>, exec: Execution) -> Vec<CheckOutcome> {
    vec![
        timed("gradient", || check_gradient(exec)),
        timed("weight-detachment", || check_weight_detachment(fault, exec)),
        timed("geometry-round-trip", check_geometry),
        timed("visibility-partition", check_partition),
        timed("mask-ratio", check_mask_ratio),
        timed("index-equivalence", || check_index(exec)),
    ]
}
