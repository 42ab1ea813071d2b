//! Procedural stand-in for an archive of overlapping satellite tiles.
//!
//! A multi-octave value-noise RGB raster plays the planet surface. Tiles are
//! pixel windows of it whose footprints map linearly to latitude/longitude,
//! so overlapping tiles share content exactly on their geographic
//! intersection.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::ImageSource;
use crate::error::{Error, Result};
use crate::exec::rng_for;
use crate::geo_index::{iou, write_metadata, GeoBBox, ImageRecord};
use crate::imagery::{save_png, Pixels};
use crate::relpos::normalize_pair;
use crate::visibility::{pair_matrix, FrameTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Tiles on a regular grid with the configured stride.
    #[default]
    GridAdjacent,
    /// Grid positions displaced by up to half a stride.
    RandomJitter,
    /// Half the tiles on the grid, the other half re-acquisitions of the
    /// same windows with an appearance change.
    Revisit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub world_px: usize,
    pub noise_octaves: usize,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub base_cell_px: usize,
    pub seed: u64,
    pub tile_px: usize,
    pub n_tiles: usize,
    /// Grid step between tiles; 0 means half a tile.
    pub stride_px: usize,
    pub overlap_mode: OverlapMode,
    /// Std of the per-tile brightness and per-channel color shift applied
    /// to revisits.
    pub revisit_noise: f64,
    pub degrees_per_px: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            world_px: 1024,
            noise_octaves: 5,
            base_cell_px: 128,
            seed: 0,
            tile_px: 64,
            n_tiles: 400,
            stride_px: 0,
            overlap_mode: OverlapMode::GridAdjacent,
            revisit_noise: 0.0,
            degrees_per_px: 1.0 / 1024.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tile_px == 0 || self.tile_px > self.world_px {
            return fail(format!("tile_px {} must be in 1..={}", self.tile_px, self.world_px));
        }
        if self.n_tiles < 2 {
            return fail("n_tiles must be >= 2".into());
        }
        if self.noise_octaves == 0 || self.base_cell_px < 2 {
            return fail("need at least one octave and base_cell_px >= 2".into());
        }
        if !(self.revisit_noise >= 0.0 && self.degrees_per_px > 0.0) {
            return fail("revisit_noise must be >= 0 and degrees_per_px > 0".into());
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        if self.stride_px == 0 {
            (self.tile_px / 2).max(1)
        } else {
            self.stride_px
        }
    }

    /// Footprint of the window whose top-left pixel is `(row, col)`.
    pub fn window_bbox(&self, row: usize, col: usize) -> GeoBBox {
        let d = self.degrees_per_px;
        let top = (self.world_px - row) as f64 * d;
        GeoBBox {
            phi_min: top - self.tile_px as f64 * d,
            phi_max: top,
            lambda_min: col as f64 * d,
            lambda_max: (col + self.tile_px) as f64 * d,
        }
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of octaves of lattice noise, rescaled to [0, 1] per channel.
pub fn render_world(spec: &WorldSpec) -> Result<Pixels> {
    spec.validate()?;
    let n = spec.world_px;
    let mut world = Array3::<f64>::zeros((n, n, 3));
    let mut amplitude = 1.0;
    for octave in 0..spec.noise_octaves {
        let cell = (spec.base_cell_px >> octave).max(1) as f64;
        let lattice = (n as f64 / cell).ceil() as usize + 2;
        let mut rng = rng_for(spec.seed, &[octave as u64]);
        let values = Array3::from_shape_fn((lattice, lattice, 3), |_| rng.random::<f64>());
        for y in 0..n {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..n {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                for c in 0..3 {
                    let top = values[[y0, x0, c]] * (1.0 - tx) + values[[y0, x0 + 1, c]] * tx;
                    let bottom = values[[y0 + 1, x0, c]] * (1.0 - tx) + values[[y0 + 1, x0 + 1, c]] * tx;
                    world[[y, x, c]] += amplitude * (top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        amplitude *= 0.5;
    }
    for c in 0..3 {
        let mut ch = world.slice_mut(s![.., .., c]);
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        ch.mapv_inplace(|v| (v - lo) / span);
    }
    Ok(world)
}

/// Top-left pixel of every tile window, in tile order.
fn tile_origins(spec: &WorldSpec) -> Result<Vec<(usize, usize, bool)>> {
    let stride = spec.stride();
    let slots = (spec.world_px - spec.tile_px) / stride + 1;
    let originals = match spec.overlap_mode {
        OverlapMode::Revisit => spec.n_tiles.div_ceil(2),
        _ => spec.n_tiles,
    };
    let side = (originals as f64).sqrt().ceil() as usize;
    if side > slots {
        return Err(Error::Config(format!(
            "{originals} tiles need a {side}x{side} grid but only {slots} positions fit per axis"
        )));
    }
    let mut rng = rng_for(spec.seed, &[u64::MAX]);
    let max = (spec.world_px - spec.tile_px) as i64;
    let mut out: Vec<(usize, usize, bool)> = (0..originals)
        .map(|k| {
            let (r, c) = ((k / side) * stride, (k % side) * stride);
            if spec.overlap_mode == OverlapMode::RandomJitter {
                let half = (stride / 2) as i64;
                let jr = rng.random_range(-half..=half);
                let jc = rng.random_range(-half..=half);
                (
                    (r as i64 + jr).clamp(0, max) as usize,
                    (c as i64 + jc).clamp(0, max) as usize,
                    false,
                )
            } else {
                (r, c, false)
            }
        })
        .collect();
    if spec.overlap_mode == OverlapMode::Revisit {
        let revisits: Vec<_> = out
            .iter()
            .take(spec.n_tiles - originals)
            .map(|&(r, c, _)| (r, c, true))
            .collect();
        out.extend(revisits);
    }
    Ok(out)
}

/// A generated tile with its ground-truth window.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub record: ImageRecord,
    pub pixels: Pixels,
    pub row: usize,
    pub col: usize,
}

/// Cuts the tiles out of a rendered world, applying revisit perturbations.
pub fn cut_tiles(spec: &WorldSpec, world: &Pixels) -> Result<Vec<Tile>> {
    spec.validate()?;
    let t = spec.tile_px;
    let noise = Normal::new(0.0, spec.revisit_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    tile_origins(spec)?
        .into_iter()
        .enumerate()
        .map(|(k, (row, col, revisit))| {
            let mut pixels = world.slice(s![row..row + t, col..col + t, ..]).to_owned();
            if revisit && spec.revisit_noise > 0.0 {
                let mut rng = rng_for(spec.seed, &[1 << 32, k as u64]);
                let brightness = noise.sample(&mut rng);
                let shift: Vec<f64> = (0..3).map(|_| noise.sample(&mut rng)).collect();
                pixels
                    .indexed_iter_mut()
                    .for_each(|((_, _, c), v)| *v = (*v + brightness + shift[c]).clamp(0.0, 1.0));
            }
            let id = format!("tile{k:05}");
            let record = ImageRecord {
                path: format!("{id}.png"),
                id,
                bbox: spec.window_bbox(row, col),
                width_px: t,
                height_px: t,
                timestamp: Some(if revisit { "t1" } else { "t0" }.into()),
            };
            Ok(Tile {
                record,
                pixels,
                row,
                col,
            })
        })
        .collect()
}

/// Renders the world and cuts its tiles, in memory.
pub fn generate_tiles(spec: &WorldSpec) -> Result<Vec<Tile>> {
    cut_tiles(spec, &render_world(spec)?)
}

#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub metadata: PathBuf,
    pub records: Vec<ImageRecord>,
}

pub const METADATA_FILE: &str = "metadata.jsonl";

/// Writes one PNG per tile plus `metadata.jsonl` into `out_dir`.
pub fn generate(spec: &WorldSpec, out_dir: &Path) -> Result<GeneratedWorld> {
    let tiles = generate_tiles(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for tile in &tiles {
        save_png(out_dir.join(&tile.record.path), tile.pixels.view())?;
    }
    let records: Vec<ImageRecord> = tiles.into_iter().map(|t| t.record).collect();
    let metadata = out_dir.join(METADATA_FILE);
    write_metadata(&metadata, &records)?;
    Ok(GeneratedWorld { metadata, records })
}

/// Agreement of one overlapping pair in its shared frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairConsistency {
    pub a: String,
    pub b: String,
    pub overlap_pixels: usize,
    pub mean_abs_diff: f64,
    /// Pearson correlation of corresponding values (1 when the overlap is
    /// empty or constant).
    pub correlation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub tolerance: f64,
    pub pairs: Vec<PairConsistency>,
}

impl ConsistencyReport {
    pub fn failures(&self) -> Vec<&PairConsistency> {
        self.pairs.iter().filter(|p| !p.pass).collect()
    }

    pub fn passed(&self) -> bool {
        self.pairs.iter().all(|p| p.pass)
    }
}

/// Slack for 8-bit storage.
pub const RESAMPLING_TOLERANCE: f64 = 2.0 / 255.0;

/// Compares every pixel of `a` whose center lands inside `b` with the pixel
/// of `b` containing the mapped point.
pub fn pair_consistency(
    a: (&ImageRecord, &Pixels),
    b: (&ImageRecord, &Pixels),
    tolerance: f64,
) -> Result<PairConsistency> {
    let (ra, pa) = a;
    let (rb, pb) = b;
    let (na, nb) = normalize_pair(&ra.bbox, &rb.bbox)?;
    let ta = FrameTransform::new(&na, pa.dim().0, pa.dim().1, false)?;
    let tb = FrameTransform::new(&nb, pb.dim().0, pb.dim().1, false)?;
    let m = pair_matrix(&ta, &tb);
    let (mut n, mut sum_abs) = (0usize, 0.0);
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..pa.dim().0 {
        for x in 0..pa.dim().1 {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let bu = m[0][0] * u + m[0][1] * v + m[0][2];
            let bv = m[1][0] * u + m[1][1] * v + m[1][2];
            if !tb.in_bounds(bu, bv) {
                continue;
            }
            let (by, bx) = (bv.floor() as usize, bu.floor() as usize);
            for c in 0..pa.dim().2 {
                let (p, q) = (pa[[y, x, c]], pb[[by, bx, c]]);
                sum_abs += (p - q).abs();
                sx += p;
                sy += q;
                sxx += p * p;
                syy += q * q;
                sxy += p * q;
            }
            n += 1;
        }
    }
    let count = (n * pa.dim().2) as f64;
    let mean_abs_diff = if n > 0 { sum_abs / count } else { 0.0 };
    let correlation = if n > 0 {
        let cov = sxy / count - sx * sy / (count * count);
        let va = sxx / count - sx * sx / (count * count);
        let vb = syy / count - sy * sy / (count * count);
        if va > 1e-15 && vb > 1e-15 {
            cov / (va * vb).sqrt()
        } else {
            1.0
        }
    } else {
        1.0
    };
    Ok(PairConsistency {
        a: ra.id.clone(),
        b: rb.id.clone(),
        overlap_pixels: n,
        mean_abs_diff,
        correlation,
        pass: mean_abs_diff <= tolerance,
    })
}

/// Checks up to `max_pairs` randomly chosen intersecting pairs.
/// The tolerance is `3 * revisit_noise` plus 8-bit slack.
pub fn verify_consistency(
    records: &[ImageRecord],
    source: &dyn ImageSource,
    revisit_noise: f64,
    max_pairs: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let tolerance = 3.0 * revisit_noise + RESAMPLING_TOLERANCE;
    let mut candidates = Vec::new();
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            if iou(&records[i].bbox, &records[j].bbox) > 0.0 {
                candidates.push((i, j));
            }
        }
    }
    let mut rng = rng_for(seed, &[]);
    let chosen = rand::seq::index::sample(&mut rng, candidates.len(), max_pairs.min(candidates.len()));
    let mut picks: Vec<(usize, usize)> = chosen.into_iter().map(|k| candidates[k]).collect();
    picks.sort_unstable();
    let pairs = picks
        .into_iter()
        .map(|(i, j)| {
            let (pi, pj) = (source.load(&records[i])?, source.load(&records[j])?);
            pair_consistency((&records[i], &pi), (&records[j], &pj), tolerance)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyReport { tolerance, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{FileSource, MemorySource};
    use crate::geo_index::build_index;

    fn small(mode: OverlapMode, noise: f64) -> WorldSpec {
        WorldSpec {
            world_px: 256,
            base_cell_px: 32,
            noise_octaves: 4,
            tile_px: 32,
            n_tiles: 36,
            overlap_mode: mode,
            revisit_noise: noise,
            seed: 3,
            ..WorldSpec::default()
        }
    }

    fn memory(tiles: &[Tile]) -> MemorySource {
        MemorySource {
            images: tiles.iter().map(|t| (t.record.id.clone(), t.pixels.clone())).collect(),
        }
    }

    #[test]
    fn world_is_normalized_and_deterministic() {
        let spec = small(OverlapMode::GridAdjacent, 0.0);
        let w = render_world(&spec).unwrap();
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(w, render_world(&spec).unwrap());
        // Neighboring pixels differ by far less than the value range.
        let max_step = (0..255)
            .map(|x| (w[[10, x + 1, 0]] - w[[10, x, 0]]).abs())
            .fold(0.0, f64::max);
        assert!(max_step < 0.2, "{max_step}");
    }

    #[test]
    fn interior_grid_tiles_have_three_neighbors() {
        let spec = small(OverlapMode::GridAdjacent, 0.0);
        let tiles = generate_tiles(&spec).unwrap();
        let records: Vec<_> = tiles.iter().map(|t| t.record.clone()).collect();
        let index = build_index(&records, 0.1).unwrap();
        for t in &tiles {
            let (r, c) = (t.row / 16, t.col / 16);
            if (1..5).contains(&r) && (1..5).contains(&c) {
                assert!(index.neighbors(&t.record.id).unwrap().len() >= 3);
            }
        }
    }

    #[test]
    fn overlaps_share_pixels_exactly() {
        let spec = small(OverlapMode::GridAdjacent, 0.0);
        let tiles = generate_tiles(&spec).unwrap();
        let records: Vec<_> = tiles.iter().map(|t| t.record.clone()).collect();
        let report = verify_consistency(&records, &memory(&tiles), 0.0, 40, 1).unwrap();
        assert_eq!(report.pairs.len(), 40);
        for p in &report.pairs {
            assert!(p.pass);
            assert_eq!(p.mean_abs_diff, 0.0);
            if p.overlap_pixels > 64 {
                assert!(p.correlation > 0.99);
            }
        }
    }

    #[test]
    fn corrupted_bbox_is_reported() {
        let spec = small(OverlapMode::GridAdjacent, 0.0);
        let tiles = generate_tiles(&spec).unwrap();
        let mut records: Vec<_> = tiles.iter().map(|t| t.record.clone()).collect();
        records[7].bbox = records[7].bbox.translated(0.0, 5.0 * spec.degrees_per_px);
        let report = verify_consistency(&records, &memory(&tiles), 0.0, 10_000, 1).unwrap();
        let bad = report.failures();
        assert!(!bad.is_empty());
        assert!(bad.iter().all(|p| p.a == "tile00007" || p.b == "tile00007"));
    }

    #[test]
    fn disjoint_pair_passes_vacuously() {
        let spec = small(OverlapMode::GridAdjacent, 0.0);
        let tiles = generate_tiles(&spec).unwrap();
        let (a, b) = (&tiles[0], &tiles[35]);
        let p = pair_consistency((&a.record, &a.pixels), (&b.record, &b.pixels), 0.0).unwrap();
        assert_eq!(p.overlap_pixels, 0);
        assert!(p.pass);
    }

    #[test]
    fn revisits_match_originals_without_noise() {
        let tiles = generate_tiles(&small(OverlapMode::Revisit, 0.0)).unwrap();
        assert_eq!(tiles.len(), 36);
        assert_eq!(tiles[18].pixels, tiles[0].pixels);
        assert_eq!(tiles[18].record.bbox, tiles[0].record.bbox);
        assert_eq!(tiles[18].record.timestamp.as_deref(), Some("t1"));

        let noisy = generate_tiles(&small(OverlapMode::Revisit, 0.02)).unwrap();
        assert_ne!(noisy[18].pixels, noisy[0].pixels);
        let records: Vec<_> = noisy.iter().map(|t| t.record.clone()).collect();
        assert!(verify_consistency(&records, &memory(&noisy), 0.02, 60, 2)
            .unwrap()
            .passed());
    }

    #[test]
    fn jittered_tiles_stay_inside_and_consistent() {
        let spec = small(OverlapMode::RandomJitter, 0.0);
        let tiles = generate_tiles(&spec).unwrap();
        assert!(tiles.iter().all(|t| t.row + 32 <= 256 && t.col + 32 <= 256));
        let records: Vec<_> = tiles.iter().map(|t| t.record.clone()).collect();
        assert!(verify_consistency(&records, &memory(&tiles), 0.0, 60, 4)
            .unwrap()
            .passed());
    }

    #[test]
    fn generated_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WorldSpec {
            n_tiles: 9,
            ..small(OverlapMode::GridAdjacent, 0.0)
        };
        let out = generate(&spec, dir.path()).unwrap();
        let records = crate::geo_index::read_metadata(&out.metadata).unwrap();
        assert_eq!(records, out.records);
        let report = verify_consistency(&records, &FileSource::new(dir.path()), 0.0, 100, 0).unwrap();
        assert!(report.passed());
    }

    #[test]
    fn too_many_tiles_is_a_config_error() {
        let spec = WorldSpec {
            n_tiles: 400,
            ..small(OverlapMode::GridAdjacent, 0.0)
        };
        assert!(matches!(generate_tiles(&spec), Err(Error::Config(_))));
        let spec = WorldSpec {
            tile_px: 300,
            ..small(OverlapMode::GridAdjacent, 0.0)
        };
        assert!(spec.validate().is_err());
    }
}
