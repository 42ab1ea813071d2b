//! Georeferenced footprints and the precomputed neighbor lookup table.
//!
//! Two images are neighbors when the IoU of their footprints is strictly
//! greater than `alpha`. The table is built once, persisted, and only queried
//! during training.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Latitude/longitude extents of an image footprint, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBBox {
    pub phi_min: f64,
    pub phi_max: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl GeoBBox {
    pub fn new(phi_min: f64, phi_max: f64, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        let b = GeoBBox {
            phi_min,
            phi_max,
            lambda_min,
            lambda_max,
        };
        b.validate("<anonymous>")?;
        Ok(b)
    }

    pub fn validate(&self, id: &str) -> Result<()> {
        let reason = if ![self.phi_min, self.phi_max, self.lambda_min, self.lambda_max]
            .iter()
            .all(|v| v.is_finite())
        {
            Some("non-finite coordinate")
        } else if self.phi_min >= self.phi_max {
            Some("phi_min must be < phi_max")
        } else if self.lambda_min >= self.lambda_max {
            Some("lambda_min must be < lambda_max")
        } else {
            None
        };
        match reason {
            Some(r) => Err(Error::InvalidBBox {
                id: id.to_string(),
                reason: r.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn lat_extent(&self) -> f64 {
        self.phi_max - self.phi_min
    }

    pub fn lon_extent(&self) -> f64 {
        self.lambda_max - self.lambda_min
    }

    pub fn area(&self) -> f64 {
        self.lat_extent() * self.lon_extent()
    }

    pub fn contains(&self, other: &GeoBBox) -> bool {
        other.phi_min >= self.phi_min
            && other.phi_max <= self.phi_max
            && other.lambda_min >= self.lambda_min
            && other.lambda_max <= self.lambda_max
    }

    pub fn translated(&self, dphi: f64, dlambda: f64) -> GeoBBox {
        GeoBBox {
            phi_min: self.phi_min + dphi,
            phi_max: self.phi_max + dphi,
            lambda_min: self.lambda_min + dlambda,
            lambda_max: self.lambda_max + dlambda,
        }
    }
}

/// Intersection over union in planar degree coordinates.
///
/// Edge-touching boxes have a zero-area intersection and therefore IoU 0.
pub fn iou(a: &GeoBBox, b: &GeoBBox) -> f64 {
    let dphi = a.phi_max.min(b.phi_max) - a.phi_min.max(b.phi_min);
    let dlambda = a.lambda_max.min(b.lambda_max) - a.lambda_min.max(b.lambda_min);
    if dphi <= 0.0 || dlambda <= 0.0 {
        return 0.0;
    }
    let inter = dphi * dlambda;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One line of the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    #[serde(flatten)]
    pub bbox: GeoBBox,
    pub width_px: usize,
    pub height_px: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate(&self.id)?;
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidBBox {
                id: self.id.clone(),
                reason: "image dimensions must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Reads line-delimited JSON metadata. Blank lines are skipped.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("metadata", format!("line {}: {e}", lineno + 1)))?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_metadata(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Precomputed neighbor sets keyed by image id. Every id of the source dataset
/// is present, possibly with an empty list. Lists are sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub alpha: f64,
    pub table: BTreeMap<String, Vec<String>>,
}

const NMIX_MAGIC: &[u8; 4] = b"NMIX";
const NMIX_VERSION: u32 = 1;

fn check_records(records: &[ImageRecord], alpha: f64) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to index".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
    }
    Ok(())
}

fn assemble(records: &[ImageRecord], alpha: f64, pairs: Vec<(usize, usize)>) -> NeighborIndex {
    let mut table: BTreeMap<String, Vec<String>> = records.iter().map(|r| (r.id.clone(), Vec::new())).collect();
    for (a, b) in pairs {
        table.get_mut(&records[a].id).unwrap().push(records[b].id.clone());
        table.get_mut(&records[b].id).unwrap().push(records[a].id.clone());
    }
    for list in table.values_mut() {
        list.sort();
        list.dedup();
    }
    NeighborIndex { alpha, table }
}

/// Builds the neighbor table with a longitude sweep.
///
/// Records are sorted by `lambda_min`; each record is only compared against
/// the run of successors whose `lambda_min` falls strictly inside its own
/// longitude extent, since any qualifying pair needs a positive-area overlap.
pub fn build_index(records: &[ImageRecord], alpha: f64) -> Result<NeighborIndex> {
    build_index_with(records, alpha, Execution::default())
}

pub fn build_index_with(records: &[ImageRecord], alpha: f64, exec: Execution) -> Result<NeighborIndex> {
    check_records(records, alpha)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].bbox.lambda_min.total_cmp(&records[b].bbox.lambda_min));
    let per_anchor = exec.map_indexed(order.len(), |k| {
        let a = &records[order[k]].bbox;
        let mut found = Vec::new();
        for &other in &order[k + 1..] {
            let b = &records[other].bbox;
            if b.lambda_min >= a.lambda_max {
                break;
            }
            if iou(a, b) > alpha {
                found.push((order[k], other));
            }
        }
        found
    });
    Ok(assemble(records, alpha, per_anchor.into_iter().flatten().collect()))
}

/// All-pairs construction, used as the reference for [`build_index`].
pub fn build_index_brute_force(records: &[ImageRecord], alpha: f64) -> Result<NeighborIndex> {
    check_records(records, alpha)?;
    let mut pairs = Vec::new();
    for a in 0..records.len() {
        for b in a + 1..records.len() {
            if iou(&records[a].bbox, &records[b].bbox) > alpha {
                pairs.push((a, b));
            }
        }
    }
    Ok(assemble(records, alpha, pairs))
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn neighbors(&self, id: &str) -> Result<&[String]> {
        self.table
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Draws a neighbor of `anchor_id` uniformly. `Ok(None)` means the anchor
    /// has no neighbors; the caller decides the fallback.
    pub fn sample_neighbor<R: Rng + ?Sized>(&self, anchor_id: &str, rng: &mut R) -> Result<Option<&str>> {
        let list = self.neighbors(anchor_id)?;
        if list.is_empty() {
            return Ok(None);
        }
        Ok(Some(list[rng.random_range(0..list.len())].as_str()))
    }

    /// Histogram of neighbor-set sizes: `hist[k]` is the number of ids with
    /// exactly `k` neighbors.
    pub fn degree_histogram(&self) -> Vec<usize> {
        let max = self.table.values().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for list in self.table.values() {
            hist[list.len()] += 1;
        }
        hist
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(NMIX_MAGIC)?;
        w.write_all(&NMIX_VERSION.to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        w.write_all(&(self.table.len() as u32).to_le_bytes())?;
        for (id, list) in &self.table {
            write_str(&mut w, id)?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for n in list {
                write_str(&mut w, n)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("NMIX", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != NMIX_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
        if version != NMIX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
        let alpha = f64::from_le_bytes(buf);
        let count = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let id = read_str(&mut r).map_err(|_| bad("truncated entry"))?;
            let n = read_u32(&mut r).map_err(|_| bad("truncated entry"))?;
            let list = (0..n)
                .map(|_| read_str(&mut r))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|_| bad("truncated neighbor list"))?;
            table.insert(id, list);
        }
        Ok(NeighborIndex { alpha, table })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(BufReader::new(file))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
