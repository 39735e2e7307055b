//! Dataset plumbing: inventory ingestion, balanced non-flood sampling,
//! patch extraction, standardization, and splitting.
//!
//! The flow mirrors the susceptibility-modeling protocol: load an aligned
//! factor stack and a flood inventory, balance it with generated non-flood
//! points, cut a centered p×p patch per point, split the samples, then
//! z-score each factor with statistics fitted on the training subset only.

pub mod stack;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};

pub use stack::{FeatureStack, DEFAULT_CELL_SIZE, DEFAULT_NODATA, FFSTACK_MAGIC};
pub use synth::{synth_generate, RelevanceProfile, SYNTH_FACTORS};

/// Default exclusion buffer (cells, Chebyshev) around flood points when
/// sampling non-flood locations.
pub const DEFAULT_NONFLOOD_BUFFER: usize = 5;

/// Default split ratios (train, validation, test).
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Whether an inventory point was observed or synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Recorded,
    Generated,
}

impl fmt::Display for PointSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointSource::Recorded => "recorded",
            PointSource::Generated => "generated",
        })
    }
}

/// One labeled grid location: flood (1) or non-flood (0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InventoryPoint {
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub source: PointSource,
}

/// Subset assignment of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-factor z-scoring statistics, fitted on the training subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// The full set of fitted statistics, in factor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub factors: Vec<FactorStats>,
}

/// Applies one factor's fitted statistics to a raw value. Shared by dataset
/// standardization and whole-grid inference so both see identical inputs.
pub fn standardize_value(value: f32, mean: f64, std: f64) -> f32 {
    ((value as f64 - mean) / std) as f32
}

/// Why a point produced no patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The p×p window extends past the grid border.
    OutOfGrid,
    /// The window covers at least one nodata cell.
    Nodata,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::OutOfGrid => "window exits the grid",
            RejectReason::Nodata => "window touches nodata",
        })
    }
}

/// One rejected point and the reason, reported rather than silently dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub point: InventoryPoint,
    pub reason: RejectReason,
}

/// Result of patch extraction: the dataset plus the rejection report.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub dataset: PatchDataset,
    pub rejected: Vec<Rejection>,
}

/// N samples of F×p×p patch data with labels, provenance, and (once
/// assigned) split membership and standardization statistics.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    /// N·F·p·p values, sample-major.
    x: Vec<f32>,
    /// N labels as 0.0 / 1.0.
    y: Vec<f32>,
    factors: Vec<String>,
    patch: usize,
    points: Vec<InventoryPoint>,
    standardization: Option<Standardization>,
    assignment: Option<Vec<Split>>,
}

impl PatchDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// One sample's F·p·p values.
    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.factors.len() * self.patch * self.patch;
        &self.x[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> f32 {
        self.y[i]
    }

    pub fn point(&self, i: usize) -> InventoryPoint {
        self.points[i]
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn assignment(&self) -> Option<&[Split]> {
        self.assignment.as_deref()
    }

    /// Sample indices belonging to one subset, in stable (sample) order.
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        match &self.assignment {
            Some(a) => {
                (0..self.n()).filter(|&i| a[i] == split).collect()
            }
            None => Vec::new(),
        }
    }

    /// (non-flood, flood) counts within one subset.
    pub fn class_counts(&self, split: Split) -> (usize, usize) {
        let mut counts = (0usize, 0usize);
        for i in self.indices_of(split) {
            if self.y[i] >= 0.5 {
                counts.1 += 1;
            } else {
                counts.0 += 1;
            }
        }
        counts
    }

    /// Assembles the listed samples into an (N,F,p,p) input tensor and an
    /// (N,1,1,1) target tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::Value("cannot assemble an empty batch".into()));
        }
        let per = self.factors.len() * self.patch * self.patch;
        let mut xs = Vec::with_capacity(indices.len() * per);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::Value(format!(
                    "batch index {i} out of range for {} samples",
                    self.n()
                )));
            }
            xs.extend_from_slice(self.sample(i));
            ys.push(self.y[i]);
        }
        let x = Tensor::from_vec(
            Shape::new(indices.len(), self.factors.len(), self.patch, self.patch),
            xs,
        )?;
        let y = Tensor::from_vec(Shape::new(indices.len(), 1, 1, 1), ys)?;
        Ok((x, y))
    }

    /// Assigns every sample to train/val/test. Ratios must sum to 1; counts
    /// follow the floor-then-distribute rule (floors first, remainders to
    /// the largest fractional parts, ties in subset order). When
    /// `stratified`, the rule applies per class so subset class ratios match
    /// the whole within ±1 sample. Same seed + ratios → same assignment.
    pub fn split(&mut self, ratios: (f64, f64, f64), seed: u64, stratified: bool) -> Result<()> {
        if self.standardization.is_some() {
            return Err(Error::Config(
                "dataset is already standardized; splitting now would invalidate the fitted statistics".into(),
            ));
        }
        let parts = [ratios.0, ratios.1, ratios.2];
        if parts.iter().any(|&r| !(r.is_finite() && r >= 0.0)) {
            return Err(Error::Value(format!("split ratios must be non-negative, got {ratios:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Value(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        if self.n() == 0 {
            return Err(Error::InsufficientData("cannot split an empty dataset".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assignment = vec![Split::Train; self.n()];
        let groups: Vec<Vec<usize>> = if stratified {
            // Fixed class order (0 then 1) keeps the rng stream stable.
            let zeros = (0..self.n()).filter(|&i| self.y[i] < 0.5).collect();
            let ones = (0..self.n()).filter(|&i| self.y[i] >= 0.5).collect();
            vec![zeros, ones]
        } else {
            vec![(0..self.n()).collect()]
        };
        for mut group in groups {
            group.shuffle(&mut rng);
            let counts = floor_then_distribute(group.len(), parts);
            let mut cursor = 0usize;
            for (subset, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
                for &i in &group[cursor..cursor + count] {
                    assignment[i] = *subset;
                }
                cursor += count;
            }
        }
        self.assignment = Some(assignment);
        Ok(())
    }

    /// Fits per-factor mean/std on the training subset (population
    /// statistics over every cell of every training patch) and z-scores all
    /// samples in place. A zero-variance factor keeps std = 1 and is
    /// reported in the returned warnings.
    pub fn standardize(&mut self) -> Result<Vec<String>> {
        if self.standardization.is_some() {
            return Err(Error::Config("dataset is already standardized".into()));
        }
        let assignment = self.assignment.as_ref().ok_or_else(|| {
            Error::Config(
                "standardize requires a split: statistics are fitted on the training subset only"
                    .into(),
            )
        })?;
        let train: Vec<usize> =
            (0..self.n()).filter(|&i| assignment[i] == Split::Train).collect();
        if train.is_empty() {
            return Err(Error::InsufficientData(
                "training subset is empty; nothing to fit standardization on".into(),
            ));
        }

        let f_count = self.factors.len();
        let pp = self.patch * self.patch;
        let per = f_count * pp;
        let mut warnings = Vec::new();
        let mut stats = Vec::with_capacity(f_count);
        for f in 0..f_count {
            let mut sum = 0.0f64;
            for &i in &train {
                for v in &self.x[i * per + f * pp..i * per + (f + 1) * pp] {
                    sum += *v as f64;
                }
            }
            let n = (train.len() * pp) as f64;
            let mean = sum / n;
            let mut ss = 0.0f64;
            for &i in &train {
                for v in &self.x[i * per + f * pp..i * per + (f + 1) * pp] {
                    let d = *v as f64 - mean;
                    ss += d * d;
                }
            }
            let var = ss / n;
            let std = if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                warnings.push(format!(
                    "factor {:?} has zero variance in the training subset; std set to 1",
                    self.factors[f]
                ));
                1.0
            };
            stats.push(FactorStats { name: self.factors[f].clone(), mean, std });
        }

        for i in 0..self.n() {
            for (f, s) in stats.iter().enumerate() {
                for v in &mut self.x[i * per + f * pp..i * per + (f + 1) * pp] {
                    *v = standardize_value(*v, s.mean, s.std);
                }
            }
        }
        self.standardization = Some(Standardization { factors: stats });
        Ok(warnings)
    }

    /// A copy of the dataset without factor `f` — same samples, labels,
    /// split assignment, and (for the remaining factors) identical
    /// standardization, so retraining isolates that factor's contribution.
    pub fn drop_factor(&self, f: usize) -> Result<PatchDataset> {
        if f >= self.factors.len() {
            return Err(Error::Value(format!(
                "factor index {f} out of range for {} factors",
                self.factors.len()
            )));
        }
        if self.factors.len() == 1 {
            return Err(Error::Value("cannot drop the only factor".into()));
        }
        let pp = self.patch * self.patch;
        let per = self.factors.len() * pp;
        let mut x = Vec::with_capacity(self.n() * (per - pp));
        for i in 0..self.n() {
            for g in 0..self.factors.len() {
                if g != f {
                    x.extend_from_slice(&self.x[i * per + g * pp..i * per + (g + 1) * pp]);
                }
            }
        }
        fn keep<T: Clone>(v: &[T], drop: usize) -> Vec<T> {
            v.iter()
                .enumerate()
                .filter(|(g, _)| *g != drop)
                .map(|(_, s)| s.clone())
                .collect()
        }
        Ok(PatchDataset {
            x,
            y: self.y.clone(),
            factors: keep(&self.factors, f),
            patch: self.patch,
            points: self.points.clone(),
            standardization: self
                .standardization
                .as_ref()
                .map(|s| Standardization { factors: keep(&s.factors, f) }),
            assignment: self.assignment.clone(),
        })
    }
}

/// Floors each subset count, then hands the remainder to the largest
/// fractional parts (ties resolved in subset order train, val, test).
fn floor_then_distribute(m: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw = [m as f64 * ratios[0], m as f64 * ratios[1], m as f64 * ratios[2]];
    let mut counts = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..m - assigned {
        counts[order[k % 3]] += 1;
    }
    counts
}

/// Reads an inventory CSV (`row,col,label[,source]`). Indices are validated
/// against the grid; every defect carries its 1-based line number. A missing
/// source column defaults to `recorded`.
pub fn load_inventory(path: &Path, width: usize, height: usize) -> Result<Vec<InventoryPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })?;
    let has_source = match header.trim_end_matches('\r').trim() {
        "row,col,label" => false,
        "row,col,label,source" => true,
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `row,col,label[,source]`, got {other:?}"),
            })
        }
    };
    let arity = if has_source { 4 } else { 3 };

    let mut points = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row_text = raw.trim_end_matches('\r').trim();
        if row_text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row_text.split(',').map(str::trim).collect();
        if fields.len() != arity {
            return Err(Error::Parse {
                line,
                msg: format!("expected {arity} fields, got {}", fields.len()),
            });
        }
        let row: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad row index {:?}", fields[0]) })?;
        let col: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad col index {:?}", fields[1]) })?;
        if row >= height {
            return Err(Error::Parse {
                line,
                msg: format!("row {row} outside grid of height {height}"),
            });
        }
        if col >= width {
            return Err(Error::Parse {
                line,
                msg: format!("col {col} outside grid of width {width}"),
            });
        }
        let label: u8 = match fields[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let source = if has_source {
            match fields[3].to_ascii_lowercase().as_str() {
                "recorded" => PointSource::Recorded,
                "generated" => PointSource::Generated,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("source must be recorded or generated, got {other:?}"),
                    })
                }
            }
        } else {
            PointSource::Recorded
        };
        points.push(InventoryPoint { row, col, label, source });
    }
    Ok(points)
}

/// Writes an inventory CSV with the source column.
pub fn save_inventory(path: &Path, points: &[InventoryPoint]) -> Result<()> {
    let mut text = String::from("row,col,label,source\n");
    for p in points {
        text.push_str(&format!("{},{},{},{}\n", p.row, p.col, p.label, p.source));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Samples `n` distinct non-flood cells uniformly from the eligible set:
/// off nodata and at Chebyshev distance ≥ `min_distance_cells` from every
/// flood point. Reproducible by seed.
pub fn generate_nonflood(
    stack: &FeatureStack,
    flood_points: &[InventoryPoint],
    n: usize,
    min_distance_cells: usize,
    seed: u64,
) -> Result<Vec<InventoryPoint>> {
    let (w, h) = (stack.width(), stack.height());
    let mut eligible = vec![true; w * h];
    for (i, e) in eligible.iter_mut().enumerate() {
        if stack.mask()[i] {
            *e = false;
        }
    }
    if min_distance_cells > 0 {
        let radius = (min_distance_cells - 1) as i64;
        for p in flood_points {
            let r0 = (p.row as i64 - radius).max(0) as usize;
            let r1 = (p.row as i64 + radius).min(h as i64 - 1) as usize;
            let c0 = (p.col as i64 - radius).max(0) as usize;
            let c1 = (p.col as i64 + radius).min(w as i64 - 1) as usize;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    eligible[r * w + c] = false;
                }
            }
        }
    }
    let cells: Vec<usize> =
        (0..w * h).filter(|&i| eligible[i]).collect();
    if n > cells.len() {
        return Err(Error::Capacity(format!(
            "requested {n} non-flood points but only {} cells lie off nodata and ≥ {min_distance_cells} cells from every flood point",
            cells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, cells.len(), n);
    Ok(chosen
        .into_iter()
        .map(|k| {
            let cell = cells[k];
            InventoryPoint {
                row: cell / w,
                col: cell % w,
                label: 0,
                source: PointSource::Generated,
            }
        })
        .collect())
}

/// Cuts one F×p×p patch per point. The window's top-left corner sits at
/// (row − ⌊p/2⌋, col − ⌊p/2⌋); points whose window exits the grid or covers
/// nodata are rejected and reported, never silently dropped.
pub fn extract_patches(
    stack: &FeatureStack,
    points: &[InventoryPoint],
    p: usize,
) -> Result<Extraction> {
    if p == 0 {
        return Err(Error::Value("patch size must be at least 1".into()));
    }
    let (w, h) = (stack.width(), stack.height());
    let half = (p / 2) as i64;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    'points: for &point in points {
        let r0 = point.row as i64 - half;
        let c0 = point.col as i64 - half;
        if r0 < 0 || c0 < 0 || r0 + p as i64 > h as i64 || c0 + p as i64 > w as i64 {
            rejected.push(Rejection { point, reason: RejectReason::OutOfGrid });
            continue;
        }
        let (r0, c0) = (r0 as usize, c0 as usize);
        for dr in 0..p {
            for dc in 0..p {
                if stack.is_masked(r0 + dr, c0 + dc) {
                    rejected.push(Rejection { point, reason: RejectReason::Nodata });
                    continue 'points;
                }
            }
        }
        for f in 0..stack.num_factors() {
            let layer = stack.layer(f);
            for dr in 0..p {
                let start = (r0 + dr) * w + c0;
                x.extend_from_slice(&layer[start..start + p]);
            }
        }
        y.push(point.label as f32);
        accepted.push(point);
    }
    Ok(Extraction {
        dataset: PatchDataset {
            x,
            y,
            factors: stack.factors().to_vec(),
            patch: p,
            points: accepted,
            standardization: None,
            assignment: None,
        },
        rejected,
    })
}
