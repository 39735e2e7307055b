//! Whole-grid susceptibility mapping: tiled inference, Jenks natural-breaks
//! classification, and class/event statistics.
//!
//! `predict_map` slides the model's patch window over every unmasked cell
//! whose window fits fully inside the grid and touches no nodata, applying
//! the standardization fitted at training time — so a cell's probability is
//! bit-identical to the patch-extraction path on the same point. The
//! probabilities are then split into `k` classes at Jenks natural breaks
//! (exact Fisher dynamic programming, optionally on a seeded subsample for
//! very large grids), and summarized as per-class area and flood-event
//! percentages.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::Model;
use crate::data::{
    standardize_value, FeatureStack, InventoryPoint, Standardization, DEFAULT_NODATA,
};
use crate::engine::{Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// Cells per inference batch when the caller does not choose.
pub const DEFAULT_TILE_SIZE: usize = 64;
/// Jenks inputs larger than this are subsampled (seeded, uniform).
pub const JENKS_SAMPLE_CAP: usize = 50_000;
/// Seed for the Jenks subsample draw.
const JENKS_SAMPLE_SEED: u64 = 0x6a656e6b; // "jenk"

/// A predicted probability grid. `mask[i]` is true where no prediction was
/// made (nodata cell, window off-grid, or window touching nodata).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    width: usize,
    height: usize,
    cell_size: f64,
    pub prob: Vec<f32>,
    pub mask: Vec<bool>,
}

impl ProbGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Probability at (row, col); None where masked.
    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let i = row * self.width + col;
        (!self.mask[i]).then(|| self.prob[i])
    }

    /// The grid as a single-layer feature stack (for the container format).
    pub fn to_stack(&self) -> Result<FeatureStack> {
        FeatureStack::new(
            self.width,
            self.height,
            self.cell_size,
            DEFAULT_NODATA,
            vec!["susceptibility".to_string()],
            self.prob.clone(),
            self.mask.clone(),
        )
    }

    /// 16-bit PGM preview: nodata = 0, probabilities span 1..=65535.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + 2 * self.prob.len());
        out.extend_from_slice(format!("P5\n{} {}\n65535\n", self.width, self.height).as_bytes());
        for (i, &p) in self.prob.iter().enumerate() {
            let v: u16 = if self.mask[i] {
                0
            } else {
                1 + (p.clamp(0.0, 1.0) as f64 * 65534.0).round() as u16
            };
            out.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Runs the model over every eligible cell of the stack.
///
/// A cell is eligible when it is unmasked, its patch window lies fully
/// inside the grid, and the window contains no nodata cells — exactly the
/// acceptance rule of patch extraction, so the two paths agree bit-for-bit.
/// `tile_size` is the number of cells per inference batch; it never changes
/// the output (each sample's forward pass is independent).
pub fn predict_map(
    model: &Model,
    stack: &FeatureStack,
    standardization: &Standardization,
    tile_size: usize,
) -> Result<ProbGrid> {
    let spec = model.spec();
    let f_count = stack.num_factors();
    if spec.factors != f_count {
        return Err(Error::Config(format!(
            "model expects {} factors but the stack holds {f_count}",
            spec.factors
        )));
    }
    let std_names: Vec<&str> =
        standardization.factors.iter().map(|f| f.name.as_str()).collect();
    let stack_names: Vec<&str> = stack.factors().iter().map(|s| s.as_str()).collect();
    if std_names != stack_names {
        return Err(Error::Config(format!(
            "standardization factor order {std_names:?} does not match the stack {stack_names:?}"
        )));
    }
    let tile = tile_size.max(1);
    let p = spec.patch;
    let (w, h) = (stack.width(), stack.height());
    let off = p / 2;

    // Integral image of the nodata mask: O(1) window-cleanliness checks.
    let mut masked_prefix = vec![0u32; (w + 1) * (h + 1)];
    for r in 0..h {
        for c in 0..w {
            masked_prefix[(r + 1) * (w + 1) + (c + 1)] = masked_prefix[r * (w + 1) + (c + 1)]
                + masked_prefix[(r + 1) * (w + 1) + c]
                - masked_prefix[r * (w + 1) + c]
                + u32::from(stack.is_masked(r, c));
        }
    }
    let window_clean = |top: usize, left: usize| -> bool {
        let (b, r) = (top + p, left + p);
        masked_prefix[b * (w + 1) + r] + masked_prefix[top * (w + 1) + left]
            - masked_prefix[top * (w + 1) + r]
            - masked_prefix[b * (w + 1) + left]
            == 0
    };

    let mut eligible = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if stack.is_masked(row, col) || row < off || col < off {
                continue;
            }
            let (top, left) = (row - off, col - off);
            if top + p > h || left + p > w {
                continue;
            }
            if window_clean(top, left) {
                eligible.push((row, col));
            }
        }
    }

    let mut prob = vec![0.0f32; w * h];
    let mut mask = vec![true; w * h];
    let pp = p * p;
    for chunk in eligible.chunks(tile) {
        let mut x = vec![0.0f32; chunk.len() * f_count * pp];
        for (n, &(row, col)) in chunk.iter().enumerate() {
            let (top, left) = (row - off, col - off);
            for (f, fs) in standardization.factors.iter().enumerate() {
                let layer = stack.layer(f);
                let dst = &mut x[(n * f_count + f) * pp..(n * f_count + f + 1) * pp];
                for dr in 0..p {
                    let src = &layer[(top + dr) * w + left..(top + dr) * w + left + p];
                    for (d, &v) in dst[dr * p..(dr + 1) * p].iter_mut().zip(src.iter()) {
                        *d = standardize_value(v, fs.mean, fs.std);
                    }
                }
            }
        }
        let x = Tensor::from_vec(Shape::new(chunk.len(), f_count, p, p), x)?;
        let mut tape = Tape::inference();
        let pred = model.forward(&mut tape, &x, false)?;
        let pv = pred.values();
        for (n, &(row, col)) in chunk.iter().enumerate() {
            prob[row * w + col] = pv[n];
            mask[row * w + col] = false;
        }
    }
    Ok(ProbGrid { width: w, height: h, cell_size: stack.cell_size(), prob, mask })
}

/// Jenks natural breaks: the `k−1` ascending upper boundaries of an optimal
/// `k`-class partition of `values`, minimizing the total within-class sum
/// of squared deviations (exact Fisher dynamic programming).
pub fn jenks_breaks(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Value("jenks: need at least one class".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("jenks: values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut distinct = 0usize;
    for i in 0..sorted.len() {
        if i == 0 || sorted[i] != sorted[i - 1] {
            distinct += 1;
        }
    }
    if distinct < k {
        return Err(Error::Degenerate(format!(
            "jenks: {k} classes need at least {k} distinct values, got {distinct}"
        )));
    }
    if k == 1 {
        return Ok(Vec::new());
    }
    let n = sorted.len();

    // Prefix sums for O(1) within-class SSD of any sorted range.
    let mut s1 = vec![0.0f64; n + 1];
    let mut s2 = vec![0.0f64; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    // SSD of sorted[a..b] (half-open).
    let ssd = |a: usize, b: usize| -> f64 {
        let m = (b - a) as f64;
        let sum = s1[b] - s1[a];
        (s2[b] - s2[a] - sum * sum / m).max(0.0)
    };

    // dp[i] = best cost of partitioning the first i values into the current
    // number of classes; cut[c][i] records the chosen boundary.
    let mut dp: Vec<f64> = (0..=n).map(|i| if i == 0 { 0.0 } else { ssd(0, i) }).collect();
    let mut cut = vec![vec![0usize; n + 1]; k];
    let mut next = vec![0.0f64; n + 1];
    for c in 2..=k {
        for i in 0..=n {
            if i < c {
                next[i] = 0.0;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut best_j = c - 1;
            for (j, &prev) in dp.iter().enumerate().take(i).skip(c - 1) {
                let cost = prev + ssd(j, i);
                if cost < best {
                    best = cost;
                    best_j = j;
                }
            }
            next[i] = best;
            cut[c - 1][i] = best_j;
        }
        std::mem::swap(&mut dp, &mut next);
    }

    // Backtrack boundary positions; breaks are class upper bounds.
    let mut bounds = vec![0usize; k + 1];
    bounds[k] = n;
    for c in (2..=k).rev() {
        bounds[c - 1] = cut[c - 1][bounds[c]];
    }
    Ok((1..k).map(|c| sorted[bounds[c] - 1]).collect())
}

/// [`jenks_breaks`] on a seeded uniform subsample when `values` exceeds
/// `cap` (the exact DP is quadratic in the input length).
pub fn jenks_breaks_sampled(values: &[f64], k: usize, cap: usize) -> Result<Vec<f64>> {
    if cap == 0 || values.len() <= cap {
        return jenks_breaks(values, k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(JENKS_SAMPLE_SEED);
    let picks = rand::seq::index::sample(&mut rng, values.len(), cap);
    let sample: Vec<f64> = picks.iter().map(|i| values[i]).collect();
    jenks_breaks(&sample, k)
}

/// Assigns classes `1..=k` by right-closed intervals: class `c` covers
/// `(break_{c−1}, break_c]` with `break_0 = −∞` and `break_k = +∞`.
/// Masked cells receive class 0.
pub fn classify(prob: &[f32], mask: &[bool], breaks: &[f64]) -> Result<Vec<u8>> {
    if prob.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "classify: {} probabilities vs {} mask entries",
            prob.len(),
            mask.len()
        )));
    }
    if breaks.iter().any(|b| !b.is_finite()) {
        return Err(Error::Value("classify: breaks must be finite".into()));
    }
    for w in breaks.windows(2) {
        if w[0] > w[1] {
            return Err(Error::Value(format!(
                "classify: breaks must ascend, got {} before {}",
                w[0], w[1]
            )));
        }
    }
    Ok(prob
        .iter()
        .zip(mask.iter())
        .map(|(&p, &m)| {
            if m {
                0
            } else {
                (breaks.iter().filter(|&&b| p as f64 > b).count() + 1) as u8
            }
        })
        .collect())
}

/// Percent of unmasked cells in each class `1..=k`.
pub fn area_stats(classes: &[u8], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for &c in classes {
        if c == 0 {
            continue;
        }
        if c as usize > k {
            return Err(Error::Value(format!("class {c} exceeds the {k}-class scheme")));
        }
        counts[c as usize - 1] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InsufficientData("no classified cells".into()));
    }
    Ok(counts.iter().map(|&n| 100.0 * n as f64 / total as f64).collect())
}

/// Percent of flood events (label 1) in each class, over events that fall
/// on classified cells.
pub fn event_stats(
    classes: &[u8],
    width: usize,
    k: usize,
    inventory: &[InventoryPoint],
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for pt in inventory.iter().filter(|p| p.label == 1) {
        let c = *classes
            .get(pt.row * width + pt.col)
            .ok_or_else(|| Error::Value(format!("point ({}, {}) outside the grid", pt.row, pt.col)))?;
        if c == 0 {
            continue; // unpredicted cell: excluded from the denominator
        }
        if c as usize > k {
            return Err(Error::Value(format!("class {c} exceeds the {k}-class scheme")));
        }
        counts[c as usize - 1] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InsufficientData(
            "no flood events fall on classified cells".into(),
        ));
    }
    Ok(counts.iter().map(|&n| 100.0 * n as f64 / total as f64).collect())
}

/// The five standard class names, lowest susceptibility first.
pub const CLASS_NAMES: [&str; 5] = ["very_low", "low", "moderate", "high", "very_high"];

/// Classified susceptibility map with its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityMap {
    pub grid: ProbGrid,
    pub breaks: Vec<f64>,
    pub classes: Vec<u8>,
    pub class_area_pct: Vec<f64>,
    pub event_pct: Vec<f64>,
}

/// JSON shape of the per-class statistics table.
#[derive(Debug, Serialize, Deserialize)]
pub struct MapStatsJson {
    pub breaks: Vec<f64>,
    pub classes: Vec<ClassStatsJson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassStatsJson {
    pub class: String,
    pub area_pct: f64,
    pub event_pct: f64,
}

impl SusceptibilityMap {
    /// Classifies a probability grid into `k` Jenks classes and computes
    /// area/event statistics from `inventory`.
    pub fn build(grid: ProbGrid, k: usize, inventory: &[InventoryPoint]) -> Result<SusceptibilityMap> {
        let unmasked: Vec<f64> = grid
            .prob
            .iter()
            .zip(grid.mask.iter())
            .filter(|(_, &m)| !m)
            .map(|(&p, _)| p as f64)
            .collect();
        if unmasked.is_empty() {
            return Err(Error::InsufficientData(
                "the probability grid has no predicted cells".into(),
            ));
        }
        let breaks = jenks_breaks_sampled(&unmasked, k, JENKS_SAMPLE_CAP)?;
        let classes = classify(&grid.prob, &grid.mask, &breaks)?;
        let class_area_pct = area_stats(&classes, k)?;
        let event_pct = event_stats(&classes, grid.width, k, inventory)?;
        Ok(SusceptibilityMap { grid, breaks, classes, class_area_pct, event_pct })
    }

    pub fn k(&self) -> usize {
        self.class_area_pct.len()
    }

    /// Statistics as pretty JSON (class names padded or numbered past 5).
    pub fn stats_json(&self) -> Result<String> {
        let classes = (0..self.k())
            .map(|c| ClassStatsJson {
                class: CLASS_NAMES
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class_{}", c + 1)),
                area_pct: self.class_area_pct[c],
                event_pct: self.event_pct[c],
            })
            .collect();
        let doc = MapStatsJson { breaks: self.breaks.clone(), classes };
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Format(format!("map stats serialization failed: {e}")))
    }

    /// Class grid as CSV rows of integers (0 = no prediction).
    pub fn classes_csv(&self) -> String {
        let mut out = String::new();
        for row in self.classes.chunks(self.grid.width) {
            let mut first = true;
            for &c in row {
                if !first {
                    out.push(',');
                }
                out.push_str(&c.to_string());
                first = false;
            }
            out.push('\n');
        }
        out
    }

    /// 8-bit PGM preview of the class grid with a fixed gray ramp
    /// (class c → 51·c, nodata → 0).
    pub fn write_class_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.classes.len());
        out.extend_from_slice(
            format!("P5\n{} {}\n255\n", self.grid.width, self.grid.height).as_bytes(),
        );
        for &c in &self.classes {
            out.push(51u8.saturating_mul(c));
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::backbones::{BackboneKind, BackboneSpec};
    use crate::data::{
        extract_patches, synth_generate, PatchDataset, PointSource, RelevanceProfile, Split,
        DEFAULT_CELL_SIZE, DEFAULT_SPLIT_RATIOS,
    };
    use crate::train::{train, TrainConfig};

    use super::*;

    // ---- Jenks ----

    #[test]
    fn hand_case_splits_the_two_clusters() {
        let breaks = jenks_breaks(&[1.0, 2.0, 3.0, 10.0, 11.0, 12.0], 2).unwrap();
        assert_eq!(breaks, vec![3.0]);
    }

    #[test]
    fn degenerate_inputs_are_rejected_with_the_count() {
        assert!(jenks_breaks(&[], 1).is_err());
        match jenks_breaks(&[2.0, 2.0, 2.0], 2) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("got 1"), "{msg}"),
            other => panic!("expected Degenerate, got {other:?}"),
        }
        match jenks_breaks(&[1.0, 2.0, 2.0, 1.0], 3) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("got 2"), "{msg}"),
            other => panic!("expected Degenerate, got {other:?}"),
        }
    }

    #[test]
    fn one_class_means_no_breaks() {
        assert_eq!(jenks_breaks(&[5.0, 1.0, 3.0], 1).unwrap(), Vec::<f64>::new());
    }

    /// Total within-class SSD of a sorted partition given boundary indices
    /// (class ends, exclusive).
    fn partition_ssd(sorted: &[f64], bounds: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut start = 0;
        for &end in bounds {
            let m = (end - start) as f64;
            let mean = sorted[start..end].iter().sum::<f64>() / m;
            total += sorted[start..end].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            start = end;
        }
        total
    }

    /// Exhaustive minimum over all boundary placements.
    fn exhaustive_min_ssd(sorted: &[f64], k: usize) -> f64 {
        fn rec(sorted: &[f64], k_left: usize, start: usize, bounds: &mut Vec<usize>, best: &mut f64) {
            let n = sorted.len();
            if k_left == 1 {
                bounds.push(n);
                let cost = partition_ssd(sorted, bounds);
                if cost < *best {
                    *best = cost;
                }
                bounds.pop();
                return;
            }
            for end in start + 1..=n - (k_left - 1) {
                bounds.push(end);
                rec(sorted, k_left - 1, end, bounds, best);
                bounds.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(sorted, k, 0, &mut Vec::new(), &mut best);
        best
    }

    /// SSD of the partition the returned breaks induce on the sorted data.
    fn breaks_ssd(sorted: &[f64], breaks: &[f64]) -> f64 {
        let mut bounds: Vec<usize> = breaks
            .iter()
            .map(|&b| sorted.partition_point(|&v| v <= b))
            .collect();
        bounds.push(sorted.len());
        partition_ssd(sorted, &bounds)
    }

    #[test]
    fn dp_matches_exhaustive_enumeration_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            let n = rng.random_range(5..=25);
            let k = rng.random_range(1..=5.min(n));
            // Coarse values produce duplicates; retry until k distinct.
            let values: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..40) as f64) / 4.0).collect();
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let distinct = sorted.windows(2).filter(|w| w[0] != w[1]).count() + 1;
            if distinct < k {
                continue;
            }
            let breaks = jenks_breaks(&values, k).unwrap();
            assert_eq!(breaks.len(), k - 1);
            for w in breaks.windows(2) {
                assert!(w[0] <= w[1], "case {case}: breaks not ascending: {breaks:?}");
            }
            let dp_cost = breaks_ssd(&sorted, &breaks);
            let oracle = exhaustive_min_ssd(&sorted, k);
            assert_eq!(
                dp_cost, oracle,
                "case {case}: DP SSD {dp_cost} vs exhaustive {oracle} (n={n}, k={k})"
            );
        }
    }

    #[test]
    fn sampled_jenks_is_exact_below_the_cap_and_seeded_above() {
        let values: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(
            jenks_breaks_sampled(&values, 4, 1000).unwrap(),
            jenks_breaks(&values, 4).unwrap()
        );
        let a = jenks_breaks_sampled(&values, 4, 50).unwrap();
        let b = jenks_breaks_sampled(&values, 4, 50).unwrap();
        assert_eq!(a, b, "subsampling must be seeded/deterministic");
    }

    // ---- classify / stats ----

    #[test]
    fn intervals_are_right_closed() {
        // Exactly representable values, so f32 → f64 promotion is lossless.
        let breaks = vec![0.25, 0.5, 0.75];
        let prob = [0.125f32, 0.25, 0.3125, 0.5, 0.625, 0.75, 0.875];
        let mask = vec![false; prob.len()];
        let classes = classify(&prob, &mask, &breaks).unwrap();
        assert_eq!(classes, vec![1, 1, 2, 2, 3, 3, 4]);
    }

    #[test]
    fn masked_cells_get_class_zero_and_bad_breaks_error() {
        let classes = classify(&[0.3, 0.9], &[true, false], &[0.5]).unwrap();
        assert_eq!(classes, vec![0, 2]);
        assert!(matches!(
            classify(&[0.3], &[false], &[0.8, 0.2]),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn single_class_grid_is_one_hundred_percent() {
        let classes = vec![3u8; 10];
        let stats = area_stats(&classes, 5).unwrap();
        assert_eq!(stats, vec![0.0, 0.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn area_percentages_sum_to_one_hundred() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes: Vec<u8> =
            (0..997).map(|_| rng.random_range(0..=5) as u8).collect();
        if let Ok(stats) = area_stats(&classes, 5) {
            let total: f64 = stats.iter().sum();
            assert!((total - 100.0).abs() < 1e-6, "total {total}");
        }
    }

    #[test]
    fn event_stats_skip_unclassified_cells() {
        // 2×3 grid; classes 0 (unpredicted) at cell (0,0).
        let classes = vec![0u8, 1, 2, 3, 4, 5];
        let pt = |row, col, label| InventoryPoint {
            row,
            col,
            label,
            source: PointSource::Recorded,
        };
        let inventory = vec![
            pt(0, 0, 1), // unpredicted: excluded
            pt(0, 1, 1), // class 1
            pt(1, 0, 1), // class 3
            pt(1, 2, 1), // class 5
            pt(0, 2, 0), // non-flood: ignored
        ];
        let stats = event_stats(&classes, 3, 5, &inventory).unwrap();
        let third = 100.0 / 3.0;
        assert!((stats[0] - third).abs() < 1e-12);
        assert!((stats[2] - third).abs() < 1e-12);
        assert!((stats[4] - third).abs() < 1e-12);
        assert_eq!(stats[1], 0.0);
        assert_eq!(stats[3], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

        /// Higher probability never maps to a lower class.
        #[test]
        fn classification_is_monotone_in_probability(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let mask = vec![false; n];
            let values: Vec<f64> = prob.iter().map(|&p| p as f64).collect();
            let k = rng.random_range(2..=5);
            let breaks = match jenks_breaks(&values, k) {
                Ok(b) => b,
                Err(_) => return Ok(()), // not enough distinct values
            };
            let classes = classify(&prob, &mask, &breaks).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| prob[a].partial_cmp(&prob[b]).unwrap());
            for w in order.windows(2) {
                prop_assert!(classes[w[0]] <= classes[w[1]]);
            }
            // Totality: every cell got a class in 1..=k.
            prop_assert!(classes.iter().all(|&c| (1..=k as u8).contains(&c)));
        }
    }

    // ---- predict_map ----

    /// Fixture: synthetic stack + standardized patch dataset + tiny spec.
    fn map_fixture(patch: usize) -> (crate::data::FeatureStack, Vec<InventoryPoint>, PatchDataset, BackboneSpec) {
        let (stack, inventory) =
            synth_generate(13, 48, 48, 40, &RelevanceProfile::default()).unwrap();
        let mut ds = extract_patches(&stack, &inventory, patch).unwrap().dataset;
        ds.split(DEFAULT_SPLIT_RATIOS, 13, true).unwrap();
        ds.standardize().unwrap();
        let mut spec = BackboneSpec::desk_default(BackboneKind::Resnet18, 16, patch);
        spec.base_width = 8;
        spec.depth_scale = 0.25;
        (stack, inventory, ds, spec)
    }

    #[test]
    fn map_equals_the_patch_path_at_inventory_cells() {
        let (stack, _inventory, ds, spec) = map_fixture(8);
        let model = crate::backbones::Model::build(&spec, 17).unwrap();
        let grid = predict_map(&model, &stack, ds.standardization().unwrap(), 32).unwrap();
        // Forward the dataset's own patches (already standardized).
        for i in 0..ds.n() {
            let (x, _) = ds.batch(&[i]).unwrap();
            let mut tape = Tape::inference();
            let pred = model.forward(&mut tape, &x, false).unwrap();
            let want = pred.values()[0];
            let pt = ds.point(i);
            let got = grid.get(pt.row, pt.col).expect("inventory cell predicted");
            assert_eq!(got, want, "cell ({}, {})", pt.row, pt.col);
        }
    }

    #[test]
    fn tiling_does_not_change_the_grid() {
        let (stack, _inventory, ds, spec) = map_fixture(8);
        let model = crate::backbones::Model::build(&spec, 3).unwrap();
        let std = ds.standardization().unwrap();
        let a = predict_map(&model, &stack, std, 1).unwrap();
        let b = predict_map(&model, &stack, std, 64).unwrap();
        let c = predict_map(&model, &stack, std, usize::MAX).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn constant_stack_predicts_a_constant_probability() {
        use crate::data::FeatureStack;
        let (w, h) = (16usize, 16usize);
        let names: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
        let mut data = Vec::new();
        for f in 0..3 {
            data.extend(std::iter::repeat_n(f as f32 * 0.5, w * h));
        }
        let stack = FeatureStack::new(
            w,
            h,
            DEFAULT_CELL_SIZE,
            crate::data::DEFAULT_NODATA,
            names.clone(),
            data,
            vec![false; w * h],
        )
        .unwrap();
        let standardization = Standardization {
            factors: names
                .iter()
                .map(|n| crate::data::FactorStats { name: n.clone(), mean: 0.25, std: 1.0 })
                .collect(),
        };
        let mut spec = BackboneSpec::desk_default(BackboneKind::Resnet18, 3, 8);
        spec.base_width = 8;
        spec.depth_scale = 0.25;
        let model = crate::backbones::Model::build(&spec, 5).unwrap();
        let grid = predict_map(&model, &stack, &standardization, 16).unwrap();
        let mut seen = None;
        for r in 0..h {
            for c in 0..w {
                if let Some(p) = grid.get(r, c) {
                    match seen {
                        None => seen = Some(p),
                        Some(v) => assert_eq!(p, v, "cell ({r}, {c})"),
                    }
                }
            }
        }
        assert!(seen.is_some(), "some interior cells must be predicted");
        // Border cells (window off-grid) are masked.
        assert_eq!(grid.get(0, 0), None);
    }

    #[test]
    fn factor_mismatch_is_a_config_error() {
        let (stack, _inventory, ds, spec) = map_fixture(8);
        let model = crate::backbones::Model::build(&spec, 3).unwrap();
        let mut wrong = ds.standardization().unwrap().clone();
        wrong.factors.swap(0, 1);
        assert!(matches!(
            predict_map(&model, &stack, &wrong, 8),
            Err(Error::Config(_))
        ));
    }

    // ---- end-to-end map + stats ----

    #[test]
    fn trained_map_concentrates_events_in_the_high_classes() {
        let (stack, inventory) =
            synth_generate(21, 48, 48, 40, &RelevanceProfile::default()).unwrap();
        let mut ds = extract_patches(&stack, &inventory, 8).unwrap().dataset;
        ds.split(DEFAULT_SPLIT_RATIOS, 1, true).unwrap();
        ds.standardize().unwrap();
        let mut spec = BackboneSpec::desk_default(BackboneKind::Resnet18, ds.num_factors(), 8);
        spec.base_width = 8;
        spec.depth_scale = 0.5;
        let model = crate::backbones::Model::build(&spec, 1).unwrap();
        let cfg = TrainConfig { max_epochs: 16, seed: 1, ..TrainConfig::default() };
        train(&model, &ds, &cfg).unwrap();
        // Sanity: the model did learn the fixture.
        let fit = crate::train::evaluate_split(&model, &ds, Split::Train, 4).unwrap();
        assert!(fit.accuracy >= 0.75, "train accuracy {}", fit.accuracy);

        let grid = predict_map(&model, &stack, ds.standardization().unwrap(), 64).unwrap();
        let map = SusceptibilityMap::build(grid, 5, &inventory).unwrap();
        assert_eq!(map.breaks.len(), 4);
        let area_total: f64 = map.class_area_pct.iter().sum();
        let event_total: f64 = map.event_pct.iter().sum();
        assert!((area_total - 100.0).abs() < 1e-6);
        assert!((event_total - 100.0).abs() < 1e-6);
        // Flood events are over-represented in the top two classes.
        let event_high = map.event_pct[3] + map.event_pct[4];
        let area_high = map.class_area_pct[3] + map.class_area_pct[4];
        assert!(
            event_high > area_high,
            "events in high classes {event_high}% vs area share {area_high}%"
        );
    }

    #[test]
    fn writers_produce_valid_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (stack, inventory, ds, spec) = map_fixture(8);
        let model = crate::backbones::Model::build(&spec, 2).unwrap();
        let grid = predict_map(&model, &stack, ds.standardization().unwrap(), 64).unwrap();
        let map = SusceptibilityMap::build(grid, 5, &inventory).unwrap();

        // FFSTACK round trip of the probability layer.
        let stack_path = dir.path().join("prob.ffstack");
        map.grid.to_stack().unwrap().save(&stack_path).unwrap();
        let loaded = crate::data::FeatureStack::load(&stack_path).unwrap();
        assert_eq!(loaded.factors(), &["susceptibility".to_string()]);
        for r in 0..map.grid.height() {
            for c in 0..map.grid.width() {
                match map.grid.get(r, c) {
                    Some(p) => assert_eq!(loaded.get(0, r, c), p),
                    None => assert!(loaded.is_masked(r, c)),
                }
            }
        }

        // PGM previews: header + payload size.
        let pgm16 = dir.path().join("prob.pgm");
        map.grid.write_pgm(&pgm16).unwrap();
        let bytes = std::fs::read(&pgm16).unwrap();
        let header = format!("P5\n{} {}\n65535\n", map.grid.width(), map.grid.height());
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(
            bytes.len(),
            header.len() + 2 * map.grid.width() * map.grid.height()
        );

        let pgm8 = dir.path().join("classes.pgm");
        map.write_class_pgm(&pgm8).unwrap();
        let bytes = std::fs::read(&pgm8).unwrap();
        assert!(bytes.ends_with(&map.classes.iter().map(|&c| 51 * c).collect::<Vec<u8>>()));

        // Class CSV: H rows × W integer columns.
        let csv = map.classes_csv();
        assert_eq!(csv.lines().count(), map.grid.height());
        assert!(csv
            .lines()
            .all(|l| l.split(',').count() == map.grid.width()));

        // Stats JSON parses back and mirrors the two-column table.
        let json = map.stats_json().unwrap();
        let parsed: MapStatsJson = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.classes.len(), 5);
        assert_eq!(parsed.classes[4].class, "very_high");
        assert_eq!(parsed.breaks.len(), 4);
    }
}
