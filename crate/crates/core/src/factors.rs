//! Factor optimization: Pearson correlation screening and variance-inflation
//! multicollinearity analysis.
//!
//! Both tests run over a [`FactorTable`] — factor values sampled either at
//! the inventory points (the modeling population, the default) or over every
//! unmasked raster cell. The pipeline reports correlated pairs (|r| at or
//! above the threshold) and inflated factors (VIF above the threshold) but
//! never drops anything itself; the caller owns the retention decision.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureStack, InventoryPoint};
use crate::error::{Error, Result};

/// Pairwise correlation considered "strong" when reached or exceeded.
pub const DEFAULT_CORR_THRESHOLD: f64 = 0.7;
/// VIF above this value flags a multicollinearity problem.
pub const DEFAULT_VIF_THRESHOLD: f64 = 5.0;

/// An n-samples × F-factors value matrix with factor names.
#[derive(Debug, Clone)]
pub struct FactorTable {
    names: Vec<String>,
    /// n·F values, sample-major.
    values: Vec<f64>,
    n: usize,
}

impl FactorTable {
    /// Validates and wraps a sample-major matrix.
    pub fn new(names: Vec<String>, values: Vec<f64>, n: usize) -> Result<FactorTable> {
        if names.is_empty() {
            return Err(Error::Value("factor table needs at least one factor".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::Value(format!("duplicate factor name {name:?}")));
            }
        }
        if values.len() != n * names.len() {
            return Err(Error::Dimension(format!(
                "factor table holds {} values, expected {n}·{} = {}",
                values.len(),
                names.len(),
                n * names.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite entry for factor {:?} at sample {}",
                names[bad % names.len()],
                bad / names.len()
            )));
        }
        Ok(FactorTable { names, values, n })
    }

    /// Samples every factor at the inventory points (the default population
    /// for the screening statistics).
    pub fn from_points(stack: &FeatureStack, points: &[InventoryPoint]) -> Result<FactorTable> {
        let f_count = stack.num_factors();
        let mut values = Vec::with_capacity(points.len() * f_count);
        for p in points {
            if p.row >= stack.height() || p.col >= stack.width() {
                return Err(Error::Value(format!(
                    "inventory point ({}, {}) outside the grid",
                    p.row, p.col
                )));
            }
            if stack.is_masked(p.row, p.col) {
                return Err(Error::Value(format!(
                    "inventory point ({}, {}) sits on a nodata cell",
                    p.row, p.col
                )));
            }
            for f in 0..f_count {
                values.push(stack.get(f, p.row, p.col) as f64);
            }
        }
        FactorTable::new(stack.factors().to_vec(), values, points.len())
    }

    /// Samples every factor at every unmasked cell (full-raster mode).
    pub fn from_stack(stack: &FeatureStack) -> Result<FactorTable> {
        let f_count = stack.num_factors();
        let cells: Vec<usize> = (0..stack.mask().len())
            .filter(|&i| !stack.mask()[i])
            .collect();
        let mut values = Vec::with_capacity(cells.len() * f_count);
        for &cell in &cells {
            let (r, c) = (cell / stack.width(), cell % stack.width());
            for f in 0..f_count {
                values.push(stack.get(f, r, c) as f64);
            }
        }
        FactorTable::new(stack.factors().to_vec(), values, cells.len())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_factors(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn get(&self, sample: usize, factor: usize) -> f64 {
        self.values[sample * self.names.len() + factor]
    }

    /// One factor's values across samples.
    fn column(&self, factor: usize) -> Vec<f64> {
        (0..self.n).map(|s| self.get(s, factor)).collect()
    }
}

/// Symmetric F×F correlation matrix with a unit diagonal. Zero-variance
/// factors are flagged `undefined` (their off-diagonal entries read 0)
/// instead of poisoning the matrix with NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonMatrix {
    f: usize,
    values: Vec<f64>,
    undefined: Vec<bool>,
}

impl PearsonMatrix {
    pub fn size(&self) -> usize {
        self.f
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.f + j]
    }

    /// Whether factor `i` had zero variance, making its correlations
    /// undefined.
    pub fn is_undefined(&self, i: usize) -> bool {
        self.undefined[i]
    }
}

/// Product-moment correlation of every factor pair.
pub fn pearson_matrix(table: &FactorTable) -> Result<PearsonMatrix> {
    let f_count = table.num_factors();
    let n = table.n();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "pearson correlation needs at least 2 samples, got {n}"
        )));
    }

    // Center once; reuse deviations for every pair.
    let mut deviations = Vec::with_capacity(f_count);
    let mut sum_sq = Vec::with_capacity(f_count);
    let mut undefined = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let col = table.column(f);
        let mean = col.iter().sum::<f64>() / n as f64;
        let dev: Vec<f64> = col.iter().map(|&v| v - mean).collect();
        let ss: f64 = dev.iter().map(|&d| d * d).sum();
        // Zero variance relative to the factor's own scale.
        undefined.push(ss.sqrt() <= 1e-12 * (1.0 + mean.abs()) * (n as f64).sqrt());
        deviations.push(dev);
        sum_sq.push(ss);
    }

    let mut values = vec![0.0f64; f_count * f_count];
    for i in 0..f_count {
        values[i * f_count + i] = 1.0;
        for j in i + 1..f_count {
            if undefined[i] || undefined[j] {
                continue; // entry stays 0, flagged via `undefined`
            }
            let cross: f64 =
                deviations[i].iter().zip(deviations[j].iter()).map(|(&a, &b)| a * b).sum();
            let r = (cross / (sum_sq[i] * sum_sq[j]).sqrt()).clamp(-1.0, 1.0);
            values[i * f_count + j] = r;
            values[j * f_count + i] = r;
        }
    }
    Ok(PearsonMatrix { f: f_count, values, undefined })
}

/// Variance inflation factor per factor: VIF_j = 1/(1−R²_j), with R²_j from
/// the least-squares regression (with intercept) of factor j on all others.
/// Solved by normal equations with a ridge fallback at near-singularity;
/// R² ≥ 1−1e-12 is reported as +∞ (exact collinearity). A zero-variance
/// factor is +∞ too (collinear with the intercept).
pub fn vif(table: &FactorTable) -> Result<Vec<f64>> {
    let f_count = table.num_factors();
    let n = table.n();
    if f_count < 2 {
        return Err(Error::Value("VIF needs at least two factors".into()));
    }
    if n <= f_count {
        return Err(Error::InsufficientData(format!(
            "VIF needs more samples than factors, got n = {n} for {f_count} factors"
        )));
    }

    // Center every column; regression on centered predictors without an
    // explicit intercept column has the same R² as with one.
    let mut centered = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let col = table.column(f);
        let mean = col.iter().sum::<f64>() / n as f64;
        centered.push(col.iter().map(|&v| v - mean).collect::<Vec<f64>>());
    }

    let mut out = Vec::with_capacity(f_count);
    for j in 0..f_count {
        let y = &centered[j];
        let sst: f64 = y.iter().map(|&v| v * v).sum();
        if sst.sqrt() <= 1e-12 * (n as f64).sqrt() {
            out.push(f64::INFINITY);
            continue;
        }
        let predictors: Vec<&Vec<f64>> =
            (0..f_count).filter(|&k| k != j).map(|k| &centered[k]).collect();
        let p = predictors.len();

        // Normal equations: gram = XᵀX, rhs = Xᵀy.
        let mut gram = vec![0.0f64; p * p];
        let mut rhs = vec![0.0f64; p];
        for a in 0..p {
            for b in a..p {
                let dot: f64 =
                    predictors[a].iter().zip(predictors[b].iter()).map(|(&x, &z)| x * z).sum();
                gram[a * p + b] = dot;
                gram[b * p + a] = dot;
            }
            rhs[a] = predictors[a].iter().zip(y.iter()).map(|(&x, &z)| x * z).sum();
        }

        let beta = match cholesky_solve(&gram, &rhs, p) {
            Some(beta) => beta,
            None => {
                // Near-singular design: ridge fallback. The penalty is tiny
                // relative to the Gram's scale, so exact collinearity still
                // drives R² within 1e-12 of 1 and gets the +∞ flag.
                let scale =
                    (0..p).map(|a| gram[a * p + a]).sum::<f64>() / p as f64;
                let mut ridged = gram.clone();
                for a in 0..p {
                    ridged[a * p + a] += 1e-8 * scale.max(f64::MIN_POSITIVE);
                }
                cholesky_solve(&ridged, &rhs, p).ok_or_else(|| {
                    Error::Degenerate(
                        "VIF normal equations unsolvable even with ridge penalty".into(),
                    )
                })?
            }
        };

        // Explicit residual sum of squares (robust under the ridge fallback).
        let mut sse = 0.0f64;
        for s in 0..n {
            let mut fit = 0.0f64;
            for (a, pred) in predictors.iter().enumerate() {
                fit += beta[a] * pred[s];
            }
            let r = y[s] - fit;
            sse += r * r;
        }
        let r2 = (1.0 - sse / sst).clamp(0.0, 1.0);
        if r2 >= 1.0 - 1e-12 {
            out.push(f64::INFINITY);
        } else {
            out.push(1.0 / (1.0 - r2));
        }
    }
    Ok(out)
}

/// Solves the symmetric positive-definite system `m·x = b` by Cholesky
/// decomposition. Returns None when a pivot falls below the numerical
/// positive-definiteness floor (near-singular matrix).
fn cholesky_solve(m: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let max_diag = (0..p).map(|i| m[i * p + i]).fold(0.0f64, f64::max);
    let floor = max_diag.max(f64::MIN_POSITIVE) * 1e-12;
    let mut l = vec![0.0f64; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut sum = m[i * p + j];
            for k in 0..j {
                sum -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if sum <= floor {
                    return None;
                }
                l[i * p + i] = sum.sqrt();
            } else {
                l[i * p + j] = sum / l[j * p + j];
            }
        }
    }
    // Forward then back substitution.
    let mut z = vec![0.0f64; p];
    for i in 0..p {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * p + k] * z[k];
        }
        z[i] = sum / l[i * p + i];
    }
    let mut x = vec![0.0f64; p];
    for i in (0..p).rev() {
        let mut sum = z[i];
        for k in i + 1..p {
            sum -= l[k * p + i] * x[k];
        }
        x[i] = sum / l[i * p + i];
    }
    Some(x)
}

/// Per-factor screening outcome. `retained` records the decision the
/// thresholds imply; nothing is dropped automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorFlag {
    pub name: String,
    /// None encodes an infinite VIF (exact collinearity).
    pub vif: Option<f64>,
    pub flagged_correlation: bool,
    pub flagged_vif: bool,
    pub retained: bool,
    /// Partners with |r| at or above the correlation threshold.
    pub correlated_with: Vec<String>,
}

/// Full screening report: matrix, VIFs, flags, and the thresholds used.
#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub names: Vec<String>,
    pub pearson: PearsonMatrix,
    pub vif: Vec<f64>,
    pub flags: Vec<FactorFlag>,
    pub corr_threshold: f64,
    pub vif_threshold: f64,
}

/// JSON shape of the flags report.
#[derive(Debug, Serialize, Deserialize)]
pub struct FlagsJson {
    pub corr_threshold: f64,
    pub vif_threshold: f64,
    pub factors: Vec<FactorFlag>,
}

impl OptimizationReport {
    /// The correlation matrix as CSV: header row of names, one row per
    /// factor. Undefined entries (zero-variance factors) are left empty.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("factor");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.names.len() {
            out.push_str(&self.names[i]);
            for j in 0..self.names.len() {
                out.push(',');
                if i != j && (self.pearson.is_undefined(i) || self.pearson.is_undefined(j)) {
                    // empty cell: correlation undefined
                } else {
                    out.push_str(&format!("{:.6}", self.pearson.get(i, j)));
                }
            }
            out.push('\n');
        }
        out
    }

    /// The flags report as pretty JSON.
    pub fn flags_json(&self) -> Result<String> {
        let doc = FlagsJson {
            corr_threshold: self.corr_threshold,
            vif_threshold: self.vif_threshold,
            factors: self.flags.clone(),
        };
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Format(format!("flags serialization failed: {e}")))
    }
}

/// Derives per-factor flags from the two screening statistics. A pair is
/// flagged at |r| ≥ corr_threshold; a factor is flagged at VIF strictly
/// above vif_threshold (so the boundary value itself passes). Undefined
/// correlations count as flagged (a zero-variance factor needs attention).
pub fn flag_factors(
    names: &[String],
    pearson: &PearsonMatrix,
    vif_values: &[f64],
    corr_threshold: f64,
    vif_threshold: f64,
) -> Vec<FactorFlag> {
    let f_count = names.len();
    let mut flags = Vec::with_capacity(f_count);
    for i in 0..f_count {
        let mut partners = Vec::new();
        for (j, other) in names.iter().enumerate() {
            if j != i
                && !pearson.is_undefined(i)
                && !pearson.is_undefined(j)
                && pearson.get(i, j).abs() >= corr_threshold
            {
                partners.push(other.clone());
            }
        }
        let flagged_correlation = !partners.is_empty() || pearson.is_undefined(i);
        let flagged_vif = vif_values[i] > vif_threshold;
        flags.push(FactorFlag {
            name: names[i].clone(),
            vif: if vif_values[i].is_finite() { Some(vif_values[i]) } else { None },
            flagged_correlation,
            flagged_vif,
            retained: !flagged_correlation && !flagged_vif,
            correlated_with: partners,
        });
    }
    flags
}

/// Runs both screening tests and assembles the report.
pub fn optimize(
    table: &FactorTable,
    corr_threshold: f64,
    vif_threshold: f64,
) -> Result<OptimizationReport> {
    if !(corr_threshold.is_finite() && corr_threshold > 0.0) {
        return Err(Error::Value(format!(
            "correlation threshold must be positive, got {corr_threshold}"
        )));
    }
    if !(vif_threshold.is_finite() && vif_threshold >= 1.0) {
        return Err(Error::Value(format!(
            "VIF threshold must be at least 1, got {vif_threshold}"
        )));
    }
    let pearson = pearson_matrix(table)?;
    let vif_values = vif(table)?;
    let flags = flag_factors(table.names(), &pearson, &vif_values, corr_threshold, vif_threshold);
    Ok(OptimizationReport {
        names: table.names().to_vec(),
        pearson,
        vif: vif_values,
        flags,
        corr_threshold,
        vif_threshold,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn table(names: &[&str], columns: &[Vec<f64>]) -> FactorTable {
        let n = columns[0].len();
        let mut values = Vec::with_capacity(n * columns.len());
        for s in 0..n {
            for col in columns {
                values.push(col[s]);
            }
        }
        FactorTable::new(names.iter().map(|s| s.to_string()).collect(), values, n).unwrap()
    }

    // ---- Pearson ----

    #[test]
    fn self_correlation_is_exactly_one() {
        let t = table(&["a", "b"], &[vec![1.0, 2.0, 5.0, 3.0], vec![0.0, 1.0, 0.5, 2.0]]);
        let m = pearson_matrix(&t).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn negation_correlates_to_minus_one() {
        let x = vec![1.0, 2.0, 5.0, 3.0, -1.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let t = table(&["x", "neg"], &[x, neg]);
        let m = pearson_matrix(&t).unwrap();
        assert!((m.get(0, 1) + 1.0).abs() < 1e-12, "r = {}", m.get(0, 1));
    }

    #[test]
    fn hand_oracle_pair() {
        // x=[1,2,3,4], y=[1,2,2,4]: Σdxdy = 4.5, Σdx² = 5, Σdy² = 4.75,
        // r = 4.5/√23.75 = 0.923380…
        let t = table(&["x", "y"], &[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 2.0, 4.0]]);
        let m = pearson_matrix(&t).unwrap();
        assert!((m.get(0, 1) - 0.923380).abs() < 1e-6, "r = {}", m.get(0, 1));
    }

    #[test]
    fn zero_variance_factor_is_flagged_not_nan() {
        let t = table(
            &["flat", "x"],
            &[vec![3.0, 3.0, 3.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]],
        );
        let m = pearson_matrix(&t).unwrap();
        assert!(m.is_undefined(0));
        assert!(!m.is_undefined(1));
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!(m.get(i, j).is_finite());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

        #[test]
        fn pearson_matrix_is_symmetric_unit_diagonal_bounded(
            seed in 0u64..500,
            n in 3usize..40,
            f_count in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let columns: Vec<Vec<f64>> = (0..f_count)
                .map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            let names: Vec<String> = (0..f_count).map(|i| format!("f{i}")).collect();
            let t = table(&names.iter().map(|s| s.as_str()).collect::<Vec<_>>(), &columns);
            let m = pearson_matrix(&t).unwrap();
            for i in 0..f_count {
                prop_assert_eq!(m.get(i, i), 1.0);
                for j in 0..f_count {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }

        /// VIF is invariant under affine rescaling of any single factor.
        #[test]
        fn vif_ignores_affine_rescaling(
            seed in 0u64..200,
            scale in prop::sample::select(vec![0.03f64, 0.8, 3.7, 120.0]),
            shift in -50.0f64..50.0,
            target in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..n)
                .map(|i| 0.6 * a[i] - 0.4 * b[i] + rng.random_range(-0.5..0.5))
                .collect();
            let mut columns = vec![a, b, c];
            let base = vif(&table(&["a", "b", "c"], &columns)).unwrap();
            for v in &mut columns[target] {
                *v = *v * scale + shift;
            }
            let scaled = vif(&table(&["a", "b", "c"], &columns)).unwrap();
            for (x, y) in base.iter().zip(scaled.iter()) {
                prop_assert!(((x - y) / x).abs() < 1e-9, "VIF moved: {x} vs {y}");
            }
        }
    }

    // ---- VIF ----

    #[test]
    fn orthogonal_centered_factors_have_unit_vif() {
        // Mutually orthogonal, zero-mean ±1 columns (Hadamard pattern).
        let h = [
            [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
        ];
        let t = table(&["a", "b", "c"], &[h[0].to_vec(), h[1].to_vec(), h[2].to_vec()]);
        for v in vif(&t).unwrap() {
            assert!((v - 1.0).abs() < 1e-9, "VIF = {v}");
        }
    }

    #[test]
    fn exact_duplicate_factors_are_both_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
        let z: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = table(&["x", "copy", "z"], &[x.clone(), x, z]);
        let v = vif(&t).unwrap();
        assert!(v[0].is_infinite());
        assert!(v[1].is_infinite());
        assert!(v[2].is_finite());
    }

    #[test]
    fn constant_factor_is_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = table(&["flat", "x"], &[vec![2.0; 15], x]);
        let v = vif(&t).unwrap();
        assert!(v[0].is_infinite(), "constant factor is collinear with the intercept");
        assert!(v[1].is_finite());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let t = table(
            &["a", "b", "c"],
            &[vec![1.0, 2.0, 3.0], vec![2.0, 1.0, 3.0], vec![0.0, 1.0, -1.0]],
        );
        assert!(matches!(vif(&t), Err(Error::InsufficientData(_))));
    }

    /// Independent least-squares oracle: Householder QR on the raw design
    /// matrix (with intercept column), no normal equations anywhere.
    fn r_squared_qr(y: &[f64], predictors: &[&[f64]]) -> f64 {
        let n = y.len();
        let p = predictors.len() + 1;
        // Column-major design matrix, intercept first.
        let mut a = vec![0.0f64; n * p];
        a[..n].fill(1.0);
        for (k, col) in predictors.iter().enumerate() {
            for s in 0..n {
                a[(k + 1) * n + s] = col[s];
            }
        }
        let mut q_ty: Vec<f64> = y.to_vec();
        // Householder transformations applied to A and y simultaneously.
        for k in 0..p {
            let mut norm = 0.0f64;
            for s in k..n {
                norm += a[k * n + s] * a[k * n + s];
            }
            let norm = norm.sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
            let mut v = vec![0.0f64; n];
            for s in k..n {
                v[s] = a[k * n + s];
            }
            v[k] -= alpha;
            let vtv: f64 = v[k..].iter().map(|&x| x * x).sum();
            if vtv == 0.0 {
                continue;
            }
            for col in k..p {
                let dot: f64 = (k..n).map(|s| v[s] * a[col * n + s]).sum();
                let c = 2.0 * dot / vtv;
                for s in k..n {
                    a[col * n + s] -= c * v[s];
                }
            }
            let dot: f64 = (k..n).map(|s| v[s] * q_ty[s]).sum();
            let c = 2.0 * dot / vtv;
            for s in k..n {
                q_ty[s] -= c * v[s];
            }
        }
        // Residual norm² = sum of the transformed response beyond rank p.
        let sse: f64 = q_ty[p..].iter().map(|&v| v * v).sum();
        let mean = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
        1.0 - sse / sst
    }

    #[test]
    fn vif_matches_independent_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 50;
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x3: Vec<f64> =
            (0..n).map(|i| x1[i] + x2[i] + rng.random_range(-0.05..0.05)).collect();
        let cols = [x1, x2, x3];
        let t = table(&["x1", "x2", "x3"], &cols);
        let mine = vif(&t).unwrap();
        for j in 0..3 {
            let predictors: Vec<&[f64]> = (0..3)
                .filter(|&k| k != j)
                .map(|k| cols[k].as_slice())
                .collect();
            let oracle = 1.0 / (1.0 - r_squared_qr(&cols[j], &predictors));
            let rel = ((mine[j] - oracle) / oracle).abs();
            assert!(rel < 1e-6, "factor {j}: {} vs oracle {oracle} (rel {rel:.2e})", mine[j]);
        }
        // The near-collinear factor carries a visibly inflated VIF.
        assert!(mine[2] > 100.0, "x3 should be strongly inflated, got {}", mine[2]);
    }

    // ---- thresholds and report ----

    #[test]
    fn threshold_rule_matches_the_reference_extremes() {
        // The screening rule applied to reference VIF extremes: 4.7282 (the
        // largest observed) and 1.0086 (the smallest) both pass threshold 5.
        let names: Vec<String> = vec!["rainfall".into(), "aspect".into()];
        let pearson = PearsonMatrix {
            f: 2,
            values: vec![1.0, 0.2, 0.2, 1.0],
            undefined: vec![false, false],
        };
        let flags = flag_factors(&names, &pearson, &[4.7282, 1.0086], 0.7, 5.0);
        assert!(flags.iter().all(|f| f.retained));
        assert!(flags.iter().all(|f| !f.flagged_vif && !f.flagged_correlation));

        // Strictly above the threshold flips the flag; the boundary passes.
        let flags = flag_factors(&names, &pearson, &[5.0, 5.0001], 0.7, 5.0);
        assert!(!flags[0].flagged_vif);
        assert!(flags[1].flagged_vif && !flags[1].retained);
    }

    #[test]
    fn duplicate_factor_is_flagged_by_both_tests() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = table(&["x", "copy", "z"], &[x.clone(), x, z]);
        let report = optimize(&t, DEFAULT_CORR_THRESHOLD, DEFAULT_VIF_THRESHOLD).unwrap();
        for i in [0, 1] {
            assert!(report.flags[i].flagged_correlation);
            assert!(report.flags[i].flagged_vif);
            assert!(!report.flags[i].retained);
            assert_eq!(report.flags[i].vif, None, "infinite VIF encodes as None");
        }
        assert!(report.flags[2].retained);
        assert_eq!(report.flags[0].correlated_with, vec!["copy".to_string()]);
    }

    #[test]
    fn report_emits_csv_matrix_and_json_flags() {
        let t = table(
            &["a", "b"],
            &[vec![1.0, 2.0, 3.0, 4.0, 2.5], vec![0.9, 2.1, 2.9, 4.2, 2.4]],
        );
        let report = optimize(&t, 0.7, 5.0).unwrap();
        let csv = report.matrix_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "factor,a,b");
        assert!(lines[1].starts_with("a,1.000000,"));
        assert_eq!(lines.len(), 3);

        let json = report.flags_json().unwrap();
        let parsed: FlagsJson = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.factors.len(), 2);
        assert_eq!(parsed.vif_threshold, 5.0);
        assert!(parsed.factors[0].vif.unwrap() >= 1.0);
    }

    #[test]
    fn factor_table_samples_points_from_the_stack() {
        use crate::data::{synth_generate, RelevanceProfile};
        let (stack, inventory) =
            synth_generate(3, 32, 32, 30, &RelevanceProfile::default()).unwrap();
        let t = FactorTable::from_points(&stack, &inventory).unwrap();
        assert_eq!(t.n(), 60);
        assert_eq!(t.num_factors(), 16);
        for (s, p) in inventory.iter().enumerate() {
            for f in 0..16 {
                assert_eq!(t.get(s, f), stack.get(f, p.row, p.col) as f64);
            }
        }
        let full = FactorTable::from_stack(&stack).unwrap();
        assert_eq!(full.n(), 32 * 32);
    }

    #[test]
    fn screening_the_synthetic_fixture_retains_reasonable_factors() {
        use crate::data::{synth_generate, RelevanceProfile};
        let (stack, inventory) =
            synth_generate(7, 64, 64, 261, &RelevanceProfile::default()).unwrap();
        let t = FactorTable::from_points(&stack, &inventory).unwrap();
        let report = optimize(&t, DEFAULT_CORR_THRESHOLD, DEFAULT_VIF_THRESHOLD).unwrap();
        // The fixture's correlated nuisance layers stay under the exact-
        // collinearity regime: every VIF is finite.
        assert!(report.vif.iter().all(|v| v.is_finite()));
        // The pure-noise layer is retained by construction.
        let noise = report.names.iter().position(|n| n == "convergence_index").unwrap();
        assert!(report.flags[noise].retained);
    }
}
