//! Jackknife factor sensitivity: leave-one-factor-out retraining and the
//! percentage-of-relative-decrease (PRD) statistic.
//!
//! The full-factor model is trained once and scored on the test split
//! (AUC_o). Then, for each factor, a fresh model is trained on the dataset
//! with that channel removed — same seed, same configuration, same split
//! assignment, so AUC differences reflect the factor and nothing else — and
//! the drop is summarized as PRD = 100·|AUC_o − AUC_i| / AUC_o. A cheaper
//! zero-channel mode skips the retraining and instead blanks the factor's
//! (standardized) channel at inference time; it is a smoke-test
//! approximation, not the jackknife proper.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneSpec, Model};
use crate::data::{PatchDataset, Split};
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::train::{train, TrainConfig};

/// Percentage of relative decrease: `100·|auc_o − auc_i| / auc_o`.
///
/// The absolute value means an exclusion that *improves* the AUC still
/// counts as influence.
pub fn prd(auc_o: f64, auc_i: f64) -> Result<f64> {
    if !(auc_o > 0.0 && auc_o <= 1.0) {
        return Err(Error::Value(format!(
            "prd: reference AUC must lie in (0, 1], got {auc_o}"
        )));
    }
    if !(0.0..=1.0).contains(&auc_i) {
        return Err(Error::Value(format!(
            "prd: excluded-factor AUC must lie in [0, 1], got {auc_i}"
        )));
    }
    Ok(100.0 * (auc_o - auc_i).abs() / auc_o)
}

/// How a factor is excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionMode {
    /// Retrain a fresh model without the factor's channel (the jackknife).
    Retrain,
    /// Zero the factor's standardized channel at inference time on the
    /// already-trained full model. Fast, approximate; for smoke tests.
    ZeroChannel,
}

/// Jackknife options beyond the training configuration itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JackknifeOptions {
    pub mode: ExclusionMode,
    /// Worker threads for the per-factor jobs (minimum 1). Results are
    /// merged in factor order, so the thread count never changes output.
    pub jobs: usize,
}

impl Default for JackknifeOptions {
    fn default() -> JackknifeOptions {
        JackknifeOptions { mode: ExclusionMode::Retrain, jobs: 1 }
    }
}

/// One factor's exclusion outcome. `auc`/`prd` are None when that factor's
/// job failed; `error` then carries the diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSensitivity {
    pub factor: String,
    pub auc: Option<f64>,
    /// PRD as a percentage (the headline statistic).
    pub prd: Option<f64>,
    /// The same quantity as a raw fraction, |AUC_o − AUC_i| / AUC_o.
    pub prd_fraction: Option<f64>,
    pub error: Option<String>,
}

/// Full jackknife report. `ranking` is a permutation of factor indices,
/// most influential (largest PRD) first; failed factors rank last in
/// factor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub auc_o: f64,
    pub mode: ExclusionMode,
    pub factors: Vec<FactorSensitivity>,
    pub ranking: Vec<usize>,
}

impl SensitivityReport {
    /// The report as CSV `factor,auc,prd,rank`, in factor order. Failed
    /// factors leave auc/prd empty.
    pub fn to_csv(&self) -> String {
        let mut rank_of = vec![0usize; self.factors.len()];
        for (pos, &f) in self.ranking.iter().enumerate() {
            rank_of[f] = pos + 1;
        }
        let mut out = String::from("factor,auc,prd,rank\n");
        for (i, f) in self.factors.iter().enumerate() {
            let auc = f.auc.map(|v| v.to_string()).unwrap_or_default();
            let prd = f.prd.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", f.factor, auc, prd, rank_of[i]));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("sensitivity report serialization failed: {e}")))
    }
}

/// Test-split AUC of `model`, optionally blanking one input channel.
fn test_auc(
    model: &Model,
    dataset: &PatchDataset,
    batch_size: usize,
    zero_channel: Option<usize>,
) -> Result<f64> {
    let indices = dataset.indices_of(Split::Test);
    if indices.is_empty() {
        return Err(Error::InsufficientData(
            "no samples assigned to the test split".into(),
        ));
    }
    let pp = dataset.patch() * dataset.patch();
    let f_count = dataset.num_factors();
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = dataset.batch(chunk)?;
        if let Some(j) = zero_channel {
            let mut xv = x.values_mut();
            for n in 0..chunk.len() {
                let start = (n * f_count + j) * pp;
                xv[start..start + pp].fill(0.0);
            }
        }
        let mut tape = Tape::inference();
        let pred = model.forward(&mut tape, &x, false)?;
        scores.extend(pred.values().iter().copied());
        labels.extend(y.values().iter().map(|&v| v as u8));
    }
    Ok(roc_auc(&scores, &labels)?.auc)
}

/// Trains the full model, then measures each factor's exclusion effect per
/// `options.mode`. Per-factor failures are recorded in the report, not
/// fatal; only the full-model run aborts the whole analysis.
pub fn jackknife(
    dataset: &PatchDataset,
    spec: &BackboneSpec,
    config: &TrainConfig,
    options: &JackknifeOptions,
) -> Result<SensitivityReport> {
    let f_count = dataset.num_factors();
    if f_count < 2 {
        return Err(Error::InsufficientData(
            "jackknife needs at least two factors".into(),
        ));
    }
    if spec.factors != f_count {
        return Err(Error::Config(format!(
            "spec expects {} factors but the dataset holds {f_count}",
            spec.factors
        )));
    }

    // Full-factor reference model.
    let full_model = Model::build(spec, config.seed)?;
    train(&full_model, dataset, config)?;
    let auc_o = test_auc(&full_model, dataset, config.batch_size, None)?;
    if auc_o <= 0.0 {
        return Err(Error::Degenerate(format!(
            "reference AUC {auc_o} is not positive; PRD is undefined"
        )));
    }

    // Per-factor exclusion jobs. Each job is self-contained (fresh dataset
    // view, fresh model), so a pool of workers can pull from a shared
    // counter; results land in factor order regardless of scheduling.
    let run_factor = |j: usize| -> Result<f64> {
        match options.mode {
            ExclusionMode::ZeroChannel => {
                test_auc(&full_model, dataset, config.batch_size, Some(j))
            }
            ExclusionMode::Retrain => {
                let reduced = dataset.drop_factor(j)?;
                let mut reduced_spec = spec.clone();
                reduced_spec.factors = f_count - 1;
                let model = Model::build(&reduced_spec, config.seed)?;
                train(&model, &reduced, config)?;
                test_auc(&model, &reduced, config.batch_size, None)
            }
        }
    };

    let jobs = options.jobs.max(1).min(f_count);
    let results: Vec<Result<f64>> = if jobs == 1 || options.mode == ExclusionMode::ZeroChannel {
        // ZeroChannel shares the full model (not Sync), so it always runs
        // on this thread; it is cheap by construction.
        (0..f_count).map(run_factor).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<f64>>>> =
            Mutex::new((0..f_count).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    if j >= f_count {
                        break;
                    }
                    let result = match options.mode {
                        ExclusionMode::Retrain => (|| {
                            let reduced = dataset.drop_factor(j)?;
                            let mut reduced_spec = spec.clone();
                            reduced_spec.factors = f_count - 1;
                            let model = Model::build(&reduced_spec, config.seed)?;
                            train(&model, &reduced, config)?;
                            test_auc(&model, &reduced, config.batch_size, None)
                        })(),
                        ExclusionMode::ZeroChannel => unreachable!("handled above"),
                    };
                    slots.lock().expect("worker panicked")[j] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every factor index was claimed"))
            .collect()
    };

    let factors: Vec<FactorSensitivity> = results
        .into_iter()
        .enumerate()
        .map(|(j, result)| {
            let name = dataset.factors()[j].clone();
            match result.and_then(|auc_i| Ok((auc_i, prd(auc_o, auc_i)?))) {
                Ok((auc_i, prd_pct)) => FactorSensitivity {
                    factor: name,
                    auc: Some(auc_i),
                    prd: Some(prd_pct),
                    prd_fraction: Some(prd_pct / 100.0),
                    error: None,
                },
                Err(e) => FactorSensitivity {
                    factor: name,
                    auc: None,
                    prd: None,
                    prd_fraction: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    // Rank by PRD descending; ties and failures keep factor order (stable).
    let mut ranking: Vec<usize> = (0..f_count).collect();
    ranking.sort_by(|&a, &b| {
        let pa = factors[a].prd.unwrap_or(f64::NEG_INFINITY);
        let pb = factors[b].prd.unwrap_or(f64::NEG_INFINITY);
        pb.partial_cmp(&pa).expect("PRD values are finite")
    });

    Ok(SensitivityReport { auc_o, mode: options.mode, factors, ranking })
}
