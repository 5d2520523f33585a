//! Survival analysis of contributor tenure: records and features,
//! Kaplan–Meier curves, the log-rank test, three attrition models, risk
//! ranking, and the concordance index.

mod concordance;
mod cox;
mod km;
mod nncox;
mod records;
mod rsf;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use concordance::harrell_c;
pub use cox::{cox_gradient, cox_partial_loglik, fit_cox, CoxFit, CoxModel, CoxParams};
pub use km::{chi_square_1df_sf, km_estimate, logrank_test, KMCurve, KmEstimate, LogRankResult, ALL_GROUP};
pub use nncox::{fit_nncox, NnCoxModel, NnCoxParams};
pub use records::{
    build_survival_records, extract_features, feature_names, SurvivalData, SurvivalRecord,
    DEFAULT_FEATURE_WINDOW_DAYS,
};
pub use rsf::{default_mtry, fit_rsf, nelson_aalen, Node, RsfModel, RsfParams, Tree};

use crate::error::{RetainError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Cox,
    Rsf,
    Nncox,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cox => "cox",
            ModelKind::Rsf => "rsf",
            ModelKind::Nncox => "nncox",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = RetainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cox" => Ok(ModelKind::Cox),
            "rsf" => Ok(ModelKind::Rsf),
            "nncox" => Ok(ModelKind::Nncox),
            other => Err(RetainError::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub train_fraction: f64,
    pub min_records: usize,
    pub cox: CoxParams,
    pub rsf: RsfParams,
    pub nncox: NnCoxParams,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            train_fraction: 0.7,
            min_records: 10,
            cox: CoxParams::default(),
            rsf: RsfParams::default(),
            nncox: NnCoxParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParameters {
    Cox(CoxModel),
    Rsf(RsfModel),
    Nncox(NnCoxModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model_id: String,
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    pub parameters: ModelParameters,
    /// Holdout concordance; absent when the holdout has no comparable pair.
    pub c_index: Option<f64>,
    pub train_fraction: f64,
    pub converged: bool,
    pub iterations: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub contributor_id: String,
    pub score: f64,
    pub rank: u32,
}

/// Seeded split into (train, holdout) index lists.
pub fn train_holdout_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), n);
    let holdout = idx.split_off(n_train);
    (idx, holdout)
}

fn model_id(kind: ModelKind, data: &SurvivalData, options: &FitOptions, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_str());
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(&(&data.feature_names, &data.records, options)).unwrap_or_default());
    format!("{}-{}", kind, &hex::encode(h.finalize())[..12])
}

/// Fit one model kind on a seeded train split and score it on the holdout.
/// `data` should already hold only the chosen features.
pub fn fit_model(data: &SurvivalData, kind: ModelKind, options: &FitOptions, seed: u64) -> Result<FittedModel> {
    data.validate()?;
    if !(options.train_fraction > 0.0 && options.train_fraction <= 1.0) {
        return Err(RetainError::InvalidArgument("train_fraction must be in (0, 1]".into()));
    }
    if data.feature_names.is_empty() {
        return Err(RetainError::InvalidArgument("at least one feature is required".into()));
    }
    let events = data.records.iter().filter(|r| r.is_event()).count();
    if data.len() < options.min_records.max(2) || events == 0 {
        return Err(RetainError::InsufficientRecords(format!(
            "{} records with {events} departures; need at least {} records and 1 departure",
            data.len(),
            options.min_records.max(2)
        )));
    }
    let (train_idx, holdout_idx) = train_holdout_split(data.len(), options.train_fraction, seed);
    let train = data.subset(&train_idx);
    let holdout = data.subset(&holdout_idx);
    if !train.records.iter().any(|r| r.is_event()) {
        return Err(RetainError::InsufficientRecords("training split has no departures".into()));
    }

    let (parameters, converged, iterations) = match kind {
        ModelKind::Cox => {
            let fit = fit_cox(&train, &options.cox)?;
            (ModelParameters::Cox(fit.model), fit.converged, fit.iterations)
        }
        ModelKind::Rsf => (
            ModelParameters::Rsf(fit_rsf(&train, &options.rsf, seed)),
            true,
            options.rsf.n_trees as u32,
        ),
        ModelKind::Nncox => {
            cox::check_variance(&train)?;
            (
                ModelParameters::Nncox(fit_nncox(&train, &options.nncox, seed)),
                true,
                options.nncox.epochs,
            )
        }
    };
    let mut model = FittedModel {
        model_id: model_id(kind, data, options, seed),
        kind,
        feature_names: data.feature_names.clone(),
        parameters,
        c_index: None,
        train_fraction: options.train_fraction,
        converged,
        iterations,
        seed,
        n_train: train.len(),
        n_holdout: holdout.len(),
    };
    model.c_index = concordance_index(&model, &holdout)?;
    Ok(model)
}

impl FittedModel {
    fn score_row(&self, x: &[f64]) -> f64 {
        match &self.parameters {
            ModelParameters::Cox(m) => m.linear_predictor(x),
            ModelParameters::Rsf(m) => m.risk(x),
            ModelParameters::Nncox(m) => m.predictor(x),
        }
    }

    /// Raw risk per record, in record order.
    pub fn raw_scores(&self, data: &SurvivalData) -> Result<Vec<f64>> {
        let cols = self
            .feature_names
            .iter()
            .map(|f| {
                data.feature_names
                    .iter()
                    .position(|g| g == f)
                    .ok_or_else(|| RetainError::MissingFeature(f.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(data
            .records
            .iter()
            .map(|r| {
                let x: Vec<f64> = cols.iter().map(|&c| r.covariates[c]).collect();
                self.score_row(&x)
            })
            .collect())
    }
}

/// Scores ranked highest first; equal scores rank by contributor id.
pub fn predict_risk(model: &FittedModel, data: &SurvivalData) -> Result<Vec<RiskScore>> {
    let scores = model.raw_scores(data)?;
    let mut out: Vec<RiskScore> = data
        .records
        .iter()
        .zip(scores)
        .map(|(r, score)| RiskScore {
            contributor_id: r.contributor_id.clone(),
            score,
            rank: 0,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.contributor_id.cmp(&b.contributor_id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i as u32 + 1;
    }
    Ok(out)
}

pub fn concordance_index(model: &FittedModel, holdout: &SurvivalData) -> Result<Option<f64>> {
    let risks = model.raw_scores(holdout)?;
    let durations: Vec<i64> = holdout.records.iter().map(|r| r.duration_days).collect();
    let events: Vec<bool> = holdout.records.iter().map(|r| r.is_event()).collect();
    Ok(harrell_c(&durations, &events, &risks))
}
