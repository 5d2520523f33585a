//! Neural Cox model: a one-hidden-layer tanh network replaces the linear
//! predictor inside the Breslow partial likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cox::{column_stats, Design};
use super::SurvivalData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnCoxParams {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: u32,
    pub init_scale: f64,
}

impl Default for NnCoxParams {
    fn default() -> Self {
        NnCoxParams {
            hidden: 8,
            learning_rate: 0.01,
            epochs: 500,
            init_scale: 0.1,
        }
    }
}

/// Network weights. `w1` is row-major, `hidden` rows of `p` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnCoxModel {
    pub hidden: usize,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl NnCoxModel {
    fn p(&self) -> usize {
        self.means.len()
    }

    pub fn n_weights(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len()
    }

    /// All weights as one vector: w1, then b1, then w2.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).copied().collect()
    }

    pub fn set_flat_weights(&mut self, w: &[f64]) {
        let (a, b) = (self.w1.len(), self.b1.len());
        self.w1.copy_from_slice(&w[..a]);
        self.b1.copy_from_slice(&w[a..a + b]);
        self.w2.copy_from_slice(&w[a + b..]);
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn hidden_layer(&self, z: &[f64]) -> Vec<f64> {
        let p = self.p();
        (0..self.hidden)
            .map(|h| {
                let a: f64 = self.b1[h] + self.w1[h * p..(h + 1) * p].iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
                a.tanh()
            })
            .collect()
    }

    /// Risk predictor for raw covariates.
    pub fn predictor(&self, x: &[f64]) -> f64 {
        let u = self.hidden_layer(&self.standardize(x));
        u.iter().zip(&self.w2).map(|(a, b)| a * b).sum()
    }

    fn inputs(&self, data: &SurvivalData) -> Vec<Vec<f64>> {
        data.records.iter().map(|r| self.standardize(&r.covariates)).collect()
    }

    /// Mean partial log-likelihood over the records.
    pub fn loglik(&self, data: &SurvivalData) -> f64 {
        self.loglik_and_gradient(data).0
    }

    /// Mean partial log-likelihood and its gradient in flat weight order.
    pub fn loglik_and_gradient(&self, data: &SurvivalData) -> (f64, Vec<f64>) {
        let design = Design::new(data);
        let z = self.inputs(data);
        self.eval(&design, &z)
    }

    fn eval(&self, design: &Design, z: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let p = self.p();
        let n = z.len().max(1) as f64;
        let hidden: Vec<Vec<f64>> = z.iter().map(|zi| self.hidden_layer(zi)).collect();
        let eta: Vec<f64> = hidden
            .iter()
            .map(|u| u.iter().zip(&self.w2).map(|(a, b)| a * b).sum())
            .collect();
        let (l, d_eta) = design.loglik_eta(&eta);
        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; self.hidden];
        let mut gw2 = vec![0.0; self.hidden];
        for i in 0..z.len() {
            let g = d_eta[i] / n;
            if g == 0.0 {
                continue;
            }
            for h in 0..self.hidden {
                let u = hidden[i][h];
                gw2[h] += g * u;
                let back = g * self.w2[h] * (1.0 - u * u);
                gb1[h] += back;
                for k in 0..p {
                    gw1[h * p + k] += back * z[i][k];
                }
            }
        }
        gw1.extend(gb1);
        gw1.extend(gw2);
        (l / n, gw1)
    }
}

/// Initialize from `seed`, then run full-batch gradient ascent on the mean
/// partial log-likelihood. Covariates are standardized with the training
/// means and standard deviations.
pub fn fit_nncox(data: &SurvivalData, params: &NnCoxParams, seed: u64) -> NnCoxModel {
    let p = data.feature_names.len();
    let x: Vec<Vec<f64>> = data.records.iter().map(|r| r.covariates.clone()).collect();
    let (means, sds) = column_stats(&x, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.init_scale;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..=s)).collect() };
    let w1 = draw(params.hidden * p);
    let b1 = draw(params.hidden);
    let w2 = draw(params.hidden);
    let mut model = NnCoxModel {
        hidden: params.hidden,
        means,
        scales: sds.iter().map(|&v| if v > 0.0 { v } else { 1.0 }).collect(),
        w1,
        b1,
        w2,
    };
    let design = Design::new(data);
    let z = model.inputs(data);
    let mut w = model.flat_weights();
    for _ in 0..params.epochs {
        let (_, g) = model.eval(&design, &z);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi += params.learning_rate * gi;
        }
        model.set_flat_weights(&w);
    }
    model
}
