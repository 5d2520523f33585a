//! Cox proportional hazards with the Breslow tie approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RetainError, Result};

use super::SurvivalData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxParams {
    pub max_iterations: u32,
    /// Stop when max |score| / n falls below this.
    pub tolerance: f64,
}

impl Default for CoxParams {
    fn default() -> Self {
        CoxParams {
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

/// With separated data the likelihood keeps rising toward an infinite
/// coefficient: the score shrinks below tolerance while Newton steps stay
/// large. A remaining step above this, in standard-deviation units, marks
/// the fit as not converged.
const DIVERGING_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub coefficients: Vec<f64>,
    /// Covariate means the baseline hazard is referenced to.
    pub means: Vec<f64>,
    pub baseline_times: Vec<i64>,
    pub baseline_cumhaz: Vec<f64>,
    pub log_likelihood: f64,
}

impl CoxModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    /// Cumulative hazard for covariates `x` at day `t`.
    pub fn cumulative_hazard(&self, x: &[f64], t: i64) -> f64 {
        let h0 = match self.baseline_times.partition_point(|&s| s <= t) {
            0 => 0.0,
            i => self.baseline_cumhaz[i - 1],
        };
        let centered: f64 = self
            .coefficients
            .iter()
            .zip(x.iter().zip(&self.means))
            .map(|(b, (v, m))| b * (v - m))
            .sum();
        h0 * centered.exp()
    }
}

pub(crate) struct Design {
    pub x: Vec<Vec<f64>>,
    pub times: Vec<i64>,
    pub events: Vec<bool>,
    /// Indices sorted by time, descending.
    order: Vec<usize>,
}

impl Design {
    pub fn new(data: &SurvivalData) -> Design {
        Design::from_parts(
            data.records.iter().map(|r| r.covariates.clone()).collect(),
            data.records.iter().map(|r| r.duration_days).collect(),
            data.records.iter().map(|r| r.is_event()).collect(),
        )
    }

    pub fn from_parts(x: Vec<Vec<f64>>, times: Vec<i64>, events: Vec<bool>) -> Design {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].cmp(&times[a]).then(a.cmp(&b)));
        Design {
            x,
            times,
            events,
            order,
        }
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Groups of indices sharing a time, latest time first.
    pub fn time_groups(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunk_by(|&a, &b| self.times[a] == self.times[b])
    }

    /// Partial log-likelihood and its derivative with respect to each
    /// subject's predictor `eta`.
    pub fn loglik_eta(&self, eta: &[f64]) -> (f64, Vec<f64>) {
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
        let mut s0 = 0.0;
        let mut loglik = 0.0;
        // inverse risk-set sums per event time, to distribute back later
        let mut inv: Vec<(usize, f64)> = Vec::new();
        for group in self.time_groups() {
            for &j in group {
                s0 += w[j];
            }
            let d = group.iter().filter(|&&i| self.events[i]).count();
            if d > 0 {
                for &i in group.iter().filter(|&&i| self.events[i]) {
                    loglik += eta[i] - shift - s0.ln();
                }
                inv.push((d, 1.0 / s0));
            }
        }
        // walk forward in time; each subject accumulates the hazard of every
        // event time at or before its own
        let mut grad = vec![0.0; self.n()];
        let groups: Vec<&[usize]> = self.time_groups().collect();
        let mut cum = 0.0;
        let mut k = inv.len();
        for group in groups.iter().rev() {
            if group.iter().any(|&i| self.events[i]) {
                k -= 1;
                cum += inv[k].0 as f64 * inv[k].1;
            }
            for &j in group.iter() {
                grad[j] = f64::from(u8::from(self.events[j])) - w[j] * cum;
            }
        }
        (loglik, grad)
    }

    /// Log-likelihood, score and Hessian at `beta`.
    pub fn derivatives(&self, beta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let eta: Vec<f64> = self.x.iter().map(|x| dot(x, beta)).collect();
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut loglik = 0.0;
        let mut score = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for group in self.time_groups() {
            for &j in group {
                let w = (eta[j] - shift).exp();
                let x = DVector::from_column_slice(&self.x[j]);
                s0 += w;
                s1 += &x * w;
                s2 += &x * x.transpose() * w;
            }
            for &i in group.iter().filter(|&&i| self.events[i]) {
                let mean = &s1 / s0;
                loglik += eta[i] - shift - s0.ln();
                score += DVector::from_column_slice(&self.x[i]) - &mean;
                hess -= &s2 / s0 - &mean * mean.transpose();
            }
        }
        (loglik, score, hess)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cox_partial_loglik(data: &SurvivalData, beta: &[f64]) -> f64 {
    Design::new(data).derivatives(beta).0
}

pub fn cox_gradient(data: &SurvivalData, beta: &[f64]) -> Vec<f64> {
    Design::new(data).derivatives(beta).1.iter().copied().collect()
}

pub(crate) fn column_stats(x: &[Vec<f64>], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len().max(1) as f64;
    let means: Vec<f64> = (0..p).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let sds = (0..p)
        .map(|k| (x.iter().map(|r| (r[k] - means[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (means, sds)
}

pub(crate) fn check_variance(data: &SurvivalData) -> Result<()> {
    let x: Vec<Vec<f64>> = data.records.iter().map(|r| r.covariates.clone()).collect();
    let (_, sds) = column_stats(&x, data.feature_names.len());
    match sds.iter().position(|&s| s <= 1e-12) {
        Some(k) => Err(RetainError::ZeroVariance(data.feature_names[k].clone())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub model: CoxModel,
    pub converged: bool,
    pub iterations: u32,
}

fn solve(info: &DMatrix<f64>, score: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(ch.solve(score));
    }
    let ridge = 1e-9 * (info.trace().abs() + 1.0);
    let damped = info + DMatrix::identity(info.nrows(), info.ncols()) * ridge;
    damped.lu().solve(score)
}

/// Newton–Raphson on the partial likelihood, with step halving whenever a
/// step would lower it.
pub fn fit_cox(data: &SurvivalData, params: &CoxParams) -> Result<CoxFit> {
    check_variance(data)?;
    let p = data.feature_names.len();
    let raw: Vec<Vec<f64>> = data.records.iter().map(|r| r.covariates.clone()).collect();
    let (means, sds) = column_stats(&raw, p);
    let centered: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    let design = Design::from_parts(
        centered,
        data.records.iter().map(|r| r.duration_days).collect(),
        data.records.iter().map(|r| r.is_event()).collect(),
    );
    let n = design.n() as f64;

    let mut beta = DVector::<f64>::zeros(p);
    let (mut loglik, mut score, mut hess) = design.derivatives(beta.as_slice());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iterations {
        if score.amax() / n < params.tolerance {
            converged = true;
            break;
        }
        let Some(step) = solve(&(-&hess), &score) else {
            break;
        };
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &step * scale;
            let (l, s, h) = design.derivatives(candidate.as_slice());
            if l.is_finite() && l >= loglik - 1e-12 * loglik.abs().max(1.0) {
                beta = candidate;
                (loglik, score, hess) = (l, s, h);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged && score.amax() / n < params.tolerance {
        converged = true;
    }
    if converged {
        let diverging = solve(&(-&hess), &score)
            .is_none_or(|step| step.iter().zip(&sds).any(|(d, s)| (d * s).abs() > DIVERGING_STEP));
        if diverging || beta.iter().any(|b| !b.is_finite()) {
            converged = false;
        }
    }

    let eta: Vec<f64> = design.x.iter().map(|x| dot(x, beta.as_slice())).collect();
    let (baseline_times, baseline_cumhaz) = breslow_baseline(&design, &eta);
    Ok(CoxFit {
        model: CoxModel {
            coefficients: beta.iter().copied().collect(),
            means,
            baseline_times,
            baseline_cumhaz,
            log_likelihood: loglik,
        },
        converged,
        iterations,
    })
}

fn breslow_baseline(design: &Design, eta: &[f64]) -> (Vec<i64>, Vec<f64>) {
    let mut s0 = 0.0;
    let mut steps: Vec<(i64, f64)> = Vec::new();
    for group in design.time_groups() {
        for &j in group {
            s0 += eta[j].exp();
        }
        let d = group.iter().filter(|&&i| design.events[i]).count();
        if d > 0 {
            steps.push((design.times[group[0]], d as f64 / s0));
        }
    }
    steps.reverse();
    let mut cum = 0.0;
    steps
        .into_iter()
        .map(|(t, h)| {
            cum += h;
            (t, cum)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::SurvivalRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn data(rows: &[(i64, u8, Vec<f64>)]) -> SurvivalData {
        let p = rows.first().map_or(0, |r| r.2.len());
        SurvivalData::new(
            (0..p).map(|k| format!("x{k}")).collect(),
            rows.iter()
                .enumerate()
                .map(|(i, (t, e, x))| SurvivalRecord {
                    contributor_id: format!("c{i:03}"),
                    duration_days: *t,
                    event: *e,
                    covariates: x.clone(),
                    group_label: None,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Partial likelihood written out per event, no shared code.
    fn brute_loglik(rows: &[(i64, u8, Vec<f64>)], beta: &[f64]) -> f64 {
        let eta = |x: &Vec<f64>| x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        rows.iter()
            .filter(|r| r.1 == 1)
            .map(|r| {
                let denom: f64 = rows.iter().filter(|s| s.0 >= r.0).map(|s| eta(&s.2).exp()).sum();
                eta(&r.2) - denom.ln()
            })
            .sum()
    }

    #[test]
    fn three_record_closed_form() {
        let d = data(&[(1, 1, vec![1.0]), (2, 1, vec![0.0]), (3, 1, vec![1.0])]);
        let fit = fit_cox(&d, &CoxParams::default()).unwrap();
        let beta = fit.model.coefficients[0];
        assert!((beta + 0.5 * 2f64.ln()).abs() < 1e-6, "{beta}");
        assert!(fit.converged);
        assert!(fit.iterations <= 10);
    }

    #[test]
    fn symmetric_data_gives_zero() {
        let d = data(&[
            (1, 1, vec![1.0]),
            (1, 1, vec![0.0]),
            (3, 1, vec![0.0]),
            (3, 1, vec![1.0]),
            (5, 0, vec![1.0]),
            (5, 0, vec![0.0]),
        ]);
        let fit = fit_cox(&d, &CoxParams::default()).unwrap();
        assert!(fit.model.coefficients[0].abs() < 1e-6);
    }

    #[test]
    fn loglik_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<_> = (0..25)
            .map(|_| (rng.random_range(1..8), rng.random_range(0..2u8), vec![rng.random::<f64>(), rng.random_range(0..3) as f64]))
            .collect();
        let d = data(&rows);
        for _ in 0..5 {
            let beta = [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
            let fast = cox_partial_loglik(&d, &beta);
            assert!((fast - brute_loglik(&rows, &beta)).abs() < 1e-9);
        }
    }

    #[test]
    fn eta_gradient_matches_beta_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<_> = (0..30)
            .map(|_| (rng.random_range(1..10), rng.random_range(0..2u8), vec![rng.random::<f64>(), rng.random::<f64>()]))
            .collect();
        let d = data(&rows);
        let beta = [0.3, -0.7];
        let design = Design::new(&d);
        let eta: Vec<f64> = design.x.iter().map(|x| dot(x, &beta)).collect();
        let (l, g_eta) = design.loglik_eta(&eta);
        let (l2, g, _) = design.derivatives(&beta);
        assert!((l - l2).abs() < 1e-9);
        for k in 0..2 {
            let via_eta: f64 = g_eta.iter().zip(&design.x).map(|(ge, x)| ge * x[k]).sum();
            assert!((via_eta - g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn likelihood_never_decreases_across_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<_> = (0..60)
            .map(|_| {
                let x = rng.random_range(0.0..3.0);
                let t = (rng.random::<f64>() * 50.0 / (1.0 + x)).ceil() as i64;
                (t.max(1), u8::from(rng.random_bool(0.8)), vec![x, rng.random::<f64>()])
            })
            .collect();
        let d = data(&rows);
        let mut last = f64::NEG_INFINITY;
        for iters in 0..8 {
            let fit = fit_cox(&d, &CoxParams { max_iterations: iters, tolerance: 0.0 }).unwrap();
            assert!(fit.model.log_likelihood >= last - 1e-9);
            last = fit.model.log_likelihood;
        }
    }

    #[test]
    fn separated_data_is_not_converged() {
        let d = data(&[
            (1, 1, vec![1.0]),
            (2, 1, vec![1.0]),
            (3, 1, vec![0.0]),
            (4, 1, vec![0.0]),
        ]);
        let fit = fit_cox(&d, &CoxParams::default()).unwrap();
        assert!(!fit.converged);
        assert!(fit.model.coefficients[0].is_finite());
    }

    #[test]
    fn zero_variance_is_named() {
        let d = data(&[(1, 1, vec![1.0, 2.0]), (2, 1, vec![0.0, 2.0]), (3, 1, vec![1.0, 2.0])]);
        match fit_cox(&d, &CoxParams::default()) {
            Err(RetainError::ZeroVariance(name)) => assert_eq!(name, "x1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baseline_is_breslow() {
        let rows = vec![(1, 1, vec![1.0]), (2, 1, vec![0.0]), (3, 1, vec![1.0])];
        let fit = fit_cox(&data(&rows), &CoxParams::default()).unwrap();
        let m = &fit.model;
        let b = m.coefficients[0];
        let xbar = 2.0 / 3.0;
        let w = |x: f64| (b * (x - xbar)).exp();
        let h1 = 1.0 / (w(1.0) + w(0.0) + w(1.0));
        let h2 = h1 + 1.0 / (w(0.0) + w(1.0));
        let h3 = h2 + 1.0 / w(1.0);
        assert!((m.cumulative_hazard(&[xbar], 1) - h1).abs() < 1e-12);
        assert!((m.cumulative_hazard(&[xbar], 2) - h2).abs() < 1e-12);
        assert!((m.cumulative_hazard(&[xbar], 3) - h3).abs() < 1e-12);
        assert_eq!(m.cumulative_hazard(&[xbar], 0), 0.0);
    }
}
