//! Censoring-aware risk statistics: Harrell's concordance index, the
//! Kaplan-Meier estimator, Cox proportional-hazards regression by
//! Newton-Raphson on the Breslow partial likelihood, and hazard ratios
//! with Wald confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("follow-up times must be finite and positive, got {0}")]
    InvalidTime(f64),
    #[error("covariate vectors must all have dimension {expected}, got {got}")]
    CovariateDimension { expected: usize, got: usize },
    #[error("scores length {0} does not match {1} subjects")]
    ScoreLength(usize, usize),
    #[error("no comparable pairs (need an event observed strictly before another subject's time)")]
    NoComparablePairs,
    #[error("model fitting needs at least one observed event")]
    NoEvents,
    #[error("covariate {0} is constant; the model is not identifiable")]
    ConstantCovariate(usize),
    #[error("information matrix is singular; the model is not identifiable")]
    NonIdentifiable,
    #[error("fit did not converge")]
    NotConverged,
    #[error("covariate must be binary 0/1 with both groups present")]
    NotBinaryCovariate,
}

/// Right-censored survival data: per subject a positive follow-up time,
/// an event flag (false = censored), and a covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    times: Vec<f64>,
    events: Vec<bool>,
    covariates: Vec<Vec<f64>>,
    dim: usize,
}

impl SurvivalDataset {
    pub fn new(times: Vec<f64>, events: Vec<bool>, covariates: Vec<Vec<f64>>) -> Result<Self, SurvivalError> {
        if times.is_empty() {
            return Err(SurvivalError::EmptyDataset);
        }
        if times.len() != events.len() || times.len() != covariates.len() {
            return Err(SurvivalError::ScoreLength(events.len(), times.len()));
        }
        if let Some(&t) = times.iter().find(|&&t| !t.is_finite() || t <= 0.0) {
            return Err(SurvivalError::InvalidTime(t));
        }
        let dim = covariates[0].len();
        if let Some(bad) = covariates.iter().find(|c| c.len() != dim) {
            return Err(SurvivalError::CovariateDimension { expected: dim, got: bad.len() });
        }
        Ok(SurvivalDataset { times, events, covariates, dim })
    }

    /// Dataset with a single covariate column.
    pub fn univariate(times: Vec<f64>, events: Vec<bool>, covariate: Vec<f64>) -> Result<Self, SurvivalError> {
        let covariates = covariate.into_iter().map(|x| vec![x]).collect();
        Self::new(times, events, covariates)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }
}

/// Counting Fenwick tree over score ranks, used by the concordance scan.
struct CountTree {
    tree: Vec<usize>,
}

impl CountTree {
    fn new(len: usize) -> Self {
        CountTree { tree: vec![0; len + 1] }
    }

    fn add(&mut self, rank: usize, delta: isize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] = (self.tree[i] as isize + delta) as usize;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of entries with rank < `rank`.
    fn count_below(&self, rank: usize) -> usize {
        let mut sum = 0;
        let mut i = rank;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

/// Harrell's concordance index. A pair (i, j) is comparable when subject i
/// has an observed event strictly before subject j's time; it is concordant
/// when the earlier-event subject carries the higher risk score, and tied
/// scores count one half.
pub fn concordance_index(scores: &[f64], data: &SurvivalDataset) -> Result<f64, SurvivalError> {
    let n = data.len();
    if scores.len() != n {
        return Err(SurvivalError::ScoreLength(scores.len(), n));
    }

    // Coordinate-compress scores.
    let mut sorted_scores: Vec<f64> = scores.to_vec();
    sorted_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_scores.dedup();
    let rank_of = |s: f64| sorted_scores.partition_point(|&x| x < s);

    // Subjects grouped by time, ascending; the tree starts holding everyone
    // and each time group leaves it before its events are scored, so only
    // strictly-later subjects are counted.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.times[a].partial_cmp(&data.times[b]).unwrap());
    let mut tree = CountTree::new(sorted_scores.len());
    for i in 0..n {
        tree.add(rank_of(scores[i]), 1);
    }

    let mut remaining = n;
    let mut concordant = 0usize;
    let mut tied = 0usize;
    let mut comparable = 0usize;
    let mut pos = 0usize;
    while pos < n {
        let t = data.times[order[pos]];
        let mut group_end = pos;
        while group_end < n && data.times[order[group_end]] == t {
            tree.add(rank_of(scores[order[group_end]]), -1);
            remaining -= 1;
            group_end += 1;
        }
        for &i in &order[pos..group_end] {
            if data.events[i] {
                let rank = rank_of(scores[i]);
                let below = tree.count_below(rank);
                let at_or_below = tree.count_below(rank + 1);
                comparable += remaining;
                concordant += below;
                tied += at_or_below - below;
            }
        }
        pos = group_end;
    }

    if comparable == 0 {
        return Err(SurvivalError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

/// One step of the Kaplan-Meier curve: the survival value after `time`,
/// with the risk-set size and event/censor counts at that time. Rows are
/// emitted for every distinct time so censoring ticks are retained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Product-limit survival estimate. Subjects censored at a time remain in
/// that time's risk set and leave afterwards.
pub fn kaplan_meier(data: &SurvivalDataset) -> Vec<KmPoint> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.times[a].partial_cmp(&data.times[b]).unwrap());

    let mut curve = Vec::new();
    let mut survival = 1.0;
    let mut at_risk = n;
    let mut pos = 0usize;
    while pos < n {
        let t = data.times[order[pos]];
        let mut events = 0usize;
        let mut censored = 0usize;
        let mut group_end = pos;
        while group_end < n && data.times[order[group_end]] == t {
            if data.events[order[group_end]] {
                events += 1;
            } else {
                censored += 1;
            }
            group_end += 1;
        }
        if events > 0 {
            survival *= 1.0 - events as f64 / at_risk as f64;
        }
        curve.push(KmPoint { time: t, survival, at_risk, events, censored });
        at_risk -= group_end - pos;
        pos = group_end;
    }
    curve
}

/// Newton-Raphson stopping tolerance on the gradient max-norm.
pub const COX_GRADIENT_TOL: f64 = 1e-8;
/// Convergence additionally requires the Newton step to shrink below this
/// max-norm; a monotone partial likelihood keeps the step large even as the
/// gradient vanishes, so it walks to the coefficient cap instead of
/// stopping on a flat tail.
pub const COX_STEP_TOL: f64 = 1e-4;
/// Iteration cap for the Newton loop.
pub const COX_MAX_ITERATIONS: usize = 100;
/// Coefficient cap applied when the partial likelihood is monotone
/// (e.g. perfect separation).
pub const COX_BETA_CAP: f64 = 50.0;
/// Monotone-likelihood detector: once the linear predictor spans more than
/// this range, relative risk weights fall below f64 resolution and the
/// likelihood is numerically flat, so a stop out there is divergence, not
/// convergence.
pub const COX_ETA_RANGE_FLAT: f64 = 30.0;
/// Two-sided 95% Wald quantile.
pub const WALD_Z95: f64 = 1.959963984540054;

/// Fitted Cox proportional-hazards model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Subject order sorted by descending time, so risk sets grow as the scan
/// proceeds.
fn descending_time_order(data: &SurvivalDataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.times[b].partial_cmp(&data.times[a]).unwrap());
    order
}

/// Breslow partial log-likelihood only (used by step-halving).
fn breslow_log_likelihood(data: &SurvivalDataset, order: &[usize], beta: &[f64]) -> f64 {
    let eta = |i: usize| -> f64 { data.covariates[i].iter().zip(beta).map(|(x, b)| x * b).sum() };
    let mut ll = 0.0;
    let mut s0 = 0.0;
    let mut pos = 0usize;
    while pos < order.len() {
        let t = data.times[order[pos]];
        let mut group_end = pos;
        while group_end < order.len() && data.times[order[group_end]] == t {
            s0 += eta(order[group_end]).exp();
            group_end += 1;
        }
        let mut deaths = 0usize;
        for &i in &order[pos..group_end] {
            if data.events[i] {
                ll += eta(i);
                deaths += 1;
            }
        }
        if deaths > 0 {
            ll -= deaths as f64 * s0.ln();
        }
        pos = group_end;
    }
    ll
}

/// Breslow partial log-likelihood with gradient and observed information.
fn breslow_stats(data: &SurvivalDataset, order: &[usize], beta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = data.dim();
    let eta = |i: usize| -> f64 { data.covariates[i].iter().zip(beta).map(|(x, b)| x * b).sum() };
    let mut ll = 0.0;
    let mut gradient: DVector<f64> = DVector::zeros(d);
    let mut information: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut s0 = 0.0;
    let mut s1: DVector<f64> = DVector::zeros(d);
    let mut s2: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut pos = 0usize;
    while pos < order.len() {
        let t = data.times[order[pos]];
        let mut group_end = pos;
        while group_end < order.len() && data.times[order[group_end]] == t {
            let i = order[group_end];
            let w = eta(i).exp();
            s0 += w;
            for a in 0..d {
                s1[a] += w * data.covariates[i][a];
                for b in 0..d {
                    s2[(a, b)] += w * data.covariates[i][a] * data.covariates[i][b];
                }
            }
            group_end += 1;
        }
        let mut deaths = 0usize;
        for &i in &order[pos..group_end] {
            if data.events[i] {
                deaths += 1;
                ll += eta(i);
                for a in 0..d {
                    gradient[a] += data.covariates[i][a];
                }
            }
        }
        if deaths > 0 {
            let deaths = deaths as f64;
            ll -= deaths * s0.ln();
            let mu = &s1 / s0;
            gradient.axpy(-deaths, &mu, 1.0);
            for a in 0..d {
                for b in 0..d {
                    information[(a, b)] += deaths * (s2[(a, b)] / s0 - mu[a] * mu[b]);
                }
            }
        }
        pos = group_end;
    }
    (ll, gradient, information)
}

fn cox_fit_traced(data: &SurvivalDataset) -> Result<(CoxFit, Vec<f64>), SurvivalError> {
    if !data.events.iter().any(|&e| e) {
        return Err(SurvivalError::NoEvents);
    }
    for a in 0..data.dim() {
        let first = data.covariates[0][a];
        if data.covariates.iter().all(|c| c[a] == first) {
            return Err(SurvivalError::ConstantCovariate(a));
        }
    }

    let order = descending_time_order(data);
    let d = data.dim();
    let mut beta = vec![0.0f64; d];
    let mut ll = breslow_log_likelihood(data, &order, &beta);
    let mut ll_trace = vec![ll];
    let mut iterations = 0usize;
    let mut capped = false;
    let mut settled = false;

    while iterations < COX_MAX_ITERATIONS {
        let (_, gradient, information) = breslow_stats(data, &order, &beta);
        let solved = information.clone().lu().solve(&gradient);
        if gradient.amax() < COX_GRADIENT_TOL {
            // A singular Hessian at a vanishing gradient is a flat optimum.
            if solved.as_ref().map_or(true, |delta| delta.amax() < COX_STEP_TOL) {
                settled = true;
                break;
            }
        }
        let delta = solved.ok_or(SurvivalError::NonIdentifiable)?;
        iterations += 1;

        // Step-halving keeps the partial likelihood non-decreasing (up to
        // a small slack for floating-point noise near the optimum).
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, dx)| b + step * dx).collect();
            let candidate_ll = breslow_log_likelihood(data, &order, &candidate);
            if candidate_ll >= ll - 1e-9 {
                beta = candidate;
                ll = candidate_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ll_trace.push(ll);
        if !accepted {
            break;
        }
        if beta.iter().any(|b| b.abs() > COX_BETA_CAP) {
            // Monotone likelihood (e.g. perfect separation): cap and flag.
            for b in &mut beta {
                *b = b.clamp(-COX_BETA_CAP, COX_BETA_CAP);
            }
            capped = true;
            break;
        }
    }

    let (final_ll, gradient, information) = breslow_stats(data, &order, &beta);
    let eta_range = {
        let etas: Vec<f64> = data
            .covariates
            .iter()
            .map(|c| c.iter().zip(&beta).map(|(x, b)| x * b).sum())
            .collect();
        let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = etas.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    };
    let converged =
        settled && !capped && eta_range <= COX_ETA_RANGE_FLAT && gradient.amax() < COX_GRADIENT_TOL;
    let standard_errors = match information.clone().try_inverse() {
        Some(inverse) => (0..d).map(|a| inverse[(a, a)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; d],
    };
    Ok((
        CoxFit {
            beta,
            standard_errors,
            log_partial_likelihood: final_ll,
            iterations,
            converged,
        },
        ll_trace,
    ))
}

/// Maximize the Breslow partial likelihood by Newton-Raphson with
/// step-halving; stops when the gradient max-norm drops below 1e-8 (with a
/// settled Newton step, see [`COX_STEP_TOL`]) or after 100 iterations.
/// Standard errors come from the inverse observed information. Monotone
/// likelihoods are capped at |beta| = 50 and flagged not converged rather
/// than erroring.
pub fn cox_fit(data: &SurvivalDataset) -> Result<CoxFit, SurvivalError> {
    cox_fit_traced(data).map(|(fit, _)| fit)
}

/// Hazard ratio with its Wald 95% confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardRatio {
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub fit: CoxFit,
}

/// Univariate Cox fit of a binary 0/1 covariate (e.g. the high-risk
/// indicator `GG >= 3`), reported as `exp(beta)` with its Wald interval.
pub fn hazard_ratio_binary(data: &SurvivalDataset) -> Result<HazardRatio, SurvivalError> {
    if data.dim() != 1
        || !data
            .covariates
            .iter()
            .all(|c| c[0] == 0.0 || c[0] == 1.0)
    {
        return Err(SurvivalError::NotBinaryCovariate);
    }
    let fit = cox_fit(data)?;
    let beta = fit.beta[0];
    let se = fit.standard_errors[0];
    Ok(HazardRatio {
        hazard_ratio: beta.exp(),
        ci_lower: (beta - WALD_Z95 * se).exp(),
        ci_upper: (beta + WALD_Z95 * se).exp(),
        fit,
    })
}

/// Concordance of a converged fit's linear predictor against its dataset.
pub fn cox_cindex_of_fit(fit: &CoxFit, data: &SurvivalDataset) -> Result<f64, SurvivalError> {
    if !fit.converged {
        return Err(SurvivalError::NotConverged);
    }
    let scores: Vec<f64> = data
        .covariates
        .iter()
        .map(|c| c.iter().zip(&fit.beta).map(|(x, b)| x * b).sum())
        .collect();
    concordance_index(&scores, data)
}
