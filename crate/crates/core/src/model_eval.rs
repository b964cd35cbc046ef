//! Fit metrics for comparing model variants on the same data: pointwise
//! log-likelihood, WAIC, and residual sum of squares.
//!
//! All quantities live on the log-concentration scale, matching the
//! observation density itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{CycleSchedule, MeasurementSeries};
use crate::sampler::Posterior;
use crate::state_space::{log_obs_density, SiteLayout};
use crate::stats::{logsumexp, median, sample_var};

/// Log observation density of each data point under each retained draw.
/// Row m, column j holds the density of point j under draw m.
pub fn pointwise_loglik(
    post: &Posterior,
    s: &CycleSchedule,
    series: &MeasurementSeries,
) -> Result<Vec<Vec<f64>>> {
    s.validate()?;
    series.validate(s)?;
    let layout = SiteLayout::from_schedule(s);
    let site_times: Vec<f64> = layout.sites.iter().map(|site| site.time).collect();
    if site_times != post.site_times {
        return Err(Error::Config(
            "posterior sites do not match this schedule; was it fit to different data?".into(),
        ));
    }
    let obs_sites = layout.observation_sites();
    if obs_sites.len() != series.len() {
        return Err(Error::Data(format!(
            "schedule has {} measurement sites but the series has {} points",
            obs_sites.len(),
            series.len()
        )));
    }
    let mut ll = Vec::with_capacity(post.n_draws());
    for draw in post.draws() {
        let mut row = Vec::with_capacity(series.len());
        for (j, &site) in obs_sites.iter().enumerate() {
            row.push(log_obs_density(
                series.y[j],
                draw.c[site],
                series.covariates_for(j),
                &draw.theta.obs,
            ));
        }
        ll.push(row);
    }
    Ok(ll)
}

/// WAIC decomposition: lppd, the effective parameter count, and the
/// information criterion itself on the deviance scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub lppd: f64,
    pub p_waic: f64,
    pub waic: f64,
}

/// Computes WAIC from a draws-by-points log-likelihood matrix. lppd sums
/// log posterior-mean densities via log-sum-exp; p_waic sums the unbiased
/// per-point variance of the log densities; waic = -2 (lppd - p_waic).
pub fn waic(ll: &[Vec<f64>]) -> Result<Waic> {
    let m = ll.len();
    if m < 2 {
        return Err(Error::Config(format!("WAIC needs at least 2 draws, got {m}")));
    }
    let n = ll[0].len();
    if ll.iter().any(|row| row.len() != n) {
        return Err(Error::Data("log-likelihood matrix has ragged rows".into()));
    }
    let ln_m = (m as f64).ln();
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut col = vec![0.0; m];
    for j in 0..n {
        for (i, row) in ll.iter().enumerate() {
            col[i] = row[j];
        }
        lppd += logsumexp(&col) - ln_m;
        p_waic += sample_var(&col);
    }
    Ok(Waic { lppd, p_waic, waic: -2.0 * (lppd - p_waic) })
}

/// Sum of squared residuals between each log measurement and the posterior
/// median of its fitted log value, log c_j + x_j' beta.
pub fn residual_ss(
    post: &Posterior,
    s: &CycleSchedule,
    series: &MeasurementSeries,
) -> Result<f64> {
    s.validate()?;
    series.validate(s)?;
    let layout = SiteLayout::from_schedule(s);
    let obs_sites = layout.observation_sites();
    if obs_sites.len() != series.len() {
        return Err(Error::Data(format!(
            "schedule has {} measurement sites but the series has {} points",
            obs_sites.len(),
            series.len()
        )));
    }
    let mut rss = 0.0;
    let mut fitted = Vec::with_capacity(post.n_draws());
    for (j, &site) in obs_sites.iter().enumerate() {
        fitted.clear();
        let x = series.covariates_for(j);
        for draw in post.draws() {
            let shift: f64 = x.iter().zip(&draw.theta.obs.beta).map(|(a, b)| a * b).sum();
            fitted.push(draw.c[site].ln() + shift);
        }
        let r = series.y[j].ln() - median(&fitted);
        rss += r * r;
    }
    Ok(rss)
}

/// Full evaluation report for one fit against one measurement series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub rss: f64,
    pub n_points: usize,
    pub n_draws: usize,
}

pub fn evaluate(
    post: &Posterior,
    s: &CycleSchedule,
    series: &MeasurementSeries,
) -> Result<EvalReport> {
    let ll = pointwise_loglik(post, s, series)?;
    let w = waic(&ll)?;
    let rss = residual_ss(post, s, series)?;
    Ok(EvalReport {
        waic: w.waic,
        lppd: w.lppd,
        p_waic: w.p_waic,
        rss,
        n_points: series.len(),
        n_draws: post.n_draws(),
    })
}
