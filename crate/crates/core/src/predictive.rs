//! Posterior predictive paths, forecasts, and derived exposure quantities.
//!
//! Every prediction is computed per posterior draw and then summarized as the
//! median and central 95% band. A requested time resolves to one of four
//! cases against the sampled sites:
//!
//! * exactly at a site: the sampled latent value passes through unchanged;
//! * inside a cycle between sites: one partial transition step from the left
//!   anchor, with coefficients scaled to the remaining minutes and noise at
//!   the full per-step scale;
//! * in an unobserved gap: one bridge jump decaying at the raw ventilation
//!   rate, noise on the log scale;
//! * past the last sample: generator-off transition steps from the final
//!   site, the variance scale extended by beta_v per step.
//!
//! Observation-level predictions add lognormal measurement noise on top of
//! the latent value.

use std::fmt;
use std::path::Path;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::CycleSchedule;
use crate::mechanistic::{
    average_concentration, decay_time, effective_params, removal_rate_per_hour, steady_state,
    transition_coefficients,
};
use crate::rng::substream;
use crate::sampler::{Draw, Posterior};
use crate::state_space::{variance_path_on, SiteKind, SiteLayout};
use crate::stats::quantile;

/// Times to predict at, optional covariate rows for observation-level
/// predictions (zero covariates assumed otherwise), and the noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub times: Vec<f64>,
    pub x: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredKind {
    Latent,
    Observed,
    Forecast,
}

impl fmt::Display for PredKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PredKind::Latent => "latent",
            PredKind::Observed => "observed",
            PredKind::Forecast => "forecast",
        };
        f.write_str(s)
    }
}

/// Posterior band at one time: central 95% interval and median.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBand {
    pub time: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub kind: PredKind,
}

/// How one requested time maps onto the sampled sites. Built once per
/// request; independent of the draws.
enum TimePlan {
    AtSite(usize),
    WithinCycle { anchor: usize, delta: f64, gen_on: bool },
    Background { anchor: usize, gap: f64 },
    Forecast { n_full: usize, delta: f64 },
}

fn plan_times(s: &CycleSchedule, layout: &SiteLayout, times: &[f64]) -> Result<Vec<TimePlan>> {
    let dt = s.dt;
    let tol = 1e-6 * dt;
    let horizon = s.horizon();
    let first = layout.sites[0].time;

    let mut cycle_first_site = vec![usize::MAX; s.cycles.len()];
    let mut cycle_last_site = vec![usize::MAX; s.cycles.len()];
    for (i, site) in layout.sites.iter().enumerate() {
        match site.kind {
            SiteKind::CycleStart { cycle } => cycle_first_site[cycle] = i,
            SiteKind::Measured { cycle, .. } => cycle_last_site[cycle] = i,
        }
    }

    let mut plans = Vec::with_capacity(times.len());
    for &t in times {
        if !t.is_finite() {
            return Err(Error::Config(format!("prediction time must be finite, got {t}")));
        }
        if t < first - tol {
            return Err(Error::Config(format!(
                "prediction time {t} precedes the first cycle start at {first}"
            )));
        }
        if t > horizon + tol {
            let total = t - horizon;
            let mut n_full = ((total + tol) / dt).floor() as usize;
            let mut delta = total - n_full as f64 * dt;
            if delta < tol {
                delta = 0.0;
            }
            if delta > dt - tol {
                n_full += 1;
                delta = 0.0;
            }
            plans.push(TimePlan::Forecast { n_full, delta });
            continue;
        }
        if let Some(i) = layout.sites.iter().position(|site| (site.time - t).abs() <= tol) {
            plans.push(TimePlan::AtSite(i));
            continue;
        }
        match s.cycle_containing(t) {
            Some(ci) => {
                let start = s.cycles[ci].start;
                let k = ((t - start + 0.5 * tol) / dt).floor() as usize;
                let anchor = cycle_first_site[ci] + k;
                let anchor_time = layout.sites[anchor].time;
                let gen_on = s.generation_indicator(anchor_time)?;
                plans.push(TimePlan::WithinCycle { anchor, delta: t - anchor_time, gen_on });
            }
            None => {
                let prev = s
                    .cycles
                    .iter()
                    .rposition(|c| c.last_measure() < t)
                    .expect("time after first start but in no cycle has a predecessor");
                let anchor = cycle_last_site[prev];
                plans.push(TimePlan::Background { anchor, gap: t - layout.sites[anchor].time });
            }
        }
    }
    Ok(plans)
}

/// Variance-scale multiplier for one step, matching the in-sample recursion.
fn step_scale(draw: &Draw, gen_on: bool) -> f64 {
    if !draw.theta.process.dynamic_variance {
        return 1.0;
    }
    if gen_on {
        1.0 + draw.theta.process.alpha_v
    } else {
        draw.theta.process.beta_v
    }
}

fn simulate_latent(
    plan: &TimePlan,
    draw: &Draw,
    s: &CycleSchedule,
    v_path: &[f64],
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<f64> {
    use rand::Rng;
    let th2 = &draw.theta.process;
    Ok(match *plan {
        TimePlan::AtSite(i) => draw.c[i],
        TimePlan::WithinCycle { anchor, delta, gen_on } => {
            let tc = transition_coefficients(&th2.phi, th2.kind, delta, gen_on)?;
            let theta = tc.a * draw.c[anchor] + tc.b;
            let v = v_path[anchor] * step_scale(draw, gen_on);
            let z: f64 = rng.sample(StandardNormal);
            theta + v * (th2.m_w + th2.sigma2_w.sqrt() * z).exp()
        }
        TimePlan::Background { anchor, gap } => {
            let z: f64 = rng.sample(StandardNormal);
            let mean = draw.c[anchor].ln() - th2.phi.q / th2.phi.volume * gap;
            (mean + th2.sigma2_w.sqrt() * z).exp()
        }
        TimePlan::Forecast { n_full, delta } => {
            let mut c = *draw.c.last().expect("draws carry at least one site");
            let mut v = *v_path.last().expect("variance path is nonempty");
            let s_w = th2.sigma2_w.sqrt();
            for _ in 0..n_full {
                let tc = transition_coefficients(&th2.phi, th2.kind, s.dt, false)?;
                v *= step_scale(draw, false);
                let z: f64 = rng.sample(StandardNormal);
                c = tc.a * c + tc.b + v * (th2.m_w + s_w * z).exp();
            }
            if delta > 0.0 {
                let tc = transition_coefficients(&th2.phi, th2.kind, delta, false)?;
                v *= step_scale(draw, false);
                let z: f64 = rng.sample(StandardNormal);
                c = tc.a * c + tc.b + v * (th2.m_w + s_w * z).exp();
            }
            c
        }
    })
}

fn check_alignment(post: &Posterior, layout: &SiteLayout) -> Result<()> {
    if post.n_draws() == 0 {
        return Err(Error::Config("posterior has no draws".into()));
    }
    let times: Vec<f64> = layout.sites.iter().map(|s| s.time).collect();
    if times != post.site_times {
        return Err(Error::Config(
            "posterior sites do not match this schedule; was it fit to different data?".into(),
        ));
    }
    Ok(())
}

fn bands_from_matrix(
    times: &[f64],
    kinds: &[PredKind],
    per_time: Vec<Vec<f64>>,
) -> Vec<PredictionBand> {
    times
        .iter()
        .zip(kinds)
        .zip(per_time)
        .map(|((&time, &kind), vals)| PredictionBand {
            time,
            lower: quantile(&vals, 0.025),
            median: quantile(&vals, 0.5),
            upper: quantile(&vals, 0.975),
            kind,
        })
        .collect()
}

fn predict_matrix(
    post: &Posterior,
    s: &CycleSchedule,
    req: &PredictionRequest,
    observation_level: bool,
) -> Result<Vec<Vec<f64>>> {
    use rand::Rng;
    let layout = SiteLayout::from_schedule(s);
    check_alignment(post, &layout)?;
    let plans = plan_times(s, &layout, &req.times)?;
    if let Some(x) = &req.x {
        if x.len() != req.times.len() {
            return Err(Error::Config(format!(
                "got {} covariate rows for {} prediction times",
                x.len(),
                req.times.len()
            )));
        }
    }
    let mut per_time: Vec<Vec<f64>> = vec![Vec::with_capacity(post.n_draws()); req.times.len()];
    for (m, draw) in post.draws().enumerate() {
        let mut rng = substream(req.seed, &format!("predictive/draw-{m}"));
        let v_path = variance_path_on(&draw.theta.process, s, &layout, 1.0);
        if let Some(x) = &req.x {
            for row in x {
                if row.len() != draw.theta.obs.beta.len() {
                    return Err(Error::Config(format!(
                        "covariate row has {} entries but the model has {} coefficients",
                        row.len(),
                        draw.theta.obs.beta.len()
                    )));
                }
            }
        }
        for (j, plan) in plans.iter().enumerate() {
            let mut value = simulate_latent(plan, draw, s, &v_path, &mut rng)?;
            if observation_level {
                let shift: f64 = match &req.x {
                    Some(rows) => rows[j].iter().zip(&draw.theta.obs.beta).map(|(a, b)| a * b).sum(),
                    None => 0.0,
                };
                let eps: f64 = rng.sample(StandardNormal);
                value = (value.ln() + shift + draw.theta.obs.sigma2_v.sqrt() * eps).exp();
            }
            per_time[j].push(value);
        }
    }
    Ok(per_time)
}

/// Posterior bands for the latent concentration path at the requested times,
/// all of which must lie inside the experiment window.
pub fn smooth_latent(
    post: &Posterior,
    s: &CycleSchedule,
    req: &PredictionRequest,
) -> Result<Vec<PredictionBand>> {
    s.validate()?;
    let horizon = s.horizon();
    let tol = 1e-6 * s.dt;
    if let Some(&t) = req.times.iter().find(|&&t| t > horizon + tol) {
        return Err(Error::Config(format!(
            "smoothing time {t} lies beyond the last sample at {horizon}; forecast instead"
        )));
    }
    let per_time = predict_matrix(post, s, req, false)?;
    let kinds = vec![PredKind::Latent; req.times.len()];
    Ok(bands_from_matrix(&req.times, &kinds, per_time))
}

/// Posterior predictive bands for measurements at the requested times. Times
/// inside the experiment are labeled observed, later times forecast.
pub fn predict_observations(
    post: &Posterior,
    s: &CycleSchedule,
    req: &PredictionRequest,
) -> Result<Vec<PredictionBand>> {
    s.validate()?;
    let horizon = s.horizon();
    let tol = 1e-6 * s.dt;
    let per_time = predict_matrix(post, s, req, true)?;
    let kinds: Vec<PredKind> = req
        .times
        .iter()
        .map(|&t| if t > horizon + tol { PredKind::Forecast } else { PredKind::Observed })
        .collect();
    Ok(bands_from_matrix(&req.times, &kinds, per_time))
}

/// Writes prediction bands as CSV with a stable column layout.
pub fn write_predictions_csv(path: &Path, bands: &[PredictionBand]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["time_min", "quantile_2.5", "median", "quantile_97.5", "kind"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for b in bands {
        w.write_record([
            format!("{}", b.time),
            format!("{}", b.lower),
            format!("{}", b.median),
            format!("{}", b.upper),
            format!("{}", b.kind),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Exposure quantities to derive from the posterior: the averaging window in
/// minutes, and an optional decay pair (from, to) in concentration units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRequest {
    pub t_avg: f64,
    pub decay_from: Option<f64>,
    pub decay_to: Option<f64>,
}

/// Median and central 95% interval of one derived quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

fn summarize(vals: &[f64]) -> QuantileSummary {
    QuantileSummary {
        lower: quantile(vals, 0.025),
        median: quantile(vals, 0.5),
        upper: quantile(vals, 0.975),
    }
}

/// Posterior summaries of the steady-state concentration, the average
/// concentration over the requested window, the removal rate in air changes
/// per hour, and optionally the time to decay between two concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedPosteriors {
    pub steady_state: QuantileSummary,
    pub average: QuantileSummary,
    pub removal_rate_per_hour: QuantileSummary,
    pub decay_time: Option<QuantileSummary>,
}

/// Evaluates each derived quantity on every draw, then summarizes. The
/// decay-time pair must come complete or not at all.
pub fn derived_posteriors(post: &Posterior, req: &DerivedRequest) -> Result<DerivedPosteriors> {
    if post.n_draws() == 0 {
        return Err(Error::Config("posterior has no draws".into()));
    }
    if !(req.t_avg > 0.0) || !req.t_avg.is_finite() {
        return Err(Error::Config(format!("averaging window must be positive, got {}", req.t_avg)));
    }
    let decay_pair = match (req.decay_from, req.decay_to) {
        (Some(from), Some(to)) => Some((from, to)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "decay time needs both endpoints: decay_from and decay_to".into(),
            ))
        }
    };
    let n = post.n_draws();
    let mut steady = Vec::with_capacity(n);
    let mut avg = Vec::with_capacity(n);
    let mut removal = Vec::with_capacity(n);
    let mut decay = Vec::with_capacity(if decay_pair.is_some() { n } else { 0 });
    for d in post.draws() {
        let th2 = &d.theta.process;
        let eff = effective_params(&th2.phi, th2.kind)?;
        steady.push(steady_state(&eff));
        avg.push(average_concentration(&eff, th2.phi.volume, req.t_avg));
        removal.push(removal_rate_per_hour(&eff, th2.phi.volume));
        if let Some((from, to)) = decay_pair {
            decay.push(decay_time(&eff, th2.phi.volume, from, to)?);
        }
    }
    Ok(DerivedPosteriors {
        steady_state: summarize(&steady),
        average: summarize(&avg),
        removal_rate_per_hour: summarize(&removal),
        decay_time: decay_pair.map(|_| summarize(&decay)),
    })
}
