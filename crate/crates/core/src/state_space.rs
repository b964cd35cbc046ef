//! The Bayesian state-space model that melds the one-box physics with noisy
//! measurements.
//!
//! Observations enter on the log scale. With latent concentration C_t,
//! covariates x_t, and measurement-error variance sigma2_v,
//!
//! ```text
//! log Y_t ~ Normal(log C_t + x_t' beta, sigma2_v)
//! ```
//!
//! Within a cycle the latent concentration advances by the discretized box
//! step theta_t = A_t C_{t-1} + B_t (see `mechanistic::transition_coefficients`)
//! plus positive multiplicative-lognormal slack:
//!
//! ```text
//! C_t = theta_t + v_t W_t,    log W_t ~ Normal(m_w, sigma2_w),
//! ```
//!
//! so C_t is a shifted lognormal supported on (theta_t, inf). The scale v_t
//! is 1 under static process noise, or follows the deterministic recursion
//! v_t = H_t v_{t-1} with H_t = 1 + alpha_v on generation steps and beta_v
//! otherwise when `dynamic_variance` is on.
//!
//! Between cycles the chain is re-anchored by a bridge: with the room
//! unobserved from u = last sample of one cycle to s = start of the next,
//!
//! ```text
//! log C_s ~ Normal(log C_u - (Q/V)(s - u), sigma2_w)
//! ```
//!
//! at the raw ventilation rate Q, and the very first cycle start gets the
//! same form centered at a configurable guess log C0. Bridge and initial
//! factors are densities of log C at those sites; all measured-site factors
//! are densities of C itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{CycleSchedule, MeasurementSeries};
use crate::mechanistic::{transition_coefficients, MechParams, ModelKind};
use crate::stats::{invgamma_logpdf, normal_logpdf, uniform_logpdf};

/// Observation-equation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsParams {
    pub beta: Vec<f64>,
    pub sigma2_v: f64,
}

/// Process-equation parameters: the mechanistic block plus the transition
/// noise law. `phi.volume` is the known room volume, not a sampled quantity.
/// When `dynamic_variance` is false, `alpha_v` and `beta_v` are unused and
/// the variance path is identically 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcParams {
    pub kind: ModelKind,
    pub phi: MechParams,
    pub m_w: f64,
    pub sigma2_w: f64,
    pub alpha_v: f64,
    pub beta_v: f64,
    pub dynamic_variance: bool,
}

/// Full parameter state of the melded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaState {
    pub obs: ObsParams,
    pub process: ProcParams,
}

/// Uniform prior bounds, serialized as a `[lo, hi]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "(f64, f64)", from = "(f64, f64)")]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

impl UniformPrior {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

impl From<(f64, f64)> for UniformPrior {
    fn from((lo, hi): (f64, f64)) -> Self {
        UniformPrior { lo, hi }
    }
}

impl From<UniformPrior> for (f64, f64) {
    fn from(u: UniformPrior) -> Self {
        (u.lo, u.hi)
    }
}

/// Inverse-gamma prior with shape `a` and rate `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaPrior {
    pub a: f64,
    pub b: f64,
}

impl InvGammaPrior {
    /// Prior mean when it exists, otherwise the mode; used to seed chains.
    pub fn center(&self) -> f64 {
        if self.a > 1.0 {
            self.b / (self.a - 1.0)
        } else {
            self.b / (self.a + 1.0)
        }
    }
}

/// Normal prior with mean `mu` and variance `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mu: f64,
    pub kappa: f64,
}

/// Prior for regression coefficients: each beta_j is
/// Normal(mu, alpha * sigma2_v), scaled by the measurement variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrior {
    pub mu: f64,
    pub alpha: f64,
}

/// Prior specification for every sampled parameter. The defaults are the
/// simulation-study settings this crate's synthetic experiments are
/// calibrated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(rename = "G")]
    pub g: UniformPrior,
    #[serde(rename = "Q")]
    pub q: UniformPrior,
    #[serde(rename = "Q_L")]
    pub q_l: UniformPrior,
    #[serde(rename = "Q_R")]
    pub q_r: UniformPrior,
    #[serde(rename = "eps_L")]
    pub eps_l: UniformPrior,
    #[serde(rename = "eps_LF")]
    pub eps_lf: UniformPrior,
    #[serde(rename = "eps_RF")]
    pub eps_rf: UniformPrior,
    pub sigma2_v: InvGammaPrior,
    pub sigma2_w: InvGammaPrior,
    pub m_w: NormalPrior,
    pub beta: RegressionPrior,
    pub alpha_v: UniformPrior,
    pub beta_v: UniformPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            g: (200.0, 1800.0).into(),
            q: (3.0, 50.0).into(),
            q_l: (2.0, 10.0).into(),
            q_r: (2.0, 10.0).into(),
            eps_l: (0.3, 0.7).into(),
            eps_lf: (0.3, 0.7).into(),
            eps_rf: (0.6, 1.0).into(),
            sigma2_v: InvGammaPrior { a: 10.0, b: 8.42 },
            sigma2_w: InvGammaPrior { a: 2.0, b: 1.68 },
            m_w: NormalPrior { mu: 0.0, kappa: 100.0 },
            beta: RegressionPrior { mu: 0.0, alpha: 1.0 },
            alpha_v: (0.0, 2.0).into(),
            beta_v: (0.0, 1.0).into(),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let uniforms = [
            ("G", &self.g),
            ("Q", &self.q),
            ("Q_L", &self.q_l),
            ("Q_R", &self.q_r),
            ("eps_L", &self.eps_l),
            ("eps_LF", &self.eps_lf),
            ("eps_RF", &self.eps_rf),
            ("alpha_v", &self.alpha_v),
            ("beta_v", &self.beta_v),
        ];
        for (name, u) in uniforms {
            if !u.lo.is_finite() || !u.hi.is_finite() || u.lo >= u.hi {
                return Err(Error::Config(format!("prior for {name} needs lo < hi, got [{}, {}]", u.lo, u.hi)));
            }
        }
        for (name, u) in [("G", &self.g), ("Q", &self.q), ("Q_L", &self.q_l), ("Q_R", &self.q_r)] {
            if u.lo < 0.0 {
                return Err(Error::Config(format!("prior for {name} must not allow negative rates")));
            }
        }
        for (name, u) in [("eps_L", &self.eps_l), ("eps_LF", &self.eps_lf), ("eps_RF", &self.eps_rf)] {
            if u.lo < 0.0 || u.hi > 1.0 {
                return Err(Error::Config(format!("prior for {name} must stay within [0, 1]")));
            }
        }
        for (name, ig) in [("sigma2_v", &self.sigma2_v), ("sigma2_w", &self.sigma2_w)] {
            if !(ig.a > 0.0) || !(ig.b > 0.0) {
                return Err(Error::Config(format!("inverse-gamma prior for {name} needs a > 0 and b > 0")));
            }
        }
        if !(self.m_w.kappa > 0.0) {
            return Err(Error::Config("prior variance for m_w must be positive".into()));
        }
        if !(self.beta.alpha > 0.0) {
            return Err(Error::Config("prior scale alpha for beta must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<PriorSpec> {
        let p: PriorSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad prior JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prior serializes")
    }

    /// Uniform bounds for one mechanistic parameter by field name.
    pub fn mech_bounds(&self, name: &str) -> UniformPrior {
        match name {
            "G" => self.g,
            "Q" => self.q,
            "Q_L" => self.q_l,
            "Q_R" => self.q_r,
            "eps_L" => self.eps_l,
            "eps_LF" => self.eps_lf,
            "eps_RF" => self.eps_rf,
            other => panic!("unknown mechanistic parameter {other}"),
        }
    }
}

/// Mechanistic parameters sampled under each model kind, in update order.
pub fn free_mech_params(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Model101 => &["G", "Q"],
        ModelKind::Model111 => &["G", "Q", "Q_L", "Q_R", "eps_L", "eps_LF", "eps_RF"],
    }
}

pub fn get_mech(phi: &MechParams, name: &str) -> f64 {
    match name {
        "G" => phi.g,
        "Q" => phi.q,
        "Q_L" => phi.q_l,
        "Q_R" => phi.q_r,
        "eps_L" => phi.eps_l,
        "eps_LF" => phi.eps_lf,
        "eps_RF" => phi.eps_rf,
        other => panic!("unknown mechanistic parameter {other}"),
    }
}

pub fn set_mech(phi: &mut MechParams, name: &str, value: f64) {
    match name {
        "G" => phi.g = value,
        "Q" => phi.q = value,
        "Q_L" => phi.q_l = value,
        "Q_R" => phi.q_r = value,
        "eps_L" => phi.eps_l = value,
        "eps_LF" => phi.eps_lf = value,
        "eps_RF" => phi.eps_rf = value,
        other => panic!("unknown mechanistic parameter {other}"),
    }
}

/// What a latent site at one support point represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    /// Unobserved concentration at a cycle start (bridge/initial anchor).
    CycleStart { cycle: usize },
    /// Concentration at a sampled minute; `obs` indexes the series.
    Measured { cycle: usize, obs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub time: f64,
    pub kind: SiteKind,
}

/// Latent support points in time order: each cycle contributes its start
/// followed by its sampled minutes. Site i > 0 always chains off site i - 1,
/// by a transition within a cycle or a bridge at a cycle start.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteLayout {
    pub sites: Vec<Site>,
}

impl SiteLayout {
    pub fn from_schedule(s: &CycleSchedule) -> SiteLayout {
        let mut sites = Vec::new();
        let mut obs = 0usize;
        for (ci, cycle) in s.cycles.iter().enumerate() {
            sites.push(Site { time: cycle.start, kind: SiteKind::CycleStart { cycle: ci } });
            for &t in &cycle.measure {
                sites.push(Site { time: t, kind: SiteKind::Measured { cycle: ci, obs } });
                obs += 1;
            }
        }
        SiteLayout { sites }
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Site index of each observation, in series order.
    pub fn observation_sites(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, site) in self.sites.iter().enumerate() {
            if matches!(site.kind, SiteKind::Measured { .. }) {
                out.push(i);
            }
        }
        out
    }
}

/// The latent state the sampler walks over: concentrations and the
/// deterministic variance scales, both aligned to a `SiteLayout`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub c: Vec<f64>,
    pub v: Vec<f64>,
}

/// Deterministic variance scale at every site. Static noise gives all ones.
/// Under dynamic noise the scale starts at `v0`, multiplies by 1 + alpha_v
/// on generation steps and beta_v on decay steps, and crosses unobserved
/// gaps as beta_v^(gap/dt).
pub fn variance_path(th2: &ProcParams, s: &CycleSchedule, v0: f64) -> Vec<f64> {
    let layout = SiteLayout::from_schedule(s);
    variance_path_on(th2, s, &layout, v0)
}

pub fn variance_path_on(th2: &ProcParams, s: &CycleSchedule, layout: &SiteLayout, v0: f64) -> Vec<f64> {
    let n = layout.n_sites();
    if !th2.dynamic_variance {
        return vec![1.0; n];
    }
    let mut v = Vec::with_capacity(n);
    let mut current = v0;
    for site in &layout.sites {
        match site.kind {
            SiteKind::CycleStart { cycle } => {
                if cycle > 0 {
                    let gap = s.cycles[cycle].start - s.cycles[cycle - 1].last_measure();
                    current *= th2.beta_v.powf(gap / s.dt);
                } else {
                    current = v0;
                }
            }
            SiteKind::Measured { .. } => {
                let h = if s.generation_during_step_into(site.time) { 1.0 + th2.alpha_v } else { th2.beta_v };
                current *= h;
            }
        }
        v.push(current);
    }
    v
}

/// Log-density of one observation given its latent concentration, evaluated
/// on the log scale (the density of log Y, no Jacobian back to Y).
pub fn log_obs_density(y: f64, c: f64, x: &[f64], th1: &ObsParams) -> f64 {
    debug_assert_eq!(x.len(), th1.beta.len());
    if !(y > 0.0) || !(c > 0.0) || !(th1.sigma2_v > 0.0) {
        return f64::NEG_INFINITY;
    }
    let shift: f64 = th1.beta.iter().zip(x).map(|(b, v)| b * v).sum();
    normal_logpdf(y.ln(), c.ln() + shift, th1.sigma2_v)
}

/// The deterministic part of the transition into time `t`:
/// theta_t = A_t c_prev + B_t. NaN when the step is unstable (A <= 0).
pub fn transition_shift(c_prev: f64, t: f64, th2: &ProcParams, s: &CycleSchedule) -> f64 {
    let gen_on = s.generation_during_step_into(t);
    match transition_coefficients(&th2.phi, th2.kind, s.dt, gen_on) {
        Ok(tc) => tc.a * c_prev + tc.b,
        Err(_) => f64::NAN,
    }
}

/// Log-density of the within-cycle transition into time `t`: `c_t` is
/// shifted-lognormal with shift theta_t and scale `v_t`. Support violations
/// (c_t at or below the shift) and unstable steps return negative infinity
/// so Metropolis proposals are rejected rather than aborting.
pub fn log_trans_density(c_t: f64, c_prev: f64, t: f64, th2: &ProcParams, s: &CycleSchedule, v_t: f64) -> f64 {
    if !(c_prev > 0.0) || !(c_t > 0.0) || !(v_t > 0.0) || !(th2.sigma2_w > 0.0) {
        return f64::NEG_INFINITY;
    }
    let theta = transition_shift(c_prev, t, th2, s);
    if !theta.is_finite() || c_t <= theta {
        return f64::NEG_INFINITY;
    }
    let w = (c_t - theta) / v_t;
    let lw = w.ln();
    normal_logpdf(lw, th2.m_w, th2.sigma2_w) - lw - v_t.ln()
}

/// Log-density of the bridge re-anchoring a cycle start after `gap`
/// unobserved minutes: the density of log c_start, centered on pure decay at
/// the raw ventilation rate Q/V from the previous cycle's last sample.
pub fn log_bridge_density(c_start: f64, c_prev_end: f64, th2: &ProcParams, gap: f64) -> f64 {
    debug_assert!(gap >= 0.0);
    if !(c_start > 0.0) || !(c_prev_end > 0.0) || !(th2.sigma2_w > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mean = c_prev_end.ln() - th2.phi.q / th2.phi.volume * gap;
    normal_logpdf(c_start.ln(), mean, th2.sigma2_w)
}

/// Log-density of the first cycle start: same form as a bridge but centered
/// at a configured guess (the density of log c, no Jacobian).
pub fn log_initial_density(c_s1: f64, c0_guess: f64, sigma2_w: f64) -> f64 {
    if !(c_s1 > 0.0) || !(c0_guess > 0.0) || !(sigma2_w > 0.0) {
        return f64::NEG_INFINITY;
    }
    normal_logpdf(c_s1.ln(), c0_guess.ln(), sigma2_w)
}

/// Joint log-prior over every sampled parameter. Control-device parameters
/// only contribute under the controlled box; alpha_v/beta_v only under
/// dynamic variance. Negative infinity anywhere outside the support.
pub fn log_prior(th: &ThetaState, prior: &PriorSpec) -> f64 {
    let mut total = 0.0;
    let phi = &th.process.phi;
    for name in free_mech_params(th.process.kind) {
        let b = prior.mech_bounds(name);
        total += uniform_logpdf(get_mech(phi, name), b.lo, b.hi);
    }
    total += invgamma_logpdf(th.obs.sigma2_v, prior.sigma2_v.a, prior.sigma2_v.b);
    total += invgamma_logpdf(th.process.sigma2_w, prior.sigma2_w.a, prior.sigma2_w.b);
    total += normal_logpdf(th.process.m_w, prior.m_w.mu, prior.m_w.kappa);
    for &b in &th.obs.beta {
        total += normal_logpdf(b, prior.beta.mu, prior.beta.alpha * th.obs.sigma2_v);
    }
    if th.process.dynamic_variance {
        total += uniform_logpdf(th.process.alpha_v, prior.alpha_v.lo, prior.alpha_v.hi);
        total += uniform_logpdf(th.process.beta_v, prior.beta_v.lo, prior.beta_v.hi);
    }
    total
}

/// Static context a likelihood evaluation runs against: the layout, data,
/// and the initial-condition guess.
#[derive(Debug, Clone)]
pub struct ModelContext<'a> {
    pub schedule: &'a CycleSchedule,
    pub series: &'a MeasurementSeries,
    pub layout: SiteLayout,
    pub c0_guess: f64,
}

impl<'a> ModelContext<'a> {
    /// `c0_guess` defaults to the first observed concentration.
    pub fn new(schedule: &'a CycleSchedule, series: &'a MeasurementSeries, c0_guess: Option<f64>) -> Result<Self> {
        schedule.validate()?;
        series.validate(schedule)?;
        let c0 = c0_guess.unwrap_or(series.y[0]);
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(Error::Config(format!("initial-condition guess must be positive, got {c0}")));
        }
        Ok(ModelContext { schedule, series, layout: SiteLayout::from_schedule(schedule), c0_guess: c0 })
    }

    /// Gap in minutes bridged into the given cycle's start.
    pub fn gap_before(&self, cycle: usize) -> f64 {
        debug_assert!(cycle > 0);
        self.schedule.cycles[cycle].start - self.schedule.cycles[cycle - 1].last_measure()
    }
}

/// One named factor of the joint density; the sum over all factors plus the
/// prior is `log_joint`. Exposed so startup diagnostics can say which factor
/// went non-finite.
pub fn log_joint_factors(th: &ThetaState, c_path: &[f64], ctx: &ModelContext<'_>) -> Vec<(String, f64)> {
    let layout = &ctx.layout;
    debug_assert_eq!(c_path.len(), layout.n_sites());
    let v = variance_path_on(&th.process, ctx.schedule, layout, 1.0);
    let mut factors = Vec::with_capacity(layout.n_sites() + 1);
    for (i, site) in layout.sites.iter().enumerate() {
        match site.kind {
            SiteKind::CycleStart { cycle } => {
                if cycle == 0 {
                    factors.push((
                        format!("initial condition at t={}", site.time),
                        log_initial_density(c_path[i], ctx.c0_guess, th.process.sigma2_w),
                    ));
                } else {
                    factors.push((
                        format!("bridge into cycle {} at t={}", cycle + 1, site.time),
                        log_bridge_density(c_path[i], c_path[i - 1], &th.process, ctx.gap_before(cycle)),
                    ));
                }
            }
            SiteKind::Measured { obs, .. } => {
                factors.push((
                    format!("transition into t={}", site.time),
                    log_trans_density(c_path[i], c_path[i - 1], site.time, &th.process, ctx.schedule, v[i]),
                ));
                factors.push((
                    format!("observation at t={}", site.time),
                    log_obs_density(ctx.series.y[obs], c_path[i], ctx.series.covariates_for(obs), &th.obs),
                ));
            }
        }
    }
    factors
}

/// Joint log-density of parameters, latent path, and data: the prior plus
/// every bridge, transition, and observation factor.
pub fn log_joint(th: &ThetaState, c_path: &[f64], ctx: &ModelContext<'_>, prior: &PriorSpec) -> f64 {
    let mut total = log_prior(th, prior);
    if total == f64::NEG_INFINITY {
        return total;
    }
    let layout = &ctx.layout;
    debug_assert_eq!(c_path.len(), layout.n_sites());
    let v = variance_path_on(&th.process, ctx.schedule, layout, 1.0);
    for (i, site) in layout.sites.iter().enumerate() {
        let f = match site.kind {
            SiteKind::CycleStart { cycle } => {
                if cycle == 0 {
                    log_initial_density(c_path[i], ctx.c0_guess, th.process.sigma2_w)
                } else {
                    log_bridge_density(c_path[i], c_path[i - 1], &th.process, ctx.gap_before(cycle))
                }
            }
            SiteKind::Measured { obs, .. } => {
                log_trans_density(c_path[i], c_path[i - 1], site.time, &th.process, ctx.schedule, v[i])
                    + log_obs_density(ctx.series.y[obs], c_path[i], ctx.series.covariates_for(obs), &th.obs)
            }
        };
        if f == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += f;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::standard_schedule;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn plain_phi() -> MechParams {
        MechParams { g: 1000.0, q: 20.0, q_l: 0.0, q_r: 0.0, eps_l: 0.0, eps_lf: 0.0, eps_rf: 0.0, volume: 100.0 }
    }

    fn plain_proc(m_w: f64, sigma2_w: f64) -> ProcParams {
        ProcParams {
            kind: ModelKind::Model101,
            phi: plain_phi(),
            m_w,
            sigma2_w,
            alpha_v: 0.0,
            beta_v: 1.0,
            dynamic_variance: false,
        }
    }

    #[test]
    fn obs_density_worked_values() {
        let th1 = ObsParams { beta: vec![], sigma2_v: 1.0 };
        assert_relative_eq!(log_obs_density(5.0, 5.0, &[], &th1), -0.9189385332046727, epsilon = 1e-9);
        let y = 5.0 * std::f64::consts::E;
        assert_relative_eq!(log_obs_density(y, 5.0, &[], &th1), -1.4189385332046727, epsilon = 1e-9);
        let tight = ObsParams { beta: vec![], sigma2_v: 0.01 };
        assert_relative_eq!(log_obs_density(5.0, 5.0, &[], &tight), 1.3836465597893728, epsilon = 1e-9);
    }

    #[test]
    fn obs_density_applies_covariate_shift() {
        let th1 = ObsParams { beta: vec![0.5, -1.0], sigma2_v: 0.04 };
        let shift = 0.5 * 2.0 - 1.0 * 0.3;
        let y = (5.0f64.ln() + shift).exp();
        assert_relative_eq!(
            log_obs_density(y, 5.0, &[2.0, 0.3], &th1),
            normal_logpdf(0.0, 0.0, 0.04),
            epsilon = 1e-12
        );
    }

    #[test]
    fn transition_density_worked_values() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        let th2 = plain_proc(0.0, 1.0);
        // theta = 0.8 * 10 + 10 = 18; at c_t = 19 the residual is exactly 1.
        assert_relative_eq!(
            log_trans_density(19.0, 10.0, 5.0, &th2, &s, 1.0),
            -0.9189385332046727,
            epsilon = 1e-9
        );
        assert_eq!(log_trans_density(18.0, 10.0, 5.0, &th2, &s, 1.0), f64::NEG_INFINITY);
        assert_eq!(log_trans_density(17.0, 10.0, 5.0, &th2, &s, 1.0), f64::NEG_INFINITY);
        // Decay step: theta = 0.8 * 10 = 8.
        assert_relative_eq!(
            log_trans_density(9.0, 10.0, 18.0, &th2, &s, 1.0),
            -0.9189385332046727,
            epsilon = 1e-9
        );
    }

    #[test]
    fn transition_density_rejects_unstable_steps() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        let mut th2 = plain_proc(0.0, 1.0);
        th2.phi.volume = 10.0; // Q dt / V = 2
        assert_eq!(log_trans_density(19.0, 10.0, 5.0, &th2, &s, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn variance_path_grows_then_shrinks() {
        let s = standard_schedule(1, 3.0, 5.0, 0.0, 1.0).unwrap();
        let th2 = ProcParams { alpha_v: 0.1, beta_v: 0.9, dynamic_variance: true, ..plain_proc(0.0, 1.0) };
        let v = variance_path(&th2, &s, 1.0);
        // Sites: start, then five samples; three generation steps first.
        assert_relative_eq!(v[0], 1.0);
        assert_relative_eq!(v[1], 1.1, epsilon = 1e-12);
        assert_relative_eq!(v[2], 1.21, epsilon = 1e-12);
        assert_relative_eq!(v[3], 1.331, epsilon = 1e-12);
        assert_relative_eq!(v[4], 1.331 * 0.9, epsilon = 1e-12);
        assert_relative_eq!(v[5], 1.331 * 0.81, epsilon = 1e-12);
    }

    #[test]
    fn variance_path_decay_from_steady_level() {
        // Generator never on: every step multiplies by beta_v.
        let s = standard_schedule(1, 0.0, 2.0, 0.0, 1.0).unwrap();
        let th2 = ProcParams { alpha_v: 0.3, beta_v: 0.5, dynamic_variance: true, ..plain_proc(0.0, 1.0) };
        let v = variance_path(&th2, &s, 2.0);
        assert_relative_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn static_variance_is_all_ones() {
        let s = standard_schedule(2, 15.0, 30.0, 10.0, 1.0).unwrap();
        let v = variance_path(&plain_proc(0.0, 1.0), &s, 1.0);
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bridge_density_worked_values() {
        let th2 = plain_proc(0.0, 1.0);
        assert_relative_eq!(log_bridge_density(7.5, 7.5, &th2, 0.0), -0.9189385332046727, epsilon = 1e-9);
        // Controlled box: the bridge decays at raw Q/V, not Q'/V.
        let controlled = ProcParams {
            kind: ModelKind::Model111,
            phi: MechParams { q_l: 5.0, q_r: 5.0, eps_l: 0.5, eps_lf: 0.5, eps_rf: 0.9, ..plain_phi() },
            ..plain_proc(0.0, 1.0)
        };
        let c_end = 30.0;
        let centered = c_end * (-(20.0 / 100.0) * 10.0f64).exp();
        assert_relative_eq!(
            log_bridge_density(centered, c_end, &controlled, 10.0),
            -0.9189385332046727,
            epsilon = 1e-9
        );
    }

    #[test]
    fn prior_covers_every_block() {
        let prior = PriorSpec::default();
        let th = ThetaState {
            obs: ObsParams { beta: vec![0.2], sigma2_v: 0.9 },
            process: ProcParams {
                kind: ModelKind::Model111,
                phi: MechParams { g: 900.0, q: 20.0, q_l: 5.0, q_r: 5.0, eps_l: 0.5, eps_lf: 0.5, eps_rf: 0.9, volume: 100.0 },
                m_w: -0.5,
                sigma2_w: 0.8,
                alpha_v: 0.4,
                beta_v: 0.7,
                dynamic_variance: true,
            },
        };
        let expected = uniform_logpdf(900.0, 200.0, 1800.0)
            + uniform_logpdf(20.0, 3.0, 50.0)
            + uniform_logpdf(5.0, 2.0, 10.0)
            + uniform_logpdf(5.0, 2.0, 10.0)
            + uniform_logpdf(0.5, 0.3, 0.7)
            + uniform_logpdf(0.5, 0.3, 0.7)
            + uniform_logpdf(0.9, 0.6, 1.0)
            + invgamma_logpdf(0.9, 10.0, 8.42)
            + invgamma_logpdf(0.8, 2.0, 1.68)
            + normal_logpdf(-0.5, 0.0, 100.0)
            + normal_logpdf(0.2, 0.0, 1.0 * 0.9)
            + uniform_logpdf(0.4, 0.0, 2.0)
            + uniform_logpdf(0.7, 0.0, 1.0);
        assert_relative_eq!(log_prior(&th, &prior), expected, epsilon = 1e-12);

        let mut outside = th.clone();
        outside.process.phi.g = 100.0;
        assert_eq!(log_prior(&outside, &prior), f64::NEG_INFINITY);

        // The plain box ignores control-device bounds entirely.
        let mut plain = th.clone();
        plain.process.kind = ModelKind::Model101;
        plain.process.phi.q_l = 500.0;
        assert!(log_prior(&plain, &prior).is_finite());
    }

    #[test]
    fn log_joint_is_the_sum_of_its_factors() {
        let s = standard_schedule(2, 2.0, 3.0, 4.0, 1.0).unwrap();
        let series = MeasurementSeries {
            times: s.cycles.iter().flat_map(|c| c.measure.clone()).collect(),
            y: vec![12.0, 14.0, 15.0, 11.0, 13.0, 14.5],
            x: None,
        };
        let ctx = ModelContext::new(&s, &series, Some(10.0)).unwrap();
        let th = ThetaState {
            obs: ObsParams { beta: vec![], sigma2_v: 0.05 },
            process: plain_proc(-1.0, 0.5),
        };
        let prior = PriorSpec::default();
        // Each measured value sits above its transition shift theta.
        let c_path = vec![10.0, 19.0, 26.0, 21.5, 9.5, 18.1, 25.0, 20.5];
        let factor_sum: f64 = log_joint_factors(&th, &c_path, &ctx).iter().map(|(_, f)| f).sum();
        let total = log_joint(&th, &c_path, &ctx, &prior);
        assert!(total.is_finite());
        assert_relative_eq!(total, log_prior(&th, &prior) + factor_sum, epsilon = 1e-12);
    }

    #[test]
    fn log_joint_support_violation_is_negative_infinity() {
        let s = standard_schedule(1, 2.0, 2.0, 0.0, 1.0).unwrap();
        let series = MeasurementSeries { times: vec![1.0, 2.0], y: vec![12.0, 14.0], x: None };
        let ctx = ModelContext::new(&s, &series, Some(10.0)).unwrap();
        let th = ThetaState { obs: ObsParams { beta: vec![], sigma2_v: 0.05 }, process: plain_proc(0.0, 1.0) };
        // Step into t=1: theta = 0.8 * 10 + 10 = 18, so c = 17 is out of support.
        let c_path = vec![10.0, 17.0, 25.0];
        assert_eq!(log_joint(&th, &c_path, &ctx, &PriorSpec::default()), f64::NEG_INFINITY);
        let named = log_joint_factors(&th, &c_path, &ctx);
        let bad: Vec<_> = named.iter().filter(|(_, f)| *f == f64::NEG_INFINITY).collect();
        assert_eq!(bad.len(), 1);
        assert!(bad[0].0.contains("transition into t=1"));
    }

    #[test]
    fn prior_spec_json_round_trip_and_defaults() {
        let text = r#"{
            "G": [200, 1800], "Q": [3, 50], "Q_L": [2, 10], "Q_R": [2, 10],
            "eps_L": [0.3, 0.7], "eps_LF": [0.3, 0.7], "eps_RF": [0.6, 1.0],
            "sigma2_v": {"a": 10, "b": 8.42}, "sigma2_w": {"a": 2, "b": 1.68},
            "m_w": {"mu": 0, "kappa": 100}, "beta": {"mu": 0, "alpha": 1},
            "alpha_v": [0, 2], "beta_v": [0, 1]
        }"#;
        let parsed = PriorSpec::from_json(text).unwrap();
        assert_eq!(parsed, PriorSpec::default());
        let again = PriorSpec::from_json(&parsed.to_json()).unwrap();
        assert_eq!(again, parsed);

        let mut reversed = PriorSpec::default();
        reversed.g = (1800.0, 200.0).into();
        assert!(reversed.validate().is_err());
        let with_extra = text.replacen('{', r#"{"unknown_field": 1,"#, 1);
        assert!(PriorSpec::from_json(&with_extra).is_err());
    }

    #[test]
    fn shifted_lognormal_normalizes_to_one() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        let th2 = plain_proc(-0.3, 0.5);
        let (c_prev, t, v_t) = (10.0, 5.0, 1.5);
        let theta = transition_shift(c_prev, t, &th2, &s);
        // Integrate the density over c on a log-spaced residual grid wide
        // enough to carry all but ~1e-16 of the mass.
        let sd = th2.sigma2_w.sqrt();
        let lo = th2.m_w - 9.0 * sd;
        let hi = th2.m_w + 9.0 * sd;
        let n = 40_000;
        let h = (hi - lo) / n as f64;
        let f = |u: f64| {
            // c = theta + v e^u, dc = v e^u du
            let c = theta + v_t * u.exp();
            (log_trans_density(c, c_prev, t, &th2, &s, v_t) + u).exp() * v_t
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert_relative_eq!(integral, 1.0, epsilon = 1e-6);
    }

    proptest! {
        /// c_t at or below the shift has zero density for any parameters.
        #[test]
        fn transition_support_boundary(
            c_prev in 1.0..60.0f64,
            below in 0.0..0.999f64,
            m_w in -2.0..2.0f64,
            s2 in 0.01..2.0f64,
        ) {
            let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
            let th2 = plain_proc(m_w, s2);
            let theta = transition_shift(c_prev, 5.0, &th2, &s);
            let c_t = theta * below;
            prop_assert_eq!(log_trans_density(c_t, c_prev, 5.0, &th2, &s, 1.0), f64::NEG_INFINITY);
        }

        /// Dynamic variance with alpha_v = 0, beta_v = 1 is the static model
        /// bit for bit.
        #[test]
        fn dynamic_variance_reduces_to_static(
            c_prev in 5.0..50.0f64,
            incr in 0.01..20.0f64,
        ) {
            let s = standard_schedule(2, 15.0, 30.0, 10.0, 1.0).unwrap();
            let static_p = plain_proc(-0.5, 0.7);
            let dyn_p = ProcParams { dynamic_variance: true, alpha_v: 0.0, beta_v: 1.0, ..static_p.clone() };
            let v_static = variance_path(&static_p, &s, 1.0);
            let v_dyn = variance_path(&dyn_p, &s, 1.0);
            prop_assert_eq!(&v_static, &v_dyn);
            let theta = transition_shift(c_prev, 45.0, &static_p, &s);
            let c_t = theta + incr;
            let a = log_trans_density(c_t, c_prev, 45.0, &static_p, &s, v_static[7]);
            let b = log_trans_density(c_t, c_prev, 45.0, &dyn_p, &s, v_dyn[7]);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        /// The controlled box with zeroed controls gives the plain box's
        /// transition density bit for bit.
        #[test]
        fn model_nesting_in_the_density(
            c_prev in 5.0..50.0f64,
            incr in 0.01..20.0f64,
        ) {
            let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
            let plain = plain_proc(-0.2, 0.6);
            let nested = ProcParams { kind: ModelKind::Model111, ..plain.clone() };
            let theta = transition_shift(c_prev, 5.0, &plain, &s);
            let c_t = theta + incr;
            let a = log_trans_density(c_t, c_prev, 5.0, &plain, &s, 1.0);
            let b = log_trans_density(c_t, c_prev, 5.0, &nested, &s, 1.0);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
