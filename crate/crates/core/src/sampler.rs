//! Metropolis-within-Gibbs sampling of the melded posterior.
//!
//! One sweep updates, in order: every latent concentration site by
//! random-walk Metropolis on the log scale, each free mechanistic parameter
//! by a logit-space random walk inside its prior box, optionally the
//! ventilation block (Q, Q_L, Q_R, eps_LF, eps_RF) jointly, all mechanistic
//! parameters together with a skeleton-rescaled latent path (the path-shift
//! move), the observation block (beta, sigma2_v) by its conjugate draw, m_w
//! by its conjugate draw, sigma2_w by log-scale Metropolis, and the
//! variance-growth pair (alpha_v, beta_v) by logit walks when dynamic
//! variance is on.
//!
//! Proposal scales adapt by Robbins-Monro during burn-in only, so the kept
//! draws come from a fixed transition kernel. Every chain draws from its own
//! labeled substream; reruns with the same seed reproduce draws bit for bit.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{CycleSchedule, MeasurementSeries};
use crate::mechanistic::{transition_coefficients, MechParams, ModelKind};
use crate::rng::substream;
use crate::state_space::{
    free_mech_params, get_mech, log_bridge_density, log_initial_density, log_joint_factors,
    log_obs_density, log_trans_density, set_mech, transition_shift, variance_path_on,
    ModelContext, ObsParams, PriorSpec, ProcParams, SiteKind, ThetaState, UniformPrior,
};
use crate::stats::{invgamma_logpdf, mean, sample_var};

/// Which box model to fit, the known room volume, and whether the process
/// noise scale evolves over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub kind: ModelKind,
    pub volume: f64,
    pub dynamic_variance: bool,
}

/// Hyperparameters held at a known value instead of being sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedParams {
    pub sigma2_v: Option<f64>,
    pub sigma2_w: Option<f64>,
    pub m_w: Option<f64>,
}

impl FixedParams {
    pub fn any(&self) -> bool {
        self.sigma2_v.is_some() || self.sigma2_w.is_some() || self.m_w.is_some()
    }
}

/// Run-length and tuning knobs for one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub n_keep: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub target_accept_site: f64,
    pub target_accept_block: f64,
    pub c0_guess: Option<f64>,
    pub joint_flow_block: bool,
    pub fixed: FixedParams,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_keep: 5000,
            n_burn: 5000,
            thin: 1,
            seed: 0,
            adapt_window: 50,
            target_accept_site: 0.44,
            target_accept_block: 0.234,
            c0_guess: None,
            joint_flow_block: true,
            fixed: FixedParams::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keep == 0 {
            return Err(Error::Config("n_keep must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adapt_window must be at least 1".into()));
        }
        for (name, t) in [
            ("target_accept_site", self.target_accept_site),
            ("target_accept_block", self.target_accept_block),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        for (name, v) in [
            ("sigma2_v", self.fixed.sigma2_v),
            ("sigma2_w", self.fixed.sigma2_w),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("fixed {name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// One kept draw: mechanistic and noise parameters plus the latent path over
/// every site.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub theta: ThetaState,
    pub c: Vec<f64>,
}

/// Accept counts for one proposal family, recorded after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRate {
    pub name: String,
    pub accepted: u64,
    pub proposed: u64,
}

impl MoveRate {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposed as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub chain: usize,
    pub draws: Vec<Draw>,
    pub acceptance: Vec<MoveRate>,
}

/// Posterior draws from one or more chains over the same data and model.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub model: FitModel,
    pub site_times: Vec<f64>,
    pub param_names: Vec<String>,
    pub chains: Vec<ChainRun>,
}

/// Names of every sampled parameter, in output-column order.
pub fn sampled_param_names(model: &FitModel, covariate_dim: usize) -> Vec<String> {
    let mut names: Vec<String> = free_mech_params(model.kind).iter().map(|s| s.to_string()).collect();
    names.push("sigma2_v".into());
    names.push("sigma2_w".into());
    names.push("m_w".into());
    if model.dynamic_variance {
        names.push("alpha_v".into());
        names.push("beta_v".into());
    }
    for k in 1..=covariate_dim {
        names.push(format!("beta_{k}"));
    }
    names
}

/// Value of a named parameter inside a draw. `beta_v` and `alpha_v` are
/// matched before the `beta_k` coefficients.
pub fn extract_param(th: &ThetaState, name: &str) -> f64 {
    match name {
        "sigma2_v" => th.obs.sigma2_v,
        "sigma2_w" => th.process.sigma2_w,
        "m_w" => th.process.m_w,
        "alpha_v" => th.process.alpha_v,
        "beta_v" => th.process.beta_v,
        _ => {
            if let Some(k) = name.strip_prefix("beta_").and_then(|s| s.parse::<usize>().ok()) {
                th.obs.beta[k - 1]
            } else {
                get_mech(&th.process.phi, name)
            }
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// ln |dx/du| for x = lo + (hi - lo) sigmoid(u), up to the constant width.
fn logit_jacobian_ln(u: f64) -> f64 {
    -softplus(u) - softplus(-u)
}

fn to_unconstrained(x: f64, b: UniformPrior) -> f64 {
    logit((x - b.lo) / b.width())
}

fn from_unconstrained(u: f64, b: UniformPrior) -> f64 {
    b.lo + b.width() * sigmoid(u)
}

/// Draw from an inverse gamma with shape `a` and rate `b` (the same
/// parameterization as `stats::invgamma_logpdf`).
fn invgamma_draw(rng: &mut ChaCha12Rng, a: f64, b: f64) -> f64 {
    let g = Gamma::new(a, 1.0 / b).expect("positive shape and scale");
    1.0 / g.sample(rng)
}

/// Lower Cholesky factor of a small symmetric positive-definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = a.len();
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// Solves L L' x = b given the lower factor.
fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let p = b.len();
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Solves L' w = z, so that w has covariance (L L')^{-1} when z is standard
/// normal.
fn backsolve_transpose(l: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let p = z.len();
    let mut w = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k][i] * w[k];
        }
        w[i] = s / l[i][i];
    }
    w
}

struct NigPosterior {
    m_n: Vec<f64>,
    chol: Vec<Vec<f64>>,
    a_n: f64,
    b_n: f64,
}

/// Conjugate update for the regression block: prior beta ~ N(mu0 1, alpha
/// sigma2 I) and sigma2 ~ IG(a0, b0), data r = X beta + N(0, sigma2 I).
fn nig_posterior(x_rows: &[&[f64]], r: &[f64], alpha: f64, mu0: f64, a0: f64, b0: f64) -> NigPosterior {
    let p = x_rows[0].len();
    let n = r.len();
    let mut prec = vec![vec![0.0; p]; p];
    for (i, row) in prec.iter_mut().enumerate() {
        row[i] = 1.0 / alpha;
    }
    let mut rhs = vec![mu0 / alpha; p];
    for (row, &ri) in x_rows.iter().zip(r) {
        for j in 0..p {
            for k in 0..p {
                prec[j][k] += row[j] * row[k];
            }
            rhs[j] += row[j] * ri;
        }
    }
    let l = cholesky(&prec);
    let m_n = chol_solve(&l, &rhs);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let m_dot_rhs: f64 = m_n.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    let b_n = b0 + 0.5 * (rr + p as f64 * mu0 * mu0 / alpha - m_dot_rhs);
    NigPosterior { m_n, chol: l, a_n: a0 + 0.5 * n as f64, b_n }
}

/// Robbins-Monro step-size controller for one proposal family. After every
/// `window` proposals the log scale moves by (rate - target) / sqrt(batch);
/// `freeze` stops adaptation at the end of burn-in.
struct AdaptiveScale {
    ln_sd: f64,
    target: f64,
    window: usize,
    accepted: usize,
    proposed: usize,
    batches: usize,
    frozen: bool,
}

impl AdaptiveScale {
    fn new(init_sd: f64, target: f64, window: usize) -> Self {
        AdaptiveScale {
            ln_sd: init_sd.ln(),
            target,
            window,
            accepted: 0,
            proposed: 0,
            batches: 0,
            frozen: false,
        }
    }

    fn sd(&self) -> f64 {
        self.ln_sd.exp()
    }

    fn record(&mut self, accepted: bool) {
        if self.frozen {
            return;
        }
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if self.proposed == self.window {
            self.batches += 1;
            let rate = self.accepted as f64 / self.proposed as f64;
            self.ln_sd += (rate - self.target) / (self.batches as f64).sqrt();
            self.accepted = 0;
            self.proposed = 0;
        }
    }

    fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// Sum of the anchor and transition factors: everything the process
/// parameters touch. Negative infinity short-circuits.
/// Maps a latent path onto new mechanistic parameters: each measured site is
/// scaled by the ratio of deterministic Euler skeletons under `th_new` vs
/// `th_old`, both re-anchored at the cycle's current start value; cycle-start
/// sites are left alone. Returns the mapped path and the log-Jacobian in the
/// sampler's mixed base measure (the sum of measured-site log-ratios). The
/// map composed with its parameter-swapped counterpart is the identity.
fn skeleton_rescale(
    c: &[f64],
    th_old: &ThetaState,
    th_new: &ThetaState,
    ctx: &ModelContext<'_>,
) -> (Vec<f64>, f64) {
    let mut c_new = c.to_vec();
    let mut log_det = 0.0;
    let mut skel_old = 0.0;
    let mut skel_new = 0.0;
    for (i, site) in ctx.layout.sites.iter().enumerate() {
        match site.kind {
            SiteKind::CycleStart { .. } => {
                skel_old = c[i];
                skel_new = c[i];
            }
            SiteKind::Measured { .. } => {
                skel_old = transition_shift(skel_old, site.time, &th_old.process, ctx.schedule);
                skel_new = transition_shift(skel_new, site.time, &th_new.process, ctx.schedule);
                let r = skel_new / skel_old;
                c_new[i] = c[i] * r;
                log_det += r.ln();
            }
        }
    }
    (c_new, log_det)
}

fn process_loglik(th: &ThetaState, c: &[f64], ctx: &ModelContext<'_>) -> f64 {
    let v = variance_path_on(&th.process, ctx.schedule, &ctx.layout, 1.0);
    let mut total = 0.0;
    for (i, site) in ctx.layout.sites.iter().enumerate() {
        let f = match site.kind {
            SiteKind::CycleStart { cycle } => {
                if cycle == 0 {
                    log_initial_density(c[i], ctx.c0_guess, th.process.sigma2_w)
                } else {
                    log_bridge_density(c[i], c[i - 1], &th.process, ctx.gap_before(cycle))
                }
            }
            SiteKind::Measured { .. } => {
                log_trans_density(c[i], c[i - 1], site.time, &th.process, ctx.schedule, v[i])
            }
        };
        if f == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += f;
    }
    total
}

struct ChainState<'a> {
    model: FitModel,
    prior: &'a PriorSpec,
    ctx: &'a ModelContext<'a>,
    cfg: &'a ChainConfig,
    rng: ChaCha12Rng,
    th: ThetaState,
    c: Vec<f64>,
    v: Vec<f64>,
    proc_ll: f64,
    free_names: Vec<&'static str>,
    u_mech: Vec<f64>,
    block_idx: Vec<usize>,
    obs_sites: Vec<usize>,
    site_scales: Vec<AdaptiveScale>,
    mech_scales: Vec<AdaptiveScale>,
    block_scale: AdaptiveScale,
    shift_scale: AdaptiveScale,
    shift_single_scales: Vec<AdaptiveScale>,
    s2w_scale: AdaptiveScale,
    av_scale: AdaptiveScale,
    bv_scale: AdaptiveScale,
    counters: Vec<MoveRate>,
}

const LATENT_FAMILY: usize = 0;

impl<'a> ChainState<'a> {
    fn new(
        model: FitModel,
        prior: &'a PriorSpec,
        ctx: &'a ModelContext<'a>,
        cfg: &'a ChainConfig,
        chain: usize,
    ) -> Result<Self> {
        let rng = substream(cfg.seed, &format!("sampler/chain-{chain}"));
        let free_names: Vec<&'static str> = free_mech_params(model.kind).to_vec();

        let mut phi = MechParams {
            g: prior.g.midpoint(),
            q: prior.q.midpoint(),
            q_l: prior.q_l.midpoint(),
            q_r: prior.q_r.midpoint(),
            eps_l: prior.eps_l.midpoint(),
            eps_lf: prior.eps_lf.midpoint(),
            eps_rf: prior.eps_rf.midpoint(),
            volume: model.volume,
        };
        phi = phi.constrained(model.kind);
        phi.validate()?;
        transition_coefficients(&phi, model.kind, ctx.schedule.dt, true)?;

        let th = ThetaState {
            obs: ObsParams {
                beta: vec![0.0; ctx.series.covariate_dim()],
                sigma2_v: cfg.fixed.sigma2_v.unwrap_or_else(|| prior.sigma2_v.center()),
            },
            process: ProcParams {
                kind: model.kind,
                phi,
                m_w: cfg.fixed.m_w.unwrap_or(prior.m_w.mu),
                sigma2_w: cfg.fixed.sigma2_w.unwrap_or_else(|| prior.sigma2_w.center()),
                alpha_v: if model.dynamic_variance { prior.alpha_v.midpoint() } else { 0.0 },
                beta_v: if model.dynamic_variance { prior.beta_v.midpoint() } else { 1.0 },
                dynamic_variance: model.dynamic_variance,
            },
        };

        let c = initial_latents(&th, ctx);
        let bad: Vec<String> = log_joint_factors(&th, &c, ctx)
            .into_iter()
            .filter(|(_, f)| !f.is_finite())
            .map(|(name, _)| name)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Numerics(format!(
                "initial state has zero density in {}",
                bad.join(", ")
            )));
        }

        let u_mech: Vec<f64> = free_names
            .iter()
            .map(|name| to_unconstrained(get_mech(&th.process.phi, name), prior.mech_bounds(name)))
            .collect();
        let block_idx: Vec<usize> = free_names
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(**n, "Q" | "Q_L" | "Q_R" | "eps_LF" | "eps_RF"))
            .map(|(i, _)| i)
            .collect();

        let n_sites = ctx.layout.n_sites();
        let w = cfg.adapt_window;
        let site_scales = (0..n_sites)
            .map(|_| AdaptiveScale::new(0.25, cfg.target_accept_site, w))
            .collect();
        let mech_scales = free_names
            .iter()
            .map(|_| AdaptiveScale::new(0.2, cfg.target_accept_site, w))
            .collect();
        let shift_single_scales = free_names
            .iter()
            .map(|_| AdaptiveScale::new(0.3, cfg.target_accept_site, w))
            .collect();

        let mut counters = vec![MoveRate { name: "latent sites".into(), accepted: 0, proposed: 0 }];
        for name in &free_names {
            counters.push(MoveRate { name: name.to_string(), accepted: 0, proposed: 0 });
        }
        counters.push(MoveRate { name: "path shift".into(), accepted: 0, proposed: 0 });

        let mut state = ChainState {
            model,
            prior,
            ctx,
            cfg,
            rng,
            th,
            c,
            v: Vec::new(),
            proc_ll: 0.0,
            free_names,
            u_mech,
            block_idx,
            obs_sites: ctx.layout.observation_sites(),
            site_scales,
            mech_scales,
            block_scale: AdaptiveScale::new(0.08, cfg.target_accept_block, w),
            shift_scale: AdaptiveScale::new(0.1, cfg.target_accept_block, w),
            shift_single_scales,
            s2w_scale: AdaptiveScale::new(0.3, cfg.target_accept_site, w),
            av_scale: AdaptiveScale::new(0.3, cfg.target_accept_site, w),
            bv_scale: AdaptiveScale::new(0.3, cfg.target_accept_site, w),
            counters,
        };
        if state.use_flow_block() {
            state.counters.push(MoveRate { name: "flow block".into(), accepted: 0, proposed: 0 });
        }
        if cfg.fixed.sigma2_w.is_none() {
            state.counters.push(MoveRate { name: "sigma2_w".into(), accepted: 0, proposed: 0 });
        }
        if model.dynamic_variance {
            state.counters.push(MoveRate { name: "alpha_v".into(), accepted: 0, proposed: 0 });
            state.counters.push(MoveRate { name: "beta_v".into(), accepted: 0, proposed: 0 });
        }
        state.refresh_variance_path();
        state.proc_ll = process_loglik(&state.th, &state.c, ctx);
        Ok(state)
    }

    fn use_flow_block(&self) -> bool {
        self.cfg.joint_flow_block && self.block_idx.len() == 5
    }

    fn counter_index(&self, name: &str) -> usize {
        self.counters.iter().position(|m| m.name == name).expect("counter registered")
    }

    fn refresh_variance_path(&mut self) {
        self.v = variance_path_on(&self.th.process, self.ctx.schedule, &self.ctx.layout, 1.0);
    }

    fn count(&mut self, family: usize, accepted: bool, record: bool) {
        if record {
            let m = &mut self.counters[family];
            m.proposed += 1;
            if accepted {
                m.accepted += 1;
            }
        }
    }

    fn accept(&mut self, log_alpha: f64) -> bool {
        log_alpha >= 0.0 || self.rng.gen::<f64>() < log_alpha.exp()
    }

    /// Factors of the joint that involve site i with trial value `ci`.
    fn local_factors(&self, i: usize, ci: f64) -> f64 {
        let sites = &self.ctx.layout.sites;
        let th = &self.th;
        let mut total = match sites[i].kind {
            SiteKind::CycleStart { cycle } => {
                if cycle == 0 {
                    log_initial_density(ci, self.ctx.c0_guess, th.process.sigma2_w)
                } else {
                    log_bridge_density(ci, self.c[i - 1], &th.process, self.ctx.gap_before(cycle))
                }
            }
            SiteKind::Measured { obs, .. } => {
                log_trans_density(ci, self.c[i - 1], sites[i].time, &th.process, self.ctx.schedule, self.v[i])
                    + log_obs_density(
                        self.ctx.series.y[obs],
                        ci,
                        self.ctx.series.covariates_for(obs),
                        &th.obs,
                    )
            }
        };
        if total == f64::NEG_INFINITY {
            return total;
        }
        if i + 1 < sites.len() {
            total += match sites[i + 1].kind {
                SiteKind::CycleStart { cycle } => {
                    log_bridge_density(self.c[i + 1], ci, &th.process, self.ctx.gap_before(cycle))
                }
                SiteKind::Measured { .. } => log_trans_density(
                    self.c[i + 1],
                    ci,
                    sites[i + 1].time,
                    &th.process,
                    self.ctx.schedule,
                    self.v[i + 1],
                ),
            };
        }
        total
    }

    /// One pass of single-site log-scale random walks over every latent site.
    /// Measured sites are densities in C, so the log-scale proposal carries
    /// the Jacobian ratio; cycle-start sites are densities in log C already.
    fn update_latents(&mut self, record: bool) {
        self.refresh_variance_path();
        let n = self.ctx.layout.n_sites();
        for i in 0..n {
            let sd = self.site_scales[i].sd();
            let z: f64 = self.rng.sample(StandardNormal);
            let c_old = self.c[i];
            let c_new = (c_old.ln() + sd * z).exp();
            let hastings = match self.ctx.layout.sites[i].kind {
                SiteKind::Measured { .. } => c_new.ln() - c_old.ln(),
                SiteKind::CycleStart { .. } => 0.0,
            };
            let log_alpha = self.local_factors(i, c_new) - self.local_factors(i, c_old) + hastings;
            let ok = log_alpha.is_finite() || log_alpha == f64::NEG_INFINITY;
            let accepted = ok && self.accept(log_alpha);
            if accepted {
                self.c[i] = c_new;
            }
            self.site_scales[i].record(accepted);
            self.count(LATENT_FAMILY, accepted, record);
        }
        self.proc_ll = process_loglik(&self.th, &self.c, self.ctx);
    }

    fn update_mech_singles(&mut self, record: bool) {
        for j in 0..self.free_names.len() {
            let name = self.free_names[j];
            let b = self.prior.mech_bounds(name);
            let u_old = self.u_mech[j];
            let sd = self.mech_scales[j].sd();
            let z: f64 = self.rng.sample(StandardNormal);
            let u_new = u_old + sd * z;
            let mut th_new = self.th.clone();
            set_mech(&mut th_new.process.phi, name, from_unconstrained(u_new, b));
            let ll_new = process_loglik(&th_new, &self.c, self.ctx);
            let log_alpha =
                ll_new - self.proc_ll + logit_jacobian_ln(u_new) - logit_jacobian_ln(u_old);
            let accepted = self.accept(log_alpha);
            if accepted {
                self.th = th_new;
                self.u_mech[j] = u_new;
                self.proc_ll = ll_new;
            }
            self.mech_scales[j].record(accepted);
            let fam = self.counter_index(name);
            self.count(fam, accepted, record);
        }
    }

    /// Joint proposal over the five parameters that make up Q', which trade
    /// off against one another along a posterior ridge.
    fn update_flow_block(&mut self, record: bool) {
        if !self.use_flow_block() {
            return;
        }
        let sd = self.block_scale.sd();
        let mut th_new = self.th.clone();
        let mut u_new = self.u_mech.clone();
        let mut jac = 0.0;
        for &j in &self.block_idx {
            let z: f64 = self.rng.sample(StandardNormal);
            let b = self.prior.mech_bounds(self.free_names[j]);
            u_new[j] = self.u_mech[j] + sd * z;
            set_mech(&mut th_new.process.phi, self.free_names[j], from_unconstrained(u_new[j], b));
            jac += logit_jacobian_ln(u_new[j]) - logit_jacobian_ln(self.u_mech[j]);
        }
        let ll_new = process_loglik(&th_new, &self.c, self.ctx);
        let log_alpha = ll_new - self.proc_ll + jac;
        let accepted = self.accept(log_alpha);
        if accepted {
            self.th = th_new;
            self.u_mech = u_new;
            self.proc_ll = ll_new;
        }
        self.block_scale.record(accepted);
        let fam = self.counter_index("flow block");
        self.count(fam, accepted, record);
    }

    fn obs_loglik(&self, c: &[f64]) -> f64 {
        let series = self.ctx.series;
        (0..series.len())
            .map(|j| {
                log_obs_density(series.y[j], c[self.obs_sites[j]], series.covariates_for(j), &self.th.obs)
            })
            .sum()
    }

    /// One path-shift proposal over the given free-parameter indices:
    /// mechanistic parameters step in unconstrained space while measured
    /// sites are rescaled by the ratio of the deterministic skeletons under
    /// the new and old parameters, each cycle re-anchored at its current
    /// start value. Keeping the path's noise geometry lets the chain slide
    /// along the parameter/path ridge that fixed-path moves cross only in
    /// tiny steps. Cycle-start sites are untouched, so the map is triangular
    /// and its Jacobian in the mixed base measure is the product of the
    /// measured-site ratios.
    fn path_shift_proposal(&mut self, idxs: &[usize], sd: f64) -> bool {
        let mut th_new = self.th.clone();
        let mut u_new = self.u_mech.clone();
        let mut jac = 0.0;
        for &j in idxs {
            let z: f64 = self.rng.sample(StandardNormal);
            let b = self.prior.mech_bounds(self.free_names[j]);
            u_new[j] = self.u_mech[j] + sd * z;
            set_mech(&mut th_new.process.phi, self.free_names[j], from_unconstrained(u_new[j], b));
            jac += logit_jacobian_ln(u_new[j]) - logit_jacobian_ln(self.u_mech[j]);
        }
        let (c_new, log_det) = skeleton_rescale(&self.c, &self.th, &th_new, self.ctx);
        let proc_new = process_loglik(&th_new, &c_new, self.ctx);
        let log_alpha = proc_new + self.obs_loglik(&c_new) + jac + log_det
            - self.proc_ll
            - self.obs_loglik(&self.c);
        let ok = log_alpha.is_finite() || log_alpha == f64::NEG_INFINITY;
        let accepted = ok && self.accept(log_alpha);
        if accepted {
            self.th = th_new;
            self.u_mech = u_new;
            self.c = c_new;
            self.proc_ll = proc_new;
        }
        accepted
    }

    /// Path shifts along each free parameter alone, then all of them jointly.
    fn update_path_shift(&mut self, record: bool) {
        let fam = self.counter_index("path shift");
        for j in 0..self.free_names.len() {
            let sd = self.shift_single_scales[j].sd();
            let accepted = self.path_shift_proposal(&[j], sd);
            self.shift_single_scales[j].record(accepted);
            self.count(fam, accepted, record);
        }
        let all: Vec<usize> = (0..self.free_names.len()).collect();
        let sd = self.shift_scale.sd();
        let accepted = self.path_shift_proposal(&all, sd);
        self.shift_scale.record(accepted);
        self.count(fam, accepted, record);
    }

    /// Conjugate draw of (beta, sigma2_v) given the latent path.
    fn update_obs_block(&mut self) {
        let series = self.ctx.series;
        let n = series.len();
        let r: Vec<f64> = (0..n)
            .map(|j| series.y[j].ln() - self.c[self.obs_sites[j]].ln())
            .collect();
        let p = series.covariate_dim();
        let pr = self.prior.sigma2_v;
        if p == 0 {
            if self.cfg.fixed.sigma2_v.is_none() {
                let b_n = pr.b + 0.5 * r.iter().map(|v| v * v).sum::<f64>();
                self.th.obs.sigma2_v = invgamma_draw(&mut self.rng, pr.a + 0.5 * n as f64, b_n);
            }
            return;
        }
        let rows: Vec<&[f64]> = (0..n).map(|j| series.covariates_for(j)).collect();
        let nig = nig_posterior(&rows, &r, self.prior.beta.alpha, self.prior.beta.mu, pr.a, pr.b);
        let s2 = match self.cfg.fixed.sigma2_v {
            Some(s) => s,
            None => invgamma_draw(&mut self.rng, nig.a_n, nig.b_n),
        };
        let z: Vec<f64> = (0..p).map(|_| self.rng.sample(StandardNormal)).collect();
        let w = backsolve_transpose(&nig.chol, &z);
        self.th.obs.sigma2_v = s2;
        self.th.obs.beta = nig.m_n.iter().zip(&w).map(|(m, wi)| m + s2.sqrt() * wi).collect();
    }

    /// Conjugate draw of m_w from the transition residuals
    /// w_t = ln((c_t - theta_t) / v_t).
    fn update_m_w(&mut self) {
        if self.cfg.fixed.m_w.is_some() {
            return;
        }
        self.refresh_variance_path();
        let mut sum_lw = 0.0;
        let mut n_w = 0usize;
        for (i, site) in self.ctx.layout.sites.iter().enumerate() {
            if matches!(site.kind, SiteKind::Measured { .. }) {
                let theta = transition_shift(self.c[i - 1], site.time, &self.th.process, self.ctx.schedule);
                sum_lw += ((self.c[i] - theta) / self.v[i]).ln();
                n_w += 1;
            }
        }
        let pm = self.prior.m_w;
        let s2w = self.th.process.sigma2_w;
        let var = 1.0 / (1.0 / pm.kappa + n_w as f64 / s2w);
        let mean = var * (pm.mu / pm.kappa + sum_lw / s2w);
        let z: f64 = self.rng.sample(StandardNormal);
        self.th.process.m_w = mean + var.sqrt() * z;
        self.proc_ll = process_loglik(&self.th, &self.c, self.ctx);
    }

    /// Log-scale random walk on sigma2_w.
    fn update_sigma2_w(&mut self, record: bool) {
        if self.cfg.fixed.sigma2_w.is_some() {
            return;
        }
        let pr = self.prior.sigma2_w;
        let s_old = self.th.process.sigma2_w;
        let sd = self.s2w_scale.sd();
        let z: f64 = self.rng.sample(StandardNormal);
        let s_new = (s_old.ln() + sd * z).exp();
        let mut th_new = self.th.clone();
        th_new.process.sigma2_w = s_new;
        let ll_new = process_loglik(&th_new, &self.c, self.ctx);
        let log_alpha = ll_new + invgamma_logpdf(s_new, pr.a, pr.b)
            - (self.proc_ll + invgamma_logpdf(s_old, pr.a, pr.b))
            + (s_new.ln() - s_old.ln());
        let accepted = self.accept(log_alpha);
        if accepted {
            self.th = th_new;
            self.proc_ll = ll_new;
        }
        self.s2w_scale.record(accepted);
        let fam = self.counter_index("sigma2_w");
        self.count(fam, accepted, record);
    }

    /// Logit random walks on the variance-growth pair.
    fn update_variance_growth(&mut self, record: bool) {
        if !self.model.dynamic_variance {
            return;
        }
        for which in 0..2 {
            let (bounds, x_old) = if which == 0 {
                (self.prior.alpha_v, self.th.process.alpha_v)
            } else {
                (self.prior.beta_v, self.th.process.beta_v)
            };
            let sd = if which == 0 { self.av_scale.sd() } else { self.bv_scale.sd() };
            let u_old = to_unconstrained(x_old, bounds);
            let z: f64 = self.rng.sample(StandardNormal);
            let u_new = u_old + sd * z;
            let x_new = from_unconstrained(u_new, bounds);
            let mut th_new = self.th.clone();
            if which == 0 {
                th_new.process.alpha_v = x_new;
            } else {
                th_new.process.beta_v = x_new;
            }
            let ll_new = process_loglik(&th_new, &self.c, self.ctx);
            let log_alpha =
                ll_new - self.proc_ll + logit_jacobian_ln(u_new) - logit_jacobian_ln(u_old);
            let accepted = self.accept(log_alpha);
            if accepted {
                self.th = th_new;
                self.proc_ll = ll_new;
            }
            let (scale, name) = if which == 0 {
                (&mut self.av_scale, "alpha_v")
            } else {
                (&mut self.bv_scale, "beta_v")
            };
            scale.record(accepted);
            let fam = self.counter_index(name);
            self.count(fam, accepted, record);
        }
    }

    fn sweep(&mut self, record: bool) {
        self.update_latents(record);
        self.update_mech_singles(record);
        self.update_flow_block(record);
        self.update_path_shift(record);
        self.update_obs_block();
        self.update_m_w();
        self.update_sigma2_w(record);
        self.update_variance_growth(record);
    }

    fn freeze_scales(&mut self) {
        for s in &mut self.site_scales {
            s.freeze();
        }
        for s in &mut self.mech_scales {
            s.freeze();
        }
        self.block_scale.freeze();
        self.shift_scale.freeze();
        for s in &mut self.shift_single_scales {
            s.freeze();
        }
        self.s2w_scale.freeze();
        self.av_scale.freeze();
        self.bv_scale.freeze();
    }
}

/// Initial latent path: observed values at measured sites, the configured
/// guess at the first cycle start, and decayed carryover at later starts. A
/// forward repair pass then lifts any measured value that falls at or below
/// its transition shift to a point with mass under the current parameters,
/// so the chain starts inside the support.
fn initial_latents(th: &ThetaState, ctx: &ModelContext<'_>) -> Vec<f64> {
    let layout = &ctx.layout;
    let mut c = Vec::with_capacity(layout.n_sites());
    for (i, site) in layout.sites.iter().enumerate() {
        match site.kind {
            SiteKind::CycleStart { cycle } => {
                if cycle == 0 {
                    c.push(ctx.c0_guess);
                } else {
                    let decay = (-(th.process.phi.q / th.process.phi.volume) * ctx.gap_before(cycle)).exp();
                    c.push(c[i - 1] * decay);
                }
            }
            SiteKind::Measured { obs, .. } => c.push(ctx.series.y[obs]),
        }
    }
    let v = variance_path_on(&th.process, ctx.schedule, layout, 1.0);
    for (i, site) in layout.sites.iter().enumerate() {
        if let SiteKind::Measured { obs, .. } = site.kind {
            let theta = transition_shift(c[i - 1], site.time, &th.process, ctx.schedule);
            if !theta.is_finite() {
                continue;
            }
            if c[i] <= theta {
                let lift = theta + v[i] * (th.process.m_w - 2.0 * th.process.sigma2_w.sqrt()).exp();
                c[i] = lift.max(ctx.series.y[obs]);
            }
        }
    }
    c
}

/// Runs a single chain and returns its kept draws. Identical arguments give
/// identical draws; the chain index selects an independent substream.
pub fn run_chain(
    model: &FitModel,
    prior: &PriorSpec,
    schedule: &CycleSchedule,
    series: &MeasurementSeries,
    cfg: &ChainConfig,
    chain: usize,
) -> Result<ChainRun> {
    cfg.validate()?;
    prior.validate()?;
    let ctx = ModelContext::new(schedule, series, cfg.c0_guess)?;
    let mut state = ChainState::new(*model, prior, &ctx, cfg, chain)?;
    let total = cfg.n_burn + cfg.n_keep * cfg.thin;
    let mut draws = Vec::with_capacity(cfg.n_keep);
    for it in 0..total {
        if it == cfg.n_burn {
            state.freeze_scales();
        }
        let record = it >= cfg.n_burn;
        state.sweep(record);
        if record && (it - cfg.n_burn) % cfg.thin == 0 {
            draws.push(Draw { theta: state.th.clone(), c: state.c.clone() });
        }
    }
    debug_assert_eq!(draws.len(), cfg.n_keep);
    Ok(ChainRun { chain, draws, acceptance: state.counters })
}

/// Runs several chains, one thread each, and pools them into a posterior.
pub fn run_chains(
    model: &FitModel,
    prior: &PriorSpec,
    schedule: &CycleSchedule,
    series: &MeasurementSeries,
    cfg: &ChainConfig,
    n_chains: usize,
) -> Result<Posterior> {
    if n_chains == 0 {
        return Err(Error::Config("need at least one chain".into()));
    }
    let ctx = ModelContext::new(schedule, series, cfg.c0_guess)?;
    let site_times: Vec<f64> = ctx.layout.sites.iter().map(|s| s.time).collect();
    let results: Vec<Result<ChainRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_chains)
            .map(|i| scope.spawn(move || run_chain(model, prior, schedule, series, cfg, i)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let mut chains = Vec::with_capacity(n_chains);
    for r in results {
        chains.push(r?);
    }
    Ok(Posterior {
        model: *model,
        site_times,
        param_names: sampled_param_names(model, series.covariate_dim()),
        chains,
    })
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn ess_geyer(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mu = mean(x);
    let c0 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    if c0 <= 1e-12 * (1.0 + mu * mu) {
        return n as f64;
    }
    let autocorr = |k: usize| -> f64 {
        x[..n - k].iter().zip(&x[k..]).map(|(a, b)| (a - mu) * (b - mu)).sum::<f64>()
            / (n as f64 * c0)
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let gamma = autocorr(2 * m) + autocorr(2 * m + 1);
        if gamma <= 0.0 {
            break;
        }
        let gamma = gamma.min(prev);
        sum += gamma;
        prev = gamma;
        m += 1;
    }
    let tau = 2.0 * sum - 1.0;
    if tau <= 0.0 {
        return n as f64;
    }
    (n as f64 / tau).min(n as f64)
}

/// Split R-hat over one series per chain. Each chain is halved, so the
/// statistic detects both between-chain disagreement and within-chain drift.
/// None when the series are too short or numerically constant.
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    let mut seqs: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for ch in chains {
        let n = ch.len();
        if n < 4 {
            return None;
        }
        let half = n / 2;
        seqs.push(&ch[..half]);
        seqs.push(&ch[n - half..]);
    }
    let n2 = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let vars: Vec<f64> = seqs.iter().map(|s| sample_var(s)).collect();
    let w = mean(&vars);
    let grand = mean(&means);
    if w <= 1e-12 * (1.0 + grand * grand) {
        return None;
    }
    let b_over_n = sample_var(&means);
    let var_plus = (n2 - 1.0) / n2 * w + b_over_n;
    Some((var_plus / w).sqrt())
}

/// Whether a parameter's pooled draws are numerically constant, as happens
/// for hyperparameters held fixed or a move family that never accepts.
pub fn is_degenerate(x: &[f64]) -> bool {
    if x.len() < 2 {
        return true;
    }
    let m = mean(x);
    sample_var(x) <= 1e-12 * (1.0 + m * m)
}

/// Convergence and mixing summary for one sampled parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ess: f64,
    pub rhat: Option<f64>,
    pub degenerate: bool,
}

/// Pooled acceptance rate for one proposal family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveSummary {
    pub name: String,
    pub rate: f64,
}

/// Everything about a run except the draws themselves. Serialized next to
/// the sample table; contains no timestamps so identical runs serialize
/// identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeta {
    pub model: FitModel,
    pub config: ChainConfig,
    pub n_chains: usize,
    pub n_draws: usize,
    pub parameters: Vec<ParamDiagnostics>,
    pub acceptance: Vec<MoveSummary>,
}

impl Posterior {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// All draws pooled in chain order.
    pub fn draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn param(&self, name: &str) -> Vec<f64> {
        self.draws().map(|d| extract_param(&d.theta, name)).collect()
    }

    pub fn param_by_chain(&self, name: &str) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| extract_param(&d.theta, name)).collect())
            .collect()
    }

    pub fn diagnostics(&self) -> Vec<ParamDiagnostics> {
        self.param_names
            .iter()
            .map(|name| {
                let by_chain = self.param_by_chain(name);
                let pooled: Vec<f64> = by_chain.iter().flatten().copied().collect();
                let degenerate = is_degenerate(&pooled);
                let (ess, rhat) = if degenerate {
                    (pooled.len() as f64, None)
                } else {
                    let ess = by_chain.iter().map(|c| ess_geyer(c)).sum();
                    let refs: Vec<&[f64]> = by_chain.iter().map(Vec::as_slice).collect();
                    (ess, split_rhat(&refs))
                };
                ParamDiagnostics {
                    name: name.clone(),
                    mean: mean(&pooled),
                    sd: sample_var(&pooled).sqrt(),
                    ess,
                    rhat,
                    degenerate,
                }
            })
            .collect()
    }

    pub fn acceptance_summary(&self) -> Vec<MoveSummary> {
        let mut out: Vec<MoveSummary> = Vec::new();
        if self.chains.is_empty() {
            return out;
        }
        for (i, m) in self.chains[0].acceptance.iter().enumerate() {
            let mut accepted = 0u64;
            let mut proposed = 0u64;
            for ch in &self.chains {
                accepted += ch.acceptance[i].accepted;
                proposed += ch.acceptance[i].proposed;
            }
            let rate = if proposed == 0 { f64::NAN } else { accepted as f64 / proposed as f64 };
            out.push(MoveSummary { name: m.name.clone(), rate });
        }
        out
    }

    pub fn meta(&self, cfg: &ChainConfig) -> PosteriorMeta {
        PosteriorMeta {
            model: self.model,
            config: cfg.clone(),
            n_chains: self.chains.len(),
            n_draws: self.n_draws(),
            parameters: self.diagnostics(),
            acceptance: self.acceptance_summary(),
        }
    }

    /// Writes every draw as one CSV row: chain and draw indices, the sampled
    /// parameters, then the latent path with one `c_{time}` column per site.
    /// Floats print in shortest round-trip form.
    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        let mut header: Vec<String> = vec!["chain".into(), "draw".into()];
        header.extend(self.param_names.iter().cloned());
        for t in &self.site_times {
            header.push(format!("c_{t}"));
        }
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for ch in &self.chains {
            for (k, d) in ch.draws.iter().enumerate() {
                let mut row: Vec<String> = vec![format!("{}", ch.chain), format!("{k}")];
                for name in &self.param_names {
                    row.push(format!("{}", extract_param(&d.theta, name)));
                }
                for v in &d.c {
                    row.push(format!("{v}"));
                }
                w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

/// Reloads a sample table written by `write_samples_csv`. The acceptance
/// tables are not stored in the CSV and come back empty; rates live in the
/// run metadata.
pub fn read_samples_csv(path: &Path, model: &FitModel) -> Result<Posterior> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "chain" || cols[1] != "draw" {
        return Err(Error::Data(format!(
            "{} does not look like a sample table: expected chain,draw,... header",
            path.display()
        )));
    }
    let first_c = cols
        .iter()
        .position(|c| c.starts_with("c_"))
        .ok_or_else(|| Error::Data("sample table has no latent c_ columns".into()))?;
    let param_names: Vec<String> = cols[2..first_c].iter().map(|s| s.to_string()).collect();
    let mut site_times = Vec::new();
    for c in &cols[first_c..] {
        let t: f64 = c
            .strip_prefix("c_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad latent column name {c}")))?;
        site_times.push(t);
    }
    let expected = sampled_param_names(model, param_names.iter().filter(|n| n.starts_with("beta_") && *n != "beta_v").count());
    if param_names != expected {
        return Err(Error::Data(format!(
            "sample table columns {param_names:?} do not match the declared model, expected {expected:?}"
        )));
    }
    let covariate_dim = param_names.iter().filter(|n| n.starts_with("beta_") && *n != "beta_v").count();

    let mut chains: Vec<ChainRun> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        let parse = |idx: usize| -> Result<f64> {
            rec[idx]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("row {}: bad number {:?}", line + 2, &rec[idx])))
        };
        let chain: usize = rec[0]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad chain index {:?}", line + 2, &rec[0])))?;
        while chains.len() <= chain {
            let idx = chains.len();
            chains.push(ChainRun { chain: idx, draws: Vec::new(), acceptance: Vec::new() });
        }
        let mut phi = MechParams {
            g: 0.0,
            q: 0.0,
            q_l: 0.0,
            q_r: 0.0,
            eps_l: 0.0,
            eps_lf: 0.0,
            eps_rf: 0.0,
            volume: model.volume,
        };
        let mut obs = ObsParams { beta: vec![0.0; covariate_dim], sigma2_v: 0.0 };
        let mut proc = ProcParams {
            kind: model.kind,
            phi: phi.clone(),
            m_w: 0.0,
            sigma2_w: 0.0,
            alpha_v: 0.0,
            beta_v: 1.0,
            dynamic_variance: model.dynamic_variance,
        };
        for (j, name) in param_names.iter().enumerate() {
            let val = parse(2 + j)?;
            match name.as_str() {
                "sigma2_v" => obs.sigma2_v = val,
                "sigma2_w" => proc.sigma2_w = val,
                "m_w" => proc.m_w = val,
                "alpha_v" => proc.alpha_v = val,
                "beta_v" => proc.beta_v = val,
                other => {
                    if let Some(k) = other.strip_prefix("beta_").and_then(|s| s.parse::<usize>().ok()) {
                        obs.beta[k - 1] = val;
                    } else {
                        set_mech(&mut phi, other, val);
                    }
                }
            }
        }
        proc.phi = phi;
        let c: Result<Vec<f64>> = (first_c..cols.len()).map(parse).collect();
        chains[chain].draws.push(Draw { theta: ThetaState { obs, process: proc }, c: c? });
    }
    if chains.iter().any(|c| c.draws.is_empty()) {
        return Err(Error::Data("sample table has a chain with no rows".into()));
    }
    Ok(Posterior {
        model: *model,
        site_times,
        param_names,
        chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{simulate_experiment, standard_schedule};
    use crate::state_space::log_joint;
    use approx::assert_relative_eq;

    fn sim_setup(
        kind: ModelKind,
        sigma2_v: f64,
        n_cycles: usize,
        seed: u64,
    ) -> (MechParams, CycleSchedule, MeasurementSeries) {
        let p = MechParams {
            g: 900.0,
            q: 25.0,
            q_l: 5.0,
            q_r: 5.0,
            eps_l: 0.5,
            eps_lf: 0.5,
            eps_rf: 0.8,
            volume: 100.0,
            }
            .constrained(kind);
        let s = standard_schedule(n_cycles, 15.0, 30.0, 10.0, 1.0).unwrap();
        let sim = simulate_experiment(&p, kind, &s, sigma2_v, &[], None, 1.0, seed).unwrap();
        (p, s, sim.series)
    }

    #[test]
    fn invgamma_draw_matches_its_density_mean() {
        let mut rng = substream(7, "invgamma-test");
        let (a, b) = (12.0, 22.0);
        let n = 4000;
        let m = (0..n).map(|_| invgamma_draw(&mut rng, a, b)).sum::<f64>() / n as f64;
        assert_relative_eq!(m, b / (a - 1.0), epsilon = 0.05);
    }

    #[test]
    fn nig_posterior_hand_case() {
        let rows: Vec<&[f64]> = vec![&[1.0], &[1.0], &[1.0]];
        let r = [1.0, 2.0, 3.0];
        let nig = nig_posterior(&rows, &r, 1.0, 0.0, 3.0, 1.0);
        assert_relative_eq!(nig.m_n[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(nig.a_n, 4.5, epsilon = 1e-12);
        assert_relative_eq!(nig.b_n, 3.5, epsilon = 1e-12);
        assert_relative_eq!(nig.chol[0][0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let l = cholesky(&a);
        assert_relative_eq!(l[0][0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(l[1][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(l[1][1], 2.0f64.sqrt(), epsilon = 1e-12);
        let x = chol_solve(&l, &[10.0, 8.0]);
        assert_relative_eq!(4.0 * x[0] + 2.0 * x[1], 10.0, epsilon = 1e-10);
        assert_relative_eq!(2.0 * x[0] + 3.0 * x[1], 8.0, epsilon = 1e-10);
        let w = backsolve_transpose(&l, &[1.0, 0.0]);
        assert_relative_eq!(l[0][0] * w[0] + l[1][0] * w[1], 1.0, epsilon = 1e-10);
        assert_relative_eq!(l[1][1] * w[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn logit_walk_helpers_invert() {
        let b = UniformPrior { lo: 3.0, hi: 50.0 };
        for &x in &[3.1, 10.0, 26.5, 49.9] {
            assert_relative_eq!(from_unconstrained(to_unconstrained(x, b), b), x, epsilon = 1e-9);
        }
        // d/du of lo + w sigmoid(u) is w sigma (1 - sigma); check the log form.
        let u = 0.7;
        let s = sigmoid(u);
        assert_relative_eq!(logit_jacobian_ln(u), (s * (1.0 - s)).ln(), epsilon = 1e-12);
    }

    #[test]
    fn chains_are_reproducible_and_distinct() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 11);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 30, n_burn: 60, seed: 42, ..ChainConfig::default() };
        let prior = PriorSpec::default();
        let a = run_chain(&model, &prior, &s, &series, &cfg, 0).unwrap();
        let b = run_chain(&model, &prior, &s, &series, &cfg, 0).unwrap();
        let last_a = a.draws.last().unwrap();
        let last_b = b.draws.last().unwrap();
        assert_eq!(last_a.theta.process.phi.g.to_bits(), last_b.theta.process.phi.g.to_bits());
        assert_eq!(last_a.c[5].to_bits(), last_b.c[5].to_bits());
        let other = run_chain(&model, &prior, &s, &series, &cfg, 1).unwrap();
        assert_ne!(
            last_a.theta.process.phi.g.to_bits(),
            other.draws.last().unwrap().theta.process.phi.g.to_bits()
        );
    }

    #[test]
    fn short_run_recovers_the_plain_box_roughly() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 2, 3);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 250, n_burn: 400, seed: 9, ..ChainConfig::default() };
        let prior = PriorSpec::default();
        let post = run_chains(&model, &prior, &s, &series, &cfg, 2).unwrap();
        assert_eq!(post.n_draws(), 500);

        let g = post.param("G");
        let q = post.param("Q");
        let g_mean = mean(&g);
        let q_mean = mean(&q);
        assert!(g_mean > 500.0 && g_mean < 1400.0, "G mean {g_mean}");
        assert!(q_mean > 12.0 && q_mean < 40.0, "Q mean {q_mean}");

        let acc = post.acceptance_summary();
        let latent = acc.iter().find(|m| m.name == "latent sites").unwrap();
        assert!(latent.rate > 0.2 && latent.rate < 0.7, "latent rate {}", latent.rate);

        // The kept states all sit inside the support of the joint density.
        let ctx = ModelContext::new(&s, &series, None).unwrap();
        let d = post.chains[0].draws.first().unwrap();
        assert!(log_joint(&d.theta, &d.c, &ctx, &prior).is_finite());
    }

    #[test]
    fn skeleton_rescale_inverts_and_moves_skeletons_exactly() {
        let (p, s, series) = sim_setup(ModelKind::Model101, 0.05, 2, 17);
        let ctx = ModelContext::new(&s, &series, None).unwrap();
        let mk_theta = |g: f64, q: f64| ThetaState {
            obs: ObsParams { beta: vec![], sigma2_v: 0.01 },
            process: ProcParams {
                kind: ModelKind::Model101,
                phi: MechParams { g, q, ..p }.constrained(ModelKind::Model101),
                m_w: -1.0,
                sigma2_w: 0.3,
                alpha_v: 0.0,
                beta_v: 1.0,
                dynamic_variance: false,
            },
        };
        let th_a = mk_theta(900.0, 25.0);
        let th_b = mk_theta(600.0, 18.0);
        let c = initial_latents(&th_a, &ctx);

        let (fwd, det_fwd) = skeleton_rescale(&c, &th_a, &th_b, &ctx);
        let (back, det_back) = skeleton_rescale(&fwd, &th_b, &th_a, &ctx);
        for (orig, round) in c.iter().zip(&back) {
            assert_relative_eq!(orig, round, max_relative = 1e-12);
        }
        assert_relative_eq!(det_fwd, -det_back, epsilon = 1e-12);

        // A path lying exactly on the old skeleton lands exactly on the new one.
        let (skel_a, _) = skeleton_rescale(&c, &th_a, &th_a, &ctx);
        assert_eq!(skel_a, c);
        let mut on_skel = c.clone();
        let mut run = 0.0;
        for (i, site) in ctx.layout.sites.iter().enumerate() {
            match site.kind {
                SiteKind::CycleStart { .. } => run = c[i],
                SiteKind::Measured { .. } => {
                    run = transition_shift(run, site.time, &th_a.process, &s);
                    on_skel[i] = run;
                }
            }
        }
        let (mapped, _) = skeleton_rescale(&on_skel, &th_a, &th_b, &ctx);
        let mut run_b = 0.0;
        for (i, site) in ctx.layout.sites.iter().enumerate() {
            match site.kind {
                SiteKind::CycleStart { .. } => run_b = on_skel[i],
                SiteKind::Measured { .. } => {
                    run_b = transition_shift(run_b, site.time, &th_b.process, &s);
                    assert_relative_eq!(mapped[i], run_b, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn path_shift_move_is_exercised() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 29);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 200, n_burn: 300, seed: 31, ..ChainConfig::default() };
        let post = run_chains(&model, &PriorSpec::default(), &s, &series, &cfg, 1).unwrap();
        let acc = post.acceptance_summary();
        let shift = acc.iter().find(|m| m.name == "path shift").unwrap();
        assert!(shift.rate > 0.0, "path shift never accepted");
        assert!(shift.rate < 1.0, "path shift never rejected");
    }

    #[test]
    fn noisy_decay_data_still_starts_in_support() {
        // Large observation noise makes raw measurements violate the
        // one-step support frequently; the repair pass must cope.
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.3, 2, 21);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 10, n_burn: 20, seed: 5, ..ChainConfig::default() };
        let run = run_chain(&model, &PriorSpec::default(), &s, &series, &cfg, 0);
        assert!(run.is_ok(), "{run:?}");
    }

    #[test]
    fn fixed_hyperparameters_stay_fixed_and_flag_degenerate() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 13);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig {
            n_keep: 40,
            n_burn: 60,
            seed: 1,
            fixed: FixedParams { sigma2_v: Some(0.05), sigma2_w: Some(0.3), m_w: Some(-0.15) },
            ..ChainConfig::default()
        };
        let post = run_chains(&model, &PriorSpec::default(), &s, &series, &cfg, 1).unwrap();
        for d in post.draws() {
            assert_eq!(d.theta.obs.sigma2_v, 0.05);
            assert_eq!(d.theta.process.sigma2_w, 0.3);
            assert_eq!(d.theta.process.m_w, -0.15);
        }
        let diag = post.diagnostics();
        for name in ["sigma2_v", "sigma2_w", "m_w"] {
            let p = diag.iter().find(|p| p.name == name).unwrap();
            assert!(p.degenerate, "{name} should be degenerate");
            assert!(p.rhat.is_none());
        }
        let g = diag.iter().find(|p| p.name == "G").unwrap();
        assert!(!g.degenerate);
    }

    #[test]
    fn controlled_box_samples_all_seven_parameters() {
        let (_, s, series) = sim_setup(ModelKind::Model111, 0.05, 1, 17);
        let model = FitModel { kind: ModelKind::Model111, volume: 100.0, dynamic_variance: true };
        let cfg = ChainConfig { n_keep: 50, n_burn: 100, seed: 2, ..ChainConfig::default() };
        let prior = PriorSpec::default();
        let post = run_chains(&model, &prior, &s, &series, &cfg, 1).unwrap();
        assert_eq!(post.param_names.len(), 7 + 3 + 2);
        for name in &post.param_names {
            let xs = post.param(name);
            assert!(xs.iter().all(|v| v.is_finite()), "{name} finite");
        }
        for d in post.draws() {
            assert!(prior.q_l.contains(d.theta.process.phi.q_l));
            assert!(prior.eps_rf.contains(d.theta.process.phi.eps_rf));
            assert!(prior.alpha_v.contains(d.theta.process.alpha_v));
            assert!(prior.beta_v.contains(d.theta.process.beta_v));
        }
        let acc = post.acceptance_summary();
        assert!(acc.iter().any(|m| m.name == "flow block"));
        assert!(acc.iter().any(|m| m.name == "alpha_v"));
    }

    #[test]
    fn ess_matches_ar1_theory() {
        let mut rng = substream(3, "ar1-test");
        let rho = 0.9f64;
        let n = 20000;
        let mut x = Vec::with_capacity(n);
        let mut cur = 0.0;
        for _ in 0..n + 100 {
            let z: f64 = rng.sample(StandardNormal);
            cur = rho * cur + z;
            x.push(cur);
        }
        let x = &x[100..];
        let ess = ess_geyer(x);
        let expect = x.len() as f64 * (1.0 - rho) / (1.0 + rho);
        assert!(
            ess > 0.7 * expect && ess < 1.5 * expect,
            "ess {ess} vs theoretical {expect}"
        );
    }

    #[test]
    fn ess_of_white_noise_is_near_n() {
        let mut rng = substream(4, "white-test");
        let x: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ess = ess_geyer(&x);
        assert!(ess > 2500.0, "ess {ess}");
    }

    #[test]
    fn split_rhat_separates_agreement_from_disagreement() {
        let mut r1 = substream(5, "rhat-a");
        let mut r2 = substream(5, "rhat-b");
        let a: Vec<f64> = (0..2000).map(|_| r1.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..2000).map(|_| r2.sample::<f64, _>(StandardNormal)).collect();
        let same = split_rhat(&[&a, &b]).unwrap();
        assert!(same < 1.05, "rhat {same}");
        let shifted: Vec<f64> = b.iter().map(|v| v + 5.0).collect();
        let apart = split_rhat(&[&a, &shifted]).unwrap();
        assert!(apart > 1.5, "rhat {apart}");
        assert!(split_rhat(&[&vec![1.0; 100][..]]).is_none());
    }

    #[test]
    fn samples_csv_round_trips_bitwise() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 19);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 12, n_burn: 30, seed: 6, ..ChainConfig::default() };
        let post = run_chains(&model, &PriorSpec::default(), &s, &series, &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        post.write_samples_csv(&path).unwrap();
        let back = read_samples_csv(&path, &model).unwrap();
        assert_eq!(back.param_names, post.param_names);
        assert_eq!(back.site_times, post.site_times);
        assert_eq!(back.chains.len(), 2);
        for (c1, c2) in post.chains.iter().zip(&back.chains) {
            assert_eq!(c1.draws.len(), c2.draws.len());
            for (d1, d2) in c1.draws.iter().zip(&c2.draws) {
                assert_eq!(d1.theta.process.phi.g.to_bits(), d2.theta.process.phi.g.to_bits());
                assert_eq!(d1.theta.obs.sigma2_v.to_bits(), d2.theta.obs.sigma2_v.to_bits());
                for (a, b) in d1.c.iter().zip(&d2.c) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn meta_json_round_trips_and_has_no_timestamps() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 23);
        let model = FitModel { kind: ModelKind::Model101, volume: 100.0, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 10, n_burn: 20, seed: 8, ..ChainConfig::default() };
        let post = run_chains(&model, &PriorSpec::default(), &s, &series, &cfg, 1).unwrap();
        let meta = post.meta(&cfg);
        let text = serde_json::to_string_pretty(&meta).unwrap();
        let again: PosteriorMeta = serde_json::from_str(&text).unwrap();
        assert_eq!(again, meta);
        let text2 = serde_json::to_string_pretty(&post.meta(&cfg)).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn config_validation_rejects_bad_runs() {
        let cfg = ChainConfig { n_keep: 0, ..ChainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ChainConfig { thin: 0, ..ChainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ChainConfig {
            fixed: FixedParams { sigma2_v: Some(-1.0), ..FixedParams::default() },
            ..ChainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn coarse_grid_errors_at_startup() {
        let (_, s, series) = sim_setup(ModelKind::Model101, 0.05, 1, 29);
        let model = FitModel { kind: ModelKind::Model101, volume: 0.5, dynamic_variance: false };
        let cfg = ChainConfig { n_keep: 5, n_burn: 5, ..ChainConfig::default() };
        let err = run_chain(&model, &PriorSpec::default(), &s, &series, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("step size too coarse"), "{err}");
    }
}
