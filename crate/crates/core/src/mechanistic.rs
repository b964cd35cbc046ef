//! Deterministic one-box models of a well-mixed room.
//!
//! Two nested variants are supported. The plain box balances a contaminant
//! generation rate G (mg/min) against general ventilation Q (m3/min) in a
//! room of volume V (m3):
//!
//! ```text
//! V dC/dt = G - C Q
//! ```
//!
//! The controlled box adds a local exhaust line at flow Q_L that captures a
//! fraction eps_L of the source and returns through a filter of efficiency
//! eps_LF, plus a recirculating room filtration line at flow Q_R with filter
//! efficiency eps_RF:
//!
//! ```text
//! V dC/dt = (1 - eps_L eps_LF) G - C (Q + eps_LF Q_L + eps_RF Q_R)
//! ```
//!
//! Both collapse to an effective source G' = (1 - eps_L eps_LF) G and an
//! effective removal flow Q' = Q + eps_LF Q_L + eps_RF Q_R. Everything in
//! this module is written against (G', Q'). With the generator running until
//! time T0 and off afterwards, the concentration follows the rise/decay pair
//!
//! ```text
//! C(t) = C0 e^(-(Q'/V) t) + (G'/Q')(1 - e^(-(Q'/V) t))    t <= T0
//! C(t) = C(T0) e^(-(Q'/V)(t - T0))                        t >  T0
//! ```
//!
//! Units are minutes, cubic meters, and milligrams throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which box variant the parameters are interpreted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Ventilation only. Control-device parameters are forced to zero.
    #[serde(rename = "101")]
    Model101,
    /// Local exhaust with return filtration plus room recirculation filtration.
    #[serde(rename = "111")]
    Model111,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Model101 => write!(f, "101"),
            ModelKind::Model111 => write!(f, "111"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "101" => Ok(ModelKind::Model101),
            "111" => Ok(ModelKind::Model111),
            other => Err(Error::Config(format!("unknown model kind {other:?}, expected \"101\" or \"111\""))),
        }
    }
}

/// Physical parameters of the box. `volume` is the known room volume; the
/// rest are the quantities inference targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechParams {
    /// Generation rate G, mg/min.
    #[serde(rename = "G")]
    pub g: f64,
    /// General ventilation rate Q, m3/min.
    #[serde(rename = "Q")]
    pub q: f64,
    /// Local exhaust flow Q_L, m3/min.
    #[serde(rename = "Q_L")]
    pub q_l: f64,
    /// Recirculation flow Q_R, m3/min.
    #[serde(rename = "Q_R")]
    pub q_r: f64,
    /// Fraction of the source captured by the local exhaust.
    #[serde(rename = "eps_L")]
    pub eps_l: f64,
    /// Filter efficiency on the local exhaust return.
    #[serde(rename = "eps_LF")]
    pub eps_lf: f64,
    /// Filter efficiency on the recirculation line.
    #[serde(rename = "eps_RF")]
    pub eps_rf: f64,
    /// Room volume V, m3.
    #[serde(rename = "V")]
    pub volume: f64,
}

impl MechParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("G", self.g),
            ("Q", self.q),
            ("Q_L", self.q_l),
            ("Q_R", self.q_r),
            ("eps_l", self.eps_l),
            ("eps_lf", self.eps_lf),
            ("eps_rf", self.eps_rf),
            ("V", self.volume),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.g < 0.0 || self.q < 0.0 || self.q_l < 0.0 || self.q_r < 0.0 {
            return Err(Error::Config("rates G, Q, Q_L, Q_R must be nonnegative".into()));
        }
        for (name, e) in [("eps_l", self.eps_l), ("eps_lf", self.eps_lf), ("eps_rf", self.eps_rf)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {e}")));
            }
        }
        if self.volume <= 0.0 {
            return Err(Error::Config(format!("V must be positive, got {}", self.volume)));
        }
        Ok(())
    }

    /// Returns the parameters as interpreted under `kind`: the plain box
    /// zeroes every control-device parameter, the controlled box passes
    /// through unchanged.
    pub fn constrained(&self, kind: ModelKind) -> MechParams {
        match kind {
            ModelKind::Model101 => MechParams { q_l: 0.0, q_r: 0.0, eps_l: 0.0, eps_lf: 0.0, eps_rf: 0.0, ..*self },
            ModelKind::Model111 => *self,
        }
    }
}

/// The (G', Q') pair both box variants reduce to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    /// Effective source strength G' = (1 - eps_L eps_LF) G, mg/min.
    pub g_eff: f64,
    /// Effective removal flow Q' = Q + eps_LF Q_L + eps_RF Q_R, m3/min.
    pub q_eff: f64,
}

pub fn effective_params(p: &MechParams, kind: ModelKind) -> Result<EffectiveParams> {
    p.validate()?;
    let p = p.constrained(kind);
    Ok(EffectiveParams {
        g_eff: (1.0 - p.eps_l * p.eps_lf) * p.g,
        q_eff: p.q + p.eps_lf * p.q_l + p.eps_rf * p.q_r,
    })
}

/// Closed-form concentration at time `t` minutes after the generator starts,
/// given that it switches off at `t_gen_off`. `t` must be nonnegative and
/// `q_eff` strictly positive.
pub fn concentration_closed_form(t: f64, c0: f64, eff: &EffectiveParams, volume: f64, t_gen_off: f64) -> f64 {
    assert!(t >= 0.0, "time must be nonnegative");
    assert!(eff.q_eff > 0.0 && volume > 0.0);
    let rate = eff.q_eff / volume;
    let saturation = eff.g_eff / eff.q_eff;
    let rise = |tau: f64| c0 * (-rate * tau).exp() + saturation * (1.0 - (-rate * tau).exp());
    if t <= t_gen_off {
        rise(t)
    } else {
        rise(t_gen_off) * (-rate * (t - t_gen_off)).exp()
    }
}

/// One-step coefficients of the discretized box: the concentration after a
/// step of `dt` minutes is A*C + B with A = 1 - Q' dt / V and
/// B = G' dt / V when the generator ran during the step, else 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    pub a: f64,
    pub b: f64,
}

pub fn transition_coefficients(p: &MechParams, kind: ModelKind, dt: f64, gen_on: bool) -> Result<TransitionCoeffs> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive and finite, got {dt}")));
    }
    let eff = effective_params(p, kind)?;
    let shrink = eff.q_eff * dt / p.volume;
    if shrink >= 1.0 {
        return Err(Error::Numerics(format!(
            "step size too coarse: Q' dt / V = {shrink} >= 1; shrink dt or revisit the flows"
        )));
    }
    Ok(TransitionCoeffs {
        a: 1.0 - shrink,
        b: if gen_on { eff.g_eff * dt / p.volume } else { 0.0 },
    })
}

/// Long-run concentration with the generator held on, G'/Q'.
pub fn steady_state(eff: &EffectiveParams) -> f64 {
    assert!(eff.q_eff > 0.0);
    eff.g_eff / eff.q_eff
}

/// Concentration averaged over [0, T] along the rise curve started from a
/// clean room:
///
/// ```text
/// C_avg = (G'/Q') [1 - (1 - e^(-(Q'/V) T)) / ((Q'/V) T)]
/// ```
pub fn average_concentration(eff: &EffectiveParams, volume: f64, t_total: f64) -> f64 {
    assert!(eff.q_eff > 0.0 && volume > 0.0);
    assert!(t_total > 0.0, "averaging window must be positive");
    let x = eff.q_eff / volume * t_total;
    steady_state(eff) * (1.0 - (1.0 - (-x).exp()) / x)
}

/// Minutes for the concentration to fall from `c_from` to `c_to` under pure
/// decay, (V/Q') ln(c_from/c_to). Requires `c_from > c_to > 0`.
pub fn decay_time(eff: &EffectiveParams, volume: f64, c_from: f64, c_to: f64) -> Result<f64> {
    if !(c_to > 0.0 && c_from > c_to) {
        return Err(Error::Config(format!(
            "decay time needs c_from > c_to > 0, got c_from = {c_from}, c_to = {c_to}"
        )));
    }
    assert!(eff.q_eff > 0.0 && volume > 0.0);
    Ok(volume / eff.q_eff * (c_from / c_to).ln())
}

/// Air-change-equivalent removal rate, 60 Q'/V per hour.
pub fn removal_rate_per_hour(eff: &EffectiveParams, volume: f64) -> f64 {
    assert!(volume > 0.0);
    60.0 * eff.q_eff / volume
}
