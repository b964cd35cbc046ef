//! Chamber-experiment layout, simulation, and measurement IO.
//!
//! An experiment is a sequence of generate-and-measure cycles. Cycle i
//! starts at `start` (minute s_i), runs the particle generator until
//! `gen_end`, and records concentrations at the minutes in `measure`, one
//! sample every `dt` starting at s_i + dt. Between the last sample of a
//! cycle and the start of the next the room sits unobserved in background
//! decay.
//!
//! Measurement CSVs carry one row per sample:
//!
//! ```text
//! time_min,cycle,generator_on,concentration[,x1,x2,...]
//! ```
//!
//! `generator_on` records whether the generator ran during the sample's own
//! interval (t - dt, t]; the loader reconstructs each cycle's generation
//! window from it. Optional trailing columns x1..xp are observation-level
//! covariates.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanistic::{concentration_closed_form, effective_params, MechParams, ModelKind};
use crate::rng::substream;

/// One generate-and-measure cycle. Invariants: `start <= gen_end <= last
/// measure`, samples strictly increasing on the `dt` grid starting at
/// `start + dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub start: f64,
    pub gen_end: f64,
    pub measure: Vec<f64>,
}

impl Cycle {
    pub fn last_measure(&self) -> f64 {
        *self.measure.last().expect("validated cycle has samples")
    }
}

/// Full experiment layout on a uniform `dt` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSchedule {
    pub dt: f64,
    pub cycles: Vec<Cycle>,
}

impl CycleSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive and finite, got {}", self.dt)));
        }
        if self.cycles.is_empty() {
            return Err(Error::Config("schedule needs at least one cycle".into()));
        }
        let tol = 1e-6 * self.dt;
        let mut prev_end = f64::NEG_INFINITY;
        for (i, c) in self.cycles.iter().enumerate() {
            let label = i + 1;
            if c.measure.is_empty() {
                return Err(Error::Config(format!("cycle {label} has no samples")));
            }
            if !c.start.is_finite() || c.start < 0.0 {
                return Err(Error::Config(format!("cycle {label} start must be nonnegative, got {}", c.start)));
            }
            if c.gen_end < c.start - tol {
                return Err(Error::Config(format!("cycle {label} generation window ends before it starts")));
            }
            if c.gen_end > c.last_measure() + tol {
                return Err(Error::Config(format!("cycle {label} generation window extends past its last sample")));
            }
            if i > 0 && c.start <= prev_end + tol {
                return Err(Error::Config(format!("cycle {label} starts before cycle {} ends", label - 1)));
            }
            let mut prev = c.start;
            for &t in &c.measure {
                if (t - prev - self.dt).abs() > tol {
                    return Err(Error::Config(format!(
                        "cycle {label} samples must sit on the dt grid: expected {}, got {t}",
                        prev + self.dt
                    )));
                }
                prev = t;
            }
            prev_end = c.last_measure();
        }
        Ok(())
    }

    /// Last sampled minute of the experiment.
    pub fn horizon(&self) -> f64 {
        self.cycles.last().expect("validated schedule has cycles").last_measure()
    }

    /// Whether the generator is running at instant `t`, i.e. whether `t`
    /// falls in some half-open window [start, gen_end). `t` must lie inside
    /// the experiment, [0, horizon].
    pub fn generation_indicator(&self, t: f64) -> Result<bool> {
        if !t.is_finite() || t < 0.0 || t > self.horizon() {
            return Err(Error::Config(format!(
                "time {t} outside the experiment window [0, {}]",
                self.horizon()
            )));
        }
        Ok(self.cycles.iter().any(|c| t >= c.start && t < c.gen_end))
    }

    /// Whether the generator ran during the grid step that ends at `t`,
    /// i.e. during (t - dt, t]. Evaluating the window at the step's left
    /// endpoint makes the discretized model the explicit Euler scheme of the
    /// box equation, so the discrete peak lands at gen_end like the closed
    /// form's. Quarter-step slack absorbs float noise in grid arithmetic.
    pub fn generation_during_step_into(&self, t: f64) -> bool {
        let u = t - self.dt;
        self.cycles
            .iter()
            .any(|c| u - c.start > -0.25 * self.dt && c.gen_end - u > 0.25 * self.dt)
    }

    /// Index of the cycle whose sampled span [start, last_measure] contains
    /// `t`, if any.
    pub fn cycle_containing(&self, t: f64) -> Option<usize> {
        let tol = 1e-6 * self.dt;
        self.cycles
            .iter()
            .position(|c| t >= c.start - tol && t <= c.last_measure() + tol)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<CycleSchedule> {
        let s: CycleSchedule =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad schedule JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

/// Builds the conventional layout: `n_cycles` identical cycles, each with a
/// `rise_min`-minute generation window, `measure_min` of sampling at `dt`
/// spacing, and `gap_min` of unobserved background before the next cycle.
pub fn standard_schedule(n_cycles: usize, rise_min: f64, measure_min: f64, gap_min: f64, dt: f64) -> Result<CycleSchedule> {
    if n_cycles == 0 {
        return Err(Error::Config("need at least one cycle".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive and finite, got {dt}")));
    }
    if rise_min < 0.0 || rise_min > measure_min {
        return Err(Error::Config(format!(
            "generation window must fit the sampled span: rise_min = {rise_min}, measure_min = {measure_min}"
        )));
    }
    if n_cycles > 1 && gap_min <= 0.0 {
        return Err(Error::Config("multi-cycle layouts need a positive gap between cycles".into()));
    }
    let steps = measure_min / dt;
    if (steps - steps.round()).abs() > 1e-6 || steps < 0.5 {
        return Err(Error::Config(format!("measure_min = {measure_min} is not a multiple of dt = {dt}")));
    }
    let steps = steps.round() as usize;
    let cycles = (0..n_cycles)
        .map(|i| {
            let start = i as f64 * (measure_min + gap_min);
            Cycle {
                start,
                gen_end: start + rise_min,
                measure: (1..=steps).map(|k| start + k as f64 * dt).collect(),
            }
        })
        .collect();
    let s = CycleSchedule { dt, cycles };
    s.validate()?;
    Ok(s)
}

/// Observed series aligned to a schedule's samples, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub times: Vec<f64>,
    /// Measured concentrations, strictly positive.
    pub y: Vec<f64>,
    /// Optional covariate rows, one per sample, all the same width.
    pub x: Option<Vec<Vec<f64>>>,
}

impl MeasurementSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Covariate width, zero when absent.
    pub fn covariate_dim(&self) -> usize {
        self.x.as_ref().map_or(0, |rows| rows.first().map_or(0, Vec::len))
    }

    pub fn covariates_for(&self, idx: usize) -> &[f64] {
        match &self.x {
            Some(rows) => &rows[idx],
            None => &[],
        }
    }

    pub fn validate(&self, s: &CycleSchedule) -> Result<()> {
        let expected: Vec<f64> = s.cycles.iter().flat_map(|c| c.measure.iter().copied()).collect();
        if self.times.len() != expected.len() || self.y.len() != expected.len() {
            return Err(Error::Data(format!(
                "series has {} samples but the schedule defines {}",
                self.times.len().min(self.y.len()),
                expected.len()
            )));
        }
        let tol = 1e-6 * s.dt;
        for (t, e) in self.times.iter().zip(&expected) {
            if (t - e).abs() > tol {
                return Err(Error::Data(format!("sample time {t} does not match schedule time {e}")));
            }
        }
        for (i, &y) in self.y.iter().enumerate() {
            if !y.is_finite() || y <= 0.0 {
                return Err(Error::Data(format!("sample {}: concentration must be positive, got {y}", i + 1)));
            }
        }
        if let Some(rows) = &self.x {
            if rows.len() != self.times.len() {
                return Err(Error::Data("covariate rows do not match sample count".into()));
            }
            let p = rows[0].len();
            for (i, row) in rows.iter().enumerate() {
                if row.len() != p {
                    return Err(Error::Data(format!("sample {}: expected {p} covariates, got {}", i + 1, row.len())));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("sample {}: covariates must be finite", i + 1)));
                }
            }
        }
        Ok(())
    }
}

/// Simulated experiment: the noiseless latent path at the model's support
/// points (each cycle start plus every sample time) and the noisy series.
#[derive(Debug, Clone)]
pub struct SimulatedExperiment {
    pub latent_times: Vec<f64>,
    pub latent: Vec<f64>,
    pub series: MeasurementSeries,
}

/// Simulates an experiment: the latent path follows the closed-form
/// rise/decay solution within each cycle, decays at the raw ventilation rate
/// Q/V across unobserved gaps, and observations are lognormal around the
/// latent path,
///
/// ```text
/// log Y_t = log C_t + x_t' beta + N(0, sigma2_v).
/// ```
///
/// Identical seeds reproduce the series bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn simulate_experiment(
    p: &MechParams,
    kind: ModelKind,
    s: &CycleSchedule,
    sigma2_v: f64,
    beta: &[f64],
    x: Option<&[Vec<f64>]>,
    c0: f64,
    seed: u64,
) -> Result<SimulatedExperiment> {
    s.validate()?;
    let eff = effective_params(p, kind)?;
    if eff.q_eff <= 0.0 {
        return Err(Error::Config("effective removal flow Q' must be positive to simulate".into()));
    }
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::Config(format!("initial concentration must be positive, got {c0}")));
    }
    if !(sigma2_v >= 0.0) || !sigma2_v.is_finite() {
        return Err(Error::Config(format!("sigma2_v must be nonnegative, got {sigma2_v}")));
    }
    let n: usize = s.cycles.iter().map(|c| c.measure.len()).sum();
    if !beta.is_empty() {
        let rows = x.ok_or_else(|| Error::Config("beta given but no covariates supplied".into()))?;
        if rows.len() != n {
            return Err(Error::Config(format!("expected {n} covariate rows, got {}", rows.len())));
        }
        if rows.iter().any(|r| r.len() != beta.len()) {
            return Err(Error::Config("covariate rows must match beta's length".into()));
        }
    }
    let q_raw = p.constrained(kind).q;
    let volume = p.volume;

    let mut rng = substream(seed, "simulate/measurement-noise");
    let noise = Normal::new(0.0, sigma2_v.sqrt()).expect("finite std dev");

    let mut latent_times = Vec::with_capacity(n + s.cycles.len());
    let mut latent = Vec::with_capacity(n + s.cycles.len());
    let mut times = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut xs: Vec<Vec<f64>> = Vec::new();

    let mut c_start = c0;
    let mut obs_idx = 0usize;
    for (i, cycle) in s.cycles.iter().enumerate() {
        if i > 0 {
            let prev = &s.cycles[i - 1];
            let gap = cycle.start - prev.last_measure();
            c_start *= (-(q_raw / volume) * gap).exp();
        }
        latent_times.push(cycle.start);
        latent.push(c_start);
        let t_gen_off = cycle.gen_end - cycle.start;
        for &t in &cycle.measure {
            let c = concentration_closed_form(t - cycle.start, c_start, &eff, volume, t_gen_off);
            latent_times.push(t);
            latent.push(c);
            let shift = match x {
                Some(rows) if !beta.is_empty() => beta.iter().zip(&rows[obs_idx]).map(|(b, v)| b * v).sum(),
                _ => 0.0,
            };
            let eps: f64 = if sigma2_v > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            times.push(t);
            y.push((c.ln() + shift + eps).exp());
            if let Some(rows) = x {
                xs.push(rows[obs_idx].clone());
            }
            obs_idx += 1;
        }
        c_start = *latent.last().expect("cycle pushed samples");
    }

    let series = MeasurementSeries { times, y, x: if xs.is_empty() { None } else { Some(xs) } };
    series.validate(s)?;
    Ok(SimulatedExperiment { latent_times, latent, series })
}

const REQUIRED_COLUMNS: [&str; 4] = ["time_min", "cycle", "generator_on", "concentration"];

/// Writes a series in the measurement CSV format. Floats use the shortest
/// round-trip representation, so identical inputs give identical bytes.
pub fn write_measurements(path: &Path, s: &CycleSchedule, series: &MeasurementSeries) -> Result<()> {
    series.validate(s)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    let p = series.covariate_dim();
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut idx = 0usize;
    for (ci, cycle) in s.cycles.iter().enumerate() {
        for &t in &cycle.measure {
            let gen = s.generation_during_step_into(t);
            let mut row = vec![
                format!("{t}"),
                format!("{}", ci + 1),
                if gen { "1".into() } else { "0".into() },
                format!("{}", series.y[idx]),
            ];
            row.extend(series.covariates_for(idx).iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
            idx += 1;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

struct RawRow {
    line: usize,
    time: f64,
    cycle: usize,
    gen: bool,
    y: f64,
    x: Vec<f64>,
}

/// Loads a measurement CSV and reconstructs the schedule it implies: the
/// sample spacing dt is inferred from the first cycle, each cycle starts one
/// dt before its first sample, and the generation window ends at the last
/// flagged sample. Every malformed input gets its own diagnostic naming the
/// offending row.
pub fn load_measurements(path: &Path) -> Result<(CycleSchedule, MeasurementSeries)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;

    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    for (i, want) in REQUIRED_COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(Error::Data(format!("column {} must be {want:?}, found {got:?}", i + 1))),
            None => return Err(Error::Data(format!("missing required column {want:?}"))),
        }
    }
    let p = headers.len() - REQUIRED_COLUMNS.len();
    for j in 0..p {
        let want = format!("x{}", j + 1);
        let got = headers.get(REQUIRED_COLUMNS.len() + j).expect("counted above");
        if got != want {
            return Err(Error::Data(format!("unexpected column {got:?}, covariates must be named x1..x{p}")));
        }
    }

    let mut rows: Vec<RawRow> = Vec::new();
    for (ridx, rec) in rdr.records().enumerate() {
        let line = ridx + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Data(format!("row {line}: missing {name}")))
        };
        let time: f64 = field(0, "time_min")?
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: time_min is not a number")))?;
        let cycle: usize = field(1, "cycle")?
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: cycle is not a positive integer")))?;
        let gen = match field(2, "generator_on")? {
            "0" => false,
            "1" => true,
            other => return Err(Error::Data(format!("row {line}: generator_on must be 0 or 1, got {other:?}"))),
        };
        let y: f64 = field(3, "concentration")?
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: concentration is not a number")))?;
        if !y.is_finite() || y <= 0.0 {
            return Err(Error::Data(format!("row {line}: concentration must be positive, got {y}")));
        }
        let mut x = Vec::with_capacity(p);
        for j in 0..p {
            let v: f64 = field(REQUIRED_COLUMNS.len() + j, "covariate")?
                .parse()
                .map_err(|_| Error::Data(format!("row {line}: x{} is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {line}: x{} must be finite", j + 1)));
            }
            x.push(v);
        }
        if cycle == 0 {
            return Err(Error::Data(format!("row {line}: cycle labels start at 1")));
        }
        rows.push(RawRow { line, time, cycle, gen, y, x });
    }
    if rows.is_empty() {
        return Err(Error::Data("no measurement rows".into()));
    }

    // Group rows into cycles; labels must be nondecreasing so each cycle's
    // rows are contiguous.
    let mut groups: Vec<Vec<&RawRow>> = Vec::new();
    let mut last_label = 0usize;
    for row in &rows {
        if row.cycle < last_label {
            return Err(Error::Data(format!(
                "row {}: cycle label {} after cycle {last_label}; rows must be grouped by cycle",
                row.line, row.cycle
            )));
        }
        if row.cycle > last_label {
            groups.push(Vec::new());
            last_label = row.cycle;
        }
        groups.last_mut().expect("pushed above").push(row);
    }

    if groups[0].len() < 2 {
        return Err(Error::Data("need at least two samples in the first cycle to infer dt".into()));
    }
    let dt = groups[0][1].time - groups[0][0].time;
    if !(dt > 0.0) {
        return Err(Error::Data(format!(
            "row {}: time_min must increase within a cycle",
            groups[0][1].line
        )));
    }
    let tol = 1e-6 * dt;

    let mut cycles = Vec::with_capacity(groups.len());
    for group in &groups {
        for w in group.windows(2) {
            let (a, b) = (w[0], w[1]);
            let diff = b.time - a.time;
            if diff.abs() <= tol {
                return Err(Error::Data(format!(
                    "row {}: duplicate time_min {} in cycle {}",
                    b.line, b.time, b.cycle
                )));
            }
            if diff < 0.0 {
                return Err(Error::Data(format!(
                    "row {}: time_min must increase within a cycle",
                    b.line
                )));
            }
            if (diff - dt).abs() > tol {
                return Err(Error::Data(format!(
                    "row {}: irregular sample spacing {diff}, expected dt = {dt}",
                    b.line
                )));
            }
        }
        let mut seen_off = false;
        let mut gen_end = group[0].time - dt;
        for row in group {
            if row.gen {
                if seen_off {
                    return Err(Error::Data(format!(
                        "row {}: generator_on turns back on mid-cycle; flags must be a single on-then-off run",
                        row.line
                    )));
                }
                gen_end = row.time;
            } else {
                seen_off = true;
            }
        }
        let start = group[0].time - dt;
        if start < -tol {
            return Err(Error::Data(format!(
                "row {}: first sample at {} implies a negative cycle start",
                group[0].line, group[0].time
            )));
        }
        cycles.push(Cycle { start: start.max(0.0), gen_end, measure: group.iter().map(|r| r.time).collect() });
    }

    let schedule = CycleSchedule { dt, cycles };
    schedule.validate().map_err(|e| Error::Data(format!("{e}")))?;
    let series = MeasurementSeries {
        times: rows.iter().map(|r| r.time).collect(),
        y: rows.iter().map(|r| r.y).collect(),
        x: if p > 0 { Some(rows.iter().map(|r| r.x.clone()).collect()) } else { None },
    };
    series.validate(&schedule)?;
    Ok((schedule, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn plain_box() -> MechParams {
        MechParams { g: 1000.0, q: 20.0, q_l: 0.0, q_r: 0.0, eps_l: 0.0, eps_lf: 0.0, eps_rf: 0.0, volume: 100.0 }
    }

    #[test]
    fn standard_three_cycle_layout() {
        let s = standard_schedule(3, 15.0, 30.0, 10.0, 1.0).unwrap();
        assert_eq!(s.cycles.len(), 3);
        assert_eq!(s.cycles[0].measure.first(), Some(&1.0));
        assert_eq!(s.cycles[0].measure.last(), Some(&30.0));
        assert_eq!(s.cycles[1].start, 40.0);
        assert_eq!(s.cycles[1].measure.first(), Some(&41.0));
        assert_eq!(s.cycles[1].measure.last(), Some(&70.0));
        assert_eq!(s.cycles[2].measure.first(), Some(&81.0));
        assert_eq!(s.cycles[2].measure.last(), Some(&110.0));
        assert_eq!(s.horizon(), 110.0);
    }

    #[test]
    fn single_cycle_layout() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        assert_eq!(s.cycles.len(), 1);
        assert_eq!(s.cycles[0].gen_end, 15.0);
        assert_eq!(s.cycles[0].measure.len(), 20);
    }

    #[test]
    fn generation_indicator_windows() {
        let s = standard_schedule(3, 15.0, 30.0, 10.0, 1.0).unwrap();
        assert!(s.generation_indicator(10.0).unwrap());
        assert!(!s.generation_indicator(20.0).unwrap());
        assert!(s.generation_indicator(41.0).unwrap());
        assert!(s.generation_indicator(200.0).is_err());
        assert!(s.generation_indicator(-1.0).is_err());
    }

    #[test]
    fn generation_step_flags_cover_the_rise() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        // Steps into minutes 1..=15 carry generation; the peak sits at 15.
        for t in 1..=20 {
            assert_eq!(s.generation_during_step_into(t as f64), t <= 15, "minute {t}");
        }
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        assert!(standard_schedule(0, 15.0, 30.0, 10.0, 1.0).is_err());
        assert!(standard_schedule(2, 15.0, 30.0, 0.0, 1.0).is_err());
        assert!(standard_schedule(1, 25.0, 20.0, 0.0, 1.0).is_err());
        assert!(standard_schedule(1, 15.0, 20.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn schedule_json_round_trip() {
        let s = standard_schedule(2, 15.0, 30.0, 10.0, 0.5).unwrap();
        let back = CycleSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let s = standard_schedule(2, 15.0, 30.0, 10.0, 1.0).unwrap();
        let a = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.01, &[], None, 10.0, 42).unwrap();
        let b = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.01, &[], None, 10.0, 42).unwrap();
        let c = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.01, &[], None, 10.0, 43).unwrap();
        assert_eq!(a.series.y, b.series.y);
        assert_ne!(a.series.y, c.series.y);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn simulated_noise_is_calibrated() {
        let s = standard_schedule(3, 15.0, 30.0, 10.0, 1.0).unwrap();
        let sim = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.01, &[], None, 10.0, 7).unwrap();
        assert_eq!(sim.series.len(), 90);
        // Latent entries at sample times sit right after each cycle-start entry.
        let mut resid = Vec::new();
        let mut li = 0usize;
        for cycle in &s.cycles {
            li += 1; // skip the cycle-start latent entry
            for _ in &cycle.measure {
                let c = sim.latent[li];
                let y = sim.series.y[resid.len()];
                resid.push((y / c).ln());
                li += 1;
            }
        }
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        assert!(mean.abs() < 3.0 * 0.1 / (90.0f64).sqrt(), "mean log-residual {mean}");
    }

    #[test]
    fn noiseless_simulation_peaks_at_gen_end() {
        let s = standard_schedule(1, 15.0, 20.0, 0.0, 1.0).unwrap();
        let sim = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.0, &[], None, 10.0, 1).unwrap();
        let peak = sim.series.y[14]; // minute 15
        assert_relative_eq!(peak, 48.00851726528544, epsilon = 1e-10);
        assert!(sim.series.y.iter().all(|&v| v < peak || v == peak));
    }

    #[test]
    fn background_gap_decays_at_raw_ventilation_rate() {
        let p = MechParams { q_l: 5.0, q_r: 5.0, eps_l: 0.5, eps_lf: 0.5, eps_rf: 0.9, ..plain_box() };
        let s = standard_schedule(2, 15.0, 30.0, 10.0, 1.0).unwrap();
        let sim = simulate_experiment(&p, ModelKind::Model111, &s, 0.0, &[], None, 10.0, 1).unwrap();
        // latent index 30 is u_1 (minute 30), index 31 is s_2 (minute 40).
        assert_relative_eq!(sim.latent_times[30], 30.0);
        assert_relative_eq!(sim.latent_times[31], 40.0);
        let expected = sim.latent[30] * (-(20.0 / 100.0) * 10.0f64).exp();
        assert_relative_eq!(sim.latent[31], expected, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let s = standard_schedule(2, 15.0, 30.0, 10.0, 1.0).unwrap();
        let sim = simulate_experiment(&plain_box(), ModelKind::Model101, &s, 0.01, &[], None, 10.0, 5).unwrap();
        write_measurements(&path, &s, &sim.series).unwrap();
        let (s2, series2) = load_measurements(&path).unwrap();
        assert_eq!(s, s2);
        assert_eq!(sim.series, series2);
    }

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn loader_diagnostics_name_the_problem() {
        let (_d, p) = write_lines(&["time_min,cycle,concentration", "1,1,5.0"]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("generator_on"), "{err}");

        let (_d, p) = write_lines(&[
            "time_min,cycle,generator_on,concentration",
            "1,1,1,5.0",
            "2,1,1,-3.0",
        ]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("positive"), "{err}");

        let (_d, p) = write_lines(&[
            "time_min,cycle,generator_on,concentration",
            "1,1,1,5.0",
            "2,1,1,6.0",
            "2,1,1,6.5",
        ]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("duplicate"), "{err}");

        let (_d, p) = write_lines(&[
            "time_min,cycle,generator_on,concentration",
            "1,1,1,5.0",
            "2,1,1,6.0",
            "4,1,1,6.5",
        ]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("irregular"), "{err}");

        let (_d, p) = write_lines(&[
            "time_min,cycle,generator_on,concentration",
            "1,2,1,5.0",
            "2,1,1,6.0",
        ]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("grouped by cycle"), "{err}");

        let (_d, p) = write_lines(&[
            "time_min,cycle,generator_on,concentration",
            "1,1,1,5.0",
            "2,1,0,6.0",
            "3,1,1,6.5",
        ]);
        let err = load_measurements(&p).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("turns back on"), "{err}");
    }

    proptest! {
        /// Standard layouts always validate, partition their samples into
        /// disjoint in-order cycles, and flag exactly rise/dt generation
        /// steps per cycle.
        #[test]
        fn standard_layouts_are_coherent(
            n in 1usize..4,
            rise_steps in 0usize..20,
            extra_steps in 1usize..20,
            gap_steps in 1usize..12,
            dt in prop::sample::select(vec![0.25, 0.5, 1.0, 2.0]),
        ) {
            let rise = rise_steps as f64 * dt;
            let measure = (rise_steps + extra_steps) as f64 * dt;
            let gap = gap_steps as f64 * dt;
            let s = standard_schedule(n, rise, measure, gap, dt).unwrap();
            s.validate().unwrap();
            let mut all: Vec<f64> = Vec::new();
            for c in &s.cycles {
                all.extend(c.measure.iter().copied());
            }
            for w in all.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
            for c in &s.cycles {
                let flagged = c.measure.iter().filter(|&&t| s.generation_during_step_into(t)).count();
                prop_assert_eq!(flagged, rise_steps);
            }
        }
    }
}
