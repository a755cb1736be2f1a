//! Safety filter, fixed-step simulation and the exploration loop with periodic
//! recomputation of the safe level.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_gp, GpPrior};
use crate::gp_bound::{bound_nonlinearity_gp, GpBoundConfig};
use crate::linalg;
use crate::lipschitz::Interval;
use crate::safe_set::{self, NonlinearitySource, SafeCertificate};
use crate::system_model::{
    eval_dynamics, polytope_contains, DataSet, LinearModel, NonlinearityOracle, Polytope,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub boundary_fraction: f64,
    pub hold_steps: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            boundary_fraction: 0.02,
            hold_steps: 1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_fraction > 0.0 && self.boundary_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "boundary_fraction {} not in (0, 1)",
                self.boundary_fraction
            )));
        }
        Ok(())
    }
}

/// Relative tolerance of the safe-set membership precondition.
pub const OUTSIDE_TOL: f64 = 1e-9;
/// Relative level overshoot tolerated along a discretized trajectory.
pub const DISCRETE_TOL: f64 = 1e-3;

fn filter_decision(
    x: &DVector<f64>,
    ubar: &DVector<f64>,
    cert: &SafeCertificate,
    u_poly: &Polytope,
    cfg: &FilterConfig,
) -> Result<(DVector<f64>, bool)> {
    let on_boundary = cert.level(x) >= (1.0 - cfg.boundary_fraction) * cert.gamma;
    if on_boundary || !polytope_contains(u_poly, ubar)? {
        Ok((&cert.k * x, true))
    } else {
        Ok((ubar.clone(), false))
    }
}

/// Passes `ū` through unless the state is in the boundary shell or `ū ∉ U`,
/// in which case the certified gain is applied.
pub fn safety_filter(
    x: &DVector<f64>,
    ubar: &DVector<f64>,
    cert: &SafeCertificate,
    u_poly: &Polytope,
    cfg: &FilterConfig,
) -> Result<(DVector<f64>, bool)> {
    let level = cert.level(x);
    if !(level <= cert.gamma * (1.0 + OUTSIDE_TOL)) {
        return Err(Error::OutsideSafeSet {
            level,
            gamma: cert.gamma,
        });
    }
    filter_decision(x, ubar, cert, u_poly, cfg)
}

/// One classical RK4 step with the input held constant.
pub fn step(
    model: &LinearModel,
    oracle: &NonlinearityOracle,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::ConfigInvalid(format!("step size {h}")));
    }
    let f = |y: &DVector<f64>| eval_dynamics(model, oracle, y, u);
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (h / 2.0)))?;
    let k3 = f(&(x + &k2 * (h / 2.0)))?;
    let k4 = f(&(x + &k3 * h))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub ubar: Vec<DVector<f64>>,
    pub safety_active: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push(&mut self, t: f64, x: DVector<f64>, u: DVector<f64>, ubar: DVector<f64>, active: bool) {
        self.t.push(t);
        self.x.push(x);
        self.u.push(u);
        self.ubar.push(ubar);
        self.safety_active.push(active);
    }

    pub fn active_steps(&self) -> usize {
        self.safety_active.iter().filter(|a| **a).count()
    }

    /// Maximal contiguous runs of active steps.
    pub fn intervention_episodes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut start = None;
        for (k, &a) in self.safety_active.iter().enumerate() {
            match (a, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    out.push((self.t[s], self.t[k - 1]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((self.t[s], *self.t.last().expect("non-empty")));
        }
        out
    }

    pub fn max_level(&self, p: &DMatrix<f64>) -> f64 {
        self.x
            .iter()
            .map(|x| linalg::quad_form(p, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=m).map(|i| format!("ubar{i}")));
        header.push("safety_active".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:.6}", self.t[k])];
            row.extend(self.x[k].iter().map(|v| format!("{v:.10e}")));
            row.extend(self.u[k].iter().map(|v| format!("{v:.10e}")));
            row.extend(self.ubar[k].iter().map(|v| format!("{v:.10e}")));
            row.push(u8::from(self.safety_active[k]).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-loop run under the safety filter for `⌈T/h⌉` steps. Every row holds
/// the state at `t` with the input decided there; the last row's input is the
/// decision at the final state.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &LinearModel,
    oracle: &NonlinearityOracle,
    cert: &SafeCertificate,
    u_poly: &Polytope,
    policy: &mut dyn FnMut(f64, &DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    horizon: f64,
    h: f64,
    cfg: &FilterConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(h > 0.0) || !(horizon >= 0.0) {
        return Err(Error::ConfigInvalid(format!("horizon {horizon}, step {h}")));
    }
    safety_filter(x0, &DVector::zeros(model.m()), cert, u_poly, cfg)?;
    let steps = (horizon / h - 1e-9).ceil().max(0.0) as usize;
    let mut traj = Trajectory {
        h,
        ..Default::default()
    };
    let mut x = x0.clone();
    let mut hold = 0usize;
    for k in 0..=steps {
        let t = k as f64 * h;
        let level = cert.level(&x);
        if level > cert.gamma * (1.0 + DISCRETE_TOL) {
            return Err(Error::OutsideSafeSet {
                level,
                gamma: cert.gamma,
            });
        }
        let ubar = policy(t, &x);
        let (mut u, mut active) = filter_decision(&x, &ubar, cert, u_poly, cfg)?;
        if active {
            hold = cfg.hold_steps.max(1);
        } else if hold > 0 {
            u = &cert.k * &x;
            active = true;
        }
        hold = hold.saturating_sub(1);
        let next = if k < steps {
            Some(step(model, oracle, &x, &u, h)?)
        } else {
            None
        };
        traj.push(t, x, u, ubar, active);
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Ok(traj)
}

/// Desired-input generator driven by the closed loop.
pub trait Learner {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    /// Called after each step with the state reached.
    fn observe(&mut self, _t: f64, _x: &DVector<f64>) {}
}

/// `ū = Kx`.
#[derive(Debug, Clone)]
pub struct FixedGain(pub DMatrix<f64>);

impl Learner for FixedGain {
    fn act(&mut self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
}

/// Linear gain plus piecewise-constant uniform exploration noise.
#[derive(Debug, Clone)]
pub struct RandomExplorer {
    gain: DMatrix<f64>,
    amplitude: f64,
    hold: f64,
    rng: ChaCha8Rng,
    noise: DVector<f64>,
    next_draw: f64,
}

impl RandomExplorer {
    pub fn new(gain: DMatrix<f64>, amplitude: f64, hold: f64, seed: u64) -> Self {
        let m = gain.nrows();
        Self {
            gain,
            amplitude,
            hold,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: DVector::zeros(m),
            next_draw: 0.0,
        }
    }
}

impl Learner for RandomExplorer {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        if t >= self.next_draw {
            let a = self.amplitude;
            let rng = &mut self.rng;
            self.noise = DVector::from_fn(self.noise.len(), |_, _| rng.random_range(-a..=a));
            self.next_draw = t + self.hold;
        }
        &self.gain * x + &self.noise
    }
}

/// Finite-difference policy gradient on a linear gain with the running cost
/// `‖x‖²` (relative to the window's first state): each window evaluates `θ + σΔ` and then `θ − σΔ`, then steps `θ`.
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    theta: DMatrix<f64>,
    step: f64,
    perturbation: f64,
    window: f64,
    rng: ChaCha8Rng,
    direction: DMatrix<f64>,
    phase: usize,
    window_start: f64,
    cost: f64,
    cost_plus: f64,
    samples: usize,
    scale: f64,
}

impl PolicyGradient {
    pub fn new(theta: DMatrix<f64>, step: f64, perturbation: f64, window: f64, seed: u64) -> Self {
        let (m, n) = theta.shape();
        let mut s = Self {
            theta,
            step,
            perturbation,
            window,
            rng: ChaCha8Rng::seed_from_u64(seed),
            direction: DMatrix::zeros(m, n),
            phase: 0,
            window_start: 0.0,
            cost: 0.0,
            cost_plus: 0.0,
            samples: 0,
            scale: 0.0,
        };
        s.draw_direction();
        s
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.theta
    }

    fn draw_direction(&mut self) {
        let rng = &mut self.rng;
        self.direction = self
            .direction
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
    }

    fn current(&self) -> DMatrix<f64> {
        let sign = if self.phase == 0 { 1.0 } else { -1.0 };
        &self.theta + &self.direction * (sign * self.perturbation)
    }
}

impl Learner for PolicyGradient {
    fn act(&mut self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        if t - self.window_start >= self.window && self.samples > 0 {
            let mean = self.cost / self.samples as f64;
            if self.phase == 0 {
                self.cost_plus = mean;
                self.phase = 1;
            } else {
                // Clamped so one outlier window cannot throw the gain away.
                let g = ((self.cost_plus - mean) / (2.0 * self.perturbation)).clamp(-1.0, 1.0);
                self.theta -= &self.direction * (self.step * g);
                self.phase = 0;
                self.draw_direction();
            }
            self.window_start = t;
            self.cost = 0.0;
            self.samples = 0;
        }
        self.current() * x
    }

    fn observe(&mut self, _t: f64, x: &DVector<f64>) {
        // Relative to the window's first state so both halves of a pair are
        // comparable while the state shrinks or grows.
        if self.samples == 0 {
            self.scale = x.norm_squared().max(1e-12);
        }
        self.cost += x.norm_squared() / self.scale;
        self.samples += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationSchedule {
    pub recompute_period: f64,
    /// Steps between appended `(x, d(x))` samples.
    pub collect_stride: usize,
    pub prior: GpPrior,
    pub intervals: Vec<Interval>,
    pub gp_bound: GpBoundConfig,
    pub max_halvings: usize,
    pub verify_samples: usize,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            recompute_period: 0.2,
            collect_stride: 20,
            prior: GpPrior::uniform(2, 0.0, 0.05, 0.2),
            intervals: Vec::new(),
            gp_bound: GpBoundConfig::default(),
            max_halvings: 0,
            verify_samples: safe_set::DEFAULT_VERIFY_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub t: f64,
    pub gamma: f64,
    pub volume: f64,
}

pub fn write_history_csv(history: &[HistoryEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,gamma,volume")?;
    for e in history {
        writeln!(w, "{:.6},{:.12e},{:.12e}", e.t, e.gamma, e.volume)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExplorationOutcome {
    pub trajectory: Trajectory,
    pub history: Vec<HistoryEntry>,
    pub certificate: SafeCertificate,
    /// Times at which a new certificate replaced the previous one.
    pub swaps: Vec<f64>,
    pub data: DataSet,
    pub warnings: Vec<String>,
}

/// Everything the recomputation needs besides the data.
pub struct ExplorationSetup<'a> {
    pub model: &'a LinearModel,
    pub oracle: &'a NonlinearityOracle,
    pub p: &'a DMatrix<f64>,
    pub x_poly: &'a Polytope,
    pub u_poly: &'a Polytope,
    pub filter: FilterConfig,
}

/// Largest interval of the schedule whose certificate synthesizes and passes
/// the sampled oracle check.
fn recompute(
    setup: &ExplorationSetup<'_>,
    data: &DataSet,
    schedule: &ExplorationSchedule,
) -> Result<SafeCertificate> {
    let gp = fit_gp(data, &schedule.prior)?;
    let e = linalg::spd_inverse(setup.p)?;
    let mut rejected = 0usize;
    for (i, iv) in schedule.intervals.iter().enumerate() {
        let attempt = safe_set::sweep_intervals(
            setup.model,
            &e,
            |iv| bound_nonlinearity_gp(&gp, setup.p, iv, &schedule.gp_bound),
            std::slice::from_ref(iv),
            setup.x_poly,
            setup.u_poly,
            schedule.max_halvings,
        );
        let mut cert = match attempt {
            Ok(c) => c,
            Err(Error::AllIntervalsInfeasible) => continue,
            Err(err) => return Err(err),
        };
        cert.verification = safe_set::verify_certificate(
            &cert,
            setup.model,
            setup.x_poly,
            setup.u_poly,
            NonlinearitySource::Oracle(setup.oracle),
            schedule.verify_samples,
        )?;
        if cert.verification.passed() {
            if rejected > 0 {
                cert.warnings.push(format!(
                    "{rejected} larger feasible certificates failed the oracle check; interval {} of {} kept",
                    i + 1,
                    schedule.intervals.len()
                ));
            }
            return Ok(cert);
        }
        log::info!(
            "interval [{:.4}, {:.4}] feasible but fails the oracle check (vdot_max {:.3e})",
            iv.gamma_lo,
            iv.gamma_hi,
            cert.verification.vdot_max
        );
        rejected += 1;
    }
    Err(Error::RecomputeInfeasible(format!(
        "no interval yields a verified certificate ({rejected} feasible but failed the oracle check)"
    )))
}

/// Runs the learner under the filter, collecting oracle samples at visited
/// states and recomputing the certificate every `recompute_period`. A new
/// certificate replaces the old one only if it verifies, has a larger level
/// and keeps the current state off its boundary band.
pub fn explore(
    setup: &ExplorationSetup<'_>,
    initial_data: &DataSet,
    schedule: &ExplorationSchedule,
    learner: &mut dyn Learner,
    x0: &DVector<f64>,
    horizon: f64,
    h: f64,
) -> Result<ExplorationOutcome> {
    setup.filter.validate()?;
    if !(schedule.recompute_period >= h) || !(h > 0.0) {
        return Err(Error::ConfigInvalid(
            "recompute_period must be at least the step size".into(),
        ));
    }
    if schedule.intervals.is_empty() {
        return Err(Error::ConfigInvalid(
            "exploration needs an interval schedule".into(),
        ));
    }
    let mut data = initial_data.clone();
    let mut cert = recompute(setup, &data, schedule)?;
    let mut warnings = Vec::new();
    let n = setup.model.n();
    let volume = |c: &SafeCertificate| linalg::ellipsoid_volume(&c.p, c.gamma);
    let mut history = vec![HistoryEntry {
        t: 0.0,
        gamma: cert.gamma,
        volume: volume(&cert),
    }];
    let steps = (horizon / h - 1e-9).ceil().max(0.0) as usize;
    let period = (schedule.recompute_period / h).round().max(1.0) as usize;
    let stride = schedule.collect_stride.max(1);
    let mut traj = Trajectory {
        h,
        ..Default::default()
    };
    let mut swaps = Vec::new();
    let mut x = x0.clone();
    safety_filter(
        &x,
        &DVector::zeros(setup.model.m()),
        &cert,
        setup.u_poly,
        &setup.filter,
    )?;
    let mut hold = 0usize;
    for k in 0..=steps {
        let t = k as f64 * h;
        if k > 0 && k % period == 0 {
            match recompute(setup, &data, schedule) {
                Ok(new) if new.gamma <= cert.gamma * (1.0 + 1e-9) => {
                    log::debug!(
                        "t = {t:.2}: recomputed gamma {:.4} does not improve on {:.4}",
                        new.gamma,
                        cert.gamma
                    );
                }
                Ok(new) if new.level(&x) <= new.gamma * (1.0 - setup.filter.boundary_fraction) => {
                    log::info!("t = {t:.2}: gamma {:.4} -> {:.4}", cert.gamma, new.gamma);
                    swaps.push(t);
                    cert = new;
                }
                Ok(new) => {
                    warnings.push(format!(
                        "t = {t:.2}: recomputed certificate (gamma {:.4}) rejected: state level {:.4}",
                        new.gamma,
                        new.level(&x)
                    ));
                }
                Err(err) => {
                    let err = Error::RecomputeInfeasible(err.to_string());
                    log::warn!("t = {t:.2}: {err}");
                    warnings.push(format!("t = {t:.2}: {err}"));
                }
            }
            history.push(HistoryEntry {
                t,
                gamma: cert.gamma,
                volume: volume(&cert),
            });
        }
        let level = cert.level(&x);
        if level > cert.gamma * (1.0 + DISCRETE_TOL) {
            return Err(Error::OutsideSafeSet {
                level,
                gamma: cert.gamma,
            });
        }
        let ubar = learner.act(t, &x);
        let (mut u, mut active) = filter_decision(&x, &ubar, &cert, setup.u_poly, &setup.filter)?;
        if active {
            hold = setup.filter.hold_steps.max(1);
        } else if hold > 0 {
            u = &cert.k * &x;
            active = true;
        }
        hold = hold.saturating_sub(1);
        if k % stride == 0 && k > 0 {
            data.push(x.clone(), setup.oracle.eval(&x))?;
        }
        let next = if k < steps {
            Some(step(setup.model, setup.oracle, &x, &u, h)?)
        } else {
            None
        };
        traj.push(t, x, u, ubar, active);
        match next {
            Some(nx) => {
                learner.observe(t + h, &nx);
                x = nx;
            }
            None => break,
        }
    }
    debug_assert_eq!(traj.x[0].len(), n);
    Ok(ExplorationOutcome {
        trajectory: traj,
        history,
        certificate: cert,
        swaps,
        data,
        warnings,
    })
}
