//! Safe level `γ*` and linear gain `K` for a fixed shape, the interval sweep,
//! and a posteriori verification of the resulting certificate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::convex::{self, Affine, AffineMatrix, ConicProblem, ConicStatus};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lipschitz::{BoundKind, Interval, QuadraticBound};
use crate::shape::support_block;
use crate::system_model::{nearest_datum, DataSet, LinearModel, NonlinearityOracle, Polytope};

pub const DEFAULT_MAX_HALVINGS: usize = 4;
pub const DEFAULT_VERIFY_SAMPLES: usize = 1000;
pub const VDOT_TOL: f64 = 1e-6;

const STATE_LMI_NOTE: &str = "state containment enforced per row as gamma * a E a^T <= b^2 \
     (block [[b^2, a(gamma E)], [(gamma E) a^T, gamma E]]); the corner-only block with off-diagonal a E \
     would loosen as gamma grows";

/// `max {aᵀx : xᵀPx ≤ γ} = √(γ·aᵀP⁻¹a)`.
pub fn ellipsoid_support(p: &DMatrix<f64>, gamma: f64, a: &DVector<f64>) -> Result<f64> {
    let inv = linalg::spd_inverse(p)?;
    Ok((gamma * linalg::quad_form(&inv, a)).max(0.0).sqrt())
}

/// Serialized view of the bound used by a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    #[serde(rename = "Q", with = "linalg::serde_rows")]
    pub q: DMatrix<f64>,
    pub kind: String,
    pub c: Option<f64>,
}

impl From<&QuadraticBound> for BoundSummary {
    fn from(b: &QuadraticBound) -> Self {
        Self {
            q: b.q.clone(),
            kind: b.kind.label().to_string(),
            c: b.kind.confidence(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub state_ok: bool,
    pub input_ok: bool,
    pub vdot_max: f64,
    pub samples: usize,
    #[serde(skip)]
    pub failed_state_rows: Vec<usize>,
    #[serde(skip)]
    pub failed_input_rows: Vec<usize>,
    #[serde(skip)]
    pub vdot_ok: bool,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.state_ok && self.input_ok && self.vdot_ok
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafeCertificate {
    #[serde(rename = "P", with = "linalg::serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "E", with = "linalg::serde_rows")]
    pub e: DMatrix<f64>,
    pub gamma: f64,
    #[serde(rename = "Y", with = "linalg::serde_rows")]
    pub y: DMatrix<f64>,
    #[serde(rename = "K", with = "linalg::serde_rows")]
    pub k: DMatrix<f64>,
    pub interval: Interval,
    pub bound: BoundSummary,
    pub verification: VerificationReport,
    pub warnings: Vec<String>,
    /// Smallest eigenvalue of the negated decrease LMI at the solution.
    #[serde(skip)]
    pub lmi_margin: f64,
    #[serde(skip)]
    pub bound_detail: Option<QuadraticBound>,
}

impl SafeCertificate {
    pub fn level(&self, x: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.p, x)
    }

    /// `V(x) = xᵀ(γ⁻¹P)x`.
    pub fn lyapunov(&self, x: &DVector<f64>) -> f64 {
        self.level(x) / self.gamma
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `γ(AE + EAᵀ + 2EQE) + BY + YᵀBᵀ` evaluated numerically.
pub fn decrease_lmi(
    model: &LinearModel,
    e: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
    y: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (a, b) = (model.a(), model.b());
    (a * e + e * a.transpose() + e * q * e * 2.0) * gamma + b * y + y.transpose() * b.transpose()
}

fn bound_warnings(bound: &QuadraticBound) -> Vec<String> {
    let mut w = vec![STATE_LMI_NOTE.to_string()];
    match &bound.kind {
        BoundKind::Lipschitz { estimated: true, lipschitz, .. } => w.push(format!(
            "Lipschitz constant {lipschitz:.4} was estimated from data; the bound is only sound if it \
             over-approximates the true constant of x^T P d(x) on the dilated ring"
        )),
        BoundKind::Gp { c } => w.push(format!(
            "GP bound holds with the confidence implied by c = {c}; the violation search is a \
             best-effort multi-start local search"
        )),
        _ => {}
    }
    w.extend(bound.notes.iter().cloned());
    w
}

pub fn synthesize_safe_set(
    model: &LinearModel,
    e: &DMatrix<f64>,
    bound: &QuadraticBound,
    interval: Interval,
    x_poly: &Polytope,
    u_poly: &Polytope,
) -> Result<SafeCertificate> {
    let (n, m) = (model.n(), model.m());
    if e.shape() != (n, n) || bound.q.shape() != (n, n) || x_poly.dim() != n || u_poly.dim() != m {
        return Err(Error::DimensionMismatch("safe-set synthesis inputs".into()));
    }
    let p = linalg::spd_inverse(e)?;
    let bi = bound.interval;
    if interval.gamma_lo < bi.gamma_lo * (1.0 - 1e-12)
        || interval.gamma_hi > bi.gamma_hi * (1.0 + 1e-12)
    {
        return Err(Error::AssumptionViolated(format!(
            "interval [{}, {}] is not covered by the bound's interval [{}, {}]",
            interval.gamma_lo, interval.gamma_hi, bi.gamma_lo, bi.gamma_hi
        )));
    }
    let infeasible = || Error::IntervalInfeasible {
        gamma_lo: interval.gamma_lo,
        gamma_hi: interval.gamma_hi,
    };

    let mut prob = ConicProblem::new();
    let gamma = prob.scalar();
    let y = prob.matrix(m, n);
    prob.nonneg(gamma.clone() - Affine::constant(interval.gamma_lo));
    prob.nonneg(Affine::constant(interval.gamma_hi) - gamma.clone());

    let (a, b) = (model.a(), model.b());
    let drift = a * e + e * a.transpose() + e * &bound.q * e * 2.0;
    let by = y.left_mul(b)?;
    let lmi = AffineMatrix::scalar_times(&gamma, &drift)
        .try_add(&by)?
        .try_add(&by.transpose())?;
    prob.nsd(lmi)?;
    let ge = AffineMatrix::scalar_times(&gamma, e);
    for j in 0..x_poly.rows() {
        let row = x_poly.a().rows(j, 1).into_owned();
        prob.psd(support_block(x_poly.b()[j], &row, &ge, &ge)?)?;
    }
    for i in 0..u_poly.rows() {
        let row = u_poly.a().rows(i, 1).into_owned();
        prob.psd(support_block(u_poly.b()[i], &row, &y, &ge)?)?;
    }
    prob.maximize(gamma.clone());

    let sol = prob.solve(convex::DEFAULT_GAP_TOL);
    match sol.status {
        ConicStatus::Optimal => {}
        ConicStatus::Infeasible => return Err(infeasible()),
        ConicStatus::NumericalFailure => {
            log::debug!("safe-set solve: {}", sol.detail);
            return Err(Error::NumericalFailure(sol.detail));
        }
    }
    let g_sol = sol.value(&gamma);
    let ym = sol.matrix(&y);
    if !(g_sol > 0.0) || ym.iter().any(|v| !v.is_finite()) {
        return Err(infeasible());
    }
    let k = &ym * &p / g_sol;

    // With K fixed the decrease LMI is homogeneous in γ, so lowering γ onto the
    // exact state and input supports keeps every condition intact.
    // The solver may overshoot the interval by its own tolerance.
    let mut g = g_sol.min(interval.gamma_hi);
    for j in 0..x_poly.rows() {
        let row = x_poly.a().row(j).transpose();
        let bj = x_poly.b()[j];
        g = g.min(bj * bj / linalg::quad_form(e, &row).max(f64::MIN_POSITIVE));
    }
    let ak = u_poly.a() * &k;
    for i in 0..u_poly.rows() {
        let row = ak.row(i).transpose();
        let bi = u_poly.b()[i];
        let s = linalg::quad_form(e, &row);
        if s > 0.0 {
            g = g.min(bi * bi / s);
        }
    }
    if g < interval.gamma_lo * (1.0 - 1e-6) {
        return Err(infeasible());
    }
    let y_cert = &k * e * g;
    let lmi_margin = linalg::min_eigenvalue(&-decrease_lmi(model, e, &bound.q, g, &y_cert));
    let scale = 1.0 + g * linalg::max_eigenvalue(&drift.abs());
    if lmi_margin < -1e-6 * scale {
        log::debug!("decrease LMI margin {lmi_margin:.3e} at gamma {g}");
        return Err(infeasible());
    }
    let mut warnings = bound_warnings(bound);
    if g < g_sol * (1.0 - 1e-9) {
        warnings.push(format!(
            "gamma lowered from solver value {g_sol:.9} to {g:.9} to satisfy exact supports"
        ));
    }
    Ok(SafeCertificate {
        p,
        e: e.clone(),
        gamma: g,
        y: y_cert,
        k,
        interval,
        bound: BoundSummary::from(bound),
        verification: VerificationReport::default(),
        warnings,
        lmi_margin,
        bound_detail: Some(bound.clone()),
    })
}

/// Errors that make one interval unusable without aborting the sweep.
fn is_interval_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::IntervalInfeasible { .. }
            | Error::Infeasible
            | Error::EmptyRing { .. }
            | Error::MaxIterationsExceeded { .. }
            | Error::NumericalFailure(_)
            | Error::TooFewPoints { .. }
    )
}

/// Tries each interval in order; an infeasible interval is retried with its
/// upper end pulled down to halve the width, up to `max_halvings` times.
pub fn sweep_intervals<F>(
    model: &LinearModel,
    e: &DMatrix<f64>,
    mut provider: F,
    intervals: &[Interval],
    x_poly: &Polytope,
    u_poly: &Polytope,
    max_halvings: usize,
) -> Result<SafeCertificate>
where
    F: FnMut(Interval) -> Result<QuadraticBound>,
{
    let mut first_empty = None;
    let mut only_empty = true;
    for (i, base) in intervals.iter().enumerate() {
        let mut iv = *base;
        for halving in 0..=max_halvings {
            let attempt = provider(iv)
                .and_then(|bound| synthesize_safe_set(model, e, &bound, iv, x_poly, u_poly));
            match attempt {
                Ok(mut cert) => {
                    cert.warnings.push(format!(
                        "feasible on interval {} of {} after {halving} halvings",
                        i + 1,
                        intervals.len()
                    ));
                    return Ok(cert);
                }
                Err(err @ Error::EmptyRing { .. }) => {
                    log::info!(
                        "interval [{:.4}, {:.4}] rejected: {err}",
                        iv.gamma_lo,
                        iv.gamma_hi
                    );
                    first_empty.get_or_insert(err);
                }
                Err(err) if is_interval_failure(&err) => {
                    log::info!(
                        "interval [{:.4}, {:.4}] rejected: {err}",
                        iv.gamma_lo,
                        iv.gamma_hi
                    );
                    only_empty = false;
                }
                Err(err) => return Err(err),
            }
            iv = Interval::new(iv.gamma_lo, iv.gamma_lo + 0.5 * iv.width())?;
        }
    }
    // No data anywhere is a setup problem rather than an infeasible bound.
    match first_empty {
        Some(err) if only_empty => Err(err),
        _ => Err(Error::AllIntervalsInfeasible),
    }
}

/// Points on `{xᵀPx = γ}`: evenly spaced angles in 2D, both ends in 1D and
/// Gaussian directions otherwise.
pub fn boundary_samples(
    p: &DMatrix<f64>,
    gamma: f64,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let n = p.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let dir = match n {
                1 => DVector::from_element(1, if k % 2 == 0 { 1.0 } else { -1.0 }),
                2 => {
                    let t = std::f64::consts::TAU * k as f64 / count as f64;
                    DVector::from_vec(vec![t.cos(), t.sin()])
                }
                _ => DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)),
            };
            let l = linalg::quad_form(p, &dir);
            dir * (gamma / l).sqrt()
        })
        .collect()
}

/// Source of `d(x)` for the sampled decrease check.
#[derive(Debug, Clone, Copy)]
pub enum NonlinearitySource<'a> {
    Oracle(&'a NonlinearityOracle),
    /// Nearest-datum values with a `δL` slack on `xᵀPd(x)`.
    Data {
        data: &'a DataSet,
        delta: f64,
        lipschitz: f64,
    },
}

pub fn verify_certificate(
    cert: &SafeCertificate,
    model: &LinearModel,
    x_poly: &Polytope,
    u_poly: &Polytope,
    source: NonlinearitySource<'_>,
    samples: usize,
) -> Result<VerificationReport> {
    let n = model.n();
    if cert.p.shape() != (n, n) || cert.k.shape() != (model.m(), n) {
        return Err(Error::DimensionMismatch("certificate versus model".into()));
    }
    let mut report = VerificationReport {
        samples,
        ..Default::default()
    };
    let tol = |b: f64| b * 1e-9 + 1e-12;
    for j in 0..x_poly.rows() {
        let a = x_poly.a().row(j).transpose();
        if ellipsoid_support(&cert.p, cert.gamma, &a)? > x_poly.b()[j] + tol(x_poly.b()[j]) {
            report.failed_state_rows.push(j);
        }
    }
    let ak = u_poly.a() * &cert.k;
    for i in 0..u_poly.rows() {
        let a = ak.row(i).transpose();
        if ellipsoid_support(&cert.p, cert.gamma, &a)? > u_poly.b()[i] + tol(u_poly.b()[i]) {
            report.failed_input_rows.push(i);
        }
    }
    report.state_ok = report.failed_state_rows.is_empty();
    report.input_ok = report.failed_input_rows.is_empty();

    let a_cl = model.a() + model.b() * &cert.k;
    let mut vdot_max = f64::NEG_INFINITY;
    for x in boundary_samples(&cert.p, cert.gamma, samples, 0x5afe) {
        let px = &cert.p * &x;
        let nonlinear = match source {
            NonlinearitySource::Oracle(o) => px.dot(&o.eval(&x)),
            NonlinearitySource::Data {
                data,
                delta,
                lipschitz,
            } => {
                let (xk, dk) = nearest_datum(data, &x)?;
                xk.dot(&(&cert.p * dk)) + delta * lipschitz
            }
        };
        let vdot = 2.0 / cert.gamma * (px.dot(&(&a_cl * &x)) + nonlinear);
        vdot_max = vdot_max.max(vdot);
    }
    report.vdot_max = vdot_max;
    report.vdot_ok = vdot_max <= VDOT_TOL;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn bound(q: DMatrix<f64>, lo: f64, hi: f64) -> QuadraticBound {
        QuadraticBound {
            q,
            interval: Interval::new(lo, hi).unwrap(),
            kind: BoundKind::Lipschitz {
                lipschitz: 0.0,
                delta: 0.0,
                estimated: false,
            },
            fit_residual: 0.0,
            sprocedure_min_eig: None,
            points_used: 0,
            iterations: 0,
            notes: Vec::new(),
            chain: Vec::new(),
        }
    }

    fn scalar_problem() -> (LinearModel, Polytope, Polytope) {
        (
            LinearModel::new(s(1.0), s(1.0)).unwrap(),
            Polytope::symmetric_box(&[2.0]).unwrap(),
            Polytope::symmetric_box(&[2.0]).unwrap(),
        )
    }

    #[test]
    fn support_examples() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(
            ellipsoid_support(&DMatrix::identity(2, 2), 1.0, &e1).unwrap(),
            1.0
        );
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert_relative_eq!(ellipsoid_support(&p, 1.0, &e1).unwrap(), 0.5);
        let a = DVector::from_vec(vec![1.0, 1.0]);
        assert_relative_eq!(
            ellipsoid_support(&DMatrix::identity(2, 2), 4.0, &a).unwrap(),
            8f64.sqrt()
        );
        assert!(matches!(
            ellipsoid_support(&DMatrix::zeros(2, 2), 1.0, &a),
            Err(Error::SingularP)
        ));
    }

    #[test]
    fn scalar_synthesis() {
        let (model, x, u) = scalar_problem();
        let b = bound(s(0.0), 0.25, 4.0);
        let cert = synthesize_safe_set(&model, &s(1.0), &b, b.interval, &x, &u).unwrap();
        assert!((cert.gamma - 4.0).abs() < 1e-5, "{}", cert.gamma);
        assert!((cert.y[(0, 0)] + 4.0).abs() < 1e-3);
        assert!((cert.k[(0, 0)] + 1.0).abs() < 1e-3);
        assert!(cert.lmi_margin >= -1e-6);
        // Cross-check against a dense grid over (γ, Y).
        let mut best: f64 = 0.0;
        for gi in 0..=400 {
            let g = 0.25 + 3.75 * gi as f64 / 400.0;
            for yi in 0..=800 {
                let y = -8.0 + 8.0 * yi as f64 / 800.0;
                if 2.0 * g + 2.0 * y <= 1e-12 && g <= 4.0 && y * y <= 4.0 * g {
                    best = best.max(g);
                }
            }
        }
        assert!((best - cert.gamma).abs() < 1e-2);
    }

    #[test]
    fn huge_q_is_infeasible() {
        let (model, x, u) = scalar_problem();
        let b = bound(s(1e6), 0.25, 4.0);
        assert!(matches!(
            synthesize_safe_set(&model, &s(1.0), &b, b.interval, &x, &u),
            Err(Error::IntervalInfeasible { .. })
        ));
        let intervals = crate::lipschitz::make_intervals(4.0, &[1.0, 1.0, 1.0]).unwrap();
        let res = sweep_intervals(
            &model,
            &s(1.0),
            |iv| Ok(bound(s(1e6), iv.gamma_lo, iv.gamma_hi)),
            &intervals,
            &x,
            &u,
            2,
        );
        assert!(matches!(res, Err(Error::AllIntervalsInfeasible)));
    }

    #[test]
    fn first_feasible_interval_short_circuits() {
        let (model, x, u) = scalar_problem();
        let intervals = crate::lipschitz::make_intervals(4.0, &[1.0, 1.0]).unwrap();
        let mut calls = 0;
        let cert = sweep_intervals(
            &model,
            &s(1.0),
            |iv| {
                calls += 1;
                Ok(bound(s(0.0), iv.gamma_lo, iv.gamma_hi))
            },
            &intervals,
            &x,
            &u,
            DEFAULT_MAX_HALVINGS,
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert!((cert.gamma - 4.0).abs() < 1e-5);
    }

    #[test]
    fn motivating_certificate_verifies() {
        // ẋ = x + u − x³ ... evaluated with K = 0: V̇(±2) = 2(4 − 16)/4.
        let (model, x, u) = scalar_problem();
        let oracle = NonlinearityOracle::new(1, |x| DVector::from_element(1, -x[0].powi(3)));
        let cert = SafeCertificate {
            p: s(1.0),
            e: s(1.0),
            gamma: 4.0,
            y: s(0.0),
            k: s(0.0),
            interval: Interval::new(3.0, 4.0).unwrap(),
            bound: BoundSummary::from(&bound(s(0.0), 3.0, 4.0)),
            verification: VerificationReport::default(),
            warnings: vec![],
            lmi_margin: 0.0,
            bound_detail: None,
        };
        let r = verify_certificate(
            &cert,
            &model,
            &x,
            &u,
            NonlinearitySource::Oracle(&oracle),
            10,
        )
        .unwrap();
        assert!(r.passed());
        assert_relative_eq!(r.vdot_max, 2.0 * (4.0 - 16.0) / 4.0, epsilon = 1e-12);

        let bad = SafeCertificate { k: s(-2.0), ..cert };
        let r = verify_certificate(
            &bad,
            &model,
            &x,
            &u,
            NonlinearitySource::Oracle(&oracle),
            10,
        )
        .unwrap();
        assert!(!r.input_ok);
        assert_eq!(r.failed_input_rows, vec![0, 1]);
    }

    #[test]
    fn linear_case_passes_all_checks() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, -0.2]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let x = Polytope::symmetric_box(&[1.0, 1.5]).unwrap();
        let u = Polytope::symmetric_box(&[2.0]).unwrap();
        let shape = crate::shape::synthesize_shape(&model, &x, &u, None, false).unwrap();
        let b = bound(DMatrix::zeros(2, 2), 0.5, 1.0);
        let cert = synthesize_safe_set(&model, &shape.e, &b, b.interval, &x, &u).unwrap();
        let oracle = NonlinearityOracle::zero(2);
        let r = verify_certificate(
            &cert,
            &model,
            &x,
            &u,
            NonlinearitySource::Oracle(&oracle),
            1000,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.vdot_max <= 1e-6);
        let json = serde_json::to_value(&cert).unwrap();
        for key in [
            "P",
            "E",
            "gamma",
            "Y",
            "K",
            "interval",
            "bound",
            "verification",
            "warnings",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json.as_object().unwrap().len(), 9);
        let bound_keys: Vec<_> = json["bound"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(bound_keys.len(), 3);
        let v = json["verification"].as_object().unwrap();
        assert_eq!(v.len(), 4);
        for key in ["state_ok", "input_ok", "vdot_max", "samples"] {
            assert!(v.contains_key(key));
        }
        let back: SafeCertificate = serde_json::from_value(json).unwrap();
        assert_eq!(back.p, cert.p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]

        #[test]
        fn relaxing_input_bound_never_shrinks_gamma(alpha in 1.0f64..3.0, q in 0.0f64..0.8) {
            let model = LinearModel::new(s(1.0), s(1.0)).unwrap();
            let x = Polytope::symmetric_box(&[3.0]).unwrap();
            let b = bound(s(q), 0.1, 9.0);
            let run = |bu: f64| {
                let u = Polytope::symmetric_box(&[bu]).unwrap();
                synthesize_safe_set(&model, &s(1.0), &b, b.interval, &x, &u).map(|c| c.gamma)
            };
            let g1 = run(1.5).unwrap();
            let g2 = run(1.5 * alpha).unwrap();
            prop_assert!(g2 >= g1 * (1.0 - 1e-6), "{} < {}", g2, g1);
        }

        #[test]
        fn scaling_both_bounds_never_shrinks_gamma(alpha in 1.0f64..2.0) {
            let model = LinearModel::new(s(0.5), s(1.0)).unwrap();
            let b = bound(s(0.2), 0.1, 20.0);
            let run = |a: f64| {
                let x = Polytope::symmetric_box(&[2.0 * a]).unwrap();
                let u = Polytope::symmetric_box(&[1.5 * a]).unwrap();
                synthesize_safe_set(&model, &s(1.0), &b, b.interval, &x, &u).map(|c| c.gamma)
            };
            prop_assert!(run(alpha).unwrap() >= run(1.0).unwrap() * (1.0 - 1e-6));
        }
    }
}
