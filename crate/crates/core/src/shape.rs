//! Safe-set shape `P = E⁻¹` from the linear model: the largest-volume
//! ellipsoid that a linear gain keeps invariant for the nominal dynamics and
//! that respects the state and input polytopes at level one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::{self, AffineMatrix, ConicProblem, ConicStatus};
use crate::error::{Error, Result};
use crate::linalg;
use crate::system_model::{DataRegion, LinearModel, Polytope};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeResult {
    #[serde(with = "linalg::serde_rows")]
    pub e: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub y0: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub k0: DMatrix<f64>,
    pub logdet: f64,
    /// Smallest eigenvalue of `−(AE + EAᵀ + BY₀ + Y₀ᵀBᵀ)`.
    pub decrease_margin: f64,
}

/// `AE + EAᵀ + BY + YᵀBᵀ` as an affine expression.
pub(crate) fn closed_loop_lyapunov(
    model: &LinearModel,
    e: &AffineMatrix,
    y: &AffineMatrix,
) -> Result<AffineMatrix> {
    let ae = e.left_mul(model.a())?;
    let by = y.left_mul(model.b())?;
    ae.try_add(&ae.transpose())?
        .try_add(&by)?
        .try_add(&by.transpose())
}

/// `[[b², a·M],[Mᵀaᵀ, N]]` for a row `a` of a polytope.
pub(crate) fn support_block(
    b: f64,
    a_row: &DMatrix<f64>,
    m: &AffineMatrix,
    corner: &AffineMatrix,
) -> Result<AffineMatrix> {
    let am = m.left_mul(a_row)?;
    AffineMatrix::block(&[
        vec![
            AffineMatrix::from_constant(&DMatrix::from_element(1, 1, b * b)),
            am.clone(),
        ],
        vec![am.transpose(), corner.clone()],
    ])
}

pub fn synthesize_shape(
    model: &LinearModel,
    x_poly: &Polytope,
    u_poly: &Polytope,
    region: Option<&DataRegion>,
    constrain_to_region: bool,
) -> Result<ShapeResult> {
    synthesize_shape_with_decay(model, x_poly, u_poly, region, constrain_to_region, 0.0)
}

/// Shape synthesis with the decrease condition tightened to
/// `AE + EAᵀ + BY₀ + Y₀ᵀBᵀ ⪯ −2αE`, leaving room for a nonlinearity bound that
/// is positive along the directions `B` cannot act on. `α = 0` is the plain
/// problem.
pub fn synthesize_shape_with_decay(
    model: &LinearModel,
    x_poly: &Polytope,
    u_poly: &Polytope,
    region: Option<&DataRegion>,
    constrain_to_region: bool,
    decay: f64,
) -> Result<ShapeResult> {
    if !(decay >= 0.0) || !decay.is_finite() {
        return Err(Error::InvalidModel(format!(
            "decay rate {decay} must be non-negative"
        )));
    }
    let (n, m) = (model.n(), model.m());
    if x_poly.dim() != n || u_poly.dim() != m {
        return Err(Error::DimensionMismatch("constraint polytopes".into()));
    }
    let mut prob = ConicProblem::new();
    let e = prob.symmetric(n);
    let y = prob.matrix(m, n);

    if constrain_to_region {
        let region = region.ok_or_else(|| {
            Error::DegenerateRegion("region constraint requested without a data region".into())
        })?;
        if region.dim() != n {
            return Err(Error::DimensionMismatch("data region".into()));
        }
        let inv = linalg::spd_inverse(region.a_delta())
            .map_err(|_| Error::DegenerateRegion("A_delta is singular".into()))?;
        prob.psd(AffineMatrix::from_constant(&inv).try_sub(&e)?)?;
    }
    prob.nsd(closed_loop_lyapunov(model, &e, &y)?.try_add(&e.scaled(2.0 * decay))?)?;
    for j in 0..x_poly.rows() {
        let row = x_poly.a().rows(j, 1).into_owned();
        prob.psd(support_block(x_poly.b()[j], &row, &e, &e)?)?;
    }
    for i in 0..u_poly.rows() {
        let row = u_poly.a().rows(i, 1).into_owned();
        prob.psd(support_block(u_poly.b()[i], &row, &y, &e)?)?;
    }
    prob.maximize_log_det(&e, 1.0)?;

    let sol = prob.solve(convex::DEFAULT_GAP_TOL);
    if sol.status != ConicStatus::Optimal {
        log::debug!("shape solve ended with {}", sol.detail);
        return Err(Error::SynthesisInfeasible);
    }
    let em = linalg::symmetrize(&sol.matrix(&e));
    if linalg::min_eigenvalue(&em) <= 1e-10 {
        return Err(Error::SynthesisInfeasible);
    }
    let ym = sol.matrix(&y);
    let p = linalg::spd_inverse(&em)?;
    let k0 = &ym * &p;
    let lyap = model.a() * &em
        + &em * model.a().transpose()
        + model.b() * &ym
        + ym.transpose() * model.b().transpose();
    let decrease_margin = linalg::min_eigenvalue(&(-lyap - &em * (2.0 * decay)));
    // A collapsed E can satisfy the absolute tolerance while violating the
    // decrease condition by a large factor relative to its own size.
    let size = linalg::max_eigenvalue(&em);
    if decrease_margin < -1e-6 || decrease_margin < -1e-6 * size {
        log::debug!("shape solve returned margin {decrease_margin:.3e} for |E| = {size:.3e}");
        return Err(Error::SynthesisInfeasible);
    }
    Ok(ShapeResult {
        logdet: em.determinant().ln(),
        decrease_margin,
        e: em,
        p,
        y0: ym,
        k0,
    })
}

/// Largest `γ̄` with `{xᵀPx ≤ γ̄} ⊆ {xᵀA_δx ≤ 1}`.
pub fn region_level(p: &DMatrix<f64>, region: &DataRegion) -> Result<f64> {
    Ok(1.0 / linalg::max_generalized_eigenvalue(region.a_delta(), p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn boundary_samples(p: &DMatrix<f64>, count: usize) -> Vec<DVector<f64>> {
        (0..count)
            .map(|k| {
                let t = k as f64 / count as f64 * std::f64::consts::TAU;
                let d = DVector::from_vec(vec![t.cos(), t.sin()]);
                let l = linalg::quad_form(p, &d);
                d / l.sqrt()
            })
            .collect()
    }

    #[test]
    fn identity_case_hits_region_bound() {
        let model = LinearModel::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let x = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        let u = Polytope::symmetric_box(&[10.0, 10.0]).unwrap();
        let region = DataRegion::new(DMatrix::identity(2, 2), 0.1).unwrap();
        let s = synthesize_shape(&model, &x, &u, Some(&region), true).unwrap();
        assert!(
            (s.e.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-5,
            "{}",
            s.e
        );
        assert!(s.decrease_margin >= -1e-6);
    }

    #[test]
    fn zero_input_bound_is_infeasible() {
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let x = Polytope::symmetric_box(&[2.0]).unwrap();
        let u = Polytope::symmetric_box(&[0.0]).unwrap();
        assert!(matches!(
            synthesize_shape(&model, &x, &u, None, false),
            Err(Error::SynthesisInfeasible)
        ));
    }

    #[test]
    fn motivating_shape() {
        // ẋ = x + u, |x| ≤ 2, |u| ≤ 2: E = 4, K₀ = −1 (Y₀ = −4).
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let x = Polytope::symmetric_box(&[2.0]).unwrap();
        let u = Polytope::symmetric_box(&[2.0]).unwrap();
        let s = synthesize_shape(&model, &x, &u, None, false).unwrap();
        assert!((s.e[(0, 0)] - 4.0).abs() < 1e-5);
        assert!((s.k0[(0, 0)] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn region_containment_and_decrease() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -3.0, 4.0]),
            DMatrix::from_column_slice(2, 1, &[0.5, -2.0]),
        )
        .unwrap();
        let x = Polytope::symmetric_box(&[2.0, 2.0]).unwrap();
        let u = Polytope::symmetric_box(&[3.0]).unwrap();
        let a_delta = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.7]);
        let region = DataRegion::new(a_delta.clone(), 0.1).unwrap();
        let s = synthesize_shape(&model, &x, &u, Some(&region), true).unwrap();
        assert!(s.decrease_margin >= -1e-6);
        for b in boundary_samples(&s.p, 1000) {
            assert!(linalg::quad_form(&a_delta, &b) <= 1.0 + 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn shape_scales_quadratically(alpha in 0.3f64..3.0, a01 in -1.0f64..1.0, b1 in 0.5f64..2.0) {
            let model = LinearModel::new(
                DMatrix::from_row_slice(2, 2, &[-0.5, a01, 0.3, 0.2]),
                DMatrix::from_column_slice(2, 1, &[b1, 1.0]),
            ).unwrap();
            let base = |s: f64| {
                let x = Polytope::symmetric_box(&[s, 1.5 * s]).unwrap();
                let u = Polytope::symmetric_box(&[2.0 * s]).unwrap();
                let region = DataRegion::new(DMatrix::identity(2, 2) / (s * s), 0.1).unwrap();
                synthesize_shape(&model, &x, &u, Some(&region), true).unwrap()
            };
            let e1 = base(1.0).e;
            let ea = base(alpha).e;
            let diff = (ea - e1.clone() * alpha * alpha).abs().max();
            prop_assert!(diff < 1e-4 * alpha * alpha * (1.0 + e1.abs().max()), "diff {}", diff);
        }
    }
}
