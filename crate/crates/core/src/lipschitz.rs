//! Level-set intervals, dilated rings and the S-procedure bound on `xᵀPd(x)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::convex::{self, AffineMatrix, ConicProblem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::system_model::{DataRegion, DataSet};

pub const DEFAULT_CHUNK_SIZE: usize = 500;

/// `[γ₁, γ₂]` with `0 < γ₁ < γ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl Interval {
    pub fn new(gamma_lo: f64, gamma_hi: f64) -> Result<Self> {
        if !(gamma_lo > 0.0 && gamma_hi > gamma_lo && gamma_hi.is_finite()) {
            return Err(Error::BadWidths(format!(
                "interval [{gamma_lo}, {gamma_hi}]"
            )));
        }
        Ok(Self { gamma_lo, gamma_hi })
    }

    pub fn width(&self) -> f64 {
        self.gamma_hi - self.gamma_lo
    }

    pub fn contains(&self, gamma: f64) -> bool {
        self.gamma_lo <= gamma && gamma <= self.gamma_hi
    }
}

/// Contiguous intervals stacked downwards from `γ̄`, widths in order.
pub fn make_intervals(gamma_bar: f64, widths: &[f64]) -> Result<Vec<Interval>> {
    if !(gamma_bar > 0.0) {
        return Err(Error::BadWidths(format!("gamma_bar = {gamma_bar}")));
    }
    if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::BadWidths("widths must be positive".into()));
    }
    let mut hi = gamma_bar;
    let mut out = Vec::with_capacity(widths.len());
    for w in widths {
        let lo = hi - w;
        if lo <= 0.0 {
            return Err(Error::BadWidths(format!(
                "widths sum past gamma_bar = {gamma_bar}"
            )));
        }
        out.push(Interval::new(lo, hi)?);
        hi = lo;
    }
    Ok(out)
}

/// The uniform schedule `Γᵢ = [γ̄ − i·w − w, γ̄ − i·w]` for `i = first..first+count`.
pub fn uniform_schedule(
    gamma_bar: f64,
    width: f64,
    first: usize,
    count: usize,
) -> Result<Vec<Interval>> {
    if !(width > 0.0) || count == 0 {
        return Err(Error::BadWidths(format!("width {width}, count {count}")));
    }
    (first..first + count)
        .map(|i| {
            let hi = gamma_bar - i as f64 * width;
            Interval::new(hi - width, hi)
        })
        .collect()
}

/// `{γ₁ ≤ xᵀPx ≤ γ₂} ⊕ B_δ(0)`.
#[derive(Debug, Clone)]
pub struct Ring {
    p: DMatrix<f64>,
    interval: Interval,
    delta: f64,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl Ring {
    pub fn new(p: &DMatrix<f64>, interval: Interval, delta: f64) -> Result<Self> {
        let p = linalg::symmetrize(p);
        let eig = p.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(Error::SingularP);
        }
        if !(delta >= 0.0) {
            return Err(Error::BadWidths(format!("delta = {delta}")));
        }
        Ok(Self {
            p,
            interval,
            delta,
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
        })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn level(&self, x: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.p, x)
    }

    /// True when `x` lies in the undilated annulus.
    pub fn contains_exact(&self, x: &DVector<f64>) -> bool {
        self.interval.contains(self.level(x))
    }

    /// Dilated membership: distance to the annulus is at most `δ`.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let level = self.level(x);
        if self.interval.contains(level) {
            return true;
        }
        if self.delta == 0.0 {
            return false;
        }
        let target = if level > self.interval.gamma_hi {
            self.interval.gamma_hi
        } else {
            self.interval.gamma_lo
        };
        // Radial projection is a cheap sufficient test.
        let norm = x.norm();
        let radial = if level > 0.0 {
            norm * (1.0 - (target / level).sqrt()).abs()
        } else {
            f64::INFINITY
        };
        if radial <= self.delta {
            return true;
        }
        self.distance_to_level(x, target) <= self.delta
    }

    /// Euclidean distance from `x` to the surface `{yᵀPy = γ}`.
    pub fn distance_to_level(&self, x: &DVector<f64>, gamma: f64) -> f64 {
        let z = self.eigvecs.transpose() * x;
        let lam = &self.eigvals;
        let level = self.level(x);
        let g = |mu: f64| -> f64 {
            z.iter()
                .zip(lam.iter())
                .map(|(zi, li)| li * zi * zi / (1.0 + mu * li).powi(2))
                .sum::<f64>()
                - gamma
        };
        let dist_at = |mu: f64| -> f64 {
            z.iter()
                .zip(lam.iter())
                .map(|(zi, li)| {
                    let yi = zi / (1.0 + mu * li);
                    (zi - yi).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        if level == gamma {
            return 0.0;
        }
        if level > gamma {
            // μ ≥ 0, g decreasing from level − γ > 0 to −γ.
            let mut lo = 0.0;
            let mut hi = 1.0;
            while g(hi) > 0.0 {
                hi *= 2.0;
            }
            bisect(&g, &mut lo, &mut hi);
            return dist_at(0.5 * (lo + hi));
        }
        // Inside: μ ∈ (−1/λmax, 0), g increasing as μ decreases.
        let lmax = lam.max();
        let floor = -1.0 / lmax;
        let scale = z.norm().max(1.0) * 1e-14;
        let top: Vec<usize> = (0..lam.len())
            .filter(|i| (lam[*i] - lmax).abs() <= 1e-12 * lmax)
            .collect();
        let top_mass: f64 = top.iter().map(|i| z[*i] * z[*i]).sum();
        if top_mass.sqrt() <= scale {
            // Degenerate: x has no component along the longest-curvature axis.
            let rest: f64 = (0..lam.len())
                .filter(|i| !top.contains(i))
                .map(|i| {
                    let yi = z[i] / (1.0 - lam[i] / lmax);
                    lam[i] * yi * yi
                })
                .sum();
            if rest <= gamma {
                let t2 = (gamma - rest) / lmax;
                let d2: f64 = (0..lam.len())
                    .filter(|i| !top.contains(i))
                    .map(|i| {
                        let yi = z[i] / (1.0 - lam[i] / lmax);
                        (z[i] - yi).powi(2)
                    })
                    .sum();
                return (d2 + t2).sqrt();
            }
        }
        let mut lo = floor * 0.5;
        let mut hi = 0.0;
        for _ in 0..1100 {
            if g(lo) >= 0.0 {
                break;
            }
            hi = lo;
            lo = 0.5 * (lo + floor);
        }
        bisect(&g, &mut lo, &mut hi);
        dist_at(0.5 * (lo + hi))
    }

    /// Random points with level drawn uniformly in `[γ₁, γ₂]`.
    pub fn sample_exact(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        (0..count)
            .map(|k| {
                let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let t = match k {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f64>(),
                };
                let level = self.interval.gamma_lo + t * self.interval.width();
                let dl = linalg::quad_form(&self.p, &dir);
                dir * (level / dl).sqrt()
            })
            .collect()
    }

    /// Scales `x` along its ray so its level is clamped into the interval.
    pub fn project_radial(&self, x: &DVector<f64>) -> DVector<f64> {
        let level = self.level(x);
        if level <= 0.0 {
            let mut e = DVector::zeros(self.dim());
            e[0] = 1.0;
            return e * (self.interval.gamma_lo / self.p[(0, 0)]).sqrt();
        }
        let target = level.clamp(self.interval.gamma_lo, self.interval.gamma_hi);
        x * (target / level).sqrt()
    }
}

/// Bisection on a bracket with `g(lo) ≥ 0 ≥ g(hi)`.
fn bisect(g: &dyn Fn(f64) -> f64, lo: &mut f64, hi: &mut f64) {
    for _ in 0..200 {
        let mid = 0.5 * (*lo + *hi);
        if mid == *lo || mid == *hi {
            break;
        }
        if g(mid) > 0.0 {
            *lo = mid;
        } else {
            *hi = mid;
        }
    }
}

pub fn ring_indices(data: &DataSet, ring: &Ring) -> Vec<usize> {
    data.xs()
        .iter()
        .enumerate()
        .filter(|(_, x)| ring.contains(x))
        .map(|(i, _)| i)
        .collect()
}

/// `xᵀPd` for one datum.
pub fn lyapunov_term(p: &DMatrix<f64>, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
    x.dot(&(p * d))
}

/// `2·max |f₁ − f₂| / ‖x₁ − x₂‖` over pairs from `indices`, `f = xᵀPd(x)`.
pub fn estimate_lipschitz(data: &DataSet, p: &DMatrix<f64>, indices: &[usize]) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: indices.len(),
        });
    }
    let xs: Vec<&DVector<f64>> = indices.iter().map(|i| &data.xs()[*i]).collect();
    let fs: Vec<f64> = indices
        .iter()
        .map(|i| lyapunov_term(p, &data.xs()[*i], &data.ds()[*i]))
        .collect();
    let mut best: f64 = 0.0;
    for a in 0..xs.len() {
        for b in (a + 1)..xs.len() {
            let dist = (xs[a] - xs[b]).norm();
            if dist > 0.0 {
                best = best.max((fs[a] - fs[b]).abs() / dist);
            }
        }
    }
    Ok(2.0 * best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoundKind {
    Lipschitz {
        lipschitz: f64,
        delta: f64,
        estimated: bool,
    },
    Gp {
        c: f64,
    },
    GpGrid {
        beta: f64,
        delta_grid: f64,
        lipschitz: f64,
    },
}

impl BoundKind {
    pub fn label(&self) -> &'static str {
        match self {
            BoundKind::Lipschitz { .. } => "lipschitz",
            BoundKind::Gp { .. } => "gp",
            BoundKind::GpGrid { .. } => "gp-grid",
        }
    }

    /// Confidence multiplier (`c` for GP, `β` for the grid variant).
    pub fn confidence(&self) -> Option<f64> {
        match self {
            BoundKind::Lipschitz { .. } => None,
            BoundKind::Gp { c } => Some(*c),
            BoundKind::GpGrid { beta, .. } => Some(*beta),
        }
    }
}

/// `Q` with `xᵀPd(x) ≤ xᵀQx` on the ring of `interval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticBound {
    #[serde(with = "linalg::serde_rows")]
    pub q: DMatrix<f64>,
    pub interval: Interval,
    pub kind: BoundKind,
    /// Root-mean-square gap between `x_kᵀQx_k` and the targets.
    pub fit_residual: f64,
    /// Smallest eigenvalue of the negated S-procedure blocks (≥ 0 when exact).
    pub sprocedure_min_eig: Option<f64>,
    pub points_used: usize,
    pub iterations: usize,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub chain: Vec<DMatrix<f64>>,
}

/// Result of one S-procedure solve.
#[derive(Debug, Clone)]
pub struct SProcedureFit {
    pub q: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub chain: Vec<DMatrix<f64>>,
    pub min_eig: f64,
    pub fit_residual: f64,
}

/// Negated S-procedure block for one datum; PSD iff the bound holds on the ball.
pub fn sprocedure_block(
    q: &DMatrix<f64>,
    lambda: f64,
    x: &DVector<f64>,
    target: f64,
    delta: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(q + DMatrix::identity(n, n) * lambda));
    for i in 0..n {
        m[(i, n)] = -lambda * x[i];
        m[(n, i)] = -lambda * x[i];
    }
    m[(n, n)] = lambda * (x.norm_squared() - delta * delta) - target;
    m
}

/// Finds `Q` with `x̄ᵀQx̄ ≥ p_k` on every ball `B_δ(x_k)`, closest to the targets
/// in least squares, optionally in disjoint chunks with `Q ⪰ Q_prev`.
pub fn solve_sprocedure(
    points: &[DVector<f64>],
    targets: &[f64],
    delta: f64,
    chunk_size: Option<usize>,
) -> Result<SProcedureFit> {
    if points.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let n = points[0].len();
    let chunk = chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE).max(1);
    let nchunks = points.len().div_ceil(chunk);
    let scale = targets.iter().fold(0.0f64, |m, t| m.max(t.abs())).max(1e-6);

    let mut lambdas = vec![0.0; points.len()];
    let mut chain: Vec<DMatrix<f64>> = Vec::new();
    let mut prev: Option<DMatrix<f64>> = None;
    for c in 0..nchunks {
        // Strided chunks so each one spans the whole ring.
        let members: Vec<usize> = (c..points.len()).step_by(nchunks).collect();
        let mut prob = ConicProblem::new();
        let q = prob.symmetric(n);
        let mut residuals = Vec::with_capacity(members.len());
        let mut lams = Vec::with_capacity(members.len());
        for &k in &members {
            let x = &points[k];
            let lam = prob.scalar();
            lams.push(lam.clone());
            prob.nonneg(lam.clone());
            let mut blk = AffineMatrix::zeros(n + 1, n + 1);
            for j in 0..n {
                for i in 0..n {
                    let mut e = q.get(i, j).scaled(1.0 / scale);
                    if i == j {
                        e = e + lam.clone();
                    }
                    blk.set(i, j, e);
                }
                blk.set(j, n, lam.scaled(-x[j]));
                blk.set(n, j, lam.scaled(-x[j]));
            }
            blk.set(
                n,
                n,
                lam.scaled(x.norm_squared() - delta * delta) - targets[k] / scale,
            );
            prob.psd(blk)?;
            let form = convex::quadratic_form_expr(&q, x);
            residuals.push((form - targets[k]).scaled(1.0 / scale));
        }
        prob.minimize_norm(residuals);
        if let Some(qp) = &prev {
            prob.psd(
                q.try_sub(&AffineMatrix::from_constant(qp))?
                    .scaled(1.0 / scale),
            )?;
        }
        let sol = prob.solve(convex::DEFAULT_GAP_TOL);
        match sol.status {
            convex::ConicStatus::Optimal => {}
            convex::ConicStatus::Infeasible => return Err(Error::Infeasible),
            convex::ConicStatus::NumericalFailure => {
                return Err(Error::NumericalFailure(sol.detail))
            }
        }
        let qm = linalg::symmetrize(&sol.matrix(&q));
        for (lam, &k) in lams.iter().zip(&members) {
            lambdas[k] = sol.value(lam) * scale;
        }
        chain.push(qm.clone());
        prev = Some(qm);
    }
    let q = prev.expect("at least one chunk");
    let min_eig = points
        .iter()
        .zip(targets)
        .zip(&lambdas)
        .map(|((x, t), l)| linalg::min_eigenvalue(&sprocedure_block(&q, *l, x, *t, delta)) / scale)
        .fold(f64::INFINITY, f64::min);
    let fit_residual = (points
        .iter()
        .zip(targets)
        .map(|(x, t)| (linalg::quad_form(&q, x) - t).powi(2))
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    Ok(SProcedureFit {
        q,
        lambdas,
        chain,
        min_eig,
        fit_residual,
    })
}

/// Checks `S^P(γ₂) ⊆ D_δ` and that the region's certified `δ` is within the one used.
pub fn check_region(
    p: &DMatrix<f64>,
    interval: &Interval,
    region: &DataRegion,
    delta: f64,
) -> Result<()> {
    let gamma_bar = 1.0 / linalg::max_generalized_eigenvalue(region.a_delta(), p)?;
    if interval.gamma_hi > gamma_bar * (1.0 + 1e-9) {
        return Err(Error::AssumptionViolated(format!(
            "gamma_hi {} exceeds the data-region level {gamma_bar:.6}",
            interval.gamma_hi
        )));
    }
    if region.delta() > delta * (1.0 + 1e-9) {
        return Err(Error::AssumptionViolated(format!(
            "data covering radius {} exceeds delta {delta}",
            region.delta()
        )));
    }
    Ok(())
}

/// Quadratic bound on `xᵀPd(x)` over the ring from noise-free data and a
/// Lipschitz constant `L` of `xᵀPd(x)`.
pub fn bound_nonlinearity_lipschitz(
    data: &DataSet,
    p: &DMatrix<f64>,
    interval: Interval,
    delta: f64,
    lipschitz: f64,
    chunk_size: Option<usize>,
    region: Option<&DataRegion>,
) -> Result<QuadraticBound> {
    if !(lipschitz >= 0.0) {
        return Err(Error::AssumptionViolated(format!("L = {lipschitz}")));
    }
    if let Some(region) = region {
        check_region(p, &interval, region, delta)?;
    }
    let ring = Ring::new(p, interval, delta)?;
    let idx = ring_indices(data, &ring);
    if idx.is_empty() {
        return Err(Error::EmptyRing {
            gamma_lo: interval.gamma_lo,
            gamma_hi: interval.gamma_hi,
        });
    }
    let points: Vec<DVector<f64>> = idx.iter().map(|i| data.xs()[*i].clone()).collect();
    let targets: Vec<f64> = idx
        .iter()
        .map(|i| lyapunov_term(p, &data.xs()[*i], &data.ds()[*i]) + delta * lipschitz)
        .collect();
    let fit = solve_sprocedure(&points, &targets, delta, chunk_size)?;
    Ok(QuadraticBound {
        q: fit.q,
        interval,
        kind: BoundKind::Lipschitz {
            lipschitz,
            delta,
            estimated: false,
        },
        fit_residual: fit.fit_residual,
        sprocedure_min_eig: Some(fit.min_eig),
        points_used: points.len(),
        iterations: fit.chain.len(),
        notes: Vec::new(),
        chain: fit.chain,
    })
}

/// Sampled check of `xᵀPd(x) ≤ xᵀQx + tol` on the undilated ring; returns the
/// largest violation found (negative when the bound holds with margin).
pub fn audit_bound<F>(
    bound: &QuadraticBound,
    p: &DMatrix<f64>,
    d: F,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let ring = Ring::new(p, bound.interval, 0.0)?;
    Ok(ring
        .sample_exact(samples, seed)
        .iter()
        .map(|x| lyapunov_term(p, x, &d(x)) - linalg::quad_form(&bound.q, x))
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system_model::NonlinearityOracle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn uniform_schedule_matches_exploration_layout() {
        let iv = uniform_schedule(1.0, 0.1, 1, 8).unwrap();
        assert_eq!(iv.len(), 8);
        assert_relative_eq!(iv[0].gamma_lo, 0.8, epsilon = 1e-12);
        assert_relative_eq!(iv[0].gamma_hi, 0.9, epsilon = 1e-12);
        assert_relative_eq!(iv[7].gamma_lo, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn single_width_interval() {
        let iv = make_intervals(1.0, &[0.1]).unwrap();
        assert_relative_eq!(iv[0].gamma_lo, 0.9, epsilon = 1e-12);
        assert_relative_eq!(iv[0].gamma_hi, 1.0);
        assert!(matches!(
            make_intervals(1.0, &[2.0]),
            Err(Error::BadWidths(_))
        ));
        assert!(matches!(
            make_intervals(1.0, &[-0.1]),
            Err(Error::BadWidths(_))
        ));
    }

    #[test]
    fn ring_membership_examples() {
        let p = DMatrix::identity(2, 2);
        let ring = Ring::new(&p, Interval::new(0.81, 1.0).unwrap(), 0.0).unwrap();
        assert!(ring.contains(&v(&[0.95, 0.0])));
        assert!(!ring.contains(&v(&[0.5, 0.0])));
        let dil = Ring::new(&p, Interval::new(0.81, 1.0).unwrap(), 0.15).unwrap();
        assert!(dil.contains(&v(&[1.1, 0.0])));
        assert!(!dil.contains(&v(&[1.2, 0.0])));
        let data = DataSet::new(vec![v(&[5.0, 5.0])], vec![v(&[0.0, 0.0])]).unwrap();
        assert!(ring_indices(&data, &dil).is_empty());
    }

    #[test]
    fn distance_to_level_against_brute_force() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 1.0]);
        let ring = Ring::new(&p, Interval::new(0.5, 1.0).unwrap(), 0.1).unwrap();
        let boundary: Vec<DVector<f64>> = (0..200_000)
            .map(|k| {
                let t = k as f64 / 200_000.0 * std::f64::consts::TAU;
                let d = v(&[t.cos(), t.sin()]);
                let l = linalg::quad_form(&p, &d);
                d / l.sqrt()
            })
            .collect();
        for x in [
            v(&[0.9, 0.2]),
            v(&[0.05, 0.1]),
            v(&[0.0, 0.0]),
            v(&[-0.3, 1.4]),
            v(&[0.0, 0.3]),
        ] {
            let brute = boundary
                .iter()
                .map(|b| (b - &x).norm())
                .fold(f64::INFINITY, f64::min);
            let exact = ring.distance_to_level(&x, 1.0);
            assert!((brute - exact).abs() < 1e-4, "{x:?}: {brute} vs {exact}");
        }
    }

    #[test]
    fn degenerate_inside_distance() {
        // Circle-like case with x on the minor axis: nearest boundary point is
        // along the major-curvature axis.
        let p = DMatrix::from_diagonal(&v(&[1.0, 4.0]));
        let ring = Ring::new(&p, Interval::new(0.5, 1.0).unwrap(), 0.1).unwrap();
        let x = v(&[0.1, 0.0]);
        let boundary_min = (0..100_000)
            .map(|k| {
                let t = k as f64 / 100_000.0 * std::f64::consts::TAU;
                let b = v(&[t.cos(), 0.5 * t.sin()]);
                (b - &x).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((ring.distance_to_level(&x, 1.0) - boundary_min).abs() < 1e-4);
    }

    #[test]
    fn lipschitz_estimator_pairs() {
        let data = DataSet::new(
            vec![v(&[0.0]), v(&[1.0]), v(&[2.0])],
            vec![v(&[0.0]), v(&[1.0]), v(&[2.0])],
        )
        .unwrap();
        // f = x·d = {0, 1, 4}; slopes {1, 2, 3}.
        let p = DMatrix::identity(1, 1);
        assert_relative_eq!(estimate_lipschitz(&data, &p, &[0, 1, 2]).unwrap(), 6.0);
        let flat = DataSet::new(vec![v(&[1.0]), v(&[2.0])], vec![v(&[1.0]), v(&[0.5])]).unwrap();
        assert_eq!(estimate_lipschitz(&flat, &p, &[0, 1]).unwrap(), 0.0);
        assert!(matches!(
            estimate_lipschitz(&data, &p, &[0]),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn zero_nonlinearity_gives_zero_bound() {
        let xs: Vec<_> = (0..40)
            .map(|k| {
                let t = k as f64 * 0.157;
                v(&[0.95 * t.cos(), 0.95 * t.sin()])
            })
            .collect();
        let data = DataSet::new(xs.clone(), vec![v(&[0.0, 0.0]); xs.len()]).unwrap();
        let p = DMatrix::identity(2, 2);
        let b = bound_nonlinearity_lipschitz(
            &data,
            &p,
            Interval::new(0.81, 1.0).unwrap(),
            0.05,
            0.0,
            None,
            None,
        )
        .unwrap();
        assert!(b.q.abs().max() < 1e-6, "{}", b.q);
    }

    #[test]
    fn motivating_cubic_bound() {
        let oracle = NonlinearityOracle::new(1, |x| -x.map(|v| v.powi(3)));
        let xs: Vec<_> = (-200..=200).map(|k| v(&[k as f64 * 0.01])).collect();
        let data = DataSet::from_oracle(xs, &oracle).unwrap();
        let p = DMatrix::identity(1, 1);
        let iv = Interval::new(1.9f64.powi(2), 4.0).unwrap();
        let delta = 0.005;
        // |d/dx (−x⁴)| = 4|x|³ ≤ 4·2.005³ on the dilated ring.
        let l = 4.0 * 2.005f64.powi(3);
        let b = bound_nonlinearity_lipschitz(&data, &p, iv, delta, l, None, None).unwrap();
        assert!(b.q[(0, 0)] < 0.0);
        for k in 0..1000 {
            let x = 1.9 + 0.1 * k as f64 / 999.0;
            for s in [x, -x] {
                assert!(-s.powi(4) <= b.q[(0, 0)] * s * s + 1e-9);
            }
        }
        assert!(b.sprocedure_min_eig.unwrap() >= -1e-7);
    }

    #[test]
    fn chunked_chain_is_monotone() {
        let oracle =
            NonlinearityOracle::new(2, |x| v(&[0.5 * x[0].powi(4), 0.35 - 1.5 * x[1].powi(3)]));
        let mut xs = Vec::new();
        for i in -30..=30 {
            for j in -30..=30 {
                xs.push(v(&[i as f64 * 0.04, j as f64 * 0.04]));
            }
        }
        let data = DataSet::from_oracle(xs, &oracle).unwrap();
        let p = DMatrix::identity(2, 2);
        let iv = Interval::new(0.8, 1.0).unwrap();
        let b = bound_nonlinearity_lipschitz(&data, &p, iv, 0.03, 9.0, Some(60), None).unwrap();
        assert!(b.chain.len() > 1);
        for q in &b.chain {
            assert!(linalg::min_eigenvalue(&(&b.q - q)) >= -1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ring_sample_levels(seed in 0u64..1000) {
            let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
            let ring = Ring::new(&p, Interval::new(0.4, 0.9).unwrap(), 0.0).unwrap();
            for x in ring.sample_exact(50, seed) {
                let l = ring.level(&x);
                prop_assert!((0.4 - 1e-12..=0.9 + 1e-12).contains(&l));
            }
        }

        #[test]
        fn dilated_ring_contains_nearby(
            angle in 0.0f64..std::f64::consts::TAU,
            t in 0.0f64..1.0,
            off in (-1.0f64..1.0, -1.0f64..1.0),
        ) {
            let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
            let ring = Ring::new(&p, Interval::new(0.4, 0.9).unwrap(), 0.1).unwrap();
            let d = v(&[angle.cos(), angle.sin()]);
            let y = &d * ((0.4 + 0.5 * t) / linalg::quad_form(&p, &d)).sqrt();
            let o = v(&[off.0, off.1]);
            let o = if o.norm() > 0.0 { o.normalize() * 0.0999 } else { o };
            prop_assert!(ring.contains(&(y + o)));
        }
    }
}
