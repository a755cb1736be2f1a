//! Small conic modeling layer over Clarabel: scalar and matrix variables,
//! affine expressions, PSD / nonnegative / zero / exponential cones and a
//! combined linear + sum-of-squares + log-det objective.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_FEAS_TOL: f64 = 1e-7;
pub const DEFAULT_GAP_TOL: f64 = 1e-8;

/// `Σ coeff·x_var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(index: usize) -> Self {
        Self {
            terms: vec![(index, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant_part(&self) -> f64 {
        self.constant
    }

    /// Merges duplicate variables and drops zero coefficients.
    pub fn compact(&self) -> Self {
        let mut map: BTreeMap<usize, f64> = BTreeMap::new();
        for &(i, c) in &self.terms {
            *map.entry(i).or_insert(0.0) += c;
        }
        Self {
            terms: map.into_iter().filter(|(_, c)| *c != 0.0).collect(),
            constant: self.constant,
        }
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|(i, c)| (*i, c * s)).collect(),
            constant: self.constant * s,
        }
    }

    fn add_scaled(&mut self, other: &Affine, s: f64) {
        if s == 0.0 {
            return;
        }
        self.terms
            .extend(other.terms.iter().map(|(i, c)| (*i, c * s)));
        self.constant += other.constant * s;
    }
}

impl Add for Affine {
    type Output = Affine;
    fn add(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Add<f64> for Affine {
    type Output = Affine;
    fn add(mut self, rhs: f64) -> Affine {
        self.constant += rhs;
        self
    }
}

impl Sub for Affine {
    type Output = Affine;
    fn sub(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Sub<f64> for Affine {
    type Output = Affine;
    fn sub(mut self, rhs: f64) -> Affine {
        self.constant -= rhs;
        self
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(self, rhs: f64) -> Affine {
        self.scaled(rhs)
    }
}

impl Neg for Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.scaled(-1.0)
    }
}

/// Dense matrix of affine expressions, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<Affine>,
}

impl AffineMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![Affine::default(); nrows * ncols],
        }
    }

    pub fn from_constant(m: &DMatrix<f64>) -> Self {
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data: m.iter().map(|v| Affine::constant(*v)).collect(),
        }
    }

    /// `a · m` for a scalar affine `a` and constant matrix `m`.
    pub fn scalar_times(a: &Affine, m: &DMatrix<f64>) -> Self {
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data: m.iter().map(|v| a.scaled(*v)).collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn get(&self, i: usize, j: usize) -> &Affine {
        &self.data[i + j * self.nrows]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Affine) {
        self.data[i + j * self.nrows] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.ncols, self.nrows);
        for j in 0..self.ncols {
            for i in 0..self.nrows {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    /// `c · self` for constant `c`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> Result<Self> {
        if c.ncols() != self.nrows {
            return Err(Error::DimensionMismatch("left_mul".into()));
        }
        let mut out = Self::zeros(c.nrows(), self.ncols);
        for j in 0..self.ncols {
            for i in 0..c.nrows() {
                let mut acc = Affine::default();
                for k in 0..self.nrows {
                    acc.add_scaled(self.get(k, j), c[(i, k)]);
                }
                out.set(i, j, acc.compact());
            }
        }
        Ok(out)
    }

    /// `self · c` for constant `c`.
    pub fn right_mul(&self, c: &DMatrix<f64>) -> Result<Self> {
        Ok(self.transpose().left_mul(&c.transpose())?.transpose())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().map(|a| a.scaled(s)).collect(),
        }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} + {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        Ok(Self {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.clone() + b.clone())
                .collect(),
        })
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.try_add(&other.scaled(-1.0))
    }

    /// Assembles a block matrix; every row of blocks must have matching heights.
    pub fn block(rows: &[Vec<AffineMatrix>]) -> Result<Self> {
        let heights: Vec<usize> = rows.iter().map(|r| r[0].nrows).collect();
        let widths: Vec<usize> = rows[0].iter().map(|b| b.ncols).collect();
        let mut out = Self::zeros(heights.iter().sum(), widths.iter().sum());
        let mut r0 = 0;
        for (bi, row) in rows.iter().enumerate() {
            if row.len() != widths.len() {
                return Err(Error::DimensionMismatch("ragged block row".into()));
            }
            let mut c0 = 0;
            for (bj, blk) in row.iter().enumerate() {
                if blk.nrows != heights[bi] || blk.ncols != widths[bj] {
                    return Err(Error::DimensionMismatch("block size".into()));
                }
                for j in 0..blk.ncols {
                    for i in 0..blk.nrows {
                        out.set(r0 + i, c0 + j, blk.get(i, j).clone());
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows, self.ncols, |i, j| self.get(i, j).eval(x))
    }
}

#[derive(Debug, Clone)]
struct PsdConstraint {
    expr: AffineMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest violation over all constraints (negative min-eig for PSD blocks).
    pub max_residual: f64,
    pub iterations: u32,
    pub detail: String,
}

impl ConicSolution {
    pub fn value(&self, a: &Affine) -> f64 {
        a.eval(&self.x)
    }

    pub fn matrix(&self, m: &AffineMatrix) -> DMatrix<f64> {
        m.eval(&self.x)
    }
}

/// Conic program `min cᵀx + Σ r_j(x)² − w·log det M(x)` subject to cone
/// memberships of affine expressions.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    nvars: usize,
    linear: Affine,
    squares: Vec<Affine>,
    psd: Vec<PsdConstraint>,
    nonneg: Vec<Affine>,
    zero: Vec<Affine>,
    exp: Vec<[Affine; 3]>,
    soc: Vec<Vec<Affine>>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.nvars
    }

    pub fn scalar(&mut self) -> Affine {
        self.nvars += 1;
        Affine::var(self.nvars - 1)
    }

    /// Symmetric `n×n` variable with `n(n+1)/2` free entries.
    pub fn symmetric(&mut self, n: usize) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = self.scalar();
                m.set(i, j, v.clone());
                m.set(j, i, v);
            }
        }
        m
    }

    pub fn matrix(&mut self, nrows: usize, ncols: usize) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(nrows, ncols);
        for j in 0..ncols {
            for i in 0..nrows {
                let v = self.scalar();
                m.set(i, j, v);
            }
        }
        m
    }

    /// Adds `expr` to the minimized objective.
    pub fn minimize(&mut self, expr: Affine) {
        self.linear = std::mem::take(&mut self.linear) + expr;
    }

    pub fn maximize(&mut self, expr: Affine) {
        self.minimize(-expr);
    }

    /// `‖rest‖₂ ≤ head`.
    pub fn second_order_cone(&mut self, head: Affine, rest: Vec<Affine>) {
        let mut v = Vec::with_capacity(rest.len() + 1);
        v.push(head.compact());
        v.extend(rest.into_iter().map(|a| a.compact()));
        self.soc.push(v);
    }

    /// Adds `‖r‖₂` to the minimized objective through an epigraph variable,
    /// which has the same minimiser as `Σ r_j²` but is resolved to solver
    /// accuracy in the residual rather than in its square.
    pub fn minimize_norm(&mut self, residuals: Vec<Affine>) -> Affine {
        let t = self.scalar();
        self.second_order_cone(t.clone(), residuals);
        self.minimize(t.clone());
        t
    }

    /// Adds `r(x)²` to the minimized objective.
    pub fn add_square(&mut self, r: Affine) {
        self.squares.push(r.compact());
    }

    /// Adds `−weight · log det m` to the minimized objective via the
    /// triangular-factor exponential-cone encoding.
    pub fn maximize_log_det(&mut self, m: &AffineMatrix, weight: f64) -> Result<()> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch(
                "log det of non-square matrix".into(),
            ));
        }
        let mut z = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.scalar();
                z.set(i, j, v);
            }
        }
        let mut diag = AffineMatrix::zeros(n, n);
        for i in 0..n {
            diag.set(i, i, z.get(i, i).clone());
        }
        let block = AffineMatrix::block(&[vec![m.clone(), z.clone()], vec![z.transpose(), diag]])?;
        self.psd(block)?;
        for i in 0..n {
            let t = self.scalar();
            self.exp
                .push([t.clone(), Affine::constant(1.0), z.get(i, i).clone()]);
            self.maximize(t * weight);
        }
        Ok(())
    }

    /// `m ⪰ 0`; `m` is symmetrized.
    pub fn psd(&mut self, m: AffineMatrix) -> Result<()> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(
                "PSD constraint on non-square matrix".into(),
            ));
        }
        let n = m.nrows();
        let mut sym = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let v = (m.get(i, j).clone() + m.get(j, i).clone())
                    .scaled(0.5)
                    .compact();
                sym.set(i, j, v);
            }
        }
        if n == 1 {
            self.nonneg.push(sym.get(0, 0).clone());
        } else {
            self.psd.push(PsdConstraint { expr: sym });
        }
        Ok(())
    }

    /// `m ⪯ 0`.
    pub fn nsd(&mut self, m: AffineMatrix) -> Result<()> {
        self.psd(m.scaled(-1.0))
    }

    /// `a ≥ 0`.
    pub fn nonneg(&mut self, a: Affine) {
        self.nonneg.push(a.compact());
    }

    /// `a = 0`.
    pub fn equal_zero(&mut self, a: Affine) {
        self.zero.push(a.compact());
    }

    /// Max violation of all constraints at `x`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.psd {
            worst = worst.max(-linalg::min_eigenvalue(&c.expr.eval(x)));
        }
        for a in &self.nonneg {
            worst = worst.max(-a.eval(x));
        }
        for a in &self.zero {
            worst = worst.max(a.eval(x).abs());
        }
        for [t, s, z] in &self.exp {
            let (t, s, z) = (t.eval(x), s.eval(x), z.eval(x));
            worst = worst.max(s * (t / s).exp() - z);
        }
        for c in &self.soc {
            let tail: f64 = c[1..].iter().map(|a| a.eval(x).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(tail - c[0].eval(x));
        }
        worst
    }

    /// Minimum eigenvalue of every PSD block at `x`, in insertion order.
    pub fn psd_min_eigenvalues(&self, x: &[f64]) -> Vec<f64> {
        self.psd
            .iter()
            .map(|c| linalg::min_eigenvalue(&c.expr.eval(x)))
            .collect()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.linear.eval(x) + self.squares.iter().map(|r| r.eval(x).powi(2)).sum::<f64>()
    }

    /// Runs Clarabel; never fails, the status carries the outcome.
    pub fn solve(&self, gap_tol: f64) -> ConicSolution {
        let n = self.nvars;
        let mut rows: Vec<(usize, usize, f64)> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // s = b − A x with s = expr means A = −(linear part), b = constant.
        let push_row =
            |a: &Affine, scale: f64, rows: &mut Vec<(usize, usize, f64)>, b: &mut Vec<f64>| {
                let r = b.len();
                for &(j, c) in a.compact().terms() {
                    rows.push((r, j, -c * scale));
                }
                b.push(a.constant_part() * scale);
            };

        if !self.zero.is_empty() {
            for a in &self.zero {
                push_row(a, 1.0, &mut rows, &mut b);
            }
            cones.push(SupportedConeT::ZeroConeT(self.zero.len()));
        }
        if !self.nonneg.is_empty() {
            for a in &self.nonneg {
                push_row(a, 1.0, &mut rows, &mut b);
            }
            cones.push(SupportedConeT::NonnegativeConeT(self.nonneg.len()));
        }
        for [t, s, z] in &self.exp {
            push_row(t, 1.0, &mut rows, &mut b);
            push_row(s, 1.0, &mut rows, &mut b);
            push_row(z, 1.0, &mut rows, &mut b);
            cones.push(SupportedConeT::ExponentialConeT());
        }
        for c in &self.soc {
            for a in c {
                push_row(a, 1.0, &mut rows, &mut b);
            }
            cones.push(SupportedConeT::SecondOrderConeT(c.len()));
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        for c in &self.psd {
            let k = c.expr.nrows();
            for j in 0..k {
                for i in 0..=j {
                    let scale = if i == j { 1.0 } else { sqrt2 };
                    push_row(c.expr.get(i, j), scale, &mut rows, &mut b);
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(k));
        }

        let m = b.len();
        let a_mat = csc_from_triplets(m, n, rows);

        // ½xᵀPx + qᵀx with P = 2ΣaaT and q = c + 2Σ c_r a.
        let mut q = vec![0.0; n];
        for &(j, c) in self.linear.compact().terms() {
            q[j] += c;
        }
        let mut p_entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for r in &self.squares {
            let terms = r.terms();
            for &(j, cj) in terms {
                q[j] += 2.0 * r.constant_part() * cj;
                for &(i, ci) in terms {
                    if i <= j {
                        *p_entries.entry((i, j)).or_insert(0.0) += 2.0 * ci * cj;
                    }
                }
            }
        }
        let p_mat = csc_from_triplets(
            n,
            n,
            p_entries.into_iter().map(|((i, j), v)| (i, j, v)).collect(),
        );

        let settings = match DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(300)
            .tol_gap_abs(gap_tol)
            .tol_gap_rel(gap_tol)
            .tol_feas(1e-9)
            .build()
        {
            Ok(s) => s,
            Err(e) => return self.failure(format!("settings: {e:?}")),
        };
        let mut solver = match DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return self.failure(format!("setup: {e:?}")),
        };
        solver.solve();
        let sol = &solver.solution;
        let x = sol.x.clone();
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => ConicStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                ConicStatus::Infeasible
            }
            _ => ConicStatus::NumericalFailure,
        };
        let residual = if x.iter().all(|v| v.is_finite()) {
            self.residual(&x)
        } else {
            f64::INFINITY
        };
        ConicSolution {
            status,
            objective: self.objective_value(&x),
            x,
            max_residual: residual,
            iterations: sol.iterations,
            detail: format!("{:?}", sol.status),
        }
    }

    fn failure(&self, detail: String) -> ConicSolution {
        ConicSolution {
            status: ConicStatus::NumericalFailure,
            x: vec![0.0; self.nvars],
            objective: f64::NAN,
            max_residual: f64::INFINITY,
            iterations: 0,
            detail,
        }
    }
}

fn csc_from_triplets(m: usize, n: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    t.sort_by_key(|(i, j, _)| (*j, *i));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(t.len());
    let mut last: Option<(usize, usize)> = None;
    for (i, j, v) in t {
        if last == Some((i, j)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(i);
        nzval.push(v);
        colptr[j + 1] += 1;
        last = Some((i, j));
    }
    for j in 0..n {
        colptr[j + 1] += colptr[j];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Solves `p` and maps non-optimal outcomes and excessive residuals to errors.
pub fn solve_sdp(p: &ConicProblem, feas_tol: f64) -> Result<ConicSolution> {
    let sol = p.solve(DEFAULT_GAP_TOL);
    match sol.status {
        ConicStatus::Infeasible => Err(Error::Infeasible),
        ConicStatus::NumericalFailure => Err(Error::NumericalFailure(sol.detail)),
        ConicStatus::Optimal if sol.max_residual > feas_tol => {
            Err(Error::NumericalFailure(format!(
                "constraint residual {:.3e} exceeds {:.1e} ({})",
                sol.max_residual, feas_tol, sol.detail
            )))
        }
        ConicStatus::Optimal => Ok(sol),
    }
}

/// Entries of `xxᵀ` paired with the upper-triangle coordinates of a symmetric
/// `Q`, so that `xᵀQx = Σ φ_k q_k`.
pub fn quadratic_features(x: &DVector<f64>) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in 0..=j {
            out.push(if i == j {
                x[i] * x[i]
            } else {
                2.0 * x[i] * x[j]
            });
        }
    }
    out
}

/// `xᵀQx` for the symmetric variable `q` created by [`ConicProblem::symmetric`].
pub fn quadratic_form_expr(q: &AffineMatrix, x: &DVector<f64>) -> Affine {
    let mut acc = Affine::default();
    for j in 0..x.len() {
        for i in 0..x.len() {
            acc.add_scaled(q.get(i, j), x[i] * x[j]);
        }
    }
    acc.compact()
}

/// Least-squares quadratic form that upper-bounds every `y_i`:
/// `min Σ(x_iᵀQx_i − y_i)²` s.t. `y_i ≤ x_iᵀQx_i`.
pub fn fit_quadratic_upper_bound(xs: &[DVector<f64>], ys: &[f64]) -> Result<DMatrix<f64>> {
    if xs.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch("points and values".into()));
    }
    let n = xs[0].len();
    if let Some((_, y)) = xs
        .iter()
        .zip(ys)
        .find(|(x, y)| x.iter().all(|v| *v == 0.0) && **y > 0.0)
    {
        return Err(Error::FitInfeasible(format!("x = 0 with y = {y} > 0")));
    }

    // Rescale so the objective is O(1) regardless of data magnitude.
    let scale = ys
        .iter()
        .fold(0.0f64, |m, y| m.max(y.abs()))
        .max(xs.iter().map(|x| x.norm_squared()).fold(0.0f64, f64::max) * 1e-3);
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let mut prob = ConicProblem::new();
    let q = prob.symmetric(n);
    let mut residuals = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        let r = (quadratic_form_expr(&q, x) - *y).scaled(1.0 / scale);
        prob.nonneg(r.clone());
        residuals.push(r);
    }
    prob.minimize_norm(residuals);
    let sol = prob.solve(DEFAULT_GAP_TOL);
    match sol.status {
        ConicStatus::Infeasible => return Err(Error::FitInfeasible("solver certificate".into())),
        ConicStatus::NumericalFailure => return Err(Error::NumericalFailure(sol.detail)),
        ConicStatus::Optimal => {}
    }
    let mut qm = sol.matrix(&q);
    // Lift tiny interior-point slack so the hard check holds exactly.
    let worst = xs
        .iter()
        .zip(ys)
        .filter(|(x, _)| x.norm_squared() > 0.0)
        .map(|(x, y)| (y - linalg::quad_form(&qm, x)) / x.norm_squared())
        .fold(0.0f64, f64::max);
    if worst > 0.0 {
        qm += DMatrix::identity(n, n) * worst;
    }
    Ok(linalg::symmetrize(&qm))
}

/// Origin-centred minimum-volume ellipsoid `{x : xᵀAx ≤ 1}` covering all points.
pub fn min_volume_covering_ellipsoid(points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyDataSet);
    }
    let n = points[0].len();
    let data = DMatrix::from_fn(n, points.len(), |i, j| points[j][i]);
    let rank = linalg::rank(&data, 1e-9);
    if rank < n {
        return Err(Error::DegenerateData { rank, dim: n });
    }
    // Normalise so the problem is well scaled, then undo.
    let r2 = points
        .iter()
        .map(|p| p.norm_squared())
        .fold(0.0f64, f64::max);
    let s = 1.0 / r2.sqrt();

    // Only points on the convex hull boundary can be active; prune those
    // strictly inside the ellipsoid fitted to a subsample to keep the
    // constraint count small.
    let scaled: Vec<DVector<f64>> = points.iter().map(|p| p * s).collect();
    let mut active: Vec<usize> = extreme_candidates(&scaled);
    loop {
        let sub: Vec<&DVector<f64>> = active.iter().map(|i| &scaled[*i]).collect();
        let a = mvee_subset(&sub, n)?;
        let mut violators: Vec<(usize, f64)> = scaled
            .iter()
            .enumerate()
            .map(|(i, p)| (i, linalg::quad_form(&a, p)))
            .filter(|(_, v)| *v > 1.0 + 1e-9)
            .collect();
        if violators.is_empty() {
            return Ok(linalg::symmetrize(&(a * (s * s))));
        }
        violators.sort_by(|x, y| y.1.total_cmp(&x.1));
        active.extend(violators.iter().take(200).map(|(i, _)| *i));
        active.sort_unstable();
        active.dedup();
    }
}

fn extreme_candidates(points: &[DVector<f64>]) -> Vec<usize> {
    let n = points[0].len();
    let mut idx: Vec<usize> = Vec::new();
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let best = points
                .iter()
                .enumerate()
                .max_by(|a, b| (sign * a.1[k]).total_cmp(&(sign * b.1[k])))
                .map(|(i, _)| i)
                .unwrap();
            idx.push(best);
        }
    }
    let mut by_norm: Vec<usize> = (0..points.len()).collect();
    by_norm.sort_by(|a, b| {
        points[*b]
            .norm_squared()
            .total_cmp(&points[*a].norm_squared())
    });
    idx.extend(by_norm.into_iter().take(100));
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn mvee_subset(points: &[&DVector<f64>], n: usize) -> Result<DMatrix<f64>> {
    let mut prob = ConicProblem::new();
    let a = prob.symmetric(n);
    for p in points {
        prob.nonneg(-quadratic_form_expr(&a, p) + 1.0);
    }
    prob.maximize_log_det(&a, 1.0)?;
    let sol = prob.solve(DEFAULT_GAP_TOL);
    match sol.status {
        ConicStatus::Optimal => {}
        ConicStatus::Infeasible => return Err(Error::Infeasible),
        ConicStatus::NumericalFailure => return Err(Error::NumericalFailure(sol.detail)),
    }
    let am = linalg::symmetrize(&sol.matrix(&a));
    // Shrink by the worst violation so every point is covered exactly.
    let worst = points
        .iter()
        .map(|p| linalg::quad_form(&am, p))
        .fold(0.0f64, f64::max);
    if linalg::min_eigenvalue(&am) <= 0.0 {
        return Err(Error::NumericalFailure(
            "covering ellipsoid not definite".into(),
        ));
    }
    Ok(if worst > 1.0 { am / worst } else { am })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn scalar_interval_feasibility() {
        let mut p = ConicProblem::new();
        let q = p.scalar();
        p.nonneg(q.clone() - 1.0);
        p.nsd(
            AffineMatrix::scalar_times(&q, &DMatrix::identity(1, 1))
                .try_sub(&AffineMatrix::from_constant(&DMatrix::from_element(
                    1, 1, 2.0,
                )))
                .unwrap(),
        )
        .unwrap();
        let sol = solve_sdp(&p, DEFAULT_FEAS_TOL).unwrap();
        let qv = sol.value(&q);
        assert!((1.0 - 1e-7..=2.0 + 1e-7).contains(&qv), "{qv}");
    }

    #[test]
    fn log_det_attains_bound() {
        let mut p = ConicProblem::new();
        let e = p.symmetric(1);
        p.psd(
            AffineMatrix::from_constant(&DMatrix::identity(1, 1))
                .try_sub(&e)
                .unwrap(),
        )
        .unwrap();
        p.maximize_log_det(&e, 1.0).unwrap();
        let sol = solve_sdp(&p, DEFAULT_FEAS_TOL).unwrap();
        assert_relative_eq!(sol.matrix(&e)[(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn log_det_matrix_case() {
        // max log det E s.t. E ⪯ diag(2, 3) → E = diag(2, 3).
        let mut p = ConicProblem::new();
        let e = p.symmetric(2);
        let bound = DMatrix::from_diagonal(&v(&[2.0, 3.0]));
        p.psd(AffineMatrix::from_constant(&bound).try_sub(&e).unwrap())
            .unwrap();
        p.maximize_log_det(&e, 1.0).unwrap();
        let sol = solve_sdp(&p, DEFAULT_FEAS_TOL).unwrap();
        let em = sol.matrix(&e);
        assert!((em - bound).abs().max() < 1e-5);
    }

    #[test]
    fn scalar_safe_level_program() {
        // min −γ s.t. 2γ + 2Y ≤ 0, [[4γ, Y],[Y, γ]]... written as Y² ≤ 4γ via
        // [[4, Y],[Y, γ]] ⪰ 0, γ ≤ 4.
        let mut p = ConicProblem::new();
        let g = p.scalar();
        let y = p.scalar();
        p.nonneg(-(g.clone() * 2.0 + y.clone() * 2.0));
        let mut blk = AffineMatrix::zeros(2, 2);
        blk.set(0, 0, Affine::constant(4.0));
        blk.set(0, 1, y.clone());
        blk.set(1, 0, y.clone());
        blk.set(1, 1, g.clone());
        p.psd(blk).unwrap();
        p.nonneg(-g.clone() + 4.0);
        p.maximize(g.clone());
        let sol = solve_sdp(&p, DEFAULT_FEAS_TOL).unwrap();
        assert_relative_eq!(sol.value(&g), 4.0, epsilon = 1e-6);
        assert_relative_eq!(sol.value(&y), -4.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_is_reported() {
        let mut p = ConicProblem::new();
        let q = p.scalar();
        p.nonneg(q.clone() - 2.0);
        p.nonneg(-q + 1.0);
        assert!(matches!(
            solve_sdp(&p, DEFAULT_FEAS_TOL),
            Err(Error::Infeasible)
        ));
    }

    #[test]
    fn fit_exact_interpolation() {
        let q = fit_quadratic_upper_bound(&[v(&[1.0]), v(&[2.0])], &[1.0, 4.0]).unwrap();
        assert_relative_eq!(q[(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn fit_active_constraint() {
        // Unconstrained optimum 33/17 violates 8 ≤ 4q; the constraint binds at q = 2.
        let unconstrained: f64 = (1.0 + 4.0 * 8.0) / (1.0 + 16.0);
        assert!(4.0 * unconstrained < 8.0);
        let q = fit_quadratic_upper_bound(&[v(&[1.0]), v(&[2.0])], &[1.0, 8.0]).unwrap();
        assert_relative_eq!(q[(0, 0)], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn fit_origin_infeasible() {
        assert!(matches!(
            fit_quadratic_upper_bound(&[v(&[0.0])], &[0.5]),
            Err(Error::FitInfeasible(_))
        ));
    }

    #[test]
    fn mvee_square() {
        let pts = vec![
            v(&[1.0, 1.0]),
            v(&[1.0, -1.0]),
            v(&[-1.0, 1.0]),
            v(&[-1.0, -1.0]),
        ];
        let a = min_volume_covering_ellipsoid(&pts).unwrap();
        assert!((a - DMatrix::identity(2, 2) * 0.5).abs().max() < 1e-5);
    }

    #[test]
    fn mvee_diamond() {
        let pts = vec![
            v(&[2.0, 0.0]),
            v(&[-2.0, 0.0]),
            v(&[0.0, 1.0]),
            v(&[0.0, -1.0]),
        ];
        let a = min_volume_covering_ellipsoid(&pts).unwrap();
        let expected = DMatrix::from_diagonal(&v(&[0.25, 1.0]));
        assert!((a - expected).abs().max() < 1e-5);
    }

    #[test]
    fn mvee_degenerate() {
        let pts = vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
        assert!(matches!(
            min_volume_covering_ellipsoid(&pts),
            Err(Error::DegenerateData { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn mvee_many_points_cover() {
        let pts: Vec<_> = (0..2000)
            .map(|k| {
                let t = k as f64 * 0.0137;
                v(&[1.5 * t.cos() * (k % 7) as f64 / 6.0, 0.7 * (1.3 * t).sin()])
            })
            .collect();
        let a = min_volume_covering_ellipsoid(&pts).unwrap();
        for p in &pts {
            assert!(linalg::quad_form(&a, p) <= 1.0 + 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn fit_is_upper_bound(
            pts in prop::collection::vec(((-2.0f64..2.0), (-2.0f64..2.0), (-3.0f64..3.0)), 3..25)
        ) {
            let xs: Vec<_> = pts.iter().map(|(a, b, _)| v(&[*a, *b])).collect();
            let ys: Vec<_> = pts.iter().map(|(_, _, y)| *y).collect();
            prop_assume!(xs.iter().all(|x| x.norm() > 1e-3));
            let q = fit_quadratic_upper_bound(&xs, &ys).unwrap();
            for (x, y) in xs.iter().zip(&ys) {
                prop_assert!(*y <= linalg::quad_form(&q, x) + 1e-8);
            }
        }

        #[test]
        fn mvee_scales_quadratically(
            pts in prop::collection::vec(((-2.0f64..2.0), (-2.0f64..2.0)), 4..20)
        ) {
            let xs: Vec<_> = pts.iter().map(|(a, b)| v(&[*a, *b])).collect();
            let data = DMatrix::from_fn(2, xs.len(), |i, j| xs[j][i]);
            prop_assume!(data.clone().svd(false, false).singular_values.min() > 0.3);
            let a1 = min_volume_covering_ellipsoid(&xs).unwrap();
            let doubled: Vec<_> = xs.iter().map(|x| x * 2.0).collect();
            let a2 = min_volume_covering_ellipsoid(&doubled).unwrap();
            let diff = (a2 - a1.clone() / 4.0).abs().max();
            prop_assert!(diff < 1e-4 * (1.0 + a1.abs().max()), "diff {}", diff);
        }

        #[test]
        fn perturbed_objective_is_stable(eps in 0.0f64..1e-3) {
            // max γ s.t. γ ≤ 4 + eps, Y² ≤ 4γ, γ + Y ≤ 0.
            let solve = |cap: f64| {
                let mut p = ConicProblem::new();
                let g = p.scalar();
                let y = p.scalar();
                p.nonneg(-(g.clone() + y.clone()));
                let mut blk = AffineMatrix::zeros(2, 2);
                blk.set(0, 0, Affine::constant(4.0));
                blk.set(0, 1, y.clone());
                blk.set(1, 0, y);
                blk.set(1, 1, g.clone());
                p.psd(blk).unwrap();
                p.nonneg(-g.clone() + cap);
                p.maximize(g);
                solve_sdp(&p, DEFAULT_FEAS_TOL).unwrap().objective
            };
            let base = solve(4.0);
            let pert = solve(4.0 + eps);
            prop_assert!((base - pert).abs() <= 2.0 * eps + 1e-6);
        }
    }
}
