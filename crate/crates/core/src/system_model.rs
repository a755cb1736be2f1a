//! System description `ẋ = Ax + Bu + d(x)`, constraint polytopes, datasets
//! and the data-density (covering radius) machinery.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// The known linear part `(A, B)` of the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearModel {
    /// Builds a model, rejecting inconsistent shapes and uncontrollable pairs.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, expected {}",
                b.nrows(),
                a.nrows()
            )));
        }
        let model = Self { a, b };
        let rank = linalg::rank(&model.controllability_matrix(), 1e-10);
        if rank < model.n() {
            return Err(Error::InvalidModel(format!(
                "(A, B) is not controllable (rank {} < {})",
                rank,
                model.n()
            )));
        }
        Ok(model)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `[B, AB, ..., A^{n-1}B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        out
    }
}

/// `{p : A_c p ≤ b_c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "polytope has {} rows but {} bounds",
                a.nrows(),
                b.len()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::InvalidModel("polytope has no rows".into()));
        }
        if let Some(i) = b.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidModel(format!(
                "polytope does not contain the origin (row {i})"
            )));
        }
        Ok(Self { a, b })
    }

    /// Symmetric box `|p_i| ≤ bound_i`.
    pub fn symmetric_box(bounds: &[f64]) -> Result<Self> {
        let k = bounds.len();
        let mut a = DMatrix::zeros(2 * k, k);
        let mut b = DVector::zeros(2 * k);
        for (i, &v) in bounds.iter().enumerate() {
            a[(2 * i, i)] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i] = v;
            b[2 * i + 1] = v;
        }
        Self::new(a, b)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn contains(&self, p: &DVector<f64>) -> Result<bool> {
        polytope_contains(self, p)
    }
}

/// Closed-set membership `A_c p ≤ b_c`, compared exactly.
pub fn polytope_contains(poly: &Polytope, p: &DVector<f64>) -> Result<bool> {
    if p.len() != poly.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has dimension {}, polytope {}",
            p.len(),
            poly.dim()
        )));
    }
    let lhs = &poly.a * p;
    Ok(lhs.iter().zip(poly.b.iter()).all(|(l, b)| l <= b))
}

/// Noise-free samples `(x_i, d(x_i))`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSet {
    xs: Vec<DVector<f64>>,
    ds: Vec<DVector<f64>>,
}

impl DataSet {
    pub fn new(xs: Vec<DVector<f64>>, ds: Vec<DVector<f64>>) -> Result<Self> {
        if xs.len() != ds.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states but {} nonlinearity values",
                xs.len(),
                ds.len()
            )));
        }
        if let Some(first) = xs.first() {
            let n = first.len();
            if xs.iter().chain(ds.iter()).any(|v| v.len() != n) {
                return Err(Error::DimensionMismatch(
                    "inconsistent sample dimensions".into(),
                ));
            }
        }
        Ok(Self { xs, ds })
    }

    /// Samples an oracle at the given states.
    pub fn from_oracle(xs: Vec<DVector<f64>>, oracle: &NonlinearityOracle) -> Result<Self> {
        let ds = xs.iter().map(|x| oracle.eval(x)).collect();
        Self::new(xs, ds)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.xs.first().map(|x| x.len())
    }

    pub fn xs(&self) -> &[DVector<f64>] {
        &self.xs
    }

    pub fn ds(&self) -> &[DVector<f64>] {
        &self.ds
    }

    pub fn push(&mut self, x: DVector<f64>, d: DVector<f64>) -> Result<()> {
        if let Some(n) = self.dim() {
            if x.len() != n || d.len() != n {
                return Err(Error::DimensionMismatch("sample dimension".into()));
            }
        }
        self.xs.push(x);
        self.ds.push(d);
        Ok(())
    }

    pub fn extend(&mut self, other: &DataSet) -> Result<()> {
        for (x, d) in other.xs.iter().zip(&other.ds) {
            self.push(x.clone(), d.clone())?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.xs.iter().zip(self.ds.iter())
    }

    /// Writes the dataset in the `x1..xn,d1..dn` CSV layout.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.dim().unwrap_or(0);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        let header: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=n).map(|i| format!("d{i}")))
            .collect();
        w.write_record(&header)?;
        for (x, d) in self.iter() {
            let row: Vec<String> = x.iter().chain(d.iter()).map(|v| format!("{v:?}")).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a dataset CSV with header `x1,...,xn,d1,...,dn`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DataSet> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<DataSet> {
    if text.trim().is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let n = header_dimension(&header)?;

    let mut xs = Vec::new();
    let mut ds = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() != 2 * n {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", 2 * n, record.len()),
            });
        }
        let values = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::MalformedRow {
                    line,
                    reason: format!("'{f}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        xs.push(DVector::from_column_slice(&values[..n]));
        ds.push(DVector::from_column_slice(&values[n..]));
    }
    if xs.is_empty() {
        return Err(Error::EmptyFile);
    }
    DataSet::new(xs, ds)
}

fn header_dimension(header: &csv::StringRecord) -> Result<usize> {
    if let Some(noise) = header
        .iter()
        .find(|h| h.to_ascii_lowercase().starts_with("noise"))
    {
        return Err(Error::NoiseColumns(noise.to_string()));
    }
    let cols = header.len();
    if cols == 0 || cols % 2 != 0 {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("header has {cols} columns, expected x1..xn,d1..dn"),
        });
    }
    let n = cols / 2;
    for (i, name) in header.iter().enumerate() {
        let expected = if i < n {
            format!("x{}", i + 1)
        } else {
            format!("d{}", i - n + 1)
        };
        if name != expected {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("column {} is '{name}', expected '{expected}'", i + 1),
            });
        }
    }
    Ok(n)
}

/// Ellipsoidal region `{x : xᵀA_δx ≤ 1}` in which the data is `δ`-dense.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRegion {
    a_delta: DMatrix<f64>,
    delta: f64,
}

impl DataRegion {
    pub fn new(a_delta: DMatrix<f64>, delta: f64) -> Result<Self> {
        if a_delta.nrows() != a_delta.ncols() {
            return Err(Error::DimensionMismatch("A_delta must be square".into()));
        }
        if linalg::min_eigenvalue(&a_delta) <= 0.0 {
            return Err(Error::DegenerateRegion(
                "A_delta is not positive definite".into(),
            ));
        }
        if !(delta >= 0.0) {
            return Err(Error::DegenerateRegion(format!(
                "delta must be non-negative, got {delta}"
            )));
        }
        Ok(Self {
            a_delta: linalg::symmetrize(&a_delta),
            delta,
        })
    }

    /// Measures the covering radius of `data` over a grid of the region and
    /// adds the grid's half-diagonal so the returned `δ` also covers the
    /// points between grid nodes.
    pub fn certify(data: &DataSet, a_delta: DMatrix<f64>, resolution: f64) -> Result<Self> {
        let probe = Self::new(a_delta, 0.0)?;
        let samples = probe.grid_samples(resolution)?;
        let sampled = covering_radius(data, &samples)?;
        let slack = resolution * (probe.dim() as f64).sqrt() / 2.0;
        Self::new(probe.a_delta, sampled + slack)
    }

    pub fn a_delta(&self) -> &DMatrix<f64> {
        &self.a_delta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.a_delta.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        linalg::quad_form(&self.a_delta, x) <= 1.0
    }

    /// Grid points with spacing `resolution` that fall inside the region.
    pub fn grid_samples(&self, resolution: f64) -> Result<Vec<DVector<f64>>> {
        if !(resolution > 0.0) {
            return Err(Error::BadWidths(format!("grid resolution {resolution}")));
        }
        let inv = linalg::spd_inverse(&self.a_delta)?;
        let half: Vec<f64> = (0..self.dim()).map(|i| inv[(i, i)].sqrt()).collect();
        let counts: Vec<usize> = half
            .iter()
            .map(|h| (2.0 * h / resolution).ceil() as usize + 1)
            .collect();
        let total: f64 = counts.iter().map(|c| *c as f64).product();
        if total > 2.0e7 {
            return Err(Error::DegenerateRegion(format!(
                "grid with {total:.0} nodes is too large; use a coarser resolution"
            )));
        }
        let mut out = Vec::new();
        let mut idx = vec![0usize; self.dim()];
        loop {
            let x = DVector::from_fn(self.dim(), |i, _| -half[i] + idx[i] as f64 * resolution);
            if self.contains(&x) {
                out.push(x);
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return Ok(out);
                }
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// Samples-based check of the density assumption at this region's `δ`.
    pub fn check(&self, data: &DataSet, resolution: f64) -> Result<f64> {
        let samples = self.grid_samples(resolution)?;
        let radius = covering_radius(data, &samples)?;
        if radius > self.delta {
            return Err(Error::AssumptionViolated(format!(
                "covering radius {radius:.6} exceeds delta {:.6}",
                self.delta
            )));
        }
        Ok(radius)
    }
}

/// Max over `samples` of the distance to the nearest data point.
pub fn covering_radius(data: &DataSet, samples: &[DVector<f64>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataSet);
    }
    let mut worst: f64 = 0.0;
    for s in samples {
        let mut best = f64::INFINITY;
        for x in data.xs() {
            let d2 = (x - s).norm_squared();
            if d2 < best {
                best = d2;
                if best <= worst * worst {
                    break;
                }
            }
        }
        worst = worst.max(best.sqrt());
    }
    Ok(worst)
}

/// Index of the closest data point; ties go to the lowest index.
pub fn nearest_index(data: &DataSet, x: &DVector<f64>) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataSet);
    }
    if data.dim() != Some(x.len()) {
        return Err(Error::DimensionMismatch("query dimension".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, xi) in data.xs().iter().enumerate() {
        let d2 = (xi - x).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    Ok(best.0)
}

pub fn nearest_datum<'a>(
    data: &'a DataSet,
    x: &DVector<f64>,
) -> Result<(&'a DVector<f64>, &'a DVector<f64>)> {
    let i = nearest_index(data, x)?;
    Ok((&data.xs()[i], &data.ds()[i]))
}

type OracleFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Ground-truth nonlinearity, only read by simulation and auditing code.
#[derive(Clone)]
pub struct NonlinearityOracle {
    dim: usize,
    f: Arc<OracleFn>,
    lipschitz: Option<f64>,
}

impl NonlinearityOracle {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            f: Arc::new(f),
            lipschitz: None,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, move |_| DVector::zeros(dim))
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

impl fmt::Debug for NonlinearityOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearityOracle")
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

/// `Ax + Bu + d(x)`.
pub fn eval_dynamics(
    model: &LinearModel,
    oracle: &NonlinearityOracle,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != model.n() || u.len() != model.m() || oracle.dim() != model.n() {
        return Err(Error::DimensionMismatch(format!(
            "x: {}, u: {}, model n={} m={}",
            x.len(),
            u.len(),
            model.n(),
            model.m()
        )));
    }
    Ok(model.a() * x + model.b() * u + oracle.eval(x))
}
