//! Exact noise-free GP regression, one independent posterior per output
//! dimension, squared-exponential kernel.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system_model::DataSet;

pub const DEFAULT_JITTER: f64 = 1e-10;

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

/// Per-output-dimension hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub mean: Vec<f64>,
    pub sigma_f: Vec<f64>,
    pub lengthscale: Vec<f64>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Input coordinates each output's kernel reads; all of them when absent.
    #[serde(default)]
    pub active_inputs: Option<Vec<Vec<usize>>>,
}

impl GpPrior {
    pub fn uniform(n: usize, mean: f64, sigma_f: f64, lengthscale: f64) -> Self {
        Self {
            mean: vec![mean; n],
            sigma_f: vec![sigma_f; n],
            lengthscale: vec![lengthscale; n],
            jitter: DEFAULT_JITTER,
            active_inputs: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.sigma_f.len() != n || self.lengthscale.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "GP prior has {}/{}/{} entries, state dimension is {n}",
                self.mean.len(),
                self.sigma_f.len(),
                self.lengthscale.len()
            )));
        }
        if self.sigma_f.iter().any(|s| !(*s >= 0.0)) || self.lengthscale.iter().any(|l| !(*l > 0.0))
        {
            return Err(Error::ConfigInvalid(
                "sigma_f must be non-negative and lengthscale positive".into(),
            ));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::ConfigInvalid("jitter must be non-negative".into()));
        }
        if let Some(active) = &self.active_inputs {
            if active.len() != n || active.iter().flatten().any(|i| *i >= n) {
                return Err(Error::ConfigInvalid("active_inputs out of range".into()));
            }
            if active.iter().any(|a| a.is_empty()) {
                return Err(Error::ConfigInvalid("active_inputs entry is empty".into()));
            }
        }
        Ok(())
    }

    fn inputs_of(&self, dim: usize, n: usize) -> Vec<usize> {
        match &self.active_inputs {
            Some(a) => {
                let mut v = a[dim].clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (0..n).collect(),
        }
    }
}

/// `σ_f² exp(−‖x − x'‖² / (2l²))`.
pub fn se_kernel(x: &DVector<f64>, xp: &DVector<f64>, sigma_f: f64, lengthscale: f64) -> f64 {
    sigma_f * sigma_f * (-(x - xp).norm_squared() / (2.0 * lengthscale * lengthscale)).exp()
}

/// Output dimensions sharing a kernel and input projection share one factorization.
#[derive(Debug, Clone)]
struct KernelGroup {
    sigma_f: f64,
    lengthscale: f64,
    inputs: Vec<usize>,
    dims: Vec<usize>,
    /// Projected training inputs, one column per datum.
    points: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    /// `K⁻¹(y − c)` per member dimension, in `dims` order.
    alphas: Vec<DVector<f64>>,
    factor_residual: f64,
}

impl KernelGroup {
    fn kernel_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let s2 = self.sigma_f * self.sigma_f;
        let inv = 1.0 / (2.0 * self.lengthscale * self.lengthscale);
        let npts = self.points.ncols();
        DVector::from_fn(npts, |j, _| {
            let mut d2 = 0.0;
            for (r, &i) in self.inputs.iter().enumerate() {
                let diff = x[i] - self.points[(r, j)];
                d2 += diff * diff;
            }
            s2 * (-d2 * inv).exp()
        })
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    prior: GpPrior,
    n: usize,
    num_data: usize,
    groups: Vec<KernelGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl Posterior {
    pub fn std(&self) -> DVector<f64> {
        self.variance.map(|v| v.sqrt())
    }
}

pub fn fit_gp(data: &DataSet, prior: &GpPrior) -> Result<GpModel> {
    let n = data.dim().ok_or(Error::EmptyDataSet)?;
    prior.validate(n)?;

    let mut groups: Vec<KernelGroup> = Vec::new();
    for dim in 0..n {
        // A zero signal variance pins the output to its prior mean.
        if prior.sigma_f[dim] == 0.0 {
            continue;
        }
        let inputs = prior.inputs_of(dim, n);
        let key = (prior.sigma_f[dim], prior.lengthscale[dim], inputs.clone());
        match groups
            .iter_mut()
            .find(|g| (g.sigma_f, g.lengthscale, g.inputs.clone()) == key)
        {
            Some(g) => g.dims.push(dim),
            None => groups.push(KernelGroup {
                sigma_f: key.0,
                lengthscale: key.1,
                inputs,
                dims: vec![dim],
                points: DMatrix::zeros(0, 0),
                chol_l: DMatrix::zeros(0, 0),
                alphas: Vec::new(),
                factor_residual: 0.0,
            }),
        }
    }
    for g in &mut groups {
        factorize_group(g, data, prior)?;
    }
    Ok(GpModel {
        prior: prior.clone(),
        n,
        num_data: data.len(),
        groups,
    })
}

fn factorize_group(g: &mut KernelGroup, data: &DataSet, prior: &GpPrior) -> Result<()> {
    // Merge inputs that coincide after projection; they must agree on targets.
    let mut points: Vec<DVector<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (x, d) in data.iter() {
        let proj = DVector::from_iterator(g.inputs.len(), g.inputs.iter().map(|i| x[*i] + 0.0));
        let y: Vec<f64> = g.dims.iter().map(|k| d[*k]).collect();
        let key: Vec<u64> = proj.iter().map(|v| v.to_bits()).collect();
        if let Some(&pos) = seen.get(&key) {
            let agree = targets[pos]
                .iter()
                .zip(&y)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            if !agree {
                return Err(Error::SingularCovariance(format!(
                    "duplicate input {:?} with conflicting targets",
                    proj.as_slice()
                )));
            }
            continue;
        }
        seen.insert(key, points.len());
        points.push(proj);
        targets.push(y);
    }
    let npts = points.len();
    let mut pts = DMatrix::zeros(g.inputs.len(), npts);
    for (j, p) in points.iter().enumerate() {
        pts.set_column(j, p);
    }
    g.points = pts;

    let mut k = DMatrix::zeros(npts, npts);
    for j in 0..npts {
        for i in j..npts {
            let v = se_kernel(&points[i], &points[j], g.sigma_f, g.lengthscale);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(j, j)] += prior.jitter;
    }
    let chol = Cholesky::<f64, Dyn>::new(k.clone())
        .ok_or_else(|| Error::SingularCovariance(format!("Cholesky failed for {npts} points")))?;
    let l = chol.l();
    g.factor_residual = sampled_factor_residual(&l, &k);
    g.alphas = g
        .dims
        .iter()
        .enumerate()
        .map(|(slot, dim)| {
            let y =
                DVector::from_iterator(npts, targets.iter().map(|t| t[slot] - prior.mean[*dim]));
            chol.solve(&y)
        })
        .collect();
    g.chol_l = l;
    Ok(())
}

/// `|LLᵀ − K|` on the diagonal, the first sub-diagonal and a strided set of
/// entries, avoiding the cubic cost of forming `LLᵀ`.
fn sampled_factor_residual(l: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let entry = |i: usize, j: usize| -> f64 {
        let m = i.min(j) + 1;
        let dot: f64 = (0..m).map(|c| l[(i, c)] * l[(j, c)]).sum();
        (dot - k[(i, j)]).abs()
    };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        worst = worst.max(entry(i, i));
        if i > 0 {
            worst = worst.max(entry(i, i - 1));
        }
    }
    let stride = (n * n / 4096).max(1);
    let mut idx = 0;
    while idx < n * n {
        worst = worst.max(entry(idx / n, idx % n));
        idx += stride + 1;
    }
    worst
}

impl GpModel {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn prior(&self) -> &GpPrior {
        &self.prior
    }

    pub fn num_data(&self) -> usize {
        self.num_data
    }

    /// Largest `|LLᵀ − K|` entry over all factorizations.
    pub fn factorization_residual(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.factor_residual)
            .fold(0.0, f64::max)
    }

    pub fn posterior(&self, x: &DVector<f64>) -> Result<Posterior> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "query has dimension {}, model {}",
                x.len(),
                self.n
            )));
        }
        let mut mean = DVector::from_column_slice(&self.prior.mean);
        let mut variance = DVector::zeros(self.n);
        for g in &self.groups {
            let kx = g.kernel_vector(x);
            let v = g
                .chol_l
                .solve_lower_triangular(&kx)
                .ok_or_else(|| Error::SingularCovariance("triangular solve".into()))?;
            let var = (g.sigma_f * g.sigma_f - v.norm_squared()).max(0.0);
            for (slot, &dim) in g.dims.iter().enumerate() {
                mean[dim] = self.prior.mean[dim] + kx.dot(&g.alphas[slot]);
                variance[dim] = var;
            }
        }
        Ok(Posterior { mean, variance })
    }
}
