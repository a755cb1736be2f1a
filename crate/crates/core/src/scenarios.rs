//! Scenario configuration, the built-in systems and the end-to-end pipeline
//! behind the command-line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convex;
use crate::error::{Error, Result};
use crate::gp::{fit_gp, GpModel, GpPrior};
use crate::gp_bound::{bound_nonlinearity_gp, bound_nonlinearity_gp_grid, GpBoundConfig};
use crate::linalg;
use crate::lipschitz::{
    self, bound_nonlinearity_lipschitz, estimate_lipschitz, ring_indices, BoundKind, Interval,
    QuadraticBound, Ring,
};
use crate::runtime::{
    self, explore, simulate, ExplorationOutcome, ExplorationSchedule, ExplorationSetup,
    FilterConfig, FixedGain, Learner, PolicyGradient, RandomExplorer, Trajectory,
};
use crate::safe_set::{self, NonlinearitySource, SafeCertificate};
use crate::shape::{synthesize_shape_with_decay, ShapeResult};
use crate::system_model::{
    load_dataset, DataRegion, DataSet, LinearModel, NonlinearityOracle, Polytope,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub a_x: Vec<Vec<f64>>,
    pub b_x: Vec<f64>,
    pub a_u: Vec<Vec<f64>>,
    pub b_u: Vec<f64>,
}

/// `coeff · Π x_j^{powers_j}` added to output `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub output: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum OracleConfig {
    Motivating1d,
    Illustrative2d,
    Convoy5,
    Exploration2d,
    CustomPolynomial { dim: usize, terms: Vec<PolyTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    File {
        path: PathBuf,
    },
    /// Origin-anchored lattice `k·spacing` inside the box, optionally kept
    /// only where `xᵀMx ≤ 1`.
    Grid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        spacing: f64,
        #[serde(default)]
        inside: Option<Vec<Vec<f64>>>,
    },
    /// Planar lattices over coordinate pairs, every other coordinate zero.
    PairGrids {
        dim: usize,
        pairs: Vec<[usize; 2]>,
        lower: f64,
        upper: f64,
        spacing: f64,
    },
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    Lipschitz,
    Gp,
    GpGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    /// Sampling resolution for the covering check; a quarter of the data
    /// spacing when absent.
    pub resolution: Option<f64>,
    /// Overrides the certified covering radius as the bound's `δ`.
    pub delta: Option<f64>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            resolution: None,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub constrain_to_region: bool,
    /// Fixed shape matrix instead of solving for one.
    pub p: Option<Vec<Vec<f64>>>,
    /// Half-spaces `a x ≤ b` imposed on the ellipsoid during shape synthesis
    /// only; the safety constraints stay those of `constraints`.
    pub extra_a: Option<Vec<Vec<f64>>>,
    pub extra_b: Option<Vec<f64>>,
    /// Decay rate `α` in `AE + EAᵀ + BY₀ + Y₀ᵀBᵀ ⪯ −2αE`.
    pub decay: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            constrain_to_region: true,
            p: None,
            extra_a: None,
            extra_b: None,
            decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSchedule {
    pub width: f64,
    pub first: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntervalConfig {
    /// Top of the schedule; the data-region level in Lipschitz mode and 1
    /// otherwise when absent.
    pub gamma_bar: Option<f64>,
    pub widths: Option<Vec<f64>>,
    pub uniform: Option<UniformSchedule>,
    pub max_halvings: usize,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        Self {
            gamma_bar: None,
            widths: Some(vec![0.1]),
            uniform: None,
            max_halvings: safe_set::DEFAULT_MAX_HALVINGS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyConfig {
    Zero,
    Constant { u: Vec<f64> },
    Gain { k: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub step: f64,
    pub initial_states: Vec<Vec<f64>>,
    /// Rescale each initial state radially to this fraction of `γ*`.
    pub scale_to_level: Option<f64>,
    pub policy: PolicyConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            step: 1e-3,
            initial_states: Vec::new(),
            scale_to_level: None,
            policy: PolicyConfig::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearnerConfig {
    FixedGain {
        k: Vec<Vec<f64>>,
    },
    Random {
        k: Vec<Vec<f64>>,
        amplitude: f64,
        hold: f64,
    },
    PolicyGradient {
        k: Vec<Vec<f64>>,
        step: f64,
        perturbation: f64,
        window: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub recompute_period: f64,
    pub collect_stride: usize,
    pub horizon: f64,
    pub step: f64,
    pub x0: Vec<f64>,
    pub learner: LearnerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub bound_w: f64,
    pub x: [f64; 2],
    pub u: [f64; 2],
}

fn default_verify_samples() -> usize {
    safe_set::DEFAULT_VERIFY_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub model: ModelConfig,
    pub constraints: ConstraintConfig,
    pub oracle: OracleConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub shape: ShapeConfig,
    pub bound_mode: BoundMode,
    #[serde(default)]
    pub intervals: IntervalConfig,
    /// Known Lipschitz constant of `xᵀPd(x)`; estimated from data when absent.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub chunk_size: Option<usize>,
    #[serde(default)]
    pub gp_prior: Option<GpPrior>,
    #[serde(default)]
    pub gp_bound: GpBoundConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub exploration: Option<ExplorationConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    #[serde(default = "default_verify_samples")]
    pub verify_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    linalg::from_rows(rows).map_err(|e| Error::ConfigInvalid(format!("{what}: {e}")))
}

fn sat(s: f64, limit: f64) -> f64 {
    s.clamp(-limit, limit)
}

/// Closed form of a built-in nonlinearity.
pub fn oracle_for(cfg: &OracleConfig) -> NonlinearityOracle {
    match cfg {
        OracleConfig::Motivating1d => {
            NonlinearityOracle::new(1, |x| DVector::from_element(1, -x[0].powi(3)))
        }
        OracleConfig::Illustrative2d => NonlinearityOracle::new(2, |x| {
            DVector::from_vec(vec![0.5 * x[0].powi(4), 0.35 - 1.5 * x[1].powi(3)])
        }),
        OracleConfig::Exploration2d => NonlinearityOracle::new(2, |x| {
            DVector::from_vec(vec![
                0.5 * x[0] * x[0] * (6.0 * x[0]).sin(),
                -0.8 * x[1].powi(3),
            ])
        }),
        OracleConfig::Convoy5 => NonlinearityOracle::new(9, |x| {
            let mut d = DVector::zeros(9);
            let s2 = x[0] - x[5];
            let s5 = x[3] - x[8];
            d[5] = sat(s2, 0.9) - s2;
            d[8] = sat(s5, 0.9) - s5;
            d
        }),
        OracleConfig::CustomPolynomial { dim, terms } => {
            let (dim, terms) = (*dim, terms.clone());
            NonlinearityOracle::new(dim, move |x| {
                let mut d = DVector::zeros(dim);
                for t in &terms {
                    let mono: f64 = t
                        .powers
                        .iter()
                        .enumerate()
                        .map(|(j, p)| x[j].powi(*p as i32))
                        .product();
                    d[t.output] += t.coeff * mono;
                }
                d
            })
        }
    }
}

/// A built-in system: the linear part, the true nonlinearity, the constraint
/// polytopes and constants quoted for it.
#[derive(Debug, Clone)]
pub struct Builtin {
    pub model: LinearModel,
    pub oracle: NonlinearityOracle,
    pub x_poly: Polytope,
    pub u_poly: Polytope,
    pub reference: Vec<(&'static str, f64)>,
}

fn convoy_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(9, 9);
    for i in 0..4 {
        // ż_{i+2→i+1} = v_{i+1} − v_{i+2} in zero-based velocity slots.
        a[(i, 4 + i)] = 1.0;
        a[(i, 5 + i)] = -1.0;
    }
    // Linear part of the uncontrolled cars' saturated laws.
    a[(5, 0)] = 1.0;
    a[(5, 5)] = -1.0;
    a[(8, 3)] = 1.0;
    a[(8, 8)] = -1.0;
    let mut b = DMatrix::zeros(9, 3);
    b[(4, 0)] = 1.0;
    b[(6, 1)] = 1.0;
    b[(7, 2)] = 1.0;
    (a, b)
}

/// Local laws of cars 1, 3 and 4 as a gain on the convoy state.
pub fn convoy_local_gain() -> DMatrix<f64> {
    let mut k = DMatrix::zeros(3, 9);
    k[(0, 4)] = -1.0;
    k[(1, 1)] = 0.1;
    k[(1, 6)] = -0.3;
    k[(2, 2)] = 0.1;
    k[(2, 7)] = -0.3;
    k
}

pub fn builtin_oracle(name: &str) -> Result<Builtin> {
    let planar = || {
        LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -3.0, 4.0]),
            DMatrix::from_column_slice(2, 1, &[0.5, -2.0]),
        )
    };
    let (model, oracle_cfg, x_poly, u_poly, reference) = match name {
        "motivating1d" => (
            LinearModel::new(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            )?,
            OracleConfig::Motivating1d,
            Polytope::symmetric_box(&[2.0])?,
            Polytope::symmetric_box(&[2.0])?,
            vec![("bound_w", 8.0)],
        ),
        "illustrative2d" => (
            planar()?,
            OracleConfig::Illustrative2d,
            Polytope::symmetric_box(&[2.0, 2.0])?,
            Polytope::symmetric_box(&[3.0])?,
            vec![
                ("p11", 0.7651),
                ("p12", 0.2162),
                ("p22", 0.6481),
                ("delta", 0.15),
                ("lipschitz", 6.02),
                ("k1", 0.5261),
                ("k2", 2.2953),
                ("gamma", 1.0),
            ],
        ),
        "exploration2d" => (
            planar()?,
            OracleConfig::Exploration2d,
            Polytope::symmetric_box(&[4.0, 4.0])?,
            Polytope::symmetric_box(&[4.0])?,
            vec![
                ("sigma_f", 0.05),
                ("lengthscale", 0.2),
                ("delta", 0.05),
                ("c", 3.0),
                ("recompute_period", 0.2),
            ],
        ),
        "convoy5" => {
            let (a, b) = convoy_matrices();
            let mut ax = DMatrix::zeros(4, 9);
            for i in 0..4 {
                ax[(i, i)] = 1.0;
            }
            (
                LinearModel::new(a, b)?,
                OracleConfig::Convoy5,
                Polytope::new(ax, DVector::from_element(4, 1.0))?,
                Polytope::symmetric_box(&[3.0, 3.0, 3.0])?,
                vec![
                    ("x_tar", 1.0),
                    ("delta", 0.013),
                    ("z21_0", 0.76),
                    ("v2_0", 0.02),
                ],
            )
        }
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(Builtin {
        model,
        oracle: oracle_for(&oracle_cfg),
        x_poly,
        u_poly,
        reference,
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    linalg::to_rows(m)
}

/// The shipped configuration of a built-in scenario.
pub fn builtin_config(name: &str) -> Result<ScenarioConfig> {
    let b = builtin_oracle(name)?;
    let model = ModelConfig {
        a: rows(b.model.a()),
        b: rows(b.model.b()),
    };
    let constraints = ConstraintConfig {
        a_x: rows(b.x_poly.a()),
        b_x: b.x_poly.b().iter().copied().collect(),
        a_u: rows(b.u_poly.a()),
        b_u: b.u_poly.b().iter().copied().collect(),
    };
    let base = ScenarioConfig {
        name: name.to_string(),
        model,
        constraints,
        oracle: OracleConfig::Motivating1d,
        dataset: DatasetConfig::Empty,
        region: RegionConfig::default(),
        shape: ShapeConfig::default(),
        bound_mode: BoundMode::Lipschitz,
        intervals: IntervalConfig::default(),
        lipschitz: None,
        chunk_size: None,
        gp_prior: None,
        gp_bound: GpBoundConfig::default(),
        filter: FilterConfig::default(),
        simulation: SimulationConfig::default(),
        exploration: None,
        baseline: None,
        verify_samples: safe_set::DEFAULT_VERIFY_SAMPLES,
        seed: 0,
    };
    let cfg = match name {
        "motivating1d" => ScenarioConfig {
            oracle: OracleConfig::Motivating1d,
            dataset: DatasetConfig::Grid {
                lower: vec![-2.0],
                upper: vec![2.0],
                spacing: 0.02,
                inside: None,
            },
            simulation: SimulationConfig {
                horizon: 5.0,
                initial_states: vec![vec![2.0], vec![-2.0]],
                scale_to_level: Some(1.0),
                ..SimulationConfig::default()
            },
            baseline: Some(BaselineConfig {
                bound_w: 8.0,
                x: [-2.0, 2.0],
                u: [-2.0, 2.0],
            }),
            ..base
        },
        "illustrative2d" => ScenarioConfig {
            oracle: OracleConfig::Illustrative2d,
            dataset: DatasetConfig::Grid {
                lower: vec![-2.0, -2.0],
                upper: vec![2.0, 2.0],
                spacing: 0.05,
                inside: Some(vec![vec![0.7651, 0.2162], vec![0.2162, 0.6481]]),
            },
            intervals: IntervalConfig {
                gamma_bar: Some(1.0),
                ..IntervalConfig::default()
            },
            lipschitz: Some(6.02),
            gp_prior: Some(GpPrior::uniform(2, 0.0, 1.0, 0.3)),
            simulation: SimulationConfig {
                horizon: 10.0,
                initial_states: (0..8)
                    .map(|k| {
                        let t = k as f64 * std::f64::consts::FRAC_PI_4;
                        vec![t.cos(), t.sin()]
                    })
                    .collect(),
                scale_to_level: Some(1.0),
                ..SimulationConfig::default()
            },
            ..base
        },
        "exploration2d" => ScenarioConfig {
            oracle: OracleConfig::Exploration2d,
            dataset: DatasetConfig::Grid {
                lower: vec![-0.2, -0.2],
                upper: vec![0.2, 0.2],
                spacing: 0.05,
                inside: None,
            },
            shape: ShapeConfig {
                constrain_to_region: false,
                decay: 1.0,
                ..ShapeConfig::default()
            },
            bound_mode: BoundMode::Gp,
            intervals: IntervalConfig {
                gamma_bar: Some(0.9),
                // [0.8, 0.9] down to [0.1, 0.2], then halving towards the data.
                widths: Some(
                    std::iter::repeat_n(0.1, 8)
                        .chain((0..6).map(|i| 0.05 / f64::from(1u32 << i)))
                        .collect(),
                ),
                uniform: None,
                max_halvings: 0,
            },
            gp_prior: Some(GpPrior::uniform(2, 0.0, 0.05, 0.2)),
            exploration: Some(ExplorationConfig {
                recompute_period: 0.2,
                collect_stride: 20,
                horizon: 5.0,
                step: 1e-3,
                x0: vec![0.7, -0.7],
                learner: LearnerConfig::PolicyGradient {
                    k: vec![vec![0.0, 0.0]],
                    step: 3.0,
                    perturbation: 0.2,
                    window: 0.1,
                },
            }),
            ..base
        },
        "convoy5" => {
            let mut prior = GpPrior::uniform(9, 0.0, 0.0, 0.4);
            prior.sigma_f[5] = 0.5;
            prior.sigma_f[8] = 0.5;
            let mut active: Vec<Vec<usize>> = (0..9).map(|i| vec![i]).collect();
            active[5] = vec![0, 5];
            active[8] = vec![3, 8];
            prior.active_inputs = Some(active);
            // Keep the velocities inside the range the data was taken on.
            let vbox = Polytope::symmetric_box(&[0.8; 5])?;
            let mut va = DMatrix::zeros(10, 9);
            va.view_mut((0, 4), (10, 5)).copy_from(vbox.a());
            let velocity_rows = Polytope::new(va, vbox.b().clone())?;
            let mut x0 = vec![0.0; 9];
            x0[0] = 0.76;
            x0[5] = 0.02;
            ScenarioConfig {
                oracle: OracleConfig::Convoy5,
                dataset: DatasetConfig::PairGrids {
                    dim: 9,
                    pairs: vec![[0, 5], [3, 8]],
                    lower: -0.8,
                    upper: 0.8,
                    spacing: 0.1,
                },
                shape: ShapeConfig {
                    constrain_to_region: false,
                    extra_a: Some(rows(velocity_rows.a())),
                    extra_b: Some(velocity_rows.b().iter().copied().collect()),
                    decay: 0.2,
                    ..ShapeConfig::default()
                },
                bound_mode: BoundMode::Gp,
                intervals: IntervalConfig {
                    gamma_bar: Some(1.0),
                    widths: None,
                    uniform: Some(UniformSchedule {
                        width: 0.1,
                        first: 0,
                        count: 9,
                    }),
                    max_halvings: 2,
                },
                gp_prior: Some(prior),
                simulation: SimulationConfig {
                    horizon: 20.0,
                    step: 1e-3,
                    initial_states: vec![x0],
                    scale_to_level: Some(1.0),
                    policy: PolicyConfig::Gain {
                        k: rows(&convoy_local_gain()),
                    },
                },
                ..base
            }
        }
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(cfg)
}

pub const BUILTIN_SCENARIOS: [&str; 4] =
    ["motivating1d", "illustrative2d", "convoy5", "exploration2d"];

/// Verdict of the robust-control baseline for `ẋ = x + w + u`, `|w| ≤ w̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineVerdict {
    Feasible { k_lo: f64, k_hi: f64 },
    Infeasible { k_lo: f64, k_hi: f64 },
}

impl BaselineVerdict {
    pub fn is_feasible(&self) -> bool {
        matches!(self, BaselineVerdict::Feasible { .. })
    }
}

/// Searches for `u = kx` with `ẋ` pointing inward at both ends of `X` for every
/// admissible `w` and `kx ∈ U` on `X`.
pub fn robust_baseline_1d(bound_w: f64, x: [f64; 2], u: [f64; 2]) -> BaselineVerdict {
    let (x_lo, x_hi) = (x[0], x[1]);
    let (u_lo, u_hi) = (u[0], u[1]);
    // (1 + k)x_hi + w ≤ 0 and (1 + k)x_lo + w ≥ 0 for all |w| ≤ w̄.
    let k_hi = (-1.0 - bound_w / x_hi).min(-1.0 - bound_w / -x_lo);
    // k ≤ −1 < 0, so kx is extremal at the ends of X.
    let k_lo = (u_lo / x_hi).max(u_hi / x_lo);
    if k_lo <= k_hi {
        BaselineVerdict::Feasible { k_lo, k_hi }
    } else {
        BaselineVerdict::Infeasible { k_lo, k_hi }
    }
}

/// Everything derived from a configuration before any optimization.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ScenarioConfig,
    pub model: LinearModel,
    pub x_poly: Polytope,
    pub u_poly: Polytope,
    pub oracle: NonlinearityOracle,
    pub data: DataSet,
    /// Lattice spacing of generated data.
    pub spacing: Option<f64>,
}

fn lattice(lower: &[f64], upper: &[f64], spacing: f64) -> Result<Vec<DVector<f64>>> {
    if lower.len() != upper.len() || !(spacing > 0.0) {
        return Err(Error::ConfigInvalid("grid bounds or spacing".into()));
    }
    let n = lower.len();
    let lo: Vec<i64> = lower
        .iter()
        .map(|l| (l / spacing - 1e-9).ceil() as i64)
        .collect();
    let hi: Vec<i64> = upper
        .iter()
        .map(|u| (u / spacing + 1e-9).floor() as i64)
        .collect();
    let total: f64 = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (h - l + 1).max(0) as f64)
        .product();
    if total > 2.0e6 {
        return Err(Error::ConfigInvalid(format!(
            "grid of {total:.0} points is too large"
        )));
    }
    let mut out = Vec::new();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return Ok(out);
    }
    let mut idx = lo.clone();
    loop {
        out.push(DVector::from_fn(n, |i, _| idx[i] as f64 * spacing));
        let mut k = 0;
        loop {
            if k == n {
                return Ok(out);
            }
            idx[k] += 1;
            if idx[k] <= hi[k] {
                break;
            }
            idx[k] = lo[k];
            k += 1;
        }
    }
}

impl Pipeline {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let model = LinearModel::new(
            matrix(&config.model.a, "model.a")?,
            matrix(&config.model.b, "model.b")?,
        )?;
        let x_poly = Polytope::new(
            matrix(&config.constraints.a_x, "constraints.a_x")?,
            DVector::from_vec(config.constraints.b_x.clone()),
        )?;
        let u_poly = Polytope::new(
            matrix(&config.constraints.a_u, "constraints.a_u")?,
            DVector::from_vec(config.constraints.b_u.clone()),
        )?;
        if x_poly.dim() != model.n() || u_poly.dim() != model.m() {
            return Err(Error::ConfigInvalid(
                "constraint dimensions do not match the model".into(),
            ));
        }
        let oracle = oracle_for(&config.oracle);
        if oracle.dim() != model.n() {
            return Err(Error::ConfigInvalid(
                "oracle dimension does not match the model".into(),
            ));
        }
        let (data, spacing) = match &config.dataset {
            DatasetConfig::File { path } => (load_dataset(path)?, None),
            DatasetConfig::Empty => (DataSet::default(), None),
            DatasetConfig::Grid {
                lower,
                upper,
                spacing,
                inside,
            } => {
                let mut xs = lattice(lower, upper, *spacing)?;
                if let Some(m) = inside {
                    let m = matrix(m, "dataset.inside")?;
                    xs.retain(|x| linalg::quad_form(&m, x) <= 1.0);
                }
                (DataSet::from_oracle(xs, &oracle)?, Some(*spacing))
            }
            DatasetConfig::PairGrids {
                dim,
                pairs,
                lower,
                upper,
                spacing,
            } => {
                let plane = lattice(&[*lower, *lower], &[*upper, *upper], *spacing)?;
                let mut xs = Vec::new();
                for [i, j] in pairs {
                    if *i >= *dim || *j >= *dim {
                        return Err(Error::ConfigInvalid("pair index out of range".into()));
                    }
                    for p in &plane {
                        let mut x = DVector::zeros(*dim);
                        x[*i] = p[0];
                        x[*j] = p[1];
                        xs.push(x);
                    }
                }
                (DataSet::from_oracle(xs, &oracle)?, Some(*spacing))
            }
        };
        if let Some(n) = data.dim() {
            if n != model.n() {
                return Err(Error::DimensionMismatch(format!(
                    "data dimension {n}, model {}",
                    model.n()
                )));
            }
        }
        Ok(Self {
            config,
            model,
            x_poly,
            u_poly,
            oracle,
            data,
            spacing,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(ScenarioConfig::load(path)?)
    }

    /// Covering ellipse of the data with its certified covering radius.
    pub fn region(&self) -> Result<Option<DataRegion>> {
        if self.data.is_empty() {
            return Ok(None);
        }
        let a_delta = convex::min_volume_covering_ellipsoid(self.data.xs())?;
        let resolution = self
            .config
            .region
            .resolution
            .or(self.spacing.map(|s| s / 4.0))
            .ok_or_else(|| {
                Error::ConfigInvalid("region.resolution is required for file datasets".into())
            })?;
        Ok(Some(DataRegion::certify(&self.data, a_delta, resolution)?))
    }

    pub fn shape(&self, region: Option<&DataRegion>) -> Result<ShapeResult> {
        if let Some(p) = &self.config.shape.p {
            let p = matrix(p, "shape.p")?;
            let e = linalg::spd_inverse(&p)?;
            let n = self.model.n();
            return Ok(ShapeResult {
                logdet: e.determinant().ln(),
                decrease_margin: f64::NAN,
                e,
                p,
                y0: DMatrix::zeros(self.model.m(), n),
                k0: DMatrix::zeros(self.model.m(), n),
            });
        }
        let constrain = self.config.shape.constrain_to_region && region.is_some();
        let x_shape = match (&self.config.shape.extra_a, &self.config.shape.extra_b) {
            (Some(a), Some(b)) => {
                let extra = matrix(a, "shape.extra_a")?;
                if extra.ncols() != self.model.n() || extra.nrows() != b.len() {
                    return Err(Error::ConfigInvalid(
                        "shape.extra_a/extra_b dimensions".into(),
                    ));
                }
                let base = &self.x_poly;
                let rows = base.rows() + extra.nrows();
                let mut a_all = DMatrix::zeros(rows, self.model.n());
                a_all
                    .view_mut((0, 0), (base.rows(), self.model.n()))
                    .copy_from(base.a());
                a_all
                    .view_mut((base.rows(), 0), (extra.nrows(), self.model.n()))
                    .copy_from(&extra);
                let b_all = DVector::from_iterator(rows, base.b().iter().chain(b.iter()).copied());
                Polytope::new(a_all, b_all)?
            }
            (None, None) => self.x_poly.clone(),
            _ => {
                return Err(Error::ConfigInvalid(
                    "shape.extra_a and shape.extra_b go together".into(),
                ))
            }
        };
        synthesize_shape_with_decay(
            &self.model,
            &x_shape,
            &self.u_poly,
            region,
            constrain,
            self.config.shape.decay,
        )
    }

    pub fn gamma_bar(&self, p: &DMatrix<f64>, region: Option<&DataRegion>) -> Result<f64> {
        if let Some(g) = self.config.intervals.gamma_bar {
            return Ok(g);
        }
        match (self.config.bound_mode, region) {
            (BoundMode::Lipschitz, Some(r)) => crate::shape::region_level(p, r),
            _ => Ok(1.0),
        }
    }

    pub fn intervals(
        &self,
        p: &DMatrix<f64>,
        region: Option<&DataRegion>,
    ) -> Result<Vec<Interval>> {
        let gamma_bar = self.gamma_bar(p, region)?;
        match (
            &self.config.intervals.uniform,
            &self.config.intervals.widths,
        ) {
            (Some(u), _) => lipschitz::uniform_schedule(gamma_bar, u.width, u.first, u.count),
            (None, Some(w)) => lipschitz::make_intervals(gamma_bar, w),
            (None, None) => Err(Error::ConfigInvalid(
                "intervals need widths or a uniform schedule".into(),
            )),
        }
    }

    /// `δ` used by the Lipschitz and grid bounds.
    pub fn delta(&self, region: Option<&DataRegion>) -> Result<f64> {
        match (self.config.region.delta, region) {
            (Some(d), _) => Ok(d),
            (None, Some(r)) => Ok(r.delta()),
            (None, None) => Ok(0.0),
        }
    }

    /// The data-driven estimator over the dilated ring.
    pub fn estimated_lipschitz(
        &self,
        p: &DMatrix<f64>,
        interval: Interval,
        delta: f64,
    ) -> Result<f64> {
        let ring = Ring::new(p, interval, delta)?;
        estimate_lipschitz(&self.data, p, &ring_indices(&self.data, &ring))
    }

    pub fn lipschitz_bound(
        &self,
        p: &DMatrix<f64>,
        interval: Interval,
        region: Option<&DataRegion>,
    ) -> Result<QuadraticBound> {
        let delta = self.delta(region)?;
        let (l, estimated) = match self.config.lipschitz {
            Some(l) => (l, false),
            None => match self.estimated_lipschitz(p, interval, delta) {
                Ok(l) => (l, true),
                Err(Error::TooFewPoints { got, .. }) if got < 2 => {
                    return Err(Error::EmptyRing {
                        gamma_lo: interval.gamma_lo,
                        gamma_hi: interval.gamma_hi,
                    })
                }
                Err(e) => return Err(e),
            },
        };
        let mut bound = bound_nonlinearity_lipschitz(
            &self.data,
            p,
            interval,
            delta,
            l,
            self.config.chunk_size,
            region,
        )?;
        if let BoundKind::Lipschitz { estimated: est, .. } = &mut bound.kind {
            *est = estimated;
        }
        Ok(bound)
    }

    pub fn gp_prior(&self) -> GpPrior {
        self.config
            .gp_prior
            .clone()
            .unwrap_or_else(|| GpPrior::uniform(self.model.n(), 0.0, 1.0, 0.3))
    }

    pub fn gp_model(&self) -> Result<GpModel> {
        fit_gp(&self.data, &self.gp_prior())
    }

    fn gp_config(&self) -> GpBoundConfig {
        GpBoundConfig {
            seed: self.config.gp_bound.seed ^ self.config.seed,
            chunk_size: self.config.gp_bound.chunk_size.or(self.config.chunk_size),
            ..self.config.gp_bound.clone()
        }
    }

    pub fn gp_bound(
        &self,
        gp: &GpModel,
        p: &DMatrix<f64>,
        interval: Interval,
    ) -> Result<QuadraticBound> {
        bound_nonlinearity_gp(gp, p, interval, &self.gp_config())
    }

    pub fn gp_grid_bound(
        &self,
        gp: &GpModel,
        p: &DMatrix<f64>,
        interval: Interval,
        region: Option<&DataRegion>,
    ) -> Result<QuadraticBound> {
        let l = match self.config.lipschitz {
            Some(l) => l,
            None => self.estimated_lipschitz(p, interval, self.delta(region)?)?,
        };
        bound_nonlinearity_gp_grid(gp, p, interval, &self.gp_config(), l)
    }

    /// Shape, interval sweep and oracle-based verification.
    pub fn synthesize(&self) -> Result<Synthesis> {
        let region = match self.config.bound_mode {
            BoundMode::Lipschitz | BoundMode::GpGrid => self.region()?,
            BoundMode::Gp if self.config.shape.constrain_to_region => self.region()?,
            BoundMode::Gp => None,
        };
        let shape = self.shape(region.as_ref())?;
        let intervals = self.intervals(&shape.p, region.as_ref())?;
        let max_halvings = self.config.intervals.max_halvings;
        let gp = match self.config.bound_mode {
            BoundMode::Lipschitz => None,
            _ => Some(self.gp_model()?),
        };
        let mut bounds: Vec<QuadraticBound> = Vec::new();
        let provider = |iv: Interval| {
            let b = match (self.config.bound_mode, &gp) {
                (BoundMode::Lipschitz, _) => self.lipschitz_bound(&shape.p, iv, region.as_ref()),
                (BoundMode::Gp, Some(gp)) => self.gp_bound(gp, &shape.p, iv),
                (BoundMode::GpGrid, Some(gp)) => {
                    self.gp_grid_bound(gp, &shape.p, iv, region.as_ref())
                }
                _ => unreachable!("GP model fitted for GP modes"),
            }?;
            bounds.push(b.clone());
            Ok(b)
        };
        let mut cert = safe_set::sweep_intervals(
            &self.model,
            &shape.e,
            provider,
            &intervals,
            &self.x_poly,
            &self.u_poly,
            max_halvings,
        )?;
        cert.verification = safe_set::verify_certificate(
            &cert,
            &self.model,
            &self.x_poly,
            &self.u_poly,
            NonlinearitySource::Oracle(&self.oracle),
            self.config.verify_samples,
        )?;
        Ok(Synthesis {
            region,
            shape,
            intervals,
            certificate: cert,
            bounds,
        })
    }

    pub fn policy(&self) -> Result<Box<dyn FnMut(f64, &DVector<f64>) -> DVector<f64>>> {
        let m = self.model.m();
        Ok(match &self.config.simulation.policy {
            PolicyConfig::Zero => Box::new(move |_, _| DVector::zeros(m)),
            PolicyConfig::Constant { u } => {
                if u.len() != m {
                    return Err(Error::ConfigInvalid("policy input dimension".into()));
                }
                let u = DVector::from_vec(u.clone());
                Box::new(move |_, _| u.clone())
            }
            PolicyConfig::Gain { k } => {
                let k = matrix(k, "policy gain")?;
                if k.shape() != (m, self.model.n()) {
                    return Err(Error::ConfigInvalid("policy gain shape".into()));
                }
                Box::new(move |_, x| &k * x)
            }
        })
    }

    /// Initial states, rescaled onto the configured level of the certificate.
    pub fn initial_states(&self, cert: &SafeCertificate) -> Result<Vec<DVector<f64>>> {
        let sim = &self.config.simulation;
        sim.initial_states
            .iter()
            .map(|x| {
                if x.len() != self.model.n() {
                    return Err(Error::ConfigInvalid("initial state dimension".into()));
                }
                let x = DVector::from_vec(x.clone());
                Ok(match sim.scale_to_level {
                    Some(frac) => {
                        let level = cert.level(&x);
                        if !(level > 0.0) {
                            return Err(Error::ConfigInvalid("cannot rescale the origin".into()));
                        }
                        // Land just inside the closed set despite rounding.
                        &x * (frac * cert.gamma / level).sqrt() * (1.0 - 1e-12)
                    }
                    None => x,
                })
            })
            .collect()
    }

    pub fn simulate(&self, cert: &SafeCertificate) -> Result<Vec<Trajectory>> {
        let sim = &self.config.simulation;
        let mut policy = self.policy()?;
        self.initial_states(cert)?
            .iter()
            .map(|x0| {
                simulate(
                    &self.model,
                    &self.oracle,
                    cert,
                    &self.u_poly,
                    &mut *policy,
                    x0,
                    sim.horizon,
                    sim.step,
                    &self.config.filter,
                )
            })
            .collect()
    }

    pub fn explore(&self) -> Result<ExplorationOutcome> {
        let ex = self.config.exploration.as_ref().ok_or_else(|| {
            Error::ConfigInvalid("the explore command needs an exploration section".into())
        })?;
        let region = if self.config.shape.constrain_to_region {
            self.region()?
        } else {
            None
        };
        let shape = self.shape(region.as_ref())?;
        let schedule = ExplorationSchedule {
            recompute_period: ex.recompute_period,
            collect_stride: ex.collect_stride,
            prior: self.gp_prior(),
            intervals: self.intervals(&shape.p, region.as_ref())?,
            gp_bound: self.gp_config(),
            max_halvings: self.config.intervals.max_halvings,
            verify_samples: self.config.verify_samples,
        };
        let gain = |k: &Vec<Vec<f64>>| matrix(k, "learner gain");
        let seed = self.config.seed;
        let mut learner: Box<dyn Learner> = match &ex.learner {
            LearnerConfig::FixedGain { k } => Box::new(FixedGain(gain(k)?)),
            LearnerConfig::Random { k, amplitude, hold } => {
                Box::new(RandomExplorer::new(gain(k)?, *amplitude, *hold, seed))
            }
            LearnerConfig::PolicyGradient {
                k,
                step,
                perturbation,
                window,
            } => Box::new(PolicyGradient::new(
                gain(k)?,
                *step,
                *perturbation,
                *window,
                seed,
            )),
        };
        let setup = ExplorationSetup {
            model: &self.model,
            oracle: &self.oracle,
            p: &shape.p,
            x_poly: &self.x_poly,
            u_poly: &self.u_poly,
            filter: self.config.filter,
        };
        explore(
            &setup,
            &self.data,
            &schedule,
            &mut *learner,
            &DVector::from_vec(ex.x0.clone()),
            ex.horizon,
            ex.step,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub region: Option<DataRegion>,
    pub shape: ShapeResult,
    pub intervals: Vec<Interval>,
    pub certificate: SafeCertificate,
    /// Every bound computed during the sweep, in order.
    pub bounds: Vec<QuadraticBound>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Shape,
    BoundLipschitz,
    BoundGp,
    Synthesize,
    Verify,
    Simulate,
    Explore,
    BaselineRobust,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "shape" => Command::Shape,
            "bound-lipschitz" => Command::BoundLipschitz,
            "bound-gp" => Command::BoundGp,
            "synthesize" => Command::Synthesize,
            "verify" => Command::Verify,
            "simulate" => Command::Simulate,
            "explore" => Command::Explore,
            "baseline-robust" => Command::BaselineRobust,
            other => return Err(Error::ConfigInvalid(format!("unknown command {other}"))),
        })
    }
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let r: Vec<String> = m.row(i).iter().map(|v| format!("{v:.6}")).collect();
            format!("[{}]", r.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn describe_bound(report: &mut String, b: &QuadraticBound) {
    let _ = writeln!(report, "bound.kind: {}", b.kind.label());
    let _ = writeln!(
        report,
        "bound.interval: [{}, {}]",
        b.interval.gamma_lo, b.interval.gamma_hi
    );
    let _ = writeln!(report, "bound.Q: {}", fmt_matrix(&b.q));
    let _ = writeln!(report, "bound.points_used: {}", b.points_used);
    let _ = writeln!(report, "bound.iterations: {}", b.iterations);
    if let Some(e) = b.sprocedure_min_eig {
        let _ = writeln!(report, "bound.sprocedure_min_eig: {e:.3e}");
    }
    match &b.kind {
        BoundKind::Lipschitz {
            lipschitz,
            delta,
            estimated,
        } => {
            let _ = writeln!(
                report,
                "bound.lipschitz: {lipschitz:.6} (estimated: {estimated})"
            );
            let _ = writeln!(report, "bound.delta: {delta:.6}");
        }
        BoundKind::Gp { c } => {
            let _ = writeln!(report, "bound.c: {c}");
        }
        BoundKind::GpGrid {
            beta,
            delta_grid,
            lipschitz,
        } => {
            let _ = writeln!(
                report,
                "bound.beta: {beta}, delta_grid: {delta_grid}, lipschitz: {lipschitz}"
            );
        }
    }
    for n in &b.notes {
        let _ = writeln!(report, "bound.note: {n}");
    }
}

fn describe_certificate(report: &mut String, c: &SafeCertificate) {
    let _ = writeln!(report, "gamma: {:.9}", c.gamma);
    let _ = writeln!(
        report,
        "interval: [{}, {}]",
        c.interval.gamma_lo, c.interval.gamma_hi
    );
    let _ = writeln!(report, "P: {}", fmt_matrix(&c.p));
    let _ = writeln!(report, "K: {}", fmt_matrix(&c.k));
    let _ = writeln!(report, "lmi_margin: {:.3e}", c.lmi_margin);
    let v = &c.verification;
    let _ = writeln!(
        report,
        "verification: state_ok={} input_ok={} vdot_max={:.6e} samples={}",
        v.state_ok, v.input_ok, v.vdot_max, v.samples
    );
    for w in &c.warnings {
        let _ = writeln!(report, "warning: {w}");
    }
}

/// Outcome of one command: the report text and the files written.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub report: String,
    pub files: Vec<PathBuf>,
    pub certificate: Option<SafeCertificate>,
    pub success: bool,
}

/// Runs one pipeline stage and writes its artifacts into `out`.
pub fn run_scenario(config: ScenarioConfig, command: Command, out: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out)?;
    let mut report = String::new();
    let _ = writeln!(report, "scenario: {}", config.name);
    let _ = writeln!(report, "seed: {}", config.seed);
    let mut files = Vec::new();
    let mut certificate = None;
    let mut success = true;

    if command == Command::BaselineRobust {
        let b = config.baseline.clone().ok_or_else(|| {
            Error::ConfigInvalid("baseline-robust needs a baseline section".into())
        })?;
        let verdict = robust_baseline_1d(b.bound_w, b.x, b.u);
        let _ = writeln!(report, "command: baseline-robust");
        let _ = writeln!(report, "bound_w: {}", b.bound_w);
        match verdict {
            BaselineVerdict::Feasible { k_lo, k_hi } => {
                let _ = writeln!(report, "verdict: Feasible, k in [{k_lo:.6}, {k_hi:.6}]");
            }
            BaselineVerdict::Infeasible { k_lo, k_hi } => {
                let _ = writeln!(
                    report,
                    "verdict: Infeasible, inputs require k >= {k_lo:.6} but the disturbance requires k <= {k_hi:.6}"
                );
            }
        }
        return finish(out, report, files, None, true);
    }

    let pipeline = Pipeline::new(config)?;
    let _ = writeln!(report, "data_points: {}", pipeline.data.len());
    match command {
        Command::Shape => {
            let region = if pipeline.config.shape.constrain_to_region {
                pipeline.region()?
            } else {
                None
            };
            if let Some(r) = &region {
                let _ = writeln!(report, "region.A_delta: {}", fmt_matrix(r.a_delta()));
                let _ = writeln!(report, "region.delta: {:.6}", r.delta());
            }
            let shape = pipeline.shape(region.as_ref())?;
            let _ = writeln!(report, "P: {}", fmt_matrix(&shape.p));
            let _ = writeln!(report, "E: {}", fmt_matrix(&shape.e));
            let _ = writeln!(report, "K0: {}", fmt_matrix(&shape.k0));
            let _ = writeln!(report, "decrease_margin: {:.3e}", shape.decrease_margin);
            let path = out.join("shape.json");
            write_json(&path, &shape)?;
            files.push(path);
        }
        Command::BoundLipschitz | Command::BoundGp => {
            let use_region = pipeline.config.shape.constrain_to_region;
            let region = if use_region || command == Command::BoundLipschitz {
                pipeline.region()?
            } else {
                None
            };
            let shape = pipeline.shape(if use_region { region.as_ref() } else { None })?;
            let intervals = pipeline.intervals(&shape.p, region.as_ref())?;
            let iv = *intervals.first().ok_or(Error::AllIntervalsInfeasible)?;
            let bound = if command == Command::BoundLipschitz {
                let delta = pipeline.delta(region.as_ref())?;
                if let Ok(lhat) = pipeline.estimated_lipschitz(&shape.p, iv, delta) {
                    let _ = writeln!(report, "lipschitz_estimate: {lhat:.6}");
                }
                pipeline.lipschitz_bound(&shape.p, iv, region.as_ref())?
            } else {
                pipeline.gp_bound(&pipeline.gp_model()?, &shape.p, iv)?
            };
            describe_bound(&mut report, &bound);
            let path = out.join("bound.json");
            write_json(&path, &bound)?;
            files.push(path);
        }
        Command::Synthesize => {
            let syn = pipeline.synthesize()?;
            if let Some(r) = &syn.region {
                let _ = writeln!(report, "region.delta: {:.6}", r.delta());
            }
            if let Some(b) = syn.bounds.last() {
                describe_bound(&mut report, b);
            }
            describe_certificate(&mut report, &syn.certificate);
            success = syn.certificate.verification.passed();
            let path = out.join("certificate.json");
            syn.certificate.save(&path)?;
            files.push(path);
            certificate = Some(syn.certificate);
        }
        Command::Verify => {
            let path = out.join("certificate.json");
            let mut cert = if path.exists() {
                SafeCertificate::load(&path)?
            } else {
                pipeline.synthesize()?.certificate
            };
            cert.verification = safe_set::verify_certificate(
                &cert,
                &pipeline.model,
                &pipeline.x_poly,
                &pipeline.u_poly,
                NonlinearitySource::Oracle(&pipeline.oracle),
                pipeline.config.verify_samples,
            )?;
            describe_certificate(&mut report, &cert);
            success = cert.verification.passed();
            cert.save(&path)?;
            files.push(path);
            certificate = Some(cert);
        }
        Command::Simulate => {
            let syn = pipeline.synthesize()?;
            let cert = syn.certificate;
            describe_certificate(&mut report, &cert);
            let trajs = pipeline.simulate(&cert)?;
            for (i, t) in trajs.iter().enumerate() {
                let name = if i == 0 {
                    "trajectory.csv".to_string()
                } else {
                    format!("trajectory_{}.csv", i + 1)
                };
                let path = out.join(name);
                t.write_csv(&path)?;
                files.push(path);
                let violations =
                    t.x.iter()
                        .filter(|x| !pipeline.x_poly.contains(x).unwrap_or(false))
                        .count();
                let _ = writeln!(
                    report,
                    "run {}: steps={} max_level/gamma={:.6} active_steps={} episodes={} constraint_violations={}",
                    i + 1,
                    t.len(),
                    t.max_level(&cert.p) / cert.gamma,
                    t.active_steps(),
                    t.intervention_episodes().len(),
                    violations
                );
                success &= violations == 0;
            }
            let path = out.join("certificate.json");
            cert.save(&path)?;
            files.push(path);
            certificate = Some(cert);
        }
        Command::Explore => {
            let outcome = pipeline.explore()?;
            let path = out.join("history.csv");
            runtime::write_history_csv(&outcome.history, &path)?;
            files.push(path);
            let path = out.join("trajectory.csv");
            outcome.trajectory.write_csv(&path)?;
            files.push(path);
            let path = out.join("certificate.json");
            outcome.certificate.save(&path)?;
            files.push(path);
            let _ = writeln!(
                report,
                "recomputes: {}",
                outcome.history.len().saturating_sub(1)
            );
            let _ = writeln!(report, "swaps: {:?}", outcome.swaps);
            let _ = writeln!(
                report,
                "active_steps: {}",
                outcome.trajectory.active_steps()
            );
            let _ = writeln!(
                report,
                "episodes: {}",
                outcome.trajectory.intervention_episodes().len()
            );
            if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
                let _ = writeln!(report, "volume: {:.6} -> {:.6}", first.volume, last.volume);
            }
            for w in &outcome.warnings {
                let _ = writeln!(report, "warning: {w}");
            }
            describe_certificate(&mut report, &outcome.certificate);
            certificate = Some(outcome.certificate);
        }
        Command::BaselineRobust => unreachable!("handled above"),
    }
    finish(out, report, files, certificate, success)
}

fn finish(
    out: &Path,
    mut report: String,
    mut files: Vec<PathBuf>,
    certificate: Option<SafeCertificate>,
    success: bool,
) -> Result<RunOutput> {
    let _ = writeln!(report, "status: {}", if success { "ok" } else { "failed" });
    let path = out.join("report.txt");
    std::fs::write(&path, &report)?;
    files.push(path);
    Ok(RunOutput {
        report,
        files,
        certificate,
        success,
    })
}

/// Largest sampled gradient norm of `xᵀPd(x)` over lattice points within
/// `reach` of the ring (central differences), inflated by `1 + margin`.
pub fn sampled_form_lipschitz(
    p: &DMatrix<f64>,
    oracle: &NonlinearityOracle,
    interval: Interval,
    reach: f64,
    spacing: f64,
    margin: f64,
) -> Result<f64> {
    let ring = Ring::new(p, interval, reach)?;
    let n = p.nrows();
    let inv = linalg::spd_inverse(p)?;
    let half: Vec<f64> = (0..n)
        .map(|i| (interval.gamma_hi * inv[(i, i)]).sqrt() + reach)
        .collect();
    let lower: Vec<f64> = half.iter().map(|h| -h).collect();
    let f = |x: &DVector<f64>| x.dot(&(p * oracle.eval(x)));
    let h = 1e-6;
    let mut best: f64 = 0.0;
    for x in lattice(&lower, &half, spacing)? {
        if !ring.contains(&x) {
            continue;
        }
        let mut g = DVector::zeros(n);
        let mut xp = x.clone();
        for i in 0..n {
            let o = xp[i];
            xp[i] = o + h;
            let fp = f(&xp);
            xp[i] = o - h;
            let fm = f(&xp);
            xp[i] = o;
            g[i] = (fp - fm) / (2.0 * h);
        }
        best = best.max(g.norm());
    }
    Ok(best * (1.0 + margin))
}
