//! Experiment configuration: model selection with explicit dimensions and
//! row-major matrices, initial-ensemble specification with a mandatory
//! seed, horizon and solver knobs.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{ControlProblem, LqMeanField, NonlinearAttraction, ScalarLq};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    ScalarLq {
        a: f64,
        b: f64,
    },
    LqMeanField {
        state_dim: usize,
        control_dim: usize,
        /// All matrices row-major with the explicit dimensions above.
        a: Vec<f64>,
        a_bar: Vec<f64>,
        b: Vec<f64>,
        q: Vec<f64>,
        q_bar: Vec<f64>,
        r: Vec<f64>,
        #[serde(default)]
        phi_mean_quad: f64,
        #[serde(default)]
        phi_spread_quad: f64,
    },
    NonlinearAttraction {
        state_dim: usize,
        control_dim: usize,
        kappa: f64,
        eta: f64,
        width: f64,
        q_scale: f64,
        r_scale: f64,
    },
}

impl ModelConfig {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModelConfig::ScalarLq { .. } => (1, 1),
            ModelConfig::LqMeanField {
                state_dim,
                control_dim,
                ..
            }
            | ModelConfig::NonlinearAttraction {
                state_dim,
                control_dim,
                ..
            } => (*state_dim, *control_dim),
        }
    }
}

fn matrix_from_row_major(
    name: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Config {
            path: format!("model.{name}"),
            detail: format!("expected {rows}x{cols} = {} entries, got {}", rows * cols, data.len()),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Builds the model behind the configuration.
pub fn build_model(config: &ModelConfig) -> Result<Box<dyn ControlProblem>> {
    match config {
        ModelConfig::ScalarLq { a, b } => Ok(Box::new(ScalarLq { a: *a, b: *b })),
        ModelConfig::LqMeanField {
            state_dim,
            control_dim,
            a,
            a_bar,
            b,
            q,
            q_bar,
            r,
            phi_mean_quad,
            phi_spread_quad,
        } => {
            let (d, m) = (*state_dim, *control_dim);
            if d == 0 || m == 0 {
                return Err(Error::Config {
                    path: "model.state_dim".into(),
                    detail: "dimensions must be positive".into(),
                });
            }
            let model = LqMeanField::new(
                matrix_from_row_major("a", d, d, a)?,
                matrix_from_row_major("a_bar", d, d, a_bar)?,
                matrix_from_row_major("b", d, m, b)?,
                matrix_from_row_major("q", d, d, q)?,
                matrix_from_row_major("q_bar", d, d, q_bar)?,
                matrix_from_row_major("r", m, m, r)?,
            )
            .with_terminal_quadratic(*phi_mean_quad, *phi_spread_quad);
            Ok(Box::new(model))
        }
        ModelConfig::NonlinearAttraction {
            state_dim,
            control_dim,
            kappa,
            eta,
            width,
            q_scale,
            r_scale,
        } => {
            if *width <= 0.0 {
                return Err(Error::Config {
                    path: "model.width".into(),
                    detail: "kernel width must be positive".into(),
                });
            }
            Ok(Box::new(NonlinearAttraction::new(
                *state_dim,
                *control_dim,
                *kappa,
                *eta,
                *width,
                *q_scale,
                *r_scale,
            )))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    /// Explicit particle list, one row per particle.
    Explicit { points: Vec<Vec<f64>> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Independent uniform coordinates on `[low, high)`.
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

/// Samples (or loads) the initial ensemble.
pub fn build_ensemble(
    spec: &EnsembleSpec,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    match spec {
        EnsembleSpec::Explicit { points } => {
            if points.len() != n {
                return Err(Error::Config {
                    path: "initial_ensemble.points".into(),
                    detail: format!("expected {n} particles, got {}", points.len()),
                });
            }
            for (i, p) in points.iter().enumerate() {
                if p.len() != d {
                    return Err(Error::Config {
                        path: format!("initial_ensemble.points[{i}]"),
                        detail: format!("expected dimension {d}, got {}", p.len()),
                    });
                }
            }
            EmpiricalMeasure::new(DMatrix::from_fn(n, d, |i, j| points[i][j]))
        }
        EnsembleSpec::Gaussian { mean, std } => {
            if mean.len() != d || std.len() != d {
                return Err(Error::Config {
                    path: "initial_ensemble".into(),
                    detail: format!("mean/std must have dimension {d}"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = DMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    let normal = Normal::new(mean[j], std[j]).map_err(|e| Error::Config {
                        path: "initial_ensemble.std".into(),
                        detail: e.to_string(),
                    })?;
                    pts[(i, j)] = normal.sample(&mut rng);
                }
            }
            EmpiricalMeasure::new(pts)
        }
        EnsembleSpec::Uniform { low, high } => {
            if low.len() != d || high.len() != d {
                return Err(Error::Config {
                    path: "initial_ensemble".into(),
                    detail: format!("low/high must have dimension {d}"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = DMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    if high[j] <= low[j] {
                        return Err(Error::Config {
                            path: "initial_ensemble.high".into(),
                            detail: format!("high[{j}] must exceed low[{j}]"),
                        });
                    }
                    pts[(i, j)] = rng.random_range(low[j]..high[j]);
                }
            }
            EmpiricalMeasure::new(pts)
        }
    }
}

/// Solver knobs with spec-pinned defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    pub relaxation: f64,
    pub descent_tol: f64,
    pub fit_window: [f64; 2],
    pub hautus_tol: f64,
    pub cond_cap: f64,
    pub decay_margin: f64,
    pub validation_samples: usize,
    /// Thresholds for the surjectivity diagnostics.
    pub pointwise_surjectivity_min: f64,
    pub full_surjectivity_min: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-11,
            newton_max_iter: 60,
            sweep_tol: 1e-10,
            max_sweeps: 50_000,
            relaxation: 0.5,
            descent_tol: 1e-6,
            fit_window: [0.10, 0.45],
            hautus_tol: crate::tolerances::HAUTUS_TOL,
            cond_cap: crate::tolerances::COND_CAP,
            decay_margin: crate::tolerances::DECAY_MARGIN,
            validation_samples: 100,
            pointwise_surjectivity_min: 1e-8,
            full_surjectivity_min: 1e-10,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub n_particles: usize,
    pub initial_ensemble: EnsembleSpec,
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            path: "<config>".into(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config {
                path: "n_particles".into(),
                detail: "must be at least 1".into(),
            });
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config {
                path: "horizon".into(),
                detail: "must be positive".into(),
            });
        }
        if self.steps < 10 {
            return Err(Error::Config {
                path: "steps".into(),
                detail: format!("need at least 10 time steps, got {}", self.steps),
            });
        }
        let [w0, w1] = self.solver.fit_window;
        if !(0.0..1.0).contains(&w0) || !(w0..=1.0).contains(&w1) {
            return Err(Error::Config {
                path: "solver.fit_window".into(),
                detail: "window must satisfy 0 <= w0 < w1 <= 1".into(),
            });
        }
        // Dimension consistency between model and ensemble is checked by
        // building both.
        let (d, _) = self.model.dims();
        build_model(&self.model)?;
        build_ensemble(&self.initial_ensemble, self.n_particles, d, self.seed)?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON serialization; stamped into
    /// every report for reproducibility.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in text.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
