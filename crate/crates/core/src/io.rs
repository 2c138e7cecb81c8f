//! JSON problem files.
//!
//! ```json
//! {"spec_version": 1,
//!  "system": {"kind": "double_integrator", "dt": 0.25, "pos_dim": 2, "horizon": 6, "x0": [0,0,0,0]},
//!  "noise": {"w_radius": 0.05, "e_radius": 0.02},
//!  "cost": {"kind": "J3", "position_indices": [0, 1], "goal": [2, 0]},
//!  "known": [],
//!  "unknown": {"param_dim": 4, "param_lower": [-3,-3,-3,-3], "param_upper": [3,3,3,3],
//!              "position_indices": [0, 1], "obstacles": [{"axis_box": 0, "times": [1,2,3,4,5,6]}]},
//!  "theta_star": [0.6, 1.2, -0.5, 0.2]}
//! ```
//!
//! Matrices are row-major nested arrays.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{serde_mat, Mat, Vector};
use crate::model::{
    double_integrator, validate_instance, CostSpec, Halfspace, KnownConstraints, LtvSystem, NoiseModel,
    NonlinearSystem, Obstacle, OutputKind, ParametricFamily, ProblemInstance, System, Unicycle,
};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    /// Per-step blocks: `T` of `a`, `b` and `T + 1` of `c`.
    Ltv {
        #[serde(with = "serde_mat::vec")]
        a: Vec<Mat>,
        #[serde(with = "serde_mat::vec")]
        b: Vec<Mat>,
        #[serde(with = "serde_mat::vec")]
        c: Vec<Mat>,
        x0: Vec<f64>,
    },
    /// One `(a, b, c)` repeated over the horizon.
    Lti {
        #[serde(with = "serde_mat")]
        a: Mat,
        #[serde(with = "serde_mat")]
        b: Mat,
        #[serde(with = "serde_mat")]
        c: Mat,
        x0: Vec<f64>,
        horizon: usize,
    },
    DoubleIntegrator {
        dt: f64,
        pos_dim: usize,
        horizon: usize,
        x0: Vec<f64>,
        #[serde(default)]
        output: OutputKind,
    },
    /// State `(p_x, p_y, heading, speed)`.
    Unicycle {
        dt: f64,
        horizon: usize,
        x0: Vec<f64>,
        #[serde(default)]
        output: OutputKind,
    },
}

impl SystemSpec {
    pub fn build(&self) -> Result<System> {
        Ok(match self {
            SystemSpec::Ltv { a, b, c, x0 } => System::Ltv(LtvSystem::new(
                a.clone(),
                b.clone(),
                c.clone(),
                Vector::from_column_slice(x0),
            )?),
            SystemSpec::Lti { a, b, c, x0, horizon } => System::Ltv(LtvSystem::new(
                vec![a.clone(); *horizon],
                vec![b.clone(); *horizon],
                vec![c.clone(); horizon + 1],
                Vector::from_column_slice(x0),
            )?),
            SystemSpec::DoubleIntegrator {
                dt,
                pos_dim,
                horizon,
                x0,
                output,
            } => System::Ltv(double_integrator(
                *dt,
                *pos_dim,
                *horizon,
                Vector::from_column_slice(x0),
                *output,
            )?),
            SystemSpec::Unicycle {
                dt,
                horizon,
                x0,
                output,
            } => {
                let c = output.matrix(4, 2);
                System::Nonlinear(NonlinearSystem::new(
                    Arc::new(Unicycle { dt: *dt }),
                    *horizon,
                    vec![c; horizon + 1],
                    Vector::from_column_slice(x0),
                )?)
            }
        })
    }
}

/// A known constraint row, or a shorthand that expands to several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnownSpec {
    Row(Halfspace),
    InputBox {
        input_lower: Vec<f64>,
        input_upper: Vec<f64>,
    },
    StateBounds {
        state: usize,
        times: Vec<usize>,
        #[serde(default)]
        lower: Option<f64>,
        #[serde(default)]
        upper: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObstacleSpec {
    /// Axis box over `theta[axis_box..axis_box + 4] = (x_lo, x_hi, y_lo, y_hi)`.
    AxisBox {
        axis_box: usize,
        times: Vec<usize>,
    },
    General(Obstacle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub param_dim: usize,
    pub param_lower: Vec<f64>,
    pub param_upper: Vec<f64>,
    pub position_indices: Vec<usize>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub spec_version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub noise: NoiseModel,
    pub cost: CostSpec,
    #[serde(default)]
    pub known: Vec<KnownSpec>,
    #[serde(default)]
    pub unknown: Option<FamilySpec>,
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
}

impl ProblemFile {
    /// Builds and validates the instance.
    pub fn build(&self) -> Result<ProblemInstance> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Validation(format!(
                "problem spec_version {} is not supported (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        let system = self.system.build()?;
        let d = system.dims();
        let mut known = KnownConstraints::default();
        for k in &self.known {
            match k {
                KnownSpec::Row(h) => known.halfspaces.push(h.clone()),
                KnownSpec::InputBox {
                    input_lower,
                    input_upper,
                } => {
                    if input_lower.len() != d.ni || input_upper.len() != d.ni {
                        return Err(Error::Validation(format!("input box needs {} bounds per side", d.ni)));
                    }
                    known.add_input_box(&d, input_lower, input_upper);
                }
                KnownSpec::StateBounds {
                    state,
                    times,
                    lower,
                    upper,
                } => known.add_state_bounds(&d, *state, times, *lower, *upper),
            }
        }
        let unknown = match &self.unknown {
            None => ParametricFamily::default(),
            Some(f) => ParametricFamily {
                param_dim: f.param_dim,
                param_lower: f.param_lower.clone(),
                param_upper: f.param_upper.clone(),
                position_indices: f.position_indices.clone(),
                obstacles: f
                    .obstacles
                    .iter()
                    .map(|o| match o {
                        ObstacleSpec::AxisBox { axis_box, times } => {
                            Obstacle::axis_box(f.param_dim, *axis_box, times.clone())
                        }
                        ObstacleSpec::General(o) => o.clone(),
                    })
                    .collect(),
            },
        };
        let inst = ProblemInstance {
            system,
            noise: self.noise,
            cost: self.cost.clone(),
            known,
            unknown,
            theta_star: self.theta_star.as_deref().map(Vector::from_column_slice),
        };
        validate_instance(&inst).into_result()?;
        Ok(inst)
    }
}

pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_problem(path: &Path) -> Result<ProblemInstance> {
    let text = std::fs::read_to_string(path)?;
    parse_problem(&text)?.build()
}
