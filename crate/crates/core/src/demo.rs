//! Noisy closed-loop demonstrations and transmission-error corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim, Error, Result};
use crate::forward::ForwardSolution;
use crate::linalg::{serde_vec, Vector};
use crate::model::{Dims, NoiseModel, System};
use crate::sls::FeedbackGain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStrategy {
    /// Components i.i.d. uniform on `[-r, r]`.
    UniformBall,
    /// Components i.i.d. uniform on `{-r, r}`.
    Vertex,
}

/// One realization: initial-state deviation, `T` process and `T + 1` output vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSequence {
    #[serde(with = "serde_vec")]
    pub x0: Vector,
    #[serde(with = "serde_vec::list")]
    pub w: Vec<Vector>,
    #[serde(with = "serde_vec::list")]
    pub e: Vec<Vector>,
}

impl NoiseSequence {
    pub fn zeros(d: &Dims) -> Self {
        NoiseSequence {
            x0: Vector::zeros(d.n),
            w: vec![Vector::zeros(d.n); d.horizon],
            e: vec![Vector::zeros(d.no); d.horizon + 1],
        }
    }
}

fn draw(r: f64, strategy: NoiseStrategy, rng: &mut impl Rng) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    match strategy {
        NoiseStrategy::UniformBall => rng.gen_range(-r..=r),
        NoiseStrategy::Vertex => {
            if rng.gen::<bool>() {
                r
            } else {
                -r
            }
        }
    }
}

pub fn sample_noise(noise: &NoiseModel, d: &Dims, strategy: NoiseStrategy, rng: &mut impl Rng) -> NoiseSequence {
    let vec_of = |len: usize, r: f64, rng: &mut _| Vector::from_fn(len, |_, _| draw(r, strategy, rng));
    let x0 = vec_of(d.n, noise.x0_radius, rng);
    let w = (0..d.horizon).map(|_| vec_of(d.n, noise.w_radius, rng)).collect();
    let e = (0..=d.horizon).map(|_| vec_of(d.no, noise.e_radius, rng)).collect();
    NoiseSequence { x0, w, e }
}

/// Observed `(u, y)`; `x` is kept only for test oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    #[serde(with = "serde_vec")]
    pub u: Vector,
    /// `y_0..y_T` stacked.
    #[serde(with = "serde_vec")]
    pub y: Vector,
    #[serde(default, with = "serde_vec::opt", skip_serializing_if = "Option::is_none")]
    pub x: Option<Vector>,
}

/// Simulates `x_{t+1} = f_t(x_t, u_t) + w_t`, `y_t = C_t x_t + e_t`,
/// `u_t = v_t + sum_{tau <= t} K_{t,tau} (y_tau - C_tau z_tau)` from `x_0 = x0 + noise.x0`.
pub fn rollout(
    system: &System,
    z: &Vector,
    v: &Vector,
    k: &FeedbackGain,
    noise: &NoiseSequence,
) -> Result<Demonstration> {
    let d = system.dims();
    let (n, ni, no, tt) = (d.n, d.ni, d.no, d.horizon);
    if z.len() != n * (tt + 1) {
        return Err(dim("nominal states", n * (tt + 1), z.len()));
    }
    if v.len() != ni * tt {
        return Err(dim("nominal inputs", ni * tt, v.len()));
    }
    if k.matrix.shape() != (ni * tt, no * tt) {
        return Err(dim("gain rows", ni * tt, k.matrix.nrows()));
    }
    if noise.w.len() != tt || noise.e.len() != tt + 1 {
        return Err(dim("noise sequence length", tt, noise.w.len()));
    }
    let c = system.c_blocks();
    let mut xs = Vector::zeros(n * (tt + 1));
    let mut us = Vector::zeros(ni * tt);
    let mut ys = Vector::zeros(no * (tt + 1));
    let mut innov = Vector::zeros(no * tt);
    let mut x = system.x0() + &noise.x0;
    #[allow(clippy::needless_range_loop)]
    for t in 0..=tt {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "rollout state".into(),
                t,
            });
        }
        xs.rows_mut(t * n, n).copy_from(&x);
        let y = &c[t] * &x + &noise.e[t];
        ys.rows_mut(t * no, no).copy_from(&y);
        if t == tt {
            break;
        }
        let zt = z.rows(t * n, n);
        innov.rows_mut(t * no, no).copy_from(&(&y - &c[t] * zt));
        let gain_row = k.matrix.view((t * ni, 0), (ni, no * (t + 1)));
        let u = v.rows(t * ni, ni) + gain_row * innov.rows(0, no * (t + 1));
        us.rows_mut(t * ni, ni).copy_from(&u);
        x = system.step(t, &x, &u) + &noise.w[t];
    }
    Ok(Demonstration {
        u: us,
        y: ys,
        x: Some(xs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub demos: Vec<Demonstration>,
    pub corrupted: bool,
    pub epsilon: f64,
    pub rng_seed: u64,
    pub strategy: NoiseStrategy,
    /// SHA-256 of the generating solution's JSON.
    pub solution_hash: String,
    /// Uncorrupted demonstrations, kept when `corrupted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<Vec<Demonstration>>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.demos.len()
    }
    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

/// Independent stream per demonstration; `family` separates noise from corruption.
fn stream(seed: u64, family: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((family << 40) | index as u64);
    r
}

pub fn solution_hash(solution: &ForwardSolution) -> Result<String> {
    let bytes = serde_json::to_vec(solution)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `count` rollouts of one nominal plan and gain, each with its own noise stream.
pub fn generate_demoset(
    solution: &ForwardSolution,
    system: &System,
    noise: &NoiseModel,
    count: usize,
    strategy: NoiseStrategy,
    seed: u64,
) -> Result<DemoSet> {
    if count == 0 {
        return Err(Error::Validation("demonstration count must be at least 1".into()));
    }
    let d = system.dims();
    let demos = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, 1, i);
            let ns = sample_noise(noise, &d, strategy, &mut rng);
            rollout(system, &solution.z, &solution.v, &solution.gain, &ns)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoSet {
        demos,
        corrupted: false,
        epsilon: 0.0,
        rng_seed: seed,
        strategy,
        solution_hash: solution_hash(solution)?,
        clean: None,
    })
}

/// Adds i.i.d. uniform `[-epsilon, epsilon]` errors to every `u` and `y` component.
pub fn perturb(set: &DemoSet, epsilon: f64, seed: u64) -> Result<DemoSet> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Validation(format!(
            "epsilon must be finite and nonnegative, found {epsilon}"
        )));
    }
    let base = set.clean.clone().unwrap_or_else(|| set.demos.clone());
    let demos = base
        .par_iter()
        .enumerate()
        .map(|(i, dm)| {
            let mut rng = stream(seed, 2, i);
            let mut jitter = |x: &Vector| {
                if epsilon == 0.0 {
                    x.clone()
                } else {
                    x.map(|v| v + rng.gen_range(-epsilon..=epsilon))
                }
            };
            let u = jitter(&dm.u);
            let y = jitter(&dm.y);
            Demonstration { u, y, x: dm.x.clone() }
        })
        .collect();
    Ok(DemoSet {
        demos,
        corrupted: epsilon > 0.0,
        epsilon,
        rng_seed: set.rng_seed,
        strategy: set.strategy,
        solution_hash: set.solution_hash.clone(),
        clean: if epsilon > 0.0 { Some(base) } else { None },
    })
}
