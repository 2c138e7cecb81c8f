//! Dynamics, noise sets, costs and constraint families.
//!
//! Every stacked vector uses the layout `x_0..x_T` followed by `u_0..u_{T-1}`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{all_finite, block_diag, serde_mat, serde_vec, Mat, Vector};

/// Problem dimensions and the stacked (x, u) index map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub ni: usize,
    pub no: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn stacked_len(&self) -> usize {
        self.n * (self.horizon + 1) + self.ni * self.horizon
    }
    pub fn x_index(&self, t: usize, i: usize) -> usize {
        t * self.n + i
    }
    pub fn u_index(&self, t: usize, j: usize) -> usize {
        self.n * (self.horizon + 1) + t * self.ni + j
    }
    pub fn u_offset(&self) -> usize {
        self.n * (self.horizon + 1)
    }
    /// Length of the stacked noise vector `(x0 perturbation, w_0..w_{T-1}, e_0..e_{T-1})`.
    pub fn noise_len(&self) -> usize {
        self.n + self.n * self.horizon + self.no * self.horizon
    }
}

/// Linear time-varying system `x_{t+1} = A_t x_t + B_t u_t`, `y_t = C_t x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvSystem {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(with = "serde_mat::vec")]
    pub a: Vec<Mat>,
    #[serde(with = "serde_mat::vec")]
    pub b: Vec<Mat>,
    /// `T + 1` output blocks.
    #[serde(with = "serde_mat::vec")]
    pub c: Vec<Mat>,
    #[serde(with = "serde_vec")]
    pub x0: Vector,
}

impl LtvSystem {
    pub fn new(a: Vec<Mat>, b: Vec<Mat>, c: Vec<Mat>, x0: Vector) -> Result<Self> {
        let horizon = a.len();
        let state_dim = x0.len();
        let input_dim = b.first().map_or(0, |m| m.ncols());
        let output_dim = c.first().map_or(0, |m| m.nrows());
        let sys = LtvSystem {
            horizon,
            state_dim,
            input_dim,
            output_dim,
            a,
            b,
            c,
            x0,
        };
        let mut report = ValidationReport::default();
        sys.check(&mut report);
        report.into_result()?;
        Ok(sys)
    }

    /// Repeats the same `(A, B, C)` over the horizon.
    pub fn time_invariant(a: Mat, b: Mat, c: Mat, x0: Vector, horizon: usize) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon], vec![c; horizon + 1], x0)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.state_dim,
            ni: self.input_dim,
            no: self.output_dim,
            horizon: self.horizon,
        }
    }

    fn check(&self, r: &mut ValidationReport) {
        let (n, ni, no, t) = (self.state_dim, self.input_dim, self.output_dim, self.horizon);
        if t == 0 {
            r.push("system.horizon", "horizon must be at least 1");
        }
        if self.b.len() != t {
            r.push("system.b", format!("expected {t} blocks, found {}", self.b.len()));
        }
        if self.c.len() != t + 1 {
            r.push("system.c", format!("expected {} blocks, found {}", t + 1, self.c.len()));
        }
        for (k, m) in self.a.iter().enumerate() {
            if m.shape() != (n, n) {
                r.push(
                    format!("system.a[{k}]"),
                    format!("expected {n}x{n}, found {}x{}", m.nrows(), m.ncols()),
                );
            }
            if !all_finite(m) {
                r.push(format!("system.a[{k}]"), "non-finite entry");
            }
        }
        for (k, m) in self.b.iter().enumerate() {
            if m.shape() != (n, ni) {
                r.push(
                    format!("system.b[{k}]"),
                    format!("expected {n}x{ni}, found {}x{}", m.nrows(), m.ncols()),
                );
            }
            if !all_finite(m) {
                r.push(format!("system.b[{k}]"), "non-finite entry");
            }
        }
        for (k, m) in self.c.iter().enumerate() {
            if m.shape() != (no, n) {
                r.push(
                    format!("system.c[{k}]"),
                    format!("expected {no}x{n}, found {}x{}", m.nrows(), m.ncols()),
                );
            }
            if !all_finite(m) {
                r.push(format!("system.c[{k}]"), "non-finite entry");
            }
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            r.push("system.x0", "non-finite entry");
        }
    }
}

/// Planar double integrator with `pos_dim` position axes: state `(p, p')`, input `p''`.
pub fn double_integrator(dt: f64, pos_dim: usize, horizon: usize, x0: Vector, output: OutputKind) -> Result<LtvSystem> {
    let n = 2 * pos_dim;
    let mut a = Mat::identity(n, n);
    let mut b = Mat::zeros(n, pos_dim);
    for i in 0..pos_dim {
        a[(i, pos_dim + i)] = dt;
        b[(i, i)] = 0.5 * dt * dt;
        b[(pos_dim + i, i)] = dt;
    }
    let c = output.matrix(n, pos_dim);
    if x0.len() != n {
        return Err(dim("double integrator x0", n, x0.len()));
    }
    LtvSystem::time_invariant(a, b, c, x0, horizon)
}

/// What the demonstrator observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// `y_t = x_t`.
    #[default]
    State,
    /// `y_t` is the leading `pos_dim` state components.
    Position,
}

impl OutputKind {
    pub fn matrix(self, n: usize, pos_dim: usize) -> Mat {
        match self {
            OutputKind::State => Mat::identity(n, n),
            OutputKind::Position => Mat::from_fn(pos_dim, n, |i, j| if i == j { 1.0 } else { 0.0 }),
        }
    }
}

/// Discrete-time nonlinear dynamics `x_{t+1} = f_t(x_t, u_t)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector;
    /// Analytic `(df/dx, df/du)`; `None` selects central differences.
    fn jacobian(&self, _t: usize, _x: &Vector, _u: &Vector) -> Option<(Mat, Mat)> {
        None
    }
    fn name(&self) -> &str {
        "custom"
    }
}

/// Kinematic unicycle: state `(p_x, p_y, heading, speed)`, input `(turn rate, acceleration)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unicycle {
    pub dt: f64,
}

impl Dynamics for Unicycle {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn step(&self, _t: usize, x: &Vector, u: &Vector) -> Vector {
        let (psi, v) = (x[2], x[3]);
        Vector::from_vec(vec![
            x[0] + v * psi.cos() * self.dt,
            x[1] + v * psi.sin() * self.dt,
            psi + u[0] * self.dt,
            v + u[1] * self.dt,
        ])
    }
    fn jacobian(&self, _t: usize, x: &Vector, _u: &Vector) -> Option<(Mat, Mat)> {
        let (psi, v, dt) = (x[2], x[3], self.dt);
        let mut a = Mat::identity(4, 4);
        a[(0, 2)] = -v * psi.sin() * dt;
        a[(0, 3)] = psi.cos() * dt;
        a[(1, 2)] = v * psi.cos() * dt;
        a[(1, 3)] = psi.sin() * dt;
        let mut b = Mat::zeros(4, 2);
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        Some((a, b))
    }
    fn name(&self) -> &str {
        "unicycle"
    }
}

impl Dynamics for LtvSystem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector {
        &self.a[t] * x + &self.b[t] * u
    }
    fn jacobian(&self, t: usize, _x: &Vector, _u: &Vector) -> Option<(Mat, Mat)> {
        Some((self.a[t].clone(), self.b[t].clone()))
    }
    fn name(&self) -> &str {
        "ltv"
    }
}

/// Nonlinear dynamics with a linear time-varying output map.
#[derive(Clone)]
pub struct NonlinearSystem {
    pub dynamics: Arc<dyn Dynamics>,
    pub horizon: usize,
    pub output_dim: usize,
    /// `T + 1` output blocks.
    pub c: Vec<Mat>,
    pub x0: Vector,
}

impl fmt::Debug for NonlinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearSystem")
            .field("dynamics", &self.dynamics.name())
            .field("horizon", &self.horizon)
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl NonlinearSystem {
    pub fn new(dynamics: Arc<dyn Dynamics>, horizon: usize, c: Vec<Mat>, x0: Vector) -> Result<Self> {
        let output_dim = c.first().map_or(0, |m| m.nrows());
        let sys = NonlinearSystem {
            dynamics,
            horizon,
            output_dim,
            c,
            x0,
        };
        let mut r = ValidationReport::default();
        sys.check(&mut r);
        r.into_result()?;
        Ok(sys)
    }

    pub fn from_ltv(ltv: &LtvSystem) -> Self {
        NonlinearSystem {
            dynamics: Arc::new(ltv.clone()),
            horizon: ltv.horizon,
            output_dim: ltv.output_dim,
            c: ltv.c.clone(),
            x0: ltv.x0.clone(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.dynamics.state_dim(),
            ni: self.dynamics.input_dim(),
            no: self.output_dim,
            horizon: self.horizon,
        }
    }

    fn check(&self, r: &mut ValidationReport) {
        let d = self.dims();
        if d.horizon == 0 {
            r.push("system.horizon", "horizon must be at least 1");
        }
        if self.x0.len() != d.n {
            r.push("system.x0", format!("expected length {}, found {}", d.n, self.x0.len()));
        }
        if self.c.len() != d.horizon + 1 {
            r.push(
                "system.c",
                format!("expected {} blocks, found {}", d.horizon + 1, self.c.len()),
            );
        }
        for (k, m) in self.c.iter().enumerate() {
            if m.shape() != (d.no, d.n) {
                r.push(
                    format!("system.c[{k}]"),
                    format!("expected {}x{}, found {}x{}", d.no, d.n, m.nrows(), m.ncols()),
                );
            }
        }
    }

    pub fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector {
        self.dynamics.step(t, x, u)
    }

    /// `(df/dx, df/du)` at `(x, u)`, analytic when available.
    pub fn jacobians(&self, t: usize, x: &Vector, u: &Vector) -> (Mat, Mat) {
        self.dynamics
            .jacobian(t, x, u)
            .unwrap_or_else(|| finite_difference_jacobian(self.dynamics.as_ref(), t, x, u))
    }

    /// Simulates the noise-free dynamics from `x0` under the stacked inputs `v`.
    pub fn simulate(&self, v: &Vector) -> Vector {
        let d = self.dims();
        let mut z = Vector::zeros(d.n * (d.horizon + 1));
        z.rows_mut(0, d.n).copy_from(&self.x0);
        for t in 0..d.horizon {
            let x = z.rows(t * d.n, d.n).into_owned();
            let u = v.rows(t * d.ni, d.ni).into_owned();
            let nx = self.step(t, &x, &u);
            z.rows_mut((t + 1) * d.n, d.n).copy_from(&nx);
        }
        z
    }
}

/// Central differences with step `1e-6 * max(1, |component|)`.
pub fn finite_difference_jacobian(f: &dyn Dynamics, t: usize, x: &Vector, u: &Vector) -> (Mat, Mat) {
    let n = x.len();
    let m = u.len();
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    for i in 0..n {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let col = (f.step(t, &xp, u) - f.step(t, &xm, u)) / (2.0 * h);
        a.set_column(i, &col);
    }
    for j in 0..m {
        let h = 1e-6 * u[j].abs().max(1.0);
        let (mut up, mut um) = (u.clone(), u.clone());
        up[j] += h;
        um[j] -= h;
        let col = (f.step(t, x, &up) - f.step(t, x, &um)) / (2.0 * h);
        b.set_column(j, &col);
    }
    (a, b)
}

/// Jacobian linearization about a reference trajectory. `states` needs at least
/// `T` entries and `inputs` exactly `T`.
pub fn linearize(system: &NonlinearSystem, states: &[Vector], inputs: &[Vector]) -> Result<LtvSystem> {
    let d = system.dims();
    if states.len() < d.horizon {
        return Err(dim("linearize reference states", d.horizon, states.len()));
    }
    if inputs.len() != d.horizon {
        return Err(dim("linearize reference inputs", d.horizon, inputs.len()));
    }
    let mut a = Vec::with_capacity(d.horizon);
    let mut b = Vec::with_capacity(d.horizon);
    for t in 0..d.horizon {
        let (at, bt) = system.jacobians(t, &states[t], &inputs[t]);
        if !all_finite(&at) || !all_finite(&bt) {
            return Err(Error::NonFinite {
                what: "linearization Jacobian".into(),
                t,
            });
        }
        a.push(at);
        b.push(bt);
    }
    LtvSystem::new(a, b, system.c.clone(), system.x0.clone())
}

/// Either dynamics representation.
#[derive(Debug, Clone)]
pub enum System {
    Ltv(LtvSystem),
    Nonlinear(NonlinearSystem),
}

impl System {
    pub fn dims(&self) -> Dims {
        match self {
            System::Ltv(s) => s.dims(),
            System::Nonlinear(s) => s.dims(),
        }
    }
    pub fn x0(&self) -> &Vector {
        match self {
            System::Ltv(s) => &s.x0,
            System::Nonlinear(s) => &s.x0,
        }
    }
    pub fn c_blocks(&self) -> &[Mat] {
        match self {
            System::Ltv(s) => &s.c,
            System::Nonlinear(s) => &s.c,
        }
    }
    pub fn step(&self, t: usize, x: &Vector, u: &Vector) -> Vector {
        match self {
            System::Ltv(s) => &s.a[t] * x + &s.b[t] * u,
            System::Nonlinear(s) => s.step(t, x, u),
        }
    }
    pub fn as_ltv(&self) -> Option<&LtvSystem> {
        match self {
            System::Ltv(s) => Some(s),
            System::Nonlinear(_) => None,
        }
    }
    pub fn as_nonlinear(&self) -> NonlinearSystem {
        match self {
            System::Ltv(s) => NonlinearSystem::from_ltv(s),
            System::Nonlinear(s) => s.clone(),
        }
    }
}

/// Infinity-norm ball radii of the noise channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    pub w_radius: f64,
    pub e_radius: f64,
    /// Uncertainty in the initial state; zero keeps `x_0` exact.
    #[serde(default)]
    pub x0_radius: f64,
}

impl NoiseModel {
    pub fn new(w_radius: f64, e_radius: f64) -> Self {
        NoiseModel {
            w_radius,
            e_radius,
            x0_radius: 0.0,
        }
    }
    pub fn is_zero(&self) -> bool {
        self.w_radius == 0.0 && self.e_radius == 0.0 && self.x0_radius == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostKind {
    J1,
    J2,
    J3,
    #[serde(rename = "custom")]
    Custom,
}

/// `1/2 p^T Q p + q^T p` over the stacked (x, u) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomQuadratic {
    #[serde(with = "serde_mat")]
    pub q: Mat,
    pub lin: Vec<f64>,
}

fn default_input_weight() -> f64 {
    1e-3
}

/// Trajectory cost. The position of `x_t` is `x_t[position_indices]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub position_indices: Vec<usize>,
    /// Terminal reference for J3; without it J3 pulls toward the trajectory's own `p_T`.
    #[serde(default)]
    pub goal: Option<Vec<f64>>,
    /// Weight on `sum_t |u_t|^2`, keeping the nominal problem strictly convex in `u`.
    #[serde(default = "default_input_weight")]
    pub input_weight: f64,
    #[serde(default)]
    pub custom: Option<CustomQuadratic>,
}

/// Cost as `1/2 p^T H p + f^T p + constant`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub h: Mat,
    pub f: Vector,
    pub constant: f64,
}

impl QuadraticCost {
    pub fn value(&self, p: &Vector) -> f64 {
        0.5 * p.dot(&(&self.h * p)) + self.f.dot(p) + self.constant
    }
    pub fn gradient(&self, p: &Vector) -> Vector {
        &self.h * p + &self.f
    }
}

impl CostSpec {
    pub fn new(kind: CostKind, position_indices: Vec<usize>) -> Self {
        CostSpec {
            kind,
            position_indices,
            goal: None,
            input_weight: default_input_weight(),
            custom: None,
        }
    }

    pub fn with_goal(mut self, goal: Vec<f64>) -> Self {
        self.goal = Some(goal);
        self
    }

    /// Matrix extracting `p_t` from `x_t`.
    pub fn position_selector(&self, n: usize) -> Mat {
        let k = self.position_indices.len();
        Mat::from_fn(k, n, |r, c| if self.position_indices[r] == c { 1.0 } else { 0.0 })
    }

    pub fn quadratic(&self, d: &Dims) -> Result<QuadraticCost> {
        let len = d.stacked_len();
        let mut h = Mat::zeros(len, len);
        let mut f = Vector::zeros(len);
        let mut constant = 0.0;
        let pos = &self.position_indices;
        let tt = d.horizon;
        if self.kind != CostKind::Custom {
            // Path length: sum_t |p_{t+1} - p_t|^2.
            for t in 0..tt {
                for &i in pos {
                    let (a, b) = (d.x_index(t, i), d.x_index(t + 1, i));
                    h[(a, a)] += 2.0;
                    h[(b, b)] += 2.0;
                    h[(a, b)] -= 2.0;
                    h[(b, a)] -= 2.0;
                }
            }
        }
        match self.kind {
            CostKind::J1 | CostKind::J2 => {
                let axes = if self.kind == CostKind::J1 { 1 } else { 2 };
                if pos.len() < axes {
                    return Err(Error::Validation(format!(
                        "cost {:?} needs {axes} position axes",
                        self.kind
                    )));
                }
                for t in 0..tt {
                    for &i in &pos[..axes] {
                        f[d.x_index(t, i)] -= 1.0;
                    }
                }
            }
            CostKind::J3 => {
                let w = 2.0 / tt as f64;
                match &self.goal {
                    Some(g) => {
                        if g.len() != pos.len() {
                            return Err(dim("cost.goal", pos.len(), g.len()));
                        }
                        for t in 0..tt {
                            for (k, &i) in pos.iter().enumerate() {
                                let a = d.x_index(t, i);
                                h[(a, a)] += w;
                                f[a] -= w * g[k];
                                constant += 0.5 * w * g[k] * g[k];
                            }
                        }
                    }
                    None => {
                        for t in 0..tt {
                            for &i in pos {
                                let (a, b) = (d.x_index(t, i), d.x_index(tt, i));
                                h[(a, a)] += w;
                                h[(b, b)] += w;
                                h[(a, b)] -= w;
                                h[(b, a)] -= w;
                            }
                        }
                    }
                }
            }
            CostKind::Custom => {
                let c = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| Error::Validation("custom cost without quadratic form".into()))?;
                if c.q.shape() != (len, len) {
                    return Err(dim("cost.custom.q", len, c.q.nrows()));
                }
                if c.lin.len() != len {
                    return Err(dim("cost.custom.lin", len, c.lin.len()));
                }
                h += &c.q;
                f += Vector::from_column_slice(&c.lin);
            }
        }
        for t in 0..tt {
            for j in 0..d.ni {
                let a = d.u_index(t, j);
                h[(a, a)] += 2.0 * self.input_weight;
            }
        }
        Ok(QuadraticCost { h, f, constant })
    }

    fn check(&self, d: &Dims, r: &mut ValidationReport) {
        for &i in &self.position_indices {
            if i >= d.n {
                r.push(
                    "cost.position_indices",
                    format!("index {i} out of range for state dimension {}", d.n),
                );
            }
        }
        if self.input_weight < 0.0 || !self.input_weight.is_finite() {
            r.push("cost.input_weight", "must be finite and nonnegative");
        }
        if let Some(c) = &self.custom {
            let asym = (&c.q - c.q.transpose()).amax();
            if asym > 1e-9 * (1.0 + c.q.amax()) {
                r.push("cost.custom.q", "not symmetric");
            } else if c.q.nrows() > 0 {
                let min_eig = c.q.clone().symmetric_eigenvalues().min();
                if min_eig < -1e-9 * (1.0 + c.q.amax()) {
                    r.push(
                        "cost.custom.q",
                        format!("not positive semidefinite (min eigenvalue {min_eig:e})"),
                    );
                }
            }
        }
    }
}

/// `a^T p <= b` over the stacked (x, u) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    #[serde(with = "serde_vec")]
    pub a: Vector,
    pub b: f64,
}

/// Constraints the learner already knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KnownConstraints {
    pub halfspaces: Vec<Halfspace>,
}

impl KnownConstraints {
    pub fn push(&mut self, a: Vector, b: f64) {
        self.halfspaces.push(Halfspace { a, b });
    }

    /// `lower <= x_t[i] <= upper` for each listed time.
    pub fn add_state_bounds(&mut self, d: &Dims, i: usize, times: &[usize], lower: Option<f64>, upper: Option<f64>) {
        for &t in times {
            let mut a = Vector::zeros(d.stacked_len());
            a[d.x_index(t, i)] = 1.0;
            if let Some(u) = upper {
                self.push(a.clone(), u);
            }
            if let Some(l) = lower {
                self.push(-a, -l);
            }
        }
    }

    /// Elementwise `lower <= u_t <= upper` at every step.
    pub fn add_input_box(&mut self, d: &Dims, lower: &[f64], upper: &[f64]) {
        for t in 0..d.horizon {
            for j in 0..d.ni {
                let mut a = Vector::zeros(d.stacked_len());
                a[d.u_index(t, j)] = 1.0;
                self.push(a.clone(), upper[j]);
                self.push(-a, -lower[j]);
            }
        }
    }

    /// Box on selected components of `x_T`.
    pub fn add_terminal_box(&mut self, d: &Dims, indices: &[usize], lower: &[f64], upper: &[f64]) {
        for (k, &i) in indices.iter().enumerate() {
            self.add_state_bounds(d, i, &[d.horizon], Some(lower[k]), Some(upper[k]));
        }
    }

    fn check(&self, d: &Dims, r: &mut ValidationReport) {
        for (k, h) in self.halfspaces.iter().enumerate() {
            if h.a.len() != d.stacked_len() {
                r.push(
                    format!("known[{k}]"),
                    format!("row length {} != stacked length {}", h.a.len(), d.stacked_len()),
                );
            } else if h.a.iter().all(|&v| v == 0.0) {
                r.push(format!("known[{k}]"), "zero row");
            }
            if !h.b.is_finite() || !h.a.iter().all(|v| v.is_finite()) {
                r.push(format!("known[{k}]"), "non-finite data");
            }
        }
    }
}

/// Affine map `constant + coeffs . theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParam {
    pub constant: f64,
    pub coeffs: Vec<f64>,
}

impl AffineParam {
    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Avoid half-space `normal . p <= offset(theta)` in position space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub normal: Vec<f64>,
    pub offset: AffineParam,
}

/// Obstacle region `{p : normal_b . p >= offset_b(theta) for every face b}`;
/// a trajectory avoids it at time t when some face's half-space holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub faces: Vec<Face>,
    pub times: Vec<usize>,
}

impl Obstacle {
    /// Axis-aligned planar box with `theta[k..k+4] = (x_lo, x_hi, y_lo, y_hi)`.
    /// Faces are ordered left, right, bottom, top.
    pub fn axis_box(param_dim: usize, k: usize, times: Vec<usize>) -> Self {
        let coeff = |idx: usize, s: f64| {
            let mut c = vec![0.0; param_dim];
            c[idx] = s;
            AffineParam {
                constant: 0.0,
                coeffs: c,
            }
        };
        Obstacle {
            faces: vec![
                Face {
                    normal: vec![1.0, 0.0],
                    offset: coeff(k, 1.0),
                },
                Face {
                    normal: vec![-1.0, 0.0],
                    offset: coeff(k + 1, -1.0),
                },
                Face {
                    normal: vec![0.0, 1.0],
                    offset: coeff(k + 2, 1.0),
                },
                Face {
                    normal: vec![0.0, -1.0],
                    offset: coeff(k + 3, -1.0),
                },
            ],
            times,
        }
    }

    /// True when `p` lies in the closed obstacle region at `theta`.
    pub fn contains(&self, p: &[f64], theta: &[f64]) -> bool {
        self.faces.iter().all(|f| dot(&f.normal, p) >= f.offset.eval(theta))
    }

    /// True when `p` lies in the open interior at `theta`.
    pub fn contains_strict(&self, p: &[f64], theta: &[f64]) -> bool {
        self.faces.iter().all(|f| dot(&f.normal, p) > f.offset.eval(theta))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unknown constraints: a conjunction over obstacles and times of disjunctions over faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParametricFamily {
    pub param_dim: usize,
    pub param_lower: Vec<f64>,
    pub param_upper: Vec<f64>,
    pub position_indices: Vec<usize>,
    pub obstacles: Vec<Obstacle>,
}

/// One disjunct `a . p - c(theta) <= 0` over the stacked (x, u) vector.
#[derive(Debug, Clone)]
pub struct DisjunctRow {
    pub face: usize,
    pub a: Vector,
    pub offset: AffineParam,
}

impl DisjunctRow {
    pub fn value(&self, p: &Vector, theta: &[f64]) -> f64 {
        self.a.dot(p) - self.offset.eval(theta)
    }
}

/// The disjunction that must hold for one obstacle at one time.
#[derive(Debug, Clone)]
pub struct Conjunct {
    pub obstacle: usize,
    pub time: usize,
    pub disjuncts: Vec<DisjunctRow>,
}

impl ParametricFamily {
    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn conjuncts(&self, d: &Dims) -> Vec<Conjunct> {
        let mut out = Vec::new();
        for (o, obs) in self.obstacles.iter().enumerate() {
            for &t in &obs.times {
                let disjuncts = obs
                    .faces
                    .iter()
                    .enumerate()
                    .map(|(b, face)| {
                        let mut a = Vector::zeros(d.stacked_len());
                        for (k, &i) in self.position_indices.iter().enumerate() {
                            a[d.x_index(t, i)] = face.normal[k];
                        }
                        DisjunctRow {
                            face: b,
                            a,
                            offset: face.offset.clone(),
                        }
                    })
                    .collect();
                out.push(Conjunct {
                    obstacle: o,
                    time: t,
                    disjuncts,
                });
            }
        }
        out
    }

    /// True when `p` avoids every obstacle at `theta` (boundary counts as safe).
    pub fn position_is_safe(&self, p: &[f64], theta: &[f64]) -> bool {
        self.obstacles.iter().all(|o| !o.contains_strict(p, theta))
    }

    fn check(&self, d: &Dims, r: &mut ValidationReport) {
        if self.param_lower.len() != self.param_dim || self.param_upper.len() != self.param_dim {
            r.push("unknown.param_box", "bounds length differs from param_dim");
        }
        for (k, (lo, hi)) in self.param_lower.iter().zip(&self.param_upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                r.push("unknown.param_box", format!("component {k} unbounded"));
            } else if lo > hi {
                r.push("unknown.param_box", format!("component {k}: lower {lo} > upper {hi}"));
            }
        }
        for &i in &self.position_indices {
            if i >= d.n {
                r.push("unknown.position_indices", format!("index {i} out of range"));
            }
        }
        for (o, obs) in self.obstacles.iter().enumerate() {
            if obs.faces.is_empty() {
                r.push(format!("unknown.obstacles[{o}]"), "no faces");
            }
            for (b, f) in obs.faces.iter().enumerate() {
                if f.normal.len() != self.position_indices.len() {
                    r.push(
                        format!("unknown.obstacles[{o}].faces[{b}]"),
                        "normal length differs from position dimension",
                    );
                }
                if f.offset.coeffs.len() != self.param_dim {
                    r.push(
                        format!("unknown.obstacles[{o}].faces[{b}]"),
                        "offset coefficient length differs from param_dim",
                    );
                }
            }
            for &t in &obs.times {
                if t > d.horizon {
                    r.push(
                        format!("unknown.obstacles[{o}].times"),
                        format!("time {t} beyond horizon"),
                    );
                }
            }
        }
    }
}

/// `calA`, `calB`, `calC` and the downshift `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperators {
    pub dims: Dims,
    /// `nT x nT`, blocks `A_0..A_{T-1}`.
    pub cal_a: Mat,
    /// `nT x n_iT`, blocks `B_0..B_{T-1}`.
    pub cal_b: Mat,
    /// `n_oT x nT`, blocks `C_0..C_{T-1}`.
    pub cal_c: Mat,
    /// `nT x nT` with identity blocks on the first block subdiagonal.
    pub z: Mat,
    /// `A_{T-1}`, `B_{T-1}` for propagating to `x_T`.
    pub a_last: Mat,
    pub b_last: Mat,
}

pub fn build_block_operators(system: &LtvSystem) -> Result<BlockOperators> {
    let mut r = ValidationReport::default();
    system.check(&mut r);
    r.into_result()?;
    let d = system.dims();
    let nt = d.n * d.horizon;
    let mut z = Mat::zeros(nt, nt);
    for k in d.n..nt {
        z[(k, k - d.n)] = 1.0;
    }
    Ok(BlockOperators {
        dims: d,
        cal_a: block_diag(&system.a),
        cal_b: block_diag(&system.b),
        cal_c: block_diag(&system.c[..d.horizon]),
        z,
        a_last: system.a[d.horizon - 1].clone(),
        b_last: system.b[d.horizon - 1].clone(),
    })
}

/// A complete forward/inverse problem.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub system: System,
    pub noise: NoiseModel,
    pub cost: CostSpec,
    pub known: KnownConstraints,
    pub unknown: ParametricFamily,
    pub theta_star: Option<Vector>,
}

impl ProblemInstance {
    pub fn dims(&self) -> Dims {
        self.system.dims()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            let msg = self
                .violations
                .iter()
                .map(|v| format!("{}: {}", v.field, v.message))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Validation(msg))
        }
    }
}

pub fn validate_instance(inst: &ProblemInstance) -> ValidationReport {
    let mut r = ValidationReport::default();
    match &inst.system {
        System::Ltv(s) => s.check(&mut r),
        System::Nonlinear(s) => s.check(&mut r),
    }
    let d = inst.dims();
    for (name, v) in [
        ("noise.w_radius", inst.noise.w_radius),
        ("noise.e_radius", inst.noise.e_radius),
        ("noise.x0_radius", inst.noise.x0_radius),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            r.push(name, format!("radius must be finite and nonnegative, found {v}"));
        }
    }
    inst.cost.check(&d, &mut r);
    inst.known.check(&d, &mut r);
    inst.unknown.check(&d, &mut r);
    if let Some(th) = &inst.theta_star {
        if th.len() != inst.unknown.param_dim {
            r.push(
                "theta_star",
                format!("length {} != param_dim {}", th.len(), inst.unknown.param_dim),
            );
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downshift_for_scalar_two_step() {
        let sys = LtvSystem::time_invariant(
            Mat::from_element(1, 1, 2.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Vector::zeros(1),
            2,
        )
        .unwrap();
        let ops = build_block_operators(&sys).unwrap();
        assert_eq!(ops.cal_a, Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]));
        assert_eq!(ops.z, Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn downshift_places_identity_blocks_on_subdiagonal() {
        let sys = LtvSystem::time_invariant(
            Mat::identity(2, 2),
            Mat::identity(2, 1),
            Mat::identity(2, 2),
            Vector::zeros(2),
            3,
        )
        .unwrap();
        let z = build_block_operators(&sys).unwrap().z;
        assert_eq!(z.shape(), (6, 6));
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i >= 2 && j == i - 2 { 1.0 } else { 0.0 };
                assert_eq!(z[(i, j)], expect, "Z[{i},{j}]");
            }
        }
    }

    #[test]
    fn double_integrator_block_matches_hand_discretization() {
        let sys = double_integrator(0.1, 2, 5, Vector::zeros(4), OutputKind::State).unwrap();
        let ops = build_block_operators(&sys).unwrap();
        let blk = Mat::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        for t in 0..5 {
            let v = ops.cal_a.view((4 * t, 4 * t), (4, 4)).into_owned();
            assert!((v - &blk).amax() < 1e-15);
        }
        assert_eq!(ops.cal_a.shape(), (20, 20));
    }

    #[test]
    fn wrong_b_block_is_reported_with_timestep() {
        let mut sys = double_integrator(0.1, 2, 3, Vector::zeros(4), OutputKind::State).unwrap();
        sys.b[1] = Mat::zeros(4, 3);
        let inst = ProblemInstance {
            system: System::Ltv(sys),
            noise: NoiseModel::default(),
            cost: CostSpec::new(CostKind::J1, vec![0, 1]),
            known: KnownConstraints::default(),
            unknown: ParametricFamily::default(),
            theta_star: None,
        };
        let r = validate_instance(&inst);
        assert_eq!(r.violations.len(), 1, "{r:?}");
        assert_eq!(r.violations[0].field, "system.b[1]");
    }

    #[test]
    fn inverted_param_box_is_reported() {
        let sys = double_integrator(0.1, 2, 3, Vector::zeros(4), OutputKind::State).unwrap();
        let fam = ParametricFamily {
            param_dim: 4,
            param_lower: vec![0.0, 2.0, 0.0, 0.0],
            param_upper: vec![1.0, 1.0, 1.0, 1.0],
            position_indices: vec![0, 1],
            obstacles: vec![Obstacle::axis_box(4, 0, vec![1, 2])],
        };
        let inst = ProblemInstance {
            system: System::Ltv(sys),
            noise: NoiseModel::default(),
            cost: CostSpec::new(CostKind::J1, vec![0, 1]),
            known: KnownConstraints::default(),
            unknown: fam,
            theta_star: None,
        };
        let r = validate_instance(&inst);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].field.starts_with("unknown"));
    }

    #[test]
    fn j1_gradient_matches_finite_differences() {
        let sys = double_integrator(0.2, 2, 4, Vector::zeros(4), OutputKind::State).unwrap();
        let d = sys.dims();
        for kind in [CostKind::J1, CostKind::J2, CostKind::J3] {
            let spec = CostSpec::new(kind, vec![0, 1]);
            let q = spec.quadratic(&d).unwrap();
            let p = Vector::from_fn(d.stacked_len(), |i, _| ((i * 7 % 11) as f64) * 0.1 - 0.4);
            let direct = |p: &Vector| {
                let pos = |t: usize| Vector::from_vec(vec![p[d.x_index(t, 0)], p[d.x_index(t, 1)]]);
                let mut j = 0.0;
                for t in 0..d.horizon {
                    j += (pos(t + 1) - pos(t)).norm_squared();
                    match kind {
                        CostKind::J1 => j -= pos(t)[0],
                        CostKind::J2 => j -= pos(t)[0] + pos(t)[1],
                        _ => j += (pos(t) - pos(d.horizon)).norm_squared() / d.horizon as f64,
                    }
                }
                for k in d.u_offset()..d.stacked_len() {
                    j += spec.input_weight * p[k] * p[k];
                }
                j
            };
            assert!((q.value(&p) - direct(&p)).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn fd_jacobian_is_used_without_analytic_form() {
        #[derive(Debug)]
        struct Pend;
        impl Dynamics for Pend {
            fn state_dim(&self) -> usize {
                2
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn step(&self, _t: usize, x: &Vector, u: &Vector) -> Vector {
                Vector::from_vec(vec![x[0] + 0.1 * x[1], x[1] - 0.1 * x[0].sin() + 0.1 * u[0]])
            }
        }
        let sys = NonlinearSystem::new(Arc::new(Pend), 2, vec![Mat::identity(2, 2); 3], Vector::zeros(2)).unwrap();
        let (a, b) = sys.jacobians(0, &Vector::from_vec(vec![0.3, 0.0]), &Vector::zeros(1));
        assert!((a[(1, 0)] + 0.1 * 0.3f64.cos()).abs() < 1e-9);
        assert!((b[(1, 0)] - 0.1).abs() < 1e-9);
    }
}
