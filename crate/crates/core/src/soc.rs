//! Stochastic optimal control on the line.
//!
//! Problem: minimise `E[∫(½‖u‖² + c) dt + Φ(X_T)]` subject to
//! `dX = (f + σu) dt + σ dB`. The value `V` and the potential `φ = e^{−V}` are
//! related by Hopf–Cole; `φ` solves the linear backward equation
//! `∂_tφ + f∂_xφ + ½σ²∂_xxφ − cφ = 0`, `φ_T = e^{−Φ}`, and `u⋆ = −σ∂_xV`.
//!
//! The Lagrange multiplier `ψ` of the dynamic formulation is `log φ = −V`.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, numerical, Result};
use crate::imf::DriftModel;
use crate::path_sim::{simulate_on_grid, uniform_grid, InitLaw, PathEnsemble, SdeSpec, VectorField};
use crate::rng::stream;
use crate::stats::{variance_estimate, Estimate};

pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct SocProblem {
    /// Reference drift `f(x, t)`.
    pub ref_drift: SpaceTimeFn,
    pub sigma_of_t: TimeFn,
    /// Running cost `c(x, t)`.
    pub running_cost: SpaceTimeFn,
    /// Terminal cost `Φ(x)`.
    pub terminal_cost: TimeFn,
    pub horizon: f64,
    pub init: InitLaw,
}

impl SocProblem {
    /// `f = 0`, `σ = 1`, `c = 0`, `Φ(x) = x²/2`, `T = 1`, `X₀ = 0`.
    /// Value `V_t(x) = x²/(2(2−t)) + ½ log(2−t)`, control `u⋆ = −x/(2−t)`.
    pub fn quadratic_terminal() -> Self {
        SocProblem {
            ref_drift: Arc::new(|_, _| 0.0),
            sigma_of_t: Arc::new(|_| 1.0),
            running_cost: Arc::new(|_, _| 0.0),
            terminal_cost: Arc::new(|x| 0.5 * x * x),
            horizon: 1.0,
            init: InitLaw::Point(vec![0.0]),
        }
    }

    /// `Φ(x) = a·x` with Brownian reference: `V_t(x) = a x − a²(T−t)/2`, `u⋆ = −a`.
    pub fn linear_terminal(a: f64, horizon: f64) -> Self {
        SocProblem {
            terminal_cost: Arc::new(move |x| a * x),
            horizon,
            ..Self::quadratic_terminal()
        }
    }

    pub fn with_init(mut self, init: InitLaw) -> Self {
        self.init = init;
        self
    }

    pub fn with_terminal_cost(mut self, phi: TimeFn) -> Self {
        self.terminal_cost = phi;
        self
    }

    fn sigma_sq_integral(&self) -> f64 {
        let n = 256;
        let h = self.horizon / n as f64;
        (0..n).map(|k| (self.sigma_of_t)((k as f64 + 0.5) * h).powi(2) * h).sum()
    }
}

/// Uniform space–time grid.
#[derive(Clone, Debug)]
pub struct SpaceTimeGrid {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
}

impl SpaceTimeGrid {
    pub fn uniform(x_lo: f64, x_hi: f64, nx: usize, horizon: f64, nt: usize) -> Result<Self> {
        if nx < 3 || nt < 2 || !(x_hi > x_lo) || !(horizon > 0.0) {
            return invalid("grid needs nx ≥ 3, nt ≥ 2 and a nonempty domain");
        }
        let xs = (0..nx).map(|j| x_lo + (x_hi - x_lo) * j as f64 / (nx - 1) as f64).collect();
        Ok(SpaceTimeGrid { xs, ts: uniform_grid(horizon, nt - 1) })
    }

    pub fn dx(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }
}

/// `V[t][x]` on a space–time grid, with optional Monte-Carlo standard errors.
#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub std_err: Option<Vec<Vec<f64>>>,
}

impl ValueGrid {
    /// `φ = e^{−V}`.
    pub fn phi(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|row| row.iter().map(|v| (-v).exp()).collect()).collect()
    }

    pub fn value_at(&self, x: f64, t: f64) -> f64 {
        bilinear(&self.ts, &self.xs, |k, j| self.values[k][j], t, x)
    }

    pub fn sup_gap(&self, other: &ValueGrid) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t,x,V`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,x,V")?;
        for (k, t) in self.ts.iter().enumerate() {
            for (j, x) in self.xs.iter().enumerate() {
                writeln!(w, "{t},{x},{}", self.values[k][j])?;
            }
        }
        Ok(())
    }
}

fn locate(nodes: &[f64], x: f64) -> (usize, f64) {
    let n = nodes.len();
    if x <= nodes[0] {
        return (0, 0.0);
    }
    if x >= nodes[n - 1] {
        return (n - 2, 1.0);
    }
    let h = (nodes[n - 1] - nodes[0]) / (n - 1) as f64;
    let k = (((x - nodes[0]) / h) as usize).min(n - 2);
    (k, ((x - nodes[k]) / (nodes[k + 1] - nodes[k])).clamp(0.0, 1.0))
}

/// Bilinear interpolation on uniform nodes, clamped outside.
fn bilinear(ts: &[f64], xs: &[f64], value: impl Fn(usize, usize) -> f64, t: f64, x: f64) -> f64 {
    let (k, a) = locate(ts, t);
    let (j, b) = locate(xs, x);
    (1.0 - a) * ((1.0 - b) * value(k, j) + b * value(k, j + 1)) + a * ((1.0 - b) * value(k + 1, j) + b * value(k + 1, j + 1))
}

#[derive(Clone, Debug)]
pub struct FeynmanKacConfig {
    pub n_mc: usize,
    /// Largest Euler step; the number of steps from node `t` is `⌈(T−t)/max_dt⌉`.
    pub max_dt: f64,
    /// Latin-hypercube normals per step instead of i.i.d. draws, in independent
    /// replicates so that the standard error stays honest.
    pub stratified: bool,
    /// Pilot runs that fit a constant importance-sampling control to the tilted
    /// Brownian displacement; 0 disables the shift.
    pub pilot_rounds: usize,
}

const REPLICATES: usize = 8;

impl Default for FeynmanKacConfig {
    fn default() -> Self {
        FeynmanKacConfig { n_mc: 1000, max_dt: 1.0 / 256.0, stratified: false, pilot_rounds: 0 }
    }
}

/// `V_t(x) = −log E[exp(−∫c ds − Φ(X_T)) | X_t = x]` by uncontrolled simulation from every node.
/// The standard errors are those of `log φ` (delta method).
pub fn feynman_kac_value(problem: &SocProblem, grid: &SpaceTimeGrid, config: &FeynmanKacConfig, seed: u64) -> Result<ValueGrid> {
    if config.n_mc < 2 {
        return invalid("n_mc must be at least 2");
    }
    if config.stratified && (config.n_mc % REPLICATES != 0 || config.n_mc < 2 * REPLICATES) {
        return invalid(format!("stratified sampling needs n_mc to be a multiple of {REPLICATES}, at least {}", 2 * REPLICATES));
    }
    let (nt, nx) = (grid.ts.len(), grid.xs.len());
    let big_t = problem.horizon;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let nodes: Vec<(f64, f64)> = (0..nt * nx)
        .into_par_iter()
        .map(|node| {
            let (k, j) = (node / nx, node % nx);
            let (t0, x0) = (grid.ts[k], grid.xs[j]);
            if k == nt - 1 || t0 >= big_t {
                return ((problem.terminal_cost)(x0), 0.0);
            }
            let mut rng = stream(seed, node as u64);
            let mut shift = 0.0;
            for _ in 0..config.pilot_rounds {
                let (logw, b) = fk_paths(problem, config, x0, t0, shift, &mut rng, &normal);
                let (w, _) = normalised_weights(&logw);
                let tilted: f64 = w.iter().zip(&b).map(|(wi, bi)| wi * bi).sum();
                shift = tilted / (big_t - t0);
            }
            let (logw, _) = fk_paths(problem, config, x0, t0, shift, &mut rng, &normal);
            let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let e = if config.stratified {
                let k = config.n_mc / REPLICATES;
                let means: Vec<f64> = w.chunks_exact(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
                Estimate::from_samples(&means)
            } else {
                Estimate::from_samples(&w)
            };
            (-(e.mean.ln() + m), e.se / e.mean)
        })
        .collect();
    if let Some(k) = nodes.iter().position(|(v, _)| !v.is_finite()) {
        return numerical(format!("Feynman–Kac value non-finite at t = {}, x = {}", grid.ts[k / nx], grid.xs[k % nx]));
    }
    let values = (0..nt).map(|k| (0..nx).map(|j| nodes[k * nx + j].0).collect()).collect();
    let std_err = (0..nt).map(|k| (0..nx).map(|j| nodes[k * nx + j].1).collect()).collect();
    Ok(ValueGrid { xs: grid.xs.clone(), ts: grid.ts.clone(), values, std_err: Some(std_err) })
}

/// Paths from `(x0, t0)` under the proposal `dX = (f + σv) dt + σ dW`; returns the
/// Feynman–Kac log-weights (with the Girsanov factor for `v`) and the reference
/// Brownian displacement `B_T − B_{t0} = v(T − t0) + W_T − W_{t0}` of each path.
fn fk_paths(
    problem: &SocProblem,
    config: &FeynmanKacConfig,
    x0: f64,
    t0: f64,
    shift: f64,
    rng: &mut crate::rng::StreamRng,
    normal: &Normal,
) -> (Vec<f64>, Vec<f64>) {
    let big_t = problem.horizon;
    let n_sub = ((big_t - t0) / config.max_dt).ceil().max(1.0) as usize;
    let dt = (big_t - t0) / n_sub as f64;
    let n = config.n_mc;
    let mut x = vec![x0; n];
    let mut logw = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let sq = dt.sqrt();
    for s in 0..n_sub {
        let t = t0 + s as f64 * dt;
        if config.stratified {
            // independent Latin-hypercube replicates of size n / REPLICATES
            let m = n / REPLICATES;
            for r in 0..REPLICATES {
                perm[..m].shuffle(rng);
                for i in 0..m {
                    let u = (perm[i] as f64 + rng.gen::<f64>()) / m as f64;
                    z[r * m + i] = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
                }
            }
        } else {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
        }
        let sig = (problem.sigma_of_t)(t);
        for i in 0..n {
            let db = shift * dt + sq * z[i];
            logw[i] -= (problem.running_cost)(x[i], t) * dt + shift * sq * z[i] + 0.5 * shift * shift * dt;
            x[i] += (problem.ref_drift)(x[i], t) * dt + sig * db;
            b[i] += db;
        }
    }
    for i in 0..n {
        logw[i] -= (problem.terminal_cost)(x[i]);
    }
    (logw, b)
}

fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut b = diag[0];
    c[0] = upper[0] / b;
    rhs[0] /= b;
    for i in 1..n {
        b = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / b } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / b;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Backward solve of the linear (Hopf–Cole) equation for `φ`, returned as `V = −log φ`.
///
/// Crank–Nicolson in time (the first interval by two implicit Euler half-steps),
/// central differences in space with upwinding where the drift dominates. The
/// domain is padded by about four diffusion lengths; the padded ends use a
/// lagged log-linear condition `φ₀/φ₁ = φ₁/φ₂`, exact for linear `V`.
pub fn hjb_solve_grid(problem: &SocProblem, grid: &SpaceTimeGrid) -> Result<ValueGrid> {
    let dx = grid.dx();
    let nx = grid.xs.len();
    let nt = grid.ts.len();
    let spread = problem.sigma_sq_integral().sqrt();
    let pad = ((4.0 * spread / dx).ceil() as usize).max(2) + 2;
    let m = nx + 2 * pad;
    let xe: Vec<f64> = (0..m).map(|i| grid.xs[0] + (i as f64 - pad as f64) * dx).collect();

    let phi_t: Vec<f64> = xe.iter().map(|x| (problem.terminal_cost)(*x)).collect();
    let phi_min = phi_t.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut phi: Vec<f64> = phi_t.iter().map(|p| (-(p - phi_min)).exp()).collect();
    let mut log_scale = -phi_min;

    let mut values = vec![vec![0.0; nx]; nt];
    values[nt - 1] = grid.xs.iter().map(|x| (problem.terminal_cost)(*x)).collect();

    // Stencil (a, b, c) of L at time t.
    let stencil = |t: f64| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = 0.5 * (problem.sigma_of_t)(t).powi(2);
        let mut a = vec![0.0; m];
        let mut b = vec![0.0; m];
        let mut c = vec![0.0; m];
        for i in 1..m - 1 {
            let f = (problem.ref_drift)(xe[i], t);
            a[i] = d / (dx * dx);
            c[i] = d / (dx * dx);
            b[i] = -2.0 * d / (dx * dx) - (problem.running_cost)(xe[i], t);
            if f.abs() * dx <= 2.0 * d {
                a[i] -= f / (2.0 * dx);
                c[i] += f / (2.0 * dx);
            } else if f > 0.0 {
                c[i] += f / dx;
                b[i] -= f / dx;
            } else {
                a[i] -= f / dx;
                b[i] += f / dx;
            }
        }
        (a, b, c)
    };

    // One θ-step from φ at time t1 back to t0.
    let step = |phi: &mut Vec<f64>, t0: f64, t1: f64, theta: f64| {
        let dt = t1 - t0;
        let (a1, b1, c1) = stencil(t1);
        let (a0, b0, c0) = stencil(t0);
        let mut rhs = phi.clone();
        for i in 1..m - 1 {
            rhs[i] = phi[i] + (1.0 - theta) * dt * (a1[i] * phi[i - 1] + b1[i] * phi[i] + c1[i] * phi[i + 1]);
        }
        let rho_l = phi[0] / phi[1];
        let rho_r = phi[m - 1] / phi[m - 2];
        let mut lower = vec![0.0; m];
        let mut diag = vec![1.0; m];
        let mut upper = vec![0.0; m];
        for i in 1..m - 1 {
            lower[i] = -theta * dt * a0[i];
            diag[i] = 1.0 - theta * dt * b0[i];
            upper[i] = -theta * dt * c0[i];
        }
        upper[0] = -rho_l;
        lower[m - 1] = -rho_r;
        rhs[0] = 0.0;
        rhs[m - 1] = 0.0;
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        *phi = rhs;
    };

    for k in (0..nt - 1).rev() {
        let (t0, t1) = (grid.ts[k], grid.ts[k + 1]);
        if k == nt - 2 {
            let mid = 0.5 * (t0 + t1);
            step(&mut phi, mid, t1, 1.0);
            step(&mut phi, t0, mid, 1.0);
        } else {
            step(&mut phi, t0, t1, 0.5);
        }
        if let Some(i) = phi.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
            return numerical(format!("potential lost positivity at t = {t0}, x = {}", xe[i]));
        }
        let s = phi.iter().cloned().fold(0.0, f64::max);
        phi.iter_mut().for_each(|p| *p /= s);
        log_scale += s.ln();
        for j in 0..nx {
            values[k][j] = -(phi[j + pad].ln() + log_scale);
        }
    }
    Ok(ValueGrid { xs: grid.xs.clone(), ts: grid.ts.clone(), values, std_err: None })
}

/// Control `u(x, t)` on the line.
#[derive(Clone, Debug)]
pub enum ParamControl {
    /// Values at the nodes of a uniform `(t, x)` grid, bilinear in between, clamped outside.
    Tabular { ts: Vec<f64>, xs: Vec<f64>, values: Vec<f64> },
    /// Linear in radial-basis features per time bin.
    Features(DriftModel),
}

impl ParamControl {
    pub fn zeros(ts: Vec<f64>, xs: Vec<f64>) -> Self {
        let n = ts.len() * xs.len();
        ParamControl::Tabular { ts, xs, values: vec![0.0; n] }
    }

    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match self {
            ParamControl::Tabular { ts, xs, values } => bilinear(ts, xs, |k, j| values[k * xs.len() + j], t, x),
            ParamControl::Features(m) => m.eval1(x, t),
        }
    }

    pub fn parameters(&self) -> &[f64] {
        match self {
            ParamControl::Tabular { values, .. } => values,
            ParamControl::Features(m) => &m.weights,
        }
    }
}

impl VectorField for ParamControl {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out[0] = ParamControl::eval(self, x[0], t);
    }
}

/// `u⋆ = −σ_t ∂_x V` by central differences (second-order one-sided at the ends).
pub fn control_from_value(value: &ValueGrid, sigma_of_t: &dyn Fn(f64) -> f64) -> ParamControl {
    let nx = value.xs.len();
    let dx = value.xs[1] - value.xs[0];
    let mut out = Vec::with_capacity(nx * value.ts.len());
    for (k, row) in value.values.iter().enumerate() {
        let s = sigma_of_t(value.ts[k]);
        for j in 0..nx {
            let g = if j == 0 {
                (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx)
            } else if j == nx - 1 {
                (3.0 * row[j] - 4.0 * row[j - 1] + row[j - 2]) / (2.0 * dx)
            } else {
                (row[j + 1] - row[j - 1]) / (2.0 * dx)
            };
            out.push(-s * g);
        }
    }
    ParamControl::Tabular { ts: value.ts.clone(), xs: value.xs.clone(), values: out }
}

/// `Φ(x) = log φ̂_T(x) − log π_T(x)`; both inputs are checked for positivity on `domain`.
pub fn sb_terminal_cost(phi_hat_t: TimeFn, target_density: TimeFn, domain: &[f64]) -> Result<TimeFn> {
    for &x in domain {
        let (a, b) = (phi_hat_t(x), target_density(x));
        if !(a > 0.0) || !(b > 0.0) {
            return invalid(format!("non-positive potential or density at x = {x}"));
        }
    }
    Ok(Arc::new(move |x| phi_hat_t(x).ln() - target_density(x).ln()))
}

/// Static Schrödinger system on a grid: given the reference kernel `K[i][j] = P(X_T = x_j | X₀ = x_i)`
/// and grid masses `π₀`, `π_T`, returns `(φ₀, φ̂_T)`. The fixed point
/// `φ̂₀ = π₀ / (K φ_T)`, `φ_T = π_T / (Kᵀ φ̂₀)` is iterated until the terminal marginal
/// error drops below `tol`.
pub fn grid_schrodinger_potentials(kernel: &[Vec<f64>], pi0: &[f64], pi_t: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = pi0.len();
    let m = pi_t.len();
    let mut phi_t = vec![1.0; m];
    let mut phi_hat0 = vec![0.0; n];
    for _ in 0..max_iters {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| kernel[i][j] * phi_t[j]).sum();
            phi_hat0[i] = if pi0[i] > 0.0 { pi0[i] / s } else { 0.0 };
        }
        let mut err = 0.0;
        for j in 0..m {
            let s: f64 = (0..n).map(|i| kernel[i][j] * phi_hat0[i]).sum();
            err += (phi_t[j] * s - pi_t[j]).abs();
            phi_t[j] = if pi_t[j] > 0.0 { pi_t[j] / s } else { 0.0 };
        }
        if err < tol {
            break;
        }
    }
    // φ₀(x) = Σ_y K(x,y) φ_T(y), φ̂_T(y) = Σ_x φ̂₀(x) K(x,y)
    let phi0: Vec<f64> = (0..n).map(|i| (0..m).map(|j| kernel[i][j] * phi_t[j]).sum()).collect();
    let phi_hat_t: Vec<f64> = (0..m).map(|j| (0..n).map(|i| phi_hat0[i] * kernel[i][j]).sum()).collect();
    if phi0.iter().chain(&phi_hat_t).any(|v| !v.is_finite()) {
        return numerical("grid Schrödinger potentials are not finite");
    }
    Ok((phi0, phi_hat_t))
}

/// Terminal law of the optimally controlled process on a grid:
/// `p_T(y) = Σ_x π₀(x) K(x,y) e^{−Φ(y)} / φ₀(x)`, `φ₀(x) = Σ_y K(x,y) e^{−Φ(y)}`.
pub fn controlled_terminal_law(kernel: &[Vec<f64>], pi0: &[f64], terminal_cost: &[f64]) -> Vec<f64> {
    let m = terminal_cost.len();
    let w: Vec<f64> = terminal_cost.iter().map(|p| (-p).exp()).collect();
    let mut out = vec![0.0; m];
    for (i, row) in kernel.iter().enumerate() {
        if pi0[i] == 0.0 {
            continue;
        }
        let phi0: f64 = (0..m).map(|j| row[j] * w[j]).sum();
        for j in 0..m {
            out[j] += pi0[i] * row[j] * w[j] / phi0;
        }
    }
    out
}

/// Per-path integrals along an ensemble simulated under the proposal `v`.
struct PathTerms {
    /// `½∫u² dt`
    quad_u: f64,
    /// `∫u·v dt`
    cross_uv: f64,
    /// `∫u dB^v`
    stoch_u: f64,
    /// `½∫v² dt`
    quad_v: f64,
    /// `∫v dB^v`
    stoch_v: f64,
    running: f64,
    terminal: f64,
}

fn path_terms(u: &dyn VectorField, v: &dyn VectorField, problem: &SocProblem, ens: &PathEnsemble) -> Result<Vec<PathTerms>> {
    if ens.dim != 1 {
        return invalid("SOC losses are implemented for one-dimensional ensembles");
    }
    if ens.brownian_increments.is_none() {
        return invalid("ensemble lacks Brownian increments");
    }
    Ok((0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut pt = PathTerms { quad_u: 0.0, cross_uv: 0.0, stoch_u: 0.0, quad_v: 0.0, stoch_v: 0.0, running: 0.0, terminal: 0.0 };
            let (mut a, mut b) = ([0.0], [0.0]);
            for k in 0..ens.n_times() - 1 {
                let (t, dt) = (ens.grid[k], ens.grid[k + 1] - ens.grid[k]);
                let x = ens.state(p, k);
                u.eval(x, t, &mut a);
                v.eval(x, t, &mut b);
                let db = ens.increment(p, k).unwrap()[0];
                pt.quad_u += 0.5 * a[0] * a[0] * dt;
                pt.cross_uv += a[0] * b[0] * dt;
                pt.stoch_u += a[0] * db;
                pt.quad_v += 0.5 * b[0] * b[0] * dt;
                pt.stoch_v += b[0] * db;
                pt.running += (problem.running_cost)(x[0], t) * dt;
            }
            pt.terminal = (problem.terminal_cost)(ens.state(p, ens.n_times() - 1)[0]);
            pt
        })
        .collect())
}

/// Simulates the problem's dynamics under `control` (1-D).
pub fn simulate_controlled(problem: &SocProblem, control: &dyn VectorField, n_paths: usize, n_steps: usize, seed: u64) -> Result<PathEnsemble> {
    let f = |x: &[f64], t: f64, out: &mut [f64]| out[0] = (problem.ref_drift)(x[0], t);
    let sig = |t: f64| (problem.sigma_of_t)(t);
    let spec = SdeSpec { ref_drift: &f, control: Some(control), sigma_of_t: &sig, horizon: problem.horizon, dim: 1 };
    simulate_on_grid(&spec, &problem.init, n_paths, &uniform_grid(problem.horizon, n_steps), seed, true)
}

/// `E_u[∫(½u² + c) dt + Φ(X_T)]` on an ensemble simulated under `u`.
pub fn loss_relative_entropy(control: &dyn VectorField, problem: &SocProblem, ensemble: &PathEnsemble) -> Result<Estimate> {
    let terms = path_terms(control, control, problem, ensemble)?;
    let per: Vec<f64> = terms.iter().map(|p| p.quad_u + p.running + p.terminal).collect();
    Ok(Estimate::from_samples(&per))
}

/// `log dP⋆/dP^v` up to a constant: `−Φ − ∫c − ½∫v² − ∫v dB^v`.
pub fn optimal_log_weights(problem: &SocProblem, ensemble: &PathEnsemble, proposal: &dyn VectorField) -> Result<Vec<f64>> {
    let terms = path_terms(proposal, proposal, problem, ensemble)?;
    Ok(terms.iter().map(|p| -p.terminal - p.running - p.quad_v - p.stoch_v).collect())
}

#[derive(Clone, Debug)]
pub struct CrossEntropyLoss {
    pub value: f64,
    pub effective_sample_size: f64,
    /// Set when the effective sample size falls below 10.
    pub low_ess: bool,
}

fn normalised_weights(log_w: &[f64]) -> (Vec<f64>, f64) {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / s).collect();
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    (w, ess)
}

/// Self-normalised estimate of `E_{P⋆}[½∫u² − ∫u·v dt − ∫u dB^v − Φ − ∫c]` from an ensemble under `v`.
pub fn loss_cross_entropy(
    control: &dyn VectorField,
    problem: &SocProblem,
    ensemble: &PathEnsemble,
    proposal: &dyn VectorField,
    log_weights: &[f64],
) -> Result<CrossEntropyLoss> {
    if log_weights.len() != ensemble.n_paths {
        return invalid("one log-weight per path is required");
    }
    let terms = path_terms(control, proposal, problem, ensemble)?;
    let (w, ess) = normalised_weights(log_weights);
    let value = terms
        .iter()
        .zip(&w)
        .map(|(p, wi)| wi * (p.quad_u - p.cross_uv - p.stoch_u - p.terminal - p.running))
        .sum();
    Ok(CrossEntropyLoss { value, effective_sample_size: ess, low_ess: ess < 10.0 })
}

/// `F_{u,v} − Φ(X_T)` per path, `F = ½∫u² − ∫u·v dt − ∫u dB^v − ∫c`.
fn lv_functional(control: &dyn VectorField, problem: &SocProblem, ensemble: &PathEnsemble, proposal: &dyn VectorField) -> Result<Vec<f64>> {
    let terms = path_terms(control, proposal, problem, ensemble)?;
    Ok(terms.iter().map(|p| p.quad_u - p.cross_uv - p.stoch_u - p.running - p.terminal).collect())
}

/// Sample variance over paths of `F_{u,v} − Φ(X_T)`; the standard error comes from the
/// per-path squared deviations.
pub fn loss_log_variance(control: &dyn VectorField, problem: &SocProblem, ensemble: &PathEnsemble, proposal: &dyn VectorField) -> Result<Estimate> {
    if ensemble.n_paths < 2 {
        return invalid("log-variance loss needs at least two paths");
    }
    Ok(variance_estimate(&lv_functional(control, problem, ensemble, proposal)?))
}

/// Pooled within-start variance: paths sharing the same `X₀` form a group.
/// Equals [`loss_log_variance`] when the start is deterministic.
pub fn loss_log_variance_pooled(control: &dyn VectorField, problem: &SocProblem, ensemble: &PathEnsemble, proposal: &dyn VectorField) -> Result<f64> {
    let g = lv_functional(control, problem, ensemble, proposal)?;
    let groups = start_groups(ensemble);
    pooled_variance(&g, &groups)
}

fn start_groups(ensemble: &PathEnsemble) -> Vec<usize> {
    let mut keys: Vec<u64> = Vec::new();
    (0..ensemble.n_paths)
        .map(|p| {
            let key = ensemble.state(p, 0)[0].to_bits();
            match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            }
        })
        .collect()
}

fn pooled_variance(g: &[f64], groups: &[usize]) -> Result<f64> {
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0usize; n_groups];
    for (v, k) in g.iter().zip(groups) {
        sum[*k] += v;
        cnt[*k] += 1;
    }
    let dof = g.len() as f64 - n_groups as f64;
    if dof < 1.0 {
        return invalid("every start needs at least two paths");
    }
    let ss: f64 = g.iter().zip(groups).map(|(v, k)| (v - sum[*k] / cnt[*k] as f64).powi(2)).sum();
    Ok(ss / dof)
}

/// Log-variance loss with the leading time-step bias removed by Richardson extrapolation:
/// `2·Var(G_{Δt/2}) − Var(G_{Δt})`, both functionals computed on the same Brownian paths
/// (the coarse path sums pairs of fine increments). Deterministic `X₀` only.
pub fn loss_log_variance_extrapolated(
    control: &dyn VectorField,
    problem: &SocProblem,
    proposal: &dyn VectorField,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Estimate> {
    if !matches!(problem.init, InitLaw::Point(_)) {
        return invalid("extrapolated log-variance needs a deterministic start");
    }
    let fine = simulate_controlled(problem, proposal, n_paths, 2 * n_steps, seed)?;
    let g_fine = lv_functional(control, problem, &fine, proposal)?;
    let dt = problem.horizon / n_steps as f64;
    let g_coarse: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut x = fine.state(p, 0)[0];
            let (mut a, mut b) = ([0.0], [0.0]);
            let mut g = 0.0;
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let db = fine.increment(p, 2 * k).unwrap()[0] + fine.increment(p, 2 * k + 1).unwrap()[0];
                control.eval(&[x], t, &mut a);
                proposal.eval(&[x], t, &mut b);
                g += 0.5 * a[0] * a[0] * dt - a[0] * b[0] * dt - a[0] * db - (problem.running_cost)(x, t) * dt;
                let s = (problem.sigma_of_t)(t);
                x += ((problem.ref_drift)(x, t) + s * b[0]) * dt + s * db;
            }
            g - (problem.terminal_cost)(x)
        })
        .collect();
    let n = n_paths as f64;
    let mf = g_fine.iter().sum::<f64>() / n;
    let mc = g_coarse.iter().sum::<f64>() / n;
    let h: Vec<f64> = g_fine
        .iter()
        .zip(&g_coarse)
        .map(|(f, c)| (2.0 * (f - mf).powi(2) - (c - mc).powi(2)) * n / (n - 1.0))
        .collect();
    Ok(Estimate::from_samples(&h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitLoss {
    /// Pooled log-variance.
    LogVariance,
    CrossEntropy,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub loss: FitLoss,
    /// Nodes of the tabular control.
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// Paths simulated under the reference (`v = 0`) from `problem.init`.
    pub n_paths: usize,
    pub n_steps: usize,
    /// Number of loss evaluations.
    pub budget: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub control: ParamControl,
    pub loss_trace: Vec<f64>,
    pub evaluations: usize,
}

/// One Euler step of a path as seen by a tabular control: up to four parameters with
/// bilinear weights, and the factor `r = vΔt + ΔB` (here `v = 0`).
struct StepFeature {
    idx: [u32; 4],
    w: [f64; 4],
    dt: f64,
    r: f64,
}

/// Fits a tabular control by diagonally preconditioned gradient descent with step
/// halving on loss increase. Paths come from the uncontrolled reference and stay fixed.
pub fn fit_control(problem: &SocProblem, config: &FitConfig) -> Result<FitResult> {
    if config.budget == 0 {
        return invalid("budget must be at least 1");
    }
    let zero = |_: &[f64], _: f64, out: &mut [f64]| out[0] = 0.0;
    let ens = simulate_controlled(problem, &zero, config.n_paths, config.n_steps, config.seed)?;
    let (ts, xs) = (&config.t_nodes, &config.x_nodes);
    let nxn = xs.len();
    let n_par = ts.len() * nxn;
    let features: Vec<Vec<StepFeature>> = (0..ens.n_paths)
        .map(|p| {
            (0..ens.n_times() - 1)
                .map(|k| {
                    let (t, dt) = (ens.grid[k], ens.grid[k + 1] - ens.grid[k]);
                    let x = ens.state(p, k)[0];
                    let (i, a) = locate(ts, t);
                    let (j, b) = locate(xs, x);
                    StepFeature {
                        idx: [
                            (i * nxn + j) as u32,
                            (i * nxn + j + 1) as u32,
                            ((i + 1) * nxn + j) as u32,
                            ((i + 1) * nxn + j + 1) as u32,
                        ],
                        w: [(1.0 - a) * (1.0 - b), (1.0 - a) * b, a * (1.0 - b), a * b],
                        dt,
                        r: ens.increment(p, k).unwrap()[0],
                    }
                })
                .collect()
        })
        .collect();
    let constants: Vec<f64> = (0..ens.n_paths)
        .map(|p| {
            let running: f64 = (0..ens.n_times() - 1)
                .map(|k| (problem.running_cost)(ens.state(p, k)[0], ens.grid[k]) * (ens.grid[k + 1] - ens.grid[k]))
                .sum();
            -running - (problem.terminal_cost)(ens.state(p, ens.n_times() - 1)[0])
        })
        .collect();
    let groups = start_groups(&ens);
    // Cross-entropy weights are normalised within each start group: conditioning on X₀
    // leaves the optimal control unchanged and keeps every start equally represented.
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let mut ce_w = vec![0.0; ens.n_paths];
    for g in 0..n_groups {
        let members: Vec<usize> = (0..ens.n_paths).filter(|p| groups[*p] == g).collect();
        let lw: Vec<f64> = members.iter().map(|p| constants[*p]).collect();
        let (w, _) = normalised_weights(&lw);
        for (p, wi) in members.iter().zip(w) {
            ce_w[*p] = wi / n_groups as f64;
        }
    }

    let functional = |theta: &[f64]| -> Vec<f64> {
        features
            .par_iter()
            .zip(&constants)
            .map(|(steps, c)| {
                steps
                    .iter()
                    .map(|s| {
                        let u: f64 = (0..4).map(|q| s.w[q] * theta[s.idx[q] as usize]).sum();
                        0.5 * s.dt * u * u - u * s.r
                    })
                    .sum::<f64>()
                    + c
            })
            .collect()
    };
    let loss_of = |g: &[f64]| -> Result<f64> {
        match config.loss {
            FitLoss::LogVariance => pooled_variance(g, &groups),
            FitLoss::CrossEntropy => Ok(g.iter().zip(&ce_w).map(|(a, w)| a * w).sum()),
        }
    };
    // Gradient and a Gauss–Newton style diagonal for the current parameters.
    let grad_diag = |theta: &[f64], g: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let coef: Vec<f64> = match config.loss {
            FitLoss::LogVariance => {
                let n_groups = groups.iter().max().unwrap() + 1;
                let mut sum = vec![0.0; n_groups];
                let mut cnt = vec![0usize; n_groups];
                for (v, k) in g.iter().zip(&groups) {
                    sum[*k] += v;
                    cnt[*k] += 1;
                }
                let dof = g.len() as f64 - n_groups as f64;
                g.iter().zip(&groups).map(|(v, k)| 2.0 * (v - sum[*k] / cnt[*k] as f64) / dof).collect()
            }
            FitLoss::CrossEntropy => ce_w.clone(),
        };
        let mut grad = vec![0.0; n_par];
        let mut diag = vec![0.0; n_par];
        let dof = g.len() as f64;
        for (p, steps) in features.iter().enumerate() {
            for s in steps {
                let u: f64 = (0..4).map(|q| s.w[q] * theta[s.idx[q] as usize]).sum();
                let d = s.dt * u - s.r;
                for q in 0..4 {
                    let i = s.idx[q] as usize;
                    grad[i] += coef[p] * s.w[q] * d;
                    diag[i] += match config.loss {
                        FitLoss::LogVariance => 2.0 * (s.w[q] * d).powi(2) / dof,
                        FitLoss::CrossEntropy => ce_w[p] * s.w[q] * s.w[q] * s.dt,
                    };
                }
            }
        }
        let mean_diag = diag.iter().sum::<f64>() / n_par as f64;
        diag.iter_mut().for_each(|d| *d += 1e-6 * mean_diag + 1e-300);
        (grad, diag)
    };

    let mut theta = vec![0.0; n_par];
    let mut g = functional(&theta);
    let mut loss = loss_of(&g)?;
    let mut trace = vec![loss];
    let mut evals = 1;
    let mut eta = 1.0;
    let (mut grad, mut diag) = grad_diag(&theta, &g);
    while evals < config.budget && eta > 1e-12 {
        let trial: Vec<f64> = theta.iter().zip(grad.iter().zip(&diag)).map(|(t, (gr, d))| t - eta * gr / d).collect();
        let g_trial = functional(&trial);
        let l_trial = loss_of(&g_trial)?;
        evals += 1;
        if !l_trial.is_finite() {
            return numerical(format!("loss diverged after {evals} evaluations; trace {:?}", trace));
        }
        if l_trial < loss {
            theta = trial;
            g = g_trial;
            loss = l_trial;
            trace.push(loss);
            (grad, diag) = grad_diag(&theta, &g);
            eta = (eta * 2.0).min(1.0);
        } else {
            eta *= 0.5;
        }
    }
    Ok(FitResult {
        control: ParamControl::Tabular { ts: ts.clone(), xs: xs.clone(), values: theta },
        loss_trace: trace,
        evaluations: evals,
    })
}
