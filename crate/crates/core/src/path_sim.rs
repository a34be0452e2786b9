//! SDE path ensembles, Brownian-bridge mixtures, stochastic interpolants and
//! Girsanov likelihood ratios.
//!
//! Controlled dynamics are `dX = (f(X,t) + σ_t u(X,t)) dt + σ_t dB`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::entropic_ot::{Coupling, DiscreteMeasure, GaussianCoupling};
use crate::error::{invalid, numerical, BridgeError, Result};
use crate::gaussian_bridge::AffineDriftTable;
use crate::rng::{stream, StreamRng};
use crate::stats::Estimate;

/// Time-dependent vector field `(x, t) ↦ out`.
pub trait VectorField: Sync {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

impl VectorField for AffineDriftTable<f64> {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        AffineDriftTable::eval(self, x, t, out)
    }
}

pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub struct ConstantField(pub Vec<f64>);

impl VectorField for ConstantField {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// `x ↦ A x + b`, constant in time.
pub struct LinearField {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl VectorField for LinearField {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for i in 0..out.len() {
            out[i] = self.b[i] + (0..x.len()).map(|j| self.a[(i, j)] * x[j]).sum::<f64>();
        }
    }
}

pub type SigmaFn<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

pub struct SdeSpec<'a> {
    pub ref_drift: &'a dyn VectorField,
    pub control: Option<&'a dyn VectorField>,
    pub sigma_of_t: SigmaFn<'a>,
    pub horizon: f64,
    pub dim: usize,
}

/// Row-major cloud of `n` points in `dim` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub data: Vec<f64>,
    pub dim: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coord(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.dim).copied().collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        DVector::from_iterator(self.dim, (0..self.dim).map(|j| self.coord(j).iter().sum::<f64>() / n))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let n = self.len();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for i in 0..n {
            let r = DVector::from_column_slice(self.row(i)) - &m;
            c += &r * r.transpose();
        }
        c / (n as f64 - 1.0)
    }
}

/// Law of `X₀`.
#[derive(Clone, Debug)]
pub enum InitLaw {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, chol: DMatrix<f64> },
    /// Path `i` starts at sample `i mod n`.
    Samples(PointCloud),
    /// Draw uniformly from the samples.
    Resample(PointCloud),
}

impl InitLaw {
    pub fn gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<InitLaw> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| BridgeError::InvalidInput("initial covariance is not positive definite".into()))?;
        Ok(InitLaw::Gaussian { mean: mean.iter().copied().collect(), chol: chol.l() })
    }

    pub fn dim(&self) -> usize {
        match self {
            InitLaw::Point(p) => p.len(),
            InitLaw::Gaussian { mean, .. } => mean.len(),
            InitLaw::Samples(c) | InitLaw::Resample(c) => c.dim,
        }
    }

    pub fn sample(&self, index: usize, rng: &mut StreamRng, out: &mut [f64]) {
        match self {
            InitLaw::Point(p) => out.copy_from_slice(p),
            InitLaw::Gaussian { mean, chol } => {
                let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..mean.len() {
                    out[i] = mean[i] + (0..=i).map(|j| chol[(i, j)] * z[j]).sum::<f64>();
                }
            }
            InitLaw::Samples(c) => out.copy_from_slice(c.row(index % c.len())),
            InitLaw::Resample(c) => {
                let k = rng.gen_range(0..c.len());
                out.copy_from_slice(c.row(k))
            }
        }
    }
}

/// Batch of trajectories on a shared time grid.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub grid: Vec<f64>,
    /// `[n_paths × n_times × dim]`, row-major.
    pub states: Vec<f64>,
    /// Brownian increments `ΔB = √Δt·z`, `[n_paths × (n_times−1) × dim]`.
    pub brownian_increments: Option<Vec<f64>>,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * self.n_times() + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn increment(&self, path: usize, k: usize) -> Option<&[f64]> {
        let inc = self.brownian_increments.as_ref()?;
        let o = (path * (self.n_times() - 1) + k) * self.dim;
        Some(&inc[o..o + self.dim])
    }

    /// Samples of `X_{t_k}`.
    pub fn marginal(&self, k: usize) -> PointCloud {
        let mut data = Vec::with_capacity(self.n_paths * self.dim);
        for p in 0..self.n_paths {
            data.extend_from_slice(self.state(p, k));
        }
        PointCloud { data, dim: self.dim }
    }

    pub fn terminal(&self) -> PointCloud {
        self.marginal(self.n_times() - 1)
    }

    /// Binary layout: four little-endian u64 (n_paths, n_times, dim, seed), then states as f64.
    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        for v in [self.n_paths as u64, self.n_times() as u64, self.dim as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.states {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<PathEnsemble> {
        let word = |k: usize| -> Result<u64> {
            bytes
                .get(8 * k..8 * k + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| BridgeError::InvalidInput("truncated ensemble header".into()))
        };
        let (n_paths, n_times, dim, seed) = (word(0)? as usize, word(1)? as usize, word(2)? as usize, word(3)?);
        let body = &bytes[32..];
        if body.len() != n_paths * n_times * dim * 8 {
            return invalid("ensemble body has the wrong length");
        }
        let states = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(PathEnsemble {
            grid: Vec::new(),
            states,
            brownian_increments: None,
            n_paths,
            dim,
            seed,
        })
    }

    /// CSV with columns `path,t,x0,..`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "path,t")?;
        for j in 0..self.dim {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (k, t) in self.grid.iter().enumerate() {
                write!(w, "{p},{t}")?;
                for x in self.state(p, k) {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub fn uniform_grid(horizon: f64, n_steps: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=n_steps).map(|k| horizon * k as f64 / n_steps as f64).collect();
    g[n_steps] = horizon;
    g
}

/// Euler–Maruyama on a uniform grid with `n_steps` steps.
pub fn simulate_sde(spec: &SdeSpec, init: &InitLaw, n_paths: usize, n_steps: usize, seed: u64) -> Result<PathEnsemble> {
    simulate_on_grid(spec, init, n_paths, &uniform_grid(spec.horizon, n_steps), seed, true)
}

/// Euler–Maruyama on an arbitrary increasing grid; path `i` uses `stream(seed, i)`.
pub fn simulate_on_grid(
    spec: &SdeSpec,
    init: &InitLaw,
    n_paths: usize,
    grid: &[f64],
    seed: u64,
    keep_increments: bool,
) -> Result<PathEnsemble> {
    if n_paths == 0 || grid.len() < 2 {
        return invalid("need at least one path and one step");
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("time grid must be strictly increasing");
    }
    if init.dim() != spec.dim {
        return invalid("initial law dimension differs from the SDE dimension");
    }
    let d = spec.dim;
    let nt = grid.len();
    let mut states = vec![0.0; n_paths * nt * d];
    let mut incs = vec![0.0; if keep_increments { n_paths * (nt - 1) * d } else { 0 }];
    let inc_chunk = if keep_increments { (nt - 1) * d } else { 0 };

    let simulate_one = |p: usize, xs: &mut [f64], dbs: &mut [f64]| -> Result<()> {
        let mut rng = stream(seed, p as u64);
        init.sample(p, &mut rng, &mut xs[..d]);
        let mut f = vec![0.0; d];
        let mut u = vec![0.0; d];
        let mut db = vec![0.0; d];
        for k in 0..nt - 1 {
            let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
            let (cur, next) = xs[k * d..(k + 2) * d].split_at_mut(d);
            spec.ref_drift.eval(cur, t, &mut f);
            if let Some(c) = spec.control {
                c.eval(cur, t, &mut u);
            }
            let s = (spec.sigma_of_t)(t);
            let sq = dt.sqrt();
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                db[j] = sq * z;
                let ctrl = if spec.control.is_some() { s * u[j] } else { 0.0 };
                next[j] = cur[j] + (f[j] + ctrl) * dt + s * db[j];
            }
            if next.iter().any(|x| !x.is_finite()) {
                return numerical(format!("non-finite state on path {p} at step {}", k + 1));
            }
            if keep_increments {
                dbs[k * d..(k + 1) * d].copy_from_slice(&db);
            }
        }
        Ok(())
    };

    if keep_increments {
        states
            .par_chunks_mut(nt * d)
            .zip(incs.par_chunks_mut(inc_chunk))
            .enumerate()
            .try_for_each(|(p, (xs, dbs))| simulate_one(p, xs, dbs))?;
    } else {
        states
            .par_chunks_mut(nt * d)
            .enumerate()
            .try_for_each(|(p, xs)| simulate_one(p, xs, &mut []))?;
    }
    Ok(PathEnsemble {
        grid: grid.to_vec(),
        states,
        brownian_increments: if keep_increments { Some(incs) } else { None },
        n_paths,
        dim: d,
        seed,
    })
}

/// Moments and targets of the Brownian bridge `σB` pinned at `x0` (time 0) and `xT` (time `T`).
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeStats {
    pub mean: Vec<f64>,
    pub var: f64,
    /// `(xT − x)/(T − t)`.
    pub pinned_drift: Vec<f64>,
    /// `∇ log p_t(x | x0, xT) = (t·xT + (T−t)·x0 − T·x) / (σ² t (T−t))`.
    pub conditional_score: Vec<f64>,
}

pub fn brownian_bridge_stats(x0: &[f64], x_t_end: &[f64], t: f64, horizon: f64, sigma: f64, x: &[f64]) -> Result<BridgeStats> {
    if !(t > 0.0 && t < horizon) {
        return invalid(format!("t = {t} must lie strictly inside (0, {horizon})"));
    }
    let s = t / horizon;
    let mean = x0.iter().zip(x_t_end).map(|(a, b)| (1.0 - s) * a + s * b).collect();
    let var = sigma * sigma * t * (horizon - t) / horizon;
    let pinned_drift = x.iter().zip(x_t_end).map(|(xi, b)| (b - xi) / (horizon - t)).collect();
    let conditional_score = x
        .iter()
        .zip(x0.iter().zip(x_t_end))
        .map(|(xi, (a, b))| (t * b + (horizon - t) * a - horizon * xi) / (sigma * sigma * t * (horizon - t)))
        .collect();
    Ok(BridgeStats { mean, var, pinned_drift, conditional_score })
}

/// Source of endpoint pairs `(X₀, X_T)`.
#[derive(Clone, Debug)]
pub enum EndpointSampler {
    /// Finite coupling; pairs drawn by inverse CDF over the flattened weights.
    Coupling { source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, cdf: Vec<f64> },
    /// Joint Gaussian `(X₀, X_T)` stacked as a `2d` vector.
    GaussianJoint { mean: Vec<f64>, chol: DMatrix<f64>, dim: usize },
    IndependentProduct { start: InitLaw, end: InitLaw },
}

impl EndpointSampler {
    pub fn from_coupling(source: &DiscreteMeasure<f64>, target: &DiscreteMeasure<f64>, coupling: &Coupling<f64>) -> Self {
        let mut cdf = Vec::with_capacity(source.len() * target.len());
        let mut acc = 0.0;
        let total = coupling.mass();
        for i in 0..source.len() {
            for j in 0..target.len() {
                acc += coupling.weights[(i, j)] / total;
                cdf.push(acc);
            }
        }
        EndpointSampler::Coupling {
            source: source.points.iter().map(|p| p.iter().copied().collect()).collect(),
            target: target.points.iter().map(|p| p.iter().copied().collect()).collect(),
            cdf,
        }
    }

    pub fn from_gaussian(joint: &GaussianCoupling<f64>) -> Result<Self> {
        let cov = (&joint.cov + joint.cov.transpose()) * 0.5;
        let n = cov.nrows();
        // The joint can be singular (σ → 0); a tiny ridge keeps Cholesky alive.
        let chol = cov
            .clone()
            .cholesky()
            .or_else(|| (cov + DMatrix::identity(n, n) * 1e-12).cholesky())
            .ok_or_else(|| BridgeError::Numerical("joint covariance is not PSD".into()))?;
        Ok(EndpointSampler::GaussianJoint { mean: joint.mean.iter().copied().collect(), chol: chol.l(), dim: n / 2 })
    }

    pub fn dim(&self) -> usize {
        match self {
            EndpointSampler::Coupling { source, .. } => source[0].len(),
            EndpointSampler::GaussianJoint { dim, .. } => *dim,
            EndpointSampler::IndependentProduct { start, .. } => start.dim(),
        }
    }

    pub fn sample(&self, index: usize, rng: &mut StreamRng, x0: &mut [f64], x_end: &mut [f64]) {
        match self {
            EndpointSampler::Coupling { source, target, cdf } => {
                let u: f64 = rng.gen::<f64>() * cdf[cdf.len() - 1];
                let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                let m = target.len();
                x0.copy_from_slice(&source[k / m]);
                x_end.copy_from_slice(&target[k % m]);
            }
            EndpointSampler::GaussianJoint { mean, chol, dim } => {
                let n = 2 * dim;
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..n {
                    let v = mean[i] + (0..=i).map(|j| chol[(i, j)] * z[j]).sum::<f64>();
                    if i < *dim {
                        x0[i] = v;
                    } else {
                        x_end[i - dim] = v;
                    }
                }
            }
            EndpointSampler::IndependentProduct { start, end } => {
                start.sample(index, rng, x0);
                end.sample(index, rng, x_end);
            }
        }
    }
}

/// Samples of the time-`t` marginal of the mixture of Brownian bridges over the endpoint law.
pub fn sample_bridge_mixture(endpoints: &EndpointSampler, t: f64, horizon: f64, sigma: f64, n: usize, seed: u64) -> Result<PointCloud> {
    if !(0.0..=horizon).contains(&t) {
        return invalid(format!("t = {t} outside [0, {horizon}]"));
    }
    let d = endpoints.dim();
    let mut data = vec![0.0; n * d];
    let s = t / horizon;
    let sd = sigma * (t * (horizon - t) / horizon).max(0.0).sqrt();
    data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let mut rng = stream(seed, i as u64);
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        endpoints.sample(i, &mut rng, &mut a, &mut b);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out[j] = (1.0 - s) * a[j] + s * b[j] + sd * z;
        }
    });
    Ok(PointCloud { data, dim: d })
}

pub type InterpolantFn = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;

/// `x_t = I(x0, xT, t) + γ(t) z`.
#[derive(Clone)]
pub struct InterpolantSpec {
    pub interpolant: InterpolantFn,
    pub gamma: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub horizon: f64,
}

impl InterpolantSpec {
    /// Linear interpolant with a caller-chosen noise profile.
    pub fn linear(horizon: f64, gamma: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        InterpolantSpec {
            interpolant: Arc::new(move |a, b, t, out| {
                let s = t / horizon;
                for j in 0..out.len() {
                    out[j] = (1.0 - s) * a[j] + s * b[j];
                }
            }),
            gamma,
            horizon,
        }
    }

    /// Linear interpolant with `γ(t) = σ√(t(T−t)/T)`: the Brownian-bridge law.
    pub fn brownian(horizon: f64, sigma: f64) -> Self {
        Self::linear(horizon, Arc::new(move |t| sigma * (t * (horizon - t) / horizon).max(0.0).sqrt()))
    }
}

pub fn interpolant_sample(spec: &InterpolantSpec, x0: &[f64], x_end: &[f64], t: f64, seed: u64) -> Result<Vec<f64>> {
    let g = (spec.gamma)(t);
    if g < 0.0 {
        return invalid(format!("gamma({t}) = {g} is negative"));
    }
    let mut out = vec![0.0; x0.len()];
    (spec.interpolant)(x0, x_end, t, &mut out);
    if g > 0.0 {
        let mut rng = stream(seed, 0);
        for o in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o += g * z;
        }
    }
    Ok(out)
}

/// Per-path `log dP^ũ/dP^u` on an ensemble simulated under `u`:
/// `−½Σ‖ũ−u‖²Δt + Σ(ũ−u)·ΔB`.
pub fn girsanov_log_rnd(ensemble: &PathEnsemble, u: &dyn VectorField, u_tilde: &dyn VectorField) -> Result<Vec<f64>> {
    if ensemble.brownian_increments.is_none() {
        return invalid("ensemble was simulated without retained Brownian increments");
    }
    let d = ensemble.dim;
    Ok((0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut acc = 0.0;
            for k in 0..ensemble.n_times() - 1 {
                let (t, dt) = (ensemble.grid[k], ensemble.grid[k + 1] - ensemble.grid[k]);
                let x = ensemble.state(p, k);
                u.eval(x, t, &mut a);
                u_tilde.eval(x, t, &mut b);
                let db = ensemble.increment(p, k).unwrap();
                for j in 0..d {
                    let diff = b[j] - a[j];
                    acc += -0.5 * diff * diff * dt + diff * db[j];
                }
            }
            acc
        })
        .collect())
}

/// Monte-Carlo estimate of `KL(P^ũ ‖ P^u) = E_ũ[½∫‖ũ−u‖² dt]` on an ensemble simulated under `ũ`.
pub fn path_kl_estimate(ensemble: &PathEnsemble, u: &dyn VectorField, u_tilde: &dyn VectorField) -> Estimate {
    let d = ensemble.dim;
    let per_path: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut acc = 0.0;
            for k in 0..ensemble.n_times() - 1 {
                let (t, dt) = (ensemble.grid[k], ensemble.grid[k + 1] - ensemble.grid[k]);
                let x = ensemble.state(p, k);
                u.eval(x, t, &mut a);
                u_tilde.eval(x, t, &mut b);
                acc += 0.5 * (0..d).map(|j| (b[j] - a[j]).powi(2)).sum::<f64>() * dt;
            }
            acc
        })
        .collect();
    Estimate::from_samples(&per_path)
}

/// Drift of the time reversal `Y_s = X_{T−s}`: `−f(x, T−s) + σ²_{T−s} ∇log p_{T−s}(x)`.
pub struct ReverseDrift<'a> {
    pub forward_drift: &'a dyn VectorField,
    pub score: &'a dyn VectorField,
    pub sigma_of_t: SigmaFn<'a>,
    pub horizon: f64,
}

impl VectorField for ReverseDrift<'_> {
    fn eval(&self, x: &[f64], s: f64, out: &mut [f64]) {
        let t = self.horizon - s;
        let mut sc = vec![0.0; out.len()];
        self.forward_drift.eval(x, t, out);
        self.score.eval(x, t, &mut sc);
        let s2 = (self.sigma_of_t)(t).powi(2);
        for j in 0..out.len() {
            out[j] = -out[j] + s2 * sc[j];
        }
    }
}

pub fn reverse_drift<'a>(forward_drift: &'a dyn VectorField, score: &'a dyn VectorField, sigma_of_t: SigmaFn<'a>, horizon: f64) -> ReverseDrift<'a> {
    ReverseDrift { forward_drift, score, sigma_of_t, horizon }
}
