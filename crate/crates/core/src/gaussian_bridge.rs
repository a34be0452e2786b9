//! Closed-form Gaussian Schrödinger bridges for linear reference SDEs
//! `dX = (c_t X + α_t) dt + σ_t dB`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::entropic_ot::{check_spd, gaussian_eot_closed_form};
use crate::error::{invalid, numerical, Result};
use crate::Real;

#[derive(Clone, Debug)]
pub struct GaussianMarginal<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Real> GaussianMarginal<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return invalid("covariance and mean dimensions differ");
        }
        check_spd(&cov)?;
        Ok(GaussianMarginal { mean, cov })
    }

    pub fn scalar(mean: T, var: T) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
pub type VectorFn<T> = Arc<dyn Fn(T) -> DVector<T> + Send + Sync>;

#[derive(Clone)]
pub struct LinearReferenceSde<T: Real> {
    pub c_of_t: ScalarFn<T>,
    pub alpha_of_t: VectorFn<T>,
    pub sigma_of_t: ScalarFn<T>,
    pub horizon: T,
    pub dim: usize,
}

impl<T: Real> LinearReferenceSde<T> {
    pub fn new(c_of_t: ScalarFn<T>, alpha_of_t: VectorFn<T>, sigma_of_t: ScalarFn<T>, horizon: T, dim: usize) -> Result<Self> {
        if !(horizon > T::zero()) {
            return invalid("horizon must be positive");
        }
        for k in 0..=64 {
            let t = horizon * T::lit(k as f64 / 64.0);
            if !((sigma_of_t)(t) > T::zero()) {
                return invalid(format!("sigma_of_t is not positive at t = {}", t.to_f64_lossy()));
            }
            if (alpha_of_t)(t).len() != dim {
                return invalid("alpha_of_t has the wrong dimension");
            }
        }
        Ok(LinearReferenceSde { c_of_t, alpha_of_t, sigma_of_t, horizon, dim })
    }

    /// `dX = σ dB` on `[0, T]`.
    pub fn brownian(sigma: T, horizon: T, dim: usize) -> Result<Self> {
        Self::new(
            Arc::new(|_| T::zero()),
            Arc::new(move |_| DVector::zeros(dim)),
            Arc::new(move |_| sigma),
            horizon,
            dim,
        )
    }

    /// Ornstein–Uhlenbeck reference `dX = −θX dt + σ dB`.
    pub fn ornstein_uhlenbeck(theta: T, sigma: T, horizon: T, dim: usize) -> Result<Self> {
        Self::new(
            Arc::new(move |_| -theta),
            Arc::new(move |_| DVector::zeros(dim)),
            Arc::new(move |_| sigma),
            horizon,
            dim,
        )
    }
}

/// Tabulated cumulative integral with exact derivative data, evaluated by cubic Hermite interpolation.
#[derive(Clone, Debug)]
struct Cumulative<T: Real> {
    h: T,
    values: Vec<T>,
    slopes: Vec<T>,
}

impl<T: Real> Cumulative<T> {
    /// Cumulative Simpson: pairs of intervals by Simpson's rule, odd nodes by the
    /// three-point rule that is exact on quadratics.
    fn build(h: T, f: Vec<T>) -> Self {
        let n = f.len();
        let mut values = vec![T::zero(); n];
        let twelfth = h / T::lit(12.0);
        let sixth = h / T::lit(3.0);
        for k in 1..n {
            if k % 2 == 0 {
                values[k] = values[k - 2] + sixth * (f[k - 2] + T::lit(4.0) * f[k - 1] + f[k]);
            } else if k + 1 < n {
                values[k] = values[k - 1] + twelfth * (T::lit(5.0) * f[k - 1] + T::lit(8.0) * f[k] - f[k + 1]);
            } else {
                values[k] = values[k - 1] + twelfth * (T::lit(5.0) * f[k] + T::lit(8.0) * f[k - 1] - f[k - 2]);
            }
        }
        Cumulative { h, values, slopes: f }
    }

    fn eval(&self, t: T) -> T {
        let n = self.values.len();
        let s = (t / self.h).to_f64_lossy().max(0.0);
        let k = (s.floor() as usize).min(n - 2);
        let u = t / self.h - T::lit(k as f64);
        let (u2, u3) = (u * u, u * u * u);
        let h00 = T::lit(2.0) * u3 - T::lit(3.0) * u2 + T::one();
        let h10 = u3 - T::lit(2.0) * u2 + u;
        let h01 = T::lit(-2.0) * u3 + T::lit(3.0) * u2;
        let h11 = u3 - u2;
        h00 * self.values[k] + h10 * self.h * self.slopes[k] + h01 * self.values[k + 1] + h11 * self.h * self.slopes[k + 1]
    }
}

/// Schedule quantities of the bridge: `τ`, `ζ`, `κ`, `r`, `r̄`, `ρ`, `σ⋆`.
#[derive(Clone)]
pub struct BridgeSchedule<T: Real> {
    pub reference: LinearReferenceSde<T>,
    log_tau: Cumulative<T>,
    zeta_int: Vec<Cumulative<T>>,
    kappa_int: Cumulative<T>,
    /// `σ⋆ = √(κ(T,T)/τ_T)`.
    pub sigma_star: T,
    /// Step used for central differences.
    pub diff_step: T,
}

/// Builds the schedule with integrals tabulated on `quad_points` nodes.
pub fn compute_schedule<T: Real>(reference: &LinearReferenceSde<T>, quad_points: usize) -> Result<BridgeSchedule<T>> {
    if quad_points < 16 {
        return invalid("quad_points must be at least 16");
    }
    let big_t = reference.horizon;
    let h = big_t / T::lit((quad_points - 1) as f64);
    let grid: Vec<T> = (0..quad_points).map(|k| h * T::lit(k as f64)).collect();
    let log_tau = Cumulative::build(h, grid.iter().map(|t| (reference.c_of_t)(*t)).collect());
    let tau: Vec<T> = log_tau.values.iter().map(|x| x.exp()).collect();
    let alphas: Vec<DVector<T>> = grid.iter().map(|t| (reference.alpha_of_t)(*t)).collect();
    let zeta_int = (0..reference.dim)
        .map(|d| Cumulative::build(h, (0..quad_points).map(|k| alphas[k][d] / tau[k]).collect()))
        .collect();
    let kappa_int = Cumulative::build(
        h,
        (0..quad_points)
            .map(|k| {
                let s = (reference.sigma_of_t)(grid[k]);
                s * s / (tau[k] * tau[k])
            })
            .collect(),
    );
    let k_t = *kappa_int.values.last().unwrap();
    if !(k_t > T::zero()) {
        return numerical("kappa(T,T) vanishes: the reference has no diffusion");
    }
    let tau_t = *tau.last().unwrap();
    Ok(BridgeSchedule {
        reference: reference.clone(),
        log_tau,
        zeta_int,
        kappa_int,
        sigma_star: (tau_t * k_t).sqrt(),
        diff_step: big_t / T::lit(1024.0),
    })
}

impl<T: Real> BridgeSchedule<T> {
    pub fn horizon(&self) -> T {
        self.reference.horizon
    }

    fn clamp(&self, t: T) -> T {
        t.max(T::zero()).min(self.horizon())
    }

    pub fn tau(&self, t: T) -> T {
        self.log_tau.eval(self.clamp(t)).exp()
    }

    pub fn zeta(&self, t: T) -> DVector<T> {
        let t = self.clamp(t);
        let tau = self.tau(t);
        DVector::from_iterator(self.zeta_int.len(), self.zeta_int.iter().map(|z| tau * z.eval(t)))
    }

    fn k_int(&self, t: T) -> T {
        self.kappa_int.eval(self.clamp(t))
    }

    /// `κ(t, t') = τ_t τ_{t'} ∫₀^{min(t,t')} τ_s^{-2} σ_s² ds`.
    pub fn kappa(&self, t: T, t2: T) -> T {
        self.tau(t) * self.tau(t2) * self.k_int(t.min(t2))
    }

    pub fn r(&self, t: T) -> T {
        let big_t = self.horizon();
        self.tau(t) * self.k_int(t) / (self.tau(big_t) * self.k_int(big_t))
    }

    pub fn r_bar(&self, t: T) -> T {
        self.tau(t) - self.r(t) * self.tau(self.horizon())
    }

    pub fn rho(&self, t: T) -> T {
        self.k_int(t) / self.k_int(self.horizon())
    }

    /// Central difference of `f` at `t`, one-sided (second order) at the ends.
    pub fn derivative(&self, t: T, f: impl Fn(T) -> T) -> T {
        let h = self.diff_step;
        let big_t = self.horizon();
        let two = T::lit(2.0);
        if t - h < T::zero() {
            (T::lit(-3.0) * f(t) + T::lit(4.0) * f(t + h) - f(t + two * h)) / (two * h)
        } else if t + h > big_t {
            (T::lit(3.0) * f(t) - T::lit(4.0) * f(t - h) + f(t - two * h)) / (two * h)
        } else {
            (f(t + h) - f(t - h)) / (two * h)
        }
    }
}

/// Bridge between two Gaussians for a given schedule.
#[derive(Clone)]
pub struct GaussianBridgePath<T: Real> {
    pub schedule: BridgeSchedule<T>,
    pub start: GaussianMarginal<T>,
    pub end: GaussianMarginal<T>,
    /// `C_{σ⋆} = Cov(X₀, X_T)` under the bridge.
    pub c_sigma_star: DMatrix<T>,
}

impl<T: Real> GaussianBridgePath<T> {
    /// The cross block is the entropic coupling of the rescaled start `τ_T X₀ + ζ(T)`
    /// (noise level `κ(T,T)`) with the end, divided back by `τ_T`.
    pub fn new(schedule: &BridgeSchedule<T>, start: &GaussianMarginal<T>, end: &GaussianMarginal<T>) -> Result<Self> {
        let d = schedule.reference.dim;
        if start.dim() != d || end.dim() != d {
            return invalid("marginal dimension differs from the reference");
        }
        let big_t = schedule.horizon();
        let tau_t = schedule.tau(big_t);
        let noise = schedule.kappa(big_t, big_t).sqrt();
        let mu_tilde = &start.mean * tau_t + schedule.zeta(big_t);
        let cov_tilde = &start.cov * (tau_t * tau_t);
        let joint = gaussian_eot_closed_form(&mu_tilde, &cov_tilde, &end.mean, &end.cov, noise)?;
        Ok(GaussianBridgePath {
            schedule: schedule.clone(),
            start: start.clone(),
            end: end.clone(),
            c_sigma_star: joint.cross / tau_t,
        })
    }

    pub fn horizon(&self) -> T {
        self.schedule.horizon()
    }

    pub fn mean(&self, t: T) -> DVector<T> {
        let s = &self.schedule;
        let big_t = self.horizon();
        let r = s.r(t);
        &self.start.mean * s.r_bar(t) + &self.end.mean * r + s.zeta(t) - s.zeta(big_t) * r
    }

    pub fn cov(&self, t: T) -> DMatrix<T> {
        let s = &self.schedule;
        let d = self.start.dim();
        let (r, rb) = (s.r(t), s.r_bar(t));
        let c = &self.c_sigma_star;
        let noise = s.kappa(t, t) * (T::one() - s.rho(t));
        &self.start.cov * (rb * rb) + &self.end.cov * (r * r) + (c + c.transpose()) * (r * rb) + DMatrix::identity(d, d) * noise
    }

    pub fn mean_dot(&self, t: T) -> DVector<T> {
        let d = self.start.dim();
        DVector::from_iterator(d, (0..d).map(|i| self.schedule.derivative(t, |s| self.mean(s)[i])))
    }

    /// `S_t = P_t − Q_tᵀ + (c_t κ(t,t)(1−ρ_t) − σ_t² ρ_t) I`.
    pub fn s_matrix(&self, t: T) -> DMatrix<T> {
        let s = &self.schedule;
        let d = self.start.dim();
        let c = &self.c_sigma_star;
        let (r, rb) = (s.r(t), s.r_bar(t));
        let r_dot = s.derivative(t, |u| s.r(u));
        let rb_dot = s.derivative(t, |u| s.r_bar(u));
        let p = (&self.end.cov * r + c * rb) * r_dot;
        let q = (&self.start.cov * rb + c * r) * (-rb_dot);
        let ct = (s.reference.c_of_t)(t);
        let sig = (s.reference.sigma_of_t)(t);
        let scalar = ct * s.kappa(t, t) * (T::one() - s.rho(t)) - sig * sig * s.rho(t);
        p - q.transpose() + DMatrix::identity(d, d) * scalar
    }

    /// Drift as an affine map `f(x) = A x + b` at time `t`, with `A = S_tᵀ Σ_t^{-1}`.
    pub fn affine_drift(&self, t: T) -> Result<(DMatrix<T>, DVector<T>)> {
        let sigma = jittered(self.cov(t));
        let inv = match sigma.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => return numerical(format!("bridge covariance singular at t = {}", t.to_f64_lossy())),
        };
        let a = self.s_matrix(t).transpose() * inv;
        let b = self.mean_dot(t) - &a * self.mean(t);
        Ok((a, b))
    }

    /// Tabulates the affine drift on `times` for repeated evaluation.
    pub fn drift_table(&self, times: &[T]) -> Result<AffineDriftTable<T>> {
        let mut entries = Vec::with_capacity(times.len());
        for &t in times {
            entries.push(self.affine_drift(t)?);
        }
        Ok(AffineDriftTable { times: times.to_vec(), entries })
    }
}

fn jittered<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(T::zero(), |a, b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(T::max_value().unwrap(), |a, b| a.min(*b));
    if min <= T::zero() || max / min > T::lit(1e12) {
        let d = m.nrows();
        m + DMatrix::identity(d, d) * T::lit(1e-10)
    } else {
        m
    }
}

/// `(μ⋆_t, Σ⋆_t)` of the bridge.
pub fn bridge_moments<T: Real>(path: &GaussianBridgePath<T>, t: T) -> Result<(DVector<T>, DMatrix<T>)> {
    if t < T::zero() || t > path.horizon() {
        return invalid(format!("t = {} outside [0, T]", t.to_f64_lossy()));
    }
    Ok((path.mean(t), path.cov(t)))
}

/// `f(x, t) = S_tᵀ Σ_t^{-1}(x − μ⋆_t) + μ̇⋆_t`.
pub fn bridge_drift<T: Real>(path: &GaussianBridgePath<T>, x: &DVector<T>, t: T) -> Result<DVector<T>> {
    if t < T::zero() || t > path.horizon() {
        return invalid(format!("t = {} outside [0, T]", t.to_f64_lossy()));
    }
    let (a, b) = path.affine_drift(t)?;
    Ok(a * x + b)
}

/// Affine drift sampled on a time grid; linear interpolation in between.
#[derive(Clone, Debug)]
pub struct AffineDriftTable<T: Real> {
    pub times: Vec<T>,
    pub entries: Vec<(DMatrix<T>, DVector<T>)>,
}

impl<T: Real> AffineDriftTable<T> {
    pub fn eval(&self, x: &[T], t: T, out: &mut [T]) {
        let n = self.times.len();
        let k = self.times.partition_point(|s| *s <= t).clamp(1, n) - 1;
        let (w0, k1) = if k + 1 < n && self.times[k + 1] > self.times[k] {
            let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
            (T::one() - w.max(T::zero()).min(T::one()), k + 1)
        } else {
            (T::one(), k)
        };
        let w1 = T::one() - w0;
        let (a0, b0) = &self.entries[k];
        let (a1, b1) = &self.entries[k1];
        for i in 0..out.len() {
            let mut v0 = b0[i];
            let mut v1 = b1[i];
            for j in 0..x.len() {
                v0 += a0[(i, j)] * x[j];
                v1 += a1[(i, j)] * x[j];
            }
            out[i] = w0 * v0 + w1 * v1;
        }
    }
}

/// Solves `ΣA + AΣ = U` for symmetric `A`.
pub fn lyapunov_solve<T: Real>(sigma: &DMatrix<T>, u: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_spd(sigma)?;
    if u.nrows() != sigma.nrows() || !u.is_square() {
        return invalid("U has the wrong shape");
    }
    let scale = u.amax().max(T::one());
    if (u - u.transpose()).amax() > T::lit(1e-12).max(T::default_epsilon() * T::lit(100.0)) * scale {
        return invalid("U is not symmetric");
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let v = &eig.eigenvectors;
    let mut ut = v.transpose() * u * v;
    let l = &eig.eigenvalues;
    for i in 0..ut.nrows() {
        for j in 0..ut.ncols() {
            ut[(i, j)] /= l[i] + l[j];
        }
    }
    let a = v * ut * v.transpose();
    Ok((&a + a.transpose()) * T::lit(0.5))
}

/// Bures–Wasserstein action of a covariance path on a uniform grid over `[0, T]`:
/// trapezoidal sum of `½‖Σ̇‖²_Σ + (σ⁴/8) Tr(Σ^{-1})`, where `‖Σ̇‖²_Σ = ½Tr(L_Σ[Σ̇] Σ̇)`.
pub fn bw_action<T: Real>(cov_path: &[DMatrix<T>], horizon: T, sigma_of_t: &dyn Fn(T) -> T) -> Result<T> {
    let n = cov_path.len();
    if n < 3 {
        return invalid("covariance path needs at least 3 points");
    }
    let h = horizon / T::lit((n - 1) as f64);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for k in 0..n {
        let dot = if k == 0 {
            (&cov_path[1] * T::lit(4.0) - &cov_path[0] * T::lit(3.0) - &cov_path[2]) / (two * h)
        } else if k == n - 1 {
            (&cov_path[k] * T::lit(3.0) - &cov_path[k - 1] * T::lit(4.0) + &cov_path[k - 2]) / (two * h)
        } else {
            (&cov_path[k + 1] - &cov_path[k - 1]) / (two * h)
        };
        let dot = (&dot + dot.transpose()) * T::lit(0.5);
        let l = lyapunov_solve(&cov_path[k], &dot)?;
        let metric = (l * &dot).trace() * T::lit(0.5);
        let inv = cov_path[k].clone().try_inverse().ok_or_else(|| crate::BridgeError::Numerical("singular covariance".into()))?;
        let s = sigma_of_t(h * T::lit(k as f64));
        let integrand = metric * T::lit(0.5) + s.powi(4) / T::lit(8.0) * inv.trace();
        let w = if k == 0 || k == n - 1 { T::lit(0.5) } else { T::one() };
        total += w * h * integrand;
    }
    Ok(total)
}
