//! Static Schrödinger bridges: entropic optimal transport on finite supports.
//!
//! Objective convention: `<c, π> + ε·KL(π ‖ π₀⊗π_T)`. The Gaussian closed form
//! uses the weight `2σ²`, so callers pass `ε = 2σ²` when comparing the two.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{invalid, numerical, Result};
use crate::Real;

/// Weighted finite support.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure<T: Real> {
    pub points: Vec<DVector<T>>,
    pub weights: Vec<T>,
}

impl<T: Real> DiscreteMeasure<T> {
    pub fn new(points: Vec<DVector<T>>, weights: Vec<T>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return invalid("points and weights must be non-empty and equally long");
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return invalid("weights must be nonnegative");
        }
        let total = weights.iter().fold(T::zero(), |a, b| a + *b);
        if (total - T::one()).abs() > mass_tol::<T>() {
            return invalid(format!("weights sum to {} instead of 1", total.to_f64_lossy()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return invalid("points have mixed dimensions");
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return invalid(format!("points {j} and {i} coincide"));
                }
            }
        }
        Ok(DiscreteMeasure { points, weights })
    }

    /// Measure on the labels `0..n` (used for finite state spaces).
    pub fn on_labels(weights: Vec<T>) -> Result<Self> {
        let points = (0..weights.len()).map(|k| DVector::from_element(1, T::lit(k as f64))).collect();
        Self::new(points, weights)
    }

    /// Normalise nonnegative masses on a 1-D grid.
    pub fn from_grid_masses(xs: &[T], masses: &[T]) -> Result<Self> {
        let total = masses.iter().fold(T::zero(), |a, b| a + *b);
        if !(total > T::zero()) {
            return invalid("grid masses sum to zero");
        }
        let points = xs.iter().map(|x| DVector::from_element(1, *x)).collect();
        Self::new(points, masses.iter().map(|m| *m / total).collect())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for (p, w) in self.points.iter().zip(&self.weights) {
            m += p * *w;
        }
        m
    }
}

fn mass_tol<T: Real>() -> T {
    let eps = T::default_epsilon() * T::lit(1e4);
    if eps > T::lit(1e-12) {
        eps
    } else {
        T::lit(1e-12)
    }
}

/// Transport plan over source × target supports.
#[derive(Clone, Debug)]
pub struct Coupling<T: Real> {
    pub weights: DMatrix<T>,
}

impl<T: Real> Coupling<T> {
    pub fn product(source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>) -> Self {
        let w = DMatrix::from_fn(source.len(), target.len(), |i, j| source.weights[i] * target.weights[j]);
        Coupling { weights: w }
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.weights.row_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        self.weights.column_iter().map(|c| c.sum()).collect()
    }

    pub fn mass(&self) -> T {
        self.weights.sum()
    }

    /// Total-variation errors of the (row, column) marginals.
    pub fn marginal_errors(&self, source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>) -> (T, T) {
        (tv(&self.row_sums(), &source.weights), tv(&self.col_sums(), &target.weights))
    }

    /// Cross-covariance block `E[(X - EX)(Y - EY)^T]` with `(X, Y)` drawn from the plan.
    pub fn cross_covariance(&self, source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>) -> DMatrix<T> {
        let mass = self.mass();
        let mut mx = DVector::zeros(source.dim());
        let mut my = DVector::zeros(target.dim());
        for i in 0..source.len() {
            for j in 0..target.len() {
                let w = self.weights[(i, j)] / mass;
                mx += &source.points[i] * w;
                my += &target.points[j] * w;
            }
        }
        let mut c = DMatrix::zeros(source.dim(), target.dim());
        for i in 0..source.len() {
            let dx = &source.points[i] - &mx;
            for j in 0..target.len() {
                let w = self.weights[(i, j)] / mass;
                if w != T::zero() {
                    let dy = &target.points[j] - &my;
                    c += (&dx * dy.transpose()) * w;
                }
            }
        }
        c
    }
}

fn tv<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + (*x - *y).abs()) * T::lit(0.5)
}

/// Schrödinger potentials `(φ, φ̂)`.
#[derive(Clone, Debug)]
pub struct DualPotentials<T: Real> {
    pub phi: DVector<T>,
    pub phi_hat: DVector<T>,
}

impl<T: Real> DualPotentials<T> {
    pub fn zeros(n: usize, m: usize) -> Self {
        DualPotentials { phi: DVector::zeros(n), phi_hat: DVector::zeros(m) }
    }

    /// `(φ + c, φ̂ − c)`, which induces the same coupling.
    pub fn shifted(&self, c: T) -> Self {
        DualPotentials {
            phi: self.phi.map(|x| x + c),
            phi_hat: self.phi_hat.map(|x| x - c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornConfig<T: Real> {
    pub epsilon: T,
    pub max_iters: usize,
    pub marginal_tol: T,
    pub log_domain: bool,
}

impl<T: Real> Default for SinkhornConfig<T> {
    fn default() -> Self {
        SinkhornConfig { epsilon: T::one(), max_iters: 10_000, marginal_tol: T::lit(1e-9), log_domain: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SinkhornReport<T: Real + Serialize> {
    pub iterations_used: usize,
    pub converged: bool,
    /// Dual objective at the start and after every half-step.
    pub dual_objective_trace: Vec<T>,
    /// Total-variation error of the unconstrained marginal after every iteration.
    pub marginal_error_trace: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution<T: Real + Serialize> {
    pub coupling: Coupling<T>,
    pub potentials: DualPotentials<T>,
    pub report: SinkhornReport<T>,
}

fn check_problem<T: Real>(source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>, cost: &DMatrix<T>) -> Result<()> {
    if cost.nrows() != source.len() || cost.ncols() != target.len() {
        return invalid(format!(
            "cost is {}x{} but supports have sizes {} and {}",
            cost.nrows(),
            cost.ncols(),
            source.len(),
            target.len()
        ));
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return invalid(format!("cost entry ({}, {}) is not finite", k % cost.nrows(), k / cost.nrows()));
    }
    Ok(())
}

fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::min_value().unwrap(), |a, b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let s = xs.fold(T::zero(), |a, b| a + (b - m).exp());
    m + s.ln()
}

/// Sinkhorn iterations for the entropic problem.
///
/// Starts from `φ ≡ 0`, updates `φ̂` then `φ` each iteration, and stops once
/// both marginal TV errors are below `marginal_tol`. Points with zero weight
/// are dropped while iterating; their potentials are filled in afterwards by
/// the same update formula.
pub fn sinkhorn_solve<T: Real + Serialize>(
    source: &DiscreteMeasure<T>,
    target: &DiscreteMeasure<T>,
    cost: &DMatrix<T>,
    config: &SinkhornConfig<T>,
) -> Result<SinkhornSolution<T>> {
    check_problem(source, target, cost)?;
    if !(config.epsilon > T::zero()) || !(config.marginal_tol > T::zero()) {
        return invalid("epsilon and marginal_tol must be positive");
    }
    let eps = config.epsilon;
    let rows: Vec<usize> = (0..source.len()).filter(|&i| source.weights[i] > T::zero()).collect();
    let cols: Vec<usize> = (0..target.len()).filter(|&j| target.weights[j] > T::zero()).collect();
    let a: Vec<T> = rows.iter().map(|&i| source.weights[i]).collect();
    let b: Vec<T> = cols.iter().map(|&j| target.weights[j]).collect();
    let c = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])]);
    let log_a: Vec<T> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<T> = b.iter().map(|x| x.ln()).collect();

    let mut phi = vec![T::zero(); rows.len()];
    let mut phi_hat = vec![T::zero(); cols.len()];
    let mut dual_trace = vec![reduced_dual(&phi, &phi_hat, &a, &b, &c, eps)];
    let mut err_trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    // Multiplicative form keeps the kernel and scalings u = e^{φ/ε}, v = e^{φ̂/ε}.
    let kernel = if config.log_domain { None } else { Some(c.map(|x| (-x / eps).exp())) };
    let mut u = vec![T::one(); rows.len()];
    let mut v = vec![T::one(); cols.len()];

    while iters < config.max_iters {
        iters += 1;
        match &kernel {
            None => {
                for j in 0..cols.len() {
                    phi_hat[j] = -eps * log_sum_exp((0..rows.len()).map(|i| log_a[i] + (phi[i] - c[(i, j)]) / eps));
                }
                dual_trace.push(reduced_dual(&phi, &phi_hat, &a, &b, &c, eps));
                for i in 0..rows.len() {
                    phi[i] = -eps * log_sum_exp((0..cols.len()).map(|j| log_b[j] + (phi_hat[j] - c[(i, j)]) / eps));
                }
            }
            Some(k) => {
                for j in 0..cols.len() {
                    let s = (0..rows.len()).fold(T::zero(), |acc, i| acc + a[i] * k[(i, j)] * u[i]);
                    v[j] = T::one() / s;
                    phi_hat[j] = eps * v[j].ln();
                }
                dual_trace.push(reduced_dual(&phi, &phi_hat, &a, &b, &c, eps));
                for i in 0..rows.len() {
                    let s = (0..cols.len()).fold(T::zero(), |acc, j| acc + b[j] * k[(i, j)] * v[j]);
                    u[i] = T::one() / s;
                    phi[i] = eps * u[i].ln();
                }
            }
        }
        if phi.iter().chain(phi_hat.iter()).any(|x| !x.is_finite()) {
            return numerical(format!(
                "Sinkhorn potentials became non-finite at iteration {iters} (epsilon {}); use the log-domain solver",
                eps.to_f64_lossy()
            ));
        }
        dual_trace.push(reduced_dual(&phi, &phi_hat, &a, &b, &c, eps));
        // Rows are exact after the φ update; the columns carry the error.
        let mut err = T::zero();
        for j in 0..cols.len() {
            let col = (0..rows.len()).fold(T::zero(), |acc, i| {
                acc + ((phi[i] + phi_hat[j] - c[(i, j)]) / eps).exp() * a[i] * b[j]
            });
            err += (col - b[j]).abs();
        }
        err *= T::lit(0.5);
        err_trace.push(err);
        if err <= config.marginal_tol {
            converged = true;
            break;
        }
    }

    // Extend the potentials to stripped points through the update formulas.
    let mut full = DualPotentials::zeros(source.len(), target.len());
    for (k, &j) in cols.iter().enumerate() {
        full.phi_hat[j] = phi_hat[k];
    }
    for j in 0..target.len() {
        if target.weights[j] == T::zero() {
            full.phi_hat[j] = -eps * log_sum_exp((0..rows.len()).map(|i| log_a[i] + (phi[i] - cost[(rows[i], j)]) / eps));
        }
    }
    for (k, &i) in rows.iter().enumerate() {
        full.phi[i] = phi[k];
    }
    for i in 0..source.len() {
        if source.weights[i] == T::zero() {
            full.phi[i] = -eps * log_sum_exp((0..cols.len()).map(|j| log_b[j] + (phi_hat[j] - cost[(i, cols[j])]) / eps));
        }
    }
    let coupling = coupling_from_potentials(&full, source, target, cost, eps)?;
    Ok(SinkhornSolution {
        coupling,
        potentials: full,
        report: SinkhornReport {
            iterations_used: iters,
            converged,
            dual_objective_trace: dual_trace,
            marginal_error_trace: err_trace,
        },
    })
}

fn reduced_dual<T: Real>(phi: &[T], phi_hat: &[T], a: &[T], b: &[T], c: &DMatrix<T>, eps: T) -> T {
    let lin = phi.iter().zip(a).fold(T::zero(), |s, (p, w)| s + *p * *w)
        + phi_hat.iter().zip(b).fold(T::zero(), |s, (p, w)| s + *p * *w);
    let terms = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j)));
    let log_mass = log_sum_exp(terms.map(|(i, j)| (phi[i] + phi_hat[j] - c[(i, j)]) / eps + a[i].ln() + b[j].ln()));
    lin - eps * (log_mass.exp() - T::one())
}

/// Dual objective `∫φ dπ₀ + ∫φ̂ dπ_T − ε(∫e^{(φ⊕φ̂−c)/ε} d(π₀⊗π_T) − 1)`.
pub fn dual_objective<T: Real>(
    potentials: &DualPotentials<T>,
    source: &DiscreteMeasure<T>,
    target: &DiscreteMeasure<T>,
    cost: &DMatrix<T>,
    epsilon: T,
) -> Result<T> {
    check_problem(source, target, cost)?;
    if potentials.phi.len() != source.len() || potentials.phi_hat.len() != target.len() {
        return invalid("potential lengths do not match the supports");
    }
    let rows: Vec<usize> = (0..source.len()).filter(|&i| source.weights[i] > T::zero()).collect();
    let cols: Vec<usize> = (0..target.len()).filter(|&j| target.weights[j] > T::zero()).collect();
    let phi: Vec<T> = rows.iter().map(|&i| potentials.phi[i]).collect();
    let phi_hat: Vec<T> = cols.iter().map(|&j| potentials.phi_hat[j]).collect();
    let a: Vec<T> = rows.iter().map(|&i| source.weights[i]).collect();
    let b: Vec<T> = cols.iter().map(|&j| target.weights[j]).collect();
    let c = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])]);
    let g = reduced_dual(&phi, &phi_hat, &a, &b, &c, epsilon);
    if !g.is_finite() {
        return numerical("dual objective overflowed even in log-domain");
    }
    Ok(g)
}

/// Primal value `<c, π> + ε·KL(π ‖ π₀⊗π_T)`.
pub fn primal_objective<T: Real>(
    coupling: &Coupling<T>,
    source: &DiscreteMeasure<T>,
    target: &DiscreteMeasure<T>,
    cost: &DMatrix<T>,
    epsilon: T,
) -> Result<T> {
    check_problem(source, target, cost)?;
    let prod = Coupling::product(source, target);
    let kl = kl_discrete(coupling.weights.as_slice(), prod.weights.as_slice())?;
    Ok(coupling.weights.component_mul(cost).sum() + epsilon * kl)
}

/// `exp((φ_i + φ̂_j − c_ij)/ε)·π₀(i)·π_T(j)`, without renormalisation.
pub fn coupling_from_potentials<T: Real>(
    potentials: &DualPotentials<T>,
    source: &DiscreteMeasure<T>,
    target: &DiscreteMeasure<T>,
    cost: &DMatrix<T>,
    epsilon: T,
) -> Result<Coupling<T>> {
    check_problem(source, target, cost)?;
    let w = DMatrix::from_fn(source.len(), target.len(), |i, j| {
        if source.weights[i] == T::zero() || target.weights[j] == T::zero() {
            return T::zero();
        }
        ((potentials.phi[i] + potentials.phi_hat[j] - cost[(i, j)]) / epsilon).exp()
            * source.weights[i]
            * target.weights[j]
    });
    if w.iter().any(|x| !x.is_finite()) {
        return numerical("coupling entry is not finite");
    }
    Ok(Coupling { weights: w })
}

/// `Σ p_i log(p_i / q_i)` with `0·log 0 = 0`; `+∞` when `p` is not dominated by `q`.
pub fn kl_discrete<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return invalid("KL arguments have different lengths");
    }
    if p.iter().chain(q).any(|x| *x < T::zero()) {
        return invalid("KL arguments must be nonnegative");
    }
    let mut s = T::zero();
    for (pi, qi) in p.iter().zip(q) {
        if *pi == T::zero() {
            continue;
        }
        if *qi == T::zero() {
            return Ok(T::one() / T::zero());
        }
        s += *pi * (*pi / *qi).ln();
    }
    // Rounding can leave tiny negative values for p ≈ q.
    Ok(if s < T::zero() { T::zero() } else { s })
}

/// Squared-Euclidean cost between two supports.
pub fn squared_euclidean_cost<T: Real>(source: &DiscreteMeasure<T>, target: &DiscreteMeasure<T>) -> DMatrix<T> {
    DMatrix::from_fn(source.len(), target.len(), |i, j| (&source.points[i] - &target.points[j]).norm_squared())
}

/// Joint Gaussian law of the entropic coupling between two Gaussians.
#[derive(Clone, Debug)]
pub struct GaussianCoupling<T: Real> {
    /// Stacked mean `(μ₀, μ_T)`.
    pub mean: DVector<T>,
    /// Block covariance `[[Σ₀, C], [Cᵀ, Σ_T]]`.
    pub cov: DMatrix<T>,
    /// Cross block `C_σ`.
    pub cross: DMatrix<T>,
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    spd_power(m, T::lit(0.5))
}

pub(crate) fn spd_power<T: Real>(m: &DMatrix<T>, p: T) -> Result<DMatrix<T>> {
    check_spd(m)?;
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|l| l.powf(p));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

pub(crate) fn check_spd<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if !m.is_square() {
        return invalid("matrix is not square");
    }
    let asym = (m - m.transpose()).amax();
    let scale = m.amax().max(T::one());
    if asym > T::lit(1e-10).max(T::default_epsilon() * T::lit(100.0)) * scale {
        return invalid(format!("matrix is not symmetric (max asymmetry {:e})", asym.to_f64_lossy()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().fold(T::max_value().unwrap(), |a, b| a.min(*b));
    if !(min > T::zero()) {
        return invalid(format!("matrix is not positive definite (min eigenvalue {:e})", min.to_f64_lossy()));
    }
    Ok(())
}

/// Entropic coupling of `N(μ₀, Σ₀)` and `N(μ_T, Σ_T)` for the cost `‖x−y‖² + 2σ²·KL`.
///
/// `C_σ = ½(Σ₀^{1/2} D_σ Σ₀^{-1/2} − σ²I)` with `D_σ = (4Σ₀^{1/2}Σ_TΣ₀^{1/2} + σ⁴I)^{1/2}`.
pub fn gaussian_eot_closed_form<T: Real>(
    mu0: &DVector<T>,
    sigma0: &DMatrix<T>,
    mu_t: &DVector<T>,
    sigma_t: &DMatrix<T>,
    sigma: T,
) -> Result<GaussianCoupling<T>> {
    let d = mu0.len();
    if mu_t.len() != d || sigma0.nrows() != d || sigma_t.nrows() != d {
        return invalid("Gaussian marginals have mismatched dimensions");
    }
    if sigma < T::zero() {
        return invalid("sigma must be nonnegative");
    }
    let s0h = spd_sqrt(sigma0)?;
    let s0hi = spd_power(sigma0, T::lit(-0.5))?;
    check_spd(sigma_t)?;
    let s4 = sigma.powi(4);
    let inner = (&s0h * sigma_t * &s0h) * T::lit(4.0) + DMatrix::identity(d, d) * s4;
    let inner = (&inner + inner.transpose()) * T::lit(0.5);
    let dsig = spd_sqrt(&inner)?;
    let cross = (&s0h * dsig * s0hi - DMatrix::identity(d, d) * (sigma * sigma)) * T::lit(0.5);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(sigma0);
    cov.view_mut((d, d), (d, d)).copy_from(sigma_t);
    cov.view_mut((0, d), (d, d)).copy_from(&cross);
    cov.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(mu0);
    mean.rows_mut(d, d).copy_from(mu_t);
    Ok(GaussianCoupling { mean, cov, cross })
}
