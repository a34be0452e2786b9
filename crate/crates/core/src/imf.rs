//! Iterative Markovian Fitting on the line with a Brownian reference `σB`.
//!
//! Markovian projections are fitted by per-time-bin ridge regression of the pinned
//! bridge drift `(x_T − x_t)/(σ(T − t))`; reciprocal projections keep only endpoint
//! pairs, the bridge between them being the reference one.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, BridgeError, Result};
use crate::path_sim::{simulate_on_grid, uniform_grid, InitLaw, PathEnsemble, PointCloud, SdeSpec, VectorField, ZeroField};
use crate::rng::{stream, sub_seed};
use crate::stats::{ks_statistic, Estimate};

/// Leading unpenalised features: `1, x, τ, τx` with `τ` the scaled offset from the bin centre.
const LINEAR_FEATURES: usize = 4;

/// Control `u(x, t)` linear in features within each of `n_bins` equal time bins.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DriftModel {
    pub horizon: f64,
    pub n_bins: usize,
    /// Radial-basis centres per bin.
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
    /// `n_bins × n_features`, row-major.
    pub weights: Vec<f64>,
    /// Set when some bin needed a larger ridge than requested.
    pub rank_deficient: bool,
}

impl DriftModel {
    pub fn zeros(horizon: f64, n_bins: usize) -> Self {
        DriftModel {
            horizon,
            n_bins,
            centers: vec![Vec::new(); n_bins],
            widths: vec![1.0; n_bins],
            weights: vec![0.0; n_bins * LINEAR_FEATURES],
            rank_deficient: false,
        }
    }

    pub fn n_features(&self) -> usize {
        LINEAR_FEATURES + self.centers.first().map_or(0, |c| c.len())
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|k| self.horizon * k as f64 / self.n_bins as f64).collect()
    }

    fn bin_of(&self, t: f64) -> usize {
        ((t / self.horizon * self.n_bins as f64).floor().max(0.0) as usize).min(self.n_bins - 1)
    }

    fn features(&self, bin: usize, x: f64, t: f64, out: &mut [f64]) {
        let width = self.horizon / self.n_bins as f64;
        let tau = (t - (bin as f64 + 0.5) * width) / width;
        out[0] = 1.0;
        out[1] = x;
        out[2] = tau;
        out[3] = tau * x;
        let h = self.widths[bin];
        for (o, c) in out[LINEAR_FEATURES..].iter_mut().zip(&self.centers[bin]) {
            *o = (-0.5 * ((x - c) / h).powi(2)).exp();
        }
    }

    pub fn eval1(&self, x: f64, t: f64) -> f64 {
        let bin = self.bin_of(t);
        let nf = self.n_features();
        let mut f = vec![0.0; nf];
        self.features(bin, x, t, &mut f);
        f.iter().zip(&self.weights[bin * nf..(bin + 1) * nf]).map(|(a, b)| a * b).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("drift model serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| BridgeError::InvalidInput(format!("bad drift model JSON: {e}")))
    }
}

impl VectorField for DriftModel {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out[0] = self.eval1(x[0], t);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionSample {
    pub t: f64,
    pub x: f64,
    pub target: f64,
}

/// For every pair draws `n_t_per_pair` times uniformly on `(0, T − t_clip)`, a bridge state
/// `x_t`, and the target `(x_T − x_t)/(σ(T − t))`.
pub fn make_regression_dataset(
    pairs: &[(f64, f64)],
    sigma: f64,
    horizon: f64,
    n_t_per_pair: usize,
    t_clip: f64,
    seed: u64,
) -> Result<Vec<RegressionSample>> {
    if !(sigma > 0.0) || !(horizon > 0.0) || !(t_clip >= 0.0 && t_clip < horizon) {
        return invalid("need σ > 0, T > 0 and 0 ≤ t_clip < T");
    }
    Ok(pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &(x0, xt_end))| {
            let mut rng = stream(seed, i as u64);
            (0..n_t_per_pair)
                .map(|_| {
                    let t = rng.gen::<f64>() * (horizon - t_clip);
                    let s = t / horizon;
                    let sd = sigma * (t * (horizon - t) / horizon).sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    let x = (1.0 - s) * x0 + s * xt_end + sd * z;
                    RegressionSample { t, x, target: (xt_end - x) / (sigma * (horizon - t)) }
                })
                .collect::<Vec<_>>()
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_bins: usize,
    pub n_centers: usize,
    pub ridge: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_bins: 16, n_centers: 32, ridge: 1e-6 }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Per-bin least squares `min (1/n)Σ(target − wᵀφ)² + λ‖w_rbf‖²`; the radial-basis weights
/// carry the ridge, the linear block does not. Bins with fewer than 10 samples are a fault.
pub fn markov_projection_fit(dataset: &[RegressionSample], horizon: f64, config: &ModelConfig) -> Result<DriftModel> {
    if config.n_bins == 0 {
        return invalid("need at least one time bin");
    }
    let mut model = DriftModel::zeros(horizon, config.n_bins);
    let mut by_bin: Vec<Vec<RegressionSample>> = vec![Vec::new(); config.n_bins];
    for s in dataset {
        if !(s.t >= 0.0 && s.t <= horizon) || !s.x.is_finite() || !s.target.is_finite() {
            return invalid(format!("regression sample outside [0, T] or non-finite: {s:?}"));
        }
        by_bin[model.bin_of(s.t)].push(*s);
    }
    if let Some(k) = by_bin.iter().position(|b| b.len() < 10) {
        return invalid(format!("time bin {k} has {} samples, at least 10 are needed", by_bin[k].len()));
    }
    for (k, samples) in by_bin.iter().enumerate() {
        let mut xs: Vec<f64> = samples.iter().map(|s| s.x).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = (quantile(&xs, 0.005), quantile(&xs, 0.995));
        let m = config.n_centers;
        model.centers[k] = (0..m)
            .map(|i| if m == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 })
            .collect();
        model.widths[k] = if m > 1 { ((hi - lo) / (m - 1) as f64).max(1e-6) } else { (hi - lo).max(1e-6) };
    }
    let nf = model.n_features();
    model.weights = vec![0.0; config.n_bins * nf];
    let fits: Vec<(Vec<f64>, bool)> = by_bin
        .par_iter()
        .enumerate()
        .map(|(k, samples)| {
            let n = samples.len() as f64;
            let mut gram = DMatrix::<f64>::zeros(nf, nf);
            let mut rhs = DVector::<f64>::zeros(nf);
            let mut f = vec![0.0; nf];
            for s in samples {
                model.features(k, s.x, s.t, &mut f);
                for a in 0..nf {
                    rhs[a] += f[a] * s.target / n;
                    for b in a..nf {
                        gram[(a, b)] += f[a] * f[b] / n;
                    }
                }
            }
            for a in 0..nf {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            let mut ridge = config.ridge;
            let mut flagged = false;
            loop {
                let mut g = gram.clone();
                for a in 0..nf {
                    if a >= LINEAR_FEATURES || flagged {
                        g[(a, a)] += ridge;
                    }
                }
                if let Some(ch) = g.cholesky() {
                    let diag = ch.l_dirty().diagonal();
                    let (dmin, dmax) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(*d), b.max(*d)));
                    if dmin > 1e-7 * dmax {
                        return (ch.solve(&rhs).iter().copied().collect(), flagged);
                    }
                }
                flagged = true;
                ridge = (ridge * 1e3).max(1e-8);
            }
        })
        .collect();
    for (k, (w, flag)) in fits.into_iter().enumerate() {
        model.weights[k * nf..(k + 1) * nf].copy_from_slice(&w);
        model.rank_deficient |= flag;
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Simulate `dX = σu dt + σdB` from `π₀`; pairs are `(x₀, X_T)`.
    Forward,
    /// The model drives the reversed process from `π_T`; pairs are `(Y_T, x_T)`.
    Reverse,
}

/// Endpoint pairs harvested by simulating the Markov model from `start`.
pub fn reciprocal_projection(
    model: &DriftModel,
    start: &InitLaw,
    direction: Direction,
    sigma: f64,
    n: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let ens = simulate_model(model, start, sigma, n, n_steps, seed, false)?;
    Ok(endpoint_pairs(&ens, direction))
}

fn simulate_model(model: &DriftModel, start: &InitLaw, sigma: f64, n: usize, n_steps: usize, seed: u64, keep: bool) -> Result<PathEnsemble> {
    if start.dim() != 1 {
        return invalid("the start law must be one-dimensional");
    }
    let sig = move |_: f64| sigma;
    let spec = SdeSpec { ref_drift: &ZeroField, control: Some(model), sigma_of_t: &sig, horizon: model.horizon, dim: 1 };
    simulate_on_grid(&spec, start, n, &uniform_grid(model.horizon, n_steps), seed, keep)
}

fn endpoint_pairs(ens: &PathEnsemble, direction: Direction) -> Vec<(f64, f64)> {
    let last = ens.n_times() - 1;
    (0..ens.n_paths)
        .map(|p| {
            let (a, b) = (ens.state(p, 0)[0], ens.state(p, last)[0]);
            match direction {
                Direction::Forward => (a, b),
                Direction::Reverse => (b, a),
            }
        })
        .collect()
}

/// Reference control `u⋆(x, t)` and the points where the fitted drift is compared to it.
#[derive(Clone)]
pub struct DriftOracle {
    pub control: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// `(x, t)` evaluation points.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone)]
pub enum ImfInit {
    /// `π₀ ⊗ π_T`.
    Independent,
    /// A given coupling, e.g. from Sinkhorn.
    Pairs(Vec<(f64, f64)>),
}

#[derive(Clone)]
pub struct ImfConfig {
    /// Pairs per iteration.
    pub n_samples: usize,
    pub n_t_per_pair: usize,
    pub n_steps: usize,
    /// As a fraction of `T`.
    pub t_clip: f64,
    pub model: ModelConfig,
    pub init: ImfInit,
    /// Reuse the same random streams at every iteration, so that successive iterates
    /// differ only through the coupling.
    pub common_random_numbers: bool,
    pub oracle: Option<DriftOracle>,
}

impl Default for ImfConfig {
    fn default() -> Self {
        ImfConfig {
            n_samples: 20_000,
            n_t_per_pair: 4,
            n_steps: 100,
            t_clip: 0.01,
            model: ModelConfig::default(),
            init: ImfInit::Independent,
            common_random_numbers: true,
            oracle: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImfState {
    pub coupling_samples: Vec<(f64, f64)>,
    pub forward_model: DriftModel,
    pub reverse_model: DriftModel,
    pub iteration: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImfIteration {
    pub iteration: usize,
    /// `KL(Mⁿ ‖ Mⁿ⁻¹)` between successive forward Markov models, `M⁰` the reference.
    pub kl: Estimate,
    pub drift_rmse: Option<f64>,
    /// KS statistic of forward-harvested `X_T` against `π_T` samples.
    pub ks_terminal: f64,
    /// KS statistic of reverse-harvested `X₀` against `π₀` samples.
    pub ks_initial: f64,
    /// Cross-covariance of the forward-harvested endpoint pairs.
    pub endpoint_cross_cov: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImfReport {
    pub iterations: Vec<ImfIteration>,
    /// Set when the KL estimate rose by more than 3 SE three times in a row.
    pub kl_increase_warning: bool,
}

impl ImfReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,kl,kl_se,drift_rmse,ks_terminal,ks_initial,endpoint_cross_cov")?;
        for it in &self.iterations {
            let rmse = it.drift_rmse.map_or(String::new(), |r| r.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                it.iteration, it.kl.mean, it.kl.se, rmse, it.ks_terminal, it.ks_initial, it.endpoint_cross_cov
            )?;
        }
        Ok(())
    }

    /// Largest rise `KLₙ₊₁ − KLₙ` in units of the combined standard error.
    pub fn worst_kl_increase(&self) -> f64 {
        self.iterations
            .windows(2)
            .map(|w| (w[1].kl.mean - w[0].kl.mean) / (w[0].kl.se.powi(2) + w[1].kl.se.powi(2)).sqrt().max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn draw(law: &InitLaw, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, u64::MAX);
    let mut out = [0.0];
    (0..n)
        .map(|i| {
            law.sample(i, &mut rng, &mut out);
            out[0]
        })
        .collect()
}

fn cross_cov(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum::<f64>() / (n - 1.0)
}

/// Alternating forward/reverse Markovian fitting with reciprocal projections in between.
pub fn imf_run(pi0: &InitLaw, pi_t: &InitLaw, sigma: f64, horizon: f64, n_iters: usize, config: &ImfConfig, seed: u64) -> Result<(ImfState, ImfReport)> {
    if pi0.dim() != 1 || pi_t.dim() != 1 {
        return invalid("IMF is implemented for one-dimensional marginals");
    }
    if config.n_samples < 2 {
        return invalid("need at least two samples per iteration");
    }
    let n = config.n_samples;
    let x0 = draw(pi0, n, sub_seed(seed, "imf/pi0"));
    let xt = draw(pi_t, n, sub_seed(seed, "imf/piT"));
    let mut pairs = match &config.init {
        ImfInit::Independent => x0.iter().copied().zip(xt.iter().copied()).collect(),
        ImfInit::Pairs(p) => p.clone(),
    };
    let start0 = InitLaw::Samples(PointCloud { data: x0.clone(), dim: 1 });
    let start_t = InitLaw::Samples(PointCloud { data: xt.clone(), dim: 1 });
    let t_clip = config.t_clip * horizon;
    let mut state = ImfState {
        coupling_samples: pairs.clone(),
        forward_model: DriftModel::zeros(horizon, config.model.n_bins.max(1)),
        reverse_model: DriftModel::zeros(horizon, config.model.n_bins.max(1)),
        iteration: 0,
    };
    let mut report = ImfReport { iterations: Vec::new(), kl_increase_warning: false };
    let mut rises = 0;
    for it in 1..=n_iters {
        let s = if config.common_random_numbers { seed } else { sub_seed(seed, &format!("imf/{it}")) };
        let ds = make_regression_dataset(&pairs, sigma, horizon, config.n_t_per_pair, t_clip, sub_seed(s, "fwd/data"))?;
        let fwd = markov_projection_fit(&ds, horizon, &config.model)?;
        let ens = simulate_model(&fwd, &start0, sigma, n, config.n_steps, sub_seed(s, "fwd/sim"), true)?;
        let fwd_pairs = endpoint_pairs(&ens, Direction::Forward);
        let kl = crate::path_sim::path_kl_estimate(&ens, &state.forward_model, &fwd);

        let swapped: Vec<(f64, f64)> = fwd_pairs.iter().map(|(a, b)| (*b, *a)).collect();
        let ds_r = make_regression_dataset(&swapped, sigma, horizon, config.n_t_per_pair, t_clip, sub_seed(s, "rev/data"))?;
        let rev = markov_projection_fit(&ds_r, horizon, &config.model)?;
        pairs = reciprocal_projection(&rev, &start_t, Direction::Reverse, sigma, n, config.n_steps, sub_seed(s, "rev/sim"))?;
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return numerical(format!("non-finite endpoint pair at iteration {it}"));
        }

        let drift_rmse = config.oracle.as_ref().map(|o| {
            let sq: f64 = o.points.iter().map(|(x, t)| (fwd.eval1(*x, *t) - (o.control)(*x, *t)).powi(2)).sum();
            (sq / o.points.len() as f64).sqrt()
        });
        let fwd_t: Vec<f64> = fwd_pairs.iter().map(|p| p.1).collect();
        let rev_0: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let entry = ImfIteration {
            iteration: it,
            kl,
            drift_rmse,
            ks_terminal: ks_statistic(&fwd_t, &xt),
            ks_initial: ks_statistic(&rev_0, &x0),
            endpoint_cross_cov: cross_cov(&fwd_pairs),
        };
        if let Some(prev) = report.iterations.last() {
            let se = (prev.kl.se.powi(2) + entry.kl.se.powi(2)).sqrt();
            rises = if entry.kl.mean - prev.kl.mean > 3.0 * se { rises + 1 } else { 0 };
            report.kl_increase_warning |= rises >= 3;
        }
        report.iterations.push(entry);
        state = ImfState { coupling_samples: pairs.clone(), forward_model: fwd, reverse_model: rev, iteration: it };
    }
    Ok((state, report))
}
