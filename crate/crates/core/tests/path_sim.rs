use std::sync::Arc;

use bridgekit::entropic_ot::gaussian_eot_closed_form;
use bridgekit::path_sim::*;
use bridgekit::stats::{histogram, ks_critical, ks_statistic, Estimate};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

fn one() -> impl Fn(f64) -> f64 + Sync {
    |_| 1.0
}

fn scalar_gaussian(m: f64, v: f64) -> InitLaw {
    InitLaw::gaussian(&DVector::from_element(1, m), &DMatrix::from_element(1, 1, v)).unwrap()
}

#[test]
fn brownian_variance_at_horizon() {
    let s = one();
    let spec = SdeSpec { ref_drift: &ZeroField, control: None, sigma_of_t: &s, horizon: 1.5, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![0.0]), 100_000, 64, 1).unwrap();
    let sq: Vec<f64> = ens.terminal().coord(0).iter().map(|x| x * x).collect();
    let est = Estimate::from_samples(&sq);
    assert!(est.within(1.5, 4.0), "z {}", est.z_score(1.5));
}

#[test]
fn ou_reaches_unit_stationary_variance() {
    let f = |x: &[f64], _t: f64, o: &mut [f64]| o[0] = -x[0];
    let s = |_: f64| 2f64.sqrt();
    let spec = SdeSpec { ref_drift: &f, control: None, sigma_of_t: &s, horizon: 6.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![2.0]), 100_000, 3000, 2).unwrap();
    let xs = ens.terminal().coord(0);
    let mean = Estimate::from_samples(&xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - 2.0 * (-6.0f64).exp()).powi(2)).collect();
    let var = Estimate::from_samples(&sq);
    let exact = 1.0 - (-12.0f64).exp();
    assert!(mean.within(2.0 * (-6.0f64).exp(), 4.0));
    assert!(var.within(exact, 4.0), "z {}", var.z_score(exact));
}

#[test]
fn ou_histograms_follow_fokker_planck() {
    let f = |x: &[f64], _t: f64, o: &mut [f64]| o[0] = -x[0];
    let s = |_: f64| 2f64.sqrt();
    let spec = SdeSpec { ref_drift: &f, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![1.5]), 100_000, 500, 3).unwrap();
    for k in [50, 150, 300, 500] {
        let t = ens.grid[k];
        let (m, v) = (1.5 * (-t).exp(), 1.0 - (-2.0 * t).exp());
        let law = NormalDist::new(m, v.sqrt()).unwrap();
        let (lo, hi) = (m - 5.0 * v.sqrt(), m + 5.0 * v.sqrt());
        let hist = histogram(&ens.marginal(k).coord(0), 64, lo, hi);
        let l1: f64 = hist.iter().map(|(a, b, d)| (d * (b - a) - (law.cdf(*b) - law.cdf(*a))).abs()).sum();
        assert!(l1 <= 0.02, "t {t}: L1 {l1}");
    }
}

#[test]
fn girsanov_constant_shift() {
    let s = one();
    let c = ConstantField(vec![0.7]);
    // Under u = 0: E[exp(log RND)] = 1.
    let spec = SdeSpec { ref_drift: &ZeroField, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![0.0]), 100_000, 100, 4).unwrap();
    let lr = girsanov_log_rnd(&ens, &ZeroField, &c).unwrap();
    let e = Estimate::from_samples(&lr.iter().map(|l| l.exp()).collect::<Vec<_>>());
    assert!(e.within(1.0, 4.0), "z {}", e.z_score(1.0));
    // Under ũ = c: mean log RND and path KL are ½c²T.
    let spec = SdeSpec { ref_drift: &ZeroField, control: Some(&c), sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![0.0]), 100_000, 100, 5).unwrap();
    let lr = girsanov_log_rnd(&ens, &c, &ZeroField).unwrap();
    let e = Estimate::from_samples(&lr.iter().map(|l| -l).collect::<Vec<_>>());
    assert!(e.within(0.245, 4.0), "z {}", e.z_score(0.245));
    let kl = path_kl_estimate(&ens, &ZeroField, &c);
    assert!((kl.mean - 0.245).abs() <= 3.0 * kl.se.max(1e-12), "{kl:?}");
}

#[test]
fn girsanov_normalisation_for_state_dependent_control() {
    let s = one();
    let u = |x: &[f64], t: f64, o: &mut [f64]| o[0] = (x[0] + t).sin();
    let spec = SdeSpec { ref_drift: &ZeroField, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![0.3]), 50_000, 100, 6).unwrap();
    let lr = girsanov_log_rnd(&ens, &ZeroField, &u).unwrap();
    let e = Estimate::from_samples(&lr.iter().map(|l| l.exp()).collect::<Vec<_>>());
    assert!(e.within(1.0, 4.0), "z {}", e.z_score(1.0));
    let kl = path_kl_estimate(&ens, &u, &u);
    assert_eq!(kl.mean, 0.0);
}

#[test]
fn linear_controls_on_ou_match_variance_ode() {
    let (a, b) = (0.2, -0.6);
    let f = |x: &[f64], _t: f64, o: &mut [f64]| o[0] = -x[0];
    let ua = LinearField { a: DMatrix::from_element(1, 1, a), b: DVector::zeros(1) };
    let ub = LinearField { a: DMatrix::from_element(1, 1, b), b: DVector::zeros(1) };
    let s = one();
    let spec = SdeSpec { ref_drift: &f, control: Some(&ub), sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let n_steps = 400;
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![1.0]), 100_000, n_steps, 7).unwrap();
    let kl = path_kl_estimate(&ens, &ua, &ub);
    // dX = kX dt + dB with k = b − 1: E[X²] = e^{2kt} + (e^{2kt} − 1)/(2k), on the Euler grid.
    let k = b - 1.0;
    let dt = 1.0 / n_steps as f64;
    let mut m2 = 1.0;
    let mut integral = 0.0;
    for _ in 0..n_steps {
        integral += m2 * dt;
        m2 = (1.0 + k * dt).powi(2) * m2 + dt;
    }
    let exact = 0.5 * (b - a) * (b - a) * integral;
    let cont = {
        let g = |t: f64| (2.0 * k * t).exp() + ((2.0 * k * t).exp() - 1.0) / (2.0 * k);
        let n = 2000;
        (0..n).map(|i| g((i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64 * 0.5 * (b - a) * (b - a)
    };
    assert!((exact - cont).abs() < 0.01 * cont);
    assert!((kl.mean - exact).abs() <= 3.0 * kl.se, "{kl:?} vs {exact}");
}

fn gaussian_joint(m0: f64, v0: f64, m1: f64, v1: f64, sigma: f64) -> bridgekit::entropic_ot::GaussianCoupling<f64> {
    gaussian_eot_closed_form(
        &DVector::from_element(1, m0),
        &DMatrix::from_element(1, 1, v0),
        &DVector::from_element(1, m1),
        &DMatrix::from_element(1, 1, v1),
        sigma,
    )
    .unwrap()
}

#[test]
fn mixture_starts_at_source_law() {
    let joint = gaussian_joint(-1.0, 0.25, 1.5, 1.0, 1.0);
    let sampler = EndpointSampler::from_gaussian(&joint).unwrap();
    let xs = sample_bridge_mixture(&sampler, 1e-6, 1.0, 1.0, 20_000, 8).unwrap().coord(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let law = Normal::new(-1.0, 0.5).unwrap();
    let ys: Vec<f64> = (0..20_000).map(|_| law.sample(&mut rng)).collect();
    assert!(ks_statistic(&xs, &ys) < ks_critical(xs.len(), ys.len(), 0.01));
    let end = sample_bridge_mixture(&sampler, 1.0, 1.0, 1.0, 20_000, 8).unwrap().coord(0);
    let law = Normal::new(1.5, 1.0).unwrap();
    let ys: Vec<f64> = (0..20_000).map(|_| law.sample(&mut rng)).collect();
    assert!(ks_statistic(&end, &ys) < ks_critical(end.len(), ys.len(), 0.01));
}

#[test]
fn independent_and_optimal_couplings_at_midpoint() {
    let (v, sigma) = (1.0, 1.0);
    let joint = gaussian_joint(-1.0, v, 1.0, v, sigma);
    let c = joint.cross[(0, 0)];
    assert!(c > 0.0);
    let opt = EndpointSampler::from_gaussian(&joint).unwrap();
    let ind = EndpointSampler::IndependentProduct { start: scalar_gaussian(-1.0, v), end: scalar_gaussian(1.0, v) };
    let n = 100_000;
    let var_at = |s: &EndpointSampler, seed| {
        let xs = sample_bridge_mixture(s, 0.5, 1.0, sigma, n, seed).unwrap().coord(0);
        Estimate::from_samples(&xs.iter().map(|x| x * x).collect::<Vec<_>>())
    };
    // Var(X_½) = ¼v + ¼v + ½C + ¼σ²
    let exact_opt = 0.5 * v + 0.5 * c + 0.25 * sigma * sigma;
    let exact_ind = 0.5 * v + 0.25 * sigma * sigma;
    let (eo, ei) = (var_at(&opt, 10), var_at(&ind, 11));
    assert!(eo.within(exact_opt, 4.0), "z {}", eo.z_score(exact_opt));
    assert!(ei.within(exact_ind, 4.0), "z {}", ei.z_score(exact_ind));
    // The displacement X_T − X₀ is what spreads more without the coupling.
    let mut rng_o = bridgekit::rng::stream(12, 0);
    let mut rng_i = bridgekit::rng::stream(13, 0);
    let (mut so, mut si) = (0.0, 0.0);
    let (mut a, mut b) = ([0.0], [0.0]);
    for i in 0..n {
        opt.sample(i, &mut rng_o, &mut a, &mut b);
        so += (b[0] - a[0] - 2.0).powi(2);
        ind.sample(i, &mut rng_i, &mut a, &mut b);
        si += (b[0] - a[0] - 2.0).powi(2);
    }
    assert!(si / n as f64 > so / n as f64 + 0.5);
}

#[test]
fn brownian_interpolant_has_bridge_law() {
    let spec = InterpolantSpec::brownian(1.0, 1.0);
    let (x0, x1, t) = ([0.0], [2.0], 0.3);
    let xs: Vec<f64> = (0..20_000).map(|i| interpolant_sample(&spec, &x0, &x1, t, 100 + i).unwrap()[0]).collect();
    let st = brownian_bridge_stats(&x0, &x1, t, 1.0, 1.0, &[0.0]).unwrap();
    let law = Normal::new(st.mean[0], st.var.sqrt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ys: Vec<f64> = (0..20_000).map(|_| law.sample(&mut rng)).collect();
    assert!(ks_statistic(&xs, &ys) < ks_critical(xs.len(), ys.len(), 0.01));
    let flat = InterpolantSpec::linear(1.0, Arc::new(|_| 0.0));
    assert_eq!(interpolant_sample(&flat, &x0, &x1, 0.25, 1).unwrap(), vec![0.5]);
}

#[test]
fn time_reversal_recovers_initial_law() {
    let (m0, v0) = (0.5, 0.3);
    let s = one();
    let spec = SdeSpec { ref_drift: &ZeroField, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let fwd = simulate_sde(&spec, &scalar_gaussian(m0, v0), 100_000, 10, 15).unwrap();
    let score = move |x: &[f64], t: f64, o: &mut [f64]| o[0] = -(x[0] - m0) / (v0 + t);
    let rev = reverse_drift(&ZeroField, &score, &s, 1.0);
    let rspec = SdeSpec { ref_drift: &rev, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let back = simulate_sde(&rspec, &InitLaw::Samples(fwd.terminal()), 100_000, 1000, 16).unwrap();
    let xs = back.terminal().coord(0);
    let mean = Estimate::from_samples(&xs);
    let var = Estimate::from_samples(&xs.iter().map(|x| (x - m0).powi(2)).collect::<Vec<_>>());
    assert!(mean.within(m0, 4.0), "z {}", mean.z_score(m0));
    assert!(var.within(v0, 4.0), "z {}", var.z_score(v0));
}

#[test]
fn reverse_drift_examples() {
    let s = one();
    // From a point mass at 0: score −x/t, reverse drift −x/(T−s).
    let score = |x: &[f64], t: f64, o: &mut [f64]| o[0] = -x[0] / t;
    let rev = reverse_drift(&ZeroField, &score, &s, 2.0);
    let mut out = [0.0];
    rev.eval(&[1.2], 0.5, &mut out);
    assert!((out[0] + 1.2 / 1.5).abs() < 1e-15);
    // Reversing twice returns the forward drift.
    let f = |x: &[f64], t: f64, o: &mut [f64]| o[0] = -x[0] + t;
    let score_fwd = |x: &[f64], t: f64, o: &mut [f64]| o[0] = -x[0] / (1.0 + t);
    let score_rev = |x: &[f64], s: f64, o: &mut [f64]| score_fwd.eval(x, 1.0 - s, o);
    let r1 = reverse_drift(&f, &score_fwd, &s, 1.0);
    let r2 = reverse_drift(&r1, &score_rev, &s, 1.0);
    let (mut a, mut b) = ([0.0], [0.0]);
    r2.eval(&[0.7], 0.4, &mut a);
    f.eval(&[0.7], 0.4, &mut b);
    assert!((a[0] - b[0]).abs() < 1e-14);
    // σ → 0: plain ODE reversal.
    let z = |_: f64| 0.0;
    let r0 = reverse_drift(&f, &score_fwd, &z, 1.0);
    r0.eval(&[0.7], 0.4, &mut a);
    f.eval(&[0.7], 0.6, &mut b);
    assert_eq!(a[0], -b[0]);
}

#[test]
fn dynamic_ot_decomposition_on_gaussian_bridge() {
    use bridgekit::gaussian_bridge::{bridge_moments, compute_schedule};
    use bridgekit::{GaussianBridgePath, GaussianMarginal, LinearReferenceSde};
    let sigma = 1.0;
    let sch = compute_schedule(&LinearReferenceSde::brownian(sigma, 1.0, 1).unwrap(), 512).unwrap();
    let (a, b) = (GaussianMarginal::scalar(-1.0, 0.25).unwrap(), GaussianMarginal::scalar(1.5, 1.0).unwrap());
    let p = GaussianBridgePath::new(&sch, &a, &b).unwrap();
    let n_steps = 500;
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 / n_steps as f64).collect();
    let table = p.drift_table(&times).unwrap();
    let moments: Vec<(f64, f64)> = times.iter().map(|t| {
        let (m, c) = bridge_moments(&p, *t).unwrap();
        (m[0], c[(0, 0)])
    }).collect();
    let s = |_: f64| sigma;
    let spec = SdeSpec { ref_drift: &table, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::gaussian(&a.mean, &a.cov).unwrap(), 50_000, n_steps, 17).unwrap();
    let dt = 1.0 / n_steps as f64;
    // Per path: ∫ ½u² − ½v² − (σ²/8)|∇log p|² dt, with u = drift/σ and v = u − (σ/2)∇log p.
    let gaps: Vec<f64> = (0..ens.n_paths)
        .map(|i| {
            let mut g = 0.0;
            for k in 0..n_steps {
                let x = ens.state(i, k)[0];
                let mut d = [0.0];
                table.eval(&[x], times[k], &mut d);
                let u = d[0] / sigma;
                let (m, v) = moments[k];
                let score = -(x - m) / v;
                let vel = u - 0.5 * sigma * score;
                g += (0.5 * u * u - 0.5 * vel * vel - sigma * sigma / 8.0 * score * score) * dt;
            }
            g
        })
        .collect();
    let est = Estimate::from_samples(&gaps);
    // With f = 0 the remainder is ½(H(p_T) − H(p₀)), H = ∫p log p.
    let entropy_term = -0.25 * (1.0f64 / 0.25).ln();
    assert!(est.within(entropy_term, 3.0), "{est:?} vs {entropy_term}");
}
