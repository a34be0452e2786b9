use bridgekit::discrete_sb::*;
use bridgekit::stats::Estimate;
use nalgebra::DMatrix;

fn sym3() -> RateMatrix {
    RateMatrix::from_off_diagonal(DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.5, 1.0, 0.0, 2.0, 0.5, 2.0, 0.0])).unwrap()
}

struct Projected<'a> {
    sb: &'a DiscreteSb,
}

impl TimeGenerator for Projected<'_> {
    fn n_states(&self) -> usize {
        self.sb.q0.n_states()
    }
    fn horizon(&self) -> f64 {
        self.sb.horizon
    }
    fn rates_at(&self, t: f64) -> DMatrix<f64> {
        self.sb.generator_at(t).unwrap().rates
    }
}

#[test]
fn transition_examples() {
    let q = RateSchedule::constant(RateMatrix::two_state(1.0), 10.0);
    let p = transition_matrix(&q, 0.3, 0.3).unwrap();
    assert!((p - DMatrix::identity(2, 2)).amax() < 1e-15);
    let p = transition_matrix(&q, 1.0, 1.0 + 2f64.ln() / 2.0).unwrap();
    assert!((p - DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75])).amax() < 1e-12);
    let p = homogeneous_transition(&sym3(), 50.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((p[(i, j)] - 1.0 / 3.0).abs() < 1e-8);
        }
    }
}

#[test]
fn propagation_examples() {
    let q = RateSchedule::constant(sym3(), 2.0);
    let ones = propagate_backward(&q, &[1.0; 3], 0.7).unwrap();
    assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let uni = propagate_forward(&q, &[1.0 / 3.0; 3], 0.0, 2.0).unwrap();
    assert!(uni.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    let law = propagate_forward(&q, &[1.0, 0.0, 0.0], 0.0, 1.0).unwrap();
    check_law(&law).unwrap();
}

#[test]
fn piecewise_schedule_composes() {
    let a = sym3();
    let b = random_generator(3, 0.1, 2.0, 4);
    let s = RateSchedule::new(vec![0.0, 0.4], vec![a.clone(), b.clone()], 1.0).unwrap();
    let p = transition_matrix(&s, 0.1, 0.9).unwrap();
    let direct = homogeneous_transition(&a, 0.3).unwrap() * homogeneous_transition(&b, 0.5).unwrap();
    assert!((p - direct).amax() < 1e-12);
}

#[test]
fn jump_counts_and_determinism() {
    let q = RateSchedule::constant(RateMatrix::two_state(1.0), 1.0);
    let paths = simulate_ctmc_paths(&q, &[0.5, 0.5], 100_000, 1).unwrap();
    let jumps = Estimate::from_samples(&paths.iter().map(|p| p.n_jumps() as f64).collect::<Vec<_>>());
    assert!(jumps.within(1.0, 4.0), "{jumps:?}");
    assert_eq!(simulate_ctmc(&q, 0, 77).unwrap(), simulate_ctmc(&q, 0, 77).unwrap());
    let frozen = RateSchedule::constant(RateMatrix::new(DMatrix::zeros(3, 3)).unwrap(), 1.0);
    assert_eq!(simulate_ctmc(&frozen, 2, 5).unwrap().n_jumps(), 0);
    // Terminal law of the simulated chain.
    let q3 = RateSchedule::constant(random_generator(3, 0.2, 1.5, 2), 1.0);
    let law = propagate_forward(&q3, &[1.0, 0.0, 0.0], 0.0, 1.0).unwrap();
    let paths = simulate_ctmc_paths(&q3, &[1.0, 0.0, 0.0], 50_000, 3).unwrap();
    for (s, p) in law.iter().enumerate() {
        let hits = Estimate::from_samples(&paths.iter().map(|x| (x.terminal() == s) as u8 as f64).collect::<Vec<_>>());
        assert!(hits.within(*p, 4.0), "state {s}: {hits:?} vs {p}");
    }
}

#[test]
fn path_rnd_examples() {
    let (q1, q2) = (RateSchedule::constant(RateMatrix::two_state(1.0), 1.0), RateSchedule::constant(RateMatrix::two_state(2.0), 1.0));
    let init = [0.5, 0.5];
    let paths = simulate_ctmc_paths(&q2, &init, 100_000, 4).unwrap();
    let same: Vec<f64> = paths[..100].iter().map(|p| ctmc_log_rnd(p, &q2, &q2, &init, &init)).collect();
    assert!(same.iter().all(|v| *v == 0.0));
    let lr = Estimate::from_samples(&paths.iter().map(|p| ctmc_log_rnd(p, &q2, &q1, &init, &init)).collect::<Vec<_>>());
    let exact = 2.0 * 2f64.ln() - 1.0;
    assert!(lr.within(exact, 4.0), "{lr:?}");
    let still = paths.iter().find(|p| p.n_jumps() == 0).unwrap();
    assert!((ctmc_log_rnd(still, &q2, &q1, &init, &init) - (1.0 - 2.0)).abs() < 1e-12);
    // Normalisation: E_Q[dQ′/dQ] = 1.
    let under_q1 = simulate_ctmc_paths(&q1, &init, 100_000, 5).unwrap();
    let w = Estimate::from_samples(&under_q1.iter().map(|p| ctmc_log_rnd(p, &q2, &q1, &init, &init).exp()).collect::<Vec<_>>());
    assert!(w.within(1.0, 4.0), "{w:?}");
}

#[test]
fn support_violation_is_reported() {
    let q = RateSchedule::constant(RateMatrix::two_state(1.0), 1.0);
    let blocked = RateSchedule::constant(RateMatrix::from_off_diagonal(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])).unwrap(), 1.0);
    let p = (0..100).map(|s| simulate_ctmc(&q, 0, s).unwrap()).find(|p| p.n_jumps() > 0).unwrap();
    assert!(support_violation(&p, &q, &blocked).is_some());
    assert_eq!(ctmc_log_rnd(&p, &q, &blocked, &[1.0, 0.0], &[1.0, 0.0]), f64::INFINITY);
}

#[test]
fn exact_and_monte_carlo_kl_agree() {
    for seed in 0..3 {
        let a = RateSchedule::constant(random_generator(4, 0.2, 2.0, 10 + seed), 1.0);
        let b = RateSchedule::constant(random_generator(4, 0.2, 2.0, 20 + seed), 1.0);
        let (p0, p1) = (random_law(4, 30 + seed), random_law(4, 40 + seed));
        let exact = ctmc_kl(&a, &b, &p0, &p1, KlMethod::Exact).unwrap();
        let mc = ctmc_kl(&a, &b, &p0, &p1, KlMethod::MonteCarlo { n_paths: 50_000, seed }).unwrap();
        assert!(exact.mean > 0.0);
        assert!(mc.within(exact.mean, 4.0), "seed {seed}: {mc:?} vs {}", exact.mean);
    }
    let q = RateSchedule::constant(RateMatrix::two_state(1.0), 1.0);
    let q2 = RateSchedule::constant(RateMatrix::two_state(2.0), 1.0);
    let e = ctmc_kl(&q2, &q, &[0.5, 0.5], &[0.5, 0.5], KlMethod::Exact).unwrap();
    assert!((e.mean - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-10);
    assert_eq!(ctmc_kl(&q, &q, &[0.5, 0.5], &[0.5, 0.5], KlMethod::Exact).unwrap().mean, 0.0);
}

#[test]
fn doob_tilt_examples() {
    let q0 = random_generator(4, 0.3, 1.5, 6);
    let big_t = 1.5;
    let checks: Vec<f64> = (0..=6).map(|k| k as f64 * 0.25).collect();
    let one = |_: usize, _: f64| 1.0;
    let tilt = doob_tilt(&q0, &one, big_t, &checks).unwrap();
    assert!((tilt.rates_at(0.4) - &q0.rates).amax() < 1e-15);
    for target in 0..4 {
        let q0c = q0.clone();
        let h = move |x: usize, t: f64| homogeneous_transition(&q0c, big_t - t).unwrap()[(x, target)];
        let tilt = doob_tilt(&q0, &h, big_t, &checks).unwrap();
        let q0c = q0.clone();
        let h7 = move |x: usize, t: f64| 7.0 * homogeneous_transition(&q0c, big_t - t).unwrap()[(x, target)];
        let tilt7 = doob_tilt(&q0, &h7, big_t, &checks).unwrap();
        for t in [0.0, 0.6, 1.2, 1.45] {
            let c = conditioned_generator(&q0, target, t, big_t).unwrap();
            assert!((tilt.rates_at(t) - &c.rates).amax() < 1e-12);
            assert!((tilt7.rates_at(t) - &c.rates).amax() < 1e-12);
            check_generator(&c.rates).unwrap();
        }
    }
    let not_harmonic = |x: usize, t: f64| 1.0 + x as f64 * t;
    assert!(doob_tilt(&q0, &not_harmonic, big_t, &checks).is_err());
}

#[test]
fn conditioned_generator_limits() {
    let q0 = RateMatrix::two_state(1.0);
    let near = conditioned_generator(&q0, 1, 0.999, 1.0).unwrap();
    let far = conditioned_generator(&q0, 1, 0.0, 1.0).unwrap();
    assert!(near.rates[(1, 0)] < 1e-2 * far.rates[(1, 0)]);
    assert!(near.rates[(0, 1)] > 100.0);
    let absorbing = RateMatrix::from_off_diagonal(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
    let c = conditioned_generator(&absorbing, 1, 0.5, 1.0).unwrap();
    assert_eq!(c.rates[(1, 0)], 0.0);
    let loose = conditioned_generator(&sym3(), 2, 0.0, 30.0).unwrap();
    assert!((loose.rates - sym3().rates).amax() < 1e-8);
}

#[test]
fn stationary_marginals_give_the_reference() {
    let q0 = sym3();
    let pi = vec![1.0 / 3.0; 3];
    let sb = discrete_sb_exact(&q0, &pi, &pi, 1.0).unwrap();
    assert!(sb.kl_to_reference() <= 1e-10);
    assert!((&sb.coupling - &sb.reference_coupling).amax() < 1e-10);
    for t in [0.2, 0.7] {
        assert!((sb.generator_at(t).unwrap().rates - &q0.rates).amax() < 1e-9);
    }
}

#[test]
fn random_instance_marginals_and_optimality() {
    let q0 = random_generator(5, 0.2, 1.5, 17);
    let (pi0, pit) = (random_law(5, 18), random_law(5, 19));
    let sb = discrete_sb_exact(&q0, &pi0, &pit, 1.0).unwrap();
    let (a, b) = sb.marginals();
    for k in 0..5 {
        assert!((a[k] - pi0[k]).abs() < 1e-9 && (b[k] - pit[k]).abs() < 1e-9);
    }
    let best = sb.kl_to_reference();
    for s in 0..20 {
        let c = random_coupling(&pi0, &pit, 100 + s);
        let kl = coupling_kl(&c, &sb.reference_coupling);
        assert!(best < kl, "competitor {s}: {kl} <= {best}");
    }
    // The path marginals of the projected Markov chain are the bridge-mixture marginals.
    let gen = Projected { sb: &sb };
    for t in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let law = propagate_law_rk4(&gen, &pi0, 0.0, t, 2000);
        let target = sb.law_at(t).unwrap();
        let err = law.iter().zip(&target).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "t {t}: {err}");
        check_generator(&sb.generator_at(t).unwrap().rates).unwrap();
    }
    let ends = markov_projection_endpoints(&sb.coupling, &q0, 1.0, &pi0, 2000).unwrap();
    assert!((ends - &sb.coupling).amax() < 1e-9);
}

#[test]
fn projection_examples() {
    let q0 = sym3();
    let pi0 = random_law(3, 3);
    let r = reference_coupling(&q0, &pi0, 1.0).unwrap();
    for t in [0.1, 0.5, 0.9] {
        assert!((markov_projection_generator(&r, &q0, 1.0, t).unwrap().rates - &q0.rates).amax() < 1e-10);
    }
    // A single endpoint pair: the projection is the pinned generator on the support.
    let mut point = DMatrix::zeros(3, 3);
    point[(0, 2)] = 1.0;
    let g = markov_projection_generator(&point, &q0, 1.0, 0.4).unwrap();
    let c = conditioned_generator(&q0, 2, 0.4, 1.0).unwrap();
    assert!((g.rates - c.rates).amax() < 1e-10);
    let law = bridge_mixture_law(&point, &q0, 1.0, 0.4).unwrap();
    check_law(&law).unwrap();
    // Bayes reversal of a stationary symmetric chain is the chain itself.
    let rev = reverse_generator(&q0, &[1.0 / 3.0; 3]).unwrap();
    assert!((rev.rates - &q0.rates).amax() < 1e-14);
}

#[test]
fn optimal_generator_examples() {
    let q0 = random_generator(3, 0.3, 1.2, 8);
    let times = [0.0, 0.5, 1.0];
    let (v, g) = discrete_value(&q0, &[0.0; 3], 1.0, &times).unwrap();
    assert!(v.values.iter().flatten().all(|x| x.abs() < 1e-12));
    assert!((g.rates_at(0.3) - &q0.rates).amax() < 1e-12);
    let (v, g) = discrete_value(&q0, &[2.5; 3], 1.0, &times).unwrap();
    assert!(v.values.iter().flatten().all(|x| (x - 2.5).abs() < 1e-12));
    assert!((g.rates_at(0.3) - &q0.rates).amax() < 1e-12);
    assert_eq!(v.values[2], vec![2.5; 3]);

    // Terminal law from a point start is the tilted reference law.
    let q2 = RateMatrix::two_state(1.0);
    let phi = [0.0, 10.0];
    let (_, g) = discrete_value(&q2, &phi, 1.0, &times).unwrap();
    for x0 in 0..2 {
        let mut start = [0.0, 0.0];
        start[x0] = 1.0;
        // Rates reach e^10 near the horizon, so the step must be small.
        let law = propagate_law_rk4(&g, &start, 0.0, 1.0, 40_000);
        let q_t = propagate_forward(&RateSchedule::constant(q2.clone(), 1.0), &start, 0.0, 1.0).unwrap();
        let tilted: Vec<f64> = q_t.iter().zip(&phi).map(|(q, f)| q * (-f).exp()).collect();
        let z: f64 = tilted.iter().sum();
        for k in 0..2 {
            assert!((law[k] - tilted[k] / z).abs() < 1e-8, "start {x0}: {law:?} vs {tilted:?} / {z}");
        }
    }
}

#[test]
fn discrete_losses() {
    let q0 = random_generator(3, 0.3, 1.2, 9);
    let q0s = RateSchedule::constant(q0.clone(), 1.0);
    let phi = [0.4, -0.3, 1.1];
    // Point start: the functional also carries V(0, x0) otherwise.
    let pi0 = [0.0, 1.0, 0.0];
    let (_, opt) = discrete_value(&q0, &phi, 1.0, &[0.0, 1.0]).unwrap();
    let paths = simulate_ctmc_paths(&RateSchedule::from_generator(&opt, 200).unwrap(), &pi0, 20_000, 11).unwrap();
    // Under the optimal generator the log-RND functional is constant path by path.
    let lv = discrete_soc_loss(SocLossKind::LogVariance, &opt, &q0s, &phi, &opt, &paths, &pi0).unwrap();
    assert!(lv.estimate.mean.abs() <= 3.0 * lv.estimate.se || lv.estimate.mean.abs() < 1e-18, "{:?}", lv.estimate);
    let ref_paths = simulate_ctmc_paths(&q0s, &pi0, 5000, 12).unwrap();
    let re = discrete_soc_loss(SocLossKind::RelativeEntropy, &q0s, &q0s, &[0.0; 3], &q0s, &ref_paths, &pi0).unwrap();
    assert_eq!(re.estimate.mean, 0.0);
    let other = RateSchedule::constant(random_generator(3, 0.3, 1.2, 13), 1.0);
    let far = discrete_soc_loss(SocLossKind::LogVariance, &other, &q0s, &phi, &other, &simulate_ctmc_paths(&other, &pi0, 5000, 14).unwrap(), &pi0).unwrap();
    assert!(far.estimate.mean > 3.0 * far.estimate.se);
    let ce = discrete_soc_loss(SocLossKind::CrossEntropy, &opt, &q0s, &phi, &q0s, &ref_paths, &pi0).unwrap();
    assert!(ce.effective_sample_size.unwrap() > 10.0 && !ce.low_ess);
    // Exact relative entropy is minimised by the optimal generator.
    let sched_opt = RateSchedule::from_generator(&opt, 200).unwrap();
    let re_opt = discrete_re_exact(&sched_opt, &q0s, &phi, &pi0).unwrap();
    let re_ref = discrete_re_exact(&q0s, &q0s, &phi, &pi0).unwrap();
    assert!(re_opt < re_ref);
}

#[test]
fn relative_entropy_fit_recovers_optimal_rates() {
    let q0 = random_generator(3, 0.3, 1.2, 15);
    let phi = [0.0, 1.0, -0.5];
    let pi0 = random_law(3, 16);
    let (_, opt) = discrete_value(&q0, &phi, 1.0, &[0.0, 1.0]).unwrap();
    let fit = fit_discrete_control_re(&q0, &phi, &pi0, 1.0, 20, 400).unwrap();
    let mut worst: f64 = 0.0;
    for (k, start) in fit.starts.iter().enumerate() {
        let mid = start + 0.5 / fit.starts.len() as f64;
        let d = &fit.pieces[k].rates - opt.rates_at(mid);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    worst = worst.max(d[(i, j)].abs());
                }
            }
        }
        check_generator(&fit.pieces[k].rates).unwrap();
    }
    assert!(worst <= 0.02, "max entry error {worst}");
}

#[test]
fn ddsbm_exact_and_sampled() {
    let q0 = random_generator(5, 0.2, 1.5, 17);
    let (pi0, pit) = (random_law(5, 18), random_law(5, 19));
    let rep = ddsbm_run(&q0, &pi0, &pit, 1.0, 20, DdsbmMode::Exact, None, 1).unwrap();
    assert!(rep.steps.iter().any(|s| s.kl_to_sb <= 1e-8));
    for w in rep.steps.windows(2) {
        assert!(w[1].kl_to_sb <= w[0].kl_to_sb + 1e-12);
    }
    let sb = discrete_sb_exact(&q0, &pi0, &pit, 1.0).unwrap();
    let fixed = ddsbm_run(&q0, &pi0, &pit, 1.0, 1, DdsbmMode::Exact, Some(sb.coupling.clone()), 2).unwrap();
    assert!((fixed.coupling - &sb.coupling).amax() <= 1e-10);
    let sampled = ddsbm_run(&q0, &pi0, &pit, 1.0, 4, DdsbmMode::Sampled { n_paths: 10_000 }, None, 3).unwrap();
    assert!(sampled.steps.last().unwrap().tv_to_sb <= 0.03);
}
