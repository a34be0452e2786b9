//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use bridgekit::discrete_sb::*;
use bridgekit::entropic_ot::*;
use bridgekit::gaussian_bridge::{bridge_drift, bridge_moments, compute_schedule, lyapunov_solve};
use bridgekit::imf::{imf_run, DriftOracle, ImfConfig, ModelConfig};
use bridgekit::path_sim::*;
use bridgekit::soc::*;
use bridgekit::stats::{mean_and_var, Estimate};
use bridgekit::{DiscreteMeasure, DualPotentials, GaussianBridgePath, GaussianMarginal, LinearReferenceSde, SinkhornConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1() -> Outcome {
    let a = DiscreteMeasure::on_labels(vec![0.5, 0.5]).map_err(|e| e.to_string())?;
    let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let sol = sinkhorn_solve(&a, &a, &cost, &SinkhornConfig { epsilon: 1.0, ..Default::default() }).map_err(|e| e.to_string())?;
    let e = 1f64.exp();
    let oracle = 0.5 * e / (1.0 + e);
    let diag = sol.coupling.weights[(0, 0)];
    let ascent = sol.report.dual_objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    check((diag - oracle).abs() <= 1e-6 && ascent, format!("diagonal {diag:.7} vs {oracle:.7}, dual ascent {ascent}"))
}

fn c2() -> Outcome {
    let sch = compute_schedule(&LinearReferenceSde::brownian(1.0, 1.0, 1).unwrap(), 512).unwrap();
    let s = sch.sigma_star;
    let xs: Vec<f64> = (0..201).map(|i| -6.0 + 0.06 * i as f64).collect();
    let masses = |m: f64, v: f64| xs.iter().map(|x| (-(x - m) * (x - m) / (2.0 * v)).exp()).collect::<Vec<_>>();
    let a = DiscreteMeasure::from_grid_masses(&xs, &masses(-1.0, 0.25)).unwrap();
    let b = DiscreteMeasure::from_grid_masses(&xs, &masses(1.5, 1.0)).unwrap();
    let cost = squared_euclidean_cost(&a, &b);
    let sol = sinkhorn_solve(&a, &b, &cost, &SinkhornConfig { epsilon: 2.0 * s * s, ..Default::default() }).map_err(|e| e.to_string())?;
    let emp = sol.coupling.cross_covariance(&a, &b)[(0, 0)];
    let g = gaussian_eot_closed_form(
        &DVector::from_element(1, -1.0),
        &DMatrix::from_element(1, 1, 0.25),
        &DVector::from_element(1, 1.5),
        &DMatrix::from_element(1, 1, 1.0),
        s,
    )
    .unwrap();
    let c = g.cross[(0, 0)];
    let rel = ((emp - c) / c).abs();
    check(rel <= 0.02, format!("cross-covariance {emp:.5} vs {c:.5} (rel {rel:.2e})"))
}

fn c3() -> Outcome {
    let sigma = 1.0;
    let sch = compute_schedule(&LinearReferenceSde::brownian(sigma, 1.0, 1).unwrap(), 512).unwrap();
    let (a, b) = (GaussianMarginal::scalar(-1.0, 0.25).unwrap(), GaussianMarginal::scalar(1.5, 1.0).unwrap());
    let path = GaussianBridgePath::new(&sch, &a, &b).unwrap();
    let joint = gaussian_eot_closed_form(&a.mean, &a.cov, &b.mean, &b.cov, sch.sigma_star).unwrap();
    let sampler = EndpointSampler::from_gaussian(&joint).unwrap();
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for (k, t) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let xs = sample_bridge_mixture(&sampler, t, 1.0, sigma, n, 30 + k as u64).map_err(|e| e.to_string())?.coord(0);
        let (m, v) = mean_and_var(&xs);
        let (mu, cov) = bridge_moments(&path, t).unwrap();
        let z_mean = (m - mu[0]) / (v / n as f64).sqrt();
        let z_var = (v - cov[(0, 0)]) / (cov[(0, 0)] * (2.0 / (n as f64 - 1.0)).sqrt());
        worst = worst.max(z_mean.abs()).max(z_var.abs());
    }
    check(worst <= 4.0, format!("largest |z| over mean and variance {worst:.2}"))
}

fn c4() -> Outcome {
    let s = |_: f64| 1.0;
    let c = ConstantField(vec![0.7]);
    let spec = SdeSpec { ref_drift: &ZeroField, control: Some(&c), sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens = simulate_sde(&spec, &InitLaw::Point(vec![0.0]), 100_000, 100, 40).map_err(|e| e.to_string())?;
    let kl = path_kl_estimate(&ens, &ZeroField, &c);
    let kl_ok = (kl.mean - 0.245).abs() <= 3.0 * kl.se.max(1e-12);
    let spec0 = SdeSpec { ref_drift: &ZeroField, control: None, sigma_of_t: &s, horizon: 1.0, dim: 1 };
    let ens0 = simulate_sde(&spec0, &InitLaw::Point(vec![0.0]), 100_000, 100, 41).map_err(|e| e.to_string())?;
    let lr = girsanov_log_rnd(&ens0, &ZeroField, &c).map_err(|e| e.to_string())?;
    let w = Estimate::from_samples(&lr.iter().map(|l| l.exp()).collect::<Vec<_>>());
    check(kl_ok && w.within(1.0, 4.0), format!("path KL {:.4}, E[exp(log RND)] {:.4} (z {:.2})", kl.mean, w.mean, w.z_score(1.0)))
}

fn c5() -> Outcome {
    let p = SocProblem::quadratic_terminal();
    let g = SpaceTimeGrid::uniform(-3.0, 3.0, 201, 1.0, 201).unwrap();
    let hjb = hjb_solve_grid(&p, &g).map_err(|e| e.to_string())?;
    let fk_cfg = FeynmanKacConfig { n_mc: 1024, max_dt: 1.0, stratified: true, pilot_rounds: 2 };
    let fk = feynman_kac_value(&p, &g, &fk_cfg, 50).map_err(|e| e.to_string())?;
    let gap = hjb.sup_gap(&fk);
    let u = control_from_value(&hjb, &|_| 1.0);
    let (mut s, mut n) = (0.0, 0.0);
    for t in &g.ts {
        for x in &g.xs {
            s += (u.eval(*x, *t) + x / (2.0 - t)).powi(2);
            n += 1.0;
        }
    }
    let rmse = (s / n).sqrt();
    check(gap <= 0.01 && rmse <= 0.01, format!("HJB/FK sup gap {gap:.4}, control RMSE {rmse:.2e}"))
}

fn c6() -> Outcome {
    let p = SocProblem::quadratic_terminal();
    let ustar = |x: &[f64], t: f64, o: &mut [f64]| o[0] = -x[0] / (2.0 - t);
    let up = |x: &[f64], t: f64, o: &mut [f64]| o[0] = -x[0] / (2.0 - t) + 0.3;
    let e = |x: bridgekit::BridgeError| x.to_string();
    let lv = loss_log_variance_extrapolated(&ustar, &p, &ustar, 100_000, 100, 60).map_err(e)?;
    let re = loss_relative_entropy(&ustar, &p, &simulate_controlled(&p, &ustar, 100_000, 100, 61).map_err(e)?).map_err(e)?;
    let re2 = loss_relative_entropy(&up, &p, &simulate_controlled(&p, &up, 100_000, 100, 62).map_err(e)?).map_err(e)?;
    let gap_se = (re.se.powi(2) + re2.se.powi(2)).sqrt();
    let starts: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
    let pf = SocProblem::quadratic_terminal().with_init(InitLaw::Samples(PointCloud { data: starts, dim: 1 }));
    let cfg = FitConfig {
        loss: FitLoss::LogVariance,
        t_nodes: (0..11).map(|i| i as f64 * 0.1).collect(),
        x_nodes: (0..25).map(|i| -3.0 + 0.25 * i as f64).collect(),
        n_paths: 41 * 200,
        n_steps: 50,
        budget: 2000,
        seed: 63,
    };
    let fit = fit_control(&pf, &cfg).map_err(e)?;
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..=18 {
        for j in 0..=30 {
            let (t, x) = (0.05 * i as f64, -1.5 + 0.1 * j as f64);
            s += (fit.control.eval(x, t) + x / (2.0 - t)).powi(2);
            n += 1.0;
        }
    }
    let rmse = (s / n).sqrt();
    let ok = lv.mean.abs() <= 3.0 * lv.se && re2.mean - re.mean > 3.0 * gap_se && rmse <= 0.05;
    check(
        ok,
        format!(
            "LV {:.1e} ± {:.1e}, RE {:.4} vs {:.4} (gap {:.1} SE), fit RMSE {rmse:.4}",
            lv.mean,
            lv.se,
            re.mean,
            re2.mean,
            (re2.mean - re.mean) / gap_se
        ),
    )
}

fn c7() -> Outcome {
    let sigma = 1.0;
    let sch = compute_schedule(&LinearReferenceSde::brownian(sigma, 1.0, 1).unwrap(), 512).unwrap();
    let (a, b) = (GaussianMarginal::scalar(-1.0, 0.25).unwrap(), GaussianMarginal::scalar(1.5, 1.0).unwrap());
    let path = Arc::new(GaussianBridgePath::new(&sch, &a, &b).unwrap());
    let mut points = Vec::new();
    for i in 0..=18 {
        let t = 0.05 * i as f64;
        let (m, sd) = (path.mean(t)[0], path.cov(t)[(0, 0)].sqrt());
        for j in 0..=20 {
            points.push((m + sd * (-2.0 + 0.2 * j as f64), t));
        }
    }
    let p2 = path.clone();
    let oracle = DriftOracle {
        control: Arc::new(move |x, t| {
            let (am, bv) = p2.affine_drift(t).expect("t in range");
            (am[(0, 0)] * x + bv[0]) / sigma
        }),
        points,
    };
    let cfg = ImfConfig {
        n_samples: 20_000,
        n_t_per_pair: 16,
        model: ModelConfig { n_centers: 8, ..Default::default() },
        oracle: Some(oracle),
        ..Default::default()
    };
    let pi0 = InitLaw::gaussian(&a.mean, &a.cov).unwrap();
    let pit = InitLaw::gaussian(&b.mean, &b.cov).unwrap();
    let (_, report) = imf_run(&pi0, &pit, sigma, 1.0, 10, &cfg, 11).map_err(|e| e.to_string())?;
    let last = report.iterations.last().unwrap();
    let c = path.c_sigma_star[(0, 0)];
    let rmse = last.drift_rmse.unwrap();
    let rel = ((last.endpoint_cross_cov - c) / c).abs();
    let monotone = report.iterations.windows(2).all(|w| w[1].kl.mean <= w[0].kl.mean + 3.0 * (w[0].kl.se.powi(2) + w[1].kl.se.powi(2)).sqrt());
    check(
        rmse <= 0.05 && rel <= 0.05 && monotone,
        format!("drift RMSE {rmse:.4}, cross-covariance {:.4} vs {c:.4}, KL monotone {monotone}", last.endpoint_cross_cov),
    )
}

fn c8() -> Outcome {
    let q0 = random_generator(5, 0.2, 1.5, 17);
    let (pi0, pit) = (random_law(5, 18), random_law(5, 19));
    let sb = discrete_sb_exact(&q0, &pi0, &pit, 1.0).map_err(|e| e.to_string())?;
    let (m0, m1) = sb.marginals();
    let marg = (0..5).map(|k| (m0[k] - pi0[k]).abs().max((m1[k] - pit[k]).abs())).fold(0.0, f64::max);
    let best = sb.kl_to_reference();
    let beaten = (0..20).all(|s| coupling_kl(&random_coupling(&pi0, &pit, 100 + s), &sb.reference_coupling) > best);
    let rep = ddsbm_run(&q0, &pi0, &pit, 1.0, 20, DdsbmMode::Exact, None, 1).map_err(|e| e.to_string())?;
    let hit = rep.steps.iter().position(|s| s.kl_to_sb <= 1e-8);
    let monotone = rep.steps.windows(2).all(|w| w[1].kl_to_sb <= w[0].kl_to_sb + 1e-12);
    check(
        marg <= 1e-9 && beaten && hit.is_some() && monotone,
        format!("marginal error {marg:.1e}, beats 20 couplings {beaten}, DDSBM reaches 1e-8 at step {hit:?}, monotone {monotone}"),
    )
}

fn c9() -> Outcome {
    let q1 = RateSchedule::constant(RateMatrix::two_state(1.0), 1.0);
    let q2 = RateSchedule::constant(RateMatrix::two_state(2.0), 1.0);
    let init = [0.5, 0.5];
    let oracle = 2.0 * 2f64.ln() - 1.0;
    let exact = ctmc_kl(&q2, &q1, &init, &init, KlMethod::Exact).map_err(|e| e.to_string())?;
    let mc = ctmc_kl(&q2, &q1, &init, &init, KlMethod::MonteCarlo { n_paths: 100_000, seed: 90 }).map_err(|e| e.to_string())?;
    check(
        (exact.mean - oracle).abs() <= 1e-10 && mc.within(oracle, 4.0),
        format!("exact {:.12} vs {oracle:.12}, Monte Carlo {:.4} (z {:.2})", exact.mean, mc.mean, mc.z_score(oracle)),
    )
}

fn law(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn spd2(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(2, 2) * rng.gen_range(0.05..0.5)
}

fn c10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let cases = 100;
    let mut violations: Vec<String> = Vec::new();
    let mut flag = |name: &str, ok: bool| {
        if !ok {
            violations.push(name.to_string());
        }
    };
    let line = |rng: &mut ChaCha8Rng, n: usize| {
        let pts = (0..n).map(|_| DVector::from_element(1, rng.gen_range(-2.0..2.0))).collect();
        DiscreteMeasure::new(pts, law(rng, n)).unwrap()
    };
    for _ in 0..cases {
        // Dual ascent and potential-shift invariance.
        let (a, b) = (line(&mut rng, 6), line(&mut rng, 5));
        let c = squared_euclidean_cost(&a, &b);
        let eps = rng.gen_range(0.05..3.0);
        let sol = sinkhorn_solve(&a, &b, &c, &SinkhornConfig { epsilon: eps, max_iters: 200, ..Default::default() }).unwrap();
        flag("dual ascent", sol.report.dual_objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0)));
        let p = DualPotentials { phi: DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0)), phi_hat: DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0)) };
        let shift = rng.gen_range(-5.0..5.0);
        let base = coupling_from_potentials(&p, &a, &b, &c, eps).unwrap();
        let moved = coupling_from_potentials(&p.shifted(shift), &a, &b, &c, eps).unwrap();
        flag("potential shift", (&base.weights - moved.weights).amax() <= 1e-10 * base.weights.amax().max(1.0));

        // KL chain rule on a 4×4 joint.
        let (p, q) = (law(&mut rng, 16), law(&mut rng, 16));
        let kl = |x: &[f64], y: &[f64]| kl_discrete(x, y).unwrap();
        let px: Vec<f64> = (0..4).map(|i| p[4 * i..4 * i + 4].iter().sum()).collect();
        let qx: Vec<f64> = (0..4).map(|i| q[4 * i..4 * i + 4].iter().sum()).collect();
        let mut rhs = kl(&px, &qx);
        for i in 0..4 {
            let pc: Vec<f64> = p[4 * i..4 * i + 4].iter().map(|v| v / px[i]).collect();
            let qc: Vec<f64> = q[4 * i..4 * i + 4].iter().map(|v| v / qx[i]).collect();
            rhs += px[i] * kl(&pc, &qc);
        }
        flag("KL chain rule", (kl(&p, &q) - rhs).abs() < 1e-10);

        // Data processing through a random kernel.
        let (p, q) = (law(&mut rng, 5), law(&mut rng, 5));
        let k: Vec<Vec<f64>> = (0..5).map(|_| law(&mut rng, 4)).collect();
        let push = |v: &[f64]| -> Vec<f64> { (0..4).map(|j| (0..5).map(|i| v[i] * k[i][j]).sum()).collect() };
        flag("data processing", kl(&push(&p), &push(&q)) <= kl(&p, &q) + 1e-12);

        // Generator and transition validity.
        let n = rng.gen_range(2..7);
        let g = random_generator(n, 0.1, 2.0, rng.gen());
        let t = rng.gen_range(0.0..5.0);
        let pt = homogeneous_transition(&g, t).unwrap();
        let half = homogeneous_transition(&g, t / 2.0).unwrap();
        flag("generator validity", check_generator(&g.rates).is_ok() && check_stochastic(&pt).is_ok() && (&half * &half - pt).amax() < 1e-10);

        // Doob transform of the pinned harmonic.
        let q0 = random_generator(4, 0.2, 1.5, rng.gen());
        let target = rng.gen_range(0..4);
        let frac = rng.gen_range(0.0..0.95);
        let q0c = q0.clone();
        let h = move |x: usize, t: f64| homogeneous_transition(&q0c, 1.0 - t).unwrap()[(x, target)];
        let tilt = doob_tilt(&q0, &h, 1.0, &[0.0, 0.5, 0.9]).unwrap();
        let cg = conditioned_generator(&q0, target, frac, 1.0).unwrap();
        flag("Doob equivalence", check_generator(&cg.rates).is_ok() && (tilt.rates_at(frac) - cg.rates).amax() < 1e-10);

        // Drift Jacobian symmetry and Lyapunov residual.
        let sch = compute_schedule(&LinearReferenceSde::brownian(1.0, 1.0, 2).unwrap(), 256).unwrap();
        let (s0, s1) = (spd2(&mut rng), spd2(&mut rng));
        let m = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let path = GaussianBridgePath::new(&sch, &GaussianMarginal::new(m.clone(), s0.clone()).unwrap(), &GaussianMarginal::new(-m, s1).unwrap()).unwrap();
        let x = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let t = rng.gen_range(0.05..0.95);
        let hstep = 1e-5;
        let mut jac = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += hstep;
            xm[j] -= hstep;
            jac.set_column(j, &((bridge_drift(&path, &xp, t).unwrap() - bridge_drift(&path, &xm, t).unwrap()) / (2.0 * hstep)));
        }
        flag("Jacobian symmetry", (&jac - jac.transpose()).amax() < 1e-6);
        let hm = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let u = &hm + hm.transpose();
        let al = lyapunov_solve(&s0, &u).unwrap();
        flag("Lyapunov residual", (&s0 * &al + &al * &s0 - &u).norm() <= 1e-10);
    }
    check(violations.is_empty(), format!("{} violations over {cases} cases of 8 invariants {violations:?}", violations.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("1 sinkhorn analytic instance", c1, Duration::from_secs(1)),
        ("2 gaussian closed form vs sinkhorn", c2, Duration::from_secs(10)),
        ("3 bridge-mixture marginals", c3, Duration::from_secs(30)),
        ("4 girsanov identities", c4, Duration::from_secs(30)),
        ("5 soc solver agreement", c5, Duration::from_secs(60)),
        ("6 soc loss landscape", c6, Duration::from_secs(300)),
        ("7 continuous imf", c7, Duration::from_secs(300)),
        ("8 discrete exact sb", c8, Duration::from_secs(30)),
        ("9 ctmc kl analytic instance", c9, Duration::from_secs(30)),
        ("10 invariant suite", c10, Duration::from_secs(600)),
    ];
    let total = Instant::now();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= limit, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!("[{}] criterion {name}: {detail} ({:.2}s, limit {}s)", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64(), limit.as_secs());
    }
    println!("acceptance: {}/10 passed in {:.1}s", 10 - failed, total.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
