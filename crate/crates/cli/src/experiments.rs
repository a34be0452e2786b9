use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use toml::Table;

use bridgekit::discrete_sb::{
    ddsbm_run, discrete_sb_exact, random_generator, random_law, DdsbmMode, RateMatrix,
};
use bridgekit::entropic_ot::{gaussian_eot_closed_form, sinkhorn_solve, squared_euclidean_cost, DiscreteMeasure, SinkhornConfig};
use bridgekit::gaussian_bridge::{bridge_moments, bw_action, compute_schedule, GaussianBridgePath, GaussianMarginal, LinearReferenceSde};
use bridgekit::imf::{imf_run, DriftOracle, ImfConfig, ModelConfig};
use bridgekit::path_sim::{sample_bridge_mixture, EndpointSampler, InitLaw};
use bridgekit::rng::sub_seed;
use bridgekit::soc::{
    control_from_value, feynman_kac_value, hjb_solve_grid, loss_log_variance_extrapolated, loss_relative_entropy, simulate_controlled,
    FeynmanKacConfig, SocProblem, SpaceTimeGrid, ValueGrid,
};
use bridgekit::stats::{histogram, mean_and_var};

use crate::config::{module_err, usage, CliResult, ExperimentConfig};
use crate::manifest::{write_manifest, Outputs, RunManifest};

pub const CATALOGUE: &[(&str, &str)] = &[
    ("sinkhorn", "entropic OT by Sinkhorn: coupling, dual and marginal-error traces"),
    ("gaussian-bridge", "closed-form Gaussian bridge: moments and drift field"),
    ("bridge-mixture", "bridge-mixture marginals against closed-form moments"),
    ("soc-grid", "value grids by HJB and Feynman-Kac, derived control, loss comparisons"),
    ("imf", "iterative Markovian fitting between 1-D Gaussians"),
    ("discrete-sb", "exact discrete Schrödinger bridge and DDSBM iterations"),
];

const SINKHORN: &str = r#"
instance = "analytic-2x2"
epsilon = 1.0
max_iters = 10000
tol = 1e-9
log_domain = true
n_grid = 201
x_lo = -6.0
x_hi = 6.0
mu0 = -1.0
var0 = 0.25
mu1 = 1.5
var1 = 1.0
"#;

const GAUSSIAN: &str = r#"
reference = "brownian"
sigma = 1.0
theta = 1.0
horizon = 1.0
mu0 = -1.0
var0 = 0.25
mu1 = 1.5
var1 = 1.0
n_times = 21
quad_points = 512
x_lo = -4.0
x_hi = 4.0
n_x = 41
"#;

const MIXTURE: &str = r#"
sigma = 1.0
horizon = 1.0
mu0 = -1.0
var0 = 0.25
mu1 = 1.5
var1 = 1.0
n_samples = 100000
times = [0.25, 0.5, 0.75]
bins = 60
x_lo = -6.0
x_hi = 6.0
"#;

const SOC: &str = r#"
problem = "quadratic"
slope = 1.0
x_lo = -3.0
x_hi = 3.0
nx = 201
nt = 201
n_mc = 1024
n_paths = 20000
n_steps = 100
shift = 0.3
"#;

const IMF: &str = r#"
sigma = 1.0
horizon = 1.0
mu0 = -1.0
var0 = 0.25
mu1 = 1.5
var1 = 1.0
n_iters = 10
n_samples = 20000
n_t_per_pair = 16
n_centers = 8
n_bins = 16
n_steps = 100
"#;

const DISCRETE: &str = r#"
n_states = 5
horizon = 1.0
rate_lo = 0.2
rate_hi = 1.5
rates_file = ""
n_iters = 20
mode = "exact"
n_paths = 10000
"#;

pub fn defaults(name: &str) -> Option<Table> {
    let src = match name {
        "sinkhorn" => SINKHORN,
        "gaussian-bridge" => GAUSSIAN,
        "bridge-mixture" => MIXTURE,
        "soc-grid" => SOC,
        "imf" => IMF,
        "discrete-sb" => DISCRETE,
        _ => return None,
    };
    Some(toml::from_str(src).expect("built-in defaults parse"))
}

pub fn is_stochastic(name: &str) -> bool {
    matches!(name, "bridge-mixture" | "soc-grid" | "imf" | "discrete-sb")
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<RunManifest> {
    let start = Instant::now();
    let mut out = Outputs::new(&cfg.out)?;
    let result = match cfg.experiment.as_str() {
        "sinkhorn" => sinkhorn(cfg, &mut out),
        "gaussian-bridge" => gaussian_bridge(cfg, &mut out),
        "bridge-mixture" => bridge_mixture(cfg, &mut out),
        "soc-grid" => soc_grid(cfg, &mut out),
        "imf" => imf(cfg, &mut out),
        "discrete-sb" => discrete_sb(cfg, &mut out),
        other => usage(format!("unknown experiment {other:?}")),
    };
    if let Err(e) = result {
        out.discard();
        return Err(e);
    }
    let manifest = RunManifest {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: serde_json::to_value(&cfg.params)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        files: out.entries()?,
        out_dir: cfg.out.clone(),
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

fn fmt(x: f64) -> String {
    x.to_string()
}

fn gaussians(cfg: &ExperimentConfig) -> CliResult<(GaussianMarginal<f64>, GaussianMarginal<f64>)> {
    let e = module_err(&cfg.experiment);
    Ok((
        GaussianMarginal::scalar(cfg.f("mu0"), cfg.f("var0")).map_err(&e)?,
        GaussianMarginal::scalar(cfg.f("mu1"), cfg.f("var1")).map_err(&e)?,
    ))
}

fn sinkhorn(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("sinkhorn");
    let (src, dst, cost, oracle) = match cfg.s("instance") {
        "analytic-2x2" => {
            let m = DiscreteMeasure::on_labels(vec![0.5, 0.5]).map_err(&e)?;
            let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
            let a = (1.0 / cfg.f("epsilon")).exp();
            (m.clone(), m, cost, json!({ "diagonal": 0.5 * a / (1.0 + a) }))
        }
        "gaussian-grid" => {
            let n = cfg.u("n_grid")?;
            if n < 2 {
                return usage("n_grid must be at least 2");
            }
            let (lo, hi) = (cfg.f("x_lo"), cfg.f("x_hi"));
            let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            let dens = |m: f64, v: f64| -> Vec<f64> { xs.iter().map(|x| (-(x - m).powi(2) / (2.0 * v)).exp()).collect() };
            let src = DiscreteMeasure::from_grid_masses(&xs, &dens(cfg.f("mu0"), cfg.f("var0"))).map_err(&e)?;
            let dst = DiscreteMeasure::from_grid_masses(&xs, &dens(cfg.f("mu1"), cfg.f("var1"))).map_err(&e)?;
            let cost = squared_euclidean_cost(&src, &dst);
            let sigma = (cfg.f("epsilon") / 2.0).sqrt();
            let g = gaussian_eot_closed_form(
                &DVector::from_element(1, cfg.f("mu0")),
                &DMatrix::from_element(1, 1, cfg.f("var0")),
                &DVector::from_element(1, cfg.f("mu1")),
                &DMatrix::from_element(1, 1, cfg.f("var1")),
                sigma,
            )
            .map_err(&e)?;
            (src, dst, cost, json!({ "cross_covariance": g.cross[(0, 0)] }))
        }
        other => return usage(format!("unknown sinkhorn instance {other:?}")),
    };
    let sc = SinkhornConfig { epsilon: cfg.f("epsilon"), max_iters: cfg.u("max_iters")?, marginal_tol: cfg.f("tol"), log_domain: cfg.params["log_domain"].as_bool().unwrap_or(true) };
    let sol = sinkhorn_solve(&src, &dst, &cost, &sc).map_err(&e)?;
    let w = &sol.coupling.weights;
    out.csv(
        "coupling.csv",
        &["i", "j", "x", "y", "weight"],
        (0..w.nrows()).flat_map(|i| {
            let (src, dst) = (&src, &dst);
            (0..w.ncols()).map(move |j| vec![i.to_string(), j.to_string(), fmt(src.points[i][0]), fmt(dst.points[j][0]), fmt(w[(i, j)])])
        }),
    )?;
    let r = &sol.report;
    out.csv(
        "trace.csv",
        &["half_step", "dual_objective", "marginal_error"],
        r.dual_objective_trace.iter().enumerate().map(|(k, d)| {
            vec![k.to_string(), fmt(*d), r.marginal_error_trace.get(k).map_or(String::new(), |m| fmt(*m))]
        }),
    )?;
    let cross = sol.coupling.cross_covariance(&src, &dst)[(0, 0)];
    out.json(
        "report.json",
        &json!({
            "iterations_used": r.iterations_used,
            "converged": r.converged,
            "diagonal": w[(0, 0)],
            "cross_covariance": cross,
            "oracle": oracle,
        }),
    )
}

fn reference(cfg: &ExperimentConfig) -> CliResult<LinearReferenceSde<f64>> {
    let e = module_err(&cfg.experiment);
    match cfg.s("reference") {
        "brownian" => LinearReferenceSde::brownian(cfg.f("sigma"), cfg.f("horizon"), 1).map_err(e),
        "ou" => LinearReferenceSde::ornstein_uhlenbeck(cfg.f("theta"), cfg.f("sigma"), cfg.f("horizon"), 1).map_err(e),
        other => usage(format!("unknown reference {other:?}")),
    }
}

fn gaussian_bridge(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("gaussian-bridge");
    let r = reference(cfg)?;
    let sch = compute_schedule(&r, cfg.u("quad_points")?).map_err(&e)?;
    let (a, b) = gaussians(cfg)?;
    let path = GaussianBridgePath::new(&sch, &a, &b).map_err(&e)?;
    let big_t = cfg.f("horizon");
    let nt = cfg.u("n_times")?.max(3);
    let ts: Vec<f64> = (0..nt).map(|k| big_t * k as f64 / (nt - 1) as f64).collect();
    let mut rows = Vec::new();
    let mut covs = Vec::new();
    for &t in &ts {
        let (m, c) = bridge_moments(&path, t).map_err(&e)?;
        rows.push(vec![fmt(t), fmt(m[0]), fmt(c[(0, 0)])]);
        covs.push(c);
    }
    out.csv("moments.csv", &["t", "mean", "var"], rows)?;
    let (lo, hi, nx) = (cfg.f("x_lo"), cfg.f("x_hi"), cfg.u("n_x")?.max(2));
    let mut drift = Vec::new();
    for &t in &ts {
        let (am, bv) = path.affine_drift(t).map_err(&e)?;
        for j in 0..nx {
            let x = lo + (hi - lo) * j as f64 / (nx - 1) as f64;
            drift.push(vec![fmt(t), fmt(x), fmt(am[(0, 0)] * x + bv[0])]);
        }
    }
    out.csv("drift.csv", &["t", "x", "drift"], drift)?;
    let sigma = cfg.f("sigma");
    let action = bw_action(&covs, big_t, &|_| sigma).map_err(&e)?;
    out.json("report.json", &json!({ "c_sigma_star": path.c_sigma_star[(0, 0)], "sigma_star": sch.sigma_star, "bw_action": action }))
}

fn bridge_mixture(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("bridge-mixture");
    let (sigma, big_t) = (cfg.f("sigma"), cfg.f("horizon"));
    let r = LinearReferenceSde::brownian(sigma, big_t, 1).map_err(&e)?;
    let sch = compute_schedule(&r, 256).map_err(&e)?;
    let (a, b) = gaussians(cfg)?;
    let path = GaussianBridgePath::new(&sch, &a, &b).map_err(&e)?;
    let joint = gaussian_eot_closed_form(&a.mean, &a.cov, &b.mean, &b.cov, sch.sigma_star).map_err(&e)?;
    let sampler = EndpointSampler::from_gaussian(&joint).map_err(&e)?;
    let n = cfg.u("n_samples")?;
    let (bins, lo, hi) = (cfg.u("bins")?.max(1), cfg.f("x_lo"), cfg.f("x_hi"));
    let mut hist = Vec::new();
    let mut moments = Vec::new();
    for (k, t) in cfg.fv("times").into_iter().enumerate() {
        let cloud = sample_bridge_mixture(&sampler, t, big_t, sigma, n, sub_seed(cfg.seed(), &format!("mixture/{k}"))).map_err(&e)?;
        let xs = cloud.coord(0);
        for (l, rr, d) in histogram(&xs, bins, lo, hi) {
            hist.push(vec![fmt(t), fmt(l), fmt(rr), fmt(d)]);
        }
        let (m, v) = mean_and_var(&xs);
        let (mu, cov) = bridge_moments(&path, t).map_err(&e)?;
        let nf = n as f64;
        let z_mean = (m - mu[0]) / (v / nf).sqrt();
        let z_var = (v - cov[(0, 0)]) / (cov[(0, 0)] * (2.0 / (nf - 1.0)).sqrt());
        moments.push(vec![fmt(t), fmt(m), fmt(v), fmt(mu[0]), fmt(cov[(0, 0)]), fmt(z_mean), fmt(z_var)]);
    }
    out.csv("histograms.csv", &["t", "left", "right", "density"], hist)?;
    out.csv("moments.csv", &["t", "mc_mean", "mc_var", "mean", "var", "z_mean", "z_var"], moments)
}

fn value_rows(v: &ValueGrid) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, t) in v.ts.iter().enumerate() {
        for (j, x) in v.xs.iter().enumerate() {
            rows.push(vec![fmt(*t), fmt(*x), fmt(v.values[k][j])]);
        }
    }
    rows
}

fn soc_grid(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("soc-grid");
    let problem = match cfg.s("problem") {
        "quadratic" => SocProblem::quadratic_terminal(),
        "linear" => SocProblem::linear_terminal(cfg.f("slope"), 1.0),
        other => return usage(format!("unknown problem {other:?}")),
    };
    let grid = SpaceTimeGrid::uniform(cfg.f("x_lo"), cfg.f("x_hi"), cfg.u("nx")?, problem.horizon, cfg.u("nt")?).map_err(&e)?;
    let hjb = hjb_solve_grid(&problem, &grid).map_err(&e)?;
    let fk_cfg = FeynmanKacConfig { n_mc: cfg.u("n_mc")?, max_dt: problem.horizon, stratified: true, pilot_rounds: 2 };
    let fk = feynman_kac_value(&problem, &grid, &fk_cfg, sub_seed(cfg.seed(), "soc/fk")).map_err(&e)?;
    let control = control_from_value(&hjb, &|_| 1.0);
    out.csv("value_hjb.csv", &["t", "x", "V"], value_rows(&hjb))?;
    out.csv("value_fk.csv", &["t", "x", "V"], value_rows(&fk))?;
    let mut rows = Vec::new();
    for t in &grid.ts {
        for x in &grid.xs {
            rows.push(vec![fmt(*t), fmt(*x), fmt(control.eval(*x, *t))]);
        }
    }
    out.csv("control.csv", &["t", "x", "u"], rows)?;

    let (n_paths, n_steps, shift) = (cfg.u("n_paths")?, cfg.u("n_steps")?, cfg.f("shift"));
    let ustar = |x: &[f64], t: f64, o: &mut [f64]| o[0] = control.eval(x[0], t);
    let shifted = |x: &[f64], t: f64, o: &mut [f64]| o[0] = control.eval(x[0], t) + shift;
    let ens = simulate_controlled(&problem, &ustar, n_paths, n_steps, sub_seed(cfg.seed(), "soc/re")).map_err(&e)?;
    let re = loss_relative_entropy(&ustar, &problem, &ens).map_err(&e)?;
    let ens2 = simulate_controlled(&problem, &shifted, n_paths, n_steps, sub_seed(cfg.seed(), "soc/re-shift")).map_err(&e)?;
    let re_shift = loss_relative_entropy(&shifted, &problem, &ens2).map_err(&e)?;
    let lv = loss_log_variance_extrapolated(&ustar, &problem, &ustar, n_paths, n_steps, sub_seed(cfg.seed(), "soc/lv")).map_err(&e)?;
    out.json(
        "losses.json",
        &json!({
            "sup_gap_hjb_fk": hjb.sup_gap(&fk),
            "relative_entropy": re,
            "relative_entropy_shifted": re_shift,
            "log_variance_extrapolated": lv,
        }),
    )
}

fn imf(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("imf");
    let (sigma, big_t) = (cfg.f("sigma"), cfg.f("horizon"));
    let r = LinearReferenceSde::brownian(sigma, big_t, 1).map_err(&e)?;
    let sch = compute_schedule(&r, 256).map_err(&e)?;
    let (a, b) = gaussians(cfg)?;
    let path = std::sync::Arc::new(GaussianBridgePath::new(&sch, &a, &b).map_err(&e)?);
    let mut points = Vec::new();
    for i in 0..=18 {
        let t = 0.05 * i as f64 * big_t;
        let (m, c) = (path.mean(t)[0], path.cov(t)[(0, 0)].sqrt());
        for j in 0..=20 {
            points.push((m + c * (-2.0 + 0.2 * j as f64), t));
        }
    }
    let p2 = path.clone();
    let oracle = DriftOracle {
        control: std::sync::Arc::new(move |x, t| {
            let (am, bv) = p2.affine_drift(t).expect("t in range");
            (am[(0, 0)] * x + bv[0]) / sigma
        }),
        points,
    };
    let config = ImfConfig {
        n_samples: cfg.u("n_samples")?,
        n_t_per_pair: cfg.u("n_t_per_pair")?,
        n_steps: cfg.u("n_steps")?,
        model: ModelConfig { n_bins: cfg.u("n_bins")?, n_centers: cfg.u("n_centers")?, ridge: 1e-6 },
        oracle: Some(oracle),
        ..Default::default()
    };
    let pi0 = InitLaw::gaussian(&a.mean, &a.cov).map_err(&e)?;
    let pit = InitLaw::gaussian(&b.mean, &b.cov).map_err(&e)?;
    let (state, report) = imf_run(&pi0, &pit, sigma, big_t, cfg.u("n_iters")?, &config, sub_seed(cfg.seed(), "imf")).map_err(&e)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.write("imf_report.csv", &buf)?;
    out.write("forward_model.json", state.forward_model.to_json().as_bytes())?;
    out.json("report.json", &json!({ "c_sigma_star": path.c_sigma_star[(0, 0)], "kl_increase_warning": report.kl_increase_warning, "iterations": report.iterations }))
}

fn load_rates(path: &str) -> CliResult<RateMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::config::CliError::Usage(format!("cannot read {path}: {e}")))?;
    let e = module_err("discrete-sb");
    if path.ends_with(".json") {
        return RateMatrix::from_json_triplets(&text).map_err(e);
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|err| crate::config::CliError::Usage(format!("{path}: {err}"))))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    RateMatrix::from_rows(&rows).map_err(e)
}

fn discrete_sb(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let e = module_err("discrete-sb");
    let seed = cfg.seed();
    let q0 = match cfg.s("rates_file") {
        "" => random_generator(cfg.u("n_states")?, cfg.f("rate_lo"), cfg.f("rate_hi"), sub_seed(seed, "discrete/q0")),
        p => load_rates(p)?,
    };
    let n = q0.n_states();
    let pi0 = random_law(n, sub_seed(seed, "discrete/pi0"));
    let pit = random_law(n, sub_seed(seed, "discrete/piT"));
    let big_t = cfg.f("horizon");
    let sb = discrete_sb_exact(&q0, &pi0, &pit, big_t).map_err(&e)?;
    let c = &sb.coupling;
    out.csv("coupling.csv", &["x0", "xT", "weight"], (0..n).flat_map(|i| (0..n).map(move |j| vec![i.to_string(), j.to_string(), fmt(c[(i, j)])])))?;
    let mut gen_rows = Vec::new();
    for k in 0..=4 {
        let t = big_t * k as f64 / 4.0;
        let g = sb.generator_at(t).map_err(&e)?;
        for i in 0..n {
            for j in 0..n {
                gen_rows.push(vec![fmt(t), i.to_string(), j.to_string(), fmt(g.rates[(i, j)])]);
            }
        }
    }
    out.csv("sb_generator.csv", &["t", "i", "j", "rate"], gen_rows)?;
    let mode = match cfg.s("mode") {
        "exact" => DdsbmMode::Exact,
        "sampled" => DdsbmMode::Sampled { n_paths: cfg.u("n_paths")? },
        other => return usage(format!("unknown mode {other:?}")),
    };
    let report = ddsbm_run(&q0, &pi0, &pit, big_t, cfg.u("n_iters")?, mode, None, sub_seed(seed, "discrete/ddsbm")).map_err(&e)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.write("ddsbm.csv", &buf)?;
    out.json("report.json", &json!({ "pi0": pi0, "piT": pit, "kl_to_reference": sb.kl_to_reference(), "steps": report.steps }))
}
