//! Schrödinger bridges and stochastic control on finite state spaces.
//!
//! Generators are dense `n × n` rate matrices with nonnegative off-diagonals and zero
//! row sums. Time-dependent generators are either piecewise constant ([`RateSchedule`])
//! or given analytically through [`TimeGenerator`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropic_ot::{kl_discrete, sinkhorn_solve, DiscreteMeasure, SinkhornConfig};
use crate::error::{invalid, numerical, BridgeError, Result};
use crate::rng::{stream, StreamRng};
use crate::stats::Estimate;

const GENERATOR_TOL: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    pub rates: DMatrix<f64>,
}

#[derive(Deserialize)]
struct Triplets {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl RateMatrix {
    pub fn new(rates: DMatrix<f64>) -> Result<Self> {
        check_generator(&rates)?;
        Ok(RateMatrix { rates })
    }

    /// Off-diagonal rates; the diagonal is filled with the negative row sums.
    pub fn from_off_diagonal(mut rates: DMatrix<f64>) -> Result<Self> {
        if !rates.is_square() {
            return invalid("rate matrix must be square");
        }
        fill_diagonal(&mut rates);
        Self::new(rates)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("rate matrix rows must all have length n");
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// `{"n": 3, "entries": [[0, 1, 0.5], ...]}`, off-diagonal triplets.
    pub fn from_json_triplets(s: &str) -> Result<Self> {
        let t: Triplets = serde_json::from_str(s).map_err(|e| BridgeError::InvalidInput(format!("bad triplet JSON: {e}")))?;
        let mut m = DMatrix::zeros(t.n, t.n);
        for (i, j, r) in t.entries {
            if i >= t.n || j >= t.n || i == j {
                return invalid(format!("bad triplet ({i}, {j})"));
            }
            m[(i, j)] = r;
        }
        Self::from_off_diagonal(m)
    }

    /// Symmetric two-state generator with rate `lambda`.
    pub fn two_state(lambda: f64) -> Self {
        RateMatrix { rates: DMatrix::from_row_slice(2, 2, &[-lambda, lambda, lambda, -lambda]) }
    }

    pub fn n_states(&self) -> usize {
        self.rates.nrows()
    }

    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.rates[(x, x)]
    }
}

fn fill_diagonal(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        m[(i, i)] = 0.0;
        let s: f64 = m.row(i).sum();
        m[(i, i)] = -s;
    }
}

pub fn check_generator(q: &DMatrix<f64>) -> Result<()> {
    if !q.is_square() || q.nrows() == 0 {
        return invalid("rate matrix must be square and nonempty");
    }
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            if !q[(i, j)].is_finite() {
                return invalid(format!("rate ({i}, {j}) is not finite"));
            }
            if i != j && q[(i, j)] < 0.0 {
                return invalid(format!("negative off-diagonal rate at ({i}, {j})"));
            }
        }
        let s: f64 = q.row(i).sum();
        let scale = q[(i, i)].abs().max(1.0);
        if s.abs() > GENERATOR_TOL * scale {
            return invalid(format!("row {i} of the generator sums to {s:e}"));
        }
    }
    Ok(())
}

pub fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    for i in 0..p.nrows() {
        if p.row(i).iter().any(|x| !(*x >= -GENERATOR_TOL)) {
            return numerical(format!("transition row {i} has a negative or non-finite entry"));
        }
        let s: f64 = p.row(i).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return numerical(format!("transition row {i} sums to {s}"));
        }
    }
    Ok(())
}

/// Piecewise-constant generator: `pieces[k]` acts on `[starts[k], starts[k+1])`, the last
/// piece up to `horizon`.
#[derive(Clone, Debug)]
pub struct RateSchedule {
    pub starts: Vec<f64>,
    pub pieces: Vec<RateMatrix>,
    pub horizon: f64,
}

impl RateSchedule {
    pub fn constant(q: RateMatrix, horizon: f64) -> Self {
        RateSchedule { starts: vec![0.0], pieces: vec![q], horizon }
    }

    pub fn new(starts: Vec<f64>, pieces: Vec<RateMatrix>, horizon: f64) -> Result<Self> {
        if starts.is_empty() || starts.len() != pieces.len() || starts[0] != 0.0 {
            return invalid("schedule needs one start per piece, the first at 0");
        }
        if starts.windows(2).any(|w| !(w[1] > w[0])) || !(horizon > *starts.last().unwrap()) {
            return invalid("piece starts must increase and lie below the horizon");
        }
        let n = pieces[0].n_states();
        if pieces.iter().any(|p| p.n_states() != n) {
            return invalid("all pieces need the same number of states");
        }
        Ok(RateSchedule { starts, pieces, horizon })
    }

    /// Midpoint discretisation of a time-dependent generator on `n_pieces` equal pieces.
    pub fn from_generator(g: &dyn TimeGenerator, n_pieces: usize) -> Result<Self> {
        let h = g.horizon() / n_pieces as f64;
        let starts = (0..n_pieces).map(|k| k as f64 * h).collect();
        let pieces = (0..n_pieces)
            .map(|k| RateMatrix::new(g.rates_at((k as f64 + 0.5) * h)))
            .collect::<Result<Vec<_>>>()?;
        RateSchedule::new(starts, pieces, g.horizon())
    }

    pub fn n_states(&self) -> usize {
        self.pieces[0].n_states()
    }

    fn piece_at(&self, t: f64) -> usize {
        self.starts.partition_point(|s| *s <= t).saturating_sub(1)
    }

    fn piece_end(&self, k: usize) -> f64 {
        self.starts.get(k + 1).copied().unwrap_or(self.horizon)
    }
}

/// Time-dependent generator with exact holding integrals where available.
pub trait TimeGenerator: Sync {
    fn n_states(&self) -> usize;
    fn horizon(&self) -> f64;
    fn rates_at(&self, t: f64) -> DMatrix<f64>;

    fn rate(&self, x: usize, y: usize, t: f64) -> f64 {
        self.rates_at(t)[(x, y)]
    }

    /// `∫_a^b Σ_{y≠x} Q_t(x, y) dt`; composite Simpson unless overridden.
    fn exit_integral(&self, x: usize, a: f64, b: f64) -> f64 {
        let m = 32;
        let h = (b - a) / m as f64;
        let f = |t: f64| -self.rates_at(t)[(x, x)];
        let mut s = f(a) + f(b);
        for k in 1..m {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }
}

impl TimeGenerator for RateSchedule {
    fn n_states(&self) -> usize {
        RateSchedule::n_states(self)
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rates_at(&self, t: f64) -> DMatrix<f64> {
        self.pieces[self.piece_at(t)].rates.clone()
    }

    fn rate(&self, x: usize, y: usize, t: f64) -> f64 {
        self.pieces[self.piece_at(t)].rates[(x, y)]
    }

    fn exit_integral(&self, x: usize, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        let mut k = self.piece_at(a);
        let mut lo = a;
        while lo < b && k < self.pieces.len() {
            let hi = self.piece_end(k).min(b);
            acc += self.pieces[k].exit_rate(x) * (hi - lo);
            lo = hi;
            k += 1;
        }
        acc
    }
}

/// `P_{t|s}`: product of per-piece matrix exponentials.
pub fn transition_matrix(q: &RateSchedule, s: f64, t: f64) -> Result<DMatrix<f64>> {
    if !(s <= t) {
        return invalid(format!("transition needs s ≤ t, got s = {s}, t = {t}"));
    }
    let n = q.n_states();
    let mut p = DMatrix::identity(n, n);
    let mut k = q.piece_at(s);
    let mut lo = s;
    while lo < t && k < q.pieces.len() {
        let hi = if k + 1 == q.pieces.len() { t } else { q.piece_end(k).min(t) };
        p *= expm(&q.pieces[k].rates, hi - lo);
        lo = hi;
        k += 1;
    }
    clip_stochastic(p)
}

fn expm(q: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    (q * dt).exp()
}

fn clip_stochastic(mut p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_stochastic(&p)?;
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(p)
}

/// Transition matrix of a homogeneous generator over an interval of length `dt`.
pub fn homogeneous_transition(q: &RateMatrix, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt >= 0.0) {
        return invalid("interval length must be nonnegative");
    }
    clip_stochastic(expm(&q.rates, dt))
}

pub fn propagate_forward(q: &RateSchedule, law: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
    check_law(law)?;
    let p = transition_matrix(q, s, t)?;
    Ok((DVector::from_column_slice(law).transpose() * p).iter().copied().collect())
}

/// `φ_t = P_{T|t} φ_T`.
pub fn propagate_backward(q: &RateSchedule, phi_t_end: &[f64], t: f64) -> Result<Vec<f64>> {
    if phi_t_end.iter().any(|v| !(*v >= 0.0)) || phi_t_end.iter().all(|v| *v == 0.0) {
        return invalid("terminal function must be nonnegative and not identically zero");
    }
    let p = transition_matrix(q, t, q.horizon)?;
    Ok((p * DVector::from_column_slice(phi_t_end)).iter().copied().collect())
}

pub fn check_law(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) {
        return invalid("law has a negative or non-finite entry");
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return invalid(format!("law sums to {s}"));
    }
    Ok(())
}

/// Jump path: state `initial` on `[0, jump_times[0])`, then `states[k]` from `jump_times[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtmcPath {
    pub initial: usize,
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl CtmcPath {
    pub fn state_at(&self, t: f64) -> usize {
        match self.jump_times.partition_point(|s| *s <= t) {
            0 => self.initial,
            k => self.states[k - 1],
        }
    }

    pub fn terminal(&self) -> usize {
        self.states.last().copied().unwrap_or(self.initial)
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// `(state, start, end)` holding intervals.
    pub fn holding_intervals(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut cur = self.initial;
        let mut lo = 0.0;
        for (t, s) in self.jump_times.iter().zip(&self.states) {
            out.push((cur, lo, *t));
            cur = *s;
            lo = *t;
        }
        out.push((cur, lo, self.horizon));
        out
    }

    /// CSV rows `time,state`, starting with `0,initial`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "time,state")?;
        writeln!(w, "0,{}", self.initial)?;
        for (t, s) in self.jump_times.iter().zip(&self.states) {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    }
}

fn simulate_with(q: &RateSchedule, x0: usize, rng: &mut StreamRng) -> CtmcPath {
    let mut path = CtmcPath { initial: x0, jump_times: Vec::new(), states: Vec::new(), horizon: q.horizon };
    let mut x = x0;
    let mut t = 0.0;
    let mut k = 0;
    while k < q.pieces.len() {
        let end = q.piece_end(k);
        let rates = &q.pieces[k].rates;
        let exit = -rates[(x, x)];
        if exit <= 0.0 {
            t = end;
            k += 1;
            continue;
        }
        let hold: f64 = Exp1.sample(rng);
        let tj = t + hold / exit;
        if tj >= end {
            // memoryless: restart the clock in the next piece
            t = end;
            k += 1;
            continue;
        }
        let mut u = rng.gen::<f64>() * exit;
        let mut y = x;
        for j in 0..q.n_states() {
            if j == x {
                continue;
            }
            y = j;
            u -= rates[(x, j)];
            if u < 0.0 {
                break;
            }
        }
        t = tj;
        x = y;
        path.jump_times.push(t);
        path.states.push(x);
    }
    path
}

/// Gillespie sampling; deterministic given the seed.
pub fn simulate_ctmc(q: &RateSchedule, x0: usize, seed: u64) -> Result<CtmcPath> {
    if x0 >= q.n_states() {
        return invalid("initial state out of range");
    }
    Ok(simulate_with(q, x0, &mut stream(seed, 0)))
}

fn sample_index(law: &[f64], rng: &mut StreamRng) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, p) in law.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    law.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// `n` paths with `X₀ ~ init`; path `i` uses `stream(seed, i)`.
pub fn simulate_ctmc_paths(q: &RateSchedule, init: &[f64], n: usize, seed: u64) -> Result<Vec<CtmcPath>> {
    check_law(init)?;
    if init.len() != q.n_states() {
        return invalid("initial law has the wrong length");
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let x0 = sample_index(init, &mut rng);
            simulate_with(q, x0, &mut rng)
        })
        .collect())
}

/// `log dP'/dP` along a path: initial ratio, jump ratios and holding integrals.
/// Support violations give `±∞`.
pub fn ctmc_log_rnd(path: &CtmcPath, q_prime: &dyn TimeGenerator, q: &dyn TimeGenerator, pi0_prime: &[f64], pi0: &[f64]) -> f64 {
    let x0 = path.initial;
    let mut acc = match (pi0_prime[x0], pi0[x0]) {
        (a, _) if a == 0.0 => return f64::NEG_INFINITY,
        (_, b) if b == 0.0 => return f64::INFINITY,
        (a, b) => (a / b).ln(),
    };
    let mut prev = x0;
    for (t, s) in path.jump_times.iter().zip(&path.states) {
        let (a, b) = (q_prime.rate(prev, *s, *t), q.rate(prev, *s, *t));
        if a == 0.0 {
            return f64::NEG_INFINITY;
        }
        if b == 0.0 {
            return f64::INFINITY;
        }
        acc += (a / b).ln();
        prev = *s;
    }
    for (x, lo, hi) in path.holding_intervals() {
        if hi > lo {
            acc += q.exit_integral(x, lo, hi) - q_prime.exit_integral(x, lo, hi);
        }
    }
    acc
}

/// Describes the first transition where `q_prime` charges what `q` does not.
pub fn support_violation(path: &CtmcPath, q_prime: &dyn TimeGenerator, q: &dyn TimeGenerator) -> Option<String> {
    let mut prev = path.initial;
    for (t, s) in path.jump_times.iter().zip(&path.states) {
        if q.rate(prev, *s, *t) == 0.0 && q_prime.rate(prev, *s, *t) > 0.0 {
            return Some(format!("transition {prev} → {s} at t = {t}"));
        }
        prev = *s;
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMethod {
    Exact,
    MonteCarlo { n_paths: usize, seed: u64 },
}

fn kl_rate_integrand(qp: &DMatrix<f64>, q: &DMatrix<f64>, p: &[f64]) -> Result<f64> {
    let n = p.len();
    let mut acc = 0.0;
    for x in 0..n {
        if p[x] == 0.0 {
            continue;
        }
        for y in 0..n {
            if y == x {
                continue;
            }
            let (a, b) = (qp[(x, y)], q[(x, y)]);
            let term = if a == 0.0 {
                b
            } else if b == 0.0 {
                return Ok(f64::INFINITY);
            } else {
                a * (a / b).ln() + b - a
            };
            acc += p[x] * term;
        }
    }
    Ok(acc)
}

/// `KL(P' ‖ P)` for two CTMCs: the exact mode integrates the rate divergence against the
/// marginals of `P'` (Simpson per piece), the Monte-Carlo mode averages log-RNDs of paths under `P'`.
pub fn ctmc_kl(q_prime: &RateSchedule, q: &RateSchedule, pi0_prime: &[f64], pi0: &[f64], method: KlMethod) -> Result<Estimate> {
    check_law(pi0_prime)?;
    check_law(pi0)?;
    match method {
        KlMethod::Exact => {
            let mut acc = kl_discrete(pi0_prime, pi0)?;
            let mut cuts: Vec<f64> = q_prime.starts.iter().chain(&q.starts).copied().filter(|t| *t < q.horizon).collect();
            cuts.push(q.horizon);
            cuts.sort_by(|a, b| a.total_cmp(b));
            cuts.dedup();
            let mut law = pi0_prime.to_vec();
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let qp = &q_prime.pieces[q_prime.piece_at(a)].rates;
                let qq = &q.pieces[q.piece_at(a)].rates;
                let m = 64;
                let h = (b - a) / m as f64;
                let step = expm(qp, h);
                let mut s = 0.0;
                let mut cur = DVector::from_column_slice(&law).transpose();
                for k in 0..=m {
                    let wgt = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                    let pv: Vec<f64> = cur.iter().copied().collect();
                    s += wgt * kl_rate_integrand(qp, qq, &pv)?;
                    if k < m {
                        cur *= &step;
                    }
                }
                acc += s * h / 3.0;
                law = cur.iter().copied().collect();
            }
            Ok(Estimate { mean: acc, se: 0.0, n: 0 })
        }
        KlMethod::MonteCarlo { n_paths, seed } => {
            let paths = simulate_ctmc_paths(q_prime, pi0_prime, n_paths, seed)?;
            if let Some(msg) = paths.iter().find_map(|p| support_violation(p, q_prime, q)) {
                return invalid(format!("reference does not dominate: {msg}"));
            }
            let lr: Vec<f64> = paths.par_iter().map(|p| ctmc_log_rnd(p, q_prime, q, pi0_prime, pi0)).collect();
            Ok(Estimate::from_samples(&lr))
        }
    }
}

/// Space–time function `h` on the pieces of a schedule, with `h_t = P_{t'|t} h_{t'}`.
pub trait SpaceTimeHarmonic: Sync {
    fn h(&self, x: usize, t: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64 + Sync> SpaceTimeHarmonic for F {
    fn h(&self, x: usize, t: f64) -> f64 {
        self(x, t)
    }
}

/// `Q^h(x, y) = Q0(x, y)·h(y, t)/h(x, t)`, checked for the martingale property on `check_times`.
pub struct DoobTilt<'a> {
    pub q0: &'a RateMatrix,
    pub h: &'a dyn SpaceTimeHarmonic,
    pub horizon: f64,
}

impl TimeGenerator for DoobTilt<'_> {
    fn n_states(&self) -> usize {
        self.q0.n_states()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rates_at(&self, t: f64) -> DMatrix<f64> {
        let n = self.n_states();
        let hv: Vec<f64> = (0..n).map(|x| self.h.h(x, t)).collect();
        let mut m = DMatrix::from_fn(n, n, |x, y| if x == y { 0.0 } else { self.q0.rates[(x, y)] * hv[y] / hv[x] });
        fill_diagonal(&mut m);
        m
    }
}

pub fn doob_tilt<'a>(q0: &'a RateMatrix, h: &'a dyn SpaceTimeHarmonic, horizon: f64, check_times: &[f64]) -> Result<DoobTilt<'a>> {
    let n = q0.n_states();
    for w in check_times.windows(2) {
        let (t, t2) = (w[0], w[1]);
        let p = homogeneous_transition(q0, t2 - t)?;
        for x in 0..n {
            let ht = h.h(x, t);
            if !(ht > 0.0) {
                return invalid(format!("h({x}, {t}) is not positive"));
            }
            let prop: f64 = (0..n).map(|y| p[(x, y)] * h.h(y, t2)).sum();
            if (prop - ht).abs() > 1e-8 * ht.abs().max(1.0) {
                return invalid(format!("h is not space–time harmonic between t = {t} and {t2} at state {x}"));
            }
        }
    }
    Ok(DoobTilt { q0, h, horizon })
}

/// Generator of the reference pinned at `x_t_end`:
/// `Q0(x, y)·P_{T|t}(x_T|y)/P_{T|t}(x_T|x)` off the diagonal.
pub fn conditioned_generator(q0: &RateMatrix, x_t_end: usize, t: f64, horizon: f64) -> Result<RateMatrix> {
    let p = homogeneous_transition(q0, horizon - t)?;
    let n = q0.n_states();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let den = p[(x, x_t_end)];
        if den == 0.0 {
            return invalid(format!("state {x} cannot reach {x_t_end} by time {horizon}"));
        }
        for y in 0..n {
            if y != x {
                m[(x, y)] = q0.rates[(x, y)] * p[(y, x_t_end)] / den;
            }
        }
    }
    fill_diagonal(&mut m);
    Ok(RateMatrix { rates: m })
}

/// Reference kernels `P_{t|0}` and `P_{T|t}` on a grid of times.
struct Kernels {
    q0: RateMatrix,
    horizon: f64,
}

impl Kernels {
    fn at(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        (expm(&self.q0.rates, t), expm(&self.q0.rates, self.horizon - t))
    }
}

/// `K_t(x, y) = Σ π(x₀,x_T) P_{t|0}(x|x₀) P_{T|t}(x_T|y) / P_{T|0}(x_T|x₀)`; `Π_t(x) = K_t(x, x)`.
fn bridge_kernel(w: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * w * b.transpose()
}

fn coupling_ratio(coupling: &DMatrix<f64>, p_end: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = coupling.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if coupling[(i, j)] > 0.0 {
                if p_end[(i, j)] == 0.0 {
                    return invalid(format!("coupling charges ({i}, {j}) which the reference cannot reach"));
                }
                w[(i, j)] = coupling[(i, j)] / p_end[(i, j)];
            }
        }
    }
    Ok(w)
}

fn projection_from_kernel(q0: &RateMatrix, k: &DMatrix<f64>) -> Result<RateMatrix> {
    let n = q0.n_states();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let mass = k[(x, x)];
        if !(mass > 0.0) {
            return invalid(format!("state {x} has zero mass under the bridge mixture"));
        }
        for y in 0..n {
            if y != x {
                m[(x, y)] = q0.rates[(x, y)] * k[(x, y)] / mass;
            }
        }
    }
    fill_diagonal(&mut m);
    Ok(RateMatrix { rates: m })
}

/// Markovian projection of the bridge mixture `Π = coupling·Q(·|x₀,x_T)` at time `t`:
/// `Q^M_t(x, y) = E_{x_T ~ Π_{T|t}(·|x)}[Q0(x, y; x_T)]`.
pub fn markov_projection_generator(coupling: &DMatrix<f64>, q0: &RateMatrix, horizon: f64, t: f64) -> Result<RateMatrix> {
    if !(0.0..=horizon).contains(&t) {
        return invalid("t must lie in [0, T]");
    }
    let ker = Kernels { q0: q0.clone(), horizon };
    let w = coupling_ratio(coupling, &expm(&q0.rates, horizon))?;
    let (a, b) = ker.at(t);
    projection_from_kernel(q0, &bridge_kernel(&w, &a, &b))
}

/// Time-`t` law of the bridge mixture.
pub fn bridge_mixture_law(coupling: &DMatrix<f64>, q0: &RateMatrix, horizon: f64, t: f64) -> Result<Vec<f64>> {
    let w = coupling_ratio(coupling, &expm(&q0.rates, horizon))?;
    let (a, b) = Kernels { q0: q0.clone(), horizon }.at(t);
    let k = bridge_kernel(&w, &a, &b);
    Ok(k.diagonal().iter().copied().collect())
}

/// Generator of the time reversal `Y_s = X_{T−s}` at forward time `t` (Bayes):
/// `Q̃(x, y) = Q(y, x)·p_t(y)/p_t(x)`.
pub fn reverse_generator(q: &RateMatrix, law_t: &[f64]) -> Result<RateMatrix> {
    let n = q.n_states();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        if law_t[x] == 0.0 {
            continue;
        }
        for y in 0..n {
            if y != x {
                m[(x, y)] = q.rates[(y, x)] * law_t[y] / law_t[x];
            }
        }
    }
    fill_diagonal(&mut m);
    RateMatrix::new(m)
}

/// `dP/dt = P·G(t)`, `P(0) = I`, classical Runge–Kutta.
fn rk4_transition(g: &dyn Fn(f64) -> Result<DMatrix<f64>>, n: usize, horizon: f64, steps: usize) -> Result<DMatrix<f64>> {
    let h = horizon / steps as f64;
    let mut p = DMatrix::<f64>::identity(n, n);
    for k in 0..steps {
        let t = k as f64 * h;
        let (g0, g1, g2) = (g(t)?, g(t + 0.5 * h)?, g(t + h)?);
        let k1 = &p * &g0;
        let k2 = (&p + &k1 * (0.5 * h)) * &g1;
        let k3 = (&p + &k2 * (0.5 * h)) * &g1;
        let k4 = (&p + &k3 * h) * &g2;
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(p)
}

/// Exact discrete Schrödinger bridge for a homogeneous reference.
#[derive(Clone, Debug)]
pub struct DiscreteSb {
    pub q0: RateMatrix,
    pub horizon: f64,
    /// `coupling[(x₀, x_T)]`.
    pub coupling: DMatrix<f64>,
    /// Reference endpoint law `π₀(x₀) P_{T|0}(x_T|x₀)`.
    pub reference_coupling: DMatrix<f64>,
}

impl DiscreteSb {
    pub fn law_at(&self, t: f64) -> Result<Vec<f64>> {
        bridge_mixture_law(&self.coupling, &self.q0, self.horizon, t)
    }

    pub fn generator_at(&self, t: f64) -> Result<RateMatrix> {
        markov_projection_generator(&self.coupling, &self.q0, self.horizon, t)
    }

    /// `KL(SB ‖ reference)`, equal to the KL of the endpoint couplings.
    pub fn kl_to_reference(&self) -> f64 {
        coupling_kl(&self.coupling, &self.reference_coupling)
    }

    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let rows = (0..self.coupling.nrows()).map(|i| self.coupling.row(i).sum()).collect();
        let cols = (0..self.coupling.ncols()).map(|j| self.coupling.column(j).sum()).collect();
        (rows, cols)
    }
}

pub fn coupling_kl(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let a: Vec<f64> = p.iter().copied().collect();
    let b: Vec<f64> = q.iter().copied().collect();
    kl_discrete(&a, &b).unwrap_or(f64::INFINITY)
}

pub fn reference_coupling(q0: &RateMatrix, pi0: &[f64], horizon: f64) -> Result<DMatrix<f64>> {
    let p = homogeneous_transition(q0, horizon)?;
    Ok(DMatrix::from_fn(pi0.len(), pi0.len(), |i, j| pi0[i] * p[(i, j)]))
}

/// Static reduction: Sinkhorn with cost `−log P_{T|0}` and `ε = 1`.
pub fn discrete_sb_exact(q0: &RateMatrix, pi0: &[f64], pi_t: &[f64], horizon: f64) -> Result<DiscreteSb> {
    check_law(pi0)?;
    check_law(pi_t)?;
    let n = q0.n_states();
    if pi0.len() != n || pi_t.len() != n {
        return invalid("marginals must have one entry per state");
    }
    let p = homogeneous_transition(q0, horizon)?;
    let missing: Vec<String> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| pi0[i] > 0.0 && pi_t[j] > 0.0 && p[(i, j)] == 0.0)
        .map(|(i, j)| format!("{i}→{j}"))
        .collect();
    if !missing.is_empty() {
        return invalid(format!("reference transitions with zero probability: {}", missing.join(", ")));
    }
    let cost = DMatrix::from_fn(n, n, |i, j| if p[(i, j)] > 0.0 { -p[(i, j)].ln() } else { 1e300 });
    let src = DiscreteMeasure::on_labels(pi0.to_vec())?;
    let dst = DiscreteMeasure::on_labels(pi_t.to_vec())?;
    let cfg = SinkhornConfig { epsilon: 1.0, max_iters: 100_000, marginal_tol: 1e-13, log_domain: true };
    let sol = sinkhorn_solve(&src, &dst, &cost, &cfg)?;
    if !sol.report.converged {
        return numerical("Sinkhorn did not reach the marginal tolerance");
    }
    Ok(DiscreteSb {
        q0: q0.clone(),
        horizon,
        coupling: sol.coupling.weights,
        reference_coupling: DMatrix::from_fn(n, n, |i, j| pi0[i] * p[(i, j)]),
    })
}

/// Endpoint coupling of the Markov chain started from `pi0` with the Markovian projection
/// of `coupling` as its generator, by Runge–Kutta on the transition matrix.
pub fn markov_projection_endpoints(coupling: &DMatrix<f64>, q0: &RateMatrix, horizon: f64, pi0: &[f64], steps: usize) -> Result<DMatrix<f64>> {
    let n = q0.n_states();
    let w = coupling_ratio(coupling, &expm(&q0.rates, horizon))?;
    let ker = Kernels { q0: q0.clone(), horizon };
    let g = |t: f64| -> Result<DMatrix<f64>> {
        let (a, b) = ker.at(t);
        Ok(projection_from_kernel(q0, &bridge_kernel(&w, &a, &b))?.rates)
    };
    let p = rk4_transition(&g, n, horizon, steps)?;
    Ok(DMatrix::from_fn(n, n, |i, j| pi0[i] * p[(i, j)].max(0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdsbmMode {
    Exact,
    /// Empirical couplings from `n_paths` simulated chains per half-step.
    Sampled { n_paths: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct DdsbmStep {
    /// Half-step counter: odd entries follow a forward projection, even ones a reverse.
    pub step: usize,
    pub forward: bool,
    /// `KL(Πⁿ ‖ P⋆)` on endpoint couplings.
    pub kl_to_sb: f64,
    pub tv_to_sb: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DdsbmReport {
    pub steps: Vec<DdsbmStep>,
    #[serde(skip)]
    pub coupling: DMatrix<f64>,
}

impl DdsbmReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,direction,kl_to_sb,tv_to_sb")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{}", s.step, if s.forward { "forward" } else { "reverse" }, s.kl_to_sb, s.tv_to_sb)?;
        }
        Ok(())
    }
}

fn tv(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

fn col_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m.column(j).sum()).collect()
}

/// `π_T(x_T)·M(x₀ | x_T)`: the reverse-time chain restarted from `π_T`.
fn reverse_restart(m: &DMatrix<f64>, pi_t: &[f64]) -> DMatrix<f64> {
    let mt = col_sums(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if mt[j] > 0.0 { pi_t[j] * m[(i, j)] / mt[j] } else { 0.0 })
}

/// Discrete bridge matching: alternating forward and reverse Markovian projections, each
/// followed by a reciprocal projection onto the reference bridges.
pub fn ddsbm_run(
    q0: &RateMatrix,
    pi0: &[f64],
    pi_t: &[f64],
    horizon: f64,
    n_iters: usize,
    mode: DdsbmMode,
    init: Option<DMatrix<f64>>,
    seed: u64,
) -> Result<DdsbmReport> {
    let sb = discrete_sb_exact(q0, pi0, pi_t, horizon)?;
    let n = q0.n_states();
    let mut coupling = init.unwrap_or_else(|| DMatrix::from_fn(n, n, |i, j| pi0[i] * pi_t[j]));
    let mut steps = Vec::new();
    let rk_steps = 2000;
    for it in 0..n_iters {
        for forward in [true, false] {
            let step = 2 * it + if forward { 1 } else { 2 };
            coupling = match mode {
                DdsbmMode::Exact => {
                    let start = if forward { pi0.to_vec() } else { row_sums(&coupling) };
                    let m = markov_projection_endpoints(&coupling, q0, horizon, &start, rk_steps)?;
                    if forward {
                        m
                    } else {
                        reverse_restart(&m, pi_t)
                    }
                }
                DdsbmMode::Sampled { n_paths } => {
                    let s = crate::rng::sub_seed(seed, &format!("ddsbm/{step}"));
                    sampled_projection(&coupling, q0, horizon, if forward { pi0 } else { pi_t }, forward, n_paths, s)?
                }
            };
            steps.push(DdsbmStep { step, forward, kl_to_sb: coupling_kl(&coupling, &sb.coupling), tv_to_sb: tv(&coupling, &sb.coupling) });
        }
    }
    Ok(DdsbmReport { steps, coupling })
}

/// Simulated half-step: chains driven by the (piecewise-constant, midpoint) Markovian
/// projection, forward from `start` or, for the reverse direction, backward in time with
/// the Bayes reverse generator; returns the empirical endpoint coupling.
fn sampled_projection(coupling: &DMatrix<f64>, q0: &RateMatrix, horizon: f64, start: &[f64], forward: bool, n_paths: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = q0.n_states();
    let pieces = 100;
    let h = horizon / pieces as f64;
    let w = coupling_ratio(coupling, &expm(&q0.rates, horizon))?;
    let ker = Kernels { q0: q0.clone(), horizon };
    let kernels: Vec<DMatrix<f64>> = (0..pieces)
        .map(|k| {
            // piece k of the simulated direction
            let t = if forward { (k as f64 + 0.5) * h } else { horizon - (k as f64 + 0.5) * h };
            let (a, b) = ker.at(t);
            let kt = bridge_kernel(&w, &a, &b);
            let qm = projection_from_kernel(q0, &kt)?;
            let g = if forward {
                qm
            } else {
                let law: Vec<f64> = kt.diagonal().iter().copied().collect();
                reverse_generator(&qm, &law)?
            };
            homogeneous_transition(&g, h)
        })
        .collect::<Result<_>>()?;
    let counts: Vec<(usize, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let x0 = sample_index(start, &mut rng);
            let mut x = x0;
            for p in &kernels {
                let row: Vec<f64> = p.row(x).iter().copied().collect();
                x = sample_index(&row, &mut rng);
            }
            if forward {
                (x0, x)
            } else {
                (x, x0)
            }
        })
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (a, b) in counts {
        out[(a, b)] += 1.0 / n_paths as f64;
    }
    Ok(out)
}

/// `V[t][x]` with `φ = e^{−V}`; `V[T] = Φ`.
#[derive(Clone, Debug)]
pub struct DiscreteValue {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DiscreteValue {
    pub fn phi(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|r| r.iter().map(|v| (-v).exp()).collect()).collect()
    }
}

/// Optimal generator `Q⋆_t(x, y) = Q0(x, y)·e^{V_t(x) − V_t(y)}` for a homogeneous reference.
#[derive(Clone, Debug)]
pub struct OptimalGenerator {
    pub q0: RateMatrix,
    pub terminal_cost: Vec<f64>,
    pub horizon: f64,
}

impl OptimalGenerator {
    /// `V_t = −log(P_{T|t} e^{−Φ})`, in log-sum-exp form.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let p = expm(&self.q0.rates, self.horizon - t);
        let n = self.q0.n_states();
        (0..n)
            .map(|x| {
                let terms: Vec<f64> = (0..n).filter(|y| p[(x, *y)] > 0.0).map(|y| p[(x, y)].ln() - self.terminal_cost[y]).collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                -(m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
            })
            .collect()
    }
}

impl TimeGenerator for OptimalGenerator {
    fn n_states(&self) -> usize {
        self.q0.n_states()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rates_at(&self, t: f64) -> DMatrix<f64> {
        let v = self.value_at(t);
        let n = self.n_states();
        let mut m = DMatrix::from_fn(n, n, |x, y| if x == y { 0.0 } else { self.q0.rates[(x, y)] * (v[x] - v[y]).exp() });
        fill_diagonal(&mut m);
        m
    }

    /// `Σ_{y≠x} Q⋆ = −∂_t log φ_t(x) + |Q0(x, x)|`, so the integral is exact:
    /// `V_b(x) − V_a(x) + |Q0(x, x)|(b − a)`.
    fn exit_integral(&self, x: usize, a: f64, b: f64) -> f64 {
        self.value_at(b)[x] - self.value_at(a)[x] + self.q0.exit_rate(x) * (b - a)
    }
}

pub fn discrete_value(q0: &RateMatrix, terminal_cost: &[f64], horizon: f64, times: &[f64]) -> Result<(DiscreteValue, OptimalGenerator)> {
    if terminal_cost.len() != q0.n_states() || terminal_cost.iter().any(|c| !c.is_finite()) {
        return invalid("terminal cost must be finite with one entry per state");
    }
    let g = OptimalGenerator { q0: q0.clone(), terminal_cost: terminal_cost.to_vec(), horizon };
    let values = times
        .iter()
        .map(|t| if *t >= horizon { terminal_cost.to_vec() } else { g.value_at(*t) })
        .collect::<Vec<_>>();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return numerical("value function is not finite");
    }
    Ok((DiscreteValue { times: times.to_vec(), values }, g))
}

/// Forward Kolmogorov equation `dp/dt = p·G(t)` by Runge–Kutta.
pub fn propagate_law_rk4(g: &dyn TimeGenerator, law: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    let mut p = DVector::from_column_slice(law).transpose();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let (g0, g1, g2) = (g.rates_at(t), g.rates_at(t + 0.5 * h), g.rates_at(t + h));
        let k1 = &p * &g0;
        let k2 = (&p + &k1 * (0.5 * h)) * &g1;
        let k3 = (&p + &k2 * (0.5 * h)) * &g1;
        let k4 = (&p + &k3 * h) * &g2;
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    p.iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SocLossKind {
    RelativeEntropy,
    CrossEntropy,
    LogVariance,
}

#[derive(Clone, Debug)]
pub struct DiscreteLoss {
    pub estimate: Estimate,
    pub effective_sample_size: Option<f64>,
    pub low_ess: bool,
}

/// Losses of a controlled generator `q_u` against `P⋆ ∝ e^{−Φ(X_T)} P^{Q0}`, from paths
/// simulated under `q_v` (for the relative entropy `q_v` must be `q_u`).
pub fn discrete_soc_loss(
    kind: SocLossKind,
    q_u: &dyn TimeGenerator,
    q0: &RateSchedule,
    terminal_cost: &[f64],
    q_v: &dyn TimeGenerator,
    paths: &[CtmcPath],
    pi0: &[f64],
) -> Result<DiscreteLoss> {
    if paths.len() < 2 {
        return invalid("need at least two paths");
    }
    let lr_u: Vec<f64> = paths.par_iter().map(|p| ctmc_log_rnd(p, q_u, q0, pi0, pi0)).collect();
    let phi: Vec<f64> = paths.iter().map(|p| terminal_cost[p.terminal()]).collect();
    if lr_u.iter().any(|v| v.is_infinite()) {
        return invalid("control charges transitions the reference forbids");
    }
    match kind {
        SocLossKind::RelativeEntropy => {
            let per: Vec<f64> = lr_u.iter().zip(&phi).map(|(a, b)| a + b).collect();
            Ok(DiscreteLoss { estimate: Estimate::from_samples(&per), effective_sample_size: None, low_ess: false })
        }
        SocLossKind::LogVariance => {
            let per: Vec<f64> = lr_u.iter().zip(&phi).map(|(a, b)| a + b).collect();
            Ok(DiscreteLoss { estimate: crate::stats::variance_estimate(&per), effective_sample_size: None, low_ess: false })
        }
        SocLossKind::CrossEntropy => {
            let lr_v: Vec<f64> = paths.par_iter().map(|p| ctmc_log_rnd(p, q_v, q0, pi0, pi0)).collect();
            let logw: Vec<f64> = lr_v.iter().zip(&phi).map(|(a, b)| -a - b).collect();
            let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / s).collect();
            let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            let n = paths.len() as f64;
            // self-normalised mean of −log dP^u/dP⁰ under P⋆
            let per: Vec<f64> = w.iter().zip(&lr_u).map(|(wi, l)| -n * wi * l).collect();
            Ok(DiscreteLoss { estimate: Estimate::from_samples(&per), effective_sample_size: Some(ess), low_ess: ess < 10.0 })
        }
    }
}

/// Exact relative-entropy objective `KL(P^u ‖ P⁰) + E_u[Φ(X_T)]` of a piecewise-constant control.
pub fn discrete_re_exact(q_u: &RateSchedule, q0: &RateSchedule, terminal_cost: &[f64], pi0: &[f64]) -> Result<f64> {
    let kl = ctmc_kl(q_u, q0, pi0, pi0, KlMethod::Exact)?.mean;
    let p_t = propagate_forward(q_u, pi0, 0.0, q_u.horizon)?;
    Ok(kl + p_t.iter().zip(terminal_cost).map(|(p, c)| p * c).sum::<f64>())
}

/// Gradient of [`discrete_re_exact`] with respect to every off-diagonal rate of every piece,
/// by the adjoint (value) equation `−dλ/dt = Q λ + f`, `λ_T = Φ`.
pub fn discrete_re_gradient(q_u: &RateSchedule, q0: &RateMatrix, terminal_cost: &[f64], pi0: &[f64], substeps: usize) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let n = q0.n_states();
    let k_pieces = q_u.pieces.len();
    let f_of = |q: &DMatrix<f64>| -> DVector<f64> {
        DVector::from_fn(n, |x, _| {
            (0..n)
                .filter(|y| *y != x)
                .map(|y| {
                    let (a, b) = (q[(x, y)], q0.rates[(x, y)]);
                    if a > 0.0 {
                        a * (a / b).ln() - a + b
                    } else {
                        b
                    }
                })
                .sum()
        })
    };
    // forward marginals at the substep nodes of every piece
    let mut laws: Vec<Vec<DVector<f64>>> = Vec::with_capacity(k_pieces);
    let mut p = DVector::from_column_slice(pi0);
    for k in 0..k_pieces {
        let h = (q_u.piece_end(k) - q_u.starts[k]) / substeps as f64;
        let step = expm(&q_u.pieces[k].rates, h);
        let mut nodes = vec![p.clone()];
        for _ in 0..substeps {
            p = (p.transpose() * &step).transpose();
            nodes.push(p.clone());
        }
        laws.push(nodes);
    }
    let value = |lam: &DVector<f64>, law: &DVector<f64>| law.dot(lam);
    let mut lam = DVector::from_column_slice(terminal_cost);
    let mut grads = vec![DMatrix::zeros(n, n); k_pieces];
    for k in (0..k_pieces).rev() {
        let q = &q_u.pieces[k].rates;
        let f = f_of(q);
        let h = (q_u.piece_end(k) - q_u.starts[k]) / substeps as f64;
        let rhs = |l: &DVector<f64>| -> DVector<f64> { q * l + &f };
        let mut lams = vec![lam.clone(); substeps + 1];
        for s in (0..substeps).rev() {
            let l = &lams[s + 1];
            let k1 = rhs(l);
            let k2 = rhs(&(l + &k1 * (0.5 * h)));
            let k3 = rhs(&(l + &k2 * (0.5 * h)));
            let k4 = rhs(&(l + &k3 * h));
            lams[s] = l + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        for x in 0..n {
            for y in 0..n {
                if x == y {
                    continue;
                }
                let dlog = if q[(x, y)] > 0.0 { (q[(x, y)] / q0.rates[(x, y)]).ln() } else { -50.0 };
                let mut acc = 0.0;
                for s in 0..=substeps {
                    let wgt = if s == 0 || s == substeps { 0.5 } else { 1.0 };
                    acc += wgt * laws[k][s][x] * (dlog + lams[s][y] - lams[s][x]);
                }
                grads[k][(x, y)] = acc * h;
            }
        }
        lam = lams[0].clone();
    }
    Ok((value(&lam, &DVector::from_column_slice(pi0)), grads))
}

/// Piecewise-constant control minimising the exact relative entropy by diagonally scaled
/// projected gradient descent (rates kept nonnegative).
pub fn fit_discrete_control_re(q0: &RateMatrix, terminal_cost: &[f64], pi0: &[f64], horizon: f64, n_pieces: usize, iters: usize) -> Result<RateSchedule> {
    let n = q0.n_states();
    let h = horizon / n_pieces as f64;
    let starts: Vec<f64> = (0..n_pieces).map(|k| k as f64 * h).collect();
    let mut sched = RateSchedule::new(starts.clone(), vec![q0.clone(); n_pieces], horizon)?;
    let substeps = 16;
    let (mut obj, mut grad) = discrete_re_gradient(&sched, q0, terminal_cost, pi0, substeps)?;
    let mut eta = 1.0;
    for _ in 0..iters {
        let mut pieces = Vec::with_capacity(n_pieces);
        for (k, piece) in sched.pieces.iter().enumerate() {
            let laws = propagate_forward(&sched, pi0, 0.0, starts[k] + 0.5 * h)?;
            let mut m = piece.rates.clone();
            for x in 0..n {
                for y in 0..n {
                    if x != y && q0.rates[(x, y)] > 0.0 {
                        // Newton-like scaling: ∂²/∂r² ≈ h·p(x)/r
                        let scale = m[(x, y)].max(1e-9) / (h * laws[x]).max(1e-12);
                        m[(x, y)] = (m[(x, y)] - eta * scale * grad[k][(x, y)]).max(1e-12 * q0.rates[(x, y)]);
                    }
                }
            }
            fill_diagonal(&mut m);
            pieces.push(RateMatrix { rates: m });
        }
        let trial = RateSchedule { starts: starts.clone(), pieces, horizon };
        let (o, g) = discrete_re_gradient(&trial, q0, terminal_cost, pi0, substeps)?;
        if o < obj {
            sched = trial;
            obj = o;
            grad = g;
            eta = (eta * 1.5).min(1.0);
        } else {
            eta *= 0.5;
            if eta < 1e-10 {
                break;
            }
        }
    }
    Ok(sched)
}

/// Random generator with off-diagonal rates uniform on `[lo, hi)`.
pub fn random_generator(n: usize, lo: f64, hi: f64, seed: u64) -> RateMatrix {
    let mut rng = stream(seed, 0);
    let mut m = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.gen_range(lo..hi) });
    fill_diagonal(&mut m);
    RateMatrix { rates: m }
}

/// Random law with entries bounded away from zero.
pub fn random_law(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, 1);
    let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Random coupling with the given marginals: a random positive matrix scaled by
/// iterative proportional fitting.
pub fn random_coupling(pi0: &[f64], pi_t: &[f64], seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, 2);
    let n = pi0.len();
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>().powi(3) + 1e-3);
    for _ in 0..10_000 {
        for i in 0..n {
            let s = m.row(i).sum();
            m.row_mut(i).scale_mut(pi0[i] / s);
        }
        let mut err = 0.0;
        for j in 0..n {
            let s = m.column(j).sum();
            err += (s - pi_t[j]).abs();
            m.column_mut(j).scale_mut(pi_t[j] / s);
        }
        if err < 1e-14 {
            break;
        }
    }
    m
}
