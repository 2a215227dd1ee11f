//! Self-checks with PASS/FAIL reports.

use std::fmt;
use std::str::FromStr;

use super::metrics::{metric_avg, metric_last, metric_transfer, AccuracyMatrix};
use crate::attention::{adapter_grads, init_adapter, init_adapter_ablation, residual_forward, Adapter, FrozenAttention};
use crate::backbone::{encode, BackboneConfig, DualEncoder, EncoderStack, TokenSeq};
use crate::error::{Error, Result};
use crate::numkernel::{finite_diff_grad, Mat, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn new(suite: &'static str) -> Self {
        VerifyReport { suite, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}/{}: {}", self.suite, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    ZeroInit,
    Gradcheck,
    DegenerateInit,
    Metrics,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-init" => Ok(Suite::ZeroInit),
            "gradcheck" => Ok(Suite::Gradcheck),
            "degenerate-init" => Ok(Suite::DegenerateInit),
            "metrics" => Ok(Suite::Metrics),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite `{s}`"))),
        }
    }
}

/// Runs a suite with its default settings.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<VerifyReport>> {
    let mut rng = Rng::seed(seed);
    let dims = LayerDims { seq_len: 3, adapter_len: 2, dim: 4 };
    let one = |s: Suite, rng: &mut Rng| -> Result<VerifyReport> {
        match s {
            Suite::ZeroInit => verify_zero_init_identity(&DualEncoder::new(&BackboneConfig::default())?, rng),
            Suite::Gradcheck => verify_gradcheck(dims, 50, rng),
            Suite::DegenerateInit => verify_degenerate_init(LayerDims { seq_len: 2, adapter_len: 2, dim: 3 }, 10, rng),
            Suite::Metrics => verify_metrics(rng),
            Suite::All => unreachable!("expanded by the caller"),
        }
    };
    match suite {
        Suite::All => [Suite::ZeroInit, Suite::Gradcheck, Suite::DegenerateInit, Suite::Metrics]
            .into_iter()
            .map(|s| one(s, &mut rng.fork()))
            .collect(),
        s => Ok(vec![one(s, &mut rng)?]),
    }
}

/// Shape of a single-layer test problem: `L` input tokens, `l` adapter
/// rows, width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub seq_len: usize,
    pub adapter_len: usize,
    pub dim: usize,
}

struct Problem {
    layer: FrozenAttention,
    x: Mat,
    target: Mat,
}

impl Problem {
    fn random(dims: LayerDims, rng: &mut Rng) -> Self {
        let d = dims.dim;
        let layer = FrozenAttention::random(d, 1.0, 1.0, 0.1, rng);
        let x = Mat::from_fn(dims.seq_len, d, |_, _| rng.normal());
        let target = Mat::from_fn(dims.seq_len, d, |_, _| rng.normal());
        Problem { layer, x, target }
    }

    /// `½‖O − T‖²` and its gradient on `O`.
    fn loss(&self, a: &Adapter, w: f64) -> Result<(f64, Mat)> {
        let diff = residual_forward(&self.x, &self.layer, a, w)?.sub(&self.target)?;
        let loss = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>();
        Ok((loss, diff))
    }

    fn grads(&self, a: &Adapter, w: f64) -> Result<(f64, Mat, Mat)> {
        let (loss, d_out) = self.loss(a, w)?;
        let (dk, dv) = adapter_grads(&self.x, &self.layer, a, w, &d_out)?;
        Ok((loss, dk, dv))
    }
}

fn max_row_pair_diff(m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            for (a, b) in m.row(i).iter().zip(m.row(j)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// SGD on one residual layer from `K_r = V_r = 0`, and a control run from
/// random keys.
pub fn verify_degenerate_init(dims: LayerDims, steps: usize, rng: &mut Rng) -> Result<VerifyReport> {
    if steps < 2 {
        return Err(Error::contract("degenerate-init check needs at least two steps"));
    }
    let mut report = VerifyReport::new("degenerate-init");
    let problem = Problem::random(dims, rng);
    let lr = 0.1;

    let mut a = init_adapter(dims.adapter_len, dims.dim, 0.0, rng);
    let (mut worst_dk, mut worst_rows, mut first_bad) = (0.0f64, 0.0f64, None);
    for step in 0..steps {
        let (_, dk, dv) = problem.grads(&a, 1.0)?;
        a.sgd_step(lr, &dk, &dv)?;
        worst_dk = worst_dk.max(dk.max_abs());
        worst_rows = worst_rows.max(max_row_pair_diff(a.values()));
        if first_bad.is_none() && (worst_dk > 1e-15 || worst_rows > 1e-12) {
            first_bad = Some(step);
        }
    }
    let detail = match first_bad {
        Some(s) => format!("broke at step {s}: max|dK| = {worst_dk:.3e}, V row spread = {worst_rows:.3e}"),
        None => format!("{steps} steps, max|dK| = {worst_dk:.3e}, V row spread = {worst_rows:.3e}"),
    };
    report.check("zero-keys-stay-zero", first_bad.is_none(), detail);

    let moved = Mat::from_fn(dims.adapter_len, dims.dim, |_, _| rng.uniform(-1.0, 1.0));
    let shifted = Adapter::new(moved, a.values().clone())?;
    let delta = (problem.loss(&shifted, 1.0)?.0 - problem.loss(&a, 1.0)?.0).abs();
    report.check("loss-ignores-keys", delta <= 1e-12, format!("loss change under random keys = {delta:.3e}"));

    let mut c = init_adapter(dims.adapter_len, dims.dim, 1.0, rng);
    let (initial, dk, dv) = problem.grads(&c, 1.0)?;
    c.sgd_step(lr, &dk, &dv)?;
    let spread = max_row_pair_diff(c.values());
    report.check("control-rows-diverge", spread > 1e-12, format!("V row spread after one step = {spread:.3e}"));
    for _ in 1..steps {
        let (_, dk, dv) = problem.grads(&c, 1.0)?;
        c.sgd_step(lr, &dk, &dv)?;
    }
    let last = problem.loss(&c, 1.0)?.0;
    report.check("control-loss-decreases", last < initial, format!("loss {initial:.6} -> {last:.6}"));
    Ok(report)
}

fn random_seq(vocab: usize, rng: &mut Rng) -> Result<TokenSeq> {
    let len = 1 + rng.below(12);
    TokenSeq::new((0..len).map(|_| rng.below(vocab)).collect())
}

fn identity_gap(stack: &EncoderStack, seq: &TokenSeq, adapters: &[Adapter], w: f64) -> Result<f64> {
    let frozen = encode(seq, stack, None, 0.0)?;
    let adapted = encode(seq, stack, Some(adapters), w)?;
    Ok(frozen.iter().zip(&adapted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Fresh adapters at any depth and weight leave encoded features unchanged.
pub fn verify_zero_init_identity(backbone: &DualEncoder, rng: &mut Rng) -> Result<VerifyReport> {
    let mut report = VerifyReport::new("zero-init");
    let (d, vocab, l) = (backbone.dim(), backbone.vocab(), 4);
    let cases: Vec<(&str, Vec<&EncoderStack>, usize)> = vec![
        ("image-depth-1", vec![&backbone.image], 1),
        ("image-depth-2", vec![&backbone.image], 2.min(backbone.depth())),
        ("both-encoders", vec![&backbone.image, &backbone.text], backbone.depth()),
    ];
    for (name, stacks, depth) in cases {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let seq = random_seq(vocab, rng)?;
            let w = rng.uniform(0.0, 1.0);
            for stack in &stacks {
                let adapters: Vec<Adapter> = (0..depth).map(|_| init_adapter(l, d, 1.0, rng)).collect();
                worst = worst.max(identity_gap(stack, &seq, &adapters, w)?);
            }
        }
        report.check(name, worst <= 1e-12, format!("100 inputs, depth {depth}, max feature gap = {worst:.3e}"));
    }
    Ok(report)
}

/// Analytic adapter gradients against central differences.
pub fn verify_gradcheck(dims: LayerDims, trials: usize, rng: &mut Rng) -> Result<VerifyReport> {
    let mut report = VerifyReport::new("gradcheck");
    let (l, d) = (dims.adapter_len, dims.dim);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let problem = Problem::random(dims, rng);
        let a = init_adapter_ablation(l, d, 1.0, rng);
        let w = rng.uniform(0.1, 1.0);
        let (_, dk, dv) = problem.grads(&a, w)?;
        let theta: Vec<f64> = a.keys().data().iter().chain(a.values().data()).copied().collect();
        let fd = finite_diff_grad(
            |t| {
                let keys = Mat::from_vec(l, d, t[..l * d].to_vec()).expect("finite keys");
                let values = Mat::from_vec(l, d, t[l * d..].to_vec()).expect("finite values");
                let a = Adapter::new(keys, values).expect("matching shapes");
                problem.loss(&a, w).expect("valid problem").0
            },
            &theta,
            1e-5,
        );
        let analytic: Vec<f64> = dk.data().iter().chain(dv.data()).copied().collect();
        let err = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
        let scale = fd.iter().map(|v| v.abs()).fold(1e-8, f64::max);
        worst = worst.max(err / scale);
    }
    report.check(
        "random-instances",
        worst <= 1e-4,
        format!("{trials} trials (L={}, l={l}, d={d}), max relative error = {worst:.3e}", dims.seq_len),
    );

    let problem = Problem::random(dims, rng);
    let fresh = init_adapter(l, d, 1.0, rng);
    let (_, dk, _) = problem.grads(&fresh, 1.0)?;
    report.check("zero-values-zero-key-grad", dk.max_abs() == 0.0, format!("max|dK| = {:.3e}", dk.max_abs()));

    let noisy = init_adapter_ablation(l, d, 1.0, rng);
    let (_, dk, dv) = problem.grads(&noisy, 0.0)?;
    let m = dk.max_abs().max(dv.max_abs());
    report.check("zero-weight-zero-grads", m == 0.0, format!("max|dK|, |dV| = {m:.3e}"));
    Ok(report)
}

/// Metric formulas on a hand-computed matrix and on random ones.
pub fn verify_metrics(rng: &mut Rng) -> Result<VerifyReport> {
    let mut report = VerifyReport::new("metrics");
    let p = AccuracyMatrix::from_rows(&[vec![0.80, 0.50], vec![0.75, 0.90]])?;
    let t = metric_transfer(&p)?;
    let a = metric_avg(&p)?;
    let l = metric_last(&p)?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-15;
    report.check(
        "hand-transfer",
        t.values() == [0.50] && t.aggregate == 0.50,
        format!("per-task {:?}, aggregate {}", t.values(), t.aggregate),
    );
    report.check(
        "hand-avg",
        close(a.values()[0], 0.775) && close(a.values()[1], 0.70) && close(a.aggregate, 0.7375),
        format!("per-task {:?}, aggregate {}", a.values(), a.aggregate),
    );
    report.check(
        "hand-last",
        l.values() == [0.75, 0.90] && close(l.aggregate, 0.825),
        format!("per-task {:?}, aggregate {}", l.values(), l.aggregate),
    );

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(7);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let p = AccuracyMatrix::from_rows(&rows)?;
        worst = worst.max(brute_force_gap(&p, &rows)?);
    }
    report.check("random-brute-force", worst <= 1e-12, format!("100 matrices with N in 2..=8, max gap = {worst:.3e}"));
    Ok(report)
}

fn brute_force_gap(p: &AccuracyMatrix, rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    let mut transfer = Vec::new();
    for j in 1..n {
        let mut s = 0.0;
        for row in &rows[..j] {
            s += row[j];
        }
        transfer.push(s / j as f64);
    }
    let mut avg = Vec::new();
    for j in 0..n {
        let mut s = 0.0;
        for row in rows {
            s += row[j];
        }
        avg.push(s / n as f64);
    }
    let last = rows[n - 1].clone();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut gap: f64 = 0.0;
    for (got, want) in [(metric_transfer(p)?, transfer), (metric_avg(p)?, avg), (metric_last(p)?, last)] {
        for (g, w) in got.values().iter().zip(&want) {
            gap = gap.max((g - w).abs());
        }
        gap = gap.max((got.aggregate - mean(&want)).abs());
    }
    Ok(gap)
}
