//! Executable checks of the collapse and optimal-predictor results on
//! small synthetic problems.

mod collapse;
mod predictor;
mod toy;


use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use collapse::{
    collapse_demo, grad_at_zero_tied, grad_at_zero_untied, CollapseConfig, CollapseRun, Estimate, TiedReport,
    UntiedReport, Z95,
};
pub use predictor::{
    compare_predictors, mc_oracle_points, optimal_predictor_closed_form, optimal_predictor_mc_oracle, NoisyChannel,
    OracleEstimate, PredictorComparison, MIN_ORACLE_SAMPLES, MIN_RETAINED,
};
pub use toy::{Mlp, MlpEval, NoiseDraw, ToyRegression};

pub const VERIFY_HEADER: &str = "check,instance,estimate,reference,ci,pass";

/// Below this many noise draws the normal approximation behind the
/// intervals is loose and the report says so.
const FEW_NOISE_DRAWS: usize = 1000;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub num_noise: usize,
    pub num_toys: usize,
    pub num_channels: usize,
    pub points_per_channel: usize,
    pub oracle_samples: usize,
    pub oracle_width: f64,
    pub comparison_samples: usize,
    pub collapse: CollapseConfig,
    pub collapse_seeds: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            num_noise: 10_000,
            num_toys: 20,
            num_channels: 5,
            points_per_channel: 5,
            oracle_samples: 1_000_000,
            oracle_width: 0.05,
            comparison_samples: 100_000,
            collapse: CollapseConfig::default(),
            collapse_seeds: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyRow {
    pub check: String,
    pub instance: String,
    pub estimate: f64,
    pub reference: f64,
    pub ci: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{:<5} {:<22} {}", c.status, c.name, c.detail);
        }
        let _ = writeln!(s, "{}", if self.passed() { "ALL PASS" } else { "FAILED" });
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{VERIFY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.check, r.instance, r.estimate, r.reference, r.ci, r.pass
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    fn push(&mut self, name: &str, status: Status, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            status,
            detail,
        });
    }

    fn row(&mut self, check: &str, instance: String, estimate: f64, reference: f64, ci: f64, pass: bool) {
        self.rows.push(VerifyRow {
            check: check.into(),
            instance,
            estimate,
            reference,
            ci,
            pass,
        });
    }
}

fn status(ok: bool, loose: bool) -> Status {
    match (ok, loose) {
        (false, _) => Status::Fail,
        (true, true) => Status::Warn,
        (true, false) => Status::Pass,
    }
}

/// Random toys for the zero-matrix gradient checks, one stream per toy.
pub fn random_toys(seed: u64, count: usize) -> Vec<ToyRegression> {
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + k as u64);
            let sigma = rng.gen_range(0.1..1.0);
            ToyRegression::random(sigma, &mut rng)
        })
        .collect()
}

pub fn random_channels(seed: u64, count: usize) -> Result<Vec<NoisyChannel>> {
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2000 + k as u64);
            let size = rng.gen_range(3..=5);
            NoisyChannel::random(size, &mut rng)
        })
        .collect()
}

/// Evenly spaced query points across the channel's support.
pub fn query_points(ch: &NoisyChannel, count: usize) -> Vec<f64> {
    let lo = ch.support.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ch.support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect()
}

fn check_untied(opts: &VerifyOptions, toys: &[ToyRegression], report: &mut VerifyReport) {
    let mut ok = 0;
    for (k, toy) in toys.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(3000 + k as u64);
        let r = grad_at_zero_untied(toy, opts.num_noise, &mut rng);
        ok += r.within_band as usize;
        let band = 4.0 * r.estimate.stderr_norm();
        report.row(
            "untied_zero",
            format!("toy{k}"),
            r.estimate.norm(),
            0.0,
            band,
            r.within_band,
        );
    }
    let loose = opts.num_noise < FEW_NOISE_DRAWS;
    report.push(
        "untied_zero",
        status(ok == toys.len(), loose),
        format!(
            "{ok}/{} toys with ||E[dJ/dA]|| inside the 4-sigma band ({} draws)",
            toys.len(),
            opts.num_noise
        ),
    );

    let zero_sigma = ToyRegression {
        sigma: 0.0,
        ..toys[0].clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = grad_at_zero_untied(&zero_sigma, 1, &mut rng);
    let exact = r.estimate.mean.iter().all(|v| *v == 0.0);
    report.row("sigma_zero", "toy0".into(), r.estimate.norm(), 0.0, 0.0, exact);
    report.push(
        "sigma_zero",
        status(exact, false),
        format!("untied gradient with sigma=0 is {:e}", r.estimate.norm()),
    );
}

fn check_tied(opts: &VerifyOptions, toys: &[ToyRegression], report: &mut VerifyReport) {
    let mut ok = 0;
    let mut nonzero = 0;
    let mut worst: f64 = 0.0;
    for (k, toy) in toys.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(4000 + k as u64);
        let r = grad_at_zero_tied(toy, opts.num_noise, &mut rng);
        ok += r.matches as usize;
        worst = worst.max(r.worst_ratio);
        let ci = r.tied.ci();
        for (e, ((&mc, &det), &ci)) in r.tied.mean.iter().zip(&r.det).zip(&ci).enumerate() {
            let pass = (mc - det).abs() <= 3.0 * ci + 1e-12 * (1.0 + det.abs());
            report.row("tied_vs_det", format!("toy{k}[{e}]"), mc, det, 3.0 * ci, pass);
        }
        if frob_of(&r.det) > 1e-9 && r.tied.norm() > 1e-9 {
            nonzero += 1;
        }
    }
    let loose = opts.num_noise < FEW_NOISE_DRAWS;
    report.push(
        "tied_vs_det",
        status(ok == toys.len(), loose),
        format!(
            "{ok}/{} toys agree elementwise within 3 CI (worst |diff|/CI {worst:.2})",
            toys.len()
        ),
    );
    report.push(
        "tied_nonzero",
        status(nonzero == toys.len(), false),
        format!(
            "{nonzero}/{} toys with useful context have nonzero gradients at the zero matrix",
            toys.len()
        ),
    );

    let matched = toys[0].clone().with_matched_targets();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(4999);
    let r = grad_at_zero_tied(&matched, opts.num_noise, &mut rng);
    let ok = frob_of(&r.det) < 1e-10 && r.tied.norm() < 1e-10;
    report.row(
        "matched_targets",
        "toy0".into(),
        r.tied.norm(),
        frob_of(&r.det),
        0.0,
        ok,
    );
    report.push(
        "matched_targets",
        status(ok, false),
        format!(
            "zero residuals give tied {:.1e} and deterministic {:.1e}",
            r.tied.norm(),
            frob_of(&r.det)
        ),
    );
}

fn frob_of(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_predictor(opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    let channels = random_channels(opts.seed, opts.num_channels)?;
    let mut agree = 0;
    let mut total: usize = 0;
    let mut narrow = 0;
    let mut best = 0;
    for (c, ch) in channels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(5000 + c as u64);
        let qs = query_points(ch, opts.points_per_channel);
        let oracle = mc_oracle_points(ch, &qs, opts.oracle_width, opts.oracle_samples, &mut rng)?;
        for o in &oracle {
            let f = optimal_predictor_closed_form(ch, o.r)?;
            let pass = o.retained >= 2 && (f - o.mean).abs() <= 3.0 * o.stderr;
            agree += pass as usize;
            narrow += o.needs_wider_window() as usize;
            total += 1;
            report.row(
                "predictor_oracle",
                format!("ch{c}@{:.3}", o.r),
                o.mean,
                f,
                3.0 * o.stderr,
                pass,
            );
        }
        let cmp = compare_predictors(ch, opts.comparison_samples, &mut rng)?;
        let ok = cmp.closed_form_best();
        best += ok as usize;
        report.row(
            "predictor_optimal",
            format!("ch{c}:identity"),
            cmp.mse_closed,
            cmp.mse_identity,
            2.0 * cmp.se_vs_identity,
            ok,
        );
        report.row(
            "predictor_optimal",
            format!("ch{c}:constant"),
            cmp.mse_closed,
            cmp.mse_constant,
            2.0 * cmp.se_vs_constant,
            ok,
        );
    }
    // Allow two misses in 25 at three standard errors.
    let need = total - (total * 2).div_ceil(25);
    let mut detail = format!("{agree}/{total} query points within 3 stderr of the oracle (need {need})");
    if narrow > 0 {
        let _ = write!(
            detail,
            "; {narrow} windows kept fewer than {MIN_RETAINED} samples, widen the window"
        );
    }
    report.push("predictor_oracle", status(agree >= need, narrow > 0), detail);
    report.push(
        "predictor_optimal",
        status(best == channels.len(), false),
        format!(
            "closed form no worse than identity and constant on {best}/{} channels",
            channels.len()
        ),
    );
    Ok(())
}

fn check_collapse(opts: &VerifyOptions, report: &mut VerifyReport) {
    let mut ok = 0;
    for s in 0..opts.collapse_seeds {
        let seed = opts.seed.wrapping_add(s as u64);
        let untied = collapse_demo(&opts.collapse, false, seed);
        let tied = collapse_demo(&opts.collapse, true, seed);
        let pass = untied.ratio() < 0.1 && tied.ratio() >= 0.5;
        ok += pass as usize;
        report.row(
            "collapse",
            format!("seed{seed}:untied"),
            untied.ratio(),
            0.1,
            0.0,
            untied.ratio() < 0.1,
        );
        report.row(
            "collapse",
            format!("seed{seed}:tied"),
            tied.ratio(),
            0.5,
            0.0,
            tied.ratio() >= 0.5,
        );
    }
    let need = (2 * opts.collapse_seeds).div_ceil(3);
    report.push(
        "collapse",
        status(ok >= need, false),
        format!(
            "{ok}/{} seeds: untied |A| < 0.1x init and tied |A| >= 0.5x init (need {need})",
            opts.collapse_seeds
        ),
    );
}

/// Runs every check. Only configuration problems surface as errors;
/// statistical outcomes are in the report.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.num_noise < 2 || opts.num_toys == 0 {
        return Err(Error::Config("verify needs num_noise >= 2 and at least one toy".into()));
    }
    let mut report = VerifyReport::default();
    let toys = random_toys(opts.seed, opts.num_toys);
    check_untied(opts, &toys, &mut report);
    check_tied(opts, &toys, &mut report);
    check_predictor(opts, &mut report)?;
    check_collapse(opts, &mut report);
    Ok(report)
}
