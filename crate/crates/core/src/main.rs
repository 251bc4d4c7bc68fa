use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stoplab::analysis::{self, SimilarityMode, DEFAULT_TEMPERATURE, PGM_SCALE};
use stoplab::config::keys_help;
use stoplab::data::{patchify, write_idx_images, write_idx_labels, MaskSpec};
use stoplab::eval::{probe_state, FeatureSource, ProbeOptions};
use stoplab::model::ModelState;
use stoplab::theory::{run_verify, VerifyOptions};
use stoplab::trainer::{self, load_datasets, parse_sweep, pretrain, run_ablation_suite, PretrainOptions};
use stoplab::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "stoplab", version, about = "Masked image modeling with stochastic positional embeddings", after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            (None, Some(p)) => {
                return Err(Error::Usage(format!(
                    "no --config given and {} does not exist",
                    p.display()
                )));
            }
            (None, None) => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/test splits as IDX files.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    #[command(after_help = keys_help())]
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override `paths.run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Run the collapse and optimal-predictor checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        num_noise: usize,
        /// Directory for verify.txt and verify.csv.
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
    },
    /// Train and probe one variant per sweep value and seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `key=v1,v2,...`, e.g. `sigma=0,0.1,0.25,0.5`.
        #[arg(long)]
        sweep: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Linear probe on frozen target-encoder features.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// last_layer or last4; defaults to `eval.source`.
        #[arg(long)]
        source: Option<FeatureSource>,
        /// CSV to append the report to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics over checkpoints and finished runs.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Cosine similarity of one position's embedding to every other.
    Similarity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: usize,
        #[arg(long, default_value = "stop")]
        mode: SimilarityMode,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/analysis")]
        out: PathBuf,
    },
    /// Final norms of A and m_tilde against sigma, one row per run.
    Norms {
        /// Run directories or metrics.csv files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/analysis/norm_trend.csv")]
        out: PathBuf,
    },
    /// Where a masked patch's prediction points among the image's tokens.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Masked patch to inspect.
        #[arg(long)]
        patch: usize,
        /// Explicit target patches; otherwise a training-style mask is drawn.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value = "runs/analysis")]
        out: PathBuf,
    },
}

fn sibling_config(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join("config.resolved")
}

fn load_model(cfg: &ConfigArgs, ckpt: &Path) -> Result<(RunConfig, ModelState<f32>)> {
    let rc = cfg.resolve(Some(&sibling_config(ckpt)))?;
    if !ckpt.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let state = ModelState::load(&rc.model, ckpt)?;
    Ok((rc, state))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    analysis::write_bytes(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MakeData { cfg, out } => {
            let rc = cfg.resolve(None)?;
            let data = load_datasets(&rc)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (name, split) in [("train", &data.train), ("test", &data.test)] {
                let img = out.join(format!("{name}-images.idx"));
                let lbl = out.join(format!("{name}-labels.idx"));
                write_idx_images(&img, split)?;
                write_idx_labels(&lbl, split.labels.as_deref().unwrap_or(&[]))?;
                println!("wrote {} and {} ({} images)", img.display(), lbl.display(), split.len());
            }
        }
        Command::Pretrain {
            cfg,
            resume,
            run_dir,
            log_every,
        } => {
            let mut rc = cfg.resolve(None)?;
            if let Some(d) = run_dir {
                rc.paths.run_dir = d.display().to_string();
            }
            let data = load_datasets(&rc)?;
            let out = pretrain(
                &rc,
                &data.train,
                &PretrainOptions {
                    run_dir: Some(rc.run_dir()),
                    resume,
                    stop_after: None,
                    log_every,
                },
            )?;
            let (first, last) = trainer::loss_endpoints(&out.metrics, 10);
            println!(
                "finished {} steps in {}: loss {first:.4} -> {last:.4}, |A| {:.4}, |m_tilde| {:.4}",
                out.step,
                rc.run_dir().display(),
                out.state.a().norm(),
                out.state.m_tilde().norm()
            );
        }
        Command::Verify { seed, num_noise, out } => {
            let report = run_verify(&VerifyOptions {
                seed,
                num_noise,
                ..Default::default()
            })?;
            print!("{}", report.to_text());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("verify.txt"), report.to_text().as_bytes())?;
            write(&out.join("verify.csv"), report.to_csv().as_bytes())?;
            if !report.passed() {
                eprintln!("failing checks: {}", report.failing().join(", "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { cfg, sweep, seeds, out } => {
            let rc = cfg.resolve(None)?;
            let sweep = parse_sweep(&sweep)?;
            let data = load_datasets(&rc)?;
            let rows = run_ablation_suite(&rc, &sweep, &seeds, &data, Some(&out))?;
            for r in &rows {
                println!("{}", r.csv_line());
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::Probe {
            cfg,
            checkpoint,
            source,
            out,
        } => {
            let (rc, state) = load_model(&cfg, &checkpoint)?;
            let source = source.unwrap_or(rc.eval.source);
            let data = load_datasets(&rc)?;
            let opts = ProbeOptions {
                epochs: rc.eval.epochs,
                lr: rc.eval.lr,
                l2: rc.eval.l2,
            };
            let mut report = probe_state(&state, &data.train, &data.test, source, &opts)?;
            report.variant = checkpoint.display().to_string();
            println!(
                "{}: {} features, train acc {:.4}, test acc {:.4} ({} / {} images)",
                report.variant, report.source, report.train_acc, report.test_acc, report.n_train, report.n_test
            );
            if let Some(path) = out {
                append_probe(&path, &report)?;
            }
        }
        Command::Analyze { what } => analyze(what)?,
    }
    Ok(ExitCode::SUCCESS)
}

const PROBE_HEADER: &str = "variant,source,train_acc,test_acc,n_train,n_test";

fn append_probe(path: &Path, r: &stoplab::eval::ProbeReport) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(PROBE_HEADER);
        line.push('\n');
    }
    line.push_str(&format!(
        "{},{},{},{},{},{}\n",
        r.variant.replace(',', ";"),
        r.source,
        r.train_acc,
        r.test_acc,
        r.n_train,
        r.n_test
    ));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    println!("appended to {}", path.display());
    Ok(())
}

fn analyze(what: Analyze) -> Result<()> {
    match what {
        Analyze::Similarity {
            cfg,
            checkpoint,
            query,
            mode,
            samples,
            seed,
            out,
        } => {
            let (_, state) = load_model(&cfg, &checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = analysis::pos_similarity(&state, query, mode, samples, &mut rng)?;
            let stem = format!("similarity_q{query}_{mode}");
            write(&out.join(format!("{stem}.csv")), map.to_csv().as_bytes())?;
            write(&out.join(format!("{stem}.pgm")), &map.to_pgm(PGM_SCALE))?;
            println!("neighbor spread {:.4}", map.neighbor_spread());
        }
        Analyze::Norms { runs, out } => {
            let rows = analysis::norm_trend(&runs)?;
            write(&out, analysis::norm_trend_csv(&rows).as_bytes())?;
            for (s, a, m) in analysis::median_by_sigma(&rows) {
                println!("sigma {s}: median |A| {a:.4}, median |m_tilde| {m:.4}");
            }
        }
        Analyze::Heatmap {
            cfg,
            checkpoint,
            image,
            patch,
            targets,
            seed,
            temperature,
            out,
        } => {
            let (rc, state) = load_model(&cfg, &checkpoint)?;
            let data = load_datasets(&rc)?;
            let split = if data.test.is_empty() { &data.train } else { &data.test };
            if image >= split.len() {
                return Err(Error::Usage(format!(
                    "image {image} is outside the {}-image split",
                    split.len()
                )));
            }
            let grid = patchify(&split.subset(&[image])?, rc.data.patch)?;
            let k = rc.model.num_patches();
            let mask = if targets.is_empty() {
                trainer::sample_mask(&rc, &mut ChaCha8Rng::seed_from_u64(seed))?
            } else {
                MaskSpec::from_targets(targets, k)?
            };
            let heat = analysis::prediction_heatmap(&state, &grid.patches, &mask, patch, temperature)?;
            let stem = format!("heatmap_img{image}_patch{patch}");
            write(&out.join(format!("{stem}.csv")), heat.to_csv().as_bytes())?;
            write(&out.join(format!("{stem}.pgm")), &heat.to_pgm(PGM_SCALE))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
