//! The pretraining loop, optimizer, schedules and ablation sweeps.

mod ablation;
mod optim;

pub use ablation::{
    parse_sweep, resolve_key, run_ablation_suite, write_ablation_csv, AblationRow, Sweep, ABLATION_HEADER,
};
pub use optim::{
    adamw_step, optim_from_records, optim_records, regularized_loss, schedule, OptimState, Reg, ScheduleKind, ADAM_EPS,
    BETA1, BETA2,
};

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskKind, RunConfig};
use crate::data::{
    generate_synthetic, load_idx, patchify, sample_block_mask, sample_random_mask, ImageBatch, MaskSpec,
};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, BatchMask, ModelState};
use crate::tensor::{Graph, Tensor};

/// Independent random streams; each step reseeds them at a step-keyed offset
/// so that a resumed run draws exactly what an uninterrupted one would.
pub const DATA_STREAM: u64 = 2;
pub const MASK_STREAM: u64 = 3;
pub const NOISE_STREAM: u64 = 4;

pub const METRICS_HEADER: &str = "step,loss,lr,wd,norm_A,norm_m_tilde";
pub const STEP_RECORD: &str = "meta.step";

pub fn step_rng(seed: u64, stream: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((step as u128) << 32);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub norm_a: f64,
    pub norm_m_tilde: f64,
    /// Milliseconds spent on this step. Not written to the CSV, which stays
    /// reproducible bit for bit.
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.lr, self.wd, self.norm_a, self.norm_m_tilde
        )
    }
}

/// Parses a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("{} has no '{name}' column", path.display()),
        })
    };
    let idx = [
        col("step")?,
        col("loss")?,
        col("lr")?,
        col("wd")?,
        col("norm_A")?,
        col("norm_m_tilde")?,
    ];
    let mut rows = Vec::new();
    let mut offset = header.len() as u64 + 1;
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() as u64 + 1;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    offset,
                    message: format!("malformed metrics row '{line}'"),
                })
        };
        rows.push(MetricsRow {
            step: num(idx[0])? as usize,
            loss: num(idx[1])?,
            lr: num(idx[2])?,
            wd: num(idx[3])?,
            norm_a: num(idx[4])?,
            norm_m_tilde: num(idx[5])?,
            wall_ms: 0.0,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

/// Training and evaluation images.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: ImageBatch,
    pub test: ImageBatch,
}

/// IDX files when `paths.train_images` is set, synthetic data otherwise.
/// The synthetic test split uses seed `data.seed + 1`.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let p = &cfg.paths;
    if p.train_images.is_empty() {
        let d = &cfg.data;
        return Ok(Datasets {
            train: generate_synthetic(d.n_train, d.height, d.width, d.classes, d.seed)?,
            test: generate_synthetic(d.n_test, d.height, d.width, d.classes, d.seed.wrapping_add(1))?,
        });
    }
    let opt = |s: &String| if s.is_empty() { None } else { Some(PathBuf::from(s)) };
    let train = load_idx(Path::new(&p.train_images), opt(&p.train_labels).as_deref())?;
    let test = match opt(&p.test_images) {
        Some(ti) => load_idx(&ti, opt(&p.test_labels).as_deref())?,
        None => train.subset(&[])?,
    };
    Ok(Datasets { train, test })
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Where to write the resolved config, metrics, checkpoints and artifacts.
    pub run_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (the schedules still span
    /// `train.steps`).
    pub stop_after: Option<usize>,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: usize,
}

pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub opt: OptimState<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Completed steps.
    pub step: usize,
}

/// One mask drawn the way training draws them.
pub fn sample_mask<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<MaskSpec> {
    let (gh, gw) = (cfg.model.grid_h, cfg.model.grid_w);
    match cfg.data.mask {
        MaskKind::Block => sample_block_mask(gh, gw, &cfg.data.block, rng),
        MaskKind::Random => sample_random_mask(gh * gw, cfg.data.mask_ratio, rng),
    }
}

fn sample_masks<R: Rng + ?Sized>(cfg: &RunConfig, b: usize, rng: &mut R) -> Result<BatchMask> {
    if cfg.data.mask_per_image {
        let specs = (0..b).map(|_| sample_mask(cfg, rng)).collect::<Result<Vec<_>>>()?;
        BatchMask::per_image(&specs, rng)
    } else {
        Ok(BatchMask::shared(&sample_mask(cfg, rng)?))
    }
}

/// Checkpoint records: model, optimizer moments and the completed step count.
pub fn checkpoint_records(state: &ModelState<f32>, opt: &OptimState<f32>, step: usize) -> Vec<(String, Tensor<f32>)> {
    let mut recs = state.to_records();
    recs.extend(optim_records(&state.online, opt));
    recs.push((STEP_RECORD.to_string(), Tensor::scalar(step as f32)));
    recs
}

/// Loads a training checkpoint written by [`pretrain`].
pub fn load_training_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(ModelState<f32>, OptimState<f32>, usize)> {
    let recs = read_checkpoint(path)?;
    let state = ModelState::from_records(&cfg.model, &recs)?;
    let step = recs
        .iter()
        .find(|(n, _)| n == STEP_RECORD)
        .map(|(_, t)| t.data()[0] as usize)
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("{} has no '{STEP_RECORD}' record", path.display()),
        })?;
    let opt = optim_from_records(&state.online, &recs, step as u64)?;
    Ok((state, opt, step))
}

fn grad_norms(state: &ModelState<f32>, grads: &[Vec<f32>]) -> Vec<(String, f64)> {
    state
        .online
        .entries()
        .iter()
        .zip(grads)
        .map(|(e, g)| {
            (
                e.name.clone(),
                g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
            )
        })
        .collect()
}

fn non_finite(run_dir: Option<&Path>, step: usize, lr: f64, loss: f64, norms: &[(String, f64)]) -> Error {
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Less));
    let summary = sorted
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if let Some(dir) = run_dir {
        let mut dump = format!("step = {step}\nlr = {lr}\nloss = {loss}\n");
        for (n, v) in norms {
            let _ = writeln!(dump, "grad_norm.{n} = {v:e}");
        }
        let _ = fs::write(dir.join("nan_dump.txt"), dump);
    }
    Error::NonFinite {
        step,
        lr,
        grad_norms: summary,
    }
}

/// Runs the masked-modeling training loop.
///
/// Each step: sample a batch, sample masks, encode the context, sample
/// positional noise, assemble context and masked tokens, predict, build
/// targets with the EMA encoder, take an AdamW step over every online
/// parameter and update the EMA encoder.
pub fn pretrain(cfg: &RunConfig, train: &ImageBatch, opts: &PretrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let grid = patchify(train, cfg.data.patch)?;
    if grid.patch_dim() != cfg.model.patch_dim {
        return Err(Error::Config(format!(
            "images have {} channels; model expects patch dim {}",
            grid.channels, cfg.model.patch_dim
        )));
    }
    let t = &cfg.train;
    let warmup = t.warmup_steps();
    let (mut state, mut opt, start) = match &opts.resume {
        Some(p) => load_training_checkpoint(cfg, p)?,
        None => {
            let s = ModelState::<f32>::init(&cfg.model, t.seed)?;
            let o = OptimState::new(&s.online);
            (s, o, 0)
        }
    };
    if start > t.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, beyond train.steps = {}",
            t.steps
        )));
    }
    let end = opts.stop_after.map_or(t.steps, |s| s.min(t.steps)).max(start);

    let run_dir = opts.run_dir.as_deref();
    let mut metrics_file = match run_dir {
        Some(dir) => Some(prepare_run_dir(cfg, dir, start)?),
        None => None,
    };

    let n = train.len();
    let mut metrics = Vec::with_capacity(end - start);
    for step in start..end {
        let timer = Instant::now();
        let lr = schedule(step, t.steps, warmup, t.lr_min, t.lr, ScheduleKind::Lr)?;
        let wd = schedule(step, t.steps, 0, t.wd_start, t.wd_end, ScheduleKind::Wd)?;

        let mut data_rng = step_rng(t.seed, DATA_STREAM, step);
        let idx: Vec<usize> = if t.batch <= n {
            sample(&mut data_rng, n, t.batch).into_vec()
        } else {
            (0..t.batch).map(|_| data_rng.gen_range(0..n)).collect()
        };
        let x = grid.patches.select_rows(&idx)?;
        let mask = sample_masks(cfg, t.batch, &mut step_rng(t.seed, MASK_STREAM, step))?;
        let noise = state.sample_noise(
            t.batch,
            mask.num_context(),
            mask.num_targets(),
            &mut step_rng(t.seed, NOISE_STREAM, step),
        )?;
        let targets = state.make_targets(&x, &mask)?;

        let mut g = Graph::new();
        let p = state.online.bind(&mut g);
        let base = state.loss(&mut g, &p, &x, &mask, &noise, &targets)?;
        let loss = regularized_loss(&mut g, base, p[state.a], t.reg, t.reg_coeff)?;
        g.backward(loss)?;
        let loss_value = g.scalar(base) as f64;
        let grads = state.online.collect_grads(&g, &p)?;
        drop(g);
        if !loss_value.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(non_finite(run_dir, step, lr, loss_value, &grad_norms(&state, &grads)));
        }
        adamw_step(&mut state.online, &grads, &mut opt, lr, wd)?;
        let momentum = t.ema_start + (t.ema_end - t.ema_start) * step as f64 / t.steps as f64;
        state.ema_update(momentum.clamp(0.0, 1.0))?;

        let row = MetricsRow {
            step,
            loss: loss_value,
            lr,
            wd,
            norm_a: state.a().norm(),
            norm_m_tilde: state.m_tilde().norm(),
            wall_ms: timer.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(run_dir.unwrap().join("metrics.csv"), e))?;
        }
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  lr {:.2e}  |A| {:.4}  |m~| {:.4}  {:.1} ms",
                step + 1,
                row.loss,
                lr,
                row.norm_a,
                row.norm_m_tilde,
                row.wall_ms
            );
        }
        metrics.push(row);
        let done = step + 1;
        if let Some(dir) = run_dir {
            if t.ckpt_every > 0 && done % t.ckpt_every == 0 && done < t.steps {
                write_checkpoint(
                    &dir.join(format!("ckpt_step{done}.bin")),
                    &checkpoint_records(&state, &opt, done),
                )?;
            }
        }
    }
    if let Some(dir) = run_dir {
        let name = if end == t.steps {
            "final.bin".to_string()
        } else {
            format!("ckpt_step{end}.bin")
        };
        write_checkpoint(&dir.join(name), &checkpoint_records(&state, &opt, end))?;
    }
    Ok(TrainOutcome {
        state,
        opt,
        metrics,
        step: end,
    })
}

/// Creates the run directory, echoes the config and opens the metrics CSV,
/// keeping rows of steps before `start` when resuming.
fn prepare_run_dir(cfg: &RunConfig, dir: &Path, start: usize) -> Result<fs::File> {
    fs::create_dir_all(dir.join("artifacts")).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.resolved");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let path = dir.join("metrics.csv");
    let mut text = format!("{METRICS_HEADER}\n");
    if start > 0 && path.exists() {
        for row in read_metrics(&path)? {
            if row.step < start {
                let _ = writeln!(text, "{}", row.csv_line());
            }
        }
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}

/// Mean loss over the first and last `window` rows.
pub fn loss_endpoints(metrics: &[MetricsRow], window: usize) -> (f64, f64) {
    let w = window.min(metrics.len()).max(1);
    let mean = |rows: &[MetricsRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    (
        mean(&metrics[..w.min(metrics.len())]),
        mean(&metrics[metrics.len().saturating_sub(w)..]),
    )
}
