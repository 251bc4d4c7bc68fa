#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stoplab::data::{sample_block_mask, BlockMaskParams, MaskSpec};
use stoplab::model::{BatchMask, Bound, ModelConfig, ModelState, TargetMode, ViTConfig};
use stoplab::posembed::{EmbedKind, NoiseTarget, StopSettings};
use stoplab::tensor::{grad_check, Graph, Tensor, TokenIndex, Var};
use stoplab::{Result, RunConfig};

pub type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries in `[0.2, 1]` with random sign, so `abs` stays differentiable.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * w)` with a fixed random `w`, so every output element carries a
/// distinct weight.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(uniform(&mut rng, &shape));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// One gradient-check case per differentiable graph operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {
            cases.push(OpCase {
                name: $name,
                inputs: vec![$($t),*],
                f: Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| {
                    let out = $body?;
                    weighted($g, out, seed)
                }),
            });
        };
    }
    case!("matmul", [uniform(r, &[3, 4]), uniform(r, &[4, 5])], |g, v| g
        .matmul(v[0], v[1]));
    case!(
        "matmul_batched",
        [uniform(r, &[2, 3, 4]), uniform(r, &[4, 2])],
        |g, v| g.matmul(v[0], v[1])
    );
    case!(
        "matmul_3d_3d",
        [uniform(r, &[2, 3, 4]), uniform(r, &[2, 4, 2])],
        |g, v| g.matmul(v[0], v[1])
    );
    case!("transpose", [uniform(r, &[3, 5])], |g, v| g.transpose(v[0]));
    case!("add_broadcast", [uniform(r, &[2, 3, 4]), uniform(r, &[4])], |g, v| g
        .add(v[0], v[1]));
    case!("sub", [uniform(r, &[3, 4]), uniform(r, &[3, 4])], |g, v| g
        .sub(v[0], v[1]));
    case!("mul", [uniform(r, &[3, 4]), uniform(r, &[3, 4])], |g, v| g
        .mul(v[0], v[1]));
    case!("scale", [uniform(r, &[6])], |g, v| Ok::<_, stoplab::Error>(
        g.scale(v[0], -1.7)
    ));
    case!("gelu", [uniform(r, &[4, 5])], |g, v| Ok::<_, stoplab::Error>(
        g.gelu(v[0])
    ));
    case!("tanh", [uniform(r, &[4, 5])], |g, v| Ok::<_, stoplab::Error>(
        g.tanh(v[0])
    ));
    case!("abs", [off_zero(r, &[4, 5])], |g, v| Ok::<_, stoplab::Error>(
        g.abs(v[0])
    ));
    case!(
        "layer_norm",
        [uniform(r, &[2, 3, 6]), uniform(r, &[6]), uniform(r, &[6])],
        |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)
    );
    case!("layer_norm_plain", [uniform(r, &[3, 5])], |g, v| g
        .layer_norm(v[0], None, None, 1e-6));
    case!(
        "attention",
        [uniform(r, &[2, 4, 6]), uniform(r, &[2, 4, 6]), uniform(r, &[2, 4, 6])],
        |g, v| g.attention(v[0], v[1], v[2], 3)
    );
    case!("attention_shared", [uniform(r, &[1, 5, 4])], |g, v| g
        .attention(v[0], v[0], v[0], 2));
    case!("softmax_rows", [uniform(r, &[3, 5])], |g, v| Ok::<_, stoplab::Error>(
        g.softmax_rows(v[0])
    ));
    case!("reshape", [uniform(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    case!("permute", [uniform(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]));
    case!("gather_shared", [uniform(r, &[2, 5, 3])], |g, v| g
        .gather_tokens(v[0], &TokenIndex::Shared(vec![4, 1, 1])));
    case!("gather_per_batch", [uniform(r, &[2, 5, 3])], |g, v| g
        .gather_tokens(v[0], &TokenIndex::PerBatch(vec![vec![0, 3], vec![2, 2]])));
    case!(
        "concat_tokens",
        [uniform(r, &[2, 3, 4]), uniform(r, &[2, 2, 4])],
        |g, v| g.concat_tokens(v[0], v[1])
    );
    case!("expand", [uniform(r, &[3, 4])], |g, v| Ok::<_, stoplab::Error>(
        g.expand(v[0], 2)
    ));
    // Scalar-valued ops are checked directly. The mse target is a constant.
    let target = uniform(r, &[3, 4]);
    cases.push(OpCase {
        name: "mse",
        inputs: vec![uniform(r, &[3, 4])],
        f: Box::new(move |g, v| {
            let t = g.constant(target.clone());
            g.mse(v[0], t)
        }),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![uniform(r, &[3, 4])],
        f: Box::new(|g, v| Ok(g.sum(v[0]))),
    });
    cases
}

/// Worst relative error over every op case for one seed, with the failing
/// op names.
pub fn check_ops(seed: u64, tol: f64) -> (f64, Vec<String>) {
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in op_cases(seed) {
        let report = grad_check(&c.f, &c.inputs, tol).expect("op case builds");
        worst = worst.max(report.max_rel_err);
        if !report.passed {
            failed.push(format!("{} ({:.2e})", c.name, report.max_rel_err));
        }
    }
    (worst, failed)
}

/// Small model exercising every StoP path: masked and context noise, tied
/// projection, learned m_tilde.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid_h: 4,
        grid_w: 4,
        patch_dim: 4,
        encoder: ViTConfig {
            depth: 2,
            heads: 2,
            dim: 16,
            mlp_ratio: 2.0,
        },
        predictor: ViTConfig {
            depth: 1,
            heads: 2,
            dim: 8,
            mlp_ratio: 2.0,
        },
        target_mode: TargetMode::LatentEma,
        target_norm: true,
        stop: StopSettings {
            sigma: 0.25,
            noise_target: NoiseTarget::Both,
            embed_kind: EmbedKind::Stop,
        },
    }
}

pub fn random_patches(b: usize, k: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, k, d], |_| rng.gen_range(0.0..1.0))
}

pub fn block_masks(b: usize, seed: u64) -> BatchMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<MaskSpec> = (0..b)
        .map(|_| sample_block_mask(4, 4, &BlockMaskParams::default(), &mut rng).unwrap())
        .collect();
    BatchMask::per_image(&specs, &mut rng).unwrap()
}

/// Gradient check of the whole masked-modeling loss in f64.
pub fn full_pipeline_check(seed: u64, tol: f64) -> f64 {
    let cfg = tiny_config();
    let mut st = ModelState::<f64>::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    for v in st.online.get_mut(st.m_tilde).data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    let x = random_patches(2, 16, 4, seed.wrapping_add(1));
    let m = block_masks(2, seed.wrapping_add(2));
    let noise = st.sample_noise(2, m.num_context(), m.num_targets(), &mut rng).unwrap();
    let y = st.make_targets(&x, &m).unwrap();
    let report = grad_check(
        |g, vars| st.loss(g, &Bound::from_vars(vars.to_vec()), &x, &m, &noise, &y),
        &st.online.tensors(),
        tol,
    )
    .unwrap();
    report.max_rel_err
}

/// Default config shrunk for fast trainer tests.
pub fn small_run_config(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "data.n_train=128".to_string(),
        "data.n_test=64".to_string(),
        format!("train.steps={steps}"),
        "train.batch=8".to_string(),
        "model.enc_depth=2".to_string(),
        "model.enc_dim=32".to_string(),
        "model.pred_depth=1".to_string(),
        "model.pred_dim=16".to_string(),
        "eval.epochs=50".to_string(),
        "eval.source=last_layer".to_string(),
    ])
    .unwrap();
    cfg
}
