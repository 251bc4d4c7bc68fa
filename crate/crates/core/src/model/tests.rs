use super::*;
use crate::data::{sample_block_mask, BlockMaskParams};
use crate::posembed::NoiseTarget;
use crate::tensor::grad_check;

fn tiny(embed_kind: EmbedKind, sigma: f64, noise_target: NoiseTarget) -> ModelConfig {
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
            sigma,
            noise_target,
            embed_kind,
        },
    }
}

fn patches(b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 16, 4], |_| rng.gen_range(0.0..1.0))
}

fn masks(b: usize, seed: u64) -> BatchMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<MaskSpec> = (0..b)
        .map(|_| sample_block_mask(4, 4, &BlockMaskParams::default(), &mut rng).unwrap())
        .collect();
    BatchMask::per_image(&specs, &mut rng).unwrap()
}

#[test]
fn prediction_shape() {
    let cfg = tiny(EmbedKind::Stop, 0.25, NoiseTarget::MaskedOnly);
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let x = patches(3, 1);
    let m = masks(3, 2);
    let noise = st
        .sample_noise(3, m.num_context(), m.num_targets(), &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let mut g = Graph::new();
    let p = st.online.bind(&mut g);
    let xv = g.constant(x);
    let y = st.forward(&mut g, &p, xv, &m, &noise).unwrap();
    assert_eq!(g.shape(y), &[3, m.num_targets(), 16]);
}

#[test]
fn full_pipeline_gradient_check() {
    let cfg = tiny(EmbedKind::Stop, 0.25, NoiseTarget::Both);
    let mut st = ModelState::<f64>::init(&cfg, 5).unwrap();
    // Nonzero m_tilde so its gradient path is exercised away from the init.
    st.online
        .get_mut(st.m_tilde)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.1);
    let x = patches(2, 6);
    let m = masks(2, 7);
    let noise = st
        .sample_noise(2, m.num_context(), m.num_targets(), &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    let y = st.make_targets(&x, &m).unwrap();
    let report = grad_check(
        |g, vars| st.loss(g, &Bound::from_vars(vars.to_vec()), &x, &m, &noise, &y),
        &st.online.tensors(),
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn zero_sigma_matches_deterministic_bits() {
    let det = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::MaskedOnly);
    let sto = tiny(EmbedKind::Stop, 0.0, NoiseTarget::MaskedOnly);
    let s0 = ModelState::<f32>::init(&det, 11).unwrap();
    let s1 = ModelState::<f32>::init(&sto, 11).unwrap();
    let x = patches(2, 1).cast::<f32>();
    let m = masks(2, 2);
    let n0 = s0
        .sample_noise(2, m.num_context(), m.num_targets(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let n1 = s1
        .sample_noise(2, m.num_context(), m.num_targets(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(n0.masked.is_none() && n1.masked.is_some());
    let y = s0.make_targets(&x, &m).unwrap();
    let run = |s: &ModelState<f32>, n: &StepNoise<f32>| {
        let mut g = Graph::new();
        let p = s.online.bind(&mut g);
        let l = s.loss(&mut g, &p, &x, &m, n, &y).unwrap();
        g.backward(l).unwrap();
        (g.scalar(l).to_bits(), s.online.collect_grads(&g, &p).unwrap())
    };
    let (l0, g0) = run(&s0, &n0);
    let (l1, g1) = run(&s1, &n1);
    assert_eq!(l0, l1);
    assert_eq!(g0, g1);
}

#[test]
fn a_gets_gradient_from_both_paths() {
    let cfg = tiny(EmbedKind::Stop, 0.25, NoiseTarget::MaskedOnly);
    let st = ModelState::<f64>::init(&cfg, 2).unwrap();
    let x = patches(2, 3);
    let m = masks(2, 4);
    let noise = st
        .sample_noise(2, m.num_context(), m.num_targets(), &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    let y = st.make_targets(&x, &m).unwrap();
    let grad_a = |noise: &StepNoise<f64>| {
        let mut g = Graph::new();
        let p = st.online.bind(&mut g);
        let l = st.loss(&mut g, &p, &x, &m, noise, &y).unwrap();
        g.backward(l).unwrap();
        g.grad(p[st.a]).unwrap().to_vec()
    };
    let zero = StepNoise {
        masked: Some(Tensor::zeros(noise.masked.as_ref().unwrap().shape())),
        ..StepNoise::none()
    };
    let full = grad_a(&noise);
    let context_only = grad_a(&zero);
    let noise_part: f64 = full.iter().zip(&context_only).map(|(a, b)| (a - b).abs()).sum();
    assert!(context_only.iter().map(|v| v.abs()).sum::<f64>() > 0.0);
    assert!(noise_part > 0.0);
}

#[test]
fn target_path_gets_no_gradient() {
    let cfg = tiny(EmbedKind::Stop, 0.25, NoiseTarget::MaskedOnly);
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let x = patches(2, 1);
    let m = masks(2, 1);
    let y = st.make_targets(&x, &m).unwrap();
    assert!(!y.requires_grad());
    let mut g = Graph::new();
    let p = st.online.bind(&mut g);
    let tp = st.target.bind_frozen(&mut g);
    let l = st.loss(&mut g, &p, &x, &m, &StepNoise::none(), &y).unwrap();
    g.backward(l).unwrap();
    let total: f64 = tp
        .vars()
        .iter()
        .filter_map(|&v| g.grad(v))
        .flatten()
        .map(|v| v.abs())
        .sum();
    assert_eq!(total, 0.0);
}

#[test]
fn latent_targets_are_normalized() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let y = st.make_targets(&patches(2, 3), &masks(2, 3)).unwrap();
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn pixel_targets_are_patch_rows() {
    let mut cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    cfg.target_mode = TargetMode::Pixel;
    cfg.target_norm = false;
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let x = patches(2, 3);
    let m = masks(2, 4);
    let y = st.make_targets(&x, &m).unwrap();
    let TokenIndex::PerBatch(rows) = &m.targets else {
        panic!()
    };
    for (b, r) in rows.iter().enumerate() {
        for (j, &t) in r.iter().enumerate() {
            let src = &x.data()[(b * 16 + t) * 4..(b * 16 + t + 1) * 4];
            let dst = &y.data()[(b * r.len() + j) * 4..(b * r.len() + j + 1) * 4];
            assert_eq!(src, dst);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f64>::init(&cfg, 4).unwrap();
    let x = patches(1, 5);
    let ctx = vec![0usize, 3, 7, 12];
    let perm = vec![12usize, 0, 7, 3];
    let run = |idx: &[usize]| {
        let mut g = Graph::new();
        let p = st.online.bind(&mut g);
        let xv = g.constant(x.clone());
        let ti = TokenIndex::Shared(idx.to_vec());
        let px = g.gather_tokens(xv, &ti).unwrap();
        let s = st.encode_context(&mut g, &p, px, &ti).unwrap();
        g.value(s).to_vec()
    };
    let a = run(&ctx);
    let b = run(&perm);
    for (pi, &orig) in perm.iter().enumerate() {
        let oi = ctx.iter().position(|&c| c == orig).unwrap();
        for k in 0..16 {
            assert!((a[oi * 16 + k] - b[pi * 16 + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn context_change_moves_predictions() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f64>::init(&cfg, 4).unwrap();
    let m = BatchMask::shared(&MaskSpec::from_targets(vec![5, 6, 9, 10], 16).unwrap());
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let p = st.online.bind(&mut g);
        let xv = g.constant(x);
        let y = st.forward(&mut g, &p, xv, &m, &StepNoise::none()).unwrap();
        g.value(y).to_vec()
    };
    let x = patches(1, 1);
    let mut x2 = x.clone();
    x2.data_mut()[0] += 0.5;
    assert_ne!(run(x), run(x2));
}

#[test]
fn empty_context_is_usage_error() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let p = st.online.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 0, 4]));
    let err = st
        .encode_context(&mut g, &p, x, &TokenIndex::Shared(vec![]))
        .unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn mim_loss_hand_value() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap());
    let y = g.constant(Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap());
    let l = mim_loss(&mut g, p, y).unwrap();
    // (1 + 4 + 0 + 4) / 4
    assert_eq!(g.scalar(l), 2.25);
}

#[test]
fn mim_loss_invariant_to_token_count() {
    let mut g = Graph::<f64>::new();
    let p1 = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap());
    let y1 = g.constant(Tensor::zeros(&[1, 1, 2]));
    let p2 = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
    let y2 = g.constant(Tensor::zeros(&[1, 2, 2]));
    let l1 = mim_loss(&mut g, p1, y1).unwrap();
    let l2 = mim_loss(&mut g, p2, y2).unwrap();
    assert_eq!(g.scalar(l1), g.scalar(l2));
}

#[test]
fn ema_extremes() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let mut st = ModelState::<f32>::init(&cfg, 0).unwrap();
    for e in st.online.entries_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let before = st.target.clone();
    st.ema_update(1.0).unwrap();
    assert_eq!(st.target, before);
    st.ema_update(0.0).unwrap();
    assert_eq!(st.target, st.online.prefix(st.num_encoder_params()));
    assert!(st.ema_update(1.5).is_err());
}

#[test]
fn ema_rejects_mismatched_trees() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f32>::init(&cfg, 0).unwrap();
    let mut wrong = st.target.clone();
    wrong.add("extra", Tensor::zeros(&[1]), false);
    let mut short = ParamStore::new();
    short.add("x", Tensor::<f32>::zeros(&[2]), false);
    assert!(matches!(ema_update(&mut wrong, &short, 0.5), Err(Error::Internal(_))));
}

#[test]
fn token_overflow_is_config_error() {
    let cfg = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let st = ModelState::<f64>::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let p = st.online.bind(&mut g);
    let c = g.constant(Tensor::zeros(&[1, 10, 8]));
    let m = g.constant(Tensor::zeros(&[1, 10, 8]));
    assert!(matches!(st.predict_targets(&mut g, &p, c, m), Err(Error::Config(_))));
}

#[test]
fn checkpoint_roundtrip_state() {
    let cfg = tiny(EmbedKind::Learned, 0.0, NoiseTarget::None);
    let st = ModelState::<f32>::init(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    st.save(&path).unwrap();
    let back = ModelState::load(&cfg, &path).unwrap();
    assert_eq!(back.online, st.online);
    assert_eq!(back.target, st.target);
    let other = tiny(EmbedKind::SinCos, 0.0, NoiseTarget::None);
    let mut bigger = other;
    bigger.encoder.dim = 32;
    assert!(matches!(ModelState::load(&bigger, &path), Err(Error::Format { .. })));
}
