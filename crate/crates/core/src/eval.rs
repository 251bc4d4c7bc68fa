//! Frozen-feature extraction and linear probing.

use std::fmt;
use std::str::FromStr;

use crate::data::{patchify, ImageBatch, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{ModelState, LN_EPS};
use crate::tensor::{Graph, Scalar, Tensor};

/// Images encoded per graph during extraction.
const EXTRACT_CHUNK: usize = 256;
const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Average-pooled output of the final layer norm, `d_e` features.
    LastLayer,
    /// Average-pooled outputs of the last four blocks, each passed through
    /// the final layer norm, concatenated to `4 d_e` features.
    Last4,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer" | "last" => Ok(FeatureSource::LastLayer),
            "last4" | "last4_concat" => Ok(FeatureSource::Last4),
            _ => Err(Error::Config(format!(
                "unknown feature source '{s}' (expected last_layer or last4)"
            ))),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::LastLayer => "last_layer",
            FeatureSource::Last4 => "last4",
        })
    }
}

fn mean_pool<T: Scalar>(x: &[T], n: usize, t: usize, d: usize, out: &mut Vec<T>) {
    let inv = T::of(1.0 / t as f64);
    for i in 0..n {
        let mut acc = vec![T::zero(); d];
        for row in x[i * t * d..(i + 1) * t * d].chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a * inv));
    }
}

/// Target-encoder features over all patches, with fixed positions and no
/// noise. Rows are images; width is `d_e` or `4 d_e`.
pub fn extract_grid_features<T: Scalar>(
    state: &ModelState<T>,
    grid: &PatchGrid,
    source: FeatureSource,
) -> Result<Tensor<T>> {
    let cfg = &state.config;
    if grid.num_patches() != cfg.num_patches() || grid.patch_dim() != cfg.patch_dim {
        return Err(Error::Dimension(format!(
            "images give {} patches of dim {}, model expects {} of dim {}",
            grid.num_patches(),
            grid.patch_dim(),
            cfg.num_patches(),
            cfg.patch_dim
        )));
    }
    let layers = match source {
        FeatureSource::LastLayer => 1,
        FeatureSource::Last4 => 4,
    };
    let depth = state.encoder.body.blocks.len();
    if layers > depth {
        return Err(Error::Config(format!(
            "{source} features need encoder depth >= {layers}, got {depth}"
        )));
    }
    let n = grid.patches.shape()[0];
    let (k, pd, d) = (cfg.num_patches(), cfg.patch_dim, cfg.encoder.dim);
    let mut out = Vec::with_capacity(n * d * layers);
    let all = grid.patches.data();
    for start in (0..n).step_by(EXTRACT_CHUNK) {
        let b = (n - start).min(EXTRACT_CHUNK);
        let chunk: Vec<T> = all[start * k * pd..(start + b) * k * pd]
            .iter()
            .map(|&v| T::of(v as f64))
            .collect();
        let mut g = Graph::new();
        let p = state.target.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(&[b, k, pd], chunk)?);
        let pos = g.constant(state.encoder_positions().clone());
        let enc = state.encode(&mut g, &p, x, pos)?;
        let norm = &state.encoder.body.norm;
        let mut per_layer = Vec::with_capacity(layers);
        for &h in &enc.hidden[depth - layers..] {
            let normed = g.layer_norm(h, Some(p[norm.gain]), Some(p[norm.bias]), LN_EPS)?;
            let mut pooled = Vec::with_capacity(b * d);
            mean_pool(g.value(normed), b, k, d, &mut pooled);
            per_layer.push(pooled);
        }
        for i in 0..b {
            for pl in &per_layer {
                out.extend_from_slice(&pl[i * d..(i + 1) * d]);
            }
        }
    }
    Tensor::new(&[n, d * layers], out)
}

/// Patchifies `batch` to match the model and extracts features.
pub fn extract_features<T: Scalar>(
    state: &ModelState<T>,
    batch: &ImageBatch,
    source: FeatureSource,
) -> Result<Tensor<T>> {
    let c = batch.channels();
    let patch = ((state.config.patch_dim / c) as f64).sqrt().round() as usize;
    if patch * patch * c != state.config.patch_dim {
        return Err(Error::Dimension(format!(
            "patch dim {} does not fit {c}-channel square patches",
            state.config.patch_dim
        )));
    }
    extract_grid_features(state, &patchify(batch, patch)?, source)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub variant: String,
    pub train_acc: f64,
    pub test_acc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub source: FeatureSource,
}

fn standardize(x: &mut [f64], d: usize, mean: &[f64], std: &[f64]) {
    for row in x.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

fn accuracy(x: &[f64], y: &[u32], w: &[f64], b: &[f64], d: usize, c: usize) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mut logits = vec![0.0; y.len() * c];
    f64::gemm(y.len(), d, c, x, d as isize, 1, w, c as isize, 1, 0.0, &mut logits);
    let correct = logits
        .chunks(c)
        .zip(y)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &v)| if v + b[i] > row[bi] + b[bi] { i } else { bi });
            best == label as usize
        })
        .count();
    correct as f64 / y.len() as f64
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn top_eigenvalue(x: &[f64], n: usize, d: usize) -> f64 {
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut gram = vec![0.0; d * d];
    f64::gemm(d, n, d, x, 1, d as isize, x, d as isize, 1, 0.0, &mut gram);
    gram.iter_mut().for_each(|g| *g /= n as f64);
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut u = vec![0.0; d];
        f64::gemm(d, d, 1, &gram, d as isize, 1, &v, 1, 1, 0.0, &mut u);
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = u.into_iter().map(|a| a / norm).collect();
        if (norm - lambda).abs() <= 1e-9 * norm {
            return norm;
        }
        lambda = norm;
    }
    lambda
}

/// Multinomial logistic regression by full-batch gradient descent on
/// softmax cross-entropy, on features standardized with training statistics.
/// The step is `min(lr, 1 / lambda_max)` of the standardized feature Gram.
pub fn linear_probe<T: Scalar>(
    train_x: &Tensor<T>,
    train_y: &[u32],
    test_x: &Tensor<T>,
    test_y: &[u32],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let (sx, st) = (train_x.shape(), test_x.shape());
    if sx.len() != 2 || st.len() != 2 || sx[1] != st[1] {
        return Err(Error::dim("linear_probe features", sx, st));
    }
    if sx[0] != train_y.len() || st[0] != test_y.len() {
        return Err(Error::Dimension("feature rows and label counts differ".into()));
    }
    let (n, d) = (sx[0], sx[1]);
    let c = train_y.iter().chain(test_y).map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut present = vec![false; c];
    train_y.iter().for_each(|&l| present[l as usize] = true);
    if c < 2 {
        return Err(Error::Config("linear probe needs at least 2 classes".into()));
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::Config(format!("class {missing} has no training examples")));
    }

    let mut xtr: Vec<f64> = train_x.data().iter().map(|v| v.f64()).collect();
    let mut xte: Vec<f64> = test_x.data().iter().map(|v| v.f64()).collect();
    let mut mean = vec![0.0; d];
    for row in xtr.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut std = vec![0.0; d];
    for row in xtr.chunks(d) {
        std.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    std.iter_mut()
        .for_each(|s| *s = if s.sqrt() > STD_FLOOR { s.sqrt() } else { 1.0 });
    standardize(&mut xtr, d, &mean, &std);
    standardize(&mut xte, d, &mean, &std);

    // Softmax cross-entropy has curvature at most lambda_max(X^T X / n) in
    // the weights, so capping the step there keeps gradient descent stable
    // on strongly collinear features.
    let lr = opts.lr.min(1.0 / top_eigenvalue(&xtr, n, d).max(1.0));
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut logits = vec![0.0; n * c];
    let mut gw = vec![0.0; d * c];
    for _ in 0..opts.epochs {
        f64::gemm(n, d, c, &xtr, d as isize, 1, &w, c as isize, 1, 0.0, &mut logits);
        let mut gb = vec![0.0; c];
        for (row, &label) in logits.chunks_mut(c).zip(train_y) {
            row.iter_mut().zip(&b).for_each(|(l, bi)| *l += bi);
            crate::tensor::softmax_in_place(row);
            row[label as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
            gb.iter_mut().zip(row.iter()).for_each(|(g, v)| *g += v);
        }
        // gw = x^T (p - y) / n
        f64::gemm(d, n, c, &xtr, 1, d as isize, &logits, c as isize, 1, 0.0, &mut gw);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + opts.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    Ok(ProbeReport {
        variant: String::new(),
        train_acc: accuracy(&xtr, train_y, &w, &b, d, c),
        test_acc: accuracy(&xte, test_y, &w, &b, d, c),
        n_train: n,
        n_test: test_y.len(),
        source: FeatureSource::LastLayer,
    })
}

/// Extracts features for both splits and probes them.
pub fn probe_state<T: Scalar>(
    state: &ModelState<T>,
    train: &ImageBatch,
    test: &ImageBatch,
    source: FeatureSource,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let labels = |b: &ImageBatch| {
        b.labels
            .clone()
            .ok_or_else(|| Error::Config("probing needs labeled images".into()))
    };
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let ftr = extract_features(state, train, source)?;
    let fte = extract_features(state, test, source)?;
    let mut r = linear_probe(&ftr, &ytr, &fte, &yte, opts)?;
    r.source = source;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, seed: u64, shuffle_labels: bool) -> (Tensor<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let x = Tensor::from_fn(&[n, 3], |i| {
            let label = y[i / 3] as f64;
            let centre = if i % 3 == 0 { 4.0 * label - 2.0 } else { 0.0 };
            centre + rng.gen_range(-0.5..0.5)
        });
        if shuffle_labels {
            y.iter_mut().for_each(|l| *l = rng.gen_range(0..2));
        }
        (x, y)
    }

    const OPTS: ProbeOptions = ProbeOptions {
        epochs: 200,
        lr: 0.5,
        l2: 0.0,
    };

    #[test]
    fn separable_blobs() {
        let (xtr, ytr) = blobs(200, 0, false);
        let (xte, yte) = blobs(100, 1, false);
        let r = linear_probe(&xtr, &ytr, &xte, &yte, &OPTS).unwrap();
        assert_eq!(r.test_acc, 1.0);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let (xtr, ytr) = blobs(2000, 0, true);
        let (xte, yte) = blobs(2000, 1, true);
        let r = linear_probe(&xtr, &ytr, &xte, &yte, &OPTS).unwrap();
        assert!((r.test_acc - 0.5).abs() < 0.05, "{}", r.test_acc);
    }

    #[test]
    fn deterministic() {
        let (xtr, ytr) = blobs(100, 0, true);
        let (xte, yte) = blobs(100, 1, true);
        let a = linear_probe(&xtr, &ytr, &xte, &yte, &OPTS).unwrap();
        let b = linear_probe(&xtr, &ytr, &xte, &yte, &OPTS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_rejected() {
        let x = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(
            linear_probe(&x, &[0, 0, 1, 1], &x, &[0, 2, 1, 1], &OPTS),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            linear_probe(&x, &[0; 4], &x, &[0; 4], &OPTS),
            Err(Error::Config(_))
        ));
    }
}
