//! Positional embeddings: fixed 2D sine-cosine tables, learned tables, and
//! stochastic positions `psi_hat = A n + psi` with `n ~ N(0, sigma I)`.
//!
//! Under weight tying the same matrix `A` (shape `[d_p, d_e]`) projects the
//! context features and the positional noise:
//!
//! ```text
//! c_i = A s_i + psi_i
//! m_j = A n_j + psi_j + m_tilde
//! ```
//!
//! Everything here works in row form, so `A v` is computed as `v A^T`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosKind {
    SinCos,
    Learned,
}

/// One embedding row per grid position, `[K, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosTable<T> {
    pub psi: Tensor<T>,
    pub kind: PosKind,
}

/// Which tokens receive positional noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseTarget {
    MaskedOnly,
    ContextOnly,
    Both,
    None,
}

impl NoiseTarget {
    pub fn masked(self) -> bool {
        matches!(self, NoiseTarget::MaskedOnly | NoiseTarget::Both)
    }

    pub fn context(self) -> bool {
        matches!(self, NoiseTarget::ContextOnly | NoiseTarget::Both)
    }
}

impl FromStr for NoiseTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" | "masked" => Ok(NoiseTarget::MaskedOnly),
            "context_only" | "context" => Ok(NoiseTarget::ContextOnly),
            "both" => Ok(NoiseTarget::Both),
            "none" => Ok(NoiseTarget::None),
            _ => Err(Error::Config(format!(
                "unknown noise target '{s}' (expected masked_only, context_only, both or none)"
            ))),
        }
    }
}

impl fmt::Display for NoiseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseTarget::MaskedOnly => "masked_only",
            NoiseTarget::ContextOnly => "context_only",
            NoiseTarget::Both => "both",
            NoiseTarget::None => "none",
        })
    }
}

/// Positional-embedding variant used at the predictor boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKind {
    /// Deterministic sine-cosine positions.
    SinCos,
    /// Deterministic learned table.
    Learned,
    /// Stochastic positions with learned covariance `sigma A A^T`.
    Stop,
    /// Stochastic positions with fixed covariance `sigma I`.
    FixedCov,
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sincos" => Ok(EmbedKind::SinCos),
            "learned" => Ok(EmbedKind::Learned),
            "stop" => Ok(EmbedKind::Stop),
            "fixed_cov" => Ok(EmbedKind::FixedCov),
            _ => Err(Error::Config(format!(
                "unknown embed kind '{s}' (expected sincos, learned, stop or fixed_cov)"
            ))),
        }
    }
}

impl fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedKind::SinCos => "sincos",
            EmbedKind::Learned => "learned",
            EmbedKind::Stop => "stop",
            EmbedKind::FixedCov => "fixed_cov",
        })
    }
}

/// Noise settings of the stochastic embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopSettings {
    pub sigma: f64,
    pub noise_target: NoiseTarget,
    pub embed_kind: EmbedKind,
}

impl StopSettings {
    /// Whether masked tokens get `A n` noise.
    pub fn masked_noise(&self) -> bool {
        self.embed_kind == EmbedKind::Stop && self.noise_target.masked()
    }

    pub fn context_noise(&self) -> bool {
        self.embed_kind == EmbedKind::Stop && self.noise_target.context()
    }

    pub fn fixed_noise(&self) -> bool {
        self.embed_kind == EmbedKind::FixedCov
    }
}

/// 2D sine-cosine table: the first half of the channels encodes the row,
/// the second half the column, each as `[sin(p w_i), cos(p w_i)]` with
/// `w_i = 10000^(-i / (d/4))`.
pub fn sincos_2d<T: Scalar>(grid_h: usize, grid_w: usize, d: usize) -> Result<PosTable<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "sincos embedding dim must be a positive multiple of 4, got {d}"
        )));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| T::of((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::of((pos * w).cos())));
            }
        }
    }
    Ok(PosTable {
        psi: Tensor::new(&[grid_h * grid_w, d], data)?,
        kind: PosKind::SinCos,
    })
}

/// Sine-cosine table plus `N(0, 0.02^2)` jitter, marked trainable.
pub fn learned_table<T: Scalar, R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    d: usize,
    rng: &mut R,
) -> Result<PosTable<T>> {
    let mut t = sincos_2d::<T>(grid_h, grid_w, d)?;
    for v in t.psi.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += T::of(0.02 * z);
    }
    t.psi.set_requires_grad(true);
    t.kind = PosKind::Learned;
    Ok(t)
}

/// I.i.d. Gaussian entries with variance `sigma` (std `sqrt(sigma)`).
///
/// `sigma == 0` returns zeros without touching the generator.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise scale sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let std = sigma.sqrt();
    Ok(Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(std * z)
    }))
}

/// Noise vectors `n_j ~ N(0, sigma I)` for `num_tokens` tokens of width `d_e`.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    num_tokens: usize,
    d_e: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    gaussian(&[num_tokens, d_e], sigma, rng)
}

fn project<T: Scalar>(g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
    let at = g.transpose(a)?;
    g.matmul(x, at)
}

/// `A n_j + psi_j` row by row. Differentiable in `A` and `psi`; the noise is
/// an input, so gradients never pass through the sampler.
pub fn stop_embed<T: Scalar>(g: &mut Graph<T>, psi_rows: Var, a: Var, noise: Var) -> Result<Var> {
    let an = project(g, noise, a)?;
    g.add(an, psi_rows)
}

/// Context tokens `c_i = A s_i + psi_i`, plus `A n_i` when context noise is on.
///
/// `s_x` is `[b, n_x, d_e]`; `psi_x` is `[n_x, d_p]` or `[b, n_x, d_p]`.
pub fn assemble_context<T: Scalar>(
    g: &mut Graph<T>,
    s_x: Var,
    psi_x: Var,
    a: Var,
    noise_ctx: Option<Var>,
) -> Result<Var> {
    let mut proj = project(g, s_x, a)?;
    if let Some(n) = noise_ctx {
        if g.shape(n) != g.shape(s_x) {
            return Err(Error::dim("assemble_context noise", g.shape(n), g.shape(s_x)));
        }
        let an = project(g, n, a)?;
        proj = g.add(proj, an)?;
    }
    g.add(proj, psi_x)
}

/// Masked tokens `m_j = A n_j + psi_j + m_tilde` for a batch of `batch`.
///
/// With `noise == None` this is the deterministic `m_j = psi_j + m_tilde`,
/// built with the same sequence of operations so that zero noise reproduces
/// it bit for bit.
pub fn assemble_masked<T: Scalar>(
    g: &mut Graph<T>,
    psi_y: Var,
    a: Var,
    m_tilde: Var,
    noise: Option<Var>,
    batch: usize,
) -> Result<Var> {
    let base = match g.shape(psi_y).len() {
        2 => g.expand(psi_y, batch),
        3 if g.shape(psi_y)[0] == batch => psi_y,
        _ => {
            return Err(Error::Dimension(format!(
                "masked positions have shape {:?}",
                g.shape(psi_y)
            )))
        }
    };
    let base = match noise {
        Some(n) => {
            let an = project(g, n, a)?;
            if g.shape(an) != g.shape(base) {
                return Err(Error::dim("assemble_masked noise", g.shape(an), g.shape(base)));
            }
            g.add(an, base)?
        }
        None => base,
    };
    g.add(base, m_tilde)
}

/// Masked tokens under the fixed-covariance baseline: `psi_j + g_j + m_tilde`
/// with `g_j ~ N(0, sigma I)` drawn directly in embedding space.
pub fn assemble_masked_fixed<T: Scalar>(
    g: &mut Graph<T>,
    psi_y: Var,
    m_tilde: Var,
    fixed_noise: Var,
    batch: usize,
) -> Result<Var> {
    let base = match g.shape(psi_y).len() {
        2 => g.expand(psi_y, batch),
        _ => psi_y,
    };
    let noisy = g.add(base, fixed_noise)?;
    g.add(noisy, m_tilde)
}

/// `psi_j + g_j`, `g_j ~ N(0, sigma I_{d_p})`, outside any graph.
pub fn fixed_cov_embed<T: Scalar, R: Rng + ?Sized>(psi_rows: &Tensor<T>, sigma: f64, rng: &mut R) -> Result<Tensor<T>> {
    let noise = gaussian::<T, R>(psi_rows.shape(), sigma, rng)?;
    let data = psi_rows.data().iter().zip(noise.data()).map(|(&p, &n)| p + n).collect();
    Tensor::new(psi_rows.shape(), data)
}
