//! Context encoder, predictor, EMA target encoder and the masked-modeling loss.

mod checkpoint;
mod params;
mod vit;

pub use checkpoint::{decode_records, encode_records, read_checkpoint, write_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use vit::{Attention, Block, LayerNorm, Linear, Transformer, TransformerOut, ViTConfig, INIT_STD, LN_EPS};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MaskSpec;
use crate::error::{Error, Result};
use crate::posembed::{self, EmbedKind, StopSettings};
use crate::tensor::{Graph, Scalar, Tensor, TokenIndex, Var};

/// Where regression targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// EMA target encoder over the full image.
    LatentEma,
    /// Raw patch pixels.
    Pixel,
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent_ema" => Ok(TargetMode::LatentEma),
            "pixel" => Ok(TargetMode::Pixel),
            _ => Err(Error::Config(format!(
                "unknown target mode '{s}' (expected latent_ema or pixel)"
            ))),
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::LatentEma => "latent_ema",
            TargetMode::Pixel => "pixel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub encoder: ViTConfig,
    pub predictor: ViTConfig,
    pub target_mode: TargetMode,
    /// Layer-normalize targets (no affine) before the loss.
    pub target_norm: bool,
    pub stop: StopSettings,
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn target_dim(&self) -> usize {
        match self.target_mode {
            TargetMode::LatentEma => self.encoder.dim,
            TargetMode::Pixel => self.patch_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.predictor.validate("predictor")?;
        if self.num_patches() < 2 || self.patch_dim == 0 {
            return Err(Error::Config(format!(
                "patch grid {}x{} with patch dim {} is too small",
                self.grid_h, self.grid_w, self.patch_dim
            )));
        }
        for (role, d) in [("encoder", self.encoder.dim), ("predictor", self.predictor.dim)] {
            if d % 4 != 0 {
                return Err(Error::Config(format!(
                    "{role} width must be a multiple of 4 for sincos positions, got {d}"
                )));
            }
        }
        if !(self.stop.sigma >= 0.0) || !self.stop.sigma.is_finite() {
            return Err(Error::Config(format!(
                "stop.sigma must be a finite value >= 0, got {}",
                self.stop.sigma
            )));
        }
        Ok(())
    }
}

/// Context and target token indices for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMask {
    pub context: TokenIndex,
    pub targets: TokenIndex,
}

impl BatchMask {
    /// One mask for every image.
    pub fn shared(spec: &MaskSpec) -> Self {
        BatchMask {
            context: TokenIndex::Shared(spec.context().to_vec()),
            targets: TokenIndex::Shared(spec.targets().to_vec()),
        }
    }

    /// One mask per image, each subsampled to the smallest context and
    /// target counts in the batch so that token counts agree.
    pub fn per_image<R: Rng + ?Sized>(specs: &[MaskSpec], rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Usage("per-image mask needs at least one mask".into()));
        }
        let nc = specs.iter().map(|m| m.context().len()).min().unwrap_or(0);
        let nt = specs.iter().map(|m| m.targets().len()).min().unwrap_or(0);
        let picked: Vec<MaskSpec> = specs.iter().map(|m| m.subsample(nc, nt, rng)).collect();
        Ok(BatchMask {
            context: TokenIndex::PerBatch(picked.iter().map(|m| m.context().to_vec()).collect()),
            targets: TokenIndex::PerBatch(picked.iter().map(|m| m.targets().to_vec()).collect()),
        })
    }

    pub fn num_context(&self) -> usize {
        self.context.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }
}

/// Noise drawn for one forward pass. Each field is present only when the
/// embedding variant uses it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepNoise<T> {
    /// `[b, n_y, d_e]`, projected by `A`.
    pub masked: Option<Tensor<T>>,
    /// `[b, n_x, d_e]`, projected by `A`.
    pub context: Option<Tensor<T>>,
    /// `[b, n_y, d_p]`, added directly.
    pub fixed: Option<Tensor<T>>,
}

impl<T> StepNoise<T> {
    pub fn none() -> Self {
        StepNoise {
            masked: None,
            context: None,
            fixed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub body: Transformer,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub body: Transformer,
    pub head: Linear,
}

/// Online parameters (encoder first, then predictor, `A`, `m_tilde` and an
/// optional learned position table) plus the EMA copy of the encoder.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub a: ParamId,
    pub m_tilde: ParamId,
    pub pos: Option<ParamId>,
    enc_pos: Tensor<T>,
    pred_pos: Tensor<T>,
}

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 1;

impl<T: Scalar> ModelState<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let (gh, gw) = (config.grid_h, config.grid_w);
        let (d_e, d_p) = (config.encoder.dim, config.predictor.dim);

        let mut online = ParamStore::new();
        let encoder = Encoder {
            // Fan-in scaling keeps patch content on the same scale as the
            // unit-magnitude sincos positions; with 0.02 the targets are
            // almost purely positional and trivially predictable.
            patch_embed: Linear::with_std(
                &mut online,
                "enc.patch_embed",
                config.patch_dim,
                d_e,
                1.0 / (config.patch_dim as f64).sqrt(),
                &mut rng,
            ),
            body: Transformer::new(&mut online, "enc", &config.encoder, &mut rng),
        };
        let num_encoder = online.len();
        let predictor = Predictor {
            body: Transformer::new(&mut online, "pred", &config.predictor, &mut rng),
            head: Linear::new(&mut online, "pred.head", d_p, config.target_dim(), &mut rng),
        };
        let bound = 1.0 / (d_e as f64).sqrt();
        let a_init = Tensor::from_fn(&[d_p, d_e], |_| T::of(rng.gen_range(-bound..bound)));
        let a = online.add("stop.A", a_init, true);
        let m_tilde = online.add("stop.m_tilde", Tensor::zeros(&[d_p]), false);
        let pos = match config.stop.embed_kind {
            EmbedKind::Learned => {
                let t = posembed::learned_table::<T, _>(gh, gw, d_p, &mut rng)?;
                Some(online.add("pos.psi", t.psi, false))
            }
            _ => None,
        };
        let target = online.prefix(num_encoder);
        Ok(ModelState {
            config: *config,
            online,
            target,
            encoder,
            predictor,
            a,
            m_tilde,
            pos,
            enc_pos: posembed::sincos_2d(gh, gw, d_e)?.psi,
            pred_pos: posembed::sincos_2d(gh, gw, d_p)?.psi,
        })
    }

    pub fn num_encoder_params(&self) -> usize {
        self.target.len()
    }

    /// Fixed sine-cosine table added at the encoder input, `[K, d_e]`.
    pub fn encoder_positions(&self) -> &Tensor<T> {
        &self.enc_pos
    }

    /// The predictor-side table `psi`, `[K, d_p]`.
    pub fn predictor_positions(&self) -> &Tensor<T> {
        match self.pos {
            Some(id) => self.online.get(id),
            None => &self.pred_pos,
        }
    }

    pub fn a(&self) -> &Tensor<T> {
        self.online.get(self.a)
    }

    pub fn m_tilde(&self) -> &Tensor<T> {
        self.online.get(self.m_tilde)
    }

    /// Runs the encoder on `patches` `[b, t, patch_dim]` with encoder
    /// positions `pos` (`[t, d_e]` or `[b, t, d_e]`).
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, patches: Var, pos: Var) -> Result<TransformerOut> {
        let x = self.encoder.patch_embed.forward(g, p, patches)?;
        let x = g.add(x, pos)?;
        self.encoder.body.forward(g, p, x)
    }

    /// `s_x = f(x)` over the context tokens; `patches_x` is `[b, n_x, patch_dim]`.
    pub fn encode_context(&self, g: &mut Graph<T>, p: &Bound, patches_x: Var, context: &TokenIndex) -> Result<Var> {
        if context.is_empty() {
            return Err(Error::Usage("context must contain at least one token".into()));
        }
        let table = g.constant(self.enc_pos.clone());
        let pos = g.gather_tokens(table, context)?;
        Ok(self.encode(g, p, patches_x, pos)?.out)
    }

    /// Runs the predictor on `[c; m]` and maps the masked slots to target width.
    pub fn predict_targets(&self, g: &mut Graph<T>, p: &Bound, c: Var, m: Var) -> Result<Var> {
        let (nx, ny) = (g.shape(c)[1], g.shape(m)[1]);
        if nx + ny > self.config.num_patches() {
            return Err(Error::Config(format!(
                "{nx} context + {ny} masked tokens exceed the {} grid positions",
                self.config.num_patches()
            )));
        }
        let x = g.concat_tokens(c, m)?;
        let h = self.predictor.body.forward(g, p, x)?.out;
        let h = g.gather_tokens(h, &TokenIndex::Shared((nx..nx + ny).collect()))?;
        self.predictor.head.forward(g, p, h)
    }

    /// Draws the noise a forward pass with `n_x` context and `n_y` target
    /// tokens needs under the configured embedding variant.
    pub fn sample_noise<R: Rng + ?Sized>(&self, b: usize, nx: usize, ny: usize, rng: &mut R) -> Result<StepNoise<T>> {
        let s = &self.config.stop;
        let (d_e, d_p) = (self.config.encoder.dim, self.config.predictor.dim);
        Ok(StepNoise {
            masked: if s.masked_noise() {
                Some(posembed::gaussian(&[b, ny, d_e], s.sigma, rng)?)
            } else {
                None
            },
            context: if s.context_noise() {
                Some(posembed::gaussian(&[b, nx, d_e], s.sigma, rng)?)
            } else {
                None
            },
            fixed: if s.fixed_noise() {
                Some(posembed::gaussian(&[b, ny, d_p], s.sigma, rng)?)
            } else {
                None
            },
        })
    }

    /// Full online forward: encode context, assemble `c` and `m`, predict.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: Var,
        mask: &BatchMask,
        noise: &StepNoise<T>,
    ) -> Result<Var> {
        let b = g.shape(patches)[0];
        let px = g.gather_tokens(patches, &mask.context)?;
        let s_x = self.encode_context(g, p, px, &mask.context)?;
        let psi = match self.pos {
            Some(id) => p[id],
            None => g.constant(self.pred_pos.clone()),
        };
        let psi_x = g.gather_tokens(psi, &mask.context)?;
        let psi_y = g.gather_tokens(psi, &mask.targets)?;
        let (a, mt) = (p[self.a], p[self.m_tilde]);
        let n_ctx = noise.context.as_ref().map(|t| g.constant(t.clone()));
        let c = posembed::assemble_context(g, s_x, psi_x, a, n_ctx)?;
        let m = match &noise.fixed {
            Some(f) if self.config.stop.fixed_noise() => {
                let f = g.constant(f.clone());
                posembed::assemble_masked_fixed(g, psi_y, mt, f, b)?
            }
            _ => {
                let n = noise.masked.as_ref().map(|t| g.constant(t.clone()));
                posembed::assemble_masked(g, psi_y, a, mt, n, b)?
            }
        };
        self.predict_targets(g, p, c, m)
    }

    /// Regression targets at the masked positions, `[b, n_y, target_dim]`.
    /// Computed on a separate graph, so no gradient can reach the target path.
    pub fn make_targets(&self, patches: &Tensor<T>, mask: &BatchMask) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let full = match self.config.target_mode {
            TargetMode::LatentEma => {
                let p = self.target.bind_frozen(&mut g);
                let pos = g.constant(self.enc_pos.clone());
                self.encode(&mut g, &p, x, pos)?.out
            }
            TargetMode::Pixel => x,
        };
        let y = g.gather_tokens(full, &mask.targets)?;
        let y = if self.config.target_norm {
            g.layer_norm(y, None, None, LN_EPS)?
        } else {
            y
        };
        Ok(g.tensor(y))
    }

    /// Masked-modeling loss on a graph with the online parameters bound as `p`.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: &Tensor<T>,
        mask: &BatchMask,
        noise: &StepNoise<T>,
        targets: &Tensor<T>,
    ) -> Result<Var> {
        let x = g.constant(patches.clone());
        let pred = self.forward(g, p, x, mask, noise)?;
        let y = g.constant(targets.clone());
        mim_loss(g, pred, y)
    }

    /// Moves the target encoder toward the online encoder.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        ema_update(&mut self.target, &self.online, momentum)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let cast_store = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for e in s.entries() {
                out.add(e.name.clone(), e.value.cast(), e.decay);
            }
            out
        };
        ModelState {
            config: self.config,
            online: cast_store(&self.online),
            target: cast_store(&self.target),
            encoder: self.encoder.clone(),
            predictor: self.predictor.clone(),
            a: self.a,
            m_tilde: self.m_tilde,
            pos: self.pos,
            enc_pos: self.enc_pos.cast(),
            pred_pos: self.pred_pos.cast(),
        }
    }
}

/// Mean over batch, tokens and channels of the squared error.
pub fn mim_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

/// `target <- momentum * target + (1 - momentum) * online` for every target
/// parameter; `online` may carry extra trailing parameters.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum must be in [0, 1], got {momentum}")));
    }
    if online.len() < target.len() {
        return Err(Error::Internal(
            "online parameters do not cover the target encoder".into(),
        ));
    }
    target.check_mirrors(&online.prefix(target.len()))?;
    let m = T::of(momentum);
    let r = T::of(1.0 - momentum);
    for (t, o) in target.entries_mut().iter_mut().zip(online.entries()) {
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = m * *tv + r * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
