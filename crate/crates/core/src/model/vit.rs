use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
/// Std of the normal init used for linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
}

impl ViTConfig {
    pub fn validate(&self, role: &str) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config(format!("{role} depth must be >= 1")));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{role} width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!(
                "{role} mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(std * z)
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, fan_in, fan_out, INIT_STD, rng)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), normal(&[fan_in, fan_out], std, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, Some(p[self.gain]), Some(p[self.bias]), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() != 3 {
            return Err(Error::Dimension(format!(
                "attention expects [b, t, d], got {:?}",
                g.shape(x)
            )));
        }
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let out = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, p, out)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ViTConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden();
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention {
                q: Linear::new(store, &format!("{name}.attn.q"), d, d, rng),
                k: Linear::new(store, &format!("{name}.attn.k"), d, d, rng),
                v: Linear::new(store, &format!("{name}.attn.v"), d, d, rng),
                o: Linear::new(store, &format!("{name}.attn.o"), d, d, rng),
                heads: cfg.heads,
            },
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, h, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), h, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Block stack followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Hidden state after every block (before the final norm) and the normed output.
pub struct TransformerOut {
    pub hidden: Vec<Var>,
    pub out: Var,
}

impl Transformer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ViTConfig,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), cfg, rng))
            .collect();
        Transformer {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<TransformerOut> {
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
            hidden.push(x);
        }
        let out = self.norm.forward(g, p, x)?;
        Ok(TransformerOut { hidden, out })
    }
}
