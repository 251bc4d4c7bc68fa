use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Attempts at drawing target blocks that leave some context before falling
/// back to a random mask.
pub const BLOCK_RETRIES: usize = 16;
const FALLBACK_RATIO: f64 = 0.75;

/// Context (`B_x`) and target (`B_y`) token indices over a patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    context_idx: Vec<usize>,
    target_idx: Vec<usize>,
}

impl MaskSpec {
    /// Sorts and validates: disjoint, targets and context nonempty, all `< k`.
    pub fn new(mut context_idx: Vec<usize>, mut target_idx: Vec<usize>, k: usize) -> Result<Self> {
        context_idx.sort_unstable();
        context_idx.dedup();
        target_idx.sort_unstable();
        target_idx.dedup();
        if target_idx.is_empty() || context_idx.is_empty() {
            return Err(Error::Config(
                "mask needs at least one context and one target token".into(),
            ));
        }
        if context_idx.iter().chain(&target_idx).any(|&i| i >= k) {
            return Err(Error::Config(format!("mask index out of range for {k} patches")));
        }
        if context_idx.iter().any(|i| target_idx.binary_search(i).is_ok()) {
            return Err(Error::Config("context and target sets overlap".into()));
        }
        Ok(MaskSpec {
            context_idx,
            target_idx,
        })
    }

    /// Context is every index not in `target_idx`.
    pub fn from_targets(target_idx: Vec<usize>, k: usize) -> Result<Self> {
        let mut is_target = vec![false; k];
        for &t in &target_idx {
            if t >= k {
                return Err(Error::Config(format!("target {t} out of range for {k} patches")));
            }
            is_target[t] = true;
        }
        let context = (0..k).filter(|&i| !is_target[i]).collect();
        MaskSpec::new(context, target_idx, k)
    }

    pub fn context(&self) -> &[usize] {
        &self.context_idx
    }

    pub fn targets(&self) -> &[usize] {
        &self.target_idx
    }

    /// Keeps a uniformly chosen subset of `nc` context and `nt` target
    /// indices (all of them when the set is already small enough).
    pub fn subsample<R: Rng + ?Sized>(&self, nc: usize, nt: usize, rng: &mut R) -> MaskSpec {
        fn pick<R: Rng + ?Sized>(v: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
            if n >= v.len() {
                return v.to_vec();
            }
            let mut out: Vec<usize> = sample(rng, v.len(), n).into_iter().map(|i| v[i]).collect();
            out.sort_unstable();
            out
        }
        MaskSpec {
            context_idx: pick(&self.context_idx, nc, rng),
            target_idx: pick(&self.target_idx, nt, rng),
        }
    }

    /// Keeps the first `nc` context and `nt` target indices.
    pub fn truncated(&self, nc: usize, nt: usize) -> MaskSpec {
        MaskSpec {
            context_idx: self.context_idx[..nc.min(self.context_idx.len())].to_vec(),
            target_idx: self.target_idx[..nt.min(self.target_idx.len())].to_vec(),
        }
    }
}

/// MAE-style mask: `ceil(ratio * K)` uniformly chosen targets, the rest context.
pub fn sample_random_mask<R: Rng + ?Sized>(k: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if k < 2 {
        return Err(Error::Config(format!(
            "random masking needs at least 2 patches, got {k}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let nt = (ratio * k as f64).ceil() as usize;
    if nt >= k {
        return Err(Error::Config(format!(
            "mask ratio {ratio} leaves no context among {k} patches"
        )));
    }
    let targets = sample(rng, k, nt).into_vec();
    MaskSpec::from_targets(targets, k)
}

/// Block-sampling hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockMaskParams {
    pub num_targets: usize,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for BlockMaskParams {
    fn default() -> Self {
        BlockMaskParams {
            num_targets: 4,
            scale: (0.15, 0.25),
            aspect: (0.75, 1.5),
        }
    }
}

fn block_size<R: Rng + ?Sized>(gh: usize, gw: usize, p: &BlockMaskParams, rng: &mut R) -> (usize, usize) {
    let s = if p.scale.1 > p.scale.0 {
        rng.gen_range(p.scale.0..p.scale.1)
    } else {
        p.scale.0
    };
    let ar = if p.aspect.1 > p.aspect.0 {
        rng.gen_range(p.aspect.0..p.aspect.1)
    } else {
        p.aspect.0
    };
    let area = ((gh * gw) as f64 * s).floor().max(1.0);
    let cap = |v: f64, side: usize| (v.round() as usize).clamp(1, if side > 1 { side - 1 } else { 1 });
    (cap((area * ar).sqrt(), gh), cap((area / ar).sqrt(), gw))
}

/// I-JEPA-style mask: targets are the union of `num_targets` rectangles,
/// context is the complement.
pub fn sample_block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    params: &BlockMaskParams,
    rng: &mut R,
) -> Result<MaskSpec> {
    if params.num_targets == 0 {
        return Err(Error::Config("block masking needs at least one target block".into()));
    }
    let valid = |r: (f64, f64)| r.0 > 0.0 && r.1 < 1.0 && r.0 <= r.1;
    if !valid(params.scale) {
        return Err(Error::Config(format!(
            "target scale range {:?} must lie in (0, 1)",
            params.scale
        )));
    }
    if !(params.aspect.0 > 0.0 && params.aspect.0 <= params.aspect.1) {
        return Err(Error::Config(format!("invalid aspect range {:?}", params.aspect)));
    }
    let k = grid_h * grid_w;
    for _ in 0..BLOCK_RETRIES {
        let mut is_target = vec![false; k];
        for _ in 0..params.num_targets {
            let (h, w) = block_size(grid_h, grid_w, params, rng);
            let top = rng.gen_range(0..=grid_h - h);
            let left = rng.gen_range(0..=grid_w - w);
            for y in top..top + h {
                for x in left..left + w {
                    is_target[y * grid_w + x] = true;
                }
            }
        }
        if is_target.iter().any(|&t| !t) {
            let targets = (0..k).filter(|&i| is_target[i]).collect();
            return MaskSpec::from_targets(targets, k);
        }
    }
    sample_random_mask(k, FALLBACK_RATIO, rng).map_err(|e| Error::Internal(format!("block mask fallback failed: {e}")))
}
