use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `R = X + Z` with discrete `X`, `Z ~ N(0, 1)` and
/// `Y = E[Y|X] + obs_noise * N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyChannel {
    pub support: Vec<f64>,
    /// Normalized probabilities of each support point.
    pub probs: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub obs_noise: f64,
}

impl NoisyChannel {
    pub fn new(support: Vec<f64>, weights: Vec<f64>, cond_mean: Vec<f64>, obs_noise: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Config("channel support is empty".into()));
        }
        if weights.len() != support.len() || cond_mean.len() != support.len() {
            return Err(Error::Config(format!(
                "channel tables disagree: {} support points, {} weights, {} means",
                support.len(),
                weights.len(),
                cond_mean.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Config(
                "channel weights must be non-negative with a positive sum".into(),
            ));
        }
        if !(obs_noise >= 0.0) {
            return Err(Error::Config(format!("obs_noise must be >= 0, got {obs_noise}")));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(NoisyChannel {
            support,
            probs,
            cond_mean,
            obs_noise,
        })
    }

    /// Channel with `k` support points in [-2, 2] and means in [-2, 2].
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let mut support: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        support.sort_by(f64::total_cmp);
        let weights = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let cond_mean = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Self::new(support, weights, cond_mean, 0.5)
    }

    /// Draws `(r, y)`.
    pub fn sample<R: Rng + ?Sized>(&self, pick: &WeightedIndex<f64>, rng: &mut R) -> (f64, f64) {
        let i = pick.sample(rng);
        let z: f64 = rng.sample(StandardNormal);
        let e: f64 = if self.obs_noise > 0.0 {
            rng.sample(StandardNormal)
        } else {
            0.0
        };
        (self.support[i] + z, self.cond_mean[i] + self.obs_noise * e)
    }

    fn picker(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("probabilities validated at construction")
    }

    /// Mean of `Y` ignoring `R`.
    pub fn mean_y(&self) -> f64 {
        self.probs.iter().zip(&self.cond_mean).map(|(p, m)| p * m).sum()
    }
}

/// `sum_x E[Y|X=x] p(x|r)` with `p(x|r)` proportional to `p(x) exp(-(r-x)^2/2)`.
pub fn optimal_predictor_closed_form(ch: &NoisyChannel, r: f64) -> Result<f64> {
    if ch.support.is_empty() {
        return Err(Error::Config("channel support is empty".into()));
    }
    let logw: Vec<f64> = ch
        .support
        .iter()
        .zip(&ch.probs)
        .map(|(x, p)| p.ln() - 0.5 * (r - x) * (r - x))
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (lw, m) in logw.iter().zip(&ch.cond_mean) {
        let w = (lw - top).exp();
        num += w * m;
        den += w;
    }
    Ok(num / den)
}

/// Empirical `E[Y | |R - r| < width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleEstimate {
    pub r: f64,
    pub mean: f64,
    pub stderr: f64,
    pub retained: usize,
}

impl OracleEstimate {
    /// Too few samples fell in the window.
    pub fn needs_wider_window(&self) -> bool {
        self.retained < MIN_RETAINED
    }
}

pub const MIN_RETAINED: usize = 100;
pub const MIN_ORACLE_SAMPLES: usize = 10_000;

pub fn optimal_predictor_mc_oracle<R: Rng + ?Sized>(
    ch: &NoisyChannel,
    r: f64,
    width: f64,
    n: usize,
    rng: &mut R,
) -> Result<OracleEstimate> {
    Ok(mc_oracle_points(ch, &[r], width, n, rng)?.remove(0))
}

/// Like [`optimal_predictor_mc_oracle`] but bins one simulation at several
/// query points.
pub fn mc_oracle_points<R: Rng + ?Sized>(
    ch: &NoisyChannel,
    rs: &[f64],
    width: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<OracleEstimate>> {
    if n < MIN_ORACLE_SAMPLES {
        return Err(Error::Config(format!(
            "oracle needs at least {MIN_ORACLE_SAMPLES} samples, got {n}"
        )));
    }
    if !(width > 0.0) {
        return Err(Error::Config(format!("oracle window must be positive, got {width}")));
    }
    let pick = ch.picker();
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); rs.len()];
    for _ in 0..n {
        let (r, y) = ch.sample(&pick, rng);
        for (q, s) in rs.iter().zip(&mut sums) {
            if (r - q).abs() < width {
                s.0 += 1;
                s.1 += y;
                s.2 += y * y;
            }
        }
    }
    Ok(rs
        .iter()
        .zip(sums)
        .map(|(&r, (k, sy, syy))| {
            let kf = k as f64;
            let mean = sy / kf;
            let var = if k > 1 {
                ((syy - kf * mean * mean) / (kf - 1.0)).max(0.0)
            } else {
                f64::INFINITY
            };
            OracleEstimate {
                r,
                mean,
                stderr: (var / kf).sqrt(),
                retained: k,
            }
        })
        .collect())
}

/// Empirical squared error of the closed form against two simple rivals.
#[derive(Clone, Debug)]
pub struct PredictorComparison {
    pub mse_closed: f64,
    pub mse_identity: f64,
    pub mse_constant: f64,
    /// Standard error of the paired difference closed - rival.
    pub se_vs_identity: f64,
    pub se_vs_constant: f64,
}

impl PredictorComparison {
    /// Closed form is no worse than either rival, up to two standard errors.
    pub fn closed_form_best(&self) -> bool {
        self.mse_closed <= self.mse_identity + 2.0 * self.se_vs_identity
            && self.mse_closed <= self.mse_constant + 2.0 * self.se_vs_constant
    }
}

pub fn compare_predictors<R: Rng + ?Sized>(ch: &NoisyChannel, n: usize, rng: &mut R) -> Result<PredictorComparison> {
    if n < 2 {
        return Err(Error::Config("comparison needs at least 2 samples".into()));
    }
    let pick = ch.picker();
    let c = ch.mean_y();
    let (mut e0, mut e1, mut e2) = (0.0, 0.0, 0.0);
    let (mut d1, mut d1s, mut d2, mut d2s) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let (r, y) = ch.sample(&pick, rng);
        let f = optimal_predictor_closed_form(ch, r)?;
        let a = (f - y) * (f - y);
        let b = (r - y) * (r - y);
        let k = (c - y) * (c - y);
        e0 += a;
        e1 += b;
        e2 += k;
        d1 += a - b;
        d1s += (a - b) * (a - b);
        d2 += a - k;
        d2s += (a - k) * (a - k);
    }
    let nf = n as f64;
    let se = |s: f64, ss: f64| (((ss - s * s / nf) / (nf - 1.0)).max(0.0) / nf).sqrt();
    Ok(PredictorComparison {
        mse_closed: e0 / nf,
        mse_identity: e1 / nf,
        mse_constant: e2 / nf,
        se_vs_identity: se(d1, d1s),
        se_vs_constant: se(d2, d2s),
    })
}
