use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::toy::{add_outer, frob, matvec, Mlp, ToyRegression};

/// z-value of a two-sided 95% interval.
pub const Z95: f64 = 1.96;

/// Elementwise Monte-Carlo mean with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl Estimate {
    pub fn norm(&self) -> f64 {
        frob(&self.mean)
    }

    pub fn stderr_norm(&self) -> f64 {
        frob(&self.stderr)
    }

    /// Half-width of the 95% interval per element.
    pub fn ci(&self) -> Vec<f64> {
        self.stderr.iter().map(|s| Z95 * s).collect()
    }
}

/// Welford accumulator over vector samples.
pub(crate) struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub(crate) fn new(dim: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub(crate) fn finish(self) -> Estimate {
        let n = self.n as f64;
        let stderr = self
            .m2
            .iter()
            .map(|s| {
                if self.n > 1 {
                    (s / (n - 1.0) / n).sqrt()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        Estimate {
            mean: self.mean,
            stderr,
            samples: self.n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UntiedReport {
    pub estimate: Estimate,
    /// `||mean|| <= 4 ||stderr||`.
    pub within_band: bool,
}

/// Monte-Carlo `E_n[dJ/dA]` at `A = 0` with `B = toy.b` held free.
pub fn grad_at_zero_untied<R: Rng + ?Sized>(toy: &ToyRegression, num_noise: usize, rng: &mut R) -> UntiedReport {
    let zero = vec![0.0; toy.num_params()];
    let mut acc = Moments::new(toy.num_params());
    for _ in 0..num_noise {
        let noise = toy.draw_noise(rng);
        let (ga, _) = toy.grad(&zero, &toy.b, &noise);
        acc.push(&ga);
    }
    let estimate = acc.finish();
    let within_band = estimate.norm() <= 4.0 * estimate.stderr_norm();
    UntiedReport { estimate, within_band }
}

#[derive(Clone, Debug)]
pub struct TiedReport {
    /// Monte-Carlo `dJ_tied/dA` at the zero matrix.
    pub tied: Estimate,
    /// Exact `dJ_det/dB` at the zero matrix.
    pub det: Vec<f64>,
    /// Every element within three 95% intervals.
    pub matches: bool,
    /// Largest `|tied - det| / ci` over elements.
    pub worst_ratio: f64,
}

pub fn grad_at_zero_tied<R: Rng + ?Sized>(toy: &ToyRegression, num_noise: usize, rng: &mut R) -> TiedReport {
    let zero = vec![0.0; toy.num_params()];
    let mut acc = Moments::new(toy.num_params());
    for _ in 0..num_noise {
        let noise = toy.draw_noise(rng);
        let (ga, gb) = toy.grad(&zero, &zero, &noise);
        let g: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
        acc.push(&g);
    }
    let tied = acc.finish();
    let no_noise = vec![vec![0.0; toy.dim()]; toy.psi.len()];
    let (_, det) = toy.grad(&zero, &zero, &no_noise);
    let mut matches = true;
    let mut worst_ratio: f64 = 0.0;
    for ((t, d), ci) in tied.mean.iter().zip(&det).zip(tied.ci()) {
        let diff = (t - d).abs();
        let slack = 1e-12 * (1.0 + d.abs());
        if diff > 3.0 * ci + slack {
            matches = false;
        }
        if ci > 0.0 {
            worst_ratio = worst_ratio.max(diff / ci);
        }
    }
    TiedReport {
        tied,
        det,
        matches,
        worst_ratio,
    }
}

/// Settings for the collapse demonstration.
#[derive(Clone, Debug)]
pub struct CollapseConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma: f64,
    pub dim: usize,
    pub hidden: usize,
    pub num_targets: usize,
    pub init_scale: f64,
    /// Decay on the network's weights only; keeps `F` from absorbing a
    /// shrinking projection by growing its input weights.
    pub weight_decay: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            steps: 2000,
            batch: 32,
            lr: 0.05,
            sigma: 0.25,
            dim: 2,
            hidden: 8,
            num_targets: 4,
            init_scale: 0.5,
            weight_decay: 0.03,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CollapseRun {
    pub tied: bool,
    pub seed: u64,
    pub init_norm: f64,
    pub final_norm: f64,
    pub final_loss: f64,
}

impl CollapseRun {
    pub fn ratio(&self) -> f64 {
        self.final_norm / self.init_norm
    }
}

/// Trains `F(A n_j + psi_j + m, B x) ~ c_j . x` by SGD on fresh samples.
///
/// With `tied` the context is projected by `A` itself; otherwise a separate
/// `B` does it and `A` only ever sees noise. Returns the noise projection's
/// norm before and after.
pub fn collapse_demo(cfg: &CollapseConfig, tied: bool, seed: u64) -> CollapseRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let normal = |rng: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<f64> {
        (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let psi: Vec<Vec<f64>> = (0..cfg.num_targets).map(|_| normal(&mut rng, d, 1.0)).collect();
    let teacher: Vec<Vec<f64>> = (0..cfg.num_targets).map(|_| normal(&mut rng, d, 1.0)).collect();
    let mut mlp = Mlp::random(d, cfg.hidden, &mut rng);
    let mut a = normal(&mut rng, d * d, cfg.init_scale);
    let mut b = normal(&mut rng, d * d, cfg.init_scale);
    let mut m = vec![0.0; d];
    let init_norm = frob(&a);
    let noise_std = cfg.sigma.sqrt();

    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut g_theta = vec![0.0; mlp.theta.len()];
        let mut ga = vec![0.0; d * d];
        let mut gb = vec![0.0; d * d];
        let mut gm = vec![0.0; d];
        let mut loss = 0.0;
        let scale = 1.0 / (cfg.batch * cfg.num_targets) as f64;
        for _ in 0..cfg.batch {
            let x = normal(&mut rng, d, 1.0);
            let proj = if tied { &a } else { &b };
            let v = matvec(proj, &x, d);
            for (j, p) in psi.iter().enumerate() {
                let n = normal(&mut rng, d, noise_std);
                let an = matvec(&a, &n, d);
                let u: Vec<f64> = (0..d).map(|c| an[c] + p[c] + m[c]).collect();
                let y: f64 = teacher[j].iter().zip(&x).map(|(c, xv)| c * xv).sum();
                let e = mlp.eval(&u, &v);
                let r = e.value - y;
                loss += r * r * scale;
                let coef = 2.0 * r * scale;
                mlp.accumulate_param_grad(&e, &u, &v, coef, &mut g_theta);
                add_outer(&mut ga, &e.du, &n, coef);
                if tied {
                    add_outer(&mut ga, &e.dv, &x, coef);
                } else {
                    add_outer(&mut gb, &e.dv, &x, coef);
                }
                for (g, du) in gm.iter_mut().zip(&e.du) {
                    *g += coef * du;
                }
            }
        }
        let weights = 2 * cfg.hidden * d;
        for (k, (t, g)) in mlp.theta.iter_mut().zip(&g_theta).enumerate() {
            let decay = if k < weights { cfg.weight_decay * *t } else { 0.0 };
            *t -= cfg.lr * (g + decay);
        }
        for (t, g) in a.iter_mut().zip(&ga) {
            *t -= cfg.lr * g;
        }
        for (t, g) in b.iter_mut().zip(&gb) {
            *t -= cfg.lr * g;
        }
        for (t, g) in m.iter_mut().zip(&gm) {
            *t -= cfg.lr * g;
        }
        final_loss = loss;
    }
    CollapseRun {
        tied,
        seed,
        init_norm,
        final_norm: frob(&a),
        final_loss,
    }
}
