use rand::Rng;
use rand_distr::StandardNormal;

/// One-hidden-layer tanh network `F(u, v) = w2 . tanh(Wu u + Wv v + b1) + b2`.
///
/// Parameters live in one flat vector laid out as `Wu | Wv | b1 | w2 | b2`,
/// with `Wu` and `Wv` row-major `[hidden, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
    pub theta: Vec<f64>,
}

/// Value of `F` together with its input gradients.
#[derive(Clone, Debug)]
pub struct MlpEval {
    pub value: f64,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    /// Pre-activation slope `w2 * (1 - t^2)` and activations, kept for
    /// parameter gradients.
    slope: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    pub fn num_params(dim: usize, hidden: usize) -> usize {
        2 * hidden * dim + 2 * hidden + 1
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut theta = vec![0.0; Self::num_params(dim, hidden)];
        let w_std = 1.0 / (dim as f64).sqrt();
        let (w_end, b1_end) = (2 * hidden * dim, 2 * hidden * dim + hidden);
        for (k, t) in theta.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *t = if k < w_end {
                w_std * z
            } else if k < b1_end {
                0.5 * z
            } else if k + 1 < Self::num_params(dim, hidden) {
                z / (hidden as f64).sqrt()
            } else {
                0.0
            };
        }
        Mlp { dim, hidden, theta }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], f64) {
        let hd = self.hidden * self.dim;
        let h = self.hidden;
        let t = &self.theta;
        (
            &t[..hd],
            &t[hd..2 * hd],
            &t[2 * hd..2 * hd + h],
            &t[2 * hd + h..2 * hd + 2 * h],
            t[2 * hd + 2 * h],
        )
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> MlpEval {
        let (wu, wv, b1, w2, b2) = self.split();
        let (h, d) = (self.hidden, self.dim);
        let mut act = vec![0.0; h];
        let mut slope = vec![0.0; h];
        let mut value = b2;
        for k in 0..h {
            let mut z = b1[k];
            for c in 0..d {
                z += wu[k * d + c] * u[c] + wv[k * d + c] * v[c];
            }
            let t = z.tanh();
            act[k] = t;
            slope[k] = w2[k] * (1.0 - t * t);
            value += w2[k] * t;
        }
        let mut du = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for k in 0..h {
            for c in 0..d {
                du[c] += wu[k * d + c] * slope[k];
                dv[c] += wv[k * d + c] * slope[k];
            }
        }
        MlpEval {
            value,
            du,
            dv,
            slope,
            act,
        }
    }

    /// Adds `scale * dF/dtheta` at the evaluated point into `grad`.
    pub fn accumulate_param_grad(&self, e: &MlpEval, u: &[f64], v: &[f64], scale: f64, grad: &mut [f64]) {
        let (h, d) = (self.hidden, self.dim);
        let hd = h * d;
        for k in 0..h {
            let s = scale * e.slope[k];
            for c in 0..d {
                grad[k * d + c] += s * u[c];
                grad[hd + k * d + c] += s * v[c];
            }
            grad[2 * hd + k] += s;
            grad[2 * hd + h + k] += scale * e.act[k];
        }
        grad[2 * hd + 2 * h] += scale;
    }
}

/// `out = M x` for row-major `M` of shape `[rows, x.len()]`.
pub(crate) fn matvec(m: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum())
        .collect()
}

/// `acc += scale * a b^T`, row-major `[a.len(), b.len()]`.
pub(crate) fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    for (r, &ar) in a.iter().enumerate() {
        for (c, &bc) in b.iter().enumerate() {
            acc[r * b.len() + c] += scale * ar * bc;
        }
    }
}

pub(crate) fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Regression of fixed targets `y_j` from a noisy position
/// `A n_j + psi_j + m_tilde` and a projected context `B x_i`, with
/// `n_j ~ N(0, sigma I)`.
///
/// `A` and `B` are row-major `[pos_dim, in_dim]`; here both dims equal
/// `mlp.dim`.
#[derive(Clone, Debug)]
pub struct ToyRegression {
    pub mlp: Mlp,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub m_tilde: Vec<f64>,
    pub sigma: f64,
    /// Free context projection used by the untied objective.
    pub b: Vec<f64>,
}

/// One noise draw: `n_j` for every target.
pub type NoiseDraw = Vec<Vec<f64>>;

impl ToyRegression {
    pub const DIM: usize = 2;
    pub const HIDDEN: usize = 4;
    pub const NUM_CONTEXT: usize = 3;
    pub const NUM_TARGETS: usize = 4;

    pub fn random<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Self {
        let d = Self::DIM;
        let mut normal =
            |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
        let x = (0..Self::NUM_CONTEXT).map(|_| normal(d, 1.0)).collect();
        let psi = (0..Self::NUM_TARGETS).map(|_| normal(d, 1.0)).collect();
        let y = normal(Self::NUM_TARGETS, 1.0);
        let m_tilde = normal(d, 0.3);
        let b = normal(d * d, 0.5);
        let mlp = Mlp::random(d, Self::HIDDEN, rng);
        ToyRegression {
            mlp,
            x,
            y,
            psi,
            m_tilde,
            sigma,
            b,
        }
    }

    /// Replaces the targets with `F(psi_j + m_tilde, 0)` so every residual at
    /// the zero matrix vanishes.
    pub fn with_matched_targets(mut self) -> Self {
        let zero = vec![0.0; self.dim()];
        self.y = (0..self.psi.len())
            .map(|j| self.mlp.eval(&self.position(j), &zero).value)
            .collect();
        self
    }

    pub fn dim(&self) -> usize {
        self.mlp.dim
    }

    pub fn num_params(&self) -> usize {
        self.dim() * self.dim()
    }

    fn position(&self, j: usize) -> Vec<f64> {
        self.psi[j].iter().zip(&self.m_tilde).map(|(p, m)| p + m).collect()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        let s = self.sigma.sqrt();
        (0..self.psi.len())
            .map(|_| {
                (0..self.dim())
                    .map(|_| {
                        if s == 0.0 {
                            0.0
                        } else {
                            s * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Objective `sum_{i,j} (F(A n_j + psi_j + m, B x_i) - y_j)^2` for one
    /// noise draw.
    pub fn objective(&self, a: &[f64], b: &[f64], noise: &NoiseDraw) -> f64 {
        let d = self.dim();
        let mut total = 0.0;
        for (j, n) in noise.iter().enumerate() {
            let an = matvec(a, n, d);
            let u: Vec<f64> = self.position(j).iter().zip(&an).map(|(p, q)| p + q).collect();
            for x in &self.x {
                let v = matvec(b, x, d);
                let r = self.mlp.eval(&u, &v).value - self.y[j];
                total += r * r;
            }
        }
        total
    }

    /// Gradients of [`Self::objective`] with respect to `A` and `B`.
    pub fn grad(&self, a: &[f64], b: &[f64], noise: &NoiseDraw) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut ga = vec![0.0; d * d];
        let mut gb = vec![0.0; d * d];
        for (j, n) in noise.iter().enumerate() {
            let an = matvec(a, n, d);
            let u: Vec<f64> = self.position(j).iter().zip(&an).map(|(p, q)| p + q).collect();
            for x in &self.x {
                let v = matvec(b, x, d);
                let e = self.mlp.eval(&u, &v);
                let r2 = 2.0 * (e.value - self.y[j]);
                add_outer(&mut ga, &e.du, n, r2);
                add_outer(&mut gb, &e.dv, x, r2);
            }
        }
        (ga, gb)
    }
}
