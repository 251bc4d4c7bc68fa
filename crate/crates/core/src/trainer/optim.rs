use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moment buffers, one per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.value.numel()])
                .collect()
        };
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update:
/// `p <- p (1 - lr wd)` for decayed parameters, then
/// `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    opt: &mut OptimState<T>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::Internal(format!(
            "optimizer got {} gradients and {} moment buffers for {} parameters",
            grads.len(),
            opt.m.len(),
            params.len()
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (c1, c2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
    let step_size = T::of(lr / bc1);
    let sqrt_bc2 = T::of(bc2.sqrt());
    let eps = T::of(ADAM_EPS);
    let decay = T::of(1.0 - lr * wd);
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != e.value.numel() {
            return Err(Error::Internal(format!(
                "gradient for '{}' has the wrong length",
                e.name
            )));
        }
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let apply_decay = e.decay && wd != 0.0;
        for (j, p) in e.value.data_mut().iter_mut().enumerate() {
            if apply_decay {
                *p *= decay;
            }
            m[j] = b1 * m[j] + c1 * g[j];
            v[j] = b2 * v[j] + c2 * g[j] * g[j];
            let denom = v[j].sqrt() / sqrt_bc2 + eps;
            *p -= step_size * m[j] / denom;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Lr,
    Wd,
}

/// Learning-rate and weight-decay schedules.
///
/// `Lr`: linear warmup from 0 to `hi` over `warmup` steps, then cosine decay
/// from `hi` to `lo`. `Wd`: cosine ramp from `lo` at step 0 to `hi` at `total`.
pub fn schedule(step: usize, total: usize, warmup: usize, lo: f64, hi: f64, kind: ScheduleKind) -> Result<f64> {
    if warmup > total {
        return Err(Error::Config(format!("warmup {warmup} exceeds total steps {total}")));
    }
    if step > total {
        return Err(Error::Usage(format!("schedule step {step} beyond total {total}")));
    }
    Ok(match kind {
        ScheduleKind::Lr => {
            if step < warmup {
                hi * step as f64 / warmup as f64
            } else if total == warmup {
                hi
            } else {
                let progress = (step - warmup) as f64 / (total - warmup) as f64;
                lo + (hi - lo) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
        ScheduleKind::Wd => {
            if total == 0 {
                lo
            } else {
                hi + (lo - hi) * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
            }
        }
    })
}

/// Explicit penalty on `A` for the regularization ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reg {
    None,
    L1,
    L2,
}

impl FromStr for Reg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reg::None),
            "l1" => Ok(Reg::L1),
            "l2" => Ok(Reg::L2),
            _ => Err(Error::Config(format!(
                "unknown regularizer '{s}' (expected none, l1 or l2)"
            ))),
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reg::None => "none",
            Reg::L1 => "l1",
            Reg::L2 => "l2",
        })
    }
}

/// `base + coeff * sum|A|` or `base + coeff * sum A^2`.
pub fn regularized_loss<T: Scalar>(g: &mut Graph<T>, base: Var, a: Var, reg: Reg, coeff: f64) -> Result<Var> {
    if !(coeff >= 0.0) {
        return Err(Error::Config(format!(
            "regularization coefficient must be >= 0, got {coeff}"
        )));
    }
    if reg == Reg::None || coeff == 0.0 {
        return Ok(base);
    }
    let pen = match reg {
        Reg::L1 => g.abs(a),
        _ => g.mul(a, a)?,
    };
    let pen = g.sum(pen);
    let pen = g.scale(pen, coeff);
    g.add(base, pen)
}

/// Moment buffers as checkpoint records named `opt.m.<param>` / `opt.v.<param>`.
pub fn optim_records(params: &ParamStore<f32>, opt: &OptimState<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::with_capacity(2 * params.len() + 1);
    for (i, e) in params.entries().iter().enumerate() {
        let shape = e.value.shape();
        out.push((
            format!("opt.m.{}", e.name),
            Tensor::new(shape, opt.m[i].clone()).expect("moment shape"),
        ));
        out.push((
            format!("opt.v.{}", e.name),
            Tensor::new(shape, opt.v[i].clone()).expect("moment shape"),
        ));
    }
    out
}

pub fn optim_from_records(
    params: &ParamStore<f32>,
    records: &[(String, Tensor<f32>)],
    step: u64,
) -> Result<OptimState<f32>> {
    let find = |key: String, shape: &[usize]| -> Result<Vec<f32>> {
        let t = records
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint has no record '{key}'"),
            })?;
        if t.shape() != shape {
            return Err(Error::Format {
                offset: 0,
                message: format!("record '{key}' has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t.data().to_vec())
    };
    let mut opt = OptimState::new(params);
    for (i, e) in params.entries().iter().enumerate() {
        opt.m[i] = find(format!("opt.m.{}", e.name), e.value.shape())?;
        opt.v[i] = find(format!("opt.v.{}", e.name), e.value.shape())?;
    }
    opt.step = step;
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![v]).unwrap(), decay);
        s
    }

    #[test]
    fn zero_grad_zero_wd_is_identity() {
        let mut s = store(0.7, true);
        let mut opt = OptimState::new(&s);
        adamw_step(&mut s, &[vec![0.0]], &mut opt, 1e-3, 0.0).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let (p0, g, lr) = (0.5, 0.2, 0.01);
        let mut s = store(p0, false);
        let mut opt = OptimState::new(&s);
        adamw_step(&mut s, &[vec![g]], &mut opt, lr, 0.3).unwrap();
        let expect = p0 - lr * g / (g.abs() + ADAM_EPS);
        assert!((s.entries()[0].value.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_by_factor() {
        let (lr, wd) = (0.1, 0.4);
        let mut s = store(2.0, true);
        let mut opt = OptimState::new(&s);
        adamw_step(&mut s, &[vec![0.0]], &mut opt, lr, wd).unwrap();
        assert!((s.entries()[0].value.data()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_internal_error() {
        let mut s = store(1.0, true);
        let mut opt = OptimState::new(&s);
        assert!(matches!(
            adamw_step(&mut s, &[], &mut opt, 0.1, 0.0),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn schedule_endpoints() {
        let lr = |s| schedule(s, 100, 10, 0.0, 1e-3, ScheduleKind::Lr).unwrap();
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(10), 1e-3);
        assert!(lr(100).abs() < 1e-18);
        assert!(lr(5) > 0.0 && lr(5) < 1e-3);
        let wd = |s| schedule(s, 100, 0, 0.04, 0.4, ScheduleKind::Wd).unwrap();
        assert!((wd(0) - 0.04).abs() < 1e-15);
        assert!((wd(100) - 0.4).abs() < 1e-15);
        assert!((wd(50) - 0.22).abs() < 1e-12);
        assert!(matches!(
            schedule(0, 10, 11, 0.0, 1.0, ScheduleKind::Lr),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn regularizers() {
        let mut g = Graph::<f64>::new();
        let base = g.constant(Tensor::scalar(1.5));
        let a = g.param(&Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
        let same = regularized_loss(&mut g, base, a, Reg::L2, 0.0).unwrap();
        assert_eq!(same, base);
        let l1 = regularized_loss(&mut g, base, a, Reg::L1, 0.1).unwrap();
        assert!((g.scalar(l1) - 1.75).abs() < 1e-15);
        let l2 = regularized_loss(&mut g, base, a, Reg::L2, 0.1).unwrap();
        assert!((g.scalar(l2) - (1.5 + 0.1 * 4.25)).abs() < 1e-15);
        g.backward(l2).unwrap();
        let ga = g.grad(a).unwrap();
        assert!((ga[0] - 2.0 * 0.1 * 0.5).abs() < 1e-15);
        assert!((ga[1] - 2.0 * 0.1 * -2.0).abs() < 1e-15);
    }
}
