//! Warmup + cosine learning-rate schedule, AdamW and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Linear warmup from 0 to `base` over `ceil(warmup_ratio · total)` steps,
/// then cosine decay to 0 at `total`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_ratio: f64,
    pub total: usize,
    pub step: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_ratio: f64, total: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_ratio) || total == 0 || base < 0.0 {
            return Err(Error::invalid(format!(
                "bad schedule: base {base}, warmup {warmup_ratio}, total {total}"
            )));
        }
        Ok(Self {
            base,
            warmup_ratio,
            total,
            step: 0,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total as f64).ceil() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::IndexOutOfRange {
                op: "lr_at",
                index: step,
                extent: self.total,
            });
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.base * step as f64 / warmup as f64);
        }
        if warmup == self.total {
            return Ok(self.base);
        }
        let progress = (step - warmup) as f64 / (self.total - warmup) as f64;
        Ok(self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    /// Moves to the next step and returns its rate.
    pub fn advance(&mut self) -> Result<f64> {
        self.step += 1;
        self.lr_at(self.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Decoupled-weight-decay Adam. Moments are allocated only for the
/// parameters handed to [`AdamW::new`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: Vec<(ParamId, Moments<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>, trainable: &[ParamId]) -> Self {
        let moments = trainable
            .iter()
            .map(|&id| {
                let n = store.value(id).numel();
                (
                    id,
                    Moments {
                        m: vec![T::zero(); n],
                        v: vec![T::zero(); n],
                    },
                )
            })
            .collect();
        Self { cfg, step: 0, moments }
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.iter().map(|(id, _)| *id)
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, mom) in &mut self.moments {
            let p = store.get_mut(*id);
            let (value, grad) = (p.value.data_mut(), &p.grad);
            for i in 0..value.len() {
                let g = grad[i].f64();
                let m = beta1 * mom.m[i].f64() + (1.0 - beta1) * g;
                let v = beta2 * mom.v[i].f64() + (1.0 - beta2) * g * g;
                mom.m[i] = T::of(m);
                mom.v[i] = T::of(v);
                let mut w = value[i].f64();
                w *= 1.0 - lr * weight_decay;
                w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                value[i] = T::of(w);
            }
        }
    }
}

/// Global L2 norm of the gradients of `ids`, accumulated in `f64`.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> f64 {
    ids.iter()
        .flat_map(|&id| store.get(id).grad.iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients of `ids` so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grad_norm(store, ids);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for &id in ids {
            for g in &mut store.get_mut(id).grad {
                *g = T::of(g.f64() * scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn schedule_reference_points() {
        let s = LrSchedule::new(1e-4, 0.1, 100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-4);
        assert!((s.lr_at(55).unwrap() - 5e-5).abs() < 1e-18);
        assert!(s.lr_at(100).unwrap().abs() < 1e-20);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        let mut s = LrSchedule::new(2.0, 0.0, 4).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 2.0);
        assert!((s.advance().unwrap() - 2.0 * 0.5 * (1.0 + (std::f64::consts::PI / 4.0).cos())).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", &[2], Init::Zeros, 0).unwrap();
        let b = store.add("b", &[1], Init::Zeros, 0).unwrap();
        store.get_mut(a).grad = vec![6.0, 0.0];
        store.get_mut(b).grad = vec![8.0];
        let before = clip_grad_norm(&mut store, &[a, b], 1.0);
        assert_eq!(before, 10.0);
        assert!((grad_norm(&store, &[a, b]) - 1.0).abs() < 1e-12);
        let g = &store.get(a).grad;
        assert!((g[0] - 0.6).abs() < 1e-15 && g[1] == 0.0);
        // Below the threshold nothing changes.
        let again = clip_grad_norm(&mut store, &[a, b], 1.0);
        assert!((again - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", &[1], Init::Ones, 0).unwrap();
        store.get_mut(w).grad = vec![0.5];
        let mut opt = AdamW::new(AdamWConfig::default(), &store, &[w]);
        opt.update(&mut store, 0.1);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(w).data()[0] - want).abs() < 1e-15);
    }
}
