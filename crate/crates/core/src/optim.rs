//! Adam with decoupled weight decay and a warmup learning-rate schedule.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup, then constant.
    Constant,
    /// Linear warmup, then decay with the inverse square root of the step.
    InverseSqrt,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "inverse_sqrt" => Ok(Schedule::InverseSqrt),
            other => Err(Error::Config(format!(
                "unknown lr schedule `{other}` (expected constant or inverse_sqrt)"
            ))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::InverseSqrt => "inverse_sqrt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.04,
            schedule: Schedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_frac);
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a NaN or infinity; nothing was changed.
    Skipped,
}

pub struct Adam {
    pub cfg: AdamConfig,
    warmup_steps: usize,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, total_steps: usize) -> Self {
        let warmup_steps = (cfg.warmup_frac * total_steps as f64).ceil() as usize;
        Adam {
            cfg,
            warmup_steps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate used for zero-based training step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.cfg.lr * (step + 1) as f64 / w as f64;
        }
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::InverseSqrt => self.cfg.lr * (w.max(1) as f64 / (step + 1) as f64).sqrt(),
        }
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including by weight decay.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<StepOutcome> {
        if let Some((name, _)) = grads
            .iter()
            .find(|(_, g)| g.data().iter().any(|x| !x.is_finite()))
        {
            log::warn!(
                "non-finite gradient for `{name}`; skipping update {}",
                self.t + 1
            );
            return Ok(StepOutcome::Skipped);
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((x, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *x *= decay;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::new(vec![1], vec![x]).unwrap());
        p
    }

    fn grad(g: f64) -> Vec<(String, Tensor)> {
        vec![("x".to_string(), Tensor::new(vec![1], vec![g]).unwrap())]
    }

    fn x(p: &ModelParams) -> f64 {
        p.get("x").unwrap().data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_params(1.5);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            10,
        );
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(x(&p), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let mut p = scalar_params(2.0);
        let mut opt = Adam::new(AdamConfig::default(), 10);
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(x(&p), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let mut p = scalar_params(1.0);
        let mut opt = Adam::new(AdamConfig::default(), 10);
        opt.step(&mut p, &grad(0.5), 0.01).unwrap();
        opt.step(&mut p, &grad(-0.2), 0.01).unwrap();
        // step 1: m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25
        let x1 = 1.0 * (1.0 - 0.01 * 0.01) - 0.01 * 0.5 / (0.5 + 1e-8);
        // step 2: m = 0.045 - 0.02 = 0.025, v = 0.00024975 + 0.00004
        let m2 = 0.9 * 0.05 + 0.1 * -0.2;
        let v2 = 0.999 * 0.00025 + 0.001 * 0.04;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 * (1.0 - 0.01 * 0.01) - 0.01 * mhat / (vhat.sqrt() + 1e-8);
        assert!((x(&p) - x2).abs() < 1e-15, "{} vs {x2}", x(&p));
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut p = scalar_params(1.0);
        let mut opt = Adam::new(AdamConfig::default(), 10);
        assert_eq!(
            opt.step(&mut p, &grad(f64::NAN), 0.1).unwrap(),
            StepOutcome::Skipped
        );
        assert_eq!(x(&p), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn warmup_then_constant_or_decay() {
        let opt = Adam::new(AdamConfig::default(), 100);
        assert_eq!(opt.lr_at(0), 1e-3 / 4.0);
        assert_eq!(opt.lr_at(3), 1e-3);
        assert_eq!(opt.lr_at(50), 1e-3);
        let inv = Adam::new(
            AdamConfig {
                schedule: Schedule::InverseSqrt,
                ..AdamConfig::default()
            },
            100,
        );
        assert_eq!(inv.lr_at(3), 1e-3);
        assert!((inv.lr_at(15) - 1e-3 * 0.5).abs() < 1e-18);
    }
}
