//! Rectified Adam and the hold-then-linear-decay learning-rate schedule.

use std::collections::BTreeMap;

use ratenet_autograd::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient; off by default.
    pub weight_decay: f64,
    /// Global gradient-norm clip per update; off by default.
    pub grad_clip_norm: Option<f64>,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, grad_clip_norm: None }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.beta2 == 0.0 {
            return Err(Error::Config("optimizer: betas must lie in [0, 1) with beta2 > 0".into()));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer: eps must be positive and weight_decay non-negative".into()));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("optimizer: grad_clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    pub fn rho(&self, t: u64) -> f64 {
        let b = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b / (1.0 - b)
    }

    /// Variance rectification term at step `t`, or `None` while the
    /// second-moment estimate is not yet trusted (`rho_t <= 4`).
    pub fn rectifier(&self, t: u64) -> Option<f64> {
        let (r, ri) = (self.rho(t), self.rho_inf());
        (r > 4.0).then(|| (((r - 4.0) * (r - 2.0) * ri) / ((ri - 4.0) * (ri - 2.0) * r)).sqrt())
    }
}

/// Moments and step count of a single parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// RAdam with an independent step counter per parameter, so tensors that
/// are updated at different rates each see their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdam<T> {
    pub cfg: RAdamConfig,
    state: BTreeMap<String, ParamState<T>>,
}

impl<T: Scalar> RAdam<T> {
    pub fn new(cfg: RAdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: BTreeMap::new() })
    }

    pub fn state(&self, name: &str) -> Option<&ParamState<T>> {
        self.state.get(name)
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &ParamState<T>)> {
        self.state.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Applies one update to every parameter named in `grads`. All
    /// gradients are validated before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(&str, &Tensor<T>)], lr: f64) -> Result<()> {
        for &(name, gr) in grads {
            let p = params.get(name).ok_or_else(|| Error::Invalid(format!("optimizer: unknown parameter {name}")))?;
            if p.shape() != gr.shape() {
                return Err(Error::Invalid(format!(
                    "optimizer: gradient of {name} has shape {:?}, parameter {:?}",
                    gr.shape(),
                    p.shape()
                )));
            }
            if !gr.all_finite() {
                return Err(Error::NonFinite { phase: "optimizer step".into(), what: format!("gradient of {name}") });
            }
        }
        let clip = match self.cfg.grad_clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.data())
                    .map(|x| x.to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let RAdamConfig { beta1: b1, beta2: b2, eps, weight_decay: wd, .. } = self.cfg;
        for &(name, gr) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.to_string()).or_insert_with(|| ParamState {
                step: 0,
                m: Tensor::zeros(gr.shape()),
                v: Tensor::zeros(gr.shape()),
            });
            st.step += 1;
            let t = st.step;
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            let rect = self.cfg.rectifier(t);
            let (pd, md, vd) = (p.data_mut(), st.m.data_mut(), st.v.data_mut());
            for i in 0..pd.len() {
                let theta = pd[i].to_f64_lossy();
                let g = gr.data()[i].to_f64_lossy() * clip + wd * theta;
                let m = b1 * md[i].to_f64_lossy() + (1.0 - b1) * g;
                let v = b2 * vd[i].to_f64_lossy() + (1.0 - b2) * g * g;
                md[i] = T::from_f64_lossy(m);
                vd[i] = T::from_f64_lossy(v);
                let m_hat = m / bc1;
                let delta = match rect {
                    Some(r) => r * m_hat / ((v / bc2).sqrt() + eps),
                    None => m_hat,
                };
                pd[i] = T::from_f64_lossy(theta - lr * delta);
            }
        }
        Ok(())
    }

    /// Flattens the state into `{ns}{param}/m`, `/v` and `/step` tensors.
    pub fn export(&self, ns: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, st) in &self.state {
            out.insert(format!("{ns}{name}/m"), st.m.clone());
            out.insert(format!("{ns}{name}/v"), st.v.clone());
            out.insert(format!("{ns}{name}/step"), Tensor::scalar(T::from_f64_lossy(st.step as f64)));
        }
        out
    }

    /// Inverse of [`Self::export`]; entries outside `ns` are ignored.
    pub fn import(cfg: RAdamConfig, ps: &ParamSet<T>, ns: &str) -> Result<Self> {
        let mut opt = Self::new(cfg)?;
        for (key, t) in ps.with_prefix(ns) {
            let rest = &key[ns.len()..];
            let Some(name) = rest.strip_suffix("/step") else { continue };
            let get = |s: &str| {
                ps.get(&format!("{ns}{name}/{s}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} lacks {s}")))
            };
            let (m, v) = (get("m")?, get("v")?);
            let step = t.item().to_f64_lossy();
            if m.shape() != v.shape() || step < 0.0 || step.fract() != 0.0 {
                return Err(Error::Checkpoint(format!("optimizer state for {name} is malformed")));
            }
            opt.state.insert(name.to_string(), ParamState { step: step as u64, m, v });
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub hold_cycles: u64,
    pub total_cycles: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-4, hold_cycles: 10_000, total_cycles: 40_000 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.hold_cycles > self.total_cycles || !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config("schedule: need hold_cycles <= total_cycles and a finite base_lr >= 0".into()));
        }
        Ok(())
    }

    /// `base_lr` before `hold_cycles`, then linear decay reaching zero at
    /// `total_cycles`.
    pub fn lr_at(&self, cycle: u64) -> Result<f64> {
        if cycle > self.total_cycles {
            return Err(Error::Invalid(format!("cycle {cycle} is past the schedule end {}", self.total_cycles)));
        }
        if cycle < self.hold_cycles {
            return Ok(self.base_lr);
        }
        let span = (self.total_cycles - self.hold_cycles) as f64;
        if span == 0.0 {
            return Ok(0.0);
        }
        Ok(self.base_lr * ((self.total_cycles - cycle) as f64 / span))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_sequence_and_branch_switch() {
        let c = RAdamConfig::default();
        assert!((c.rho_inf() - 1999.0).abs() < 1e-9);
        assert!((c.rho(1) - 1.0).abs() < 1e-9);
        for t in 1..=4 {
            assert!(c.rectifier(t).is_none(), "t={t}");
        }
        for t in 5..50 {
            assert!(c.rectifier(t).is_some(), "t={t}");
        }
    }

    #[test]
    fn decreases_a_convex_quadratic() {
        let mut opt = RAdam::<f64>::new(RAdamConfig::default()).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum::<f64>();
        let mut prev = f(ps.get("x").unwrap().data());
        for _ in 0..100 {
            let x = ps.get("x").unwrap().data().to_vec();
            let g = Tensor::from_vec(&[3], x.iter().enumerate().map(|(i, v)| 2.0 * (i + 1) as f64 * v).collect()).unwrap();
            opt.step(&mut ps, &[("x", &g)], 1e-2).unwrap();
            let now = f(ps.get("x").unwrap().data());
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let mut opt = RAdam::<f32>::new(RAdamConfig::default()).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::full(&[2], 1.0));
        ps.insert("b", Tensor::full(&[2], 1.0));
        let ok = Tensor::full(&[2], 0.5);
        let bad = Tensor::from_vec(&[2], vec![0.0, f32::NAN]).unwrap();
        let before = ps.clone();
        let err = opt.step(&mut ps, &[("a", &ok), ("b", &bad)], 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of b"), "{err}");
        assert_eq!(ps, before);
        assert!(opt.state("a").is_none());
    }

    #[test]
    fn export_import_round_trip_and_per_parameter_steps() {
        let mut opt = RAdam::<f32>::new(RAdamConfig::default()).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("g/a", Tensor::full(&[2, 2], 1.0));
        ps.insert("g/b", Tensor::full(&[3], 1.0));
        let (ga, gb) = (Tensor::full(&[2, 2], 0.3), Tensor::full(&[3], -0.2));
        opt.step(&mut ps, &[("g/a", &ga), ("g/b", &gb)], 1e-3).unwrap();
        opt.step(&mut ps, &[("g/a", &ga)], 1e-3).unwrap();
        assert_eq!(opt.state("g/a").unwrap().step, 2);
        assert_eq!(opt.state("g/b").unwrap().step, 1);
        let back = RAdam::import(RAdamConfig::default(), &opt.export("opt/gen/"), "opt/gen/").unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn gradient_clipping_scales_update_direction() {
        let cfg = RAdamConfig { grad_clip_norm: Some(1.0), ..RAdamConfig::default() };
        let mut opt = RAdam::<f64>::new(cfg).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::zeros(&[2]));
        let g = Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap();
        opt.step(&mut ps, &[("x", &g)], 1.0).unwrap();
        let m = &opt.state("x").unwrap().m;
        assert!((m.data()[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((m.data()[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(9_999).unwrap(), 1e-4);
        assert_eq!(s.lr_at(25_000).unwrap(), 5e-5);
        assert_eq!(s.lr_at(40_000).unwrap(), 0.0);
        assert!(s.lr_at(40_001).is_err());
        let mut prev = f64::INFINITY;
        for c in (0..=40_000).step_by(97) {
            let lr = s.lr_at(c).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
