use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::unet::ParamStore;

/// What an optimizer step did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients of the named layer were not finite; nothing changed.
    Skipped { layer: String },
}

/// Parameter update rule. Implementations must be deterministic: every
/// worker applies the same step to its own replica.
pub trait Optimizer<T: Real>: Clone + Send + 'static {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> StepOutcome;
    fn learning_rate(&self) -> f64;
    /// Named state tensors, for checkpoints.
    fn state(&self) -> Vec<(String, Tensor<T>)>;
    fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()>;
}

/// SGD with heavy-ball momentum: `v = m v + g; p = p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamStore<T>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64, like: &ParamStore<T>) -> Self {
        let mut velocity = like.clone();
        velocity.assign_flat(&vec![T::zero(); like.param_count()]).expect("same size");
        SgdMomentum { lr, momentum, velocity }
    }

    pub fn velocity(&self) -> &ParamStore<T> {
        &self.velocity
    }
}

impl<T: Real> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> StepOutcome {
        if let Some(layer) = grads.first_non_finite() {
            log::warn!("non-finite gradient in layer {layer}; skipping step");
            return StepOutcome::Skipped {
                layer: layer.to_string(),
            };
        }
        let (lr, m) = (T::from_f64(self.lr), T::from_f64(self.momentum));
        for ((p, v), g) in params
            .convs_mut()
            .iter_mut()
            .zip(self.velocity.convs_mut())
            .zip(grads.convs())
        {
            for (pt, vt, gt) in [(&mut p.weight, &mut v.weight, &g.weight), (&mut p.bias, &mut v.bias, &g.bias)] {
                for ((pp, vv), &gg) in pt.data_mut().iter_mut().zip(vt.data_mut()).zip(gt.data()) {
                    *vv = m * *vv + gg;
                    *pp -= lr * *vv;
                }
            }
        }
        StepOutcome::Applied
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.velocity
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("velocity/{n}"), t.clone()))
            .collect()
    }

    fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()> {
        check_names(&state, &self.state())?;
        let flat: Vec<T> = state.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        self.velocity.assign_flat(&flat)
    }
}

/// Adam with bias correction. An adaptive alternative to [`SgdMomentum`]
/// that tolerates the badly scaled gradients of an unnormalised U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, like: &ParamStore<T>) -> Self {
        let mut zero = like.clone();
        zero.assign_flat(&vec![T::zero(); like.param_count()]).expect("same size");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zero.clone(),
            v: zero,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> StepOutcome {
        if let Some(layer) = grads.first_non_finite() {
            log::warn!("non-finite gradient in layer {layer}; skipping step");
            return StepOutcome::Skipped {
                layer: layer.to_string(),
            };
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let t = self.t as i32;
        let step = T::from_f64(self.lr / (1.0 - self.beta1.powi(t)));
        let vscale = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = T::from_f64(self.eps);
        for (((p, m), v), g) in params
            .convs_mut()
            .iter_mut()
            .zip(self.m.convs_mut())
            .zip(self.v.convs_mut())
            .zip(grads.convs())
        {
            for (pt, mt, vt, gt) in [
                (&mut p.weight, &mut m.weight, &mut v.weight, &g.weight),
                (&mut p.bias, &mut m.bias, &mut v.bias, &g.bias),
            ] {
                let it = pt.data_mut().iter_mut().zip(mt.data_mut()).zip(vt.data_mut()).zip(gt.data());
                for (((pp, mm), vv), &gg) in it {
                    *mm = b1 * *mm + c1 * gg;
                    *vv = b2 * *vv + c2 * gg * gg;
                    *pp -= step * *mm / ((*vv * vscale).sqrt() + eps);
                }
            }
        }
        StepOutcome::Applied
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam/t".to_string(), Tensor::from_vec(&[1], vec![T::from_f64(self.t as f64)]).expect("1 element"))];
        for (tag, store) in [("m", &self.m), ("v", &self.v)] {
            out.extend(store.named_tensors().into_iter().map(|(n, t)| (format!("{tag}/{n}"), t.clone())));
        }
        out
    }

    fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected = self.state();
        check_names(&state, &expected)?;
        let n = self.m.param_count();
        let flat: Vec<T> = state[1..].iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        self.t = state[0].1.data()[0].as_f64() as u64;
        self.m.assign_flat(&flat[..n])?;
        self.v.assign_flat(&flat[n..])
    }
}

fn check_names<T: Real>(state: &[(String, Tensor<T>)], expected: &[(String, Tensor<T>)]) -> Result<()> {
    if state.len() != expected.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} tensors, expected {}",
            state.len(),
            expected.len()
        )));
    }
    for ((name, t), (ename, et)) in state.iter().zip(expected) {
        if name != ename || t.shape() != et.shape() {
            return Err(Error::Config(format!("optimizer state `{name}` does not match `{ename}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvParams;

    fn store(v: f64) -> ParamStore<f64> {
        let mut c = ConvParams::zeros(1, 1, 1);
        c.weight.data_mut()[0] = v;
        ParamStore::from_parts(vec!["l".into()], vec![c]).unwrap()
    }

    #[test]
    fn zero_grads_keep_params() {
        let mut p = store(0.7);
        let mut opt = SgdMomentum::new(0.1, 0.9, &p);
        assert_eq!(opt.step(&mut p, &store(0.0)), StepOutcome::Applied);
        assert_eq!(p.flatten(), vec![0.7, 0.0]);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = store(3.0);
        let mut opt = SgdMomentum::new(1.0, 0.0, &p);
        opt.step(&mut p, &store(1.0));
        assert_eq!(p.flatten()[0], 2.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store(0.0);
        let mut opt = SgdMomentum::new(0.5, 0.5, &p);
        opt.step(&mut p, &store(1.0));
        opt.step(&mut p, &store(1.0));
        // v1 = 1, p1 = -0.5; v2 = 1.5, p2 = -1.25.
        assert_eq!(p.flatten()[0], -1.25);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = store(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9, &p);
        let out = opt.step(&mut p, &store(f64::NAN));
        assert_eq!(out, StepOutcome::Skipped { layer: "l".into() });
        assert_eq!(p.flatten()[0], 1.0);
        assert!(opt.velocity().flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 on step one, so the move is lr * g/|g|.
        let mut p = store(1.0);
        let mut opt = Adam::new(0.01, &p);
        opt.step(&mut p, &store(-4.0));
        assert!((p.flatten()[0] - 1.01).abs() < 1e-9);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adam_state_roundtrips() {
        let mut p = store(1.0);
        let mut a = Adam::new(0.01, &p);
        for g in [0.5, -0.2, 0.9] {
            a.step(&mut p, &store(g));
        }
        let mut b = Adam::new(0.01, &store(0.0));
        b.load_state(a.state()).unwrap();
        assert_eq!(a, b);
        assert!(b.load_state(SgdMomentum::new(0.1, 0.9, &p).state()).is_err());
    }
}
