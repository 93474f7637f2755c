use crate::m2se::ParamStore;
use crate::numkernel::{KernelError, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One Adam update with decoupled weight decay on [`crate::m2se::ParamKind::Weight`] tensors.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), KernelError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(KernelError::Config(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (k, g) in grads.iter().enumerate() {
        let p = store.get(crate::m2se::ParamId(k));
        if g.shape() != p.value.shape() {
            return Err(KernelError::Shape {
                op: "adam_step",
                detail: format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
            });
        }
        if !g.is_finite() {
            return Err(KernelError::NonFinite { op: "adam_step" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - BETA1.powi(t));
    let bc2 = T::of(1.0 - BETA2.powi(t));
    let (b1, b2, eps, lr_t) = (T::of(BETA1), T::of(BETA2), T::of(ADAM_EPS), T::of(lr));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (k, g) in grads.iter().enumerate() {
        let id = crate::m2se::ParamId(k);
        let decay = if store.get(id).kind.decays() { T::of(lr * weight_decay) } else { T::zero() };
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr_t * mhat / (vhat.sqrt() + eps) - decay * p[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2se::ParamKind;
    use crate::numkernel::Tape;

    fn store(vals: &[(ParamKind, &[f64])]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (k, (kind, v)) in vals.iter().enumerate() {
            s.add(format!("p{k}"), *kind, Tensor::from_f64(&[v.len()], v).unwrap());
        }
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(&[(ParamKind::Weight, &[1.0, -2.0]), (ParamKind::Bias, &[0.5])]);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let g = vec![Tensor::zeros(&[2]), Tensor::zeros(&[1])];
        adam_step(&mut s, &g, &mut st, 0.001, 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e4] {
            let mut s = store(&[(ParamKind::Bias, &[1.0])]);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &[Tensor::from_f64(&[1], &[g]).unwrap()], &mut st, 0.01, 0.0).unwrap();
            let moved = 1.0 - s.get(crate::m2se::ParamId(0)).value.data()[0];
            assert!((moved - 0.01 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn decay_only_touches_weights() {
        let mut s = store(&[
            (ParamKind::Weight, &[1.0]),
            (ParamKind::Bias, &[1.0]),
            (ParamKind::Norm, &[1.0]),
            (ParamKind::Embedding, &[1.0]),
        ]);
        let mut st = AdamState::new(&s);
        let g: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::zeros(&[1])).collect();
        adam_step(&mut s, &g, &mut st, 0.1, 0.5).unwrap();
        let vals: Vec<f64> = s.iter().map(|(_, p)| p.value.data()[0]).collect();
        assert_eq!(vals, vec![0.95, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut s = store(&[(ParamKind::Weight, &[2.0, -1.5, 0.7])]);
        let mut st = AdamState::new(&s);
        let loss_and_grad = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape, true).unwrap();
            let x = b.var(crate::m2se::ParamId(0));
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).data()[0], g.get(x))
        };
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (l, g) = loss_and_grad(&s);
            assert!(l < last);
            last = l;
            adam_step(&mut s, &[g], &mut st, 0.1, 0.0).unwrap();
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(&[(ParamKind::Weight, &[1.0])]);
        let mut st = AdamState::new(&s);
        let before = s.clone();
        let r = adam_step(&mut s, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &mut st, 0.1, 0.0);
        assert!(matches!(r, Err(KernelError::NonFinite { .. })));
        assert_eq!(s, before);
        assert_eq!(st.step, 0);
    }
}
