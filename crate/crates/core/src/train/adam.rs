use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, (p, g)) in params.values_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
                *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row_vector(&[w]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::row_vector(&[0.5]).unwrap()];
        s.step(&mut p, &g, 0.01).unwrap();
        let m1 = s.first_moment()[0].data()[0];
        let before = p.at(0).data()[0];
        let zero = vec![Tensor::row_vector(&[0.0]).unwrap()];
        s.step(&mut p, &zero, 0.01).unwrap();
        assert!((s.first_moment()[0].data()[0] - BETA1 * m1).abs() < 1e-18);
        // The decayed first moment still moves w; a fresh state does not.
        assert_ne!(p.at(0).data()[0], before);
        let mut q = single(0.7);
        let mut fresh = AdamState::new(&q);
        fresh.step(&mut q, &zero, 0.01).unwrap();
        assert_eq!(q.at(0).data()[0], 0.7);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.5, 40.0, -3.0] {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p);
            s.step(&mut p, &[Tensor::row_vector(&[g]).unwrap()], 0.01).unwrap();
            let w = p.at(0).data()[0];
            assert!((w + 0.01 * g.signum()).abs() < 1e-6, "g={g} w={w}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let w = p.at(0).data()[0];
            s.step(&mut p, &[Tensor::row_vector(&[2.0 * w]).unwrap()], 0.1).unwrap();
        }
        assert!(p.at(0).data()[0].abs() < 0.1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &[], 0.1).is_err());
        assert!(s.step(&mut p, &[Tensor::row_vector(&[1.0, 2.0]).unwrap()], 0.1).is_err());
    }
}
