use crate::error::{GlotError, Result};
use crate::numcore::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads[i]` belongs to the i-th parameter; `None` reads as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(GlotError::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(GlotError::shape("adam_step", format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.7);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Some(Tensor::vector(vec![0.0]).unwrap())], 0.1).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = store(1.0);
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[Some(Tensor::vector(vec![g]).unwrap())], 1e-3).unwrap();
            let moved = s.get(s.ids().next().unwrap()).item() - 1.0;
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn repeated_runs_are_identical() {
        let run = || {
            let mut s = store(0.3);
            let mut adam = Adam::new(&s);
            for k in 0..10 {
                let g = Tensor::vector(vec![(k as f64).sin()]).unwrap();
                adam.step(&mut s, &[Some(g)], 0.01).unwrap();
            }
            s.get(s.ids().next().unwrap()).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
