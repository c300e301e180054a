use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; `grads` is in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;

    fn store() -> ParamStore {
        let mut b = ParamBuilder::new(1);
        b.uniform("w", &[3, 2], 1.0);
        b.uniform("b", &[2], 1.0);
        b.finish()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(&s, 0.9, 0.999, 1e-8);
        let zeros: Vec<Vec<f64>> = s.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        for _ in 0..3 {
            opt.step(&mut s, &zeros, 1e-3);
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(&s, 0.9, 0.999, 1e-8);
        let grads: Vec<Vec<f64>> = s
            .iter()
            .map(|p| {
                (0..p.value.numel())
                    .map(|i| if i % 2 == 0 { 3.0 } else { -0.5 })
                    .collect()
            })
            .collect();
        opt.step(&mut s, &grads, 0.01);
        for ((a, b), g) in s.iter().zip(before.iter()).zip(&grads) {
            for ((x, y), g) in a.value.data().iter().zip(b.value.data()).zip(g) {
                let want = y - 0.01 * g.signum();
                assert!((x - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = store();
        let mut opt = Adam::new(&s, 0.9, 0.999, 1e-8);
        for _ in 0..3000 {
            let g: Vec<Vec<f64>> = s
                .iter()
                .map(|p| p.value.data().iter().map(|x| 2.0 * (x - 0.25)).collect())
                .collect();
            opt.step(&mut s, &g, 0.01);
        }
        assert!(s
            .iter()
            .all(|p| p.value.data().iter().all(|x| (x - 0.25).abs() < 1e-3)));
    }
}
