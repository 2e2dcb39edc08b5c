use super::{Real, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<T: Real>(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. A `None` gradient counts as zero.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        self.step_refs(&mut params.iter_mut().collect::<Vec<_>>(), grads)
    }

    /// [`AdamState::step`] over parameters gathered from several owners.
    pub fn step_refs<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            bail!(
                Tensor,
                "adam state tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() {
                bail!(Tensor, "adam parameter {} changed size to {:?}", i, p.shape());
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    bail!(
                        Tensor,
                        "adam gradient {:?} does not match parameter {:?}",
                        g.shape(),
                        p.shape()
                    );
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let gd = g.map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = gd.map_or(0.0, |g| g[j].as_f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let delta = lr * mhat / (vhat.sqrt() + epsilon);
                *w = T::cast(w.as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor<f32> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![one(1.0)];
        let g = one(0.5);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[Some(&g)]).unwrap();
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![one(0.25), Tensor::full(&[2, 2], 3.0)];
        let zeros = [one(0.0), Tensor::zeros(&[2, 2])];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            st.step(&mut p, &[Some(&zeros[0]), Some(&zeros[1])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn parameters_update_independently_of_order() {
        let (a, b) = (one(1.0), one(-2.0));
        let (ga, gb) = (one(0.3), one(-1.7));
        let mut p1 = vec![a.clone(), b.clone()];
        let mut p2 = vec![b, a];
        let mut s1 = AdamState::new(AdamConfig::default(), &p1);
        let mut s2 = AdamState::new(AdamConfig::default(), &p2);
        for _ in 0..3 {
            s1.step(&mut p1, &[Some(&ga), Some(&gb)]).unwrap();
            s2.step(&mut p2, &[Some(&gb), Some(&ga)]).unwrap();
        }
        assert_eq!(p1[0], p2[1]);
        assert_eq!(p1[1], p2[0]);
    }

    #[test]
    fn zero_betas_reduce_to_sign_descent() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-12,
        };
        let mut p = vec![Tensor::<f64>::new(&[3], vec![0.0, 0.0, 0.0]).unwrap()];
        let g = Tensor::<f64>::new(&[3], vec![3.7, -0.002, 1e-3]).unwrap();
        let mut st = AdamState::new(cfg, &p);
        st.step(&mut p, &[Some(&g)]).unwrap();
        for (w, gv) in p[0].data().iter().zip(g.data()) {
            assert!((w + 0.01 * gv.signum()).abs() < 1e-9, "{w} vs {gv}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![one(1.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = Tensor::<f32>::zeros(&[2]);
        assert!(st.step(&mut p, &[Some(&g)]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
