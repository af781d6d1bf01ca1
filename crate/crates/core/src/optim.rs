use ndarray::{Array2, Zip};

/// Adam with bias correction. Moment buffers are allocated per slot on
/// first use; callers keep slot indices stable across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    slots: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the shared timestep; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn update(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        assert_eq!(param.dim(), grad.dim(), "adam: gradient shape mismatch");
        assert!(self.t > 0, "adam: begin_step not called");
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let (m, v) = self.slots[slot]
            .get_or_insert_with(|| (Array2::zeros(param.dim()), Array2::zeros(param.dim())));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}
