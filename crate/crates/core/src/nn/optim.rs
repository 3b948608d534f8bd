use super::params::{ParamGroup, ParamId, ParamStore};
use super::Tensor;

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub decoder: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            encoder: lr,
            decoder: lr,
            head: lr,
        }
    }

    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Head => self.head,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Restore optimizer state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) {
        assert_eq!(first.len(), self.first.len());
        assert_eq!(second.len(), self.second.len());
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// One update. `grads` holds one entry per parameter (`None` = untouched this step).
    ///
    /// A group with learning rate zero is skipped outright, so its parameters stay bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], rates: &GroupRates) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let id = ParamId(i);
            let lr = rates.for_group(store.get(id).group);
            let Some(grad) = grad else { continue };
            if lr == 0.0 {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad.data()[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut pj = p[j] as f64;
                pj -= lr * self.weight_decay * pj;
                pj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                p[j] = pj as f32;
            }
        }
    }
}

/// Cosine annealing from `start` at step 0 to `end` at step `total - 1`.
pub fn cosine_lr(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}
