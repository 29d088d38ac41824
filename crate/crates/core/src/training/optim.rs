use crate::diffcore::{ParamId, ParamStore, Real, Tensor};

/// Decoupled-weight-decay Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Updates skipped because a gradient was not finite.
    pub skipped: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    lr_scale: Vec<f64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            skipped: 0,
            m: zeros(),
            v: zeros(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the step size of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    /// Applies one update from the gradients held in `store`. Returns false,
    /// leaving parameters and moments untouched, when any gradient is not
    /// finite.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> bool {
        let params = store.params_mut();
        assert_eq!(params.len(), self.m.len(), "optimizer built for another store");
        if params.iter().any(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            self.skipped += 1;
            log::warn!("non-finite gradient, update {} skipped", self.step + 1);
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, m), v), &scale) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&self.lr_scale) {
            let lr = lr * scale;
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                md[j] = (self.beta1 * md[j] as f64 + (1.0 - self.beta1) * gj) as Real;
                vd[j] = (self.beta2 * vd[j] as f64 + (1.0 - self.beta2) * gj * gj) as Real;
                let mhat = md[j] as f64 / bc1;
                let vhat = vd[j] as f64 / bc2;
                let wj = *w as f64;
                *w = (wj - lr * self.weight_decay * wj - lr * mhat / (vhat.sqrt() + self.eps)) as Real;
            }
        }
        true
    }
}

/// Global ℓ2 norm of every gradient in `store`.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `c`; returns the
/// norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, c: f64) -> f64 {
    assert!(c > 0.0, "clip norm must be positive");
    let norm = grad_norm(store);
    if norm > c && norm.is_finite() {
        let s = (c / norm) as Real;
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Learning-rate multiplier decaying linearly from 1 at epoch 0 to `floor`
/// at `max_epochs`, constant afterwards.
pub fn lr_multiplier(epoch: usize, max_epochs: usize, floor: f64) -> f64 {
    if max_epochs == 0 {
        return 1.0;
    }
    let frac = epoch.min(max_epochs) as f64 / max_epochs as f64;
    1.0 - (1.0 - floor) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping. A non-finite metric never counts as an
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub goal: Goal,
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(goal: Goal, patience: usize) -> Self {
        EarlyStopping {
            goal,
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopSignal {
        let better = metric.is_finite()
            && match (self.best, self.goal) {
                (None, _) => true,
                (Some(b), Goal::Minimize) => metric < b,
                (Some(b), Goal::Maximize) => metric > b,
            };
        if better {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopSignal::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ModelRng;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::{Rng, SeedableRng};

    fn scalar_store(w: Real) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![w]));
        s
    }

    fn set_grad(s: &mut ParamStore, g: Real) {
        s.params_mut()[0].grad.data_mut()[0] = g;
    }

    fn value(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().value.data()[0] as f64
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            assert!(opt.update(&mut s, 1e-2));
        }
        assert_eq!(value(&s), 0.7);
    }

    #[test]
    fn step_scale_multiplies_one_parameter() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![1], vec![1.0]));
        let b = s.add("b", Tensor::new(vec![1], vec![1.0]));
        let mut opt = AdamW::new(&s, 0.0);
        opt.set_lr_scale(b, 10.0);
        for p in s.params_mut() {
            p.grad.data_mut()[0] = 0.3;
        }
        opt.update(&mut s, 1e-3);
        // the first bias-corrected step is lr · g/|g|
        assert!((s.value(a).data()[0] as f64 - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((s.value(b).data()[0] as f64 - (1.0 - 1e-2)).abs() < 1e-9);
    }

    #[test]
    fn three_steps_match_a_scalar_trace() {
        let grads = [0.5, -1.5, 2.0];
        let (lr, wd) = (0.01, 0.01);
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, wd);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            set_grad(&mut s, g as Real);
            opt.update(&mut s, lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (k + 1) as i32;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w = w - lr * wd * w - lr * mh / (vh.sqrt() + 1e-8);
            assert!((value(&s) - w).abs() < 1e-15, "step {t}: {} vs {w}", value(&s));
        }
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(&s, 0.1);
        for k in 1..=4 {
            set_grad(&mut s, 0.0);
            opt.update(&mut s, 0.5);
            assert!((value(&s) - 2.0 * 0.95f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradients_skip_the_step() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, 0.01);
        set_grad(&mut s, Real::NAN);
        assert!(!opt.update(&mut s, 0.1));
        assert_eq!(value(&s), 1.0);
        assert_eq!((opt.step, opt.skipped), (0, 1));
    }

    #[test]
    fn clipping_closed_forms() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]));
        s.add("b", Tensor::zeros(&[1]));
        let put = |s: &mut ParamStore, v: [Real; 3]| {
            s.params_mut()[0].grad.data_mut().copy_from_slice(&v[..2]);
            s.params_mut()[1].grad.data_mut()[0] = v[2];
        };
        put(&mut s, [0.3, 0.4, 0.0]);
        assert!((clip_global_norm(&mut s, 1.0) - 0.5).abs() < 1e-15);
        assert!((grad_norm(&s) - 0.5).abs() < 1e-15);
        put(&mut s, [1.2, 1.6, 0.0]);
        clip_global_norm(&mut s, 1.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn post_clip_norm_is_min_of_norm_and_limit(
            g in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in 0.1f64..4.0,
        ) {
            let mut s = ParamStore::new();
            s.add("g", Tensor::new(vec![g.len()], g.iter().map(|&v| v as Real).collect()));
            s.params_mut()[0].grad.data_mut().iter_mut().zip(&g).for_each(|(d, &v)| *d = v as Real);
            let before: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            clip_global_norm(&mut s, c);
            let after: f64 = s.iter().next().unwrap().grad.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((after - before.min(c)).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_anchors() {
        assert_eq!(lr_multiplier(0, 50, 0.1), 1.0);
        assert!((lr_multiplier(50, 50, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_multiplier(25, 50, 0.1) - 0.55).abs() < 1e-15);
        assert!((lr_multiplier(80, 50, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut es = EarlyStopping::new(Goal::Minimize, 1);
        assert_eq!(es.observe(0, 1.0), StopSignal::Improved);
        assert_eq!(es.observe(1, 2.0), StopSignal::Stop);
        let mut up = EarlyStopping::new(Goal::Maximize, 2);
        assert_eq!(up.observe(0, 0.1), StopSignal::Improved);
        assert_eq!(up.observe(1, f64::NAN), StopSignal::Continue);
        assert_eq!(up.observe(2, 0.3), StopSignal::Improved);
        assert_eq!(up.best_epoch, 2);
    }

    #[test]
    fn random_quadratic_descends() {
        let mut rng = ModelRng::seed_from_u64(3);
        let target: Vec<Real> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[6]));
        let mut opt = AdamW::new(&s, 0.0);
        let loss = |s: &ParamStore| -> f64 {
            s.iter().next().unwrap().value.data().iter().zip(&target).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
        };
        let start = loss(&s);
        for _ in 0..200 {
            let p = &mut s.params_mut()[0];
            let w = p.value.data().to_vec();
            p.grad.data_mut().iter_mut().zip(w.iter().zip(&target)).for_each(|(g, (a, b))| *g = 2.0 * (a - b));
            opt.update(&mut s, 0.05);
        }
        assert!(loss(&s) < 1e-3 * start);
    }
}
