//! AdamW with decoupled weight decay and a multi-step learning-rate decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::param::ParamStore;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Only parameters present in `grads` move; decay is
    /// decoupled (applied to the parameter directly, scaled by `lr`).
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

/// Step-wise decay: the base rate is multiplied by `gamma` at each
/// milestone, where milestones are fractions of the total step count.
pub fn multistep_lr(base: f64, step: u64, total: u64, milestones: &[f64], gamma: f64) -> f64 {
    let mut lr = base;
    for &frac in milestones {
        if (step as f64) >= frac * total as f64 {
            lr *= gamma;
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w".into(), arr1(&[1.0, -1.0]).into_dyn());
        let mut opt = AdamW::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), arr1(&[1.0, -1.0]).into_dyn());
        opt.apply(&mut store, &grads, 0.1);
        let w = store.get("w").unwrap();
        assert!(w[[0]] < 1.0);
        assert!(w[[1]] > -1.0);
    }

    #[test]
    fn decay_shrinks_unused_direction() {
        let mut store = ParamStore::new();
        store.insert("w".into(), arr1(&[2.0]).into_dyn());
        let mut opt = AdamW::new(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), arr1(&[0.0]).into_dyn());
        opt.apply(&mut store, &grads, 0.1);
        let w = store.get("w").unwrap();
        assert!((w[[0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn multistep_hits_both_milestones() {
        let base = 1e-4;
        assert_eq!(multistep_lr(base, 0, 100, &[0.6, 0.85], 0.1), base);
        assert!((multistep_lr(base, 60, 100, &[0.6, 0.85], 0.1) - base * 0.1).abs() < 1e-18);
        assert!((multistep_lr(base, 90, 100, &[0.6, 0.85], 0.1) - base * 0.01).abs() < 1e-18);
    }
}
