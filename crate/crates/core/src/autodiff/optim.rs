//! Adam updates and finite-difference gradient verification.

use super::{Gradients, ParamId, ParamStore, Tensor};

/// Adam hyperparameters. Defaults follow the usual constants.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter, plus the step
/// counter used for bias correction.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| Tensor::zeros(e.tensor.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter, in place. Missing
/// gradients count as zero.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, h: &AdamHyper) {
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let idx = id.index();
        let grad = grads.get(id);
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let theta = store.tensor_mut(id);
        for i in 0..theta.len() {
            let g = grad.map_or(0.0, |t| t.data()[i]);
            let mi = h.beta1 * m.data()[i] + (1.0 - h.beta1) * g;
            let vi = h.beta2 * v.data()[i] + (1.0 - h.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            theta.data_mut()[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
}

/// Result of checking one parameter group against finite differences.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compare `analytic` gradients against central finite differences of
/// `loss`, coordinate by coordinate. At most `max_coords` evenly spaced
/// coordinates are sampled per parameter. The relative error is
/// `|a - n| / max(1, |a|, |n|)`.
///
/// `loss` must be deterministic (no dropout) for the differences to mean
/// anything. Parameters are perturbed in place and restored exactly.
pub fn grad_check<F>(
    store: &mut ParamStore,
    loss: F,
    analytic: &Gradients,
    eps: f64,
    max_coords: usize,
) -> Vec<GroupCheck>
where
    F: Fn(&ParamStore) -> f64,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.tensor(id).len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            (0..max_coords).map(|k| k * len / max_coords).collect()
        };
        let mut check = GroupCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            coords_checked: coords.len(),
        };
        for &i in &coords {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + eps;
            let up = loss(store);
            store.tensor_mut(id).data_mut()[i] = orig - eps;
            let down = loss(store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        out.push(check);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Gradients, ParamRef};

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0), true);
        let mut grads = Gradients::new(&store);
        grads.accumulate(&store, ParamRef { id: p, row: None }, &Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);
        let h = AdamHyper::default();
        adam_step(&mut store, &grads, &mut state, &h);
        // bias-corrected m_hat = v_hat = 1 at t = 1
        let expect = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((store.tensor(p).item() - expect).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_grad_fresh_state_leaves_params() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, -2.0]), true);
        let grads = Gradients::new(&store);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, &AdamHyper::default());
        assert_eq!(store.tensor(p).data(), &[1.0, -2.0]);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // Constant gradient g; track the Adam recurrence by hand.
        let g = 0.5;
        let h = AdamHyper::default();
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(0.0), true);
        let mut grads = Gradients::new(&store);
        grads.accumulate(&store, ParamRef { id: p, row: None }, &Tensor::scalar(g));
        let mut state = AdamState::new(&store);

        let mut theta = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let m_hat = m / (1.0 - h.beta1.powi(t as i32));
            let v_hat = v / (1.0 - h.beta2.powi(t as i32));
            theta -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            adam_step(&mut store, &grads, &mut state, &h);
        }
        assert!((store.tensor(p).item() - theta).abs() < 1e-15);
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        // loss = ||w||^2 / 2, gradient = w
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -1.7, 2.2]), true);
        let mut grads = Gradients::new(&store);
        let wt = store.tensor(w).clone();
        grads.accumulate(&store, ParamRef { id: w, row: None }, &wt);
        let checks = grad_check(
            &mut store,
            |s| s.tensor(w).sum_squares() / 2.0,
            &grads,
            1e-5,
            usize::MAX,
        );
        assert_eq!(checks.len(), 1);
        assert!(checks[0].max_rel_err < 1e-9, "err {}", checks[0].max_rel_err);
    }
}
