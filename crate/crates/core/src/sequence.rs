//! Sequential BiLSTM over the tree encoder's outputs and the affine
//! projection to per-label scores.

use crate::autodiff::{Graph, ParamId, ParamLeaves, Tensor, Value};

/// One direction's LSTM weights: input matrices `W` (d x input_dim),
/// recurrent matrices `U` (d x d) and biases (length d), one per gate in
/// input/output/forget/update order.
#[derive(Clone, Debug)]
pub struct LstmDirParams {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

/// Both directions plus the shared layer geometry.
#[derive(Clone, Debug)]
pub struct SeqLstmParams {
    pub fwd: LstmDirParams,
    pub bwd: LstmDirParams,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// One LSTM step: `(h, c) = step(x, h_prev, c_prev)`.
pub fn lstm_step(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    p: &LstmDirParams,
    x: Value,
    h_prev: Value,
    c_prev: Value,
) -> (Value, Value) {
    let gate = |g: &mut Graph, leaves: &mut ParamLeaves, k: usize, tanh: bool| -> Value {
        let w = leaves.leaf(g, p.w[k]);
        let u = leaves.leaf(g, p.u[k]);
        let b = leaves.leaf(g, p.b[k]);
        let wx = g.matvec(w, x);
        let uh = g.matvec(u, h_prev);
        let lin = g.add(wx, uh);
        let z = g.add(lin, b);
        if tanh {
            g.tanh_(z)
        } else {
            g.sigmoid(z)
        }
    };
    let i = gate(g, leaves, 0, false);
    let o = gate(g, leaves, 1, false);
    let f = gate(g, leaves, 2, false);
    let u = gate(g, leaves, 3, true);

    let iu = g.hadamard(i, u);
    let fc = g.hadamard(f, c_prev);
    let c = g.add(iu, fc);
    let tc = g.tanh_(c);
    let h = g.hadamard(o, tc);
    (h, c)
}

/// Run both directions from zero initial states and concatenate the
/// per-position hidden states: `out[j] = [fwd_h_j ; bwd_h_j]` (2d each).
pub fn bilstm(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    params: &SeqLstmParams,
    inputs: &[Value],
) -> Vec<Value> {
    assert!(!inputs.is_empty(), "bilstm over an empty sentence");
    let d = params.hidden_dim;
    let run = |g: &mut Graph, leaves: &mut ParamLeaves, dir: &LstmDirParams, rev: bool| {
        let mut h = g.constant(Tensor::zeros(&[d]));
        let mut c = g.constant(Tensor::zeros(&[d]));
        let mut out = Vec::with_capacity(inputs.len());
        let idx: Vec<usize> = if rev {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for j in idx {
            let (nh, nc) = lstm_step(g, leaves, dir, inputs[j], h, c);
            h = nh;
            c = nc;
            out.push(nh);
        }
        if rev {
            out.reverse();
        }
        out
    };
    let fwd = run(g, leaves, &params.fwd, false);
    let bwd = run(g, leaves, &params.bwd, true);
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat(f, b))
        .collect()
}

/// Affine projection of per-token features to label scores (no
/// nonlinearity): `scores = W x + b`.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    /// `[num_labels, input_dim]`
    pub w: ParamId,
    /// `[num_labels]`
    pub b: ParamId,
}

pub fn project(g: &mut Graph, leaves: &mut ParamLeaves, p: &ProjectionParams, x: Value) -> Value {
    let w = leaves.leaf(g, p.w);
    let b = leaves.leaf(g, p.b);
    let wx = g.matvec(w, x);
    g.add(wx, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_dir(store: &mut ParamStore, d: usize, input: usize, prefix: &str) -> LstmDirParams {
        let tags = ["i", "o", "f", "u"];
        LstmDirParams {
            w: tags.map(|t| store.add(format!("{prefix}.w.{t}"), Tensor::zeros(&[d, input]), true)),
            u: tags.map(|t| store.add(format!("{prefix}.u.{t}"), Tensor::zeros(&[d, d]), true)),
            b: tags.map(|t| store.add(format!("{prefix}.b.{t}"), Tensor::zeros(&[d]), false)),
        }
    }

    fn rand_dir(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d: usize,
        input: usize,
        prefix: &str,
    ) -> LstmDirParams {
        let tags = ["i", "o", "f", "u"];
        LstmDirParams {
            w: tags.map(|t| {
                store.add(
                    format!("{prefix}.w.{t}"),
                    Tensor::uniform(&[d, input], -0.5, 0.5, rng),
                    true,
                )
            }),
            u: tags.map(|t| {
                store.add(
                    format!("{prefix}.u.{t}"),
                    Tensor::uniform(&[d, d], -0.5, 0.5, rng),
                    true,
                )
            }),
            b: tags.map(|t| {
                store.add(
                    format!("{prefix}.b.{t}"),
                    Tensor::uniform(&[d], -0.5, 0.5, rng),
                    false,
                )
            }),
        }
    }

    #[test]
    fn zero_params_step_is_zero() {
        let mut store = ParamStore::new();
        let d = 3;
        let p = zero_dir(&mut store, d, 6, "f");
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 0.1, 0.2, 0.3]));
        let h0 = g.constant(Tensor::zeros(&[d]));
        let c0 = g.constant(Tensor::zeros(&[d]));
        let (h, c) = lstm_step(&mut g, &mut leaves, &p, x, h0, c0);
        assert_eq!(g.value(h).data(), &[0.0; 3]);
        assert_eq!(g.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn bias_only_step_matches_closed_form() {
        // zero x, zero h_prev: gates depend on biases alone
        let mut store = ParamStore::new();
        let d = 2;
        let p = zero_dir(&mut store, d, 4, "f");
        let biases = [0.3, -0.7];
        for k in 0..4 {
            for (slot, &v) in store.tensor_mut(p.b[k]).data_mut().iter_mut().zip(&biases) {
                *slot = v + k as f64 * 0.1;
            }
        }
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::zeros(&[4]));
        let h0 = g.constant(Tensor::zeros(&[d]));
        let c0 = g.constant(Tensor::zeros(&[d]));
        let (h, c) = lstm_step(&mut g, &mut leaves, &p, x, h0, c0);
        for (k, &bias) in biases.iter().enumerate() {
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let i = sig(bias);
            let o = sig(bias + 0.1);
            let u = (bias + 0.3f64).tanh();
            let c_want = i * u; // f * c_prev = 0
            let h_want = o * c_want.tanh();
            assert!((g.value(c).data()[k] - c_want).abs() < 1e-12);
            assert!((g.value(h).data()[k] - h_want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gates_carry_memory() {
        // f-gate bias +50, i-gate bias -50: c ~= c_prev
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = 3;
        let p = rand_dir(&mut store, &mut rng, d, 3, "f");
        for b in store.tensor_mut(p.b[2]).data_mut() {
            *b = 50.0;
        }
        for b in store.tensor_mut(p.b[0]).data_mut() {
            *b = -50.0;
        }
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::uniform(&[3], -1.0, 1.0, &mut rng));
        let h0 = g.constant(Tensor::zeros(&[d]));
        let c_prev = [0.4, -0.9, 1.3];
        let c0 = g.constant(Tensor::vector(c_prev.to_vec()));
        let (_, c) = lstm_step(&mut g, &mut leaves, &p, x, h0, c0);
        for (got, want) in g.value(c).data().iter().zip(&c_prev) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn bilstm_zero_params_zero_output() {
        let mut store = ParamStore::new();
        let d = 3;
        let params = SeqLstmParams {
            fwd: zero_dir(&mut store, d, 2 * d, "fwd"),
            bwd: zero_dir(&mut store, d, 2 * d, "bwd"),
            input_dim: 2 * d,
            hidden_dim: d,
        };
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::uniform(
            &[2 * d],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let out = bilstm(&mut g, &mut leaves, &params, &[x]);
        assert_eq!(out.len(), 1);
        assert_eq!(g.value(out[0]).data(), &[0.0; 6]);
    }

    #[test]
    fn bilstm_equals_manual_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let d = 3;
        let input = 4;
        let params = SeqLstmParams {
            fwd: rand_dir(&mut store, &mut rng, d, input, "fwd"),
            bwd: rand_dir(&mut store, &mut rng, d, input, "bwd"),
            input_dim: input,
            hidden_dim: d,
        };
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let xs: Vec<Value> = (0..3)
            .map(|_| {
                let t = Tensor::uniform(&[input], -1.0, 1.0, &mut rng);
                g.constant(t)
            })
            .collect();
        let out = bilstm(&mut g, &mut leaves, &params, &xs);

        let zero = g.constant(Tensor::zeros(&[d]));
        let (f1, fc1) = lstm_step(&mut g, &mut leaves, &params.fwd, xs[0], zero, zero);
        let (f2, fc2) = lstm_step(&mut g, &mut leaves, &params.fwd, xs[1], f1, fc1);
        let (f3, _) = lstm_step(&mut g, &mut leaves, &params.fwd, xs[2], f2, fc2);
        let (b3, bc3) = lstm_step(&mut g, &mut leaves, &params.bwd, xs[2], zero, zero);
        let (b2, bc2) = lstm_step(&mut g, &mut leaves, &params.bwd, xs[1], b3, bc3);
        let (b1, _) = lstm_step(&mut g, &mut leaves, &params.bwd, xs[0], b2, bc2);

        let manual = [(f1, b1), (f2, b2), (f3, b3)];
        for (j, (f, b)) in manual.into_iter().enumerate() {
            let want = g.concat(f, b);
            assert_eq!(g.value(out[j]).data(), g.value(want).data());
            for &x in g.value(out[j]).data() {
                assert!(x.abs() < 1.0);
            }
        }
    }

    #[test]
    fn reversed_input_swaps_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::new();
        let d = 3;
        let input = 4;
        let fwd = rand_dir(&mut store, &mut rng, d, input, "fwd");
        let bwd = rand_dir(&mut store, &mut rng, d, input, "bwd");
        let params = SeqLstmParams {
            fwd: fwd.clone(),
            bwd: bwd.clone(),
            input_dim: input,
            hidden_dim: d,
        };
        let swapped = SeqLstmParams {
            fwd: bwd,
            bwd: fwd,
            input_dim: input,
            hidden_dim: d,
        };
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let xs: Vec<Value> = (0..4)
            .map(|_| {
                let t = Tensor::uniform(&[input], -1.0, 1.0, &mut rng);
                g.constant(t)
            })
            .collect();
        let out = bilstm(&mut g, &mut leaves, &params, &xs);
        let rev_xs: Vec<Value> = xs.iter().rev().cloned().collect();
        let out_rev = bilstm(&mut g, &mut leaves, &swapped, &rev_xs);
        let n = xs.len();
        for j in 0..n {
            let a = g.value(out[j]).data();
            let b = g.value(out_rev[n - 1 - j]).data();
            for k in 0..d {
                assert!((a[k] - b[d + k]).abs() < 1e-12);
                assert!((a[d + k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncation_keeps_forward_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut store = ParamStore::new();
        let d = 3;
        let input = 4;
        let params = SeqLstmParams {
            fwd: rand_dir(&mut store, &mut rng, d, input, "fwd"),
            bwd: rand_dir(&mut store, &mut rng, d, input, "bwd"),
            input_dim: input,
            hidden_dim: d,
        };
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let xs: Vec<Value> = (0..5)
            .map(|_| {
                let t = Tensor::uniform(&[input], -1.0, 1.0, &mut rng);
                g.constant(t)
            })
            .collect();
        let full = bilstm(&mut g, &mut leaves, &params, &xs);
        let short = bilstm(&mut g, &mut leaves, &params, &xs[..3]);
        assert_eq!(full.len(), 5);
        assert_eq!(short.len(), 3);
        for j in 0..3 {
            // forward halves agree on the shared prefix
            assert_eq!(
                &g.value(full[j]).data()[..d],
                &g.value(short[j]).data()[..d]
            );
        }
    }

    #[test]
    fn projection_affine_cases() {
        let mut store = ParamStore::new();
        let w = store.add("proj.w", Tensor::zeros(&[3, 4]), true);
        let b = store.add("proj.b", Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        let p = ProjectionParams { w, b };
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::vector(vec![5.0, 6.0, 7.0, 8.0]));
        let out = project(&mut g, &mut leaves, &p, x);
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);

        // picker rows copy coordinates
        let mut store2 = ParamStore::new();
        let mut wt = Tensor::zeros(&[3, 4]);
        wt.row_mut(0)[1] = 1.0;
        wt.row_mut(1)[3] = 1.0;
        wt.row_mut(2)[0] = 1.0;
        let w2 = store2.add("proj.w", wt, true);
        let b2 = store2.add("proj.b", Tensor::zeros(&[3]), false);
        let p2 = ProjectionParams { w: w2, b: b2 };
        let mut g2 = Graph::new();
        let mut leaves2 = ParamLeaves::new(&store2);
        let x2 = g2.constant(Tensor::vector(vec![5.0, 6.0, 7.0, 8.0]));
        let out2 = project(&mut g2, &mut leaves2, &p2, x2);
        assert_eq!(g2.value(out2).data(), &[6.0, 8.0, 5.0]);
    }

    #[test]
    fn projection_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.add("proj.w", Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng), true);
        let b = store.add("proj.b", Tensor::uniform(&[3], -1.0, 1.0, &mut rng), false);
        let p = ProjectionParams { w, b };
        let x_data: Vec<f64> = (0..6).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::new(&store);
        let x = g.constant(Tensor::vector(x_data.clone()));
        let out = project(&mut g, &mut leaves, &p, x);
        for r in 0..3 {
            let want: f64 = store
                .tensor(w)
                .row(r)
                .iter()
                .zip(&x_data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + store.tensor(b).data()[r];
            assert!((g.value(out).data()[r] - want).abs() < 1e-12);
        }
    }
}
