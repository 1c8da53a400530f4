//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var, LOGIT_CLAMP};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{sigmoid, softmax, Tensor};

use crate::error::{Error, Result};

/// `−ln softmax(logits)[true_index]` for a single logit vector.
pub fn cross_entropy_from_logits(logits: &[f64], true_index: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("cross_entropy_from_logits"));
    }
    if true_index >= logits.len() {
        return Err(Error::Index { table: "logits".into(), id: true_index, rows: logits.len() });
    }
    Ok(tensor::cross_entropy_row(logits, true_index))
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Central finite-difference oracle. Uses forward evaluation only.

    use super::{ParamId, ParamStore};
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const FD_STEP: f64 = 1e-5;
    pub const FD_TOL: f64 = 1e-4;

    /// Compares `analytic(id)` with central differences of `loss` on up to
    /// `per_param` entries of every parameter. Returns the worst relative error.
    pub fn check_params(
        store: &mut ParamStore,
        per_param: usize,
        seed: u64,
        loss: impl Fn(&ParamStore) -> f64,
        analytic: impl Fn(ParamId) -> Option<Vec<f64>>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            let n = store.get(id).len();
            let grad = analytic(id).unwrap_or_else(|| vec![0.0; n]);
            let picks: Vec<usize> =
                if n <= per_param { (0..n).collect() } else { sample(&mut rng, n, per_param).into_vec() };
            for i in picks {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + FD_STEP;
                let up = loss(store);
                store.get_mut(id).data_mut()[i] = orig - FD_STEP;
                let down = loss(store);
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let rel = (grad[i] - numeric).abs() / (grad[i].abs() + 1e-8);
                if rel > worst {
                    worst = rel;
                }
                assert!(
                    rel < FD_TOL,
                    "{}[{i}]: analytic {} vs numeric {numeric} (rel {rel:e})",
                    store.name(id),
                    grad[i]
                );
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = cross_entropy_from_logits(&[0.3; 5], 2).unwrap();
        assert!((uniform - 5f64.ln()).abs() < 1e-15);

        // -ln σ(20) = ln(1 + e^-20); the series ln(1+x) = x - x²/2 + x³/3 is exact to ~1e-27 here
        let x = (-20f64).exp();
        let oracle = x - x * x / 2.0 + x * x * x / 3.0;
        let got = cross_entropy_from_logits(&[10.0, -10.0], 0).unwrap();
        assert!((got - oracle).abs() / oracle < 1e-12, "{got} vs {oracle}");
        assert!((got - 2.061_153_6e-9).abs() < 1e-15);

        assert!(matches!(cross_entropy_from_logits(&[1.0, 2.0], 2), Err(Error::Index { .. })));
        assert!(cross_entropy_from_logits(&[], 0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.tracked_input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0], &[1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(logits).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn product_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0)).unwrap();
        let y = store.add("y", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(&store);
        let (vx, vy) = (g.param(x), g.param(y));
        let root = g.mul(vx, vy).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.param(x).unwrap().item(), 3.0);
        assert_eq!(grads.param(y).unwrap().item(), 2.0);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        for x0 in [-1.0, 0.0] {
            let mut store = ParamStore::new();
            let x = store.add("x", Tensor::scalar(x0)).unwrap();
            let mut g = Graph::new(&store);
            let vx = g.param(x);
            let r = g.relu(vx);
            let grads = g.backward(r).unwrap();
            assert_eq!(grads.param(x).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[4, 3])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(rand_tensor(&mut rng, &[2, 4]));
        let vw = g.param(w);
        let h = g.matmul(x, vw).unwrap();
        let h = g.relu(h);
        let loss = g.sum(h);
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        assert_eq!(a.param(w).unwrap(), b.param(w).unwrap());
    }

    #[test]
    fn gather_gradient_is_sparse_and_accumulates() {
        let mut store = ParamStore::new();
        let t = store.add("emb.test", Tensor::zeros(&[4, 3])).unwrap();
        let mut g = Graph::new(&store);
        let vt = g.param(t);
        let rows = g.gather(vt, &[Some(1), Some(1), None]).unwrap();
        let loss = g.sum(rows);
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(t).unwrap();
        assert_eq!(gt.row(1), &[2.0; 3]);
        for r in [0, 2, 3] {
            assert_eq!(gt.row(r), &[0.0; 3]);
        }
        let mut g = Graph::new(&store);
        let vt = g.param(t);
        match g.gather(vt, &[Some(4)]) {
            Err(Error::Index { table, id: 4, rows: 4 }) => assert_eq!(table, "emb.test"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    /// Every op composed into one scalar, checked against finite differences.
    #[test]
    fn composed_ops_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let table = store.add("table", rand_tensor(&mut rng, &[6, 4])).unwrap();
            let w1 = store.add("w1", rand_tensor(&mut rng, &[4, 4])).unwrap();
            let b1 = store.add("b1", rand_tensor(&mut rng, &[4])).unwrap();
            let gamma = store.add("gamma", rand_tensor(&mut rng, &[4])).unwrap();
            let beta = store.add("beta", rand_tensor(&mut rng, &[4])).unwrap();
            let wk = store.add("wk", rand_tensor(&mut rng, &[4, 4])).unwrap();
            let wv = store.add("wv", rand_tensor(&mut rng, &[4, 4])).unwrap();
            let wg = store.add("wg", rand_tensor(&mut rng, &[8, 3])).unwrap();
            let labels: Vec<f64> = (0..3).map(|i| (i % 2) as f64).collect();

            let build = |store: &ParamStore| -> (f64, Option<Gradients>, Vec<Var>) {
                let mut g = Graph::new(store);
                let ids = [Some(0), Some(3), None, Some(5), Some(3)];
                let vt = g.param(table);
                let x = g.gather(vt, &ids).unwrap();
                let ln = {
                    let (vg, vb) = (g.param(gamma), g.param(beta));
                    g.layer_norm(x, vg, vb).unwrap()
                };
                let h = {
                    let vw = g.param(w1);
                    let vb = g.param(b1);
                    let m = g.matmul(ln, vw).unwrap();
                    g.add_bias(m, vb).unwrap()
                };
                let k = {
                    let v = g.param(wk);
                    g.matmul(x, v).unwrap()
                };
                let v = {
                    let p = g.param(wv);
                    g.matmul(ln, p).unwrap()
                };
                let att = g.attention(h, k, v, 2, &[(0, 1), (0, 3), (1, 5), (2, 2), (0, 5)]).unwrap();
                let mixed = g.sub(att, x).unwrap();
                let prod = g.mul(mixed, h).unwrap();
                let act = g.relu(prod);
                let cat = g.concat(&[act, att]).unwrap();
                let sel = g.select_rows(cat, &[0, 1, 4]).unwrap();
                let logits = {
                    let p = g.param(wg);
                    g.matmul(sel, p).unwrap()
                };
                let sm = g.softmax(logits).unwrap();
                let col = g.select_col(sm, 1).unwrap();
                let scaled = g.mul_rows(sel, col).unwrap();
                let dots = g.row_dots(h, x, 1).unwrap();
                let ce = g.cross_entropy(logits, &[2, 0, 1], &[0.5, 1.0, 0.25]).unwrap();
                let l1 = g.select_col(scaled, 0).unwrap();
                let bce = g.bce_with_logits(l1, &labels, &[1.0; 3]).unwrap();
                let s = g.sum(dots);
                let s = g.scale(s, 0.3);
                let t = g.add(ce, bce).unwrap();
                let root = g.add(t, s).unwrap();
                let val = g.value(root).item();
                let grads = g.backward(root).ok();
                (val, grads, vec![])
            };
            let (_, grads, _) = build(&store);
            let grads = grads.unwrap();
            let analytic: Vec<Option<Vec<f64>>> =
                store.iter().map(|(id, _)| grads.param(id).map(|t| t.data().to_vec())).collect();
            check_params(&mut store, 64, seed, |s| build(s).0, |id| analytic[id.index()].clone());
        }
    }

    #[test]
    fn forward_and_backward_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let w = store.add("w", rand_tensor(&mut rng, &[8, 8])).unwrap();
            let x = rand_tensor(&mut rng, &[5, 8]);
            let mut g = Graph::new(&store);
            let vx = g.input(x);
            let vw = g.param(w);
            let q = g.matmul(vx, vw).unwrap();
            let a = g.attention(q, vx, vx, 2, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]).unwrap();
            let loss = g.sum(a);
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), grads.param(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
