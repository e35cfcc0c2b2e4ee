//! Minimal reverse-mode differentiation over float64 matrices.
//!
//! Graphs are rebuilt per batch: build nodes with the [`Graph`] methods,
//! bind named inputs, then [`Graph::eval`] and [`Graph::backprop`].
//! Evaluation is a pure function of the bindings.

mod check;
mod graph;
mod linalg;
mod ops;

pub use check::{finite_diff_check, finite_diff_detail, GradCheck};
pub use graph::{backprop, eval_graph, Bindings, Graph, Node, NodeId, Values};
pub use ops::Op;

pub(crate) use ops::{log_add_exp, softmax2};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.add(a, b);
        g.name(c, "c");
        let bind = Bindings::new()
            .with("a", Tensor::vector(vec![1.0, 2.0]))
            .with("b", Tensor::vector(vec![3.0, 4.0]));
        let out = eval_graph(&g, &bind).unwrap();
        assert_eq!(out["c"].data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::new();
        let a = g.input("a");
        let y = g.softmax(a);
        g.name(y, "y");
        let out = eval_graph(&g, &Bindings::new().with("a", Tensor::vector(vec![0.0, 0.0]))).unwrap();
        assert_eq!(out["y"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let m = g.input("m");
        let x = g.input("x");
        let y = g.matmul(m, x);
        g.name(y, "y");
        let bind = Bindings::new()
            .with("m", Tensor::identity(2))
            .with("x", Tensor::matrix(2, 1, vec![5.0, 7.0]));
        assert_eq!(eval_graph(&g, &bind).unwrap()["y"].data(), &[5.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        g.matmul(a, b);
        let bind = Bindings::new()
            .with("a", Tensor::matrix(2, 3, vec![0.0; 6]))
            .with("b", Tensor::matrix(2, 3, vec![0.0; 6]));
        match g.eval(&bind) {
            Err(crate::Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unbound_input_fails() {
        let mut g = Graph::new();
        let a = g.input("a");
        g.exp(a);
        assert!(matches!(g.eval(&Bindings::new()), Err(crate::Error::Unbound(n)) if n == "a"));
    }

    #[test]
    fn grad_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sum(x);
        let grads = backprop(&g, &Bindings::new().with("x", Tensor::vector(vec![0.3, -1.0, 2.0])), s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = backprop(&g, &Bindings::new().with("x", Tensor::vector(vec![2.0, -3.0])), s).unwrap();
        assert_eq!(grads["x"].data(), &[4.0, -6.0]);
    }

    #[test]
    fn unused_input_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.input("x");
        let _u = g.input("unused");
        let s = g.sum(x);
        let bind = Bindings::new()
            .with("x", Tensor::vector(vec![1.0]))
            .with("unused", Tensor::vector(vec![5.0, 6.0]));
        let grads = backprop(&g, &bind, s).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.exp(x);
        let r = backprop(&g, &Bindings::new().with("x", Tensor::vector(vec![1.0, 2.0])), y);
        assert!(matches!(r, Err(crate::Error::NonScalarLoss { .. })));
    }

    #[test]
    fn exp_gradient_check() {
        let mut g = Graph::new();
        let x = g.input("x");
        let e = g.exp(x);
        let s = g.sum(e);
        let err = finite_diff_check(&g, s, &Bindings::new().with("x", Tensor::vector(vec![0.0])), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn normalized_gram_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let a = g.input("a");
        let at = g.transpose(a);
        let gram = g.matmul(a, at);
        let n = g.row_l2_normalize(gram);
        // ‖normalize(AAᵀ)‖² is constant (= rows), so compare against a target.
        let target = g.input("target");
        let diff = g.sub(n, target);
        let f = g.frobenius_sq(diff);
        let bind = Bindings::new()
            .with("a", rand_tensor(&mut rng, 3, 2))
            .with("target", rand_tensor(&mut rng, 3, 3));
        let err = finite_diff_detail(&g, f, &bind, 1e-5, &["a".to_string()])
            .unwrap()
            .max_rel_error;
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_op_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let row = g.input("row");
        let w = g.input("w");
        let m = g.input("m");
        let onehot = g.input("onehot");

        let s = g.add(a, b);
        let d = g.sub(s, b);
        let p = g.mul(d, b);
        let lae = g.log_add_exp(p, a);
        let gate = g.gate(lae, b);
        let ar = g.add_row(gate, row);
        let r = g.relu(ar);
        let ex = g.exp(a);
        let lg = g.log(ex);
        let sq = g.sqrt(ex);
        let rc = g.reciprocal(sq);
        let sc = g.scale(rc, -0.5);
        let cl = g.clamp(sc, -1.0, 1.0);
        let cat = g.concat(&[r, lg, cl]);
        let mm = g.matmul(cat, w);
        let sm = g.softmax(mm);
        let ls = g.log_softmax(mm);
        let bm = g.batch_matvec(m, a);
        let ctx = g.context_stack(bm, 1, 2);
        let sl = g.slice_rows(ctx, 1, 2);
        let nrm = g.row_l2_normalize(sl);
        let cos = g.scale(nrm, 0.9);
        let am = g.angular_margin(cos, 0.2);
        let rep = g.repeat_rows(row, 4);
        let t1 = g.mul(sm, onehot);
        let t2 = g.mul(ls, onehot);
        let s1 = g.sum(t1);
        let s2 = g.mean(t2);
        let s3 = g.frobenius_sq(am);
        let s4 = g.sum(rep);
        let s5 = g.frobenius_sq(lae);
        let total1 = g.add(s1, s2);
        let total2 = g.add(s3, s4);
        let total3 = g.add(total1, total2);
        let loss = g.add(total3, s5);

        let mut oh = vec![0.0; 4 * 3];
        for i in 0..4 {
            oh[i * 3 + i % 3] = 1.0;
        }
        let bind = Bindings::new()
            .with("a", rand_tensor(&mut rng, 4, 2))
            .with("b", rand_tensor(&mut rng, 4, 2))
            .with("row", rand_tensor(&mut rng, 1, 2))
            .with("w", rand_tensor(&mut rng, 6, 3))
            .with("m", rand_tensor(&mut rng, 4, 4))
            .with("onehot", Tensor::matrix(4, 3, oh));
        let names: Vec<String> = ["a", "b", "row", "w", "m"].iter().map(|s| s.to_string()).collect();
        let chk = finite_diff_detail(&g, loss, &bind, 1e-6, &names).unwrap();
        assert!(chk.max_rel_error < 1e-6, "{chk:?}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = backprop(&g, &Bindings::new().with("x", Tensor::vector(vec![3.0])), s).unwrap();
        assert_eq!(grads["x"].data(), &[3.0]);
    }

    #[test]
    fn zero_row_normalize_fails() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.row_l2_normalize(x);
        let r = g.eval(&Bindings::new().with("x", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0])));
        assert!(matches!(r, Err(crate::Error::ZeroRow { row: 1, .. })));
    }

    #[test]
    fn eval_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.input("a");
        let at = g.transpose(a);
        let m = g.matmul(a, at);
        let y = g.softmax(m);
        g.name(y, "y");
        let bind = Bindings::new().with("a", rand_tensor(&mut rng, 5, 3));
        let v1 = eval_graph(&g, &bind).unwrap();
        let v2 = eval_graph(&g, &bind).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v1["y"]), bits(&v2["y"]));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::new();
            let a = g.input("a");
            let y = g.softmax(a);
            let v = g.eval(&Bindings::new().with("a", Tensor::matrix(3, 4, vals))).unwrap();
            for r in 0..3 {
                let row = v[y].row(r);
                proptest::prop_assert!(row.iter().all(|&p| p > 0.0));
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
