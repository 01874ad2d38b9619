//! Minimal reverse-mode differentiable tensors in `f64`.

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, gradient_check_many, GradCheckReport};
pub use graph::{BackwardCtx, CustomOp, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let ii = g.matmul(i, i).unwrap();
        assert_eq!(g.value(ii), &Tensor::eye(2));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &t(&[2, 1], &[2., 4.]));

        let x = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(x, x) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 5]);
        for bi in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.at(&[bi, i, k]) * b.at(&[bi, k, j])).sum();
                    assert!((g.value(c).at(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::from_vec(vec![1f64.ln(), 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

        let x = g.constant(Tensor::from_vec(vec![f64::NEG_INFINITY, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 1.0]);

        let x = g.constant(Tensor::from_vec(vec![f64::NEG_INFINITY; 3]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.0; 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4, 5], 3.0, &mut rng);
        for axis in 0..3 {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let s = g.softmax(v, axis).unwrap();
            let total = g.sum_axis(s, axis).unwrap();
            for v in g.value(total).data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1., 4., 9.]));
        let r = g.sqrt(x).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 3.]);

        let neg = g.constant(Tensor::from_vec(vec![1., -4.]));
        assert!(matches!(g.sqrt(neg), Err(Error::Domain { op: "sqrt", .. })));
        assert!(matches!(g.log(neg), Err(Error::Domain { op: "log", .. })));

        let c = g.constant(Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let ln = g.layer_norm(c, gamma, beta, 1e-12).unwrap();
        assert!(g.value(ln).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_ignores_masked_targets() {
        let mut g = Graph::new();
        let logits = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 0.5, -1.0, 2.0]));
        let all = g.cross_entropy(logits, &[2, 99], 99).unwrap();
        let row0 = {
            let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
            lse - 3.0
        };
        assert!((g.value(all).item().unwrap() - row0).abs() < 1e-14);
        let none = g.cross_entropy(logits, &[99, 99], 99).unwrap();
        assert_eq!(g.value(none).item(), Some(0.0));
        g.backward(all).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!(grad[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_check_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let f = |g: &mut Graph, v: Var| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(gradient_check(f, &x, 1e-5).unwrap() < 1e-6);

        let constant = |g: &mut Graph, _v: Var| Ok(g.constant(Tensor::scalar(4.0)));
        assert_eq!(gradient_check(constant, &x, 1e-5).unwrap(), 0.0);

        let vector = |g: &mut Graph, v: Var| Ok(g.scale(v, 1.0));
        assert!(matches!(gradient_check(vector, &x, 1e-5), Err(Error::Contract(_))));
        assert!(matches!(gradient_check(f, &x, 1e-2), Err(Error::Contract(_))));
    }
}
