//! Minimal reverse-mode automatic differentiation engine.
//!
//! Provides exactly the operations the network and its loss need. All
//! reductions run in a fixed order on a single thread, so identical inputs
//! give bit-identical outputs and gradients.

pub mod conv;
mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheck};
pub use graph::{sigmoid, BatchStats, Graph, LocalGrad, NormMode, Var, NO_TARGET};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights, so that gradients are
    /// not trivially zero (e.g. the plain sum of a batch-norm output).
    fn probe(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        let shape = g.shape(v).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7311).sin()).collect();
        let wv = g.constant(Tensor::new(shape, w).unwrap());
        let m = g.mul(v, wv).unwrap();
        g.sum(m)
    }

    #[test]
    fn conv2d_hand_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[6., 8., 12., 14.]);

        let x = g.constant(Tensor::ones(&[1, 4, 4]));
        let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[4.0; 4]);

        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[1, 3, 4], &data));
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(crate::Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn conv2d_output_shape_follows_floor_formula(
            h in 1usize..=8, w in 1usize..=8, kh in 1usize..=8, kw in 1usize..=8,
            stride in 1usize..=8, pad in 0usize..=8,
        ) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[1, h, w]));
            let k = g.constant(Tensor::ones(&[1, 1, kh, kw]));
            let r = g.conv2d(x, k, stride, pad);
            if h + 2 * pad < kh || w + 2 * pad < kw {
                prop_assert!(r.is_err());
            } else {
                let y = r.unwrap();
                prop_assert_eq!(
                    g.shape(y),
                    &[1, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1][..]
                );
            }
        }
    }

    #[test]
    fn batch_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], -0.99999, epsilon = 1e-5);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.99999, epsilon = 1e-5);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);

        let gamma2 = g.constant(t(&[1], &[2.0]));
        let (y2, _) = g.batch_norm_train(x, gamma2, beta, 1e-5).unwrap();
        for (a, b) in g.value(y2).data().iter().zip(g.value(y).data()) {
            assert_eq!(*a, 2.0 * b);
        }

        let c = g.constant(Tensor::full(&[3, 1, 2, 2], 7.25));
        let beta5 = g.constant(t(&[1], &[5.0]));
        let (yc, _) = g.batch_norm_train(c, gamma, beta5, 1e-5).unwrap();
        assert!(g.value(yc).data().iter().all(|&v| v == 5.0));

        assert!(matches!(
            g.batch_norm_train(x, gamma, beta, 0.0),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 3.0, -2.0]));
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y).data()[..2], [0.0, 3.0]);
        assert_abs_diff_eq!(g.value(y).data()[2], -0.2, epsilon = 1e-15);

        let sx = g.constant(t(&[3], &[0.0, 1.0, 40.0]));
        let s = g.sigmoid(sx);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_abs_diff_eq!(g.value(s).data()[1], 0.7310585786, epsilon = 1e-10);
        assert!(g.value(s).data()[2] > g.value(s).data()[1]);

        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        let na = g.constant(t(&[2], &[-1.0, -2.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
        let s = g.add(a, na).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn routing_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1, 1], &[1.5]));
        let b = g.constant(t(&[1, 1, 1], &[-2.5]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[1.5, -2.5]);
        let wrong = g.constant(Tensor::zeros(&[1, 2, 1]));
        assert!(g.concat_channels(a, wrong).is_err());

        let five = g.constant(t(&[1, 1, 1], &[5.0]));
        let u = g.upsample_nearest2x(five).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 2]);
        assert_eq!(g.value(u).data(), &[5.0; 4]);

        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let f = g.flatten(m);
        assert_eq!(g.shape(f), &[1, 4]);
        assert_eq!(g.value(f).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_parts(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()));
        let u = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(u).sum(), 4.0 * g.value(x).sum());
        let s = g.sum(u);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0; 12]);
    }

    #[test]
    fn concat_backward_matches_manual_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.param(random(&[2, 2, 3, 3], &mut rng));
        let b = g.param(random(&[2, 3, 3, 3], &mut rng));
        let c = g.concat_channels(a, b).unwrap();
        let r = probe(&mut g, c);
        g.backward(r).unwrap();
        let up = g.grad(c).unwrap().to_vec();
        // manual slicing oracle: per batch item, first 2*9 values to a, next 3*9 to b
        let mut ea = Vec::new();
        let mut eb = Vec::new();
        for n in 0..2 {
            let row = &up[n * 45..(n + 1) * 45];
            ea.extend_from_slice(&row[..18]);
            eb.extend_from_slice(&row[18..]);
        }
        assert_eq!(g.grad(a).unwrap(), &ea[..]);
        assert_eq!(g.grad(b).unwrap(), &eb[..]);
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let w = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let zero = g.constant(t(&[1], &[0.0]));
        let y = g.dense(x, w, zero).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);

        let wz = g.constant(Tensor::zeros(&[1, 2]));
        let bias = g.constant(t(&[1], &[2.5]));
        let y = g.dense(x, wz, bias).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);

        let e1 = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let y = g.dense(e1, w, bias).unwrap();
        assert_eq!(g.value(y).data(), &[4.5]);

        let short = g.constant(t(&[1, 1], &[1.0]));
        assert!(g.dense(x, short, bias).is_err());
    }

    #[test]
    fn grad_check_scalar_examples() {
        let sq = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &t(&[1], &[3.0]),
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(sq.analytic, 6.0, epsilon = 1e-12);
        assert!(sq.max_relative_error < 1e-9, "{sq:?}");

        let constant = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &t(&[1], &[3.0]), 1e-5).unwrap();
        assert_eq!(constant.analytic, 0.0);
        assert_eq!(constant.numeric, 0.0);
        assert_eq!(constant.max_relative_error, 0.0);

        assert!(grad_check(|g, x| Ok(g.sum(x)), &t(&[1], &[1.0]), 0.0).is_err());
        let nan = grad_check(|g, _| Ok(g.constant(Tensor::scalar(f64::NAN))), &t(&[1], &[1.0]), 1e-5);
        assert!(matches!(nan, Err(crate::Error::Evaluation(_))));
    }

    /// Every differentiable op passes a finite-difference check at ten random
    /// points drawn from a fixed seed.
    #[test]
    fn every_op_passes_grad_check_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-5;
        let tol = 1e-5;
        for round in 0..10 {
            let checks: Vec<(&str, GradCheck)> = vec![
                (
                    "conv2d",
                    grad_check_many(
                        |g, v| {
                            let y = g.conv2d(v[0], v[1], 2, 1)?;
                            Ok(probe(g, y))
                        },
                        &[random(&[2, 2, 5, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng)],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "channel_bias",
                    grad_check_many(
                        |g, v| {
                            let y = g.channel_bias(v[0], v[1])?;
                            Ok(probe(g, y))
                        },
                        &[random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "batch_norm_train",
                    grad_check_many(
                        |g, v| {
                            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                            Ok(probe(g, y))
                        },
                        &[
                            random(&[2, 3, 2, 3], &mut rng),
                            random(&[3], &mut rng),
                            random(&[3], &mut rng),
                        ],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "batch_norm_infer",
                    grad_check_many(
                        |g, v| {
                            let y = g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
                            Ok(probe(g, y))
                        },
                        &[
                            random(&[2, 2, 2, 2], &mut rng),
                            random(&[2], &mut rng),
                            random(&[2], &mut rng),
                        ],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "leaky_relu",
                    grad_check(
                        |g, x| {
                            let y = g.leaky_relu(x, 0.1)?;
                            Ok(probe(g, y))
                        },
                        &random(&[12], &mut rng),
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "sigmoid",
                    grad_check(
                        |g, x| {
                            let y = g.sigmoid(x);
                            Ok(probe(g, y))
                        },
                        &random(&[12], &mut rng),
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "residual_add",
                    grad_check_many(
                        |g, v| {
                            let y = g.add(v[0], v[1])?;
                            let y = g.mul(y, y)?;
                            Ok(probe(g, y))
                        },
                        &[random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "concat_channels",
                    grad_check_many(
                        |g, v| {
                            let y = g.concat_channels(v[0], v[1])?;
                            let y = g.mul(y, y)?;
                            Ok(probe(g, y))
                        },
                        &[random(&[2, 1, 2, 2], &mut rng), random(&[2, 2, 2, 2], &mut rng)],
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "upsample",
                    grad_check(
                        |g, x| {
                            let y = g.upsample_nearest2x(x)?;
                            let y = g.mul(y, y)?;
                            Ok(probe(g, y))
                        },
                        &random(&[2, 2, 3], &mut rng),
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "flatten",
                    grad_check(
                        |g, x| {
                            let y = g.flatten(x);
                            let y = g.mul(y, y)?;
                            Ok(probe(g, y))
                        },
                        &random(&[2, 3, 2], &mut rng),
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "head_layout",
                    grad_check(
                        |g, x| {
                            let y = g.head_layout(x, 3, 2)?;
                            let y = g.mul(y, y)?;
                            Ok(probe(g, y))
                        },
                        &random(&[2, 6, 2, 2], &mut rng),
                        h,
                    )
                    .unwrap(),
                ),
                (
                    "dense",
                    grad_check_many(
                        |g, v| {
                            let y = g.dense(v[0], v[1], v[2])?;
                            let y = g.mul(y, y)?;
                            Ok(g.sum(y))
                        },
                        &[
                            random(&[2, 5], &mut rng),
                            random(&[1, 5], &mut rng),
                            random(&[1], &mut rng),
                        ],
                        h,
                    )
                    .unwrap(),
                ),
            ];
            for (name, c) in checks {
                assert!(c.max_relative_error <= tol, "round {round}, {name}: {c:?}");
            }
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let x = g.param(random(&[2, 3, 6, 6], &mut rng));
            let k = g.param(random(&[4, 3, 3, 3], &mut rng));
            let y = g.conv2d(x, k, 1, 1).unwrap();
            let gamma = g.param(Tensor::ones(&[4]));
            let beta = g.param(Tensor::zeros(&[4]));
            let (y, _) = g.batch_norm_train(y, gamma, beta, 1e-5).unwrap();
            let y = g.leaky_relu(y, 0.1).unwrap();
            let r = probe(&mut g, y);
            g.backward(r).unwrap();
            (
                g.value(r).data()[0].to_bits(),
                g.grad(k).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1000]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }
}
