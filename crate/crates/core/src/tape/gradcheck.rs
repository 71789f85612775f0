//! Finite-difference gradient verification.

use super::{NodeId, Tape, Tensor};

/// Compares analytic gradients of `f` (a scalar-valued graph over the given
/// input leaves) against central finite differences with step `eps`, returning
/// the maximum elementwise error relative to max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        let v = tape.scalar_value(out);
        tape.backward(out).expect("scalar output");
        let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        (v, grads)
    };

    let (_, analytic) = eval(inputs);

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let (fp, _) = eval_value(&f, &work);
            work[ti].data_mut()[j] = orig - eps;
            let (fm, _) = eval_value(&f, &work);
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[j]);
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn eval_value<F>(f: &F, tensors: &[Tensor]) -> (f64, ())
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids);
    (tape.scalar_value(out), ())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::rc::Rc;

    fn randt(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = randt(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let wn = tape.leaf(identity(3));
        let bn = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.linear(xn, wn, bn).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        assert!(tape.matmul(x, w).is_err());
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.scalar_value(y), -0.01);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = StdRng::seed_from_u64(2);
        let x = randt(&mut rng, &[64, 5]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let g = tape.leaf(Tensor::new(vec![5], vec![1.0; 5]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[5]));
        let y = tape.instance_norm(xn, g, b, 1e-5).unwrap();
        let ty = tape.value(y);
        for ch in 0..5 {
            let col: Vec<f64> = (0..64).map(|r| ty.at(r, ch)).collect();
            let mean: f64 = col.iter().sum::<f64>() / 64.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn mean_pool_singleton_and_permutation() {
        let rows = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&rows));
        let y = tape.mean_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[rows[1].clone(), rows[0].clone()]));
        let y = tape.mean_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![3.0, -1.0]]));
        let y = tape.mean_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn mean_pool_empty_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[0, 3]));
        assert!(matches!(tape.mean_pool(x), Err(crate::Error::EmptySet)));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(randt(&mut rng, &[3, 4]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gradient_accumulation_matches_separate_runs() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = randt(&mut rng, &[6, 6]);
        let w = randt(&mut rng, &[6, 6]);

        let run = |combine: bool| -> Vec<f64> {
            let mut params = ParamSet::new();
            let wid = params.add("w", w.clone());
            if combine {
                let mut tape = Tape::new();
                let xn = tape.leaf(x.clone());
                let wn = tape.param(&params, wid);
                let y = tape.matmul(xn, wn).unwrap();
                let l1 = tape.sum_all(y).unwrap();
                let ya = tape.abs(y).unwrap();
                let l2 = tape.mean_all(ya).unwrap();
                let total = tape.add(l1, l2).unwrap();
                tape.backward(total).unwrap();
                tape.add_param_grads(&mut params);
            } else {
                for which in 0..2 {
                    let mut tape = Tape::new();
                    let xn = tape.leaf(x.clone());
                    let wn = tape.param(&params, wid);
                    let y = tape.matmul(xn, wn).unwrap();
                    let loss = if which == 0 {
                        tape.sum_all(y).unwrap()
                    } else {
                        let ya = tape.abs(y).unwrap();
                        tape.mean_all(ya).unwrap()
                    };
                    tape.backward(loss).unwrap();
                    tape.add_param_grads(&mut params);
                }
            }
            params.grad(wid).data().to_vec()
        };

        let combined = run(true);
        let separate = run(false);
        for (a, b) in combined.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_linear_layer() {
        let mut rng = StdRng::seed_from_u64(5);
        let inputs =
            vec![randt(&mut rng, &[8, 8]), randt(&mut rng, &[8, 8]), randt(&mut rng, &[8])];
        let err = grad_check(
            |tape, ids| {
                let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
                let a = tape.abs(y).unwrap();
                tape.mean_all(a).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "linear grad error {err}");
    }

    #[test]
    fn grad_check_activation_stack() {
        let mut rng = StdRng::seed_from_u64(6);
        let inputs = vec![randt(&mut rng, &[5, 7])];
        let err = grad_check(
            |tape, ids| {
                let a = tape.leaky_relu(ids[0], 0.01).unwrap();
                let b = tape.sigmoid(a).unwrap();
                let c = tape.clamp11(b).unwrap();
                let d = tape.cos_window(c).unwrap();
                tape.mean_all(d).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "activation grad error {err}");
    }

    #[test]
    fn grad_check_instance_norm() {
        let mut rng = StdRng::seed_from_u64(7);
        let inputs =
            vec![randt(&mut rng, &[10, 4]), randt(&mut rng, &[4]), randt(&mut rng, &[4])];
        let err = grad_check(
            |tape, ids| {
                let y = tape.instance_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let a = tape.abs(y).unwrap();
                tape.mean_all(a).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "instance norm grad error {err}");
    }

    #[test]
    fn grad_check_reductions_and_glue() {
        let mut rng = StdRng::seed_from_u64(8);
        let inputs = vec![randt(&mut rng, &[6, 3]), randt(&mut rng, &[6, 3])];
        let err = grad_check(
            |tape, ids| {
                let d = tape.row_dot(ids[0], ids[1]).unwrap();
                let n = tape.row_norm(ids[0]).unwrap();
                let c = tape.concat_cols(d, n).unwrap();
                let s = tape.slice_cols(c, 0, 2).unwrap();
                let m = tape.mean_all(s).unwrap();
                let sum = tape.sum_all(ids[1]).unwrap();
                let sc = tape.scale(sum, 0.25).unwrap();
                tape.add(m, sc).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "reduction grad error {err}");
    }

    #[test]
    fn grad_check_trilerp_both_inputs() {
        let mut rng = StdRng::seed_from_u64(9);
        let corners = randt(&mut rng, &[8, 4]);
        let uvw = Tensor::new(vec![1, 3], vec![0.3, 0.6, 0.45]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let y = tape.trilerp(ids[0], ids[1]).unwrap();
                let a = tape.abs(y).unwrap();
                tape.sum_all(a).unwrap()
            },
            &[corners, uvw],
            1e-6,
        );
        assert!(err < 1e-4, "trilerp grad error {err}");
    }

    #[test]
    fn grad_check_bce_and_gathers() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randt(&mut rng, &[7, 2]);
        let labels = Rc::new(vec![1.0, 0.0, 1.0]);
        let idx = Rc::new(vec![2u32, 0, 5]);
        let err = grad_check(
            move |tape, ids| {
                let g = tape.gather_rows(ids[0], idx.clone()).unwrap();
                let d = tape.slice_cols(g, 0, 1).unwrap();
                let p = tape.sigmoid(d).unwrap();
                tape.bce_mean(p, labels.clone()).unwrap()
            },
            &[x],
            1e-6,
        );
        assert!(err < 1e-4, "bce grad error {err}");
    }

    #[test]
    fn grad_check_pair_conv() {
        use super::super::{conv3_pairs, corner_pairs, down_pairs, KeyIndex};
        let mut rng = StdRng::seed_from_u64(11);
        let keys = KeyIndex::from_keys(vec![
            [0, 0, 0],
            [1, 0, 0],
            [0, 1, 0],
            [1, 1, 1],
            [2, 1, 0],
            [0, 0, 1],
            [3, 3, 3],
            [2, 2, 2],
            [1, 2, 1],
            [2, 0, 2],
        ]);
        let c_in = 3;
        let c_out = 2;

        for which in 0..3 {
            let (n_out, taps, table) = match which {
                0 => (keys.len(), 27, conv3_pairs(&keys)),
                1 => {
                    let (parents, t) = down_pairs(&keys);
                    (parents.len(), 8, t)
                }
                _ => {
                    let (corners, t) = corner_pairs(&keys);
                    (corners.len(), 8, t)
                }
            };
            let _ = n_out;
            let x = randt(&mut rng, &[keys.len(), c_in]);
            let w = randt(&mut rng, &[taps * c_in, c_out]);
            let table2 = table.clone();
            let err = grad_check(
                move |tape, ids| {
                    let y = tape.pair_conv(ids[0], ids[1], table2.clone()).unwrap();
                    let a = tape.abs(y).unwrap();
                    tape.mean_all(a).unwrap()
                },
                &[x, w],
                1e-6,
            );
            assert!(err < 1e-4, "pair conv variant {which} grad error {err}");
        }
    }

    #[test]
    fn grad_check_weighted_gather_and_pool_groups() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = randt(&mut rng, &[9, 4]);
        let idx = Rc::new(vec![[0u32, 1, 2, 3, 4, 5, 6, 7], [8, 7, 6, 5, 4, 3, 2, 1]]);
        let w = Rc::new(vec![
            [0.1, 0.2, 0.05, 0.15, 0.1, 0.1, 0.2, 0.1],
            [0.3, -0.2, 0.1, 0.4, 0.0, 0.2, 0.1, 0.1],
        ]);
        let groups = Rc::new(vec![(0u32, 3u32), (3, 9)]);
        let err = grad_check(
            move |tape, ids| {
                let g = tape.weighted_gather(ids[0], idx.clone(), w.clone()).unwrap();
                let p = tape.mean_pool_groups(ids[0], groups.clone()).unwrap();
                let ga = tape.abs(g).unwrap();
                let pa = tape.abs(p).unwrap();
                let a = tape.mean_all(ga).unwrap();
                let b = tape.mean_all(pa).unwrap();
                tape.add(a, b).unwrap()
            },
            &[x],
            1e-6,
        );
        assert!(err < 1e-4, "weighted gather / pool grad error {err}");
    }

    #[test]
    fn grad_check_ray_point_chain() {
        let t0 = Tensor::scalar(0.7);
        let err = grad_check(
            |tape, ids| {
                let p = tape.ray_point(ids[0], [0.1, -0.2, 0.0], [0.0, 0.6, 0.8]).unwrap();
                let q = tape.cos_window(p).unwrap();
                let s = tape.max_const(q, 0.2).unwrap();
                tape.sum_all(s).unwrap()
            },
            &[t0],
            1e-6,
        );
        assert!(err < 1e-4, "ray point grad error {err}");
    }
}
