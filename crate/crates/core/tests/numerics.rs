use concept_moe::numerics::gradcheck::{self, GradCheck};
use concept_moe::numerics::{Tape, Tensor, Var};
use concept_moe::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, so kinked ops are probed away from
/// their kinks.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values with pairwise gaps so that max-type ops have a unique winner.
fn random_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let data = idx
        .iter()
        .map(|&k| k as f64 * 0.01 + rng.random_range(0.0..0.001))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects a tensor to a scalar with fixed random weights so that every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

fn run_seeds<F>(name: &str, make: F) -> GradCheck
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>),
{
    let mut worst = GradCheck::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = make(&mut rng);
        let r = gradcheck::check(&inputs, gradcheck::STEP, |t, v| f(t, v)).unwrap();
        assert!(
            r.max_rel_err < 1e-4,
            "{name} seed {seed}: rel err {} (abs {})",
            r.max_rel_err,
            r.max_abs_err
        );
        worst = worst.merge(r);
    }
    worst
}

macro_rules! gradcheck_test {
    ($name:ident, |$rng:ident| $body:expr) => {
        #[test]
        fn $name() {
            run_seeds(stringify!($name), |$rng| $body);
        }
    };
}

gradcheck_test!(grad_add_broadcast, |rng| (
    vec![random(rng, &[2, 3, 4]), random(rng, &[3, 1])],
    Box::new(|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 1)
    })
));

gradcheck_test!(grad_sub_mul_div, |rng| (
    vec![random(rng, &[3, 4]), random(rng, &[4]), random_off_zero(rng, &[3, 1])],
    Box::new(|t, v| {
        let a = t.sub(v[0], v[1])?;
        let b = t.mul(a, v[0])?;
        let c = t.div(b, v[2])?;
        weighted_sum(t, c, 2)
    })
));

gradcheck_test!(grad_matmul, |rng| (
    vec![random(rng, &[3, 4]), random(rng, &[4, 2])],
    Box::new(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    })
));

gradcheck_test!(grad_linear, |rng| (
    vec![random(rng, &[5, 4]), random(rng, &[3, 4]), random(rng, &[3])],
    Box::new(|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted_sum(t, y, 4)
    })
));

gradcheck_test!(grad_conv2d_same, |rng| (
    vec![
        random(rng, &[2, 2, 5, 5]),
        random(rng, &[3, 2, 3, 3]),
        random(rng, &[3])
    ],
    Box::new(|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        weighted_sum(t, y, 5)
    })
));

gradcheck_test!(grad_conv2d_strided, |rng| (
    vec![random(rng, &[1, 2, 6, 5]), random(rng, &[2, 2, 3, 3])],
    Box::new(|t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1)?;
        weighted_sum(t, y, 6)
    })
));

gradcheck_test!(grad_relu, |rng| (
    vec![random_off_zero(rng, &[4, 5])],
    Box::new(|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 7)
    })
));

gradcheck_test!(grad_max_pool2d, |rng| (
    vec![random_distinct(rng, &[2, 2, 4, 4])],
    Box::new(|t, v| {
        let y = t.max_pool2d(v[0], 2)?;
        weighted_sum(t, y, 8)
    })
));

gradcheck_test!(grad_global_max, |rng| (
    vec![random_distinct(rng, &[3, 4, 5])],
    Box::new(|t, v| {
        let y = t.global_max(v[0])?;
        weighted_sum(t, y, 9)
    })
));

gradcheck_test!(grad_softmax_each_axis, |rng| (
    vec![random(rng, &[2, 3, 4])],
    Box::new(|t, v| {
        let mut acc = None;
        for axis in 0..3 {
            let s = t.softmax(v[0], axis)?;
            let w = weighted_sum(t, s, 10 + axis as u64)?;
            acc = Some(match acc {
                None => w,
                Some(a) => t.add(a, w)?,
            });
        }
        Ok(acc.unwrap())
    })
));

gradcheck_test!(grad_log_exp_sigmoid_abs_square, |rng| (
    vec![random_off_zero(rng, &[3, 3])],
    Box::new(|t, v| {
        let a = t.abs(v[0]);
        let l = t.log(a);
        let e = t.exp(v[0]);
        let s = t.sigmoid(v[0]);
        let q = t.square(v[0]);
        let ls = t.add(l, e)?;
        let sq = t.mul(s, q)?;
        let y = t.add(ls, sq)?;
        weighted_sum(t, y, 13)
    })
));

gradcheck_test!(grad_sum_mean_axes, |rng| (
    vec![random(rng, &[2, 3, 4])],
    Box::new(|t, v| {
        let a = t.sum_axis(v[0], 1, true)?;
        let a = weighted_sum(t, a, 14)?;
        let b = t.mean_axis(v[0], 2, false)?;
        let b = weighted_sum(t, b, 15)?;
        let c = t.mean(v[0]);
        let ab = t.add(a, b)?;
        t.add(ab, c)
    })
));

gradcheck_test!(grad_reshape_permute_select_stack, |rng| (
    vec![random(rng, &[2, 3, 4]), random(rng, &[2, 4])],
    Box::new(|t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let r = t.reshape(p, &[4, 6])?;
        let s = t.select(v[0], 1, 2)?;
        let st = t.stack(&[s, v[1], s], 1)?;
        let a = weighted_sum(t, r, 16)?;
        let b = weighted_sum(t, st, 17)?;
        t.add(a, b)
    })
));

gradcheck_test!(grad_cross_entropy, |rng| (
    vec![random(rng, &[4, 5])],
    Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]))
));

gradcheck_test!(grad_nll_prob, |rng| (
    vec![random(rng, &[3, 4])],
    Box::new(|t, v| {
        let p = t.softmax(v[0], 1)?;
        t.nll_prob(p, &[1, 3, 0], 1e-12)
    })
));

gradcheck_test!(grad_l2_norm_and_normalize, |rng| (
    vec![random(rng, &[3, 4])],
    Box::new(|t, v| {
        let n = t.l2_norm(v[0]);
        let z = t.normalize_rows(v[0], 1e-8);
        let a = weighted_sum(t, n, 18)?;
        let b = weighted_sum(t, z, 19)?;
        t.add(a, b)
    })
));

gradcheck_test!(grad_small_convnet, |rng| (
    vec![
        random(rng, &[2, 1, 6, 6]),
        random(rng, &[3, 1, 3, 3]),
        random(rng, &[3]),
        random(rng, &[2, 27]),
        random(rng, &[2]),
    ],
    Box::new(|t, v| {
        let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let p = t.max_pool2d(c, 2)?;
        let f = t.reshape(p, &[2, 27])?;
        let y = t.linear(f, v[3], v[4])?;
        t.cross_entropy(y, &[1, 0])
    })
));

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn relu_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap(), true);
    let l = t.cross_entropy(x, &[0]).unwrap();
    assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);
    let g = t.backward(l).unwrap();
    let g = g.get(x).unwrap().data().to_vec();
    let want = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    for (a, b) in g.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_errors_are_typed() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(t.matmul(a, a), Err(Error::Shape { .. })));
    assert!(matches!(t.softmax(a, 2), Err(Error::Shape { .. })));
    assert!(matches!(t.cross_entropy(a, &[0, 3]), Err(Error::InvalidLabel { .. })));
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn unreached_leaf_gets_zero_grad() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0]), true);
    let unused = t.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
    let l = t.sum(x);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
}

/// Quadruple-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for f in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[f];
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((f * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * o + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 5, 5]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let b = random(&mut rng, &[4]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let want = naive_conv(&x, &w, b.data(), stride, pad);
            for (a, e) in t.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-30.0f64..30.0, 1..24), split in 1usize..4) {
        let len = values.len();
        let rows = if len % split == 0 { split } else { 1 };
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![rows, len / rows], values).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for row in t.value(s).data().chunks(len / rows) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
