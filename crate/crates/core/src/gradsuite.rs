//! Seeded finite-difference checks over every tape op and every training
//! loss, on small random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::moe;
use crate::numerics::gradcheck::{self, GradCheck};
use crate::numerics::{gaussian_kernel2d, Tape, Tensor, Var};
use crate::partition::ops;
use crate::rng::{derive_seed, rng_for};

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A named family of checks: builds inputs and a scalar function from a rng.
pub struct Case {
    pub name: &'static str,
    build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Loss),
}

/// Worst errors of one case over all seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub result: GradCheck,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Magnitudes in `[0.05, 1)` with random sign, away from kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Pairwise-separated values so max-type ops have a unique winner.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let data = idx
        .iter()
        .map(|&k| k as f64 * 0.05 + rng.random_range(0.0..0.005))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

/// `Σ x ⊙ W` for a fixed random `W`, so every output element matters.
fn project(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Scalar check of a unary op applied to one input.
fn unary(
    rng: &mut ChaCha8Rng,
    input: Tensor,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> (Vec<Tensor>, Loss) {
    let w = random(rng, input.shape());
    (
        vec![input],
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            project(t, y, &w)
        }),
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> (Vec<Tensor>, Loss) {
    let (a, b) = (random(rng, a_shape), random(rng, b_shape));
    let w = random(rng, out_shape);
    (
        vec![a, b],
        Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, &w)
        }),
    )
}

/// `x·W1ᵀ + b1 → relu → ·W2ᵀ + b2` with parameters at `v[at..at+4]`.
fn mlp(t: &mut Tape, v: &[Var], at: usize, x: Var) -> Result<Var> {
    let h = t.linear(x, v[at], v[at + 1])?;
    let h = t.relu(h);
    t.linear(h, v[at + 2], v[at + 3])
}

fn mlp_params(rng: &mut ChaCha8Rng, i: usize, h: usize, o: usize) -> Vec<Tensor> {
    vec![
        random(rng, &[h, i]),
        uniform(rng, &[h], 0.1, 0.5),
        random(rng, &[o, h]),
        random(rng, &[o]),
    ]
}

/// Toy partition instance: features `[N,D,H,W]`, concepts, raw smoothing.
fn partition_inputs(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, hw: usize) -> Vec<Tensor> {
    vec![
        random(rng, &[n, d, hw, hw]),
        random(rng, &[k, d]),
        uniform(rng, &[k], -0.5, 0.5),
    ]
}

fn occurrence(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let a = t.sigmoid(v[2]);
    ops::occurrence_probs(t, v[0], v[1], a)
}

fn presence_of(t: &mut Tape, v: &[Var], hw: usize) -> Result<Var> {
    let probs = occurrence(t, v)?;
    let kernel = gaussian_kernel2d(3, 1.0)?;
    ops::presence(t, probs, hw, hw, &kernel)
}

fn pooled(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let a = t.sigmoid(v[2]);
    let r = ops::scaled_residuals(t, v[0], v[1], a)?;
    let p = ops::occurrence_from_residuals(t, r)?;
    ops::pool_from_residuals(t, r, p)
}

/// Concept features `[N,K,D]` of unit rows plus expert and gate MLP params.
fn moe_inputs(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, c: usize) -> Vec<Tensor> {
    let mut z = random(rng, &[n, k, d]);
    for row in z.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    let mut inputs = vec![z];
    for _ in 0..k {
        inputs.extend(mlp_params(rng, d, 4, c));
    }
    inputs.extend(mlp_params(rng, k * d, 4, k));
    inputs
}

/// Expert distributions `[N,K,C]`, gate weights `[N,K]`, aggregate `[N,C]`.
fn moe_forward(t: &mut Tape, v: &[Var], k: usize) -> Result<(Var, Var, Var)> {
    let z = v[0];
    let s = t.shape(z).to_vec();
    let (n, d) = (s[0], s[2]);
    let mut experts = Vec::with_capacity(k);
    for j in 0..k {
        let row = t.select(z, 1, j)?;
        let logits = mlp(t, v, 1 + 4 * j, row)?;
        experts.push(t.softmax(logits, 1)?);
    }
    let probs = t.stack(&experts, 1)?;
    let flat = t.reshape(z, &[n, k * d])?;
    let gate_logits = mlp(t, v, 1 + 4 * k, flat)?;
    let w = t.softmax(gate_logits, 1)?;
    let w3 = t.reshape(w, &[n, k, 1])?;
    let mix = t.mul(w3, probs)?;
    let agg = t.sum_axis(mix, 1, false)?;
    Ok((probs, w, agg))
}

/// Every check family, ops first, then losses.
pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            build: |r| binary(r, &[3, 4], &[4], &[3, 4], |t, a, b| t.add(a, b)),
        },
        Case {
            name: "sub",
            build: |r| binary(r, &[2, 3, 1], &[3, 4], &[2, 3, 4], |t, a, b| t.sub(a, b)),
        },
        Case {
            name: "mul",
            build: |r| binary(r, &[3, 4], &[3, 1], &[3, 4], |t, a, b| t.mul(a, b)),
        },
        Case {
            name: "div",
            build: |r| {
                binary(r, &[3, 4], &[4], &[3, 4], |t, a, b| {
                    // denominators in [1, 3)
                    let b = t.add_scalar(b, 2.0);
                    t.div(a, b)
                })
            },
        },
        Case {
            name: "matmul",
            build: |r| binary(r, &[3, 4], &[4, 2], &[3, 2], |t, a, b| t.matmul(a, b)),
        },
        Case {
            name: "linear",
            build: |r| {
                let w = random(r, &[5, 2]);
                (
                    vec![random(r, &[5, 3]), random(r, &[2, 3]), random(r, &[2])],
                    Box::new(move |t, v| {
                        let y = t.linear(v[0], v[1], v[2])?;
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "conv2d",
            build: |r| {
                let w = random(r, &[2, 3, 3, 3]);
                (
                    vec![random(r, &[2, 2, 5, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
                    Box::new(move |t, v| {
                        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "relu",
            build: |r| {
                let x = off_zero(r, &[4, 5]);
                unary(r, x, |t, x| Ok(t.relu(x)))
            },
        },
        Case {
            name: "max_pool2d",
            build: |r| {
                let x = distinct(r, &[2, 2, 4, 4]);
                let w = random(r, &[2, 2, 2, 2]);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.max_pool2d(v[0], 2)?;
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "global_max",
            build: |r| {
                let x = distinct(r, &[2, 3, 3, 4]);
                let w = random(r, &[2, 3]);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.global_max(v[0])?;
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "softmax",
            build: |r| {
                let x = random(r, &[3, 4, 2]);
                unary(r, x, |t, x| t.softmax(x, 1))
            },
        },
        Case {
            name: "log",
            build: |r| {
                let x = uniform(r, &[3, 4], 0.2, 2.0);
                unary(r, x, |t, x| Ok(t.log(x)))
            },
        },
        Case {
            name: "exp",
            build: |r| {
                let x = random(r, &[3, 4]);
                unary(r, x, |t, x| Ok(t.exp(x)))
            },
        },
        Case {
            name: "sigmoid",
            build: |r| {
                let x = random(r, &[3, 4]);
                unary(r, x, |t, x| Ok(t.sigmoid(x)))
            },
        },
        Case {
            name: "abs",
            build: |r| {
                let x = off_zero(r, &[3, 4]);
                unary(r, x, |t, x| Ok(t.abs(x)))
            },
        },
        Case {
            name: "square",
            build: |r| {
                let x = random(r, &[3, 4]);
                unary(r, x, |t, x| Ok(t.square(x)))
            },
        },
        Case {
            name: "sum_axis",
            build: |r| {
                let x = random(r, &[2, 3, 4]);
                let w = random(r, &[2, 4]);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.sum_axis(v[0], 1, false)?;
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "mean",
            build: |r| {
                let x = random(r, &[3, 4]);
                (
                    vec![x],
                    Box::new(|t, v| {
                        let sq = t.square(v[0]);
                        Ok(t.mean(sq))
                    }),
                )
            },
        },
        Case {
            name: "l2_norm",
            build: |r| {
                let x = off_zero(r, &[3, 4]);
                let w = random(r, &[3]);
                (
                    vec![x],
                    Box::new(move |t, v| {
                        let y = t.l2_norm(v[0]);
                        project(t, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "normalize_rows",
            build: |r| {
                let x = random(r, &[3, 4]);
                unary(r, x, |t, x| Ok(t.normalize_rows(x, ops::ZERO_ROW_EPS)))
            },
        },
        Case {
            name: "reshape/permute/select/stack",
            build: |r| {
                let w = random(r, &[3, 2, 4]);
                (
                    vec![random(r, &[2, 3, 4])],
                    Box::new(move |t, v| {
                        let p = t.permute(v[0], &[1, 0, 2])?;
                        let a = t.select(p, 1, 0)?;
                        let b = t.select(p, 1, 1)?;
                        let b = t.reshape(b, &[3, 4])?;
                        let sq = t.square(b);
                        let s = t.stack(&[a, sq], 1)?;
                        project(t, s, &w)
                    }),
                )
            },
        },
        Case {
            name: "cross_entropy",
            build: |r| {
                let y = labels(r, 4, 3);
                (
                    vec![random(r, &[4, 3])],
                    Box::new(move |t, v| t.cross_entropy(v[0], &y)),
                )
            },
        },
        Case {
            name: "nll_prob",
            build: |r| {
                let y = labels(r, 4, 3);
                (
                    vec![random(r, &[4, 3])],
                    Box::new(move |t, v| {
                        let p = t.softmax(v[0], 1)?;
                        t.nll_prob(p, &y, moe::PROB_FLOOR)
                    }),
                )
            },
        },
        Case {
            name: "occurrence",
            build: |r| {
                let w = random(r, &[2, 3, 16]);
                (
                    partition_inputs(r, 2, 3, 4, 4),
                    Box::new(move |t, v| {
                        let o = occurrence(t, v)?;
                        project(t, o, &w)
                    }),
                )
            },
        },
        Case {
            name: "presence",
            build: |r| {
                let w = random(r, &[2, 3]);
                (
                    partition_inputs(r, 2, 3, 4, 4),
                    Box::new(move |t, v| {
                        let p = presence_of(t, v, 4)?;
                        project(t, p, &w)
                    }),
                )
            },
        },
        Case {
            name: "pooling",
            build: |r| {
                let w = random(r, &[2, 3, 4]);
                (
                    partition_inputs(r, 2, 3, 4, 4),
                    Box::new(move |t, v| {
                        let z = pooled(t, v)?;
                        project(t, z, &w)
                    }),
                )
            },
        },
        Case {
            name: "l_cls",
            build: |r| {
                let y = labels(r, 3, 4);
                let mut inputs = partition_inputs(r, 3, 2, 3, 3);
                inputs.extend(mlp_params(r, 2 * 3, 5, 4));
                (
                    inputs,
                    Box::new(move |t, v| {
                        let z = pooled(t, v)?;
                        let flat = t.reshape(z, &[3, 6])?;
                        let logits = mlp(t, v, 3, flat)?;
                        ops::cls_loss(t, logits, &y)
                    }),
                )
            },
        },
        Case {
            name: "l_r",
            build: |r| {
                (
                    partition_inputs(r, 2, 3, 4, 4),
                    Box::new(|t, v| {
                        let p = presence_of(t, v, 4)?;
                        ops::presence_loss(t, p)
                    }),
                )
            },
        },
        Case {
            name: "partition_total",
            build: |r| {
                let y = labels(r, 2, 3);
                let mut inputs = partition_inputs(r, 2, 2, 3, 4);
                inputs.extend(mlp_params(r, 2 * 3, 4, 3));
                (
                    inputs,
                    Box::new(move |t, v| {
                        let a = t.sigmoid(v[2]);
                        let res = ops::scaled_residuals(t, v[0], v[1], a)?;
                        let probs = ops::occurrence_from_residuals(t, res)?;
                        let kernel = gaussian_kernel2d(3, 1.0)?;
                        let pres = ops::presence(t, probs, 4, 4, &kernel)?;
                        let z = ops::pool_from_residuals(t, res, probs)?;
                        let flat = t.reshape(z, &[2, 6])?;
                        let logits = mlp(t, v, 3, flat)?;
                        let cls = ops::cls_loss(t, logits, &y)?;
                        let reg = ops::presence_loss(t, pres)?;
                        ops::total_loss(t, cls, reg, 0.7)
                    }),
                )
            },
        },
        Case {
            name: "l_ept",
            build: |r| {
                let y = labels(r, 3, 4);
                (
                    moe_inputs(r, 3, 2, 3, 4),
                    Box::new(move |t, v| {
                        let (probs, _, _) = moe_forward(t, v, 2)?;
                        moe::expert_loss(t, probs, &y)
                    }),
                )
            },
        },
        Case {
            name: "l_g",
            build: |r| {
                let y = labels(r, 3, 4);
                let gamma = r.random_range(0.5..2.0);
                (
                    moe_inputs(r, 3, 3, 3, 4),
                    Box::new(move |t, v| {
                        let (_, w, agg) = moe_forward(t, v, 3)?;
                        moe::gate_loss(t, agg, w, &y, gamma)
                    }),
                )
            },
        },
        Case {
            name: "moe_total",
            build: |r| {
                let y = labels(r, 3, 4);
                (
                    moe_inputs(r, 3, 3, 3, 4),
                    Box::new(move |t, v| {
                        let (probs, w, agg) = moe_forward(t, v, 3)?;
                        let e = moe::expert_loss(t, probs, &y)?;
                        let g = moe::gate_loss(t, agg, w, &y, 1.0)?;
                        moe::total_loss(t, e, g)
                    }),
                )
            },
        },
    ]
}

/// Runs `case` on each seed and keeps the worst errors.
pub fn run_case(case: &Case, seeds: impl IntoIterator<Item = u64>) -> Result<CaseReport> {
    let mut worst = GradCheck::default();
    for seed in seeds {
        let mut rng = rng_for(seed, derive_seed(0x6772_6164, hash_name(case.name)));
        let (inputs, f) = (case.build)(&mut rng);
        worst = worst.merge(gradcheck::check(&inputs, gradcheck::STEP, |t, v| f(t, v))?);
    }
    Ok(CaseReport {
        name: case.name,
        result: worst,
    })
}

/// Runs every case on each seed.
pub fn run_all(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CaseReport>> {
    cases().iter().map(|c| run_case(c, seeds.clone())).collect()
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}
