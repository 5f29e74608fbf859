mod common;

use concept_moe::numerics::{gaussian_kernel2d, Tape, Tensor};
use concept_moe::partition::{
    concept_presence_loss, hard_partition, occurrence_probs, ops, partition_total_loss, pool_concept_features,
    presence_prob, ConceptBank, ConceptFeatures, OccurrenceMap, PartitionConfig, PartitionModel,
};
use concept_moe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    k: usize,
    d: usize,
    h: usize,
    w: usize,
    features: Vec<f64>,
    concepts: Vec<f64>,
    alpha: Vec<f64>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (k, d, h, w) = (
            rng.random_range(1..=4),
            rng.random_range(1..=8),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        Self {
            k,
            d,
            h,
            w,
            features: common::uniform_vec(rng, d * h * w, -1.0, 1.0),
            concepts: common::uniform_vec(rng, k * d, -1.0, 1.0),
            alpha: common::uniform_vec(rng, k, 0.3, 0.95),
        }
    }

    fn features(&self) -> Tensor {
        Tensor::new(vec![self.d, self.h, self.w], self.features.clone()).unwrap()
    }

    fn bank(&self) -> ConceptBank {
        ConceptBank::with_alpha(
            Tensor::new(vec![self.k, self.d], self.concepts.clone()).unwrap(),
            &self.alpha,
        )
        .unwrap()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Occurrence probabilities with `α` given directly, so `α = 1` is allowed.
fn occurrence_raw_alpha(s: &[f64], concepts: &[f64], k: usize, alpha: &[f64]) -> Vec<f64> {
    let d = s.len();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, d, 1, 1], s.to_vec()).unwrap());
    let c = tape.constant(Tensor::new(vec![k, d], concepts.to_vec()).unwrap());
    let a = tape.constant(Tensor::from_vec(alpha.to_vec()));
    let o = ops::occurrence_probs(&mut tape, f, c, a).unwrap();
    tape.value(o).data().to_vec()
}

#[test]
fn single_concept_is_certain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inst = Instance::random(&mut rng);
    inst.k = 1;
    inst.concepts.truncate(inst.d);
    inst.alpha.truncate(1);
    let map = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
    assert!(map.probs.iter().all(|&p| p == 1.0));
}

#[test]
fn two_concept_hand_example() {
    let o = occurrence_raw_alpha(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 1.0]);
    assert!((o[0] - 0.7311).abs() < 1e-4, "{o:?}");
    assert!((o[1] - 0.2689).abs() < 1e-4, "{o:?}");
    let expected = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((o[0] - expected).abs() < 1e-15);
}

#[test]
fn equidistant_position_is_uniform() {
    // s at the origin, concepts on the unit circle
    for k in 1..=6 {
        let concepts: Vec<f64> = (0..k)
            .flat_map(|j| {
                let t = j as f64 * std::f64::consts::TAU / k as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let o = occurrence_raw_alpha(&[0.0, 0.0], &concepts, k, &vec![0.5; k]);
        for p in o {
            assert!((p - 1.0 / k as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn bank_rejects_mismatched_dims() {
    let bank = ConceptBank::with_alpha(Tensor::zeros(&[2, 3]), &[0.5, 0.5]).unwrap();
    let err = occurrence_probs(&Tensor::zeros(&[4, 2, 2]), &bank).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    assert!(ConceptBank::with_alpha(Tensor::zeros(&[2, 3]), &[0.5, 1.0]).is_err());
    assert!(ConceptBank::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])).is_err());
}

#[test]
fn hard_partition_examples() {
    let map = OccurrenceMap::new(2, 1, 1, vec![0.7, 0.3]).unwrap();
    assert_eq!(hard_partition(&map), vec![0]);
    let tie = OccurrenceMap::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
    assert_eq!(hard_partition(&tie), vec![0]);
    let three = OccurrenceMap::new(3, 1, 2, vec![0.2, 0.2, 0.4, 0.4, 0.4, 0.4]).unwrap();
    assert_eq!(hard_partition(&three), vec![1, 1]);
}

#[test]
fn presence_examples() {
    let ones = OccurrenceMap::new(1, 3, 4, vec![1.0; 12]).unwrap();
    assert_eq!(
        presence_prob(&ones, &gaussian_kernel2d(1, 1.0).unwrap()).unwrap(),
        vec![1.0]
    );

    let mut probs = vec![0.0; 2 * 25];
    probs[12] = 1.0;
    for (i, p) in probs[25..].iter_mut().enumerate() {
        *p = if i == 12 { 0.0 } else { 1.0 };
    }
    let map = OccurrenceMap::new(2, 5, 5, probs).unwrap();
    let kernel = gaussian_kernel2d(3, 1.0).unwrap();
    let p = presence_prob(&map, &kernel).unwrap();
    assert!((p[0] - 0.2042).abs() < 1e-4, "{p:?}");
    assert_eq!(p[0], kernel.data()[4]);
}

#[test]
fn oversized_kernel_rejected() {
    let map = OccurrenceMap::new(1, 1, 1, vec![1.0]).unwrap();
    assert!(presence_prob(&map, &gaussian_kernel2d(3, 1.0).unwrap()).is_ok());
    let err = presence_prob(&map, &gaussian_kernel2d(5, 1.0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn pooling_examples() {
    // H = W = 1, K = 1: p = 1, σ = 1
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 0.0]).unwrap());
    let c = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let a = tape.constant(Tensor::from_vec(vec![1.0]));
    let r = ops::scaled_residuals(&mut tape, f, c, a).unwrap();
    let p = ops::occurrence_from_residuals(&mut tape, r).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0]);
    let z = ops::pool_from_residuals(&mut tape, r, p).unwrap();
    assert_eq!(tape.value(z).data(), &[1.0, 0.0]);

    // every position equals the concept: zero residual, zero row
    let d = 3;
    let c = vec![0.2, -0.4, 0.9];
    let features: Vec<f64> = c.iter().flat_map(|&v| vec![v; 4]).collect();
    let bank = ConceptBank::with_alpha(Tensor::new(vec![1, d], c).unwrap(), &[0.5]).unwrap();
    let feats = Tensor::new(vec![d, 2, 2], features).unwrap();
    let map = occurrence_probs(&feats, &bank).unwrap();
    let z = pool_concept_features(&feats, &map, &bank).unwrap();
    assert_eq!(z.rows, vec![0.0; d]);
}

#[test]
fn oracles_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kernel = gaussian_kernel2d(3, 1.0).unwrap();
    for _ in 0..100 {
        let inst = Instance::random(&mut rng);
        let area = inst.h * inst.w;
        let map = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
        let bank_alpha = inst.bank().alpha();
        let o = common::occurrence(&inst.features, inst.d, area, &inst.concepts, &bank_alpha);
        assert!(max_diff(&map.probs, &o) < 1e-10);
        assert_eq!(hard_partition(&map), common::hard_partition(&map.probs, inst.k, area));
        if 3 <= 2 * inst.h.min(inst.w) + 1 {
            let p = presence_prob(&map, &kernel).unwrap();
            let oracle = common::presence(&map.probs, inst.k, inst.h, inst.w, kernel.data(), 3);
            assert!(max_diff(&p, &oracle) < 1e-10);
        }
        let z = pool_concept_features(&inst.features(), &map, &inst.bank()).unwrap();
        let oracle = common::pool(&inst.features, inst.d, area, &inst.concepts, &bank_alpha, &map.probs);
        assert!(max_diff(&z.rows, &oracle) < 1e-10);
    }
}

#[test]
fn cls_loss_examples() {
    let model = PartitionModel::new(PartitionConfig::new(2, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let z = ConceptFeatures::new(2, 32, vec![0.0; 64]).unwrap();
    // zero input through a zero-bias MLP gives equal logits
    let l = model.classification_loss(&[z.clone(), z], &[0, 3]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let mut tape = Tape::new();
    let mut logits = vec![0.0; 8];
    logits[1] = 1e6;
    logits[6] = 1e6;
    let x = tape.constant(Tensor::new(vec![2, 4], logits.clone()).unwrap());
    let l = ops::cls_loss(&mut tape, x, &[1, 2]).unwrap();
    assert!(tape.value(l).item() < 1e-12);
    let ce = tape.cross_entropy(x, &[1, 2]).unwrap();
    assert_eq!(tape.value(l).item(), tape.value(ce).item());
    assert_eq!(tape.value(l).item(), common::cross_entropy(&logits, 4, &[1, 2]));

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        ops::cls_loss(&mut tape, x, &[4]),
        Err(Error::InvalidLabel { .. })
    ));
}

#[test]
fn presence_loss_examples() {
    let full = concept_presence_loss(&[vec![1.0; 3], vec![1.0; 3]]).unwrap();
    assert!((full - (1.0f64 + 1e-5).ln()).abs() < 1e-15);
    assert!((full - 1e-5).abs() < 1e-9);

    let p = (-2.0f64).exp() - 1e-5;
    let l = concept_presence_loss(&[vec![1.0, p]]).unwrap();
    assert!((l - ((1.0f64 + 1e-5).ln() + 2.0) / 2.0).abs() < 1e-12);
    assert!((l - 1.000005).abs() < 1e-6);

    let zero = concept_presence_loss(&[vec![0.0]]).unwrap();
    assert!((zero - 11.5129).abs() < 1e-4);

    for bad in [1.0 + 1e-5, -1e-5] {
        let err = concept_presence_loss(&[vec![bad]]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
    assert!(concept_presence_loss(&[vec![1.0 + 5e-7]]).is_ok());
}

#[test]
fn presence_loss_decreases_in_each_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mut row: Vec<f64> = common::uniform_vec(&mut rng, 3, 0.0, 1.0 - 1e-5);
        let before = concept_presence_loss(&[row.clone()]).unwrap();
        let j = rng.random_range(0..3);
        row[j] = rng.random_range(row[j]..=1.0 - 1e-5);
        let after = concept_presence_loss(&[row]).unwrap();
        assert!(after <= before);
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(partition_total_loss(1.0, 2.0, 1.0).unwrap(), 3.0);
    assert_eq!(partition_total_loss(0.75, 5.0, 0.0).unwrap(), 0.75);
    assert!(partition_total_loss(1.0, 1.0, -1.0).is_err());
}

#[test]
fn model_inference_agrees_with_plain_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = PartitionModel::new(PartitionConfig::new(3, 5), &mut rng).unwrap();
    let images = Tensor::new(
        vec![2, 3, 32, 32],
        common::uniform_vec(&mut rng, 2 * 3 * 32 * 32, 0.0, 1.0),
    )
    .unwrap();
    let outs = model.infer(&images).unwrap();
    assert_eq!(outs.len(), 2);
    for (i, out) in outs.iter().enumerate() {
        let img = Tensor::new(vec![3, 32, 32], images.data()[i * 3072..(i + 1) * 3072].to_vec()).unwrap();
        let feats = model.features(&img).unwrap();
        assert_eq!(feats.shape(), &[32, 8, 8]);
        let map = occurrence_probs(&feats, &model.bank()).unwrap();
        assert!(max_diff(&map.probs, &out.occurrence.probs) < 1e-12);
        let p = presence_prob(&map, model.kernel()).unwrap();
        assert!(max_diff(&p, &out.presence) < 1e-12);
        let z = pool_concept_features(&feats, &map, &model.bank()).unwrap();
        assert!(max_diff(&z.rows, &out.concept_features.rows) < 1e-12);
        assert_eq!(out.logits.len(), 5);
    }
    let bad = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(model.infer(&bad), Err(Error::Shape { .. })));
}

#[test]
fn initial_smoothing_is_one_half() {
    let model = PartitionModel::new(PartitionConfig::new(4, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(model.bank().alpha(), vec![0.5; 4]);
}

fn instance_strategy() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn occurrence_columns_are_distributions(seed in instance_strategy()) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let map = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
        let area = inst.h * inst.w;
        for p in 0..area {
            let total: f64 = (0..inst.k).map(|j| map.probs[j * area + p]).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        prop_assert!(map.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn pooled_rows_are_unit_or_zero(seed in instance_strategy()) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let map = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
        let z = pool_concept_features(&inst.features(), &map, &inst.bank()).unwrap();
        for j in 0..inst.k {
            let norm = z.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-6, "norm {}", norm);
        }
    }
}

proptest! {
    #[test]
    fn occurrence_is_permutation_equivariant(seed in instance_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng);
        let mut perm: Vec<usize> = (0..inst.k).collect();
        for i in (1..inst.k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let concepts: Vec<f64> = perm.iter().flat_map(|&j| inst.concepts[j * inst.d..(j + 1) * inst.d].to_vec()).collect();
        let alpha: Vec<f64> = perm.iter().map(|&j| inst.alpha[j]).collect();
        let permuted = Instance { concepts, alpha, features: inst.features.clone(), ..inst };
        let base = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
        let moved = occurrence_probs(&permuted.features(), &permuted.bank()).unwrap();
        let area = inst.h * inst.w;
        for (new_j, &old_j) in perm.iter().enumerate() {
            prop_assert!(max_diff(moved.channel(new_j), base.channel(old_j)) < 1e-12);
        }
        prop_assert_eq!(moved.probs.len(), inst.k * area);
    }

    #[test]
    fn hard_partition_is_translation_invariant(seed in instance_strategy(), shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng);
        let area = inst.h * inst.w;
        let offset: Vec<f64> = (0..inst.d).map(|_| shift * rng.random_range(-1.0..1.0)).collect();
        let features = (0..inst.d * area).map(|i| inst.features[i] + offset[i / area]).collect();
        let concepts = (0..inst.k * inst.d).map(|i| inst.concepts[i] + offset[i % inst.d]).collect();
        let moved = Instance { features, concepts, alpha: inst.alpha.clone(), ..inst };
        let a = occurrence_probs(&inst.features(), &inst.bank()).unwrap();
        let b = occurrence_probs(&moved.features(), &moved.bank()).unwrap();
        // skip near-ties, where rounding of the shifted distances may flip the argmax
        let ha = hard_partition(&a);
        let hb = hard_partition(&b);
        for p in 0..area {
            let mut col: Vec<f64> = (0..inst.k).map(|j| a.probs[j * area + p]).collect();
            col.sort_by(|x, y| y.total_cmp(x));
            if inst.k == 1 || col[0] - col[1] > 1e-9 {
                prop_assert_eq!(ha[p], hb[p]);
            }
        }
    }
}
