//! Concept partition model.
//!
//! A convolutional backbone maps an image to a `D×H×W` feature map. Every
//! position is softly assigned to one of `K` learnable concept vectors; the
//! resulting occurrence map yields a hard partition, per-concept presence
//! probabilities and pooled per-concept features, which a small head
//! classifies.

pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Mlp};
use crate::numerics::{gaussian_kernel2d, Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// Input image extent expected by the backbone.
pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
/// Feature map extent after two 2×2 pools.
pub const FEATURE_SIZE: usize = IMAGE_SIZE / 4;

/// Concept vectors and their smoothing factors.
///
/// Smoothing is stored unconstrained; the effective `α_j = sigmoid(raw_j)`
/// always lies in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    /// `[K,D]`
    pub concepts: Tensor,
    /// `[K]`
    pub raw_smoothing: Tensor,
}

impl ConceptBank {
    pub fn new(concepts: Tensor, raw_smoothing: Tensor) -> Result<Self> {
        let cs = concepts.shape();
        if cs.len() != 2 || raw_smoothing.shape() != [cs[0]] {
            return Err(shape_err(
                "concept_bank",
                format!("concepts {cs:?}, smoothing {:?}", raw_smoothing.shape()),
            ));
        }
        Ok(Self {
            concepts,
            raw_smoothing,
        })
    }

    /// Bank whose effective smoothing factors equal `alpha` (each in (0,1)).
    pub fn with_alpha(concepts: Tensor, alpha: &[f64]) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidArgument(format!("smoothing factor {a} outside (0,1)")));
        }
        let raw = alpha.iter().map(|a| (a / (1.0 - a)).ln()).collect();
        Self::new(concepts, Tensor::from_vec(raw))
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.concepts.shape()[1]
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.raw_smoothing
            .data()
            .iter()
            .map(|r| 1.0 / (1.0 + (-r).exp()))
            .collect()
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        let c = tape.constant(self.concepts.clone());
        let raw = tape.constant(self.raw_smoothing.clone());
        (c, tape.sigmoid(raw))
    }
}

/// Per-position concept probabilities `O ∈ [0,1]^{K×H×W}`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceMap {
    pub num_concepts: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `[K,H,W]`.
    pub probs: Vec<f64>,
}

impl OccurrenceMap {
    /// Validates that entries lie in `[0,1]` and each position sums to 1.
    pub fn new(num_concepts: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if num_concepts * height * width != probs.len() || probs.is_empty() {
            return Err(shape_err(
                "occurrence_map",
                format!("{num_concepts}×{height}×{width} vs {}", probs.len()),
            ));
        }
        let map = Self {
            num_concepts,
            height,
            width,
            probs,
        };
        let area = height * width;
        for pos in 0..area {
            let total: f64 = (0..num_concepts).map(|j| map.probs[j * area + pos]).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "occurrence column {pos} sums to {total}"
                )));
            }
        }
        if map.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("occurrence probability outside [0,1]".into()));
        }
        Ok(map)
    }

    pub fn at(&self, concept: usize, y: usize, x: usize) -> f64 {
        self.probs[(concept * self.height + y) * self.width + x]
    }

    /// Probability plane of one concept, `[H·W]`.
    pub fn channel(&self, concept: usize) -> &[f64] {
        let area = self.height * self.width;
        &self.probs[concept * area..(concept + 1) * area]
    }

    fn to_batch(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.num_concepts, self.height * self.width], self.probs.clone())
    }
}

/// Pooled per-concept descriptors `Z ∈ R^{K×D}`; rows are unit length or zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptFeatures {
    pub num_concepts: usize,
    pub dim: usize,
    /// Row-major `[K,D]`.
    pub rows: Vec<f64>,
}

impl ConceptFeatures {
    pub fn new(num_concepts: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if num_concepts * dim != rows.len() || rows.is_empty() {
            return Err(shape_err(
                "concept_features",
                format!("{num_concepts}×{dim} vs {}", rows.len()),
            ));
        }
        Ok(Self {
            num_concepts,
            dim,
            rows,
        })
    }

    pub fn row(&self, concept: usize) -> &[f64] {
        &self.rows[concept * self.dim..(concept + 1) * self.dim]
    }

    /// Copy with the rows of every concept in `disabled` set to zero.
    pub fn with_rows_zeroed(&self, disabled: &[usize]) -> Self {
        let mut out = self.clone();
        for &j in disabled {
            out.rows[j * self.dim..(j + 1) * self.dim].fill(0.0);
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.num_concepts, self.dim], self.rows.clone())
    }
}

fn features_batch(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(shape_err("features", format!("expected [D,H,W], got {s:?}")));
    }
    features.reshape(&[1, s[0], s[1], s[2]])
}

/// Soft assignment of every feature position to the bank's concepts.
pub fn occurrence_probs(features: &Tensor, bank: &ConceptBank) -> Result<OccurrenceMap> {
    let batch = features_batch(features)?;
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    let mut tape = Tape::new();
    let f = tape.constant(batch);
    let (c, a) = bank.bind(&mut tape);
    let probs = ops::occurrence_probs(&mut tape, f, c, a)?;
    OccurrenceMap::new(bank.num_concepts(), h, w, tape.value(probs).data().to_vec())
}

/// Most probable concept per position (lowest index on ties), row-major `[H·W]`.
pub fn hard_partition(map: &OccurrenceMap) -> Vec<usize> {
    let area = map.height * map.width;
    (0..area)
        .map(|pos| {
            let mut best = 0;
            for j in 1..map.num_concepts {
                if map.probs[j * area + pos] > map.probs[best * area + pos] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `p(c_j|X) = max_hw (G ∗ O_j)` for each concept.
pub fn presence_prob(map: &OccurrenceMap, kernel: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let probs = tape.constant(map.to_batch());
    let p = ops::presence(&mut tape, probs, map.height, map.width, kernel)?;
    Ok(tape.value(p).data().to_vec())
}

/// Normalized probability-weighted mean residual per concept.
pub fn pool_concept_features(features: &Tensor, map: &OccurrenceMap, bank: &ConceptBank) -> Result<ConceptFeatures> {
    let batch = features_batch(features)?;
    if batch.shape()[2] != map.height || batch.shape()[3] != map.width || map.num_concepts != bank.num_concepts() {
        return Err(shape_err(
            "pool_concept_features",
            "feature map and occurrence map disagree",
        ));
    }
    let mut tape = Tape::new();
    let f = tape.constant(batch);
    let probs = tape.constant(map.to_batch());
    let (c, a) = bank.bind(&mut tape);
    let z = ops::pool_concept_features(&mut tape, f, probs, c, a)?;
    ConceptFeatures::new(bank.num_concepts(), bank.dim(), tape.value(z).data().to_vec())
}

/// Presence regularizer over `presence[N][K]`.
pub fn concept_presence_loss(presence: &[Vec<f64>]) -> Result<f64> {
    let n = presence.len();
    let k = presence.first().map_or(0, Vec::len);
    if n == 0 || k == 0 || presence.iter().any(|row| row.len() != k) {
        return Err(shape_err("concept_presence_loss", "expected a non-empty N×K table"));
    }
    let mut tape = Tape::new();
    let flat = presence.iter().flatten().copied().collect();
    let p = tape.constant(Tensor::from_parts(vec![n, k], flat));
    let l = ops::presence_loss(&mut tape, p)?;
    Ok(tape.value(l).item())
}

/// `cls + λ_r · reg` on plain values.
pub fn partition_total_loss(cls: f64, reg: f64, lambda_r: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(cls));
    let r = tape.constant(Tensor::scalar(reg));
    let t = ops::total_loss(&mut tape, c, r, lambda_r)?;
    Ok(tape.value(t).item())
}

/// Architecture of the partition model.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub num_concepts: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub conv_channels: [usize; 2],
    /// Kernel of the last backbone conv; small values limit how far a
    /// feature position sees across part boundaries.
    pub final_kernel: usize,
    pub head_hidden: usize,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
}

impl PartitionConfig {
    pub fn new(num_concepts: usize, num_classes: usize) -> Self {
        Self {
            num_concepts,
            num_classes,
            feature_dim: 32,
            conv_channels: [16, 32],
            final_kernel: 1,
            head_hidden: 64,
            kernel_size: 3,
            kernel_sigma: 1.0,
        }
    }
}

/// Tape handles for one batch through the partition model.
#[derive(Clone, Copy, Debug)]
pub struct PartitionForward {
    /// `[N,D,H,W]`
    pub features: Var,
    /// `[N,K,H·W]`
    pub probs: Var,
    /// `[N,K]`
    pub presence: Var,
    /// `[N,K,D]`
    pub concept_features: Var,
    /// `[N,C]`
    pub logits: Var,
}

/// Detached per-sample outputs of the partition model.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionOutput {
    pub occurrence: OccurrenceMap,
    pub presence: Vec<f64>,
    pub concept_features: ConceptFeatures,
    pub logits: Vec<f64>,
}

/// Backbone, concept bank and classification head with their parameters.
#[derive(Clone, Debug)]
pub struct PartitionModel {
    config: PartitionConfig,
    params: ParamStore,
    convs: [Conv2d; 3],
    concepts: ParamId,
    smoothing: ParamId,
    head: Mlp,
    kernel: Tensor,
}

impl PartitionModel {
    pub fn new<R: Rng>(config: PartitionConfig, rng: &mut R) -> Result<Self> {
        if config.num_concepts < 1 || config.feature_dim < 1 || config.num_classes < 1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate partition config {config:?}"
            )));
        }
        let kernel = gaussian_kernel2d(config.kernel_size, config.kernel_sigma)?;
        let mut params = ParamStore::new();
        let [c1, c2] = config.conv_channels;
        let d = config.feature_dim;
        let convs = [
            Conv2d::new(&mut params, "backbone.conv1", IMAGE_CHANNELS, c1, 3, 2.0, rng)?,
            Conv2d::new(&mut params, "backbone.conv2", c1, c2, 3, 2.0, rng)?,
            Conv2d::new(&mut params, "backbone.conv3", c2, d, config.final_kernel, 2.0, rng)?,
        ];
        let k = config.num_concepts;
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let concept_init = (0..k * d).map(|_| normal.sample(rng)).collect();
        let concepts = params.add("concepts.vectors", Tensor::from_parts(vec![k, d], concept_init))?;
        // sigmoid(0) = 0.5
        let smoothing = params.add("concepts.smoothing", Tensor::zeros(&[k]))?;
        let head = Mlp::new(
            &mut params,
            "head",
            (k * d, config.head_hidden, config.num_classes),
            rng,
        )?;
        Ok(Self {
            config,
            params,
            convs,
            concepts,
            smoothing,
            head,
            kernel,
        })
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    /// Current concept bank values.
    pub fn bank(&self) -> ConceptBank {
        ConceptBank {
            concepts: self.params.get(self.concepts).value.clone(),
            raw_smoothing: self.params.get(self.smoothing).value.clone(),
        }
    }

    /// Backbone feature map `[N,D,H,W]` for images `[N,3,32,32]` in `[0,1]`.
    pub fn backbone(&self, tape: &mut Tape, p: &Binding, images: Var) -> Result<Var> {
        let x = tape.add_scalar(images, -0.5);
        let x = self.convs[0].forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = tape.max_pool2d(x, 2)?;
        let x = self.convs[1].forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = tape.max_pool2d(x, 2)?;
        self.convs[2].forward(tape, p, x)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, images: Var) -> Result<PartitionForward> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(shape_err("partition_forward", format!("images {s:?}")));
        }
        let n = s[0];
        let features = self.backbone(tape, p, images)?;
        let (h, w) = (tape.shape(features)[2], tape.shape(features)[3]);
        let alpha = tape.sigmoid(p[self.smoothing]);
        let residuals = ops::scaled_residuals(tape, features, p[self.concepts], alpha)?;
        let probs = ops::occurrence_from_residuals(tape, residuals)?;
        let presence = ops::presence(tape, probs, h, w, &self.kernel)?;
        let z = ops::pool_from_residuals(tape, residuals, probs)?;
        let flat = tape.reshape(z, &[n, self.config.num_concepts * self.config.feature_dim])?;
        let logits = self.head.forward(tape, p, flat)?;
        Ok(PartitionForward {
            features,
            probs,
            presence,
            concept_features: z,
            logits,
        })
    }

    /// Gradient-free forward pass over a batch of images `[N,3,32,32]`.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<PartitionOutput>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        let n = images.shape()[0];
        let (k, d, c) = (
            self.config.num_concepts,
            self.config.feature_dim,
            self.config.num_classes,
        );
        let fs = tape.shape(out.features).to_vec();
        let (h, w) = (fs[2], fs[3]);
        let probs = tape.value(out.probs).data();
        let presence = tape.value(out.presence).data();
        let z = tape.value(out.concept_features).data();
        let logits = tape.value(out.logits).data();
        (0..n)
            .map(|i| {
                Ok(PartitionOutput {
                    occurrence: OccurrenceMap {
                        num_concepts: k,
                        height: h,
                        width: w,
                        probs: probs[i * k * h * w..(i + 1) * k * h * w].to_vec(),
                    },
                    presence: presence[i * k..(i + 1) * k].to_vec(),
                    concept_features: ConceptFeatures::new(k, d, z[i * k * d..(i + 1) * k * d].to_vec())?,
                    logits: logits[i * c..(i + 1) * c].to_vec(),
                })
            })
            .collect()
    }

    /// Feature map `[D,H,W]` of one image `[3,32,32]`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape().to_vec();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        let f = self.backbone(&mut tape, &p, x)?;
        let fs = tape.shape(f).to_vec();
        tape.value(f).reshape(&fs[1..])
    }

    /// Mean head cross-entropy for pooled concept features and labels.
    pub fn classification_loss(&self, z: &[ConceptFeatures], labels: &[usize]) -> Result<f64> {
        let (k, d) = (self.config.num_concepts, self.config.feature_dim);
        if z.is_empty() || z.iter().any(|f| f.num_concepts != k || f.dim != d) {
            return Err(shape_err(
                "partition_cls_loss",
                "concept features do not match the head",
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let flat = z.iter().flat_map(|f| f.rows.iter().copied()).collect();
        let x = tape.constant(Tensor::from_parts(vec![z.len(), k * d], flat));
        let logits = self.head.forward(&mut tape, &p, x)?;
        let l = ops::cls_loss(&mut tape, logits, labels)?;
        Ok(tape.value(l).item())
    }
}
