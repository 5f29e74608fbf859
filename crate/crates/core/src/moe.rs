//! Concept-based recognition: one expert per concept, combined by a gate.
//!
//! Expert `j` sees only row `j` of the concept features and outputs a class
//! distribution. The gate sees all rows and outputs simplex weights over the
//! experts; the prediction is the weighted mixture of expert distributions.
//! The gate weights are the per-concept importance explanation.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::Mlp;
use crate::numerics::{Binding, ParamStore, Tape, Tensor, Var};
use crate::partition::ConceptFeatures;

/// Floor applied to probabilities inside the log of the likelihood losses.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub num_concepts: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub expert_hidden: usize,
    pub gate_hidden: usize,
}

impl MoeConfig {
    pub fn new(num_concepts: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            num_concepts,
            feature_dim,
            num_classes,
            expert_hidden: 32,
            gate_hidden: 32,
        }
    }
}

/// Classifier over a single concept's feature row.
#[derive(Clone, Copy, Debug)]
pub struct Expert {
    pub index: usize,
    pub mlp: Mlp,
}

/// Maps all concept features to importance weights on the simplex.
#[derive(Clone, Copy, Debug)]
pub struct GateNetwork {
    pub mlp: Mlp,
}

/// Detached result of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub weights: Vec<f64>,
    pub expert_probs: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
    pub predicted_class: usize,
}

/// Tape handles for one batch through the recognition model.
#[derive(Clone, Copy, Debug)]
pub struct MoeForward {
    /// `[N,K]`
    pub weights: Var,
    /// `[N,K,C]`
    pub expert_probs: Var,
    /// `[N,C]`
    pub aggregate: Var,
}

#[derive(Clone, Debug)]
pub struct MoeModel {
    config: MoeConfig,
    params: ParamStore,
    experts: Vec<Expert>,
    gate: GateNetwork,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mixture `Σ_j w_j · expert_probs[j]` and its arg-max class.
pub fn aggregate(weights: &[f64], expert_probs: &[Vec<f64>]) -> Result<GateOutput> {
    if weights.is_empty() || weights.len() != expert_probs.len() {
        return Err(shape_err(
            "aggregate",
            format!("{} weights for {} experts", weights.len(), expert_probs.len()),
        ));
    }
    let c = expert_probs[0].len();
    if c == 0 || expert_probs.iter().any(|p| p.len() != c) {
        return Err(shape_err("aggregate", "expert outputs differ in length"));
    }
    let mut mix = vec![0.0; c];
    for (w, probs) in weights.iter().zip(expert_probs) {
        for (m, p) in mix.iter_mut().zip(probs) {
            *m += w * p;
        }
    }
    Ok(GateOutput {
        weights: weights.to_vec(),
        expert_probs: expert_probs.to_vec(),
        predicted_class: argmax(&mix),
        aggregate: mix,
    })
}

/// `−(1/N) Σ_i Σ_j log f_j(y_i)` for expert outputs `[N,K,C]`.
pub fn expert_loss(tape: &mut Tape, expert_probs: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(expert_probs).to_vec();
    if s.len() != 3 || s[0] != labels.len() {
        return Err(shape_err(
            "expert_loss",
            format!("expert outputs {s:?}, {} labels", labels.len()),
        ));
    }
    let (n, k, c) = (s[0], s[1], s[2]);
    let flat = tape.reshape(expert_probs, &[n * k, c])?;
    let repeated: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, k)).collect();
    let mean = tape.nll_prob(flat, &repeated, PROB_FLOOR)?;
    Ok(tape.scale(mean, k as f64))
}

/// `γ · (1/(K·N)) Σ_i Σ_j (w_ij − 1/K)²` for weights `[N,K]`.
pub fn weight_penalty(tape: &mut Tape, weights: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    let s = tape.shape(weights).to_vec();
    if s.len() != 2 {
        return Err(shape_err("weight_penalty", format!("weights {s:?}")));
    }
    let centered = tape.add_scalar(weights, -1.0 / s[1] as f64);
    let sq = tape.square(centered);
    let mean = tape.mean(sq);
    Ok(tape.scale(mean, gamma))
}

/// Aggregate cross-entropy plus the uniformity penalty on gate weights.
pub fn gate_loss(tape: &mut Tape, aggregate: Var, weights: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    let (sa, sw) = (tape.shape(aggregate), tape.shape(weights));
    if sa.len() != 2 || sw.len() != 2 || sa[0] != sw[0] {
        return Err(shape_err("gate_loss", format!("aggregate {sa:?}, weights {sw:?}")));
    }
    let ce = tape.nll_prob(aggregate, labels, PROB_FLOOR)?;
    let penalty = weight_penalty(tape, weights, gamma)?;
    tape.add(ce, penalty)
}

/// `l_ept + l_g`.
pub fn total_loss(tape: &mut Tape, expert: Var, gate: Var) -> Result<Var> {
    tape.add(expert, gate)
}

/// Plain-value form of [`gate_loss`] for weights and aggregates given per sample.
pub fn gate_loss_value(aggregate: &[Vec<f64>], weights: &[Vec<f64>], labels: &[usize], gamma: f64) -> Result<f64> {
    let n = aggregate.len();
    if n == 0 || weights.len() != n {
        return Err(shape_err("gate_loss", "aggregate and weights differ in batch size"));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![n, aggregate[0].len()], aggregate.concat())?);
    let w = tape.constant(Tensor::new(vec![n, weights[0].len()], weights.concat())?);
    let l = gate_loss(&mut tape, a, w, labels, gamma)?;
    Ok(tape.value(l).item())
}

/// Plain-value form of [`expert_loss`]: `expert_probs[i][j]` is expert `j`'s
/// distribution for sample `i`.
pub fn expert_loss_value(expert_probs: &[Vec<Vec<f64>>], labels: &[usize]) -> Result<f64> {
    let n = expert_probs.len();
    let k = expert_probs.first().map_or(0, Vec::len);
    let c = expert_probs.first().and_then(|e| e.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = expert_probs.iter().flatten().flatten().copied().collect();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![n, k, c], flat)?);
    let l = expert_loss(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

impl MoeModel {
    pub fn new<R: Rng>(config: MoeConfig, rng: &mut R) -> Result<Self> {
        let (k, d, c) = (config.num_concepts, config.feature_dim, config.num_classes);
        if k < 1 || d < 1 || c < 1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate recognition config {config:?}"
            )));
        }
        let mut params = ParamStore::new();
        let experts = (0..k)
            .map(|j| {
                Ok(Expert {
                    index: j,
                    mlp: Mlp::new(&mut params, &format!("expert{j}"), (d, config.expert_hidden, c), rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = GateNetwork {
            mlp: Mlp::new(&mut params, "gate", (k * d, config.gate_hidden, k), rng)?,
        };
        Ok(Self {
            config,
            params,
            experts,
            gate,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gate(&self) -> &GateNetwork {
        &self.gate
    }

    /// Class distributions `[N,C]` of expert `j` on rows `[N,D]`.
    pub fn expert_graph(&self, tape: &mut Tape, p: &Binding, j: usize, rows: Var) -> Result<Var> {
        let logits = self.experts[j].mlp.forward(tape, p, rows)?;
        tape.softmax(logits, 1)
    }

    /// Gate weights `[N,K]` for concept features `[N,K,D]`.
    pub fn gate_graph(&self, tape: &mut Tape, p: &Binding, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let flat = tape.reshape(z, &[n, self.config.num_concepts * self.config.feature_dim])?;
        let logits = self.gate.mlp.forward(tape, p, flat)?;
        tape.softmax(logits, 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, z: Var) -> Result<MoeForward> {
        let s = tape.shape(z).to_vec();
        let (k, d) = (self.config.num_concepts, self.config.feature_dim);
        if s.len() != 3 || s[1] != k || s[2] != d {
            return Err(shape_err(
                "moe_forward",
                format!("concept features {s:?}, expected [N,{k},{d}]"),
            ));
        }
        let n = s[0];
        let weights = self.gate_graph(tape, p, z)?;
        let per_expert = (0..k)
            .map(|j| {
                let rows = tape.select(z, 1, j)?;
                self.expert_graph(tape, p, j, rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let expert_probs = tape.stack(&per_expert, 1)?;
        let w = tape.reshape(weights, &[n, k, 1])?;
        let weighted = tape.mul(w, expert_probs)?;
        let aggregate = tape.sum_axis(weighted, 1, false)?;
        Ok(MoeForward {
            weights,
            expert_probs,
            aggregate,
        })
    }

    /// Class distribution of expert `j` for one concept row.
    pub fn expert_forward(&self, j: usize, row: &[f64]) -> Result<Vec<f64>> {
        if j >= self.config.num_concepts {
            return Err(Error::InvalidArgument(format!("no expert {j}")));
        }
        if row.len() != self.config.feature_dim {
            return Err(shape_err(
                "expert_forward",
                format!("row of {} for dim {}", row.len(), self.config.feature_dim),
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, row.len()], row.to_vec())?);
        let probs = self.expert_graph(&mut tape, &p, j, x)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Gate weights for one sample.
    pub fn gate_forward(&self, z: &ConceptFeatures) -> Result<Vec<f64>> {
        self.check_features(z)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_parts(vec![1, z.num_concepts, z.dim], z.rows.clone()));
        let w = self.gate_graph(&mut tape, &p, x)?;
        Ok(tape.value(w).data().to_vec())
    }

    fn check_features(&self, z: &ConceptFeatures) -> Result<()> {
        if z.num_concepts != self.config.num_concepts || z.dim != self.config.feature_dim {
            return Err(shape_err(
                "concept_features",
                format!(
                    "{}×{} for a {}×{} model",
                    z.num_concepts, z.dim, self.config.num_concepts, self.config.feature_dim
                ),
            ));
        }
        Ok(())
    }

    /// Batched gradient-free prediction.
    pub fn predict(&self, zs: &[ConceptFeatures]) -> Result<Vec<GateOutput>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        for z in zs {
            self.check_features(z)?;
        }
        let (k, d, c) = (
            self.config.num_concepts,
            self.config.feature_dim,
            self.config.num_classes,
        );
        let n = zs.len();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let flat = zs.iter().flat_map(|z| z.rows.iter().copied()).collect();
        let x = tape.constant(Tensor::from_parts(vec![n, k, d], flat));
        let out = self.forward(&mut tape, &p, x)?;
        let w = tape.value(out.weights).data();
        let e = tape.value(out.expert_probs).data();
        let a = tape.value(out.aggregate).data();
        Ok((0..n)
            .map(|i| {
                let aggregate = a[i * c..(i + 1) * c].to_vec();
                GateOutput {
                    weights: w[i * k..(i + 1) * k].to_vec(),
                    expert_probs: (0..k)
                        .map(|j| e[(i * k + j) * c..(i * k + j + 1) * c].to_vec())
                        .collect(),
                    predicted_class: argmax(&aggregate),
                    aggregate,
                }
            })
            .collect())
    }
}
