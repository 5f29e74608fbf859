use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hasher};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moe::{self, MoeConfig, MoeModel};
use crate::numerics::{sgd_step, OptimizerConfig, ParamStore, Tape, Tensor};
use crate::partition::{ops, ConceptFeatures, PartitionConfig, PartitionModel};
use crate::rng::{rng_for, stream};
use crate::synthdata::{images_tensor, SynthSample};

use super::checkpoint::{Checkpoint, ParamSection, RngState, Stage};
use super::config::TrainConfig;

/// Batch size used for gradient-free passes.
const INFER_CHUNK: usize = 64;

/// One row of a stage's metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// `l_cls` in stage 1, `l_ept` in stage 2.
    pub primary: f64,
    /// `l_r` in stage 1, `l_g` in stage 2.
    pub secondary: f64,
    /// Running training accuracy over the epoch's minibatches.
    pub accuracy: f64,
}

pub const PARTITION_CSV_HEADER: &str = "epoch,loss,l_cls,l_r,accuracy";
pub const MOE_CSV_HEADER: &str = "epoch,loss,l_ept,l_g,accuracy";

/// Metrics as CSV with a header row. Floats use shortest round-trip form.
pub fn metrics_csv(header: &str, rows: &[EpochMetrics]) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.loss, r.primary, r.secondary, r.accuracy
        );
    }
    out
}

fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next().is_none() {
        return Ok(Vec::new());
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Corrupt(format!("bad metrics row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: num(f[1])?,
                primary: num(f[2])?,
                secondary: num(f[3])?,
                accuracy: num(f[4])?,
            })
        })
        .collect()
}

/// Order-sensitive hash of every parameter value's bit pattern.
pub fn param_fingerprint(store: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    for p in store.iter() {
        h.write(p.name.as_bytes());
        for v in p.value.data() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

fn check_data(data: &[SynthSample], num_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.label >= num_classes) {
        return Err(Error::InvalidLabel {
            label: s.label,
            num_classes,
        });
    }
    Ok(())
}

fn count_correct(scores: &[f64], width: usize, labels: &[usize]) -> usize {
    scores
        .chunks_exact(width)
        .zip(labels)
        .filter(|(row, &y)| moe::argmax(row) == y)
        .count()
}

fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Running sums for one epoch, weighted by batch size.
#[derive(Default)]
struct EpochAccumulator {
    loss: f64,
    primary: f64,
    secondary: f64,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn add(&mut self, n: usize, loss: f64, primary: f64, secondary: f64, correct: usize) {
        let w = n as f64;
        self.loss += w * loss;
        self.primary += w * primary;
        self.secondary += w * secondary;
        self.correct += correct;
        self.seen += n;
    }

    fn finish(self, epoch: usize) -> EpochMetrics {
        let n = self.seen as f64;
        EpochMetrics {
            epoch,
            loss: self.loss / n,
            primary: self.primary / n,
            secondary: self.secondary / n,
            accuracy: self.correct as f64 / n,
        }
    }
}

/// Stage 1: backbone, concept bank and head trained on `l_cls + λ_r·l_r`.
#[derive(Clone, Debug)]
pub struct PartitionTrainer {
    config: TrainConfig,
    model: PartitionModel,
    rng: ChaCha8Rng,
    log: Vec<EpochMetrics>,
}

impl PartitionTrainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut init = rng_for(config.seed, stream::PARTITION_INIT);
        let model = PartitionModel::new(PartitionConfig::new(config.num_concepts, num_classes), &mut init)?;
        let rng = rng_for(config.seed, stream::PARTITION_SHUFFLE);
        Ok(Self {
            config,
            model,
            rng,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PartitionModel {
        &self.model
    }

    pub fn into_model(self) -> PartitionModel {
        self.model
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn run_epoch(&mut self, data: &[SynthSample]) -> Result<EpochMetrics> {
        let num_classes = self.model.config().num_classes;
        check_data(data, num_classes)?;
        let epoch = self.log.len() + 1;
        let opt = self.config.optimizer();
        let mut acc = EpochAccumulator::default();
        for batch in shuffled_batches(&mut self.rng, data.len(), self.config.batch_size) {
            let samples: Vec<&SynthSample> = batch.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let p = self.model.params().bind(&mut tape, true);
            let x = tape.constant(images_tensor(&samples)?);
            let out = self.model.forward(&mut tape, &p, x)?;
            let cls = ops::cls_loss(&mut tape, out.logits, &labels)?;
            let reg = ops::presence_loss(&mut tape, out.presence)?;
            let total = ops::total_loss(&mut tape, cls, reg, self.config.lambda_r)?;
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "partition",
                    epoch,
                    loss,
                });
            }
            let correct = count_correct(tape.value(out.logits).data(), num_classes, &labels);
            acc.add(
                labels.len(),
                loss,
                tape.value(cls).item(),
                tape.value(reg).item(),
                correct,
            );
            let mut grads = tape.backward(total)?;
            let params = self.model.params_mut();
            params.collect_grads(&p, &mut grads)?;
            sgd_step(params.params_mut(), &opt)?;
        }
        let m = acc.finish(epoch);
        self.log.push(m);
        Ok(m)
    }

    /// Runs epochs until `config.epochs` have completed.
    pub fn run(&mut self, data: &[SynthSample]) -> Result<()> {
        while self.log.len() < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(PARTITION_CSV_HEADER, &self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_classes: self.model.config().num_classes,
            stage: Stage::Partition,
            epoch: self.log.len(),
            rng: RngState::capture(&self.rng),
            partition: ParamSection::capture(self.model.params()),
            moe: None,
            partition_log: self.metrics_csv(),
            moe_log: String::new(),
        }
    }

    /// Rebuilds a stage-1 trainer; works on stage-2 checkpoints too, yielding
    /// the finished partition model.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), ckpt.num_classes)?;
        ckpt.partition.restore_into(t.model.params_mut())?;
        t.log = parse_metrics_csv(&ckpt.partition_log)?;
        match ckpt.stage {
            Stage::Partition => {
                if t.log.len() != ckpt.epoch {
                    return Err(Error::Corrupt("epoch counter disagrees with the metrics log".into()));
                }
                t.rng = ckpt.rng.restore();
            }
            Stage::Moe => {}
        }
        Ok(t)
    }
}

/// Trains the partition model for `cfg.epochs` epochs.
pub fn train_partition(data: &[SynthSample], num_classes: usize, cfg: &TrainConfig) -> Result<PartitionTrainer> {
    let mut t = PartitionTrainer::new(cfg.clone(), num_classes)?;
    t.run(data)?;
    Ok(t)
}

/// Detached concept features for every sample, in order.
pub fn concept_features(model: &PartitionModel, data: &[SynthSample]) -> Result<Vec<ConceptFeatures>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(INFER_CHUNK) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        out.extend(
            model
                .infer(&images_tensor(&refs)?)?
                .into_iter()
                .map(|o| o.concept_features),
        );
    }
    Ok(out)
}

/// Optimizer for the gate parameters. The penalty's curvature grows with
/// `γ`, so the gate step is divided by `max(1, γ)`; experts use the plain
/// config.
pub fn gate_optimizer(config: &TrainConfig) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: config.learning_rate / config.gamma.max(1.0),
        ..config.optimizer()
    }
}

/// Stage 2: experts and gate trained on `l_ept + l_g` over frozen concept
/// features.
#[derive(Clone, Debug)]
pub struct MoeTrainer {
    config: TrainConfig,
    partition: PartitionModel,
    model: MoeModel,
    rng: ChaCha8Rng,
    log: Vec<EpochMetrics>,
}

impl MoeTrainer {
    pub fn new(config: TrainConfig, partition: PartitionModel) -> Result<Self> {
        config.validate()?;
        let pc = partition.config();
        if pc.num_concepts != config.num_concepts {
            return Err(Error::Config(format!(
                "num_concepts = {} but the partition model has {}",
                config.num_concepts, pc.num_concepts
            )));
        }
        let mut init = rng_for(config.seed, stream::MOE_INIT);
        let model = MoeModel::new(
            MoeConfig::new(pc.num_concepts, pc.feature_dim, pc.num_classes),
            &mut init,
        )?;
        let rng = rng_for(config.seed, stream::MOE_SHUFFLE);
        Ok(Self {
            config,
            partition,
            model,
            rng,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn partition(&self) -> &PartitionModel {
        &self.partition
    }

    pub fn model(&self) -> &MoeModel {
        &self.model
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn into_models(self) -> (PartitionModel, MoeModel) {
        (self.partition, self.model)
    }

    /// One epoch over precomputed concept features of the training set.
    pub fn run_epoch(&mut self, z: &[ConceptFeatures], labels: &[usize]) -> Result<EpochMetrics> {
        let mc = self.model.config().clone();
        if z.is_empty() || z.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature sets for {} labels",
                z.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= mc.num_classes) {
            return Err(Error::InvalidLabel {
                label: y,
                num_classes: mc.num_classes,
            });
        }
        let epoch = self.log.len() + 1;
        let opt = self.config.optimizer();
        let gate_opt = gate_optimizer(&self.config);
        let gate_start = self
            .model
            .params()
            .iter()
            .position(|p| p.name.starts_with("gate."))
            .expect("recognition model has a gate");
        let mut acc = EpochAccumulator::default();
        for batch in shuffled_batches(&mut self.rng, z.len(), self.config.batch_size) {
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let flat = batch.iter().flat_map(|&i| z[i].rows.iter().copied()).collect();
            let mut tape = Tape::new();
            let p = self.model.params().bind(&mut tape, true);
            let x = tape.constant(Tensor::new(vec![batch.len(), mc.num_concepts, mc.feature_dim], flat)?);
            let out = self.model.forward(&mut tape, &p, x)?;
            let ept = moe::expert_loss(&mut tape, out.expert_probs, &ys)?;
            let gate = moe::gate_loss(&mut tape, out.aggregate, out.weights, &ys, self.config.gamma)?;
            let total = moe::total_loss(&mut tape, ept, gate)?;
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "moe",
                    epoch,
                    loss,
                });
            }
            let correct = count_correct(tape.value(out.aggregate).data(), mc.num_classes, &ys);
            acc.add(ys.len(), loss, tape.value(ept).item(), tape.value(gate).item(), correct);
            let mut grads = tape.backward(total)?;
            let params = self.model.params_mut();
            params.collect_grads(&p, &mut grads)?;
            let (experts, gate) = params.params_mut().split_at_mut(gate_start);
            sgd_step(experts, &opt)?;
            sgd_step(gate, &gate_opt)?;
        }
        let m = acc.finish(epoch);
        self.log.push(m);
        Ok(m)
    }

    pub fn run(&mut self, z: &[ConceptFeatures], labels: &[usize]) -> Result<()> {
        while self.log.len() < self.config.epochs {
            self.run_epoch(z, labels)?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(MOE_CSV_HEADER, &self.log)
    }

    /// Stage-2 checkpoint; carries the frozen partition model and its log.
    pub fn checkpoint(&self, partition_log: &str) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_classes: self.model.config().num_classes,
            stage: Stage::Moe,
            epoch: self.log.len(),
            rng: RngState::capture(&self.rng),
            partition: ParamSection::capture(self.partition.params()),
            moe: Some(ParamSection::capture(self.model.params())),
            partition_log: partition_log.to_owned(),
            moe_log: self.metrics_csv(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let section = match (&ckpt.moe, ckpt.stage) {
            (Some(s), Stage::Moe) => s,
            _ => return Err(Error::InvalidArgument("checkpoint holds no recognition stage".into())),
        };
        let partition = PartitionTrainer::from_checkpoint(ckpt)?.into_model();
        let mut t = Self::new(ckpt.config.clone(), partition)?;
        section.restore_into(t.model.params_mut())?;
        t.log = parse_metrics_csv(&ckpt.moe_log)?;
        if t.log.len() != ckpt.epoch {
            return Err(Error::Corrupt("epoch counter disagrees with the metrics log".into()));
        }
        t.rng = ckpt.rng.restore();
        Ok(t)
    }
}

/// Trains experts and gate on top of a frozen partition model.
pub fn train_moe(data: &[SynthSample], partition: PartitionModel, cfg: &TrainConfig) -> Result<MoeTrainer> {
    check_data(data, partition.config().num_classes)?;
    let z = concept_features(&partition, data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let mut t = MoeTrainer::new(cfg.clone(), partition)?;
    t.run(&z, &labels)?;
    Ok(t)
}

/// Fraction of samples whose aggregate prediction matches the label.
pub fn evaluate(partition: &PartitionModel, model: &MoeModel, data: &[SynthSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let z = concept_features(partition, data)?;
    let correct = model
        .predict(&z)?
        .iter()
        .zip(data)
        .filter(|(o, s)| o.predicted_class == s.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
