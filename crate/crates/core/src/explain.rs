//! Explanation artifacts: importance tables, part ablation curves, partition
//! overlays, and partition purity against ground-truth part masks.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::moe::MoeModel;
use crate::partition::{hard_partition, ConceptFeatures, PartitionModel};
use crate::pipeline::concept_features;
use crate::synthdata::{images_tensor, mean_color, occlude_parts, SynthSample};

/// Overlay colors, assigned to concepts by index modulo 8.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Average gate weight per concept over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceReport {
    pub averages: Vec<f64>,
    /// Concepts by descending average weight; ties keep the lower index first.
    pub ranking: Vec<usize>,
    pub gamma: f64,
}

impl ImportanceReport {
    pub fn from_averages(averages: Vec<f64>, gamma: f64) -> Self {
        let mut ranking: Vec<usize> = (0..averages.len()).collect();
        ranking.sort_by(|&a, &b| averages[b].total_cmp(&averages[a]).then(a.cmp(&b)));
        Self {
            averages,
            ranking,
            gamma,
        }
    }

    /// Position of each concept in the ranking (0 = most important).
    pub fn rank_of(&self) -> Vec<usize> {
        let mut rank = vec![0; self.ranking.len()];
        for (r, &j) in self.ranking.iter().enumerate() {
            rank[j] = r;
        }
        rank
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,concept,average_weight\n");
        for (r, &j) in self.ranking.iter().enumerate() {
            let _ = writeln!(out, "{r},{j},{}", self.averages[j]);
        }
        out
    }
}

/// Mean gate weights over precomputed concept features.
pub fn importance_from_features(model: &MoeModel, z: &[ConceptFeatures], gamma: f64) -> Result<ImportanceReport> {
    if z.is_empty() {
        return Err(Error::EmptyData("importance split"));
    }
    let k = model.config().num_concepts;
    let mut sums = vec![0.0; k];
    for out in model.predict(z)? {
        for (s, w) in sums.iter_mut().zip(&out.weights) {
            *s += w;
        }
    }
    let n = z.len() as f64;
    Ok(ImportanceReport::from_averages(
        sums.into_iter().map(|s| s / n).collect(),
        gamma,
    ))
}

pub fn importance_table(
    partition: &PartitionModel,
    model: &MoeModel,
    data: &[SynthSample],
    gamma: f64,
) -> Result<ImportanceReport> {
    if data.is_empty() {
        return Err(Error::EmptyData("importance split"));
    }
    importance_from_features(model, &concept_features(partition, data)?, gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Start with every concept disabled and enable them by importance.
    Add,
    /// Start with every concept enabled and disable them by importance.
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mechanism {
    /// Zero the disabled concepts' feature rows.
    #[default]
    ZeroConceptFeatures,
    /// Occlude the ground-truth slots the disabled concepts map to.
    OccludeInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCurve {
    pub mode: AblationMode,
    pub mechanism: Mechanism,
    /// `(parts added or removed, accuracy)` for 0..=K parts.
    pub points: Vec<(usize, f64)>,
}

impl AblationCurve {
    pub fn to_csv(&self) -> String {
        let col = match self.mode {
            AblationMode::Add => "parts_added",
            AblationMode::Remove => "parts_removed",
        };
        let mut out = format!("{col},accuracy\n");
        for (k, acc) in &self.points {
            let _ = writeln!(out, "{k},{acc}");
        }
        out
    }
}

/// Concepts disabled at step `k` of a curve.
fn disabled_at(report: &ImportanceReport, mode: AblationMode, k: usize) -> Vec<usize> {
    match mode {
        AblationMode::Remove => report.ranking[..k].to_vec(),
        AblationMode::Add => report.ranking[k..].to_vec(),
    }
}

fn accuracy(model: &MoeModel, z: &[ConceptFeatures], labels: &[usize]) -> Result<f64> {
    let correct = model
        .predict(z)?
        .iter()
        .zip(labels)
        .filter(|(o, &y)| o.predicted_class == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn ablation_curve(
    partition: &PartitionModel,
    model: &MoeModel,
    data: &[SynthSample],
    report: &ImportanceReport,
    mode: AblationMode,
    mechanism: Mechanism,
) -> Result<AblationCurve> {
    if data.is_empty() {
        return Err(Error::EmptyData("ablation split"));
    }
    let k = model.config().num_concepts;
    if report.ranking.len() != k {
        return Err(shape_err(
            "ablation_curve",
            format!("report ranks {} concepts, model has {k}", report.ranking.len()),
        ));
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let mut points = Vec::with_capacity(k + 1);
    match mechanism {
        Mechanism::ZeroConceptFeatures => {
            let z = concept_features(partition, data)?;
            for step in 0..=k {
                let off = disabled_at(report, mode, step);
                let ablated: Vec<ConceptFeatures> = z.iter().map(|f| f.with_rows_zeroed(&off)).collect();
                points.push((step, accuracy(model, &ablated, &labels)?));
            }
        }
        Mechanism::OccludeInput => {
            let purity = partition_purity(partition, data)?;
            let fill = mean_color(data);
            for step in 0..=k {
                let mut slots: Vec<usize> = disabled_at(report, mode, step)
                    .into_iter()
                    .filter_map(|j| purity.concept_slots[j])
                    .collect();
                slots.sort_unstable();
                slots.dedup();
                let occluded = data
                    .iter()
                    .map(|s| occlude_parts(s, &slots, fill))
                    .collect::<Result<Vec<_>>>()?;
                let z = concept_features(partition, &occluded)?;
                points.push((step, accuracy(model, &z, &labels)?));
            }
        }
    }
    Ok(AblationCurve {
        mode,
        mechanism,
        points,
    })
}

/// Hard partition of one sample upsampled to image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    /// Concept index per pixel, row-major.
    pub concepts: Vec<usize>,
    pub presence: Vec<f64>,
}

impl Overlay {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        PALETTE[self.concepts[y * self.width + x] % PALETTE.len()]
    }

    /// Binary PPM (P6) rendering.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &j in &self.concepts {
            out.extend_from_slice(&PALETTE[j % PALETTE.len()]);
        }
        out
    }
}

/// Nearest-neighbor upsampling: pixel `(y, x)` takes grid cell
/// `(y·H/S, x·W/S)`.
pub fn upsample_nearest(grid: &[usize], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let gy = y * height / out_h;
        for x in 0..out_w {
            out.push(grid[gy * width + x * width / out_w]);
        }
    }
    out
}

pub fn partition_overlay(partition: &PartitionModel, sample: &SynthSample) -> Result<Overlay> {
    let out = partition
        .infer(&images_tensor(&[sample])?)?
        .pop()
        .expect("one sample in, one out");
    let map = &out.occurrence;
    let s = sample.image_size;
    Ok(Overlay {
        width: s,
        height: s,
        concepts: upsample_nearest(&hard_partition(map), map.height, map.width, s, s),
        presence: out.presence,
    })
}

/// Majority slot per `H×W` block of an `S×S` mask, lowest slot on ties.
pub fn downsample_mask(mask: &[u8], size: usize, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(height * width);
    for gy in 0..height {
        let (y0, y1) = (
            gy * size / height,
            ((gy + 1) * size / height).max(gy * size / height + 1),
        );
        for gx in 0..width {
            let (x0, x1) = (gx * size / width, ((gx + 1) * size / width).max(gx * size / width + 1));
            let mut counts = [0usize; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[mask[y * size + x] as usize] += 1;
                }
            }
            let best = (0..256).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            out.push(best as u8);
        }
    }
    out
}

/// Agreement between learned concepts and ground-truth slots.
#[derive(Clone, Debug, PartialEq)]
pub struct PurityReport {
    pub purity: f64,
    /// Majority slot of each concept; `None` if it owns no position.
    pub concept_slots: Vec<Option<usize>>,
    /// `counts[j][s]`: positions assigned to concept `j` lying in slot `s`.
    pub counts: Vec<Vec<usize>>,
}

impl PurityReport {
    /// Concept owning the most positions of each slot; `None` for slots no
    /// position was assigned from.
    pub fn slot_concepts(&self, num_slots: usize) -> Vec<Option<usize>> {
        (0..num_slots)
            .map(|s| {
                let best =
                    (0..self.counts.len()).fold(0, |b, j| if self.counts[j][s] > self.counts[b][s] { j } else { b });
                (self.counts.get(best).is_some_and(|row| row[s] > 0)).then_some(best)
            })
            .collect()
    }

    /// Importance of each slot: the average weight of its dominant concept,
    /// or 0 for an uncovered slot.
    pub fn slot_importance(&self, report: &ImportanceReport, num_slots: usize) -> Vec<f64> {
        self.slot_concepts(num_slots)
            .into_iter()
            .map(|j| j.map_or(0.0, |j| report.averages[j]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept,majority_slot,positions\n");
        for (j, slot) in self.concept_slots.iter().enumerate() {
            let slot = slot.map_or_else(|| "none".to_owned(), |s| s.to_string());
            let _ = writeln!(out, "{j},{slot},{}", self.counts[j].iter().sum::<usize>());
        }
        out
    }
}

/// Purity of per-position concept assignments against true slots.
pub fn purity_from_assignments(
    assignments: &[Vec<usize>],
    truth: &[Vec<u8>],
    num_concepts: usize,
    num_slots: usize,
) -> Result<PurityReport> {
    if assignments.is_empty() || assignments.len() != truth.len() {
        return Err(Error::EmptyData("purity input"));
    }
    let mut counts = vec![vec![0usize; num_slots]; num_concepts];
    for (a, t) in assignments.iter().zip(truth) {
        if a.len() != t.len() {
            return Err(shape_err(
                "purity",
                format!("{} assignments vs {} mask cells", a.len(), t.len()),
            ));
        }
        for (&j, &s) in a.iter().zip(t) {
            if j >= num_concepts || s as usize >= num_slots {
                return Err(Error::InvalidArgument(format!("concept {j} / slot {s} out of range")));
            }
            counts[j][s as usize] += 1;
        }
    }
    let concept_slots: Vec<Option<usize>> = counts
        .iter()
        .map(|row| {
            let best = (0..num_slots).fold(0, |b, s| if row[s] > row[b] { s } else { b });
            (row[best] > 0).then_some(best)
        })
        .collect();
    let total: usize = counts.iter().flatten().sum();
    let matched: usize = counts
        .iter()
        .zip(&concept_slots)
        .filter_map(|(row, slot)| slot.map(|s| row[s]))
        .sum();
    Ok(PurityReport {
        purity: matched as f64 / total as f64,
        concept_slots,
        counts,
    })
}

/// Purity of the model's hard partitions at feature-map resolution.
pub fn partition_purity(partition: &PartitionModel, data: &[SynthSample]) -> Result<PurityReport> {
    if data.is_empty() {
        return Err(Error::EmptyData("purity split"));
    }
    if data
        .iter()
        .any(|s| s.part_mask.len() != s.image_size * s.image_size || s.attributes.is_empty())
    {
        return Err(Error::MissingMasks("partition purity"));
    }
    let num_slots = data[0].attributes.len();
    let k = partition.config().num_concepts;
    let mut assignments = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        for (out, s) in partition.infer(&images_tensor(&refs)?)?.iter().zip(chunk) {
            let map = &out.occurrence;
            assignments.push(hard_partition(map));
            truth.push(downsample_mask(&s.part_mask, s.image_size, map.height, map.width));
        }
    }
    purity_from_assignments(&assignments, &truth, k, num_slots)
}
