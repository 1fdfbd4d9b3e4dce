//! Multi-token label embeddings: per-slot scoring, hinge and
//! cross-entropy objectives, class prototypes, and the three decision
//! rules (nearest prototype, nearest label embedding, best mean score).
//!
//! Ties resolve to the lowest class index everywhere.

use serde::{Deserialize, Serialize};

use crate::baselines::VerbalizerMap;
use crate::error::{contract, Error, Result};
use crate::masking::MaskedExample;
use crate::model::Model;
use crate::tensor::{Graph, Tensor, Var};

/// Default hinge margin.
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Default std of the label-embedding initializer.
pub const DEFAULT_SIGMA: f64 = 1e-4;

/// Initializer std values swept when tuning σ.
pub const SIGMA_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// `t_i = L_i · h_i` for every slot: `h_masks[M×H]`, `labels[K×M×H]` →
/// `M×K`.
pub fn score_tokens(g: &mut Graph, h_masks: Var, labels: Var) -> Result<Var> {
    g.slot_scores(h_masks, labels)
}

/// `(1/K) Σ_{k≠y} max(0, m − t_y + t_k)` for one slot.
pub fn hinge_loss(scores: &[f64], label: usize, margin: f64) -> f64 {
    let k = scores.len() as f64;
    scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, &s)| (margin - scores[label] + s).max(0.0))
        .sum::<f64>()
        / k
}

fn stack_scores(g: &mut Graph, slot_scores: &[Var], labels: &[usize]) -> Result<(Var, Vec<usize>)> {
    if slot_scores.is_empty() {
        return contract("loss over an empty batch");
    }
    if slot_scores.len() != labels.len() {
        return contract(format!(
            "{} score blocks for {} labels",
            slot_scores.len(),
            labels.len()
        ));
    }
    let m = g.value(slot_scores[0]).rows();
    let targets = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, m))
        .collect();
    let stacked = g.concat_rows(slot_scores)?;
    Ok((stacked, targets))
}

/// Mean hinge loss over every (example, slot) pair. `slot_scores[b]` is
/// the `M×K` score block of example `b`.
pub fn total_loss(
    g: &mut Graph,
    slot_scores: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let (stacked, targets) = stack_scores(g, slot_scores, labels)?;
    let k = g.value(stacked).cols() as f64;
    let rows = targets.len() as f64;
    let sum = g.margin_loss(stacked, &targets, margin, 1.0 / k)?;
    Ok(g.scale(sum, 1.0 / rows))
}

/// Mean softmax cross-entropy over every (example, slot) pair.
pub fn cross_entropy_total_loss(
    g: &mut Graph,
    slot_scores: &[Var],
    labels: &[usize],
) -> Result<Var> {
    let (stacked, targets) = stack_scores(g, slot_scores, labels)?;
    let rows = targets.len() as f64;
    let sum = g.cross_entropy(stacked, &targets)?;
    Ok(g.scale(sum, 1.0 / rows))
}

/// Per-slot, per-class mean mask embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub mask_count: usize,
    pub num_classes: usize,
    pub hidden: usize,
    /// `M×K×H`, row-major.
    pub centroids: Vec<f64>,
    pub counts: Vec<usize>,
}

impl PrototypeBank {
    pub fn centroid(&self, slot: usize, class: usize) -> &[f64] {
        let o = (slot * self.num_classes + class) * self.hidden;
        &self.centroids[o..o + self.hidden]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.mask_count, self.num_classes, self.hidden],
            self.centroids.clone(),
        )
        .expect("bank dimensions")
    }

    pub fn from_tensor(t: &Tensor, counts: Vec<usize>) -> Result<Self> {
        let [m, k, h] = *t.shape() else {
            return Err(Error::Format(format!(
                "prototype tensor shape {:?}",
                t.shape()
            )));
        };
        if counts.len() != k {
            return Err(Error::Format(format!(
                "{} counts for {k} classes",
                counts.len()
            )));
        }
        Ok(Self {
            mask_count: m,
            num_classes: k,
            hidden: h,
            centroids: t.data().to_vec(),
            counts,
        })
    }
}

/// Prototype `c[i][y]` = mean of slot-`i` embeddings over examples of
/// class `y`. Every class needs at least one example.
pub fn prototypes_from_embeddings(
    embeddings: &[Tensor],
    labels: &[usize],
    num_classes: usize,
) -> Result<PrototypeBank> {
    if embeddings.len() != labels.len() {
        return contract(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        ));
    }
    let Some(first) = embeddings.first() else {
        return contract("no training examples for prototypes");
    };
    let (m, h) = (first.rows(), first.cols());
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![0.0; m * num_classes * h];
    for (e, &y) in embeddings.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} not below {num_classes}")));
        }
        if e.shape() != first.shape() {
            return Err(Error::Shape {
                op: "prototypes",
                left: first.shape().to_vec(),
                right: e.shape().to_vec(),
            });
        }
        counts[y] += 1;
        for i in 0..m {
            let o = (i * num_classes + y) * h;
            for (s, v) in sums[o..o + h].iter_mut().zip(e.row(i)) {
                *s += v;
            }
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return contract(format!("class {empty} has no training examples"));
    }
    for i in 0..m {
        for (y, &c) in counts.iter().enumerate() {
            let o = (i * num_classes + y) * h;
            for s in &mut sums[o..o + h] {
                *s /= c as f64;
            }
        }
    }
    Ok(PrototypeBank {
        mask_count: m,
        num_classes,
        hidden: h,
        centroids: sums,
        counts,
    })
}

/// Prototypes from the model's mask embeddings of `train`, computed
/// without gradients.
pub fn compute_prototypes(model: &Model, train: &[MaskedExample]) -> Result<PrototypeBank> {
    let emb = model.mask_embeddings(train)?;
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    prototypes_from_embeddings(&emb, &labels, model.config().num_classes).map_err(|e| match e {
        Error::Contract(msg) if msg.contains("no training examples") => Error::Contract(msg),
        other => other,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// First index of the minimum.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `min_i ‖h_i − c(i, y)‖²` for every class `y`.
fn min_slot_distances(
    query: &Tensor,
    num_classes: usize,
    centroid: impl Fn(usize, usize) -> Vec<f64>,
) -> Vec<f64> {
    (0..num_classes)
        .map(|y| {
            (0..query.rows())
                .map(|i| squared_distance(query.row(i), &centroid(i, y)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn check_query(query: &Tensor, m: usize, h: usize) -> Result<()> {
    if query.shape() != [m, h] {
        return Err(Error::Shape {
            op: "classify",
            left: query.shape().to_vec(),
            right: vec![m, h],
        });
    }
    Ok(())
}

/// Per-class minimum squared slot distance to the prototypes.
pub fn prototype_distances(query: &Tensor, bank: &PrototypeBank) -> Result<Vec<f64>> {
    check_query(query, bank.mask_count, bank.hidden)?;
    Ok(min_slot_distances(query, bank.num_classes, |i, y| {
        bank.centroid(i, y).to_vec()
    }))
}

/// `argmax_y max_i exp(−‖h_i − c_iy‖²)`, computed as the argmin of the
/// minimum squared distance; `exp(−d)` is strictly decreasing so the
/// decision is the same and no exponential is evaluated.
pub fn nearest_prototype(query: &Tensor, bank: &PrototypeBank) -> Result<usize> {
    Ok(argmin(&prototype_distances(query, bank)?))
}

fn label_dims(labels: &Tensor) -> Result<(usize, usize, usize)> {
    match *labels.shape() {
        [k, m, h] => Ok((k, m, h)),
        _ => Err(Error::Shape {
            op: "label embedding",
            left: labels.shape().to_vec(),
            right: vec![],
        }),
    }
}

/// Nearest-prototype rule with `L[y][i]` standing in for `c_iy`.
pub fn nearest_label_embedding(query: &Tensor, labels: &Tensor) -> Result<usize> {
    let (k, m, h) = label_dims(labels)?;
    check_query(query, m, h)?;
    let d = min_slot_distances(query, k, |i, y| {
        labels.data()[(y * m + i) * h..(y * m + i + 1) * h].to_vec()
    });
    Ok(argmin(&d))
}

/// Mean over slots of `t_ik = L[k][i]·h_i`, per class.
pub fn mean_slot_scores(query: &Tensor, labels: &Tensor) -> Result<Vec<f64>> {
    let (k, m, h) = label_dims(labels)?;
    check_query(query, m, h)?;
    Ok((0..k)
        .map(|c| {
            (0..m)
                .map(|i| {
                    let l = &labels.data()[(c * m + i) * h..(c * m + i + 1) * h];
                    crate::tensor::kernels::dot(l, query.row(i))
                })
                .sum::<f64>()
                / m as f64
        })
        .collect())
}

/// Class with the highest mean slot score (the training objective's
/// preferred class).
pub fn best_mean_score(query: &Tensor, labels: &Tensor) -> Result<usize> {
    Ok(argmax(&mean_slot_scores(query, labels)?))
}

/// Decision rule used at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Prototypical,
    LabelEmbedding,
    TrainingObjective,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Prototypical => "prototypical",
            InferenceMode::LabelEmbedding => "label_embedding",
            InferenceMode::TrainingObjective => "training_objective",
        }
    }
}

/// One encoder pass, then the nearest prototype.
pub fn classify_prototypical(
    query: &MaskedExample,
    model: &Model,
    bank: &PrototypeBank,
) -> Result<usize> {
    let h = model.mask_embeddings(std::slice::from_ref(query))?;
    nearest_prototype(&h[0], bank)
}

pub fn classify_label_embedding(query: &MaskedExample, model: &Model) -> Result<usize> {
    let h = model.mask_embeddings(std::slice::from_ref(query))?;
    nearest_label_embedding(&h[0], model.label_embedding()?)
}

pub fn classify_training_objective(query: &MaskedExample, model: &Model) -> Result<usize> {
    let h = model.mask_embeddings(std::slice::from_ref(query))?;
    best_mean_score(&h[0], model.label_embedding()?)
}

/// Label embedding whose slot-`i` row for class `k` copies the output
/// embedding of the verbalizer's `i`-th token (its last token for slots
/// past its length).
pub fn label_embedding_from_verbalizers(
    output_embedding: &Tensor,
    verbalizers: &VerbalizerMap,
    mask_count: usize,
) -> Result<Tensor> {
    let h = output_embedding.cols();
    let k = verbalizers.num_classes();
    let mut data = Vec::with_capacity(k * mask_count * h);
    for toks in verbalizers.tokens() {
        for i in 0..mask_count {
            let id = toks[i.min(toks.len() - 1)];
            if id >= output_embedding.rows() {
                return Err(Error::Input(format!(
                    "verbalizer token {id} outside vocabulary"
                )));
            }
            data.extend_from_slice(output_embedding.row(id));
        }
    }
    Tensor::new(vec![k, mask_count, h], data)
}
