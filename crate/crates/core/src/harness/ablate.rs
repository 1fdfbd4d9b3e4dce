//! One-factor sweeps around a base method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::PreparedTask;
use crate::harness::experiment::{run_experiment, Method, RunMetadata, RunMetrics};
use crate::head::{InferenceMode, SIGMA_GRID};
use crate::masking::MaskLayout;
use crate::trainer::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Mask count `M`.
    Masks,
    /// Label-embedding initializer std.
    Sigma,
    /// Hinge versus cross-entropy.
    Loss,
    /// Prototypes versus label embedding versus training objective.
    Inference,
    /// Mask placement in sentence-pair inputs.
    Positions,
}

impl Sweep {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "masks" => Ok(Self::Masks),
            "sigma" => Ok(Self::Sigma),
            "loss" => Ok(Self::Loss),
            "inference" => Ok(Self::Inference),
            "positions" => Ok(Self::Positions),
            _ => Err(Error::Config(format!(
                "unknown sweep {s:?} (masks, sigma, loss, inference, positions)"
            ))),
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: Vec<String> = match self {
            Self::Masks => [1, 2, 5, 10].iter().map(|m| m.to_string()).collect(),
            Self::Sigma => SIGMA_GRID.iter().map(|s| format!("{s:e}")).collect(),
            Self::Loss => vec![
                LossKind::Hinge.name().into(),
                LossKind::CrossEntropy.name().into(),
            ],
            Self::Inference => [
                InferenceMode::Prototypical,
                InferenceMode::LabelEmbedding,
                InferenceMode::TrainingObjective,
            ]
            .iter()
            .map(|m| m.name().to_string())
            .collect(),
            Self::Positions => MaskLayout::PAIR_LAYOUTS
                .iter()
                .map(|l| l.name().to_string())
                .collect(),
        };
        v
    }
}

/// The methods a sweep compares, one per value.
pub fn variants(sweep: Sweep, values: &[String], base: &Method) -> Result<Vec<Method>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let mut m = base.clone();
            let bad = || Error::Config(format!("bad value {v:?} for the {sweep:?} sweep"));
            match sweep {
                Sweep::Masks => {
                    let n: usize = v.trim().parse().map_err(|_| bad())?;
                    if n == 0 {
                        return Err(bad());
                    }
                    m.mask_count = Some(n);
                }
                Sweep::Sigma => {
                    let s: f64 = v.trim().parse().map_err(|_| bad())?;
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(bad());
                    }
                    m.label_sigma = Some(s);
                }
                Sweep::Loss => {
                    m.loss = match v.trim() {
                        "hinge" => LossKind::Hinge,
                        "cross_entropy" | "ce" => LossKind::CrossEntropy,
                        _ => return Err(bad()),
                    };
                    if m.loss == LossKind::CrossEntropy {
                        m.name = format!("{}_ce", base.name);
                    }
                }
                Sweep::Inference => {
                    m.inference = match v.trim() {
                        "prototypical" => InferenceMode::Prototypical,
                        "label_embedding" => InferenceMode::LabelEmbedding,
                        "training_objective" => InferenceMode::TrainingObjective,
                        _ => return Err(bad()),
                    };
                    m.name = match m.inference {
                        InferenceMode::Prototypical => base.name.clone(),
                        InferenceMode::LabelEmbedding => format!("{}_label_emb", base.name),
                        InferenceMode::TrainingObjective => format!("{}_objective", base.name),
                    };
                }
                Sweep::Positions => {
                    let layout = MaskLayout::parse(v.trim())?;
                    m.layout = Some(layout);
                    m.name = format!("{}@{}", base.name, layout.name());
                }
            }
            Ok(m)
        })
        .collect()
}

/// Runs every variant over the seed cross-product.
pub fn run_ablation(
    task: &PreparedTask,
    sweep: Sweep,
    values: &[String],
    base: &Method,
    data_seeds: &[u64],
    train_seeds: &[u64],
    mut progress: impl FnMut(&RunMetadata),
) -> Result<Vec<RunMetrics>> {
    if sweep == Sweep::Positions && !task.is_pair() {
        return Err(Error::Config(
            "the positions sweep needs a sentence-pair task".into(),
        ));
    }
    variants(sweep, values, base)?
        .iter()
        .map(|m| run_experiment(task, m, data_seeds, train_seeds, &mut progress))
        .collect()
}
