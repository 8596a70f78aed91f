//! Rollout rewards and group-relative advantages.
//!
//! Sub-agent reward: `R_S = Acc + R_fmt`, where `Acc` is the fraction of the
//! four attribute slots matching ground truth. Main-agent reward:
//! `R_M = λ1·[malignancy match] + λ2·[BI-RADS match]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AttributeSet, AttributeSlot, Diagnosis};
use crate::orchestrator::{AttributeSource, EpisodeMode, RolloutGroup, Trajectory};
use crate::protocol::{AgentRole, ImageRef};

pub const ROLLOUT_SCHEMA_VERSION: u32 = 1;
pub const GRPO_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("reward weights must be finite, non-negative and not both zero (got {0}, {1})")]
    InvalidWeights(f64, f64),
    #[error("group {group_id} is incomplete: {succeeded} of {n} trajectories")]
    IncompleteGroup { group_id: String, succeeded: usize, n: usize },
    #[error("trajectory {0} cannot be scored for this stage: {1}")]
    NotScorable(String, String),
    #[error("records do not match group {0}")]
    RecordMismatch(String),
}

/// `λ1` (malignancy) and `λ2` (BI-RADS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub malignancy: f64,
    pub birads: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { malignancy: 0.5, birads: 0.5 }
    }
}

impl RewardWeights {
    pub fn new(malignancy: f64, birads: f64) -> Result<Self, RewardError> {
        let w = Self { malignancy, birads };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.malignancy) && ok(self.birads) && self.malignancy + self.birads > 0.0 {
            Ok(())
        } else {
            Err(RewardError::InvalidWeights(self.malignancy, self.birads))
        }
    }

    pub fn max_reward(&self) -> f64 {
        self.malignancy + self.birads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sub,
    Main,
}

impl Stage {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "sub" => Some(Stage::Sub),
            "main" => Some(Stage::Main),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sub => "sub",
            Stage::Main => "main",
        }
    }
}

/// Terms that do not apply to a stage are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub attribute_accuracy: Option<f64>,
    pub format: Option<f64>,
    pub malignancy_match: Option<f64>,
    pub birads_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub trajectory_id: String,
    pub group_id: String,
    pub stage: Stage,
    pub components: RewardComponents,
    pub total: f64,
    /// Filled once the whole group is scored.
    pub advantage: Option<f64>,
}

impl RewardRecord {
    pub fn for_trajectory(mut self, trajectory_id: &str, group_id: &str) -> Self {
        self.trajectory_id = trajectory_id.to_string();
        self.group_id = group_id.to_string();
        self
    }
}

/// Fraction of the four slots where `pred` equals `gt`. Unparseable slots
/// never match.
pub fn attribute_accuracy(pred: &AttributeSet, gt: &AttributeSet) -> f64 {
    let hits = AttributeSlot::ALL
        .iter()
        .filter(|&&s| matches!((pred.get(s).as_known(), gt.get(s).as_known()), (Some(a), Some(b)) if a == b))
        .count();
    hits as f64 / 4.0
}

pub fn reward_sub(pred: &AttributeSet, gt: &AttributeSet, fmt: f64) -> RewardRecord {
    let acc = attribute_accuracy(pred, gt);
    RewardRecord {
        trajectory_id: String::new(),
        group_id: String::new(),
        stage: Stage::Sub,
        components: RewardComponents { attribute_accuracy: Some(acc), format: Some(fmt), ..Default::default() },
        total: acc + fmt,
        advantage: None,
    }
}

/// A missing prediction scores zero on both indicators.
pub fn reward_main(pred: Option<&Diagnosis>, gt: &Diagnosis, w: RewardWeights) -> RewardRecord {
    let (mal, bi) = match pred {
        Some(p) => (
            (p.malignancy == gt.malignancy) as u8 as f64,
            (p.birads == gt.birads) as u8 as f64,
        ),
        None => (0.0, 0.0),
    };
    RewardRecord {
        trajectory_id: String::new(),
        group_id: String::new(),
        stage: Stage::Main,
        components: RewardComponents { malignancy_match: Some(mal), birads_match: Some(bi), ..Default::default() },
        total: w.malignancy * mal + w.birads * bi,
        advantage: None,
    }
}

/// `(r - mean) / (std + ε)` with the population standard deviation; all zeros
/// when every reward is equal.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + GRPO_EPSILON)).collect()
}

/// Reward for one trajectory under `stage`.
pub fn score_trajectory(t: &Trajectory, stage: Stage, w: RewardWeights) -> Result<RewardRecord, RewardError> {
    let c = &t.chain;
    let rec = match stage {
        Stage::Sub => {
            if c.attribute_source != Some(AttributeSource::Predicted) {
                return Err(RewardError::NotScorable(t.trajectory_id.clone(), "no predicted attributes".into()));
            }
            let pred = c.attributes.as_ref().expect("predicted attributes present");
            let fmt = if c.format_valid.sub_attribute == Some(true) { 1.0 } else { 0.0 };
            reward_sub(pred, &t.case.gt_attributes, fmt)
        }
        Stage::Main => {
            if c.format_valid.integrator.is_none() {
                return Err(RewardError::NotScorable(t.trajectory_id.clone(), "integrator did not run".into()));
            }
            reward_main(c.diagnosis.as_ref(), &t.case.gt_diagnosis, w)
        }
    };
    Ok(rec.for_trajectory(&t.trajectory_id, &t.group_id))
}

/// Scores a complete group and fills in advantages.
pub fn score_group(group: &RolloutGroup, stage: Stage, w: RewardWeights) -> Result<Vec<RewardRecord>, RewardError> {
    if !group.is_complete() {
        return Err(RewardError::IncompleteGroup {
            group_id: group.group_id.clone(),
            succeeded: group.trajectories.len(),
            n: group.n,
        });
    }
    let mut recs = group
        .trajectories
        .iter()
        .map(|t| score_trajectory(t, stage, w))
        .collect::<Result<Vec<_>, _>>()?;
    let adv = grpo_advantages(&recs.iter().map(|r| r.total).collect::<Vec<_>>());
    for (r, a) in recs.iter_mut().zip(adv) {
        r.advantage = Some(a);
    }
    Ok(recs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTurn {
    pub role: AgentRole,
    pub prompt: String,
    pub images: Vec<ImageRef>,
    pub completion: String,
    /// Whether this completion was sampled for this trajectory (and so is
    /// the one being trained) or shared with the rest of the group.
    pub sampled: bool,
}

/// Trainer-facing record of one scored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub schema_version: u32,
    pub trajectory_id: String,
    pub group_id: String,
    pub case_id: String,
    pub dataset: String,
    pub sample_index: u32,
    pub stage: Stage,
    pub mode: EpisodeMode,
    pub evidence_source: Option<AttributeSource>,
    pub turns: Vec<RolloutTurn>,
    pub components: RewardComponents,
    pub reward: f64,
    pub advantage: f64,
}

pub fn emit_rollout_records(group: &RolloutGroup, records: &[RewardRecord]) -> Result<Vec<RolloutRecord>, RewardError> {
    if !group.is_complete() {
        return Err(RewardError::IncompleteGroup {
            group_id: group.group_id.clone(),
            succeeded: group.trajectories.len(),
            n: group.n,
        });
    }
    if records.len() != group.trajectories.len() {
        return Err(RewardError::RecordMismatch(group.group_id.clone()));
    }
    group
        .trajectories
        .iter()
        .zip(records)
        .map(|(t, r)| {
            let advantage = match r.advantage {
                Some(a) if r.trajectory_id == t.trajectory_id => a,
                _ => return Err(RewardError::RecordMismatch(group.group_id.clone())),
            };
            Ok(RolloutRecord {
                schema_version: ROLLOUT_SCHEMA_VERSION,
                trajectory_id: t.trajectory_id.clone(),
                group_id: t.group_id.clone(),
                case_id: t.case.case_id.clone(),
                dataset: t.case.dataset.clone(),
                sample_index: t.chain.sample_index,
                stage: r.stage,
                mode: t.chain.mode,
                evidence_source: t.chain.attribute_source,
                turns: t
                    .steps
                    .iter()
                    .map(|s| RolloutTurn {
                        role: s.role,
                        prompt: s.prompt.text.clone(),
                        images: s.prompt.images.clone(),
                        completion: s.raw_text.clone(),
                        sampled: s.sampled,
                    })
                    .collect(),
                components: r.components,
                reward: r.total,
                advantage,
            })
        })
        .collect()
}
