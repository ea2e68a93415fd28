//! Text-guided vision-token pruning.
//!
//! At each scheduled layer the text-to-text block yields a prior over text
//! tokens (how much attention each one receives), the prior reweights the
//! text-to-vision block into one score per vision token, and only the top-k
//! vision tokens survive into the next layer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_sums, matvec_left, Matrix, SeededRng, Vector};
use crate::model::{LayerAttention, PrefillHook};
use crate::rank::top_k_indices;

/// Per-text-token importance at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPrior {
    pub layer_index: usize,
    pub weights: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionScores {
    pub layer_index: usize,
    pub scores: Vector,
    /// Original vision positions, one per score, ascending.
    pub origin_indices: Vec<usize>,
}

/// Vision tokens kept at one pruning layer, by original position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSet {
    pub layer_index: usize,
    pub kept: Vec<usize>,
}

/// Sums the text block over its query rows.
pub fn text_prior(layer_index: usize, t2t: &Matrix) -> Result<TextPrior> {
    if t2t.is_empty() {
        return Err(Error::Empty("text block"));
    }
    if t2t.rows() != t2t.cols() {
        return Err(Error::DimensionMismatch {
            op: "text_prior (square text block)",
            expected: t2t.rows(),
            actual: t2t.cols(),
        });
    }
    Ok(TextPrior {
        layer_index,
        weights: column_sums(t2t)?,
    })
}

/// `s = w^T * t2v`.
pub fn score_vision(
    prior: &TextPrior,
    t2v: &Matrix,
    origin_indices: &[usize],
) -> Result<VisionScores> {
    if origin_indices.len() != t2v.cols() {
        return Err(Error::DimensionMismatch {
            op: "score_vision origin indices",
            expected: t2v.cols(),
            actual: origin_indices.len(),
        });
    }
    if !origin_indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidConfig(
            "vision origin indices must be unique and ascending".into(),
        ));
    }
    Ok(VisionScores {
        layer_index: prior.layer_index,
        scores: matvec_left(&prior.weights, t2v)?,
        origin_indices: origin_indices.to_vec(),
    })
}

/// Keeps the `k` highest-scoring tokens; ties go to the smaller original
/// position. Returns original positions, ascending.
pub fn top_k_retain(scores: &VisionScores, k: usize) -> Result<RetainedSet> {
    let local = top_k_local(scores, k)?;
    Ok(RetainedSet {
        layer_index: scores.layer_index,
        kept: local.iter().map(|&i| scores.origin_indices[i]).collect(),
    })
}

fn top_k_local(scores: &VisionScores, k: usize) -> Result<Vec<usize>> {
    if k > scores.scores.len() {
        return Err(Error::KeepTooLarge {
            k,
            available: scores.scores.len(),
        });
    }
    // origin indices are ascending, so local index order equals origin order
    Ok(top_k_indices(&scores.scores, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub prune_after_layer: usize,
    pub keep: usize,
}

/// Ordered pruning stages over a model with `total_layers` layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSchedule {
    stages: Vec<Stage>,
    total_layers: usize,
}

impl PruneSchedule {
    pub fn new(stages: Vec<Stage>, total_layers: usize) -> Result<Self> {
        for pair in stages.windows(2) {
            if pair[1].prune_after_layer <= pair[0].prune_after_layer {
                return Err(Error::InvalidSchedule(format!(
                    "stage layers must be strictly increasing ({} after {})",
                    pair[1].prune_after_layer, pair[0].prune_after_layer
                )));
            }
            if pair[1].keep >= pair[0].keep {
                return Err(Error::InvalidSchedule(format!(
                    "keep counts must be strictly decreasing ({} after {})",
                    pair[1].keep, pair[0].keep
                )));
            }
        }
        if let Some(s) = stages.iter().find(|s| s.prune_after_layer >= total_layers) {
            return Err(Error::InvalidSchedule(format!(
                "stage layer {} is outside a {total_layers}-layer model",
                s.prune_after_layer
            )));
        }
        Ok(Self {
            stages,
            total_layers,
        })
    }

    pub fn empty(total_layers: usize) -> Self {
        Self {
            stages: Vec::new(),
            total_layers,
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn stage_layers(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.prune_after_layer).collect()
    }

    pub fn keep_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.keep).collect()
    }

    pub fn stage_at(&self, layer: usize) -> Option<&Stage> {
        self.stages.iter().find(|s| s.prune_after_layer == layer)
    }

    /// Vision tokens alive during each layer, starting from `initial`.
    pub fn vision_timeline(&self, initial: usize) -> Result<Vec<usize>> {
        let mut alive = initial;
        let mut out = Vec::with_capacity(self.total_layers);
        for layer in 0..self.total_layers {
            out.push(alive);
            if let Some(stage) = self.stage_at(layer) {
                if stage.keep > alive {
                    return Err(Error::KeepTooLarge {
                        k: stage.keep,
                        available: alive,
                    });
                }
                alive = stage.keep;
            }
        }
        Ok(out)
    }

    /// Layer-weighted average of alive vision tokens.
    pub fn average_tokens(&self, initial: usize) -> Result<f64> {
        let timeline = self.vision_timeline(initial)?;
        Ok(timeline.iter().sum::<usize>() as f64 / self.total_layers as f64)
    }
}

/// Keep-count policy for [`solve_schedule`].
///
/// The last stage keeps `final_keep` tokens; every earlier stage keeps
/// `ratio` times the stage after it, so three stages give `(r*x, x, final)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeepPolicy {
    pub final_keep: usize,
    pub ratio: f64,
}

impl Default for KeepPolicy {
    fn default() -> Self {
        Self {
            final_keep: 8,
            ratio: 2.0,
        }
    }
}

/// Layer counts covered by each stage (`dense` = layers before the first prune).
fn stage_spans(stage_layers: &[usize], total_layers: usize) -> (usize, Vec<usize>) {
    let dense = stage_layers.first().map_or(total_layers, |&p| p + 1);
    let spans = stage_layers
        .iter()
        .enumerate()
        .map(|(i, &p)| stage_layers.get(i + 1).copied().unwrap_or(total_layers - 1) - p)
        .collect();
    (dense, spans)
}

/// Finds per-stage keep counts whose layer-weighted average vision-token count
/// is within one token of `budget`.
pub fn solve_schedule(
    budget: f64,
    initial_vision: usize,
    total_layers: usize,
    stage_layers: &[usize],
    policy: &KeepPolicy,
) -> Result<PruneSchedule> {
    if total_layers == 0 {
        return Err(Error::InvalidSchedule("model has no layers".into()));
    }
    if policy.ratio.is_nan() || policy.ratio <= 1.0 {
        return Err(Error::InvalidSchedule(format!(
            "policy ratio must exceed 1, got {}",
            policy.ratio
        )));
    }
    // validates ordering and range; keep counts are placeholders
    PruneSchedule::new(
        stage_layers
            .iter()
            .enumerate()
            .map(|(i, &p)| Stage {
                prune_after_layer: p,
                keep: stage_layers.len() - i,
            })
            .collect(),
        total_layers,
    )?;

    let v0 = initial_vision as f64;
    let l = total_layers as f64;
    let infeasible = |min: f64, max: f64| Error::InfeasibleBudget { budget, min, max };

    if stage_layers.is_empty() {
        return if (budget - v0).abs() <= 1.0 {
            Ok(PruneSchedule::empty(total_layers))
        } else {
            Err(infeasible(v0, v0))
        };
    }

    let (dense, spans) = stage_spans(stage_layers, total_layers);
    let fixed = dense as f64 * v0;
    let target = budget * l;
    let average_of = |keeps: &[usize]| -> f64 {
        (fixed
            + keeps
                .iter()
                .zip(&spans)
                .map(|(&k, &w)| (k * w) as f64)
                .sum::<f64>())
            / l
    };

    let keeps: Vec<usize> = if stage_layers.len() == 1 {
        let (min, max) = (fixed / l, average_of(&[initial_vision]));
        if spans[0] == 0 || budget < min - 1.0 || budget > max {
            return Err(infeasible(min, max));
        }
        let k = ((target - fixed) / spans[0] as f64).round().max(0.0) as usize;
        vec![k.min(initial_vision)]
    } else {
        let s = stage_layers.len();
        let coeffs: Vec<f64> = (0..s - 1)
            .map(|i| policy.ratio.powi((s - 2 - i) as i32))
            .collect();
        let chain = |x: f64| -> Vec<usize> {
            coeffs
                .iter()
                .map(|c| (x * c).round() as usize)
                .chain(std::iter::once(policy.final_keep))
                .collect()
        };
        let min = average_of(&chain((policy.final_keep + 1) as f64));
        let max = average_of(&chain(v0 / coeffs[0]));
        let weighted: f64 = coeffs.iter().zip(&spans).map(|(c, &w)| c * w as f64).sum();
        if weighted == 0.0 || budget < min - 1.0 || budget > max + 1.0 {
            return Err(infeasible(min, max));
        }
        let last_span = spans[s - 1] as f64;
        let x = (target - fixed - last_span * policy.final_keep as f64) / weighted;
        chain(x.clamp((policy.final_keep + 1) as f64, v0 / coeffs[0]))
    };

    let schedule = PruneSchedule::new(
        stage_layers
            .iter()
            .zip(&keeps)
            .map(|(&p, &k)| Stage {
                prune_after_layer: p,
                keep: k,
            })
            .collect(),
        total_layers,
    )?;
    let realized = schedule.average_tokens(initial_vision)?;
    if (realized - budget).abs() > 1.0 {
        let (min, max) = (realized.min(budget), realized.max(budget));
        return Err(infeasible(min, max));
    }
    Ok(schedule)
}

/// Comparison schedules: evenly spaced, single-layer, and randomly placed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineKind {
    Uniform { start: usize, stride: usize },
    Single { layer: usize },
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSchedule {
    pub name: String,
    /// Stage layers, including the drawn layers for `Random`.
    pub layers: Vec<usize>,
    pub schedule: PruneSchedule,
}

/// Stage layers for a baseline. Random draws come from `SeededRng(seed)`
/// without replacement over `0..total_layers - 1`.
pub fn baseline_layers(kind: &BaselineKind, total_layers: usize) -> Result<Vec<usize>> {
    let usable = total_layers.saturating_sub(1);
    let layers = match *kind {
        BaselineKind::Uniform { start, stride } => {
            if stride == 0 {
                return Err(Error::InvalidSchedule(
                    "uniform stride must be positive".into(),
                ));
            }
            (start..usable).step_by(stride).collect::<Vec<_>>()
        }
        BaselineKind::Single { layer } => vec![layer],
        BaselineKind::Random { count, seed } => {
            if count > usable {
                return Err(Error::InvalidSchedule(format!(
                    "cannot draw {count} distinct layers from {usable}"
                )));
            }
            SeededRng::new(seed).sample_indices(usable, count)
        }
    };
    if layers.is_empty() {
        return Err(Error::InvalidSchedule(format!("{kind:?} yields no layers")));
    }
    if let Some(&bad) = layers.iter().find(|&&p| p >= usable) {
        return Err(Error::InvalidSchedule(format!(
            "stage layer {bad} leaves no later layer in a {total_layers}-layer model"
        )));
    }
    Ok(layers)
}

/// Builds a budget-matched baseline schedule.
pub fn baseline_schedule(
    kind: &BaselineKind,
    budget: f64,
    initial_vision: usize,
    total_layers: usize,
    policy: &KeepPolicy,
) -> Result<BaselineSchedule> {
    let layers = baseline_layers(kind, total_layers)?;
    let schedule = solve_schedule(budget, initial_vision, total_layers, &layers, policy)?;
    let name = match kind {
        BaselineKind::Uniform { .. } => "uniform",
        BaselineKind::Single { .. } => "single",
        BaselineKind::Random { .. } => "random",
    };
    if let BaselineKind::Random { seed, .. } = kind {
        log::info!("random baseline (seed {seed}) drew layers {layers:?}");
    }
    Ok(BaselineSchedule {
        name: name.to_owned(),
        layers,
        schedule,
    })
}

/// How a stage chooses which vision tokens survive.
#[derive(Debug, Clone, PartialEq)]
pub enum Retention {
    /// Text-prior-weighted scoring.
    TextPrior,
    /// Every text token votes with weight one.
    UniformPrior,
    /// Uniformly random subset from a seeded generator.
    Random(SeededRng),
}

/// Prefill hook that prunes according to a schedule and logs what it kept.
#[derive(Debug, Clone)]
pub struct PruneHook {
    schedule: PruneSchedule,
    retention: Retention,
    retained: Vec<RetainedSet>,
}

/// Text-prior pruning hook for `schedule`.
pub fn make_hook(schedule: PruneSchedule) -> PruneHook {
    PruneHook::new(schedule, Retention::TextPrior)
}

impl PruneHook {
    pub fn new(schedule: PruneSchedule, retention: Retention) -> Self {
        Self {
            schedule,
            retention,
            retained: Vec::new(),
        }
    }

    pub fn schedule(&self) -> &PruneSchedule {
        &self.schedule
    }

    pub fn retained(&self) -> &[RetainedSet] {
        &self.retained
    }

    pub fn into_retained(self) -> Vec<RetainedSet> {
        self.retained
    }

    /// Chooses survivors for one layer; `None` when the layer is not a stage.
    pub fn select(&mut self, attn: &LayerAttention) -> Result<Option<Vec<usize>>> {
        let Some(stage) = self.schedule.stage_at(attn.layer_index).copied() else {
            return Ok(None);
        };
        let v = attn.vision_count();
        if stage.keep > v {
            return Err(Error::KeepTooLarge {
                k: stage.keep,
                available: v,
            });
        }
        let local = match &mut self.retention {
            Retention::TextPrior => {
                let prior = text_prior(attn.layer_index, &attn.t2t)?;
                top_k_local(
                    &score_vision(&prior, &attn.t2v, &attn.vision_ids)?,
                    stage.keep,
                )?
            }
            Retention::UniformPrior => {
                let prior = TextPrior {
                    layer_index: attn.layer_index,
                    weights: Vector::new(vec![1.0; attn.text_count()]),
                };
                top_k_local(
                    &score_vision(&prior, &attn.t2v, &attn.vision_ids)?,
                    stage.keep,
                )?
            }
            Retention::Random(rng) => rng.sample_indices(v, stage.keep),
        };
        self.retained.push(RetainedSet {
            layer_index: attn.layer_index,
            kept: local.iter().map(|&i| attn.vision_ids[i]).collect(),
        });
        Ok(Some(local))
    }
}

impl PrefillHook for PruneHook {
    fn after_layer(&mut self, attn: &LayerAttention) -> Result<Option<Vec<usize>>> {
        self.select(attn)
    }
}

/// On-disk schedule description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub policy: String,
    pub total_layers: usize,
    pub layers: Vec<usize>,
    pub keep: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ScheduleFile {
    pub fn from_schedule(schedule: &PruneSchedule, policy: &str, seed: Option<u64>) -> Self {
        Self {
            policy: policy.to_owned(),
            total_layers: schedule.total_layers(),
            layers: schedule.stage_layers(),
            keep: schedule.keep_counts(),
            seed,
        }
    }

    pub fn to_schedule(&self) -> Result<PruneSchedule> {
        if self.layers.len() != self.keep.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} stage layers but {} keep counts",
                self.layers.len(),
                self.keep.len()
            )));
        }
        PruneSchedule::new(
            self.layers
                .iter()
                .zip(&self.keep)
                .map(|(&p, &k)| Stage {
                    prune_after_layer: p,
                    keep: k,
                })
                .collect(),
            self.total_layers,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `sample_id,layer,kept` rows; the kept list is `;`-separated.
pub fn retained_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a RetainedSet)>) -> String {
    let mut out = String::from("sample_id,layer,kept\n");
    for (sample, set) in rows {
        let kept: Vec<String> = set.kept.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{sample},{},{}", set.layer_index, kept.join(";"));
    }
    out
}
