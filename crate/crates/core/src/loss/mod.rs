//! The training objective: a per-resolution cross-entropy over the decoder
//! pyramid, a dual-head regression loss that gives tail classes a dedicated
//! output path, and their weighted combination. Also the class-frequency
//! weights with truncation that temper extreme imbalance.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{affine, EncoderState, NetworkParams, ParamBinding};
use crate::pointcloud::UNLABELED;
use crate::tensor::{Mat, Tape, TensorId};


/// Gate vectors divide their head's loss term, so a collapsed gate would
/// blow the objective up. [`guard_gate_norms`] restores at least this norm
/// after every optimizer step.
pub const OMEGA_NORM_EPSILON: f64 = 1e-6;

/// Loss hyperparameters as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Multiplier on the multi-scale term in the combined objective.
    pub lambda: f64,
    /// Classes whose labeled training share is strictly below this are tail.
    pub tail_threshold: f64,
    /// Truncation floor for class weights, as a fraction of the largest.
    pub weight_truncation: f64,
    /// Whether cross-entropy terms are scaled by inverse class frequency.
    pub class_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tail_threshold: 0.05,
            weight_truncation: 0.05,
            class_weighting: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lambda >= 0.0, "lambda", "must be >= 0"),
            (
                (0.0..=1.0).contains(&self.tail_threshold),
                "tail_threshold",
                "must be in [0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.weight_truncation),
                "weight_truncation",
                "must be in [0, 1]",
            ),
        ];
        for (ok, field, reason) in checks {
            if !ok {
                return Err(Error::validation(field, reason));
            }
        }
        Ok(())
    }
}

/// Per-class cross-entropy multipliers, derived from inverse label
/// frequency and clamped below at `truncation` times the largest weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub truncation: f64,
}

impl ClassWeights {
    /// Unit weights: plain unweighted cross-entropy.
    pub fn ones(classes: usize) -> Self {
        Self {
            w: vec![1.0; classes],
            truncation: 0.0,
        }
    }
}

/// The head/tail class split used by the long-tailed loss and the grouped
/// evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSet {
    pub is_tail: Vec<bool>,
    /// Labeled-point share per class in the training samples.
    pub shares: Vec<f64>,
    pub threshold: f64,
}

impl TailSet {
    /// No tail classes at all; the second head then regresses toward zero.
    pub fn none(classes: usize) -> Self {
        Self {
            is_tail: vec![false; classes],
            shares: vec![0.0; classes],
            threshold: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.is_tail.len()
    }

    pub fn tail_classes(&self) -> Vec<usize> {
        (0..self.is_tail.len()).filter(|&c| self.is_tail[c]).collect()
    }
}

/// Inverse-frequency class weights with truncation: `w_l` proportional to
/// `1/freq_l` (zero-count classes get the largest weight), normalized,
/// clamped below at `truncation * max(w)`, and renormalized to sum 1.
pub fn compute_class_weights(train_histogram: &[u64], truncation: f64) -> Result<ClassWeights> {
    if !(0.0..=1.0).contains(&truncation) {
        return Err(Error::validation("weight_truncation", "must be in [0, 1]"));
    }
    if train_histogram.is_empty() {
        return Err(Error::validation("train_histogram", "no classes"));
    }
    let total: u64 = train_histogram.iter().sum();
    if total == 0 {
        return Err(Error::validation(
            "train_histogram",
            "all classes have zero labeled points",
        ));
    }
    let max_raw = train_histogram
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| total as f64 / n as f64)
        .fold(0.0, f64::max);
    let mut w: Vec<f64> = train_histogram
        .iter()
        .map(|&n| if n > 0 { total as f64 / n as f64 } else { max_raw })
        .collect();
    normalize_sum(&mut w);
    let floor = truncation * w.iter().cloned().fold(0.0, f64::max);
    for v in &mut w {
        *v = v.max(floor);
    }
    normalize_sum(&mut w);
    Ok(ClassWeights { w, truncation })
}

fn normalize_sum(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for v in w {
        *v /= s;
    }
}

/// Split classes by labeled training-point share: strictly below
/// `threshold` is tail.
pub fn determine_tail(train_histogram: &[u64], threshold: f64) -> Result<TailSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::validation("tail_threshold", "must be in [0, 1]"));
    }
    let total: u64 = train_histogram.iter().sum();
    if total == 0 {
        return Err(Error::validation(
            "train_histogram",
            "all classes have zero labeled points",
        ));
    }
    let shares: Vec<f64> = train_histogram
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    Ok(TailSet {
        is_tail: shares.iter().map(|&s| s < threshold).collect(),
        shares,
        threshold,
    })
}

/// One-hot target rows; unlabeled points get an all-zero row and thus
/// contribute nothing to any loss.
pub fn one_hot(labels: &[i32], classes: usize) -> Mat {
    let mut y = Mat::zeros((labels.len(), classes));
    for (j, &label) in labels.iter().enumerate() {
        if label != UNLABELED {
            assert!(
                (label as usize) < classes,
                "label {label} out of range for {classes} classes"
            );
            y[(j, label as usize)] = 1.0;
        }
    }
    y
}

/// One-hot targets restricted to tail classes: head-class rows are zeroed
/// so the second head learns to suppress its output on them.
pub fn one_hot_tail(labels: &[i32], tail_set: &TailSet) -> Mat {
    let classes = tail_set.classes();
    let mut y = Mat::zeros((labels.len(), classes));
    for (j, &label) in labels.iter().enumerate() {
        if label != UNLABELED && tail_set.is_tail[label as usize] {
            y[(j, label as usize)] = 1.0;
        }
    }
    y
}

/// Target maps for decoder scales 1..4, gathered from the full-resolution
/// one-hot targets through the encoder's composed keep chains (scale 1 is
/// the coarsest).
pub fn downsample_labels(y: &Mat, state: &EncoderState) -> Vec<Mat> {
    (1..=4)
        .map(|scale| y.select(Axis(0), state.rows_for_scale(scale)))
        .collect()
}

/// Row indices carrying a label.
pub fn labeled_rows(labels: &[i32]) -> Vec<usize> {
    (0..labels.len()).filter(|&j| labels[j] != UNLABELED).collect()
}

/// Class probabilities from one scale head: three affine layers with relu
/// between, then a row softmax.
pub fn scale_head_probs(
    tape: &mut Tape,
    binding: &ParamBinding,
    scale: usize,
    features: TensorId,
) -> TensorId {
    let tag = format!("head{scale}");
    let h = affine(tape, binding, features, &format!("{tag}.w0"), &format!("{tag}.b0"));
    let h = tape.relu(h);
    let h = affine(tape, binding, h, &format!("{tag}.w1"), &format!("{tag}.b1"));
    let h = tape.relu(h);
    let logits = affine(tape, binding, h, &format!("{tag}.w2"), &format!("{tag}.b2"));
    tape.softmax_rows(logits)
}

/// One scale's loss before combination: probabilities are gated by the
/// adaptive weight, renormalized so the log arguments stay a distribution,
/// and scored with class-weighted base-2 cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct ScaleTerm {
    pub loss: TensorId,
    pub omega_norm: TensorId,
}

pub fn scale_level_loss(
    tape: &mut Tape,
    probs: TensorId,
    omega: TensorId,
    targets: &Mat,
    class_weights: &[f64],
) -> ScaleTerm {
    let gated = tape.mul_broadcast(probs, omega);
    let z = tape.normalize_rows(gated);
    let loss = tape.cross_entropy(z, targets, class_weights);
    let omega_norm = tape.l2_norm(omega);
    ScaleTerm { loss, omega_norm }
}

/// Sum of per-scale losses, each divided by `4^(i-1)` times its gate norm,
/// with scale 1 (the coarsest) undiminished.
pub fn combine_scale_losses(tape: &mut Tape, terms: &[ScaleTerm]) -> TensorId {
    let mut total = None;
    for (i, term) in terms.iter().enumerate() {
        let denom = tape.mul_const(term.omega_norm, 4f64.powi(i as i32));
        let scaled = tape.div(term.loss, denom);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    }
    total.expect("at least one scale term")
}

#[derive(Debug, Clone)]
pub struct MultiscaleLoss {
    pub total: TensorId,
    pub terms: Vec<ScaleTerm>,
}

/// Multi-scale supervision over decoder outputs F^1..F^4. `y_levels` holds
/// the matching downsampled targets from [`downsample_labels`].
pub fn multiscale_loss(
    tape: &mut Tape,
    binding: &ParamBinding,
    decoder: &[TensorId],
    y_levels: &[Mat],
    class_weights: &[f64],
) -> MultiscaleLoss {
    assert!(decoder.len() >= 4, "need decoder outputs F^1..F^4");
    assert_eq!(y_levels.len(), 4, "need targets for scales 1..4");
    let terms: Vec<ScaleTerm> = (1..=4)
        .map(|scale| {
            let probs = scale_head_probs(tape, binding, scale, decoder[scale - 1]);
            let omega = binding.id(&format!("head{scale}.omega"));
            scale_level_loss(tape, probs, omega, &y_levels[scale - 1], class_weights)
        })
        .collect();
    let total = combine_scale_losses(tape, &terms);
    MultiscaleLoss { total, terms }
}

/// One long-tailed head's contribution: gated probabilities (no
/// renormalization, the regression does not need a distribution) and the
/// mean squared error against `targets` over the labeled rows.
#[derive(Debug, Clone, Copy)]
pub struct TailTerm {
    pub loss: TensorId,
    pub omega_norm: TensorId,
    /// Gated probabilities over all rows, labeled or not.
    pub gated: TensorId,
}

pub fn tail_head_term(
    tape: &mut Tape,
    probs: TensorId,
    omega: TensorId,
    targets: &Mat,
    labeled: &[usize],
) -> TailTerm {
    let gated = tape.mul_broadcast(probs, omega);
    let loss = if labeled.is_empty() {
        tape.scalar(0.0)
    } else {
        let z = tape.gather_rows(gated, labeled);
        let t = targets.select(Axis(0), labeled);
        tape.mse(z, &t)
    };
    let omega_norm = tape.l2_norm(omega);
    TailTerm { loss, omega_norm, gated }
}

#[derive(Debug, Clone)]
pub struct LongtailLoss {
    pub total: TensorId,
    /// Summed gated outputs of both heads; the prediction source.
    pub z_tail: TensorId,
    pub heads: [TailTerm; 2],
}

/// Dual-head long-tailed loss on the full-resolution features F^5. Head 1
/// regresses toward the full one-hot truth, head 2 toward the truth with
/// head-class rows zeroed, each normalized by its gate norm.
pub fn longtail_loss(
    tape: &mut Tape,
    binding: &ParamBinding,
    f5: TensorId,
    labels: &[i32],
    tail_set: &TailSet,
) -> LongtailLoss {
    let labeled = labeled_rows(labels);
    let targets = [
        one_hot(labels, tail_set.classes()),
        one_hot_tail(labels, tail_set),
    ];
    let heads: Vec<TailTerm> = (1..=2)
        .map(|i| {
            let tag = format!("tail{i}");
            let logits = affine(tape, binding, f5, &format!("{tag}.cls_w"), &format!("{tag}.cls_b"));
            let probs = tape.softmax_rows(logits);
            let omega = binding.id(&format!("{tag}.omega"));
            tail_head_term(tape, probs, omega, &targets[i - 1], &labeled)
        })
        .collect();
    let z_tail = tape.add(heads[0].gated, heads[1].gated);
    let term0 = tape.div(heads[0].loss, heads[0].omega_norm);
    let term1 = tape.div(heads[1].loss, heads[1].omega_norm);
    let total = tape.add(term0, term1);
    LongtailLoss {
        total,
        z_tail,
        heads: [heads[0], heads[1]],
    }
}

/// The combined objective `lambda * multiscale + longtail`.
pub fn hybrid_loss(tape: &mut Tape, l_scale: TensorId, l_tail: TensorId, lambda: f64) -> TensorId {
    assert!(lambda >= 0.0, "lambda must be >= 0");
    let scaled = tape.mul_const(l_scale, lambda);
    tape.add(scaled, l_tail)
}

/// Plain class-weighted cross-entropy on the full-resolution head; the
/// supervision and prediction source when the long-tailed stack is off.
#[derive(Debug, Clone, Copy)]
pub struct FinalHead {
    pub loss: TensorId,
    pub probs: TensorId,
}

pub fn final_head_loss(
    tape: &mut Tape,
    binding: &ParamBinding,
    f5: TensorId,
    y: &Mat,
    class_weights: &[f64],
) -> FinalHead {
    let probs = scale_head_probs(tape, binding, 5, f5);
    let loss = tape.cross_entropy(probs, y, class_weights);
    FinalHead { loss, probs }
}

/// Per-point class scores for prediction: the summed gated outputs of the
/// long-tailed heads when they are on, otherwise the full-resolution head's
/// probabilities.
pub fn prediction_scores(
    tape: &mut Tape,
    binding: &ParamBinding,
    f5: TensorId,
    ltl: bool,
) -> TensorId {
    if !ltl {
        return scale_head_probs(tape, binding, 5, f5);
    }
    let gated: Vec<TensorId> = (1..=2)
        .map(|i| {
            let tag = format!("tail{i}");
            let logits =
                affine(tape, binding, f5, &format!("{tag}.cls_w"), &format!("{tag}.cls_b"));
            let probs = tape.softmax_rows(logits);
            tape.mul_broadcast(probs, binding.id(&format!("{tag}.omega")))
        })
        .collect();
    tape.add(gated[0], gated[1])
}

/// Per-row argmax class ids; ties go to the smallest id.
pub fn predict(z: &Mat) -> Vec<i32> {
    z.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (l, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = l;
                }
            }
            best as i32
        })
        .collect()
}

/// Rescale any gate vector whose norm fell below [`OMEGA_NORM_EPSILON`]
/// back up to it (an all-zero gate becomes a uniform vector of that norm).
pub fn guard_gate_norms(params: &mut NetworkParams) {
    let gates: Vec<String> = params
        .names()
        .filter(|name| name.ends_with(".omega"))
        .map(str::to_owned)
        .collect();
    for name in gates {
        let norm = params.get(&name).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= OMEGA_NORM_EPSILON {
            continue;
        }
        params.update(&name, |m| {
            if norm == 0.0 {
                let uniform = OMEGA_NORM_EPSILON / (m.len() as f64).sqrt();
                m.fill(uniform);
            } else {
                let scale = OMEGA_NORM_EPSILON / norm;
                m.mapv_inplace(|v| v * scale);
            }
        });
    }
}
