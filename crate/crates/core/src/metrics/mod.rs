//! Confusion-matrix accumulation and the eight reported metrics: OA, AA,
//! kappa, mIoU, and head/tail average and minimum per-class accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::TailSet;
use crate::pointcloud::UNLABELED;

/// Row = truth, column = prediction, integer counts. Only labeled points
/// under the evaluation mask accumulate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// Row-major L x L.
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Add one (truth, prediction) pair per point that is labeled and
    /// eval-flagged. Unlabeled or masked-out points are skipped.
    pub fn accumulate(&mut self, truths: &[i32], predictions: &[i32], eval_mask: &[bool]) {
        assert_eq!(truths.len(), predictions.len(), "length mismatch");
        assert_eq!(truths.len(), eval_mask.len(), "mask length mismatch");
        for ((&truth, &pred), &eval) in truths.iter().zip(predictions).zip(eval_mask) {
            if !eval || truth == UNLABELED {
                continue;
            }
            let t = truth as usize;
            let p = pred as usize;
            assert!(t < self.classes, "truth label {t} out of range");
            assert!(p < self.classes, "prediction {p} out of range");
            self.counts[t * self.classes + p] += 1;
            self.total += 1;
        }
    }

    /// Elementwise addition; parallel evaluation shards merge with this.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    fn row_sum(&self, t: usize) -> u64 {
        (0..self.classes).map(|p| self.count(t, p)).sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, p)).sum()
    }
}

/// The reported metric set. Classes absent from the evaluation truth carry
/// no per-class accuracy and are listed in `absent_classes`; head/tail stats
/// are `None` when their partition has no present class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub head_avg: Option<f64>,
    pub head_min: Option<f64>,
    pub tail_avg: Option<f64>,
    pub tail_min: Option<f64>,
    pub absent_classes: Vec<usize>,
}

/// All metrics from one matrix. Per-class accuracy is row recall; AA and
/// mIoU average over classes present in the truth; kappa uses the marginal
/// chance-agreement correction.
pub fn compute_report(cm: &ConfusionMatrix, tail_set: &TailSet) -> Result<MetricsReport> {
    if cm.total == 0 {
        return Err(Error::validation(
            "confusion_matrix",
            "no evaluation points accumulated",
        ));
    }
    let classes = cm.classes;
    assert_eq!(tail_set.is_tail.len(), classes, "tail set class count");
    let total = cm.total as f64;

    let trace: u64 = (0..classes).map(|c| cm.count(c, c)).sum();
    let oa = trace as f64 / total;

    let mut per_class_acc: Vec<Option<f64>> = Vec::with_capacity(classes);
    let mut ious: Vec<Option<f64>> = Vec::with_capacity(classes);
    let mut absent_classes = Vec::new();
    for c in 0..classes {
        let truth = cm.row_sum(c);
        if truth == 0 {
            per_class_acc.push(None);
            ious.push(None);
            absent_classes.push(c);
            continue;
        }
        let tp = cm.count(c, c);
        per_class_acc.push(Some(tp as f64 / truth as f64));
        let denom = truth + cm.col_sum(c) - tp;
        ious.push(Some(tp as f64 / denom as f64));
    }

    let present_acc: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
    let aa = present_acc.iter().sum::<f64>() / present_acc.len() as f64;
    let present_iou: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = present_iou.iter().sum::<f64>() / present_iou.len() as f64;

    let p_o = oa;
    let p_e = (0..classes)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (total * total);
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        // Degenerate marginals: all mass on one class. Perfect agreement
        // scores 1, anything else scores 0.
        if (1.0 - p_o).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    let partition_stats = |tail: bool| -> (Option<f64>, Option<f64>) {
        let accs: Vec<f64> = (0..classes)
            .filter(|&c| tail_set.is_tail[c] == tail)
            .filter_map(|c| per_class_acc[c])
            .collect();
        if accs.is_empty() {
            (None, None)
        } else {
            let avg = accs.iter().sum::<f64>() / accs.len() as f64;
            let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
            (Some(avg), Some(min))
        }
    };
    let (head_avg, head_min) = partition_stats(false);
    let (tail_avg, tail_min) = partition_stats(true);

    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        miou,
        per_class_acc,
        head_avg,
        head_min,
        tail_avg,
        tail_min,
        absent_classes,
    })
}

impl MetricsReport {
    /// Two-column CSV: class accuracies first, then the aggregate metrics,
    /// then the head/tail partition stats.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|v| format!("{v:.6}")).unwrap_or_default()
        }
        let mut out = String::from("metric,value\n");
        for (c, acc) in self.per_class_acc.iter().enumerate() {
            let name = class_names.get(c).map(String::as_str).unwrap_or("?");
            out.push_str(&format!("acc_{name},{}\n", cell(*acc)));
        }
        out.push_str(&format!("oa,{:.6}\n", self.oa));
        out.push_str(&format!("aa,{:.6}\n", self.aa));
        out.push_str(&format!("kappa,{:.6}\n", self.kappa));
        out.push_str(&format!("miou,{:.6}\n", self.miou));
        out.push_str(&format!("head_avg,{}\n", cell(self.head_avg)));
        out.push_str(&format!("head_min,{}\n", cell(self.head_min)));
        out.push_str(&format!("tail_avg,{}\n", cell(self.tail_avg)));
        out.push_str(&format!("tail_min,{}\n", cell(self.tail_min)));
        out
    }
}

#[cfg(test)]
mod tests;
