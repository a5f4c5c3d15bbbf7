//! Evaluation protocol: per-class IoU and accuracy from a confusion matrix,
//! per-level and cross-level means, and instance AP at an IoU threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{Instance, InstanceSet};
use crate::taxonomy::{NodeId, PartTaxonomy, UNLABELED};
use crate::voxelgrid::LabelField;

/// Per-class accuracy definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    /// `TP / (TP + FN)`.
    #[default]
    Recall,
    /// `(recall + specificity) / 2`, class versus rest.
    BalancedBinary,
}

/// Square counts over `{0} ∪ classes`, rows = ground truth, columns =
/// prediction, both in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<NodeId>,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_fields(pred: &LabelField, gt: &LabelField, classes: &BTreeSet<NodeId>) -> Result<Self> {
        if pred.len() != gt.len() || pred.keys().zip(gt.keys()).any(|(a, b)| a != b) {
            return Err(Error::invalid("prediction and ground truth cover different voxels"));
        }
        let mut labels: Vec<NodeId> = vec![UNLABELED];
        labels.extend(classes.iter().copied().filter(|c| *c != UNLABELED));
        let index: BTreeMap<NodeId, usize> =
            labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let n = labels.len();
        let mut counts = vec![0u64; n * n];
        for (g, p) in gt.values().zip(pred.values()) {
            let gi = *index.get(g).ok_or(Error::UnknownLabel(*g))?;
            let pi = *index.get(p).ok_or(Error::UnknownLabel(*p))?;
            counts[gi * n + pi] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: NodeId,
    pub name: String,
    pub gt_voxels: u64,
    /// `None` when the class has no ground-truth voxels.
    pub iou: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub level: usize,
    pub accuracy_mode: AccuracyMode,
    pub classes: Vec<ClassMetrics>,
    /// Means over classes with defined values; `None` if there are none.
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    /// Number of classes entering the means.
    pub num_defined: usize,
}

/// Per-class IoU and accuracy at one level. Voxels predicted `0` count as
/// false negatives of their ground-truth class and never as false positives.
pub fn semantic_metrics(
    pred: &LabelField,
    gt: &LabelField,
    classes: &BTreeSet<NodeId>,
    mode: AccuracyMode,
) -> Result<SemanticReport> {
    let cm = ConfusionMatrix::from_fields(pred, gt, classes)?;
    Ok(report_from_confusion(&cm, mode, 0, |_| String::new()))
}

/// Same as [`semantic_metrics`] with names and level taken from a taxonomy.
pub fn semantic_metrics_at_level(
    pred: &LabelField,
    gt: &LabelField,
    tax: &PartTaxonomy,
    level: usize,
    mode: AccuracyMode,
) -> Result<SemanticReport> {
    let classes = tax.level_classes(level);
    let cm = ConfusionMatrix::from_fields(pred, gt, &classes)?;
    Ok(report_from_confusion(&cm, mode, level, |id| {
        tax.node(id).map(|n| n.name.clone()).unwrap_or_default()
    }))
}

fn report_from_confusion(
    cm: &ConfusionMatrix,
    mode: AccuracyMode,
    level: usize,
    name: impl Fn(NodeId) -> String,
) -> SemanticReport {
    let n = cm.size();
    let total = cm.total();
    let mut rows = Vec::new();
    for c in 1..n {
        let tp = cm.get(c, c);
        let gt_count: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let pred_count: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let fn_ = gt_count - tp;
        let fp = pred_count - tp;
        let (iou, acc) = if gt_count == 0 {
            (None, None)
        } else {
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            let recall = tp as f64 / gt_count as f64;
            let acc = match mode {
                AccuracyMode::Recall => recall,
                AccuracyMode::BalancedBinary => {
                    let negatives = total - gt_count;
                    let spec = if negatives == 0 {
                        1.0
                    } else {
                        (negatives - fp) as f64 / negatives as f64
                    };
                    (recall + spec) / 2.0
                }
            };
            (Some(iou), Some(acc))
        };
        rows.push(ClassMetrics {
            class_id: cm.labels[c],
            name: name(cm.labels[c]),
            gt_voxels: gt_count,
            iou,
            acc,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    SemanticReport {
        level,
        accuracy_mode: mode,
        miou: mean(|r| r.iou),
        macc: mean(|r| r.acc),
        num_defined: rows.iter().filter(|r| r.iou.is_some()).count(),
        classes: rows,
    }
}

/// Mean of the per-level mIoU values that are defined.
pub fn hierarchical_summary(reports: &[SemanticReport]) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter_map(|r| r.miou).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceClassRow {
    pub class_id: NodeId,
    pub name: String,
    pub num_gt: usize,
    pub num_pred: usize,
    pub true_positives: usize,
    /// `None` when the class has no ground-truth instance.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub iou_threshold: f64,
    /// Mean AP over classes with ground truth.
    pub ap: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Mean IoU of matched pairs.
    pub mean_matched_iou: Option<f64>,
    pub num_instances: usize,
    pub per_class: Vec<InstanceClassRow>,
}

pub fn voxel_iou(a: &BTreeSet<crate::VoxelKey>, b: &BTreeSet<crate::VoxelKey>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|k| large.contains(*k)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Area under the precision/recall curve with all-point interpolation:
/// precision made monotone from the right, integrated over recall steps.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend(&precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Greedy confidence-ordered matching per class. Each prediction takes the
/// unmatched same-class ground truth with the highest IoU at or above the
/// threshold (ties: smaller gt id).
pub fn instance_metrics(
    pred: &InstanceSet,
    gt: &InstanceSet,
    iou_threshold: f64,
    names: impl Fn(NodeId) -> String,
) -> Result<InstanceReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold must lie in (0, 1], got {iou_threshold}")));
    }
    let mut by_class: BTreeMap<NodeId, (Vec<&Instance>, Vec<&Instance>)> = BTreeMap::new();
    for p in &pred.instances {
        by_class.entry(p.class_id).or_default().0.push(p);
    }
    for g in &gt.instances {
        by_class.entry(g.class_id).or_default().1.push(g);
    }
    let mut rows = Vec::new();
    let mut total_tp = 0usize;
    let mut matched_ious = Vec::new();
    for (class_id, (mut preds, gts)) in by_class {
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
        let mut gts = gts;
        gts.sort_by_key(|g| g.id);
        let mut taken = vec![false; gts.len()];
        let mut flags = Vec::with_capacity(preds.len());
        for p in &preds {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = voxel_iou(&p.voxels, &g.voxels);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, iou)) = best {
                taken[gi] = true;
                matched_ious.push(iou);
            }
            flags.push(best.is_some());
        }
        let tp = flags.iter().filter(|f| **f).count();
        total_tp += tp;
        rows.push(InstanceClassRow {
            class_id,
            name: names(class_id),
            num_gt: gts.len(),
            num_pred: preds.len(),
            true_positives: tp,
            ap: (!gts.is_empty()).then(|| average_precision(&flags, gts.len())),
        });
    }
    let aps: Vec<f64> = rows.iter().filter_map(|r| r.ap).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(InstanceReport {
        iou_threshold,
        ap: mean(&aps),
        precision: (!pred.is_empty()).then(|| total_tp as f64 / pred.len() as f64),
        recall: (!gt.is_empty()).then(|| total_tp as f64 / gt.len() as f64),
        mean_matched_iou: mean(&matched_ious),
        num_instances: pred.len(),
        per_class: rows,
    })
}

/// A named column of a results table, e.g. one objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub name: String,
    pub report: SemanticReport,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

/// Aligned-column CSV: one row per class name, `IoU`/`Acc` per column,
/// `Mean` last, undefined cells rendered `---`.
pub fn render_table(columns: &[ReportColumn]) -> String {
    let mut names: BTreeMap<NodeId, String> = BTreeMap::new();
    for col in columns {
        for c in &col.report.classes {
            names.entry(c.class_id).or_insert_with(|| {
                if c.name.is_empty() {
                    c.class_id.to_string()
                } else {
                    c.name.clone()
                }
            });
        }
    }
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["class_name".to_string()];
    for col in columns {
        header.push(format!("{} IoU", col.name));
        header.push(format!("{} Acc", col.name));
    }
    grid.push(header);
    for (id, name) in &names {
        let mut row = vec![name.clone()];
        for col in columns {
            let c = col.report.classes.iter().find(|c| c.class_id == *id);
            row.push(cell(c.and_then(|c| c.iou)));
            row.push(cell(c.and_then(|c| c.acc)));
        }
        grid.push(row);
    }
    let mut mean = vec!["Mean".to_string()];
    for col in columns {
        mean.push(cell(col.report.miou));
        mean.push(cell(col.report.macc));
    }
    grid.push(mean);

    let widths: Vec<usize> = (0..grid[0].len())
        .map(|i| grid.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(", ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(labels: &[NodeId]) -> LabelField {
        labels.iter().enumerate().map(|(i, &l)| ([i as i32, 0, 0], l)).collect()
    }

    #[test]
    fn perfect_prediction() {
        let gt = field(&[1, 1, 2, 3, 3]);
        let classes = BTreeSet::from([1, 2, 3, 4]);
        let r = semantic_metrics(&gt, &gt, &classes, AccuracyMode::Recall).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.macc, Some(1.0));
        assert_eq!(r.num_defined, 3);
        assert_eq!(r.classes[3].iou, None);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let gt = field(&[1, 1, 2]);
        let pred = field(&[2, 2, 1]);
        let r = semantic_metrics(&pred, &gt, &BTreeSet::from([1, 2]), AccuracyMode::Recall).unwrap();
        assert_eq!(r.classes[0].iou, Some(0.0));
        assert_eq!(r.classes[1].iou, Some(0.0));
    }

    #[test]
    fn unlabeled_prediction_is_false_negative_only() {
        let gt = field(&[1, 1, 2, 2]);
        let pred = field(&[1, 0, 2, 2]);
        let r = semantic_metrics(&pred, &gt, &BTreeSet::from([1, 2]), AccuracyMode::Recall).unwrap();
        assert_eq!(r.classes[0].iou, Some(0.5));
        assert_eq!(r.classes[1].iou, Some(1.0));
    }

    #[test]
    fn balanced_binary_mode() {
        let gt = field(&[1, 1, 2, 2]);
        let pred = field(&[1, 2, 2, 2]);
        let r = semantic_metrics(&pred, &gt, &BTreeSet::from([1, 2]), AccuracyMode::BalancedBinary)
            .unwrap();
        // class 1: recall 1/2, specificity 2/2; class 2: recall 1, specificity 1/2
        assert_eq!(r.classes[0].acc, Some(0.75));
        assert_eq!(r.classes[1].acc, Some(0.75));
    }

    #[test]
    fn key_mismatch_is_invalid() {
        let a = field(&[1, 1]);
        let b = field(&[1]);
        assert!(semantic_metrics(&a, &b, &BTreeSet::from([1]), AccuracyMode::Recall).is_err());
        let c = field(&[1, 9]);
        assert!(semantic_metrics(&c, &a, &BTreeSet::from([1]), AccuracyMode::Recall).is_err());
    }

    #[test]
    fn summary_mean() {
        let gt = field(&[1]);
        let classes = BTreeSet::from([1]);
        let mut a = semantic_metrics(&gt, &gt, &classes, AccuracyMode::Recall).unwrap();
        let mut b = a.clone();
        a.miou = Some(1.0);
        b.miou = Some(0.0);
        assert_eq!(hierarchical_summary(&[a.clone(), b]), Some(0.5));
        assert_eq!(hierarchical_summary(&[a.clone(), a]), Some(1.0));
    }

    fn inst(id: u32, class_id: NodeId, conf: f64, keys: std::ops::Range<i32>) -> Instance {
        Instance {
            id,
            class_id,
            confidence: conf,
            voxels: keys.map(|i| [i, 0, 0]).collect(),
        }
    }

    #[test]
    fn single_match_and_below_threshold() {
        let gt = InstanceSet::new(vec![inst(1, 5, 1.0, 0..10)]).unwrap();
        // IoU 6/10
        let pred = InstanceSet::new(vec![inst(1, 5, 0.3, 0..6)]).unwrap();
        let r = instance_metrics(&pred, &gt, 0.5, |_| String::new()).unwrap();
        assert_eq!((r.ap, r.recall, r.precision), (Some(1.0), Some(1.0), Some(1.0)));
        assert!((r.mean_matched_iou.unwrap() - 0.6).abs() < 1e-15);
        // IoU 4/10
        let pred = InstanceSet::new(vec![inst(1, 5, 0.9, 0..4)]).unwrap();
        let r = instance_metrics(&pred, &gt, 0.5, |_| String::new()).unwrap();
        assert_eq!((r.ap, r.recall), (Some(0.0), Some(0.0)));
        assert!(instance_metrics(&pred, &gt, 0.0, |_| String::new()).is_err());
    }

    #[test]
    fn ap_curve_values() {
        assert_eq!(average_precision(&[true, false, true], 2), 1.0 * 0.5 + (2.0 / 3.0) * 0.5);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn table_layout() {
        let gt = field(&[1, 1, 2]);
        let classes = BTreeSet::from([1, 2, 3]);
        let r = semantic_metrics(&gt, &gt, &classes, AccuracyMode::Recall).unwrap();
        let text = render_table(&[ReportColumn {
            name: "Base".into(),
            report: r,
        }]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[3].contains("---"));
        assert!(lines[4].starts_with("Mean"));
        assert!(lines[4].contains("100.00%"));
    }
}
