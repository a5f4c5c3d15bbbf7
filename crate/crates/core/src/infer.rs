//! Hierarchical label inference from per-voxel score fields: flat argmax,
//! bottom-up probability aggregation and top-down masked prediction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::ScoreField;
use crate::taxonomy::{NodeId, PartTaxonomy, UNLABELED};

/// Column index of the row maximum; the first (smallest class id) wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Per-voxel argmax class.
pub fn flat_predict(scores: &ScoreField) -> Vec<NodeId> {
    scores.rows().map(|r| scores.classes[argmax(r)]).collect()
}

/// Sums leaf (or any finer-level) probabilities into their ancestors at
/// `level`. Rows must be non-negative and sum to 1 within 1e-6.
pub fn bottom_up_project(probs: &ScoreField, tax: &PartTaxonomy, level: usize) -> Result<ScoreField> {
    for (j, row) in probs.rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "voxel {j}: probabilities must be non-negative and sum to 1 (sum {sum})"
            )));
        }
    }
    let targets = probs
        .classes
        .iter()
        .map(|&c| tax.project_to_level(c, level))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out_classes = targets.clone();
    out_classes.sort_unstable();
    out_classes.dedup();
    let column: BTreeMap<NodeId, usize> =
        out_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let map: Vec<usize> = targets.iter().map(|t| column[t]).collect();
    let width = out_classes.len();
    let mut values = vec![0.0; probs.num_voxels() * width];
    for (j, row) in probs.rows().enumerate() {
        let out = &mut values[j * width..(j + 1) * width];
        for (c, &p) in row.iter().enumerate() {
            out[map[c]] += p;
        }
    }
    ScoreField::new(out_classes, values)
}

/// Level-`level` labels restricted to the children of each voxel's parent
/// label at `level - 1`. Voxels with parent `0` predict `0`; a parent without
/// candidate columns predicts itself.
pub fn top_down_predict(
    cond_scores: &ScoreField,
    parents: &[NodeId],
    tax: &PartTaxonomy,
    level: usize,
) -> Result<Vec<NodeId>> {
    if level < 2 {
        return Err(Error::invalid("top-down prediction starts at level 2"));
    }
    if parents.len() != cond_scores.num_voxels() {
        return Err(Error::invalid(format!(
            "{} parent labels for {} voxels",
            parents.len(),
            cond_scores.num_voxels()
        )));
    }
    let column_parent = cond_scores
        .classes
        .iter()
        .map(|&c| tax.project_to_level(c, level - 1))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(parents.len());
    for (row, &parent) in cond_scores.rows().zip(parents) {
        if parent == UNLABELED {
            out.push(UNLABELED);
            continue;
        }
        if !tax.contains(parent) {
            return Err(Error::UnknownLabel(parent));
        }
        let mut best: Option<usize> = None;
        for (c, &v) in row.iter().enumerate() {
            if column_parent[c] == parent && best.is_none_or(|b| v > row[b]) {
                best = Some(c);
            }
        }
        out.push(best.map_or(parent, |c| cond_scores.classes[c]));
    }
    Ok(out)
}

/// Top-down inference chained on its own predictions: level 1 by flat
/// argmax, every later level masked by the previous prediction. This is an
/// end-to-end mode; evaluation normally masks with ground truth instead.
pub fn top_down_chained(levels: &[ScoreField], tax: &PartTaxonomy) -> Result<Vec<Vec<NodeId>>> {
    let Some(first) = levels.first() else {
        return Ok(Vec::new());
    };
    let mut out = vec![flat_predict(first)];
    for (i, scores) in levels.iter().enumerate().skip(1) {
        let prev = out.last().expect("level 1 predicted");
        out.push(top_down_predict(scores, prev, tax, i + 1)?);
    }
    Ok(out)
}

/// Row-wise softmax of a logit field.
pub fn softmax(scores: &ScoreField) -> ScoreField {
    let mut values = Vec::with_capacity(scores.values.len());
    for row in scores.rows() {
        let lse = crate::losses::log_sum_exp(row);
        values.extend(row.iter().map(|v| (v - lse).exp()));
    }
    ScoreField {
        classes: scores.classes.clone(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NodeRecord;

    fn tax() -> PartTaxonomy {
        let r = |id, name: &str, parent| NodeRecord {
            id,
            name: name.into(),
            parent,
            occurrence: 0,
        };
        PartTaxonomy::from_records(vec![
            r(1, "Chair", None),
            r(2, "Chair/chair_seat", Some(1)),
            r(3, "Chair/chair_back", Some(1)),
            r(4, "Table", None),
            r(5, "Table/tabletop", Some(4)),
        ])
        .unwrap()
    }

    #[test]
    fn flat_ties_pick_smaller_id() {
        let s = ScoreField::new(vec![2, 5, 9], vec![0.0, 1.0, 0.0, 0.4, 0.1, 0.4]).unwrap();
        assert_eq!(flat_predict(&s), vec![5, 2]);
    }

    #[test]
    fn bottom_up_arithmetic() {
        let s = ScoreField::new(vec![2, 3, 5], vec![0.3, 0.2, 0.5]).unwrap();
        let up = bottom_up_project(&s, &tax(), 1).unwrap();
        assert_eq!(up.classes, vec![1, 4]);
        assert!((up.values[0] - 0.5).abs() < 1e-15 && (up.values[1] - 0.5).abs() < 1e-15);
        assert_eq!(bottom_up_project(&s, &tax(), 2).unwrap(), s);
        let bad = ScoreField::new(vec![2, 3, 5], vec![0.3, 0.2, 0.6]).unwrap();
        assert!(bottom_up_project(&bad, &tax(), 1).is_err());
        let neg = ScoreField::new(vec![2, 3, 5], vec![-0.1, 0.6, 0.5]).unwrap();
        assert!(bottom_up_project(&neg, &tax(), 1).is_err());
    }

    #[test]
    fn top_down_masks_to_children() {
        let t = tax();
        // scores favour the table top but the parent is Chair
        let s = ScoreField::new(vec![2, 3, 5], vec![0.1, 0.2, 0.7, 0.1, 0.2, 0.7]).unwrap();
        assert_eq!(top_down_predict(&s, &[1, 0], &t, 2).unwrap(), vec![3, 0]);
        // Table has one child, which wins regardless of its score
        let s = ScoreField::new(vec![2, 3, 5], vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(top_down_predict(&s, &[4], &t, 2).unwrap(), vec![5]);
        // no candidate column: the parent carries down
        let s = ScoreField::new(vec![2, 3], vec![0.5, 0.5]).unwrap();
        assert_eq!(top_down_predict(&s, &[4], &t, 2).unwrap(), vec![4]);
        assert!(top_down_predict(&s, &[4], &t, 1).is_err());
    }

    #[test]
    fn chained_uses_own_predictions() {
        let t = tax();
        let l1 = ScoreField::new(vec![1, 4], vec![0.2, 0.8]).unwrap();
        let l2 = ScoreField::new(vec![2, 3, 5], vec![0.9, 0.05, 0.05]).unwrap();
        let out = top_down_chained(&[l1, l2], &t).unwrap();
        assert_eq!(out, vec![vec![4], vec![5]]);
    }
}
