//! Mean-shift clustering of voxel embeddings into part instances.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::Embeddings;
use crate::taxonomy::{NodeId, PartTaxonomy, UNLABELED};
use crate::voxelgrid::{VoxelKey, VoxelScene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    /// Radius of the flat kernel in embedding space.
    pub bandwidth: f64,
    pub max_iters: usize,
    pub shift_eps: f64,
    /// Converged modes closer than this are merged (single linkage).
    pub merge_radius: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self::for_pull_margin(crate::losses::DiscriminativeParams::default().delta_v)
    }
}

impl MeanShiftParams {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iters: 300,
            shift_eps: 1e-6,
            merge_radius: bandwidth / 2.0,
        }
    }

    /// Bandwidth of 1.5·δ_v for embeddings trained with pull margin δ_v.
    pub fn for_pull_margin(delta_v: f64) -> Self {
        Self::with_bandwidth(1.5 * delta_v)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if !(self.merge_radius >= 0.0 && self.merge_radius <= self.bandwidth) {
            return Err(Error::invalid("merge radius must lie in [0, bandwidth]"));
        }
        if self.max_iters == 0 || !(self.shift_eps > 0.0) {
            return Err(Error::invalid("max_iters must be >= 1 and shift_eps > 0"));
        }
        Ok(())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flat-kernel mean shift seeded at every point. Returns one cluster id per
/// point, dense from 1 in order of first appearance.
pub fn mean_shift(emb: &Embeddings, params: &MeanShiftParams) -> Result<Vec<u32>> {
    params.validate()?;
    let n = emb.len();
    let d = emb.dim;
    let bw2 = params.bandwidth * params.bandwidth;
    let modes: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = emb.row(i).to_vec();
            let mut next = vec![0.0; d];
            for _ in 0..params.max_iters {
                next.iter_mut().for_each(|v| *v = 0.0);
                let mut count = 0usize;
                for j in 0..n {
                    let p = emb.row(j);
                    if dist2(p, &x) <= bw2 {
                        count += 1;
                        for (acc, &v) in next.iter_mut().zip(p) {
                            *acc += v;
                        }
                    }
                }
                if count == 0 {
                    break;
                }
                let inv = 1.0 / count as f64;
                next.iter_mut().for_each(|v| *v *= inv);
                let shift = dist2(&next, &x).sqrt();
                std::mem::swap(&mut x, &mut next);
                if shift < params.shift_eps {
                    break;
                }
            }
            x
        })
        .collect();

    // single-linkage merge of modes: independent of point order
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let merge2 = params.merge_radius * params.merge_radius;
    for i in 0..n {
        for j in i + 1..n {
            if dist2(&modes[i], &modes[j]) <= merge2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut ids: BTreeMap<usize, u32> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let root = find(&mut parent, i);
        let next = ids.len() as u32 + 1;
        out.push(*ids.entry(root).or_insert(next));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub class_id: NodeId,
    pub confidence: f64,
    pub voxels: BTreeSet<VoxelKey>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for inst in &instances {
            if !ids.insert(inst.id) {
                return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
            }
            if !inst.confidence.is_finite() {
                return Err(Error::NonFinite("instance confidence"));
            }
            for k in &inst.voxels {
                if !seen.insert(*k) {
                    return Err(Error::invalid(format!("voxel {k:?} belongs to two instances")));
                }
            }
        }
        Ok(Self { instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Ground-truth part instances at `level`. A voxel whose level label is
    /// its own leaf keeps its part instance; coarser labels group all voxels
    /// of one object sharing that label. Ids are dense from 1, ordered by
    /// smallest member voxel.
    pub fn ground_truth(scene: &VoxelScene, tax: &PartTaxonomy, level: usize) -> Result<Self> {
        let mut groups: BTreeMap<(u32, NodeId, u32), BTreeSet<VoxelKey>> = BTreeMap::new();
        for (key, e) in &scene.entries {
            if e.leaf_label == UNLABELED {
                continue;
            }
            if !tax.contains(e.leaf_label) {
                return Err(Error::UnknownLabel(e.leaf_label));
            }
            let class = tax.project_to_level(e.leaf_label, level)?;
            let part = if class == e.leaf_label { e.instance_id } else { 0 };
            groups.entry((e.object_id, class, part)).or_default().insert(*key);
        }
        let mut sets: Vec<(NodeId, BTreeSet<VoxelKey>)> = groups
            .into_iter()
            .map(|((_, class, _), voxels)| (class, voxels))
            .collect();
        sets.sort_by(|a, b| a.1.first().cmp(&b.1.first()));
        Self::new(
            sets.into_iter()
                .enumerate()
                .map(|(i, (class_id, voxels))| Instance {
                    id: i as u32 + 1,
                    class_id,
                    confidence: 1.0,
                    voxels,
                })
                .collect(),
        )
    }
}

/// Turns clusters into instances: class = majority non-zero semantic label
/// (ties: smallest id), confidence = share of the cluster's voxels carrying
/// it. Clusters below `min_confidence`, or without any label, are dropped.
/// Instance ids are the cluster ids.
pub fn extract_instances(
    keys: &[VoxelKey],
    clusters: &[u32],
    labels: &[NodeId],
    min_confidence: f64,
) -> Result<InstanceSet> {
    if keys.len() != clusters.len() || keys.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} keys, {} cluster ids, {} labels",
            keys.len(),
            clusters.len(),
            labels.len()
        )));
    }
    let mut members: BTreeMap<u32, (BTreeSet<VoxelKey>, BTreeMap<NodeId, usize>)> = BTreeMap::new();
    for ((key, &c), &l) in keys.iter().zip(clusters).zip(labels) {
        let (voxels, hist) = members.entry(c).or_default();
        if !voxels.insert(*key) {
            return Err(Error::invalid(format!("voxel {key:?} listed twice")));
        }
        if l != UNLABELED {
            *hist.entry(l).or_default() += 1;
        }
    }
    let mut out = Vec::new();
    for (id, (voxels, hist)) in members {
        let Some((&class_id, &count)) = hist
            .iter()
            .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
        else {
            continue;
        };
        let confidence = count as f64 / voxels.len() as f64;
        if confidence < min_confidence {
            continue;
        }
        out.push(Instance {
            id,
            class_id,
            confidence,
            voxels,
        });
    }
    InstanceSet::new(out)
}
