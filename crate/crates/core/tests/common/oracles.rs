//! Brute-force reference implementations and random small instances, shared
//! by the core test suites and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hierpart::align::{axis_angle, AffineTransform, Point};
use hierpart::instances::{Instance, InstanceSet};
use hierpart::losses::ScoreField;
use hierpart::rng::{seeded, FixtureRng};
use hierpart::synth::random_taxonomy;
use hierpart::taxonomy::{NodeId, PartTaxonomy};
use hierpart::voxelgrid::{LabelField, LabeledMesh, VoxelKey, VoxelScene};
use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::Rng;

/// Depth by counting parent links.
pub fn depth_by_walk(tax: &PartTaxonomy, id: NodeId) -> usize {
    let mut d = 1;
    let mut cur = id;
    while let Some(p) = tax.node(cur).and_then(|n| n.parent) {
        d += 1;
        cur = p;
    }
    d
}

/// Ancestor at depth `k` by walking parent links; shallower nodes map to
/// themselves.
pub fn project_by_walk(tax: &PartTaxonomy, id: NodeId, k: usize) -> NodeId {
    let mut chain = vec![id];
    let mut cur = id;
    while let Some(p) = tax.node(cur).and_then(|n| n.parent) {
        chain.push(p);
        cur = p;
    }
    chain.reverse();
    chain[k.min(chain.len()) - 1]
}

/// Kept ids: own count ≥ t and every ancestor's count ≥ t.
pub fn prune_oracle(tax: &PartTaxonomy, t: u64) -> BTreeSet<NodeId> {
    tax.ids()
        .filter(|&id| {
            let mut cur = Some(id);
            while let Some(c) = cur {
                let n = tax.node(c).unwrap();
                if n.occurrence < t {
                    return false;
                }
                cur = n.parent;
            }
            true
        })
        .collect()
}

/// Per-node count of labels inside its subtree, O(nodes × labels).
pub fn occurrence_oracle(tax: &PartTaxonomy, labels: &[NodeId]) -> BTreeMap<NodeId, u64> {
    tax.ids()
        .map(|id| {
            let n = labels
                .iter()
                .filter(|&&l| l != 0 && {
                    let mut cur = Some(l);
                    let mut hit = false;
                    while let Some(c) = cur {
                        if c == id {
                            hit = true;
                            break;
                        }
                        cur = tax.node(c).unwrap().parent;
                    }
                    hit
                })
                .count() as u64;
            (id, n)
        })
        .collect()
}

/// Voxel containing `p` by explicit bounds search: `o + k·r ≤ p < o + (k+1)·r`.
pub fn containing_voxel(p: &Point, origin: &Vector3<f64>, res: f64) -> VoxelKey {
    let mut key = [0i32; 3];
    for a in 0..3 {
        let mut k = ((p[a] - origin[a]) / res) as i32 - 2;
        while origin[a] + (k + 1) as f64 * res <= p[a] {
            k += 1;
        }
        while origin[a] + k as f64 * res > p[a] {
            k -= 1;
        }
        key[a] = k;
    }
    key
}

/// Majority label per occupied voxel from every transformed vertex; ties go
/// to the smallest label. Voxels without vertices get 0.
pub fn vote_oracle(scene: &VoxelScene, sources: &[(&LabeledMesh, &AffineTransform)]) -> LabelField {
    let mut votes: BTreeMap<VoxelKey, Vec<NodeId>> = BTreeMap::new();
    for (mesh, t) in sources {
        for (v, &l) in mesh.vertices.iter().zip(&mesh.vertex_labels) {
            let p = t.linear * v + t.translation;
            let key = containing_voxel(&p, &scene.origin, scene.resolution);
            if scene.entries.contains_key(&key) {
                votes.entry(key).or_default().push(l);
            }
        }
    }
    scene
        .entries
        .keys()
        .map(|k| {
            let label = votes.get(k).map_or(0, |ls| {
                let mut best = (0usize, 0);
                let mut sorted = ls.clone();
                sorted.sort();
                for &l in &sorted {
                    let c = sorted.iter().filter(|&&x| x == l).count();
                    if c > best.0 {
                        best = (c, l);
                    }
                }
                best.1
            });
            (*k, label)
        })
        .collect()
}

/// Per-voxel sum of the columns whose class walks up to each level-k class.
pub fn bottom_up_oracle(probs: &ScoreField, tax: &PartTaxonomy, k: usize) -> BTreeMap<NodeId, Vec<f64>> {
    let mut out: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for (c, &class) in probs.classes.iter().enumerate() {
        let target = project_by_walk(tax, class, k);
        let col = out.entry(target).or_insert_with(|| vec![0.0; probs.num_voxels()]);
        for (j, row) in probs.rows().enumerate() {
            col[j] += row[c];
        }
    }
    out
}

/// `(tp, fp, fn)` of one class counted voxel by voxel.
pub fn class_counts(pred: &LabelField, gt: &LabelField, class: NodeId) -> (u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (k, &g) in gt {
        let p = pred[k];
        if g == class && p == class {
            tp += 1;
        } else if g == class {
            fn_ += 1;
        } else if p == class {
            fp += 1;
        }
    }
    (tp, fp, fn_)
}

/// Exhaustive AP: enumerates every injective partial matching per class,
/// keeps the one where each prediction (confidence-descending, then id)
/// took a maximal-IoU free gt with IoU ≥ threshold (ties: smaller gt id) or
/// stayed unmatched only when none qualified, then integrates precision as
/// `Σ_{hits} max_{j ≥ i} precision(j) / num_gt`. Returns the class mean.
pub fn ap_oracle(pred: &InstanceSet, gt: &InstanceSet, thr: f64) -> Option<f64> {
    let classes: BTreeSet<NodeId> = gt.instances.iter().map(|g| g.class_id).collect();
    let mut aps = Vec::new();
    for class in classes {
        let mut ps: Vec<&Instance> = pred.instances.iter().filter(|p| p.class_id == class).collect();
        ps.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap().then(a.id.cmp(&b.id)));
        let mut gs: Vec<&Instance> = gt.instances.iter().filter(|g| g.class_id == class).collect();
        gs.sort_by_key(|g| g.id);
        let iou = |p: &Instance, g: &Instance| {
            let inter = p.voxels.intersection(&g.voxels).count() as f64;
            inter / (p.voxels.len() as f64 + g.voxels.len() as f64 - inter)
        };
        let mut all: Vec<Vec<Option<usize>>> = Vec::new();
        enumerate(ps.len(), gs.len(), &mut Vec::new(), &mut all);
        let mut chosen: Option<Vec<bool>> = None;
        for m in all {
            let mut free = vec![true; gs.len()];
            let mut ok = true;
            for (pi, choice) in m.iter().enumerate() {
                let cands: Vec<(usize, f64)> = (0..gs.len())
                    .filter(|&g| free[g])
                    .map(|g| (g, iou(ps[pi], gs[g])))
                    .filter(|(_, v)| *v >= thr)
                    .collect();
                let best = cands.iter().fold(None::<(usize, f64)>, |b, &(g, v)| match b {
                    Some((_, bv)) if bv >= v => b,
                    _ => Some((g, v)),
                });
                if *choice != best.map(|(g, _)| g) {
                    ok = false;
                    break;
                }
                if let Some(g) = choice {
                    free[*g] = false;
                }
            }
            if ok {
                assert!(chosen.is_none(), "greedy matching must be unique");
                chosen = Some(m.iter().map(|c| c.is_some()).collect());
            }
        }
        let hits = chosen.expect("greedy matching exists");
        let precision: Vec<f64> = (0..hits.len())
            .map(|i| hits[..=i].iter().filter(|h| **h).count() as f64 / (i + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..hits.len() {
            if hits[i] {
                ap += precision[i..].iter().cloned().fold(0.0, f64::max) / gs.len() as f64;
            }
        }
        aps.push(ap);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn enumerate(n: usize, m: usize, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
    if cur.len() == n {
        out.push(cur.clone());
        return;
    }
    cur.push(None);
    enumerate(n, m, cur, out);
    cur.pop();
    for g in 0..m {
        if !cur.contains(&Some(g)) {
            cur.push(Some(g));
            enumerate(n, m, cur, out);
            cur.pop();
        }
    }
}

/// Exact point-triangle distance: plane projection if it falls inside the
/// triangle (same-side tests), else the nearest of the three edges.
pub fn point_triangle_distance(p: &Point, a: &Point, b: &Point, c: &Point) -> f64 {
    let n = (b - a).cross(&(c - a));
    let seg = |u: &Point, v: &Point| {
        let d = v - u;
        let len2 = d.norm_squared();
        let t = if len2 == 0.0 { 0.0 } else { ((p - u).dot(&d) / len2).clamp(0.0, 1.0) };
        (p - (u + d * t)).norm()
    };
    let edges = seg(a, b).min(seg(b, c)).min(seg(c, a));
    if n.norm_squared() == 0.0 {
        return edges;
    }
    let nn = n.normalize();
    let q = p - nn * (p - a).dot(&nn);
    let inside = [(a, b), (b, c), (c, a)]
        .iter()
        .all(|(u, v)| (*v - *u).cross(&(q - *u)).dot(&n) >= 0.0);
    if inside {
        (p - q).norm()
    } else {
        edges
    }
}

/// Dense scan of every voxel center in the padded bounding box.
pub fn voxelize_oracle(mesh: &LabeledMesh, res: f64, trunc: f64) -> BTreeMap<VoxelKey, f64> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in &mesh.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let kl = |x: f64| ((x - trunc) / res).floor() as i32 - 1;
    let kh = |x: f64| ((x + trunc) / res).ceil() as i32 + 1;
    let mut out = BTreeMap::new();
    for i in kl(lo.x)..=kh(hi.x) {
        for j in kl(lo.y)..=kh(hi.y) {
            for k in kl(lo.z)..=kh(hi.z) {
                let c = Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * res;
                let d = mesh
                    .triangles
                    .iter()
                    .map(|t| point_triangle_distance(&c, &mesh.vertices[t[0]], &mesh.vertices[t[1]], &mesh.vertices[t[2]]))
                    .fold(f64::INFINITY, f64::min);
                if d <= trunc {
                    out.insert([i, j, k], d);
                }
            }
        }
    }
    out
}

// ---- random small instances ----

pub fn random_rotation(rng: &mut FixtureRng, max_angle: f64) -> AffineTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..max_angle);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    AffineTransform::from_rigid(&axis_angle(axis, angle), t)
}

/// A random labeled triangle soup with jittered vertices and 1–3 labels,
/// plus a voxel scene occupied wherever some vertex falls (up to ~500
/// voxels).
pub fn random_transfer_case(seed: u64) -> (VoxelScene, Vec<LabeledMesh>, Vec<AffineTransform>) {
    let mut rng = seeded(seed);
    let res = [0.02, 0.05][rng.random_range(0..2)];
    let meshes: Vec<LabeledMesh> = (0..rng.random_range(1..=3))
        .map(|m| {
            let n = rng.random_range(3..60);
            let labels: Vec<NodeId> = (1..=rng.random_range(1..=3)).collect();
            let vertices: Vec<Point> = (0..n)
                .map(|_| Vector3::new(rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.2)))
                .collect();
            let triangles = (0..n / 3).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
            let vl = (0..n).map(|_| *labels.choose(&mut rng).unwrap()).collect();
            LabeledMesh::new(vertices, triangles, vl, m as u32 + 1, m as u32 + 1).unwrap()
        })
        .collect();
    let transforms: Vec<AffineTransform> = meshes.iter().map(|_| random_rotation(&mut rng, 3.0)).collect();
    let mut scene = VoxelScene::new(res, Vector3::new(0.013, -0.007, 0.004), res).unwrap();
    for (m, t) in meshes.iter().zip(&transforms) {
        for v in &m.vertices {
            let key = scene.key_of(&t.apply_point(v));
            // leave some vertex voxels out of the scene
            if rng.random_bool(0.9) {
                scene.entries.insert(key, hierpart::VoxelEntry::unlabeled(0.0));
            }
        }
    }
    for _ in 0..5 {
        let key = [rng.random_range(-50..50), rng.random_range(-50..50), rng.random_range(-50..50)];
        scene.entries.entry(key).or_insert(hierpart::VoxelEntry::unlabeled(0.0));
    }
    (scene, meshes, transforms)
}

/// Random taxonomy plus a leaf-probability field over all its leaves.
pub fn random_bottom_up_case(seed: u64) -> (PartTaxonomy, ScoreField) {
    let mut rng = seeded(seed);
    let n = rng.random_range(3..30);
    let roots = rng.random_range(1..4);
    let tax = random_taxonomy(&mut rng, n, roots, 10);
    let leaves: Vec<NodeId> = tax.leaves().collect();
    let voxels = rng.random_range(1..40);
    let mut values = Vec::new();
    for _ in 0..voxels {
        let raw: Vec<f64> = leaves.iter().map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| v / s));
    }
    (tax, ScoreField::new(leaves, values).unwrap())
}

/// Random predicted and ground-truth label fields over ≤500 voxels.
pub fn random_label_case(seed: u64) -> (LabelField, LabelField, BTreeSet<NodeId>) {
    let mut rng = seeded(seed);
    let classes: BTreeSet<NodeId> = (1..=rng.random_range(1..8)).map(|c| c * 3).collect();
    let pool: Vec<NodeId> = std::iter::once(0).chain(classes.iter().copied()).collect();
    let n = rng.random_range(1..=500);
    let mut gt = LabelField::new();
    let mut pred = LabelField::new();
    for i in 0..n {
        let key = [i, i % 7, -i];
        gt.insert(key, *pool.choose(&mut rng).unwrap());
        pred.insert(key, *pool.choose(&mut rng).unwrap());
    }
    (pred, gt, classes)
}

/// Random prediction/ground-truth instance sets: ≤5 instances per class,
/// voxels drawn from a small pool so IoUs spread over [0, 1].
pub fn random_instance_case(seed: u64) -> (InstanceSet, InstanceSet) {
    let mut rng = seeded(seed);
    let classes = rng.random_range(1..=3);
    let make = |rng: &mut FixtureRng, pred: bool| {
        let mut used: BTreeSet<VoxelKey> = BTreeSet::new();
        let mut out = Vec::new();
        let mut id = 0;
        for c in 1..=classes {
            for _ in 0..rng.random_range(0..=5) {
                id += 1;
                let base = rng.random_range(0..12) * 4;
                let voxels: BTreeSet<VoxelKey> = (0..rng.random_range(1..10))
                    .map(|o| [base + o, c as i32, 0])
                    .filter(|k| !used.contains(k))
                    .collect();
                if voxels.is_empty() {
                    continue;
                }
                used.extend(voxels.iter().copied());
                let confidence = if pred { (rng.random_range(1..5) as f64) / 4.0 } else { 1.0 };
                out.push(Instance {
                    id,
                    class_id: c,
                    confidence,
                    voxels,
                });
            }
        }
        InstanceSet::new(out).unwrap()
    };
    let pred = make(&mut rng, true);
    let gt = make(&mut rng, false);
    (pred, gt)
}

/// Two blobs of 50 points, each inside a ball of radius `bandwidth / 4`,
/// centers `10 · bandwidth` apart. Returns embeddings and blob membership.
pub fn two_blobs(seed: u64, dim: usize, bandwidth: f64) -> (hierpart::losses::Embeddings, Vec<u32>) {
    let mut rng = seeded(seed);
    let axis = hierpart::synth::random_direction(&mut rng, dim);
    let origin: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..100 {
        let blob = (i % 2) as u32;
        let dir = hierpart::synth::random_direction(&mut rng, dim);
        let r = rng.random_range(0.0..bandwidth / 4.0);
        rows.push(
            (0..dim)
                .map(|c| origin[c] + axis[c] * 10.0 * bandwidth * blob as f64 + dir[c] * r)
                .collect::<Vec<f64>>(),
        );
        truth.push(blob);
    }
    (hierpart::losses::Embeddings::from_rows(dim, &rows).unwrap(), truth)
}

/// Clusters as a set of member-index sets, independent of cluster numbering.
pub fn partition(ids: &[u32]) -> BTreeSet<BTreeSet<usize>> {
    let mut groups: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, &c) in ids.iter().enumerate() {
        groups.entry(c).or_default().insert(i);
    }
    groups.into_values().collect()
}

/// Five predictions against five ground-truth instances of one class, with
/// IoUs spread across the threshold and a competing pair.
pub fn five_by_five() -> (InstanceSet, InstanceSet) {
    let strip = |x0: i32, n: i32| (x0..x0 + n).map(|x| [x, 0, 0]).collect::<BTreeSet<_>>();
    let gt = InstanceSet::new(
        (0..5)
            .map(|i| Instance { id: i + 1, class_id: 7, confidence: 1.0, voxels: strip(i as i32 * 20, 10) })
            .collect(),
    )
    .unwrap();
    let specs = [(0, 10, 0.9), (22, 6, 0.8), (40, 4, 0.7), (63, 10, 0.6), (100, 5, 0.3)];
    let pred = InstanceSet::new(
        specs
            .iter()
            .enumerate()
            .map(|(i, &(x0, n, c))| Instance { id: i as u32 + 1, class_id: 7, confidence: c, voxels: strip(x0, n) })
            .collect(),
    )
    .unwrap();
    (pred, gt)
}
