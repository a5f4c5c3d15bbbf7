//! Sparse truncated-distance voxel grids, mesh voxelization and majority-vote
//! label transfer.
//!
//! Voxel `(i, j, k)` covers the half-open cube
//! `origin + [i, i+1) × [j, j+1) × [k, k+1) · resolution`; its center sits at
//! `origin + (i + ½, j + ½, k + ½) · resolution`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::align::{AffineTransform, Point};
use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, PartTaxonomy, UNLABELED};

pub type VoxelKey = [i32; 3];

/// Per-voxel labels at one level of the hierarchy. `0` means unlabeled.
pub type LabelField = BTreeMap<VoxelKey, NodeId>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelEntry {
    /// Unsigned distance to the nearest surface, clamped to the truncation.
    pub tsdf: f64,
    pub color: Option<[u8; 3]>,
    pub leaf_label: NodeId,
    pub instance_id: u32,
    pub object_id: u32,
}

impl VoxelEntry {
    pub fn unlabeled(tsdf: f64) -> Self {
        Self {
            tsdf,
            color: None,
            leaf_label: UNLABELED,
            instance_id: 0,
            object_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    pub resolution: f64,
    pub origin: Vector3<f64>,
    pub truncation: f64,
    pub entries: BTreeMap<VoxelKey, VoxelEntry>,
}

impl VoxelScene {
    pub fn new(resolution: f64, origin: Vector3<f64>, truncation: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::invalid(format!("resolution must be > 0, got {resolution}")));
        }
        if !(truncation >= resolution && truncation.is_finite()) {
            return Err(Error::invalid(format!(
                "truncation {truncation} must be >= resolution {resolution}"
            )));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("origin"));
        }
        Ok(Self {
            resolution,
            origin,
            truncation,
            entries: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key_of(&self, p: &Point) -> VoxelKey {
        key_of(p, &self.origin, self.resolution)
    }

    pub fn center(&self, key: &VoxelKey) -> Point {
        center_of(key, &self.origin, self.resolution)
    }

    /// Checks the entry invariants.
    pub fn validate(&self) -> Result<()> {
        for (key, e) in &self.entries {
            if !e.tsdf.is_finite() || e.tsdf.abs() > self.truncation {
                return Err(Error::invalid(format!(
                    "voxel {key:?}: |tsdf| {} exceeds truncation {}",
                    e.tsdf, self.truncation
                )));
            }
            if e.instance_id > 0 && e.leaf_label == UNLABELED {
                return Err(Error::invalid(format!(
                    "voxel {key:?}: instance {} without a label",
                    e.instance_id
                )));
            }
        }
        Ok(())
    }

    pub fn leaf_labels(&self) -> LabelField {
        self.entries.iter().map(|(k, e)| (*k, e.leaf_label)).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.entries.values().filter(|e| e.leaf_label != UNLABELED).count()
    }
}

fn key_of(p: &Point, origin: &Vector3<f64>, res: f64) -> VoxelKey {
    let q = (p - origin) / res;
    [q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32]
}

fn center_of(key: &VoxelKey, origin: &Vector3<f64>, res: f64) -> Point {
    origin
        + Vector3::new(
            key[0] as f64 + 0.5,
            key[1] as f64 + 0.5,
            key[2] as f64 + 0.5,
        ) * res
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    /// Leaf label per vertex.
    pub vertex_labels: Vec<NodeId>,
    pub instance_id: u32,
    pub object_id: u32,
}

impl LabeledMesh {
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        vertex_labels: Vec<NodeId>,
        instance_id: u32,
        object_id: u32,
    ) -> Result<Self> {
        if vertex_labels.len() != vertices.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} vertices",
                vertex_labels.len(),
                vertices.len()
            )));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::invalid(format!("triangle {t:?} index out of range")));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertices"));
        }
        Ok(Self {
            vertices,
            triangles,
            vertex_labels,
            instance_id,
            object_id,
        })
    }

    pub fn transformed(&self, t: &AffineTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| t.apply_point(v)).collect(),
            ..self.clone()
        }
    }

    /// Checks every vertex label against the taxonomy leaves.
    pub fn check_labels(&self, tax: &PartTaxonomy) -> Result<()> {
        match self.vertex_labels.iter().find(|l| !tax.is_leaf(**l)) {
            Some(&l) => Err(Error::UnknownLabel(l)),
            None => Ok(()),
        }
    }

    fn triangle(&self, t: &[usize; 3]) -> [Point; 3] {
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> Point {
    let ab = b - a;
    let ac = c - a;
    if ab.cross(&ac).norm_squared() <= 1e-30 * (ab.norm_squared() * ac.norm_squared()).max(1e-300)
    {
        // degenerate: nearest point on the three edges
        return [(a, b), (b, c), (c, a)]
            .into_iter()
            .map(|(s, e)| closest_point_on_segment(p, s, e))
            .min_by(|x, y| (x - p).norm_squared().total_cmp(&(y - p).norm_squared()))
            .expect("three edges");
    }
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn closest_point_on_segment(p: &Point, a: &Point, b: &Point) -> Point {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    a + ab * ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

/// Voxelizes the union of `meshes`: every voxel whose center lies within
/// `truncation` of some triangle is occupied, with `tsdf` the unsigned
/// distance. Labels are left unset.
pub fn voxelize_meshes(
    meshes: &[LabeledMesh],
    resolution: f64,
    truncation: f64,
    origin: Vector3<f64>,
) -> Result<VoxelScene> {
    let mut scene = VoxelScene::new(resolution, origin, truncation)?;
    let triangles: Vec<[Point; 3]> = meshes
        .iter()
        .flat_map(|m| m.triangles.iter().map(move |t| m.triangle(t)))
        .collect();
    if triangles.is_empty() {
        return Err(Error::invalid("cannot voxelize an empty mesh"));
    }
    let distances = triangles
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<VoxelKey, f64>, tri| {
            visit_triangle_shell(tri, &origin, resolution, truncation, |key, d| {
                acc.entry(key)
                    .and_modify(|best| *best = best.min(d))
                    .or_insert(d);
            });
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, d) in b {
                a.entry(k).and_modify(|best| *best = best.min(d)).or_insert(d);
            }
            a
        });
    scene.entries = distances
        .into_iter()
        .map(|(k, d)| (k, VoxelEntry::unlabeled(d.min(truncation))))
        .collect();
    Ok(scene)
}

/// Single-mesh convenience wrapper with the grid anchored at the origin.
pub fn voxelize_mesh(mesh: &LabeledMesh, resolution: f64, truncation: f64) -> Result<VoxelScene> {
    voxelize_meshes(std::slice::from_ref(mesh), resolution, truncation, Vector3::zeros())
}

fn visit_triangle_shell(
    tri: &[Point; 3],
    origin: &Vector3<f64>,
    res: f64,
    trunc: f64,
    mut visit: impl FnMut(VoxelKey, f64),
) {
    let lo = tri[0].inf(&tri[1]).inf(&tri[2]).add_scalar(-trunc);
    let hi = tri[0].sup(&tri[1]).sup(&tri[2]).add_scalar(trunc);
    let first = |v: f64, o: f64| ((v - o) / res - 0.5).ceil() as i32;
    let last = |v: f64, o: f64| ((v - o) / res - 0.5).floor() as i32;
    for i in first(lo.x, origin.x)..=last(hi.x, origin.x) {
        for j in first(lo.y, origin.y)..=last(hi.y, origin.y) {
            for k in first(lo.z, origin.z)..=last(hi.z, origin.z) {
                let key = [i, j, k];
                let c = center_of(&key, origin, res);
                let d = (closest_point_on_triangle(&c, &tri[0], &tri[1], &tri[2]) - c).norm();
                if d <= trunc {
                    visit(key, d);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferOptions {
    /// Adds stratified triangle-surface samples for occupied voxels that
    /// received no vertex.
    pub sample_faces: bool,
}

/// Votes cast into one voxel, keyed by `(label, instance, object)`.
type Ballot = BTreeMap<(NodeId, u32, u32), u32>;

fn cast(ballots: &mut HashMap<VoxelKey, Ballot>, key: VoxelKey, mesh: &LabeledMesh, label: NodeId) {
    *ballots
        .entry(key)
        .or_default()
        .entry((label, mesh.instance_id, mesh.object_id))
        .or_default() += 1;
}

/// Majority label (ties: smallest id), then the majority `(instance, object)`
/// among the votes for that label (ties: smallest pair).
pub fn resolve_ballot(ballot: &Ballot) -> Option<(NodeId, u32, u32)> {
    let mut per_label: BTreeMap<NodeId, u32> = BTreeMap::new();
    for (&(label, _, _), &n) in ballot {
        *per_label.entry(label).or_default() += n;
    }
    let label = argmax_smallest(per_label.iter().map(|(l, n)| (*l, *n)))?;
    let (instance, object) = argmax_smallest(
        ballot
            .iter()
            .filter(|((l, _, _), _)| *l == label)
            .map(|((_, i, o), n)| ((*i, *o), *n)),
    )?;
    Some((label, instance, object))
}

fn argmax_smallest<K: Ord + Copy>(items: impl Iterator<Item = (K, u32)>) -> Option<K> {
    items
        .max_by(|(ka, na), (kb, nb)| na.cmp(nb).then(kb.cmp(ka)))
        .map(|(k, _)| k)
}

/// Majority-vote label transfer from meshes (each under its own transform)
/// into the occupied voxels of `scene`. Existing labels are replaced; voxels
/// without votes become unlabeled.
pub fn transfer_labels(
    scene: &VoxelScene,
    sources: &[(&LabeledMesh, &AffineTransform)],
    opts: TransferOptions,
) -> VoxelScene {
    let mut ballots: HashMap<VoxelKey, Ballot> = HashMap::new();
    for (mesh, t) in sources {
        for (v, &label) in mesh.vertices.iter().zip(&mesh.vertex_labels) {
            let key = scene.key_of(&t.apply_point(v));
            if scene.entries.contains_key(&key) {
                cast(&mut ballots, key, mesh, label);
            }
        }
    }
    if opts.sample_faces {
        let mut extra: HashMap<VoxelKey, Ballot> = HashMap::new();
        for (mesh, t) in sources {
            let world = mesh.transformed(t);
            for tri in &world.triangles {
                for (p, label) in face_samples(&world, tri, scene.resolution) {
                    let key = scene.key_of(&p);
                    if scene.entries.contains_key(&key) && !ballots.contains_key(&key) {
                        cast(&mut extra, key, &world, label);
                    }
                }
            }
        }
        ballots.extend(extra);
    }

    let mut out = scene.clone();
    for (key, entry) in out.entries.iter_mut() {
        let winner = ballots.get(key).and_then(resolve_ballot);
        let (label, instance, object) = winner.unwrap_or((UNLABELED, 0, 0));
        entry.leaf_label = label;
        entry.instance_id = if label == UNLABELED { 0 } else { instance };
        entry.object_id = object;
    }
    out
}

/// Sub-triangle centroids of a regular `m × m` subdivision, with
/// `m² ≥ 4 · area / resolution²`. Each sample takes the label of the vertex
/// with the largest barycentric weight.
fn face_samples(mesh: &LabeledMesh, tri: &[usize; 3], res: f64) -> Vec<(Point, NodeId)> {
    let [a, b, c] = mesh.triangle(tri);
    let area = 0.5 * (b - a).cross(&(c - a)).norm();
    let wanted = (4.0 * area / (res * res)).ceil().max(1.0);
    let m = wanted.sqrt().ceil() as usize;
    let mf = m as f64;
    let labels = tri.map(|i| mesh.vertex_labels[i]);
    let mut out = Vec::with_capacity(m * m);
    let mut push = |u: f64, v: f64| {
        let w = [1.0 - u - v, u, v];
        let p = a * w[0] + b * w[1] + c * w[2];
        let best = (0..3)
            .max_by(|&x, &y| w[x].total_cmp(&w[y]).then(y.cmp(&x)))
            .expect("three weights");
        out.push((p, labels[best]));
    };
    for i in 0..m {
        for j in 0..m - i {
            let (fi, fj) = (i as f64, j as f64);
            push((fi + 1.0 / 3.0) / mf, (fj + 1.0 / 3.0) / mf);
            if i + j + 1 < m {
                push((fi + 2.0 / 3.0) / mf, (fj + 2.0 / 3.0) / mf);
            }
        }
    }
    out
}

/// Keeps only voxels that belong to an object.
pub fn remove_background(scene: &VoxelScene) -> VoxelScene {
    VoxelScene {
        entries: scene
            .entries
            .iter()
            .filter(|(_, e)| e.object_id > 0)
            .map(|(k, e)| (*k, *e))
            .collect(),
        ..scene.clone()
    }
}

/// Per-voxel labels at taxonomy level `level`; unlabeled voxels stay `0`.
pub fn project_scene_labels(
    scene: &VoxelScene,
    tax: &PartTaxonomy,
    level: usize,
) -> Result<LabelField> {
    project_labels(&scene.leaf_labels(), tax, level)
}

pub fn project_labels(labels: &LabelField, tax: &PartTaxonomy, level: usize) -> Result<LabelField> {
    labels
        .iter()
        .map(|(k, &l)| {
            if l == UNLABELED {
                return Ok((*k, UNLABELED));
            }
            if !tax.contains(l) {
                return Err(Error::UnknownLabel(l));
            }
            Ok((*k, tax.project_to_level(l, level)?))
        })
        .collect()
}

/// Relabels a scene after its taxonomy was pruned. Voxels that end up
/// unlabeled lose their instance id as well.
pub fn relabel_after_prune(
    scene: &VoxelScene,
    original: &PartTaxonomy,
    pruned: &PartTaxonomy,
    mode: crate::taxonomy::PruneRelabel,
) -> VoxelScene {
    let mut out = scene.clone();
    for e in out.entries.values_mut() {
        e.leaf_label = pruned.remap_label(original, e.leaf_label, mode);
        if e.leaf_label == UNLABELED {
            e.instance_id = 0;
        }
    }
    out
}
