//! Text file formats. Writers emit canonical bytes (sorted keys, shortest
//! round-trip floats), so write → read → write is byte-identical.
//!
//! | file | layout |
//! |------|--------|
//! | point cloud | `x y z` per line |
//! | transform | JSON `{"scale","rotation_wxyz","translation"}` or `{"linear","translation"}` |
//! | scene `.s2p` | header `S2P v1 res=… origin=x y z trunc=…`, then `i j k tsdf leaf instance object [r g b]` |
//! | tensor | `# field=<emb\|score> level=<k> dim=<D>`, then `i j k v1 … vD` (tabs) |
//! | prediction | `# level=<k>`, then `i j k label` (tabs) |
//! | instances | `# instances n=<N>`, `id class confidence` rows, `# members`, `id i j k` rows (tabs) |
//! | meshes | `o instance=<id> object=<id>`, `v x y z label`, `f a b c` (1-based, per object) |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde_json::{json, Value};

use crate::align::{AffineTransform, PointCloud, Transform9};
use crate::error::{Error, Result};
use crate::instances::{Instance, InstanceSet};
use crate::losses::{Embeddings, ScoreField};
use crate::taxonomy::NodeId;
use crate::voxelgrid::{LabelField, LabeledMesh, VoxelEntry, VoxelKey, VoxelScene};

fn num<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("bad {what} {tok:?}")))
}

fn finite(v: f64, line: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(line, format!("{what} must be finite")))
    }
}

fn end(mut toks: std::str::SplitWhitespace<'_>, line: usize) -> Result<()> {
    match toks.next() {
        Some(t) => Err(Error::parse(line, format!("unexpected trailing token {t:?}"))),
        None => Ok(()),
    }
}

/// Numbered, non-blank lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn key_from(toks: &mut std::str::SplitWhitespace<'_>, line: usize) -> Result<VoxelKey> {
    Ok([
        num(toks.next(), line, "i")?,
        num(toks.next(), line, "j")?,
        num(toks.next(), line, "k")?,
    ])
}

// ---------------------------------------------------------------- points

pub fn write_points(pc: &PointCloud) -> String {
    let mut out = String::new();
    for p in &pc.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn read_points(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (n, line) in content_lines(text) {
        if line.starts_with('#') {
            continue;
        }
        let mut t = line.split_whitespace();
        let x = finite(num(t.next(), n, "x")?, n, "x")?;
        let y = finite(num(t.next(), n, "y")?, n, "y")?;
        let z = finite(num(t.next(), n, "z")?, n, "z")?;
        end(t, n)?;
        pts.push(Vector3::new(x, y, z));
    }
    PointCloud::new(pts)
}

// ---------------------------------------------------------------- transforms

#[derive(Debug, Clone, PartialEq)]
pub enum TransformFile {
    NineDof(Transform9),
    Affine(AffineTransform),
}

impl TransformFile {
    pub fn to_affine(&self) -> AffineTransform {
        match self {
            TransformFile::NineDof(t) => t.to_affine(),
            TransformFile::Affine(a) => a.clone(),
        }
    }
}

pub fn write_transform(t: &TransformFile) -> String {
    let v = match t {
        TransformFile::NineDof(t) => json!({
            "scale": t.scale.as_slice(),
            "rotation_wxyz": t.rotation_wxyz(),
            "translation": t.translation.as_slice(),
        }),
        TransformFile::Affine(a) => {
            let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| a.linear[(r, c)])).collect();
            json!({ "linear": rows, "translation": a.translation.as_slice() })
        }
    };
    format!("{v}\n")
}

fn floats<const N: usize>(v: &Value, key: &str) -> Result<[f64; N]> {
    let arr = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid(format!("transform: missing array {key:?}")))?;
    if arr.len() != N {
        return Err(Error::invalid(format!("transform: {key:?} needs {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x
            .as_f64()
            .ok_or_else(|| Error::invalid(format!("transform: {key:?} holds a non-number")))?;
    }
    Ok(out)
}

pub fn read_transform(text: &str) -> Result<TransformFile> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::invalid(format!("transform json: {e}")))?;
    if v.get("linear").is_some() {
        let lin: [f64; 9] = floats(&v, "linear")?;
        let t: [f64; 3] = floats(&v, "translation")?;
        let a = AffineTransform {
            linear: Matrix3::from_row_slice(&lin),
            translation: Vector3::from(t),
        };
        if !a.is_finite() {
            return Err(Error::NonFinite("transform"));
        }
        Ok(TransformFile::Affine(a))
    } else {
        Ok(TransformFile::NineDof(Transform9::new(
            floats(&v, "scale")?,
            floats(&v, "rotation_wxyz")?,
            floats(&v, "translation")?,
        )?))
    }
}

// ---------------------------------------------------------------- scenes

pub fn write_scene(scene: &VoxelScene) -> String {
    let o = &scene.origin;
    let mut out = format!(
        "S2P v1 res={} origin={} {} {} trunc={}\n",
        scene.resolution, o.x, o.y, o.z, scene.truncation
    );
    for (k, e) in &scene.entries {
        let _ = write!(
            out,
            "{} {} {} {} {} {} {}",
            k[0], k[1], k[2], e.tsdf, e.leaf_label, e.instance_id, e.object_id
        );
        if let Some([r, g, b]) = e.color {
            let _ = write!(out, " {r} {g} {b}");
        }
        out.push('\n');
    }
    out
}

fn header_value<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    tok.and_then(|t| t.strip_prefix(key))
        .ok_or_else(|| Error::parse(1, format!("header: expected {key}")))
}

pub fn read_scene(text: &str) -> Result<VoxelScene> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| Error::parse(1, "empty scene file"))?;
    let mut t = header.split_whitespace();
    if t.next() != Some("S2P") || t.next() != Some("v1") {
        return Err(Error::parse(n, "header must start with `S2P v1`"));
    }
    let res: f64 = num(Some(header_value(t.next(), "res=")?), n, "resolution")?;
    let ox: f64 = num(Some(header_value(t.next(), "origin=")?), n, "origin x")?;
    let oy: f64 = num(t.next(), n, "origin y")?;
    let oz: f64 = num(t.next(), n, "origin z")?;
    let trunc: f64 = num(Some(header_value(t.next(), "trunc=")?), n, "truncation")?;
    end(t, n)?;
    let mut scene = VoxelScene::new(res, Vector3::new(ox, oy, oz), trunc)
        .map_err(|e| Error::parse(n, e.to_string()))?;
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let key = key_from(&mut t, n)?;
        let tsdf = finite(num(t.next(), n, "tsdf")?, n, "tsdf")?;
        let entry = VoxelEntry {
            tsdf,
            leaf_label: num(t.next(), n, "leaf label")?,
            instance_id: num(t.next(), n, "instance id")?,
            object_id: num(t.next(), n, "object id")?,
            color: match t.next() {
                None => None,
                Some(r) => Some([
                    num(Some(r), n, "red")?,
                    num(t.next(), n, "green")?,
                    num(t.next(), n, "blue")?,
                ]),
            },
        };
        end(t, n)?;
        if entry.tsdf.abs() > scene.truncation {
            return Err(Error::parse(n, "tsdf exceeds truncation"));
        }
        if entry.instance_id > 0 && entry.leaf_label == 0 {
            return Err(Error::parse(n, "instance id set on an unlabeled voxel"));
        }
        if scene.entries.insert(key, entry).is_some() {
            return Err(Error::parse(n, format!("duplicate voxel {key:?}")));
        }
    }
    Ok(scene)
}

// ---------------------------------------------------------------- tensors

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Embedding,
    Score,
}

impl FieldKind {
    fn tag(self) -> &'static str {
        match self {
            FieldKind::Embedding => "emb",
            FieldKind::Score => "score",
        }
    }
}

/// Per-voxel real vectors keyed like a scene, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: FieldKind,
    pub level: usize,
    pub dim: usize,
    pub keys: Vec<VoxelKey>,
    pub values: Vec<f64>,
}

impl TensorFile {
    /// Sorts rows by key; rejects duplicate keys and ragged rows.
    pub fn new(
        kind: FieldKind,
        level: usize,
        dim: usize,
        rows: impl IntoIterator<Item = (VoxelKey, Vec<f64>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("tensor dimension must be >= 1"));
        }
        let mut map = BTreeMap::new();
        for (k, row) in rows {
            if row.len() != dim {
                return Err(Error::invalid(format!("row {k:?} has {} values, expected {dim}", row.len())));
            }
            if map.insert(k, row).is_some() {
                return Err(Error::invalid(format!("duplicate voxel {k:?}")));
            }
        }
        let keys = map.keys().copied().collect();
        let values = map.into_values().flatten().collect();
        Ok(Self {
            kind,
            level,
            dim,
            keys,
            values,
        })
    }

    pub fn embeddings(&self) -> Embeddings {
        Embeddings {
            dim: self.dim,
            values: self.values.clone(),
        }
    }

    /// Columns are the given classes in ascending order.
    pub fn scores(&self, classes: &BTreeSet<NodeId>) -> Result<ScoreField> {
        if classes.len() != self.dim {
            return Err(Error::invalid(format!(
                "score file has {} columns but level {} has {} classes",
                self.dim,
                self.level,
                classes.len()
            )));
        }
        ScoreField::new(classes.iter().copied().collect(), self.values.clone())
    }
}

pub fn write_tensor(t: &TensorFile) -> String {
    let mut out = format!("# field={} level={} dim={}\n", t.kind.tag(), t.level, t.dim);
    for (k, row) in t.keys.iter().zip(t.values.chunks_exact(t.dim)) {
        let _ = write!(out, "{}\t{}\t{}", k[0], k[1], k[2]);
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn read_tensor(text: &str) -> Result<TensorFile> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| Error::parse(1, "empty tensor file"))?;
    let mut t = header.split_whitespace();
    if t.next() != Some("#") {
        return Err(Error::parse(n, "header must start with `#`"));
    }
    let kind = match header_value(t.next(), "field=")? {
        "emb" => FieldKind::Embedding,
        "score" => FieldKind::Score,
        other => return Err(Error::parse(n, format!("unknown field kind {other:?}"))),
    };
    let level = num(Some(header_value(t.next(), "level=")?), n, "level")?;
    let dim: usize = num(Some(header_value(t.next(), "dim=")?), n, "dim")?;
    end(t, n)?;
    let mut rows = Vec::new();
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let key = key_from(&mut t, n)?;
        let row = (0..dim)
            .map(|_| finite(num(t.next(), n, "value")?, n, "value"))
            .collect::<Result<Vec<_>>>()?;
        end(t, n)?;
        rows.push((key, row));
    }
    TensorFile::new(kind, level, dim, rows)
}

// ---------------------------------------------------------------- predictions

pub fn write_prediction(level: usize, labels: &LabelField) -> String {
    let mut out = format!("# level={level}\n");
    for (k, l) in labels {
        let _ = writeln!(out, "{}\t{}\t{}\t{l}", k[0], k[1], k[2]);
    }
    out
}

pub fn read_prediction(text: &str) -> Result<(usize, LabelField)> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| Error::parse(1, "empty prediction file"))?;
    let mut t = header.split_whitespace();
    if t.next() != Some("#") {
        return Err(Error::parse(n, "header must start with `#`"));
    }
    let level = num(Some(header_value(t.next(), "level=")?), n, "level")?;
    end(t, n)?;
    let mut field = LabelField::new();
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let key = key_from(&mut t, n)?;
        let label = num(t.next(), n, "label")?;
        end(t, n)?;
        if field.insert(key, label).is_some() {
            return Err(Error::parse(n, format!("duplicate voxel {key:?}")));
        }
    }
    Ok((level, field))
}

// ---------------------------------------------------------------- instances

pub fn write_instances(set: &InstanceSet) -> String {
    let mut sorted: Vec<&Instance> = set.instances.iter().collect();
    sorted.sort_by_key(|i| i.id);
    let mut out = format!("# instances n={}\n", sorted.len());
    for i in &sorted {
        let _ = writeln!(out, "{}\t{}\t{}", i.id, i.class_id, i.confidence);
    }
    out.push_str("# members\n");
    for i in &sorted {
        for k in &i.voxels {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", i.id, k[0], k[1], k[2]);
        }
    }
    out
}

pub fn read_instances(text: &str) -> Result<InstanceSet> {
    let mut lines = content_lines(text);
    let (n, header) = lines.next().ok_or_else(|| Error::parse(1, "empty instance file"))?;
    let mut t = header.split_whitespace();
    if t.next() != Some("#") || t.next() != Some("instances") {
        return Err(Error::parse(n, "header must be `# instances n=<N>`"));
    }
    let count: usize = num(Some(header_value(t.next(), "n=")?), n, "instance count")?;
    end(t, n)?;
    let mut instances: BTreeMap<u32, Instance> = BTreeMap::new();
    for _ in 0..count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::parse(n, "instance header block is truncated"))?;
        let mut t = line.split_whitespace();
        let id = num(t.next(), n, "instance id")?;
        let inst = Instance {
            id,
            class_id: num(t.next(), n, "class id")?,
            confidence: finite(num(t.next(), n, "confidence")?, n, "confidence")?,
            voxels: BTreeSet::new(),
        };
        end(t, n)?;
        if instances.insert(id, inst).is_some() {
            return Err(Error::parse(n, format!("duplicate instance {id}")));
        }
    }
    match lines.next() {
        Some((_, "# members")) => {}
        Some((n, _)) => return Err(Error::parse(n, "expected `# members`")),
        None => return Err(Error::parse(n, "missing `# members` section")),
    }
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let id: u32 = num(t.next(), n, "instance id")?;
        let key = key_from(&mut t, n)?;
        end(t, n)?;
        let inst = instances
            .get_mut(&id)
            .ok_or_else(|| Error::parse(n, format!("member of undeclared instance {id}")))?;
        if !inst.voxels.insert(key) {
            return Err(Error::parse(n, format!("duplicate member {key:?}")));
        }
    }
    InstanceSet::new(instances.into_values().collect())
}

// ---------------------------------------------------------------- meshes

pub fn write_meshes(meshes: &[LabeledMesh]) -> String {
    let mut out = String::new();
    for m in meshes {
        let _ = writeln!(out, "o instance={} object={}", m.instance_id, m.object_id);
        for (v, l) in m.vertices.iter().zip(&m.vertex_labels) {
            let _ = writeln!(out, "v {} {} {} {l}", v.x, v.y, v.z);
        }
        for f in &m.triangles {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    out
}

pub fn read_meshes(text: &str) -> Result<Vec<LabeledMesh>> {
    struct Partial {
        line: usize,
        instance: u32,
        object: u32,
        vertices: Vec<Vector3<f64>>,
        labels: Vec<NodeId>,
        faces: Vec<[usize; 3]>,
    }
    let mut parts: Vec<Partial> = Vec::new();
    for (n, line) in content_lines(text) {
        if line.starts_with('#') {
            continue;
        }
        let mut t = line.split_whitespace();
        match t.next() {
            Some("o") => {
                let instance = num(Some(header_value(t.next(), "instance=")?), n, "instance")?;
                let object = num(Some(header_value(t.next(), "object=")?), n, "object")?;
                end(t, n)?;
                parts.push(Partial {
                    line: n,
                    instance,
                    object,
                    vertices: Vec::new(),
                    labels: Vec::new(),
                    faces: Vec::new(),
                });
            }
            Some(tag @ ("v" | "f")) => {
                let cur = parts
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "geometry before the first `o` line"))?;
                if tag == "v" {
                    let x = finite(num(t.next(), n, "x")?, n, "x")?;
                    let y = finite(num(t.next(), n, "y")?, n, "y")?;
                    let z = finite(num(t.next(), n, "z")?, n, "z")?;
                    cur.vertices.push(Vector3::new(x, y, z));
                    cur.labels.push(num(t.next(), n, "vertex label")?);
                } else {
                    let mut f = [0usize; 3];
                    for slot in &mut f {
                        let idx: usize = num(t.next(), n, "face index")?;
                        if idx == 0 {
                            return Err(Error::parse(n, "face indices are 1-based"));
                        }
                        *slot = idx - 1;
                    }
                    cur.faces.push(f);
                }
                end(t, n)?;
            }
            Some(other) => return Err(Error::parse(n, format!("unknown record {other:?}"))),
            None => {}
        }
    }
    parts
        .into_iter()
        .map(|p| {
            LabeledMesh::new(p.vertices, p.faces, p.labels, p.instance, p.object)
                .map_err(|e| Error::parse(p.line, e.to_string()))
        })
        .collect()
}
