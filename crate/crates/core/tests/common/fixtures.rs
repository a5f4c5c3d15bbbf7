#![allow(dead_code)]

use std::collections::BTreeMap;

use hierpart::align::{rotation_angle_between, AffineTransform, Transform9};
use hierpart::formats::{
    read_instances, read_meshes, read_points, read_prediction, read_scene, read_tensor, read_transform,
    write_instances, write_meshes, write_points, write_prediction, write_scene, write_tensor, write_transform,
    FieldKind, TensorFile, TransformFile,
};
use hierpart::instances::InstanceSet;
use hierpart::losses::{DiscriminativeParams, EmbeddingField, Embeddings};
use hierpart::metrics::{instance_metrics, semantic_metrics_at_level, AccuracyMode};
use hierpart::rng::seeded;
use hierpart::synth::{box_cloud, gen_synthetic, instance_embeddings, random_direction, random_rigid, SyntheticSpec};
use hierpart::taxonomy::PartTaxonomy;
use hierpart::voxelgrid::{project_scene_labels, voxelize_meshes};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;

/// Outcome of write → read → write on one fixture.
pub struct RoundTrip {
    pub format: &'static str,
    pub bytes: usize,
    pub error: Option<String>,
}

impl RoundTrip {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn check<T, E: std::fmt::Debug>(
    format: &'static str,
    first: String,
    read: impl Fn(&str) -> Result<T, E>,
    write: impl Fn(&T) -> String,
) -> RoundTrip {
    let error = match read(&first) {
        Err(e) => Some(format!("read failed: {e:?}")),
        Ok(v) => {
            let second = write(&v);
            if second == first {
                None
            } else {
                let line = first.lines().zip(second.lines()).position(|(a, b)| a != b);
                Some(format!("bytes differ (first differing line {line:?})"))
            }
        }
    };
    RoundTrip {
        format,
        bytes: first.len(),
        error,
    }
}

fn json_roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(format: &'static str, v: &T) -> RoundTrip {
    check(
        format,
        serde_json::to_string_pretty(v).unwrap(),
        |s| serde_json::from_str::<T>(s),
        |t| serde_json::to_string_pretty(t).unwrap(),
    )
}

/// Every file format on fixtures generated from `seed`.
pub fn format_roundtrips(seed: u64) -> Vec<RoundTrip> {
    let mut rng = seeded(seed ^ 0x5eed);
    let mut spec = SyntheticSpec::random(seed, 3, 0.05);
    spec.color = seed.is_multiple_of(2);
    let synth = gen_synthetic(&spec).expect("synthetic scene");
    let mut out = Vec::new();

    out.push(check(
        "taxonomy",
        synth.taxonomy.to_json(),
        PartTaxonomy::from_json,
        |t| t.to_json(),
    ));

    let cloud = box_cloud(seed, 64);
    let (q, t) = random_rigid(&mut rng, std::f64::consts::PI);
    out.push(check("points", write_points(&AffineTransform::from_rigid(&q, t).apply(&cloud)), read_points, write_points));

    let scale = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    let nine = Transform9::new(scale, [q.w, q.i, q.j, q.k], [t.x, t.y, t.z]).expect("unit quaternion");
    out.push(check(
        "transform (9-dof)",
        write_transform(&TransformFile::NineDof(nine.clone())),
        read_transform,
        write_transform,
    ));
    let affine = AffineTransform {
        linear: Matrix3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        translation: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
    };
    out.push(check(
        "transform (linear)",
        write_transform(&TransformFile::Affine(affine)),
        read_transform,
        write_transform,
    ));

    out.push(check("scene", write_scene(&synth.scene), read_scene, write_scene));
    let origin = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
    let raw = voxelize_meshes(&synth.world_meshes(), 0.05, 0.15, origin).expect("voxelize");
    out.push(check("scene (unlabeled)", write_scene(&raw), read_scene, write_scene));

    let keys: Vec<_> = synth.scene.entries.keys().copied().collect();
    let emb = instance_embeddings(&synth.scene, 5, 2.0, 0.3, seed);
    let emb_file = TensorFile::new(
        FieldKind::Embedding,
        0,
        5,
        keys.iter().enumerate().map(|(i, k)| (*k, emb.row(i).to_vec())),
    )
    .expect("embedding tensor");
    out.push(check("tensor (embedding)", write_tensor(&emb_file), read_tensor, write_tensor));
    let classes = synth.taxonomy.level_classes(2);
    let score_file = TensorFile::new(
        FieldKind::Score,
        2,
        classes.len(),
        keys.iter()
            .map(|k| (*k, (0..classes.len()).map(|_| rng.random_range(-10.0..10.0)).collect())),
    )
    .expect("score tensor");
    out.push(check("tensor (score)", write_tensor(&score_file), read_tensor, write_tensor));

    let labels = project_scene_labels(&synth.scene, &synth.taxonomy, 2).expect("projection");
    out.push(check(
        "prediction",
        write_prediction(2, &labels),
        read_prediction,
        |(level, l)| write_prediction(*level, l),
    ));

    let mut instances = InstanceSet::ground_truth(&synth.scene, &synth.taxonomy, 3).expect("instances");
    for inst in &mut instances.instances {
        inst.confidence = rng.random_range(0.0..1.0);
    }
    out.push(check("instances", write_instances(&instances), read_instances, write_instances));

    out.push(check("meshes", write_meshes(&synth.world_meshes()), read_meshes, |m| write_meshes(m)));

    let gt_inst = InstanceSet::ground_truth(&synth.scene, &synth.taxonomy, 3).expect("instances");
    let sem = semantic_metrics_at_level(&labels, &labels, &synth.taxonomy, 2, AccuracyMode::Recall).expect("report");
    out.push(json_roundtrip("report (semantic)", &sem));
    let inst = instance_metrics(&instances, &gt_inst, 0.5, |c| synth.taxonomy.node(c).map(|n| n.name.clone()).unwrap_or_default())
        .expect("report");
    out.push(json_roundtrip("report (instance)", &inst));
    out
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect()
}

fn groups_of(field: &EmbeddingField) -> BTreeMap<u32, Vec<Vec<f64>>> {
    let mut g: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (j, &id) in field.instance_ids.iter().enumerate() {
        g.entry(id).or_default().push(field.embeddings.row(j).to_vec());
    }
    g
}

/// Centroids at least `2·δ_d` apart, members as `μ ± u` pairs with
/// `‖u‖ ≤ 0.9·δ_v`, so every mean is its centroid and both hinges are idle.
pub fn margin_construction(seed: u64) -> (EmbeddingField, DiscriminativeParams, Vec<Vec<f64>>) {
    let mut rng = seeded(seed);
    let dim = rng.random_range(1..12);
    let k = rng.random_range(2..7);
    let delta_v = rng.random_range(0.1..1.0);
    let delta_d = 2.0 * delta_v * rng.random_range(1.01..2.0);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < k {
        let scale = 2.0 * delta_d * (k as f64).sqrt() * 2.0;
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        if centers.iter().all(|o| l2(o, &c) >= 2.0 * delta_d * 1.001) {
            centers.push(c);
        }
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        for _ in 0..rng.random_range(1..5) {
            let u: Vec<f64> = random_direction(&mut rng, dim).iter().map(|x| x * 0.9 * delta_v * rng.random::<f64>()).collect();
            rows.push(c.iter().zip(&u).map(|(a, b)| a + b).collect::<Vec<f64>>());
            rows.push(c.iter().zip(&u).map(|(a, b)| a - b).collect::<Vec<f64>>());
            ids.extend([g as u32 + 1; 2]);
        }
    }
    let field = EmbeddingField::new(Embeddings::from_rows(dim, &rows).unwrap(), ids).unwrap();
    let params = DiscriminativeParams { delta_v, delta_d, ..Default::default() };
    (field, params, centers)
}

/// Fraction of points whose nearest centroid is their own.
pub fn nearest_centroid_rate(field: &EmbeddingField) -> f64 {
    let g = groups_of(field);
    let mus: BTreeMap<u32, Vec<f64>> = g.iter().map(|(id, rows)| (*id, mean(rows))).collect();
    let mut ok = 0;
    for (j, &id) in field.instance_ids.iter().enumerate() {
        let x = field.embeddings.row(j).to_vec();
        let nearest = mus
            .iter()
            .min_by(|a, b| l2(&x, a.1).total_cmp(&l2(&x, b.1)))
            .map(|(id, _)| *id)
            .unwrap();
        ok += (nearest == id) as usize;
    }
    ok as f64 / field.len() as f64
}

/// Rotation error in radians and translation error in meters.
pub fn recovery_error(r: &AffineTransform, q: &UnitQuaternion<f64>, t: &Vector3<f64>) -> (f64, f64) {
    let rot = rotation_angle_between(&r.linear, q.to_rotation_matrix().matrix());
    (rot, (r.translation - t).norm())
}

