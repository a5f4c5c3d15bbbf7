//! Deterministic synthetic scenes: box-assembled chairs, tables and storage
//! furniture with a three-level part taxonomy, plus random taxonomies for
//! property tests. A seed fully determines every output.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::align::{axis_angle, AffineTransform, PointCloud, Transform9};
use crate::error::{Error, Result};
use crate::losses::Embeddings;
use crate::rng::{derive_seed, seeded, FixtureRng};
use crate::taxonomy::{NodeId, NodeRecord, PartTaxonomy};
use crate::voxelgrid::{
    remove_background, transfer_labels, voxelize_meshes, LabeledMesh, TransferOptions, VoxelScene,
};

/// `(id, name path, parent)` of the fixed synthetic taxonomy. The arm
/// classes never occur in generated scenes, which exercises undefined rows in
/// evaluation; `Table/tabletop` has a single child, which exercises
/// collapsing.
pub const TAXONOMY: &[(NodeId, &str, Option<NodeId>)] = &[
    (1, "Chair", None),
    (2, "Chair/chair_base", Some(1)),
    (3, "Chair/chair_base/leg", Some(2)),
    (4, "Chair/chair_base/stretcher", Some(2)),
    (5, "Chair/chair_seat", Some(1)),
    (6, "Chair/chair_seat/seat_surface", Some(5)),
    (7, "Chair/chair_seat/seat_frame", Some(5)),
    (8, "Chair/chair_back", Some(1)),
    (9, "Chair/chair_back/back_surface", Some(8)),
    (10, "Chair/chair_back/back_frame", Some(8)),
    (11, "Chair/chair_arm", Some(1)),
    (12, "Chair/chair_arm/arm_writing_table", Some(11)),
    (13, "Chair/chair_arm/arm_sofa_style", Some(11)),
    (20, "Table", None),
    (21, "Table/table_base", Some(20)),
    (22, "Table/table_base/leg", Some(21)),
    (23, "Table/table_base/apron", Some(21)),
    (24, "Table/tabletop", Some(20)),
    (25, "Table/tabletop/board", Some(24)),
    (30, "StorageFurniture", None),
    (31, "StorageFurniture/cabinet_frame", Some(30)),
    (32, "StorageFurniture/cabinet_frame/side_panel", Some(31)),
    (33, "StorageFurniture/cabinet_frame/top_panel", Some(31)),
    (34, "StorageFurniture/cabinet_door", Some(30)),
    (35, "StorageFurniture/cabinet_door/door_panel", Some(34)),
    (36, "StorageFurniture/cabinet_door/handle", Some(34)),
];

pub fn base_taxonomy() -> PartTaxonomy {
    PartTaxonomy::from_records(TAXONOMY.iter().map(|&(id, name, parent)| NodeRecord {
        id,
        name: name.to_string(),
        parent,
        occurrence: 0,
    }))
    .expect("built-in taxonomy is valid")
}

fn leaf_id(name: &str) -> NodeId {
    TAXONOMY
        .iter()
        .find(|(_, n, _)| *n == name)
        .map(|(id, _, _)| *id)
        .expect("known part name")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Chair,
    Table,
    Storage,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Storage];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecipe {
    pub category: Category,
    /// Overall width (x), depth (y) and height (z) in meters.
    pub size: [f64; 3],
    /// Thickness of legs, panels and boards in meters.
    pub thickness: f64,
    /// Tables only: add four aprons under the top.
    pub apron: bool,
    /// Object-to-world pose.
    pub pose: Transform9,
}

impl ObjectRecipe {
    pub fn new(category: Category, size: [f64; 3], thickness: f64) -> Self {
        Self {
            category,
            size,
            thickness,
            apron: false,
            pose: Transform9::identity(),
        }
    }

    pub fn chair() -> Self {
        Self::new(Category::Chair, [0.45, 0.45, 0.9], 0.05)
    }

    pub fn table() -> Self {
        Self::new(Category::Table, [1.2, 0.8, 0.75], 0.06)
    }

    pub fn storage() -> Self {
        Self::new(Category::Storage, [0.8, 0.45, 1.0], 0.04)
    }

    pub fn at(mut self, translation: [f64; 3], yaw: f64) -> Self {
        self.pose = Transform9 {
            scale: Vector3::repeat(1.0),
            rotation: axis_angle(Vector3::z(), yaw),
            translation: Vector3::from(translation),
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub objects: Vec<ObjectRecipe>,
    pub resolution: f64,
    pub truncation: f64,
    /// Assign a per-object RGB color to labeled voxels.
    pub color: bool,
}

impl SyntheticSpec {
    /// `count` objects with seeded categories, jittered sizes and poses on a
    /// 2 m floor grid.
    pub fn random(seed: u64, count: usize, resolution: f64) -> Self {
        let mut rng = seeded(derive_seed(seed, 1));
        let objects = (0..count)
            .map(|i| {
                let category = Category::ALL[rng.random_range(0..3)];
                let mut r = match category {
                    Category::Chair => ObjectRecipe::chair(),
                    Category::Table => ObjectRecipe::table(),
                    Category::Storage => ObjectRecipe::storage(),
                };
                for s in &mut r.size {
                    *s *= rng.random_range(0.85..1.15);
                }
                r.apron = category == Category::Table && rng.random_bool(0.5);
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let gx = (i % 4) as f64 * 2.0 + rng.random_range(-0.2..0.2);
                let gy = (i / 4) as f64 * 2.0 + rng.random_range(-0.2..0.2);
                r.at([gx, gy, 0.0], yaw)
            })
            .collect();
        Self {
            seed,
            objects,
            resolution,
            truncation: resolution,
            color: false,
        }
    }
}

/// An axis-aligned part box in object coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PartBox {
    pub leaf: NodeId,
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

/// Part boxes of one object in object coordinates (z up, floor at z = 0).
pub fn recipe_parts(r: &ObjectRecipe) -> Result<Vec<PartBox>> {
    let [w, d, h] = r.size;
    let t = r.thickness;
    if !(r.size.iter().all(|v| *v > 0.0 && v.is_finite()) && t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("degenerate recipe dimensions {:?} / {t}", r.size)));
    }
    if 2.0 * t >= w.min(d) || 3.0 * t >= h {
        return Err(Error::invalid(format!("thickness {t} too large for size {:?}", r.size)));
    }
    let mut parts = Vec::new();
    let mut part = |name: &str, min: [f64; 3], max: [f64; 3]| {
        parts.push(PartBox {
            leaf: leaf_id(name),
            min: Vector3::from(min),
            max: Vector3::from(max),
        })
    };
    let (hw, hd) = (w / 2.0, d / 2.0);
    let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    match r.category {
        Category::Chair => {
            let seat = 0.5 * h;
            for (sx, sy) in corners {
                let (cx, cy) = (sx * (hw - t / 2.0), sy * (hd - t / 2.0));
                part(
                    "Chair/chair_base/leg",
                    [cx - t / 2.0, cy - t / 2.0, 0.0],
                    [cx + t / 2.0, cy + t / 2.0, seat - t],
                );
            }
            for sx in [-1.0, 1.0] {
                let cx = sx * (hw - t / 2.0);
                part(
                    "Chair/chair_base/stretcher",
                    [cx - t / 4.0, -hd + t, 0.25 * seat],
                    [cx + t / 4.0, hd - t, 0.25 * seat + t / 2.0],
                );
            }
            part("Chair/chair_seat/seat_surface", [-hw, -hd, seat - t], [hw, hd, seat]);
            for sx in [-1.0, 1.0] {
                let cx = sx * (hw - t / 2.0);
                part(
                    "Chair/chair_back/back_frame",
                    [cx - t / 2.0, hd - t, seat],
                    [cx + t / 2.0, hd, h],
                );
            }
            part(
                "Chair/chair_back/back_surface",
                [-hw + t, hd - t, seat + 0.3 * (h - seat)],
                [hw - t, hd, h],
            );
        }
        Category::Table => {
            for (sx, sy) in corners {
                let (cx, cy) = (sx * (hw - 2.0 * t), sy * (hd - 2.0 * t));
                part(
                    "Table/table_base/leg",
                    [cx - t / 2.0, cy - t / 2.0, 0.0],
                    [cx + t / 2.0, cy + t / 2.0, h - t],
                );
            }
            if r.apron {
                let z0 = h - 3.0 * t;
                let (ax, ay) = (hw - 2.0 * t, hd - 2.0 * t);
                for sy in [-1.0, 1.0] {
                    part(
                        "Table/table_base/apron",
                        [-ax + t / 2.0, sy * ay - t / 4.0, z0],
                        [ax - t / 2.0, sy * ay + t / 4.0, h - t],
                    );
                }
                for sx in [-1.0, 1.0] {
                    part(
                        "Table/table_base/apron",
                        [sx * ax - t / 4.0, -ay + t / 2.0, z0],
                        [sx * ax + t / 4.0, ay - t / 2.0, h - t],
                    );
                }
            }
            part("Table/tabletop/board", [-hw, -hd, h - t], [hw, hd, h]);
        }
        Category::Storage => {
            for sx in [-1.0, 1.0] {
                let cx = sx * (hw - t / 2.0);
                part(
                    "StorageFurniture/cabinet_frame/side_panel",
                    [cx - t / 2.0, -hd, 0.0],
                    [cx + t / 2.0, hd, h - t],
                );
            }
            part("StorageFurniture/cabinet_frame/top_panel", [-hw, -hd, h - t], [hw, hd, h]);
            for sx in [-1.0, 1.0] {
                let (x0, x1) = if sx < 0.0 { (-hw + t, -0.005) } else { (0.005, hw - t) };
                part(
                    "StorageFurniture/cabinet_door/door_panel",
                    [x0, -hd - t / 2.0, t],
                    [x1, -hd, h - 2.0 * t],
                );
                let hx = sx * 0.08;
                part(
                    "StorageFurniture/cabinet_door/handle",
                    [hx - t / 4.0, -hd - 1.5 * t, 0.5 * h],
                    [hx + t / 4.0, -hd - t / 2.0, 0.5 * h + 3.0 * t],
                );
            }
        }
    }
    Ok(parts)
}

/// Surface mesh of a box with every face subdivided so that vertex spacing
/// is at most `spacing`.
pub fn box_mesh(b: &PartBox, spacing: f64, instance_id: u32, object_id: u32) -> LabeledMesh {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let ext = b.max - b.min;
    // (fixed axis, side, u axis, v axis)
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0.0, 1.0] {
            let nu = (ext[u] / spacing).ceil().max(1.0) as usize;
            let nv = (ext[v] / spacing).ceil().max(1.0) as usize;
            let base = vertices.len();
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = b.min;
                    p[axis] += side * ext[axis];
                    p[u] += ext[u] * i as f64 / nu as f64;
                    p[v] += ext[v] * j as f64 / nv as f64;
                    vertices.push(p);
                }
            }
            let at = |i: usize, j: usize| base + i * (nv + 1) + j;
            for i in 0..nu {
                for j in 0..nv {
                    triangles.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                    triangles.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
                }
            }
        }
    }
    let labels = vec![b.leaf; vertices.len()];
    LabeledMesh::new(vertices, triangles, labels, instance_id, object_id)
        .expect("box mesh indices are in range")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Taxonomy with occurrences counted on `scene`.
    pub taxonomy: PartTaxonomy,
    /// One mesh per part instance, in object coordinates.
    pub meshes: Vec<LabeledMesh>,
    /// Object-to-world transform of each mesh.
    pub poses: Vec<AffineTransform>,
    /// Part boxes per mesh, in object coordinates.
    pub boxes: Vec<PartBox>,
    /// Labeled ground truth with background removed.
    pub scene: VoxelScene,
}

impl SyntheticScene {
    pub fn world_meshes(&self) -> Vec<LabeledMesh> {
        self.meshes
            .iter()
            .zip(&self.poses)
            .map(|(m, p)| m.transformed(p))
            .collect()
    }
}

/// Builds meshes, voxelizes them, transfers labels by majority vote and
/// removes background.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if !(spec.resolution > 0.0) {
        return Err(Error::invalid("resolution must be > 0"));
    }
    if spec.objects.is_empty() {
        return Err(Error::invalid("synthetic scene needs at least one object"));
    }
    let spacing = spec.resolution / 3.0;
    let mut meshes = Vec::new();
    let mut poses = Vec::new();
    let mut boxes = Vec::new();
    let mut instance = 0u32;
    for (oi, recipe) in spec.objects.iter().enumerate() {
        let pose = recipe.pose.to_affine();
        for b in recipe_parts(recipe)? {
            instance += 1;
            meshes.push(box_mesh(&b, spacing, instance, oi as u32 + 1));
            poses.push(pose.clone());
            boxes.push(b);
        }
    }
    let world: Vec<LabeledMesh> = meshes.iter().zip(&poses).map(|(m, p)| m.transformed(p)).collect();
    let occupied = voxelize_meshes(&world, spec.resolution, spec.truncation, Vector3::zeros())?;
    let sources: Vec<(&LabeledMesh, &AffineTransform)> = meshes.iter().zip(&poses).collect();
    let labeled = transfer_labels(&occupied, &sources, TransferOptions::default());
    let mut scene = remove_background(&labeled);
    if spec.color {
        let mut rng = seeded(derive_seed(spec.seed, 2));
        let colors: Vec<[u8; 3]> = (0..spec.objects.len()).map(|_| rng.random()).collect();
        for e in scene.entries.values_mut() {
            e.color = Some(colors[e.object_id as usize - 1]);
        }
    }
    let taxonomy = base_taxonomy().count_occurrences(scene.entries.values().map(|e| e.leaf_label))?;
    Ok(SyntheticScene {
        taxonomy,
        meshes,
        poses,
        boxes,
        scene,
    })
}

/// Embeddings that cluster by instance: each instance gets a random center
/// on a sphere of radius `separation`, every voxel adds noise of norm at most
/// `spread`. Rows follow the scene's key order; background voxels get their
/// own center.
pub fn instance_embeddings(
    scene: &VoxelScene,
    dim: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Embeddings {
    let mut rng = seeded(derive_seed(seed, 3));
    let mut centers: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
    let mut values = Vec::with_capacity(scene.len() * dim);
    for e in scene.entries.values() {
        let c = centers
            .entry(e.instance_id)
            .or_insert_with(|| scaled(random_direction(&mut rng, dim), separation * (1.0 + e.instance_id as f64)))
            .clone();
        let noise = scaled(random_direction(&mut rng, dim), spread * rng.random::<f64>());
        values.extend(c.iter().zip(&noise).map(|(a, b)| a + b));
    }
    Embeddings { dim, values }
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

/// Uniformly distributed unit vector (normalized Gaussian sample).
pub fn random_direction(rng: &mut FixtureRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Noiseless anisotropic point cloud, uniform in a 1.2 × 0.6 × 0.3 m box
/// centered at the origin. The random sample is not symmetric, so the
/// generating motion is the only exact alignment.
pub fn box_cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = seeded(derive_seed(seed, 4));
    let points = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.15..0.15),
            )
        })
        .collect();
    PointCloud::new(points).expect("finite points")
}

/// Rigid motion with a uniform axis, angle uniform in `[0, max_angle]` and
/// translation uniform in `[-1, 1]³`.
pub fn random_rigid(rng: &mut FixtureRng, max_angle: f64) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let axis = random_direction(rng, 3);
    let angle = rng.random_range(0.0..=max_angle);
    let q = axis_angle(Vector3::new(axis[0], axis[1], axis[2]), angle);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    (q, t)
}

/// Random forest with `nodes` nodes and up to `roots` roots; every later node
/// attaches to a uniformly chosen earlier node. Occurrences are uniform in
/// `0..max_occurrence`.
pub fn random_taxonomy(rng: &mut FixtureRng, nodes: usize, roots: usize, max_occurrence: u64) -> PartTaxonomy {
    let roots = roots.clamp(1, nodes.max(1));
    let mut names: Vec<String> = Vec::with_capacity(nodes);
    let mut records = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let id = i as NodeId + 1;
        let parent = (i >= roots).then(|| rng.random_range(0..i));
        let name = match parent {
            None => format!("cat{id}"),
            Some(p) => format!("{}/p{id}", names[p]),
        };
        names.push(name.clone());
        records.push(NodeRecord {
            id,
            name,
            parent: parent.map(|p| p as NodeId + 1),
            occurrence: rng.random_range(0..max_occurrence.max(1)),
        });
    }
    PartTaxonomy::from_records(records).expect("generated forest is valid")
}
