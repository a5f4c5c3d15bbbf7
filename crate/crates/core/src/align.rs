//! 9DoF and affine transforms plus multi-start point-to-point ICP.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Scale, then rotate, then translate: `p ↦ R·(S·p) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform9 {
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Transform9 {
    pub fn identity() -> Self {
        Self {
            scale: Vector3::repeat(1.0),
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates a raw `(w, x, y, z)` quaternion (norm 1 within 1e-9) and a
    /// strictly positive scale.
    pub fn new(scale: [f64; 3], rotation_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
        }
        let [w, x, y, z] = rotation_wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !q.coords.iter().all(|c| c.is_finite()) || (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "rotation quaternion must have unit norm, got {}",
                q.norm()
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        Ok(Self {
            scale: Vector3::from(scale),
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::from(translation),
        })
    }

    pub fn rotation_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        self.rotation * self.scale.component_mul(p) + self.translation
    }

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform {
            linear: self.rotation.to_rotation_matrix().into_inner()
                * Matrix3::from_diagonal(&self.scale),
            translation: self.translation,
        }
    }
}

/// General `p ↦ A·p + t`. Closed under composition, unlike [`Transform9`]
/// with anisotropic scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rigid(rotation: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            linear: rotation.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        self.linear * p + self.translation
    }

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    /// `outer ∘ inner`: applies `inner` first.
    pub fn compose(outer: &AffineTransform, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            linear: outer.linear * inner.linear,
            translation: outer.linear * inner.translation + outer.translation,
        }
    }

    pub fn then(&self, outer: &AffineTransform) -> AffineTransform {
        Self::compose(outer, self)
    }

    pub fn inverse(&self) -> Option<AffineTransform> {
        let inv = self.linear.try_inverse()?;
        Some(AffineTransform {
            linear: inv,
            translation: -(inv * self.translation),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        if self.points.is_empty() {
            return Point::zeros();
        }
        self.points.iter().sum::<Point>() / self.points.len() as f64
    }
}

/// Which residual summary picks the winner among ICP starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IcpScore {
    #[default]
    Rmse,
    /// Sum of nearest-neighbor Euclidean distances.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the RMSE improves by less than this many meters.
    pub convergence_eps: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_eps: 1e-7,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.convergence_eps > 0.0 && self.convergence_eps.is_finite()) {
            return Err(Error::invalid("convergence_eps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Rigid transform mapping `src` onto `dst`.
    pub transform: AffineTransform,
    pub rmse: f64,
    /// Sum of nearest-neighbor distances at the final transform.
    pub distance_sum: f64,
    /// RMSE before the first update and after every accepted update.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl IcpResult {
    pub fn score(&self, score: IcpScore) -> f64 {
        match score {
            IcpScore::Rmse => self.rmse,
            IcpScore::Sum => self.distance_sum,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BestAlignment {
    pub best: IcpResult,
    pub start_index: usize,
    pub candidates: Vec<IcpResult>,
}

/// The 20 initial rotations. Start `i` carries `+Z` onto dodecahedron vertex
/// `i` by the minimal rotation, then rolls about that vertex by `i mod 3`
/// thirds of a turn so the starts also differ in roll.
pub fn dodecahedron_rotations() -> Vec<UnitQuaternion<f64>> {
    let z = Vector3::z();
    dodecahedron_vertices()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let tilt = UnitQuaternion::rotation_between(&z, &v).unwrap_or_else(|| {
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
            });
            let roll = (i % 3) as f64 * 2.0 * std::f64::consts::PI / 3.0;
            axis_angle(v, roll) * tilt
        })
        .collect()
}

/// Unit vertex directions of the regular dodecahedron.
pub fn dodecahedron_vertices() -> Vec<Vector3<f64>> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let inv = 1.0 / phi;
    let mut out = Vec::with_capacity(20);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push(Vector3::new(sx, sy, sz));
            }
        }
    }
    for a in [-1.0, 1.0] {
        for b in [-1.0, 1.0] {
            out.push(Vector3::new(0.0, a * inv, b * phi));
            out.push(Vector3::new(a * inv, b * phi, 0.0));
            out.push(Vector3::new(a * phi, 0.0, b * inv));
        }
    }
    out.into_iter().map(|v| v.normalize()).collect()
}

/// Exact nearest-neighbor index over a fixed point set. Ties resolve to the
/// smallest point index.
pub struct KdTree<'a> {
    points: &'a [Point],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    idx: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut tree = Self {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = self.points;
        idx.sort_unstable_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let node = self.nodes.len();
        self.nodes.push(KdNode {
            idx: idx[mid],
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut rest[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// `(index, squared distance)` of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: Option<usize>, q: &Point, best: &mut (usize, f64)) {
        let Some(n) = node else { return };
        let n = &self.nodes[n];
        let p = &self.points[n.idx];
        let d = (p - q).norm_squared();
        if d < best.1 || (d == best.1 && n.idx < best.0) {
            *best = (n.idx, d);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

/// Least-squares rigid fit (Kabsch) of `src[i] ↦ dst[i]`.
pub fn best_fit_rigid(src: &[Point], dst: &[Point]) -> AffineTransform {
    debug_assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let cs = src.iter().sum::<Point>() / n;
    let cd = dst.iter().sum::<Point>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - cs) * (b - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    AffineTransform {
        linear: r,
        translation: cd - r * cs,
    }
}

struct Residuals {
    matches: Vec<usize>,
    rmse: f64,
    sum: f64,
}

fn residuals(tree: &KdTree<'_>, src: &[Point], t: &AffineTransform) -> Residuals {
    let mut matches = Vec::with_capacity(src.len());
    let mut sq = 0.0;
    let mut sum = 0.0;
    for p in src {
        let (j, d2) = tree.nearest(&t.apply_point(p)).expect("dst non-empty");
        matches.push(j);
        sq += d2;
        sum += d2.sqrt();
    }
    Residuals {
        matches,
        rmse: (sq / src.len() as f64).sqrt(),
        sum,
    }
}

/// Point-to-point ICP from an initial rotation. The initial translation
/// aligns the rotated source centroid with the destination centroid.
pub fn icp_point_to_point(
    src: &PointCloud,
    dst: &PointCloud,
    init: &UnitQuaternion<f64>,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    if src.is_empty() || dst.is_empty() {
        return Err(Error::invalid("ICP needs non-empty source and destination clouds"));
    }
    let tree = KdTree::new(&dst.points);
    let rot = init.to_rotation_matrix().into_inner();
    let mut current = AffineTransform {
        linear: rot,
        translation: dst.centroid() - rot * src.centroid(),
    };
    let mut res = residuals(&tree, &src.points, &current);
    let mut trace = vec![res.rmse];
    let mut iterations = 0;
    let mut matched = Vec::with_capacity(src.len());
    while iterations < params.max_iterations {
        iterations += 1;
        matched.clear();
        matched.extend(res.matches.iter().map(|&j| dst.points[j]));
        let next = best_fit_rigid(&src.points, &matched);
        let next_res = residuals(&tree, &src.points, &next);
        if next_res.rmse > res.rmse {
            // Only possible through rounding once converged.
            break;
        }
        let improvement = res.rmse - next_res.rmse;
        current = next;
        res = next_res;
        trace.push(res.rmse);
        if improvement < params.convergence_eps {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        rmse: res.rmse,
        distance_sum: res.sum,
        trace,
        iterations,
    })
}

/// Runs ICP from all 20 dodecahedron starts and keeps the lowest score; ties
/// go to the lowest start index.
pub fn best_alignment(
    src: &PointCloud,
    dst: &PointCloud,
    params: &IcpParams,
    score: IcpScore,
) -> Result<BestAlignment> {
    let candidates = dodecahedron_rotations()
        .par_iter()
        .map(|q| icp_point_to_point(src, dst, q, params))
        .collect::<Result<Vec<_>>>()?;
    let start_index = candidates
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.score(score).total_cmp(&b.score(score)).then(i.cmp(j)))
        .map(|(i, _)| i)
        .expect("20 candidates");
    Ok(BestAlignment {
        best: candidates[start_index].clone(),
        start_index,
        candidates,
    })
}

/// Geodesic angle in radians between two rotation matrices.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle)
}
