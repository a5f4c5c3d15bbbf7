//! Finite-difference validation of every loss kernel on seeded random
//! fixtures. Fixtures are resampled until every hinge, norm and absolute
//! value sits at least `KINK_CLEARANCE` away from its non-smooth point.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    discriminative_loss, grad_check_report, GradCheckReport, instance_total_loss, separation_loss, weighted_cross_entropy,
    DiscriminativeParams, EmbeddingField, Embeddings, LevelWeights, PartReduction, ScoreField, SepParams,
};
use crate::rng::{derive_seed, seeded, FixtureRng};
use crate::taxonomy::NodeId;

pub const FD_STEP: f64 = 1e-4;
/// Step for fixtures with L1 terms: a power of two, so that with dyadic
/// coordinates and power-of-two group sizes every piecewise-linear term is
/// differenced exactly and locally flat coordinates read exactly 0.
pub const DYADIC_STEP: f64 = 1.0 / 8192.0;
const GRID: f64 = 4096.0;
pub const TOLERANCE: f64 = 1e-5;
/// Smallest admissible non-zero gradient coordinate. Below it the O(h²)
/// truncation of central differences dominates the relative error.
pub const MIN_GRAD: f64 = 1e-5;
/// Central differences are exact for a kink further than a few steps away.
pub const KINK_CLEARANCE: f64 = 3.0 * FD_STEP;
pub const DIMS: [usize; 3] = [2, 8, 32];
pub const GROUPS: [usize; 3] = [1, 2, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    CrossEntropy,
    Discriminative,
    Separation,
    InstanceTotal,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::CrossEntropy,
        Kernel::Discriminative,
        Kernel::Separation,
        Kernel::InstanceTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::CrossEntropy => "cross-entropy",
            Kernel::Discriminative => "discriminative",
            Kernel::Separation => "separation",
            Kernel::InstanceTotal => "instance-total",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub kernel: Kernel,
    pub seed: u64,
    /// Embedding dimension, or classes per level for cross entropy.
    pub dim: usize,
    /// Instances (parts), or levels for cross entropy.
    pub groups: usize,
    pub max_rel_error: f64,
    pub worst: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Checks one kernel on one seeded fixture.
pub fn check(kernel: Kernel, seed: u64, dim: usize, groups: usize) -> Result<CheckResult> {
    if dim == 0 || groups == 0 {
        return Err(Error::invalid("dimension and group count must be >= 1"));
    }
    let stream = (kernel as u64) << 32 | (dim as u64) << 8 | groups as u64;
    let mut rng = seeded(derive_seed(seed, stream));
    let worst = match kernel {
        Kernel::CrossEntropy => check_cross_entropy(&mut rng, dim.max(2), groups)?,
        Kernel::Discriminative => check_discriminative(&mut rng, dim, groups)?,
        Kernel::Separation => check_separation(&mut rng, dim, groups)?,
        Kernel::InstanceTotal => check_total(&mut rng, dim, groups)?,
    };
    Ok(CheckResult {
        kernel,
        seed,
        dim,
        groups,
        max_rel_error: worst.max_rel_error,
        worst,
    })
}

/// Every kernel on every seed, dimension and group count, in that nesting
/// order. Cases run in parallel; each is deterministic.
pub fn run_suite(kernels: &[Kernel], seeds: &[u64], dims: &[usize], groups: &[usize]) -> Result<Vec<CheckResult>> {
    let mut cases = Vec::new();
    for &kernel in kernels {
        for &seed in seeds {
            for &d in dims {
                for &g in groups {
                    cases.push((kernel, seed, d, g));
                }
            }
        }
    }
    cases.par_iter().map(|&(k, s, d, g)| check(k, s, d, g)).collect()
}

fn check_cross_entropy(rng: &mut FixtureRng, classes: usize, levels: usize) -> Result<GradCheckReport> {
    let voxels = 6;
    let class_ids: Vec<Vec<NodeId>> = (0..levels)
        .map(|k| (0..classes as NodeId).map(|c| 100 * k as NodeId + c + 1).collect())
        .collect();
    let labels: Vec<Vec<NodeId>> = class_ids
        .iter()
        .map(|ids| {
            (0..voxels)
                .map(|_| if rng.random_bool(0.15) { 0 } else { ids[rng.random_range(0..classes)] })
                .collect()
        })
        .collect();
    let alpha: Vec<f64> = (0..levels).map(|_| rng.random_range(0.2..1.0)).collect();
    let weights = LevelWeights::new(alpha)?;
    let class_weights: Option<Vec<Vec<f64>>> = rng
        .random_bool(0.5)
        .then(|| (0..levels).map(|_| (0..classes).map(|_| rng.random_range(0.5..2.0)).collect()).collect());
    let x: Vec<f64> = (0..levels * voxels * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let stride = voxels * classes;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let fields = class_ids
            .iter()
            .enumerate()
            .map(|(k, ids)| ScoreField::new(ids.clone(), x[k * stride..(k + 1) * stride].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let out = weighted_cross_entropy(&fields, &labels, &weights, class_weights.as_deref())?;
        Ok((out.loss, out.grads.concat()))
    };
    grad_check_report(f, &x, FD_STEP)
}

/// Instances of `size` points, uniform in a box of half-width `spread`
/// around random centers.
fn random_groups(
    rng: &mut FixtureRng,
    dim: usize,
    groups: usize,
    spread: f64,
    size: impl Fn(&mut FixtureRng) -> usize,
) -> (Vec<f64>, Vec<u32>) {
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for g in 0..groups {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        for _ in 0..size(rng) {
            values.extend(center.iter().map(|c| c + rng.random_range(-spread..spread)));
            ids.push(g as u32 + 1);
        }
    }
    (values, ids)
}

fn rows_by_id(values: &[f64], ids: &[u32], dim: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let groups = ids.iter().copied().max().unwrap_or(0) as usize;
    let mut fg = vec![Vec::new(); groups];
    let mut bg = Vec::new();
    for (row, &id) in values.chunks(dim).zip(ids) {
        if id == 0 {
            bg.push(row.to_vec());
        } else {
            fg[id as usize - 1].push(row.to_vec());
        }
    }
    (fg, bg)
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Distance of the discriminative terms from their kinks.
fn embedding_clearance(fg: &[Vec<Vec<f64>>], p: &DiscriminativeParams) -> f64 {
    let mus: Vec<Vec<f64>> = fg.iter().map(|g| mean(g)).collect();
    let mut c = f64::INFINITY;
    for (g, mu) in fg.iter().zip(&mus) {
        c = c.min(mu.iter().map(|v| v * v).sum::<f64>().sqrt());
        for e in g {
            c = c.min((l2(mu, e) - p.delta_v).abs());
        }
    }
    for a in 0..mus.len() {
        for b in a + 1..mus.len() {
            c = c.min((2.0 * p.delta_d - l2(&mus[a], &mus[b])).abs());
        }
    }
    c
}

/// Distance of the separation term from its kinks.
fn separation_clearance(fg: &[Vec<Vec<f64>>], bg: &[Vec<f64>], delta: f64) -> f64 {
    let mut c = f64::INFINITY;
    for g in fg {
        let mu = mean(g);
        let mut radii: Vec<f64> = g.iter().map(|e| l1(e, &mu)).collect();
        for e in g.iter().chain(bg) {
            for (x, m) in e.iter().zip(&mu) {
                c = c.min((x - m).abs());
            }
        }
        radii.sort_by(|a, b| b.total_cmp(a));
        if radii.len() > 1 {
            c = c.min(radii[0] - radii[1]);
        }
        for b in bg {
            c = c.min((radii[0] - l1(b, &mu) + delta).abs());
        }
    }
    c
}

fn well_conditioned(grad: &[f64]) -> bool {
    grad.iter().all(|g| *g == 0.0 || g.abs() >= MIN_GRAD)
}

fn resample<T>(rng: &mut FixtureRng, mut make: impl FnMut(&mut FixtureRng) -> (T, f64)) -> Result<T> {
    for _ in 0..10_000 {
        let (v, clearance) = make(rng);
        if clearance >= KINK_CLEARANCE {
            return Ok(v);
        }
    }
    Err(Error::invalid("could not sample a fixture away from non-smooth points"))
}

fn check_discriminative(rng: &mut FixtureRng, dim: usize, groups: usize) -> Result<GradCheckReport> {
    let params = DiscriminativeParams::default();
    let (x, ids) = resample(rng, |rng| {
        let (x, ids) = random_groups(rng, dim, groups, 0.6, |r| r.random_range(3..=6));
        let mut c = embedding_clearance(&rows_by_id(&x, &ids, dim).0, &params);
        if c >= KINK_CLEARANCE {
            let field = EmbeddingField::new(Embeddings { dim, values: x.clone() }, ids.clone())
                .expect("rows match ids");
            let grad = discriminative_loss(&field, &params).map(|o| o.grad).unwrap_or_default();
            if !well_conditioned(&grad) {
                c = 0.0;
            }
        }
        ((x, ids), c)
    })?;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let field = EmbeddingField::new(Embeddings::new(dim, x.to_vec())?, ids.clone())?;
        let out = discriminative_loss(&field, &params)?;
        Ok((out.loss, out.grad))
    };
    grad_check_report(f, &x, FD_STEP)
}

/// Four points per part plus four background points, all on a dyadic grid.
fn with_background(rng: &mut FixtureRng, dim: usize, groups: usize) -> (Vec<f64>, Vec<u32>) {
    let (mut x, mut ids) = random_groups(rng, dim, groups, 1.0, |_| 4);
    let anchor: Vec<f64> = x[..dim].to_vec();
    for _ in 0..4 {
        x.extend(anchor.iter().map(|c| c + rng.random_range(-1.5..1.5)));
        ids.push(0);
    }
    x.iter_mut().for_each(|v| *v = (*v * GRID).round() / GRID);
    (x, ids)
}

fn check_separation(rng: &mut FixtureRng, dim: usize, groups: usize) -> Result<GradCheckReport> {
    let delta = SepParams::default().delta;
    let reduction = if rng.random_bool(0.5) { PartReduction::Mean } else { PartReduction::Sum };
    let (x, ids) = resample(rng, |rng| {
        let (x, ids) = with_background(rng, dim, groups);
        let (fg, bg) = rows_by_id(&x, &ids, dim);
        let c = separation_clearance(&fg, &bg, delta);
        ((x, ids), c)
    })?;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (fg, bg) = rows_by_id(x, &ids, dim);
        let parts = fg
            .iter()
            .map(|rows| Embeddings::from_rows(dim, rows))
            .collect::<Result<Vec<_>>>()?;
        let out = separation_loss(&parts, &Embeddings::from_rows(dim, &bg)?, delta, reduction)?;
        // scatter per-part gradients back to row order
        let mut grad = vec![0.0; x.len()];
        let mut cursor = vec![0usize; parts.len()];
        let mut bg_cursor = 0;
        for (j, &id) in ids.iter().enumerate() {
            let dst = &mut grad[j * dim..(j + 1) * dim];
            if id == 0 {
                dst.copy_from_slice(&out.bg_grad[bg_cursor * dim..(bg_cursor + 1) * dim]);
                bg_cursor += 1;
            } else {
                let p = id as usize - 1;
                dst.copy_from_slice(&out.fg_grads[p][cursor[p] * dim..(cursor[p] + 1) * dim]);
                cursor[p] += 1;
            }
        }
        Ok((out.loss, grad))
    };
    grad_check_report(f, &x, DYADIC_STEP)
}

fn check_total(rng: &mut FixtureRng, dim: usize, groups: usize) -> Result<GradCheckReport> {
    let margins = DiscriminativeParams::default();
    // larger separation weight so the term is visible against the others
    let sep = SepParams {
        alpha_sep: rng.random_range(1e-3..1.0),
        ..SepParams::default()
    };
    let (x, ids) = resample(rng, |rng| {
        let (x, ids) = with_background(rng, dim, groups);
        let (fg, bg) = rows_by_id(&x, &ids, dim);
        let mut c = embedding_clearance(&fg, &margins).min(separation_clearance(&fg, &bg, sep.delta));
        if c >= KINK_CLEARANCE {
            let field = EmbeddingField::new(Embeddings { dim, values: x.clone() }, ids.clone())
                .expect("rows match ids");
            let grad = instance_total_loss(&field, &margins, &sep).map(|o| o.grad).unwrap_or_default();
            if !well_conditioned(&grad) {
                c = 0.0;
            }
        }
        ((x, ids), c)
    })?;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let field = EmbeddingField::new(Embeddings::new(dim, x.to_vec())?, ids.clone())?;
        let out = instance_total_loss(&field, &margins, &sep)?;
        Ok((out.loss, out.grad))
    };
    grad_check_report(f, &x, DYADIC_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_names_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(Kernel::parse(k.name()), Some(k));
        }
        assert_eq!(Kernel::parse("nope"), None);
    }

    #[test]
    fn small_suite_passes() {
        let results = run_suite(&Kernel::ALL, &[0, 1], &DIMS, &GROUPS).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}
