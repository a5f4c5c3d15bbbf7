//! Training objectives as pure numeric kernels with analytic gradients:
//! the level-weighted cross entropy, the pull/push/reg discriminative
//! embedding loss, the foreground/background separation term and their
//! combination for instance segmentation.
//!
//! Hinge and norm kinks take a zero subgradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, UNLABELED};

/// Per-voxel scores (logits or probabilities) over one level's classes.
/// Row `j` holds voxel `j`; column `c` belongs to `classes[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    /// Strictly ascending class ids.
    pub classes: Vec<NodeId>,
    pub values: Vec<f64>,
}

impl ScoreField {
    pub fn new(classes: Vec<NodeId>, values: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("score field needs at least one class"));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("score classes must be strictly ascending"));
        }
        if !values.len().is_multiple_of(classes.len()) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of {} classes",
                values.len(),
                classes.len()
            )));
        }
        Ok(Self { classes, values })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.values.len() / self.classes.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let c = self.classes.len();
        &self.values[j * c..(j + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.classes.len())
    }

    pub fn column_of(&self, class: NodeId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

/// Row-major `n × dim` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Embeddings {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of dimension {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::invalid(format!("row of length {} in dimension {dim}", r.len())));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

/// Embeddings with a parallel instance id per voxel (`0` = background).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    pub embeddings: Embeddings,
    pub instance_ids: Vec<u32>,
}

impl EmbeddingField {
    pub fn new(embeddings: Embeddings, instance_ids: Vec<u32>) -> Result<Self> {
        if embeddings.len() != instance_ids.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} instance ids",
                embeddings.len(),
                instance_ids.len()
            )));
        }
        Ok(Self {
            embeddings,
            instance_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    /// Row indices per instance id, ascending id. Background rows are skipped.
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut g: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (j, &id) in self.instance_ids.iter().enumerate() {
            if id != 0 {
                g.entry(id).or_default().push(j);
            }
        }
        g.into_values().collect()
    }

    fn background(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.instance_ids[j] == 0).collect()
    }
}

/// Named `(α1, α2, α3)` objective configurations.
pub const LEVEL_WEIGHT_PRESETS: [(&str, [f64; 3]); 6] = [
    ("base-coarse", [1.0, 0.0, 0.0]),
    ("base-middle", [0.0, 1.0, 0.0]),
    ("base-fine", [0.0, 0.0, 1.0]),
    ("mtt-12", [0.5, 0.5, 0.0]),
    ("mtt-123-coarse", [0.7, 0.2, 0.1]),
    ("mtt-123-fine", [0.1, 0.2, 0.7]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights(Vec<f64>);

impl LevelWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid(format!("level weights must be finite and >= 0: {alpha:?}")));
        }
        if !alpha.iter().any(|a| *a > 0.0) {
            return Err(Error::invalid("at least one level weight must be positive"));
        }
        Ok(Self(alpha))
    }

    pub fn preset(name: &str) -> Option<Self> {
        LEVEL_WEIGHT_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| Self(a.to_vec()))
    }

    /// Accepts a preset name or comma separated weights.
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(p) = Self::preset(text.trim()) {
            return Ok(p);
        }
        let alpha = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad level weight {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(alpha)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CrossEntropyOutput {
    pub loss: f64,
    /// Unweighted (by α) loss per level.
    pub per_level: Vec<f64>,
    /// `∂loss/∂logits`, one buffer per level shaped like its score field.
    pub grads: Vec<Vec<f64>>,
}

/// `Σ_k α_k · (1/N_k) Σ_j w_{y_j} · (−log softmax(s_j)[y_j])` over labeled
/// voxels. Label `0` is ignored; a level without labeled voxels contributes 0.
pub fn weighted_cross_entropy(
    levels: &[ScoreField],
    labels: &[Vec<NodeId>],
    weights: &LevelWeights,
    class_weights: Option<&[Vec<f64>]>,
) -> Result<CrossEntropyOutput> {
    if levels.len() != weights.len() || labels.len() != levels.len() {
        return Err(Error::invalid(format!(
            "{} score levels, {} label levels, {} weights",
            levels.len(),
            labels.len(),
            weights.len()
        )));
    }
    if let Some(cw) = class_weights {
        if cw.len() != levels.len()
            || cw.iter().zip(levels).any(|(w, s)| w.len() != s.num_classes())
        {
            return Err(Error::invalid("class weights must match every level's classes"));
        }
    }
    let mut loss = 0.0;
    let mut per_level = Vec::with_capacity(levels.len());
    let mut grads = Vec::with_capacity(levels.len());
    for (k, (scores, y)) in levels.iter().zip(labels).enumerate() {
        if y.len() != scores.num_voxels() {
            return Err(Error::invalid(format!(
                "level {}: {} labels for {} voxels",
                k + 1,
                y.len(),
                scores.num_voxels()
            )));
        }
        let alpha = weights.0[k];
        let cw = class_weights.map(|cw| cw[k].as_slice());
        let mut cols = Vec::with_capacity(y.len());
        for &label in y {
            if label == UNLABELED {
                cols.push(None);
            } else {
                let c = scores.column_of(label).ok_or(Error::UnknownLabel(label))?;
                cols.push(Some(c));
            }
        }
        let n_labeled = cols.iter().filter(|c| c.is_some()).count();
        let mut grad = vec![0.0; scores.values.len()];
        let mut level_loss = 0.0;
        if n_labeled > 0 {
            let inv_n = 1.0 / n_labeled as f64;
            let nc = scores.num_classes();
            for (j, col) in cols.iter().enumerate() {
                let Some(c) = *col else { continue };
                let row = scores.row(j);
                let lse = log_sum_exp(row);
                let w = cw.map_or(1.0, |cw| cw[c]);
                level_loss += w * (lse - row[c]) * inv_n;
                let g = &mut grad[j * nc..(j + 1) * nc];
                for (gi, &s) in g.iter_mut().zip(row) {
                    *gi = alpha * w * inv_n * (s - lse).exp();
                }
                g[c] -= alpha * w * inv_n;
            }
        }
        if !level_loss.is_finite() {
            return Err(Error::NonFinite("cross entropy"));
        }
        loss += alpha * level_loss;
        per_level.push(level_loss);
        grads.push(grad);
    }
    Ok(CrossEntropyOutput {
        loss,
        per_level,
        grads,
    })
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Inverse class frequency, clamped to `[0.1, 10]` and normalized to mean 1.
/// Classes absent from `labels` get the upper clamp.
pub fn inverse_frequency_weights(classes: &[NodeId], labels: &[NodeId]) -> Vec<f64> {
    let mut counts = vec![0usize; classes.len()];
    for l in labels {
        if let Ok(c) = classes.binary_search(l) {
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let nc = classes.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                10.0
            } else {
                (total as f64 / (nc * n as f64)).clamp(0.1, 10.0)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / nc;
    raw.into_iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminativeParams {
    /// Pull margin: no penalty within this distance of the centroid.
    pub delta_v: f64,
    /// Push margin: centroids closer than `2·delta_d` repel.
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DiscriminativeParams {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 1.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
        }
    }
}

impl DiscriminativeParams {
    fn validate(&self) -> Result<()> {
        let all = [self.delta_v, self.delta_d, self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("discriminative parameters must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminativeOutput {
    pub loss: f64,
    pub pull: f64,
    pub push: f64,
    pub reg: f64,
    /// `∂loss/∂e_j`, row-major like the input.
    pub grad: Vec<f64>,
}

/// Pull/push/reg terms over the given instance groups. Writes
/// `∂(wp·pull + wq·push + wr·reg)/∂e` into `grad`.
fn embedding_terms(
    emb: &Embeddings,
    groups: &[Vec<usize>],
    delta_v: f64,
    delta_d: f64,
    [wp, wq, wr]: [f64; 3],
    grad: &mut [f64],
) -> (f64, f64, f64) {
    let d = emb.dim;
    let k = groups.len();
    let kf = k as f64;
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut m = vec![0.0; d];
            for &j in g {
                for (mi, &e) in m.iter_mut().zip(emb.row(j)) {
                    *mi += e;
                }
            }
            let inv = 1.0 / g.len() as f64;
            m.iter_mut().for_each(|v| *v *= inv);
            m
        })
        .collect();
    // ∂/∂μ_k, pushed back to members at the end
    let mut dmu = vec![vec![0.0; d]; k];

    let mut pull = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        let inv_n = 1.0 / g.len() as f64;
        let mu = &means[gi];
        for &j in g {
            let e = emb.row(j);
            let dist = euclid(mu, e);
            let h = dist - delta_v;
            if h <= 0.0 {
                continue;
            }
            pull += h * h * inv_n / kf;
            // ∂/∂e_j of h² is 2h (e_j − μ)/‖e_j − μ‖; μ receives the negation
            let scale = wp * 2.0 * h * inv_n / kf / dist;
            let row = &mut grad[j * d..(j + 1) * d];
            for c in 0..d {
                let gcomp = scale * (e[c] - mu[c]);
                row[c] += gcomp;
                dmu[gi][c] -= gcomp;
            }
        }
    }

    let mut push = 0.0;
    if k > 1 {
        let norm = 1.0 / (kf * (kf - 1.0));
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let dist = euclid(&means[a], &means[b]);
                let h = 2.0 * delta_d - dist;
                if h <= 0.0 || dist == 0.0 {
                    push += h.max(0.0).powi(2) * norm;
                    continue;
                }
                push += h * h * norm;
                // ∂h²/∂μ_a = −2h (μ_a − μ_b)/‖·‖, and the opposite for μ_b
                let scale = wq * norm * 2.0 * h / dist;
                for c in 0..d {
                    let gcomp = scale * (means[a][c] - means[b][c]);
                    dmu[a][c] -= gcomp;
                    dmu[b][c] += gcomp;
                }
            }
        }
    }

    let mut reg = 0.0;
    for (gi, mu) in means.iter().enumerate() {
        let n = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        reg += n / kf;
        if n > 0.0 {
            for c in 0..d {
                dmu[gi][c] += wr * mu[c] / (n * kf);
            }
        }
    }

    for (gi, g) in groups.iter().enumerate() {
        let inv_n = 1.0 / g.len() as f64;
        for &j in g {
            for c in 0..d {
                grad[j * d + c] += dmu[gi][c] * inv_n;
            }
        }
    }
    (pull, push, reg)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Discriminative embedding loss `α·pull + β·push + γ·reg`. Every voxel must
/// carry an instance id > 0; with a single instance the push term is 0.
pub fn discriminative_loss(
    field: &EmbeddingField,
    params: &DiscriminativeParams,
) -> Result<DiscriminativeOutput> {
    params.validate()?;
    if field.is_empty() {
        return Err(Error::invalid("discriminative loss needs at least one embedding"));
    }
    if field.instance_ids.contains(&0) {
        return Err(Error::invalid("discriminative loss expects instance ids > 0 only"));
    }
    let groups = field.groups();
    let mut grad = vec![0.0; field.embeddings.values.len()];
    let (pull, push, reg) = embedding_terms(
        &field.embeddings,
        &groups,
        params.delta_v,
        params.delta_d,
        [params.alpha, params.beta, params.gamma],
        &mut grad,
    );
    let loss = params.alpha * pull + params.beta * push + params.gamma * reg;
    if !loss.is_finite() {
        return Err(Error::NonFinite("discriminative loss"));
    }
    Ok(DiscriminativeOutput {
        loss,
        pull,
        push,
        reg,
        grad,
    })
}

/// How the separation term combines its per-part contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SepParams {
    pub alpha_intra: f64,
    pub alpha_inter: f64,
    pub alpha_reg: f64,
    pub alpha_sep: f64,
    /// L1 margin of the separation hinge.
    pub delta: f64,
    pub part_reduction: PartReduction,
}

impl Default for SepParams {
    fn default() -> Self {
        Self {
            alpha_intra: 1.0,
            alpha_inter: 1.0,
            alpha_reg: 1e-3,
            alpha_sep: 1e-3,
            delta: 0.5,
            part_reduction: PartReduction::Mean,
        }
    }
}

/// Sign with `sign(0) = 0`.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Separation term over index groups of one embedding matrix. Adds
/// `weight · ∂L_sep/∂e` into `grad` and returns `L_sep`.
fn separation_terms(
    emb: &Embeddings,
    parts: &[Vec<usize>],
    bg: &[usize],
    delta: f64,
    reduction: PartReduction,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    if bg.is_empty() || parts.is_empty() {
        return 0.0;
    }
    let d = emb.dim;
    let outer = match reduction {
        PartReduction::Mean => 1.0 / parts.len() as f64,
        PartReduction::Sum => 1.0,
    };
    let inv_m = 1.0 / bg.len() as f64;
    let mut total = 0.0;
    for part in parts {
        let inv_n = 1.0 / part.len() as f64;
        let mut mu = vec![0.0; d];
        for &i in part {
            for (m, &x) in mu.iter_mut().zip(emb.row(i)) {
                *m += x * inv_n;
            }
        }
        // foreground L1 radius, first maximizer wins
        let (far, radius) = part
            .iter()
            .map(|&i| (i, l1(emb.row(i), &mu)))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
        let far_sign: Vec<f64> = emb.row(far).iter().zip(&mu).map(|(x, m)| sign0(x - m)).collect();
        let mut contribution = 0.0;
        let mut dmu = vec![0.0; d];
        let mut dfar = 0.0;
        let scale = weight * outer * inv_m;
        for &j in bg {
            let x = emb.row(j);
            let h = radius - l1(x, &mu) + delta;
            if h <= 0.0 {
                continue;
            }
            contribution += h * inv_m;
            dfar += scale;
            for c in 0..d {
                let s = sign0(x[c] - mu[c]);
                grad[j * d + c] -= scale * s;
                dmu[c] += scale * (s - far_sign[c]);
            }
        }
        for c in 0..d {
            grad[far * d + c] += dfar * far_sign[c];
        }
        for &i in part {
            for c in 0..d {
                grad[i * d + c] += dmu[c] * inv_n;
            }
        }
        total += contribution;
    }
    // one final scaling keeps exactly cancelling contributions exact
    total * outer
}

#[derive(Debug, Clone)]
pub struct SeparationOutput {
    pub loss: f64,
    /// Gradient per foreground part, shaped like each part.
    pub fg_grads: Vec<Vec<f64>>,
    pub bg_grad: Vec<f64>,
}

/// For every part with mean `μ` and foreground L1 radius
/// `R = max_i |x_i − μ|₁`, the mean over background voxels of
/// `[R − |x_bg − μ|₁ + δ]₊`; parts are combined by `reduction`.
pub fn separation_loss(
    fg_parts: &[Embeddings],
    bg: &Embeddings,
    delta: f64,
    reduction: PartReduction,
) -> Result<SeparationOutput> {
    let dim = bg.dim;
    if fg_parts.iter().any(|p| p.dim != dim) {
        return Err(Error::invalid("all embeddings must share one dimension"));
    }
    if fg_parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("foreground parts must be non-empty"));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::invalid(format!("separation margin must be >= 0, got {delta}")));
    }
    let mut values = Vec::new();
    let mut parts = Vec::with_capacity(fg_parts.len());
    for p in fg_parts {
        let start = values.len() / dim;
        values.extend_from_slice(&p.values);
        parts.push((start..start + p.len()).collect::<Vec<_>>());
    }
    let bg_start = values.len() / dim;
    values.extend_from_slice(&bg.values);
    let bg_idx: Vec<usize> = (bg_start..bg_start + bg.len()).collect();
    let all = Embeddings { dim, values };
    let mut grad = vec![0.0; all.values.len()];
    let loss = separation_terms(&all, &parts, &bg_idx, delta, reduction, 1.0, &mut grad);
    if !loss.is_finite() {
        return Err(Error::NonFinite("separation loss"));
    }
    let fg_grads = parts
        .iter()
        .map(|p| match (p.first(), p.last()) {
            (Some(&a), Some(&b)) => grad[a * dim..(b + 1) * dim].to_vec(),
            _ => Vec::new(),
        })
        .collect();
    Ok(SeparationOutput {
        loss,
        fg_grads,
        bg_grad: grad[bg_start * dim..].to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct InstanceLossOutput {
    pub loss: f64,
    pub intra: f64,
    pub inter: f64,
    pub reg: f64,
    pub sep: f64,
    pub grad: Vec<f64>,
}

/// `α_intra·L_intra + α_inter·L_inter + α_reg·L_reg + α_sep·L_sep` over one
/// field: voxels with instance id > 0 form the parts, id 0 is background.
/// The pull/push margins come from `margins`; its term weights are unused.
pub fn instance_total_loss(
    field: &EmbeddingField,
    margins: &DiscriminativeParams,
    sep: &SepParams,
) -> Result<InstanceLossOutput> {
    margins.validate()?;
    let groups = field.groups();
    if groups.is_empty() {
        return Err(Error::invalid("instance loss needs at least one foreground instance"));
    }
    let mut grad = vec![0.0; field.embeddings.values.len()];
    let (intra, inter, reg) = embedding_terms(
        &field.embeddings,
        &groups,
        margins.delta_v,
        margins.delta_d,
        [sep.alpha_intra, sep.alpha_inter, sep.alpha_reg],
        &mut grad,
    );
    let sep_loss = separation_terms(
        &field.embeddings,
        &groups,
        &field.background(),
        sep.delta,
        sep.part_reduction,
        sep.alpha_sep,
        &mut grad,
    );
    let loss = sep.alpha_intra * intra
        + sep.alpha_inter * inter
        + sep.alpha_reg * reg
        + sep.alpha_sep * sep_loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite("instance loss"));
    }
    Ok(InstanceLossOutput {
        loss,
        intra,
        inter,
        reg,
        sep: sep_loss,
        grad,
    })
}

/// Worst coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Largest per-coordinate relative error between the analytic gradient of
/// `f` and central differences with step `eps`, where the error of one
/// coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_report(f, x, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, x: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grad_check"));
    }
    if analytic.len() != x.len() {
        return Err(Error::invalid("gradient length differs from input length"));
    }
    let mut probe = x.to_vec();
    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (up, _) = f(&probe)?;
        probe[i] = x[i] - eps;
        let (down, _) = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > worst.max_rel_error {
            worst = GradCheckReport {
                max_rel_error: err,
                index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}
