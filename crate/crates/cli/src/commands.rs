use std::path::{Path, PathBuf};

use hierpart::align::{best_alignment, icp_point_to_point, IcpResult};
use hierpart::formats::{
    read_instances, read_meshes, read_points, read_tensor, read_transform, write_instances, write_meshes,
    write_prediction, write_scene, write_tensor, write_transform, FieldKind, TensorFile, TransformFile,
};
use hierpart::gradcheck::{run_suite, Kernel};
use hierpart::infer::{bottom_up_project, flat_predict, softmax, top_down_chained, top_down_predict};
use hierpart::instances::{extract_instances, mean_shift};
use hierpart::losses::{
    discriminative_loss, instance_total_loss, inverse_frequency_weights, weighted_cross_entropy, EmbeddingField,
    Embeddings, PartReduction,
};
use hierpart::metrics::{hierarchical_summary, instance_metrics, render_table, semantic_metrics_at_level};
use hierpart::synth::{gen_synthetic, instance_embeddings, SyntheticSpec};
use hierpart::voxelgrid::{relabel_after_prune, remove_background, transfer_labels, voxelize_meshes, TransferOptions};
use hierpart::{
    AccuracyMode, AffineTransform, DiscriminativeParams, IcpParams, IcpScore, InstanceSet, LabelField, LabeledMesh,
    LevelWeights, MeanShiftParams, NodeId, PartTaxonomy, PruneRelabel, ScoreField, SemanticReport, SepParams,
    VoxelKey,
};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;
use serde_json::json;

use crate::io::{emit, load, load_labels, load_scene, load_taxonomy, read_text, to_json, write_text, CliError, CliResult};
use crate::*;

pub fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Taxonomy(c) => taxonomy(c),
        Command::Align(c) => align(c),
        Command::Voxelize(a) => voxelize(a),
        Command::Transfer(a) => transfer(a),
        Command::Infer(c) => infer(c),
        Command::Cluster(a) => cluster(a),
        Command::Loss(LossCmd::Eval(a)) => loss_eval(a),
        Command::Loss(LossCmd::Gradcheck(a)) => gradcheck(a),
        Command::Eval(EvalCmd::Semantic(a)) => eval_semantic(a),
        Command::Eval(EvalCmd::Hier(a)) => eval_hier(a),
        Command::Eval(EvalCmd::Instance(a)) => eval_instance(a),
        Command::Gen(a) => gen(a),
        Command::Report(a) => report(a),
    }
}

fn check_level(tax: &PartTaxonomy, level: usize) -> CliResult<()> {
    if level == 0 || level > tax.max_depth() {
        return Err(CliError::validation(format!(
            "level {level} outside 1..={}",
            tax.max_depth()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- taxonomy

fn taxonomy(cmd: &TaxonomyCmd) -> CliResult<()> {
    match cmd {
        TaxonomyCmd::Prune(a) => {
            let tax = load_taxonomy(&a.io.taxonomy)?;
            let pruned = tax.prune_by_occurrence(a.threshold);
            if let (Some(src), Some(dst)) = (&a.scene, &a.scene_out) {
                let mode = match a.prune_relabel {
                    PruneRelabelArg::Unlabeled => PruneRelabel::Unlabeled,
                    PruneRelabelArg::Parent => PruneRelabel::Parent,
                };
                let scene = load_scene(src)?;
                write_text(dst, &write_scene(&relabel_after_prune(&scene, &tax, &pruned, mode)))?;
            }
            emit(a.io.out.as_ref(), &pruned.to_json())
        }
        TaxonomyCmd::Collapse(a) => {
            let tax = load_taxonomy(&a.taxonomy)?;
            emit(a.out.as_ref(), &tax.collapse_trivial_paths().to_json())
        }
        TaxonomyCmd::Levels(a) => {
            let tax = load_taxonomy(&a.taxonomy)?;
            if a.tree {
                return emit(None, &tax.render_tree());
            }
            let levels: Vec<_> = (1..=tax.max_depth())
                .map(|k| {
                    let classes: Vec<_> = tax
                        .level_classes(k)
                        .into_iter()
                        .map(|id| json!({ "id": id, "name": tax.node(id).map(|n| n.name.as_str()) }))
                        .collect();
                    json!({ "level": k, "classes": classes })
                })
                .collect();
            emit(None, &to_json(&levels))
        }
        TaxonomyCmd::Count(a) => {
            let tax = load_taxonomy(&a.io.taxonomy)?;
            let mut labels = Vec::new();
            for path in &a.scene {
                labels.extend(load_scene(path)?.entries.values().map(|e| e.leaf_label));
            }
            emit(a.io.out.as_ref(), &tax.count_occurrences(labels)?.to_json())
        }
    }
}

// ---------------------------------------------------------------- align

#[derive(Serialize)]
struct AlignSummary {
    rmse: f64,
    distance_sum: f64,
    iterations: usize,
    start_index: Option<usize>,
}

fn align(cmd: &AlignCmd) -> CliResult<()> {
    let io = match cmd {
        AlignCmd::Icp(a) => &a.io,
        AlignCmd::Best(a) => &a.io,
    };
    let src = load(&io.src, read_points)?;
    let dst = load(&io.dst, read_points)?;
    let params = IcpParams {
        max_iterations: io.max_iterations,
        convergence_eps: io.convergence_eps,
    };
    let (result, start): (IcpResult, Option<usize>) = match cmd {
        AlignCmd::Icp(a) => {
            let [w, x, y, z] = <[f64; 4]>::try_from(a.init_rotation.as_slice())
                .map_err(|_| CliError::validation("--init-rotation needs 4 numbers"))?;
            let q = Quaternion::new(w, x, y, z);
            if !(q.norm() > 0.0 && q.norm().is_finite()) {
                return Err(CliError::validation("--init-rotation must be a non-zero quaternion"));
            }
            (icp_point_to_point(&src, &dst, &UnitQuaternion::from_quaternion(q), &params)?, None)
        }
        AlignCmd::Best(a) => {
            let score = match a.icp_score {
                IcpScoreArg::Rmse => IcpScore::Rmse,
                IcpScoreArg::Sum => IcpScore::Sum,
            };
            let best = best_alignment(&src, &dst, &params, score)?;
            (best.best, Some(best.start_index))
        }
    };
    if let Some(out) = &io.out {
        write_text(out, &write_transform(&TransformFile::Affine(result.transform.clone())))?;
    }
    emit(
        None,
        &to_json(&AlignSummary {
            rmse: result.rmse,
            distance_sum: result.distance_sum,
            iterations: result.iterations,
            start_index: start,
        }),
    )
}

// ---------------------------------------------------------------- voxels

fn load_meshes(path: &Path, transform: Option<&PathBuf>) -> CliResult<Vec<LabeledMesh>> {
    let meshes = load(path, read_meshes)?;
    match transform {
        None => Ok(meshes),
        Some(t) => {
            let t: AffineTransform = load(t, read_transform)?.to_affine();
            Ok(meshes.iter().map(|m| m.transformed(&t)).collect())
        }
    }
}

fn voxelize(a: &VoxelizeArgs) -> CliResult<()> {
    let meshes = load_meshes(&a.meshes, a.transform.as_ref())?;
    let origin = Vector3::from_column_slice(&a.origin);
    let scene = voxelize_meshes(&meshes, a.grid.resolution, a.grid.truncation(), origin)?;
    emit(a.out.as_ref(), &write_scene(&scene))
}

fn transfer(a: &TransferArgs) -> CliResult<()> {
    let scene = load_scene(&a.scene)?;
    let meshes = load_meshes(&a.meshes, a.transform.as_ref())?;
    let identity = AffineTransform::identity();
    let sources: Vec<(&LabeledMesh, &AffineTransform)> = meshes.iter().map(|m| (m, &identity)).collect();
    let labeled = transfer_labels(
        &scene,
        &sources,
        TransferOptions {
            sample_faces: a.sample_faces,
        },
    );
    let out = if a.keep_background { labeled } else { remove_background(&labeled) };
    emit(a.out.as_ref(), &write_scene(&out))
}

// ---------------------------------------------------------------- inference

/// Score tensor whose columns are the classes of its header level, or the
/// leaves for level 0.
fn load_scores(path: &Path, tax: &PartTaxonomy) -> CliResult<(Vec<VoxelKey>, usize, ScoreField)> {
    let t = load(path, read_tensor)?;
    if t.kind != FieldKind::Score {
        return Err(CliError::validation(format!("{}: expected a score tensor", path.display())));
    }
    let classes = if t.level == 0 { tax.leaves().collect() } else { tax.level_classes(t.level) };
    let scores = t.scores(&classes).map_err(|e| CliError::in_file(path, e))?;
    Ok((t.keys, t.level, scores))
}

fn field_of(keys: &[VoxelKey], labels: &[NodeId]) -> LabelField {
    keys.iter().copied().zip(labels.iter().copied()).collect()
}

fn infer(cmd: &InferCmd) -> CliResult<()> {
    match cmd {
        InferCmd::Flat(a) => {
            let tax = load_taxonomy(&a.taxonomy)?;
            let (keys, level, scores) = load_scores(&a.scores, &tax)?;
            if level == 0 {
                return Err(CliError::validation("flat inference needs a score tensor at level >= 1"));
            }
            emit(a.out.as_ref(), &write_prediction(level, &field_of(&keys, &flat_predict(&scores))))
        }
        InferCmd::Bottomup(a) => {
            let tax = load_taxonomy(&a.taxonomy)?;
            check_level(&tax, a.level)?;
            let (keys, level, scores) = load_scores(&a.scores, &tax)?;
            if level != 0 {
                return Err(CliError::validation("bottom-up inference needs a leaf score tensor (level 0)"));
            }
            let probs = if a.logits { softmax(&scores) } else { scores };
            let projected = bottom_up_project(&probs, &tax, a.level).map_err(|e| CliError::in_file(&a.scores, e))?;
            emit(a.out.as_ref(), &write_prediction(a.level, &field_of(&keys, &flat_predict(&projected))))
        }
        InferCmd::Topdown(a) => {
            let tax = load_taxonomy(&a.taxonomy)?;
            let loaded = a
                .scores
                .iter()
                .map(|p| load_scores(p, &tax))
                .collect::<CliResult<Vec<_>>>()?;
            if a.predicted_parent {
                for (i, (keys, level, _)) in loaded.iter().enumerate() {
                    if *level != i + 1 || keys != &loaded[0].0 {
                        return Err(CliError::validation(format!(
                            "{}: chained scores must cover levels 1..=K in order over the same voxels",
                            a.scores[i].display()
                        )));
                    }
                }
                let fields: Vec<ScoreField> = loaded.iter().map(|(_, _, s)| s.clone()).collect();
                let preds = top_down_chained(&fields, &tax)?;
                let last = preds.last().expect("at least one level");
                emit(a.out.as_ref(), &write_prediction(preds.len(), &field_of(&loaded[0].0, last)))
            } else {
                let [(keys, level, scores)] = <[_; 1]>::try_from(loaded)
                    .map_err(|_| CliError::validation("top-down with given parents takes exactly one --scores"))?;
                let parents_path = a.parents.as_ref().expect("clap requires --parents");
                if level < 2 {
                    return Err(CliError::validation("top-down inference starts at level 2"));
                }
                let parents_field = load_labels(parents_path, &tax, level - 1)?;
                let parents = keys
                    .iter()
                    .map(|k| {
                        parents_field.get(k).copied().ok_or_else(|| {
                            CliError::validation(format!("{}: no parent label for voxel {k:?}", parents_path.display()))
                        })
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                let pred = top_down_predict(&scores, &parents, &tax, level)?;
                emit(a.out.as_ref(), &write_prediction(level, &field_of(&keys, &pred)))
            }
        }
    }
}

fn cluster(a: &ClusterArgs) -> CliResult<()> {
    let tax = load_taxonomy(&a.taxonomy)?;
    check_level(&tax, a.level)?;
    let t = load(&a.embeddings, read_tensor)?;
    if t.kind != FieldKind::Embedding {
        return Err(CliError::validation(format!("{}: expected an embedding tensor", a.embeddings.display())));
    }
    let labels_field = load_labels(&a.labels, &tax, a.level)?;
    let labels: Vec<NodeId> = t.keys.iter().map(|k| labels_field.get(k).copied().unwrap_or(0)).collect();
    let ids = mean_shift(&t.embeddings(), &MeanShiftParams::with_bandwidth(a.bandwidth))?;
    let set = extract_instances(&t.keys, &ids, &labels, a.min_confidence)?;
    emit(a.out.as_ref(), &write_instances(&set))
}

// ---------------------------------------------------------------- losses

#[derive(Serialize, Default)]
struct LossSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_entropy: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    discriminative: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance_total: Option<serde_json::Value>,
}

fn loss_eval(a: &LossEvalArgs) -> CliResult<()> {
    let tax = load_taxonomy(&a.taxonomy)?;
    let gt = load_scene(&a.gt)?;
    let w = &a.weights;
    let mut summary = LossSummary::default();
    if a.scores.is_empty() && a.embeddings.is_none() {
        return Err(CliError::validation("give --scores and/or --embeddings"));
    }
    if !a.scores.is_empty() {
        let alpha = LevelWeights::parse(&w.alpha)?;
        if alpha.len() != a.scores.len() {
            return Err(CliError::validation(format!(
                "{} level weights for {} score tensors",
                alpha.len(),
                a.scores.len()
            )));
        }
        let mut fields = Vec::new();
        let mut labels = Vec::new();
        for (i, path) in a.scores.iter().enumerate() {
            let (keys, level, scores) = load_scores(path, &tax)?;
            if level != i + 1 {
                return Err(CliError::validation(format!("{}: expected level {}", path.display(), i + 1)));
            }
            let gt_level = hierpart::voxelgrid::project_scene_labels(&gt, &tax, level)?;
            labels.push(keys.iter().map(|k| gt_level.get(k).copied().unwrap_or(0)).collect::<Vec<_>>());
            fields.push(scores);
        }
        let class_weights: Option<Vec<Vec<f64>>> = a.class_weights.then(|| {
            fields
                .iter()
                .zip(&labels)
                .map(|(f, l)| inverse_frequency_weights(&f.classes, l))
                .collect()
        });
        let ce = weighted_cross_entropy(&fields, &labels, &alpha, class_weights.as_deref())?;
        summary.cross_entropy = Some(json!({ "loss": ce.loss, "per_level": ce.per_level }));
    }
    if let Some(path) = &a.embeddings {
        let t = load(path, read_tensor)?;
        if t.kind != FieldKind::Embedding {
            return Err(CliError::validation(format!("{}: expected an embedding tensor", path.display())));
        }
        let ids: Vec<u32> = t
            .keys
            .iter()
            .map(|k| gt.entries.get(k).map(|e| e.instance_id).unwrap_or(0))
            .collect();
        let margins = DiscriminativeParams {
            delta_v: w.delta_v,
            delta_d: w.delta_d,
            alpha: w.alpha_pull,
            beta: w.alpha_push,
            gamma: w.gamma,
        };
        let fg: Vec<usize> = (0..ids.len()).filter(|&j| ids[j] != 0).collect();
        let fg_rows: Vec<Vec<f64>> = fg.iter().map(|&j| t.values[j * t.dim..(j + 1) * t.dim].to_vec()).collect();
        if !fg.is_empty() {
            let field = EmbeddingField::new(
                Embeddings::from_rows(t.dim, &fg_rows)?,
                fg.iter().map(|&j| ids[j]).collect(),
            )?;
            let d = discriminative_loss(&field, &margins)?;
            summary.discriminative = Some(json!({ "loss": d.loss, "pull": d.pull, "push": d.push, "reg": d.reg }));
        }
        let sep = SepParams {
            alpha_intra: w.alpha_pull,
            alpha_inter: w.alpha_push,
            alpha_reg: w.alpha_reg,
            alpha_sep: w.alpha_sep,
            delta: w.sep_delta,
            part_reduction: if w.sep_sum { PartReduction::Sum } else { PartReduction::Mean },
        };
        let total = instance_total_loss(&EmbeddingField::new(t.embeddings(), ids)?, &margins, &sep)?;
        summary.instance_total = Some(json!({
            "loss": total.loss, "intra": total.intra, "inter": total.inter, "reg": total.reg, "sep": total.sep
        }));
    }
    emit(a.out.as_ref(), &to_json(&summary))
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let kernels: Vec<Kernel> = if a.all || a.kernel.is_empty() {
        Kernel::ALL.to_vec()
    } else {
        a.kernel
            .iter()
            .map(|k| Kernel::parse(k).ok_or_else(|| CliError::validation(format!("unknown kernel {k:?}"))))
            .collect::<CliResult<_>>()?
    };
    if a.seeds == 0 {
        return Err(CliError::validation("--seeds must be >= 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let results = run_suite(&kernels, &seeds, &a.dims, &a.groups)?;
    if let Some(out) = &a.out {
        write_text(out, &to_json(&results))?;
    }
    let mut failed = 0;
    for k in &kernels {
        let mine: Vec<_> = results.iter().filter(|r| r.kernel == *k).collect();
        let worst = mine.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let bad = mine.iter().filter(|r| !r.passed()).count();
        failed += bad;
        println!(
            "{:<15} {:>5} checks  max rel error {worst:.3e}  {}",
            k.name(),
            mine.len(),
            if bad == 0 { "ok".to_string() } else { format!("{bad} FAILED") }
        );
    }
    if failed > 0 {
        return Err(CliError::validation(format!(
            "{failed} gradient checks exceed {:e}",
            hierpart::gradcheck::TOLERANCE
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluation

fn accuracy_mode(balanced: bool) -> AccuracyMode {
    if balanced {
        AccuracyMode::BalancedBinary
    } else {
        AccuracyMode::Recall
    }
}

fn level_column(report: &SemanticReport) -> hierpart::metrics::ReportColumn {
    hierpart::metrics::ReportColumn {
        name: format!("level {}", report.level),
        report: report.clone(),
    }
}

fn eval_semantic(a: &SemanticArgs) -> CliResult<()> {
    let tax = load_taxonomy(&a.taxonomy)?;
    check_level(&tax, a.level)?;
    let gt = load_labels(&a.gt, &tax, a.level)?;
    let pred = load_labels(&a.pred, &tax, a.level)?;
    let report = semantic_metrics_at_level(&pred, &gt, &tax, a.level, accuracy_mode(a.balanced_binary))?;
    if let Some(csv) = &a.csv {
        write_text(csv, &render_table(&[level_column(&report)]))?;
    }
    emit(a.out.as_ref(), &to_json(&report))
}

#[derive(Serialize)]
struct HierReport {
    levels: Vec<SemanticReport>,
    /// Mean of the per-level mIoU.
    mean_miou: Option<f64>,
}

fn eval_hier(a: &HierArgs) -> CliResult<()> {
    let tax = load_taxonomy(&a.taxonomy)?;
    let depth = tax.max_depth();
    let mode = accuracy_mode(a.balanced_binary);
    let mut levels = Vec::new();
    for level in 1..=depth {
        let pred_path = match a.pred.as_slice() {
            [one] => one,
            many if many.len() == depth => &many[level - 1],
            many => {
                return Err(CliError::validation(format!(
                    "{} prediction files for {depth} levels",
                    many.len()
                )))
            }
        };
        let gt = load_labels(&a.gt, &tax, level)?;
        let pred = load_labels(pred_path, &tax, level)?;
        levels.push(semantic_metrics_at_level(&pred, &gt, &tax, level, mode)?);
    }
    if let Some(csv) = &a.csv {
        let columns: Vec<_> = levels.iter().map(level_column).collect();
        write_text(csv, &render_table(&columns))?;
    }
    let mean_miou = hierarchical_summary(&levels);
    emit(a.out.as_ref(), &to_json(&HierReport { levels, mean_miou }))
}

fn load_instance_set(path: &Path, tax: Option<&PartTaxonomy>, level: usize) -> CliResult<InstanceSet> {
    let text = read_text(path)?;
    if text.trim_start().starts_with("S2P") {
        let tax = tax.ok_or_else(|| CliError::validation(format!("{}: scenes need --taxonomy", path.display())))?;
        let scene = hierpart::formats::read_scene(&text).map_err(|e| CliError::in_file(path, e))?;
        InstanceSet::ground_truth(&scene, tax, level).map_err(|e| CliError::in_file(path, e))
    } else {
        read_instances(&text).map_err(|e| CliError::in_file(path, e))
    }
}

fn eval_instance(a: &InstanceArgs) -> CliResult<()> {
    let tax = a.taxonomy.as_deref().map(load_taxonomy).transpose()?;
    if let Some(t) = &tax {
        check_level(t, a.level)?;
    }
    if !(0.0..=1.0).contains(&a.min_confidence) {
        return Err(CliError::validation("--min-confidence must lie in [0, 1]"));
    }
    let gt = load_instance_set(&a.gt, tax.as_ref(), a.level)?;
    let mut pred = load_instance_set(&a.pred, tax.as_ref(), a.level)?;
    pred.instances.retain(|i| i.confidence >= a.min_confidence);
    let names = |c: NodeId| {
        tax.as_ref()
            .and_then(|t| t.node(c))
            .map(|n| n.name.clone())
            .unwrap_or_default()
    };
    let report = instance_metrics(&pred, &gt, a.iou_threshold, names)?;
    emit(a.out.as_ref(), &to_json(&report))
}

// ---------------------------------------------------------------- gen, report

fn gen(a: &GenArgs) -> CliResult<()> {
    let mut spec = SyntheticSpec::random(a.seed, a.objects, a.grid.resolution);
    spec.truncation = a.grid.truncation();
    spec.color = a.color;
    let synth = gen_synthetic(&spec)?;
    write_text(&a.out.join("taxonomy.json"), &synth.taxonomy.to_json())?;
    write_text(&a.out.join("meshes.txt"), &write_meshes(&synth.world_meshes()))?;
    write_text(&a.out.join("gt.s2p"), &write_scene(&synth.scene))?;
    if a.embedding_dim > 0 {
        let emb = instance_embeddings(&synth.scene, a.embedding_dim, 2.0, 0.25, a.seed);
        let rows = synth.scene.entries.keys().enumerate().map(|(j, k)| (*k, emb.row(j).to_vec()));
        let t = TensorFile::new(FieldKind::Embedding, 0, a.embedding_dim, rows)?;
        write_text(&a.out.join("embeddings.tensor"), &write_tensor(&t))?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let mut columns = Vec::new();
    for spec in &a.column {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("--column {spec:?} must be name=path")))?;
        let path = Path::new(path);
        let text = read_text(path)?;
        let report: SemanticReport = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: line {}: {e}", path.display(), e.line())))?;
        columns.push(hierpart::metrics::ReportColumn {
            name: name.to_string(),
            report,
        });
    }
    if let Some(out) = &a.out {
        write_text(out, &to_json(&columns))?;
    }
    emit(a.csv.as_ref(), &render_table(&columns))
}
