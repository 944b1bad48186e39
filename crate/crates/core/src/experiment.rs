//! Experiment drivers tying the pieces together: proposal-net training,
//! cascade assembly (chains and trees), evaluation passes, the proposal-count
//! sweep, and the full seed-pinned desk experiment.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cascade::{
    sample_minibatch, train_verifier_step, CascadeNode, CascadeRuntime, ScoredBox,
};
use crate::config::{PoolingKind, RunConfig};
use crate::datagen::{self, DatasetConfig, Manifest};
use crate::error::{Error, Result};
use crate::eval::{
    classification_ap, metrics_csv, point_localization_ap, sweep_table_csv, GroundTruth,
    ImagePrediction, PrResult, SweepRow,
};
use crate::net::Network;
use crate::proposal::{desk_proposal_spec, ImageSample, ProposalNet};
use crate::cascade::desk_verifier_spec;

/// Classification and localization results of one evaluated model.
#[derive(Debug, Clone)]
pub struct MetricsPair {
    pub cls: PrResult,
    pub loc: PrResult,
}

/// Trains a proposal network from image-level labels with the configured
/// pooling. Returns the net and the mean loss per epoch.
pub fn train_proposal_net(
    samples: &[ImageSample],
    classes: usize,
    cfg: &RunConfig,
    kind: PoolingKind,
    net_seed: u64,
) -> Result<(ProposalNet, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("no training samples".to_string()));
    }
    let net = Network::init(desk_proposal_spec(classes, net_seed))?;
    let mut pnet = ProposalNet::new(net, cfg.scales.clone(), kind.method(cfg.r)?);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(net_seed ^ 0x5851_f42d_4c95_7f2d);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<ImageSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            total += pnet.train_step(&batch, cfg.lr_proposal)?;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok((pnet, epoch_losses))
}

/// Proposal-only predictions: pooled sigmoid scores and argmax
/// receptive-field centers.
pub fn proposal_predictions(
    pnet: &ProposalNet,
    samples: &[ImageSample],
    workers: usize,
) -> Result<Vec<ImagePrediction>> {
    run_parallel(samples, workers, |sample| {
        let (maps, infos) = pnet.forward_multiscale(&sample.pixels)?;
        let scores = pnet.image_scores(&maps)?;
        let centers = pnet.argmax_centers(&maps, &infos)?;
        Ok(ImagePrediction {
            id: sample.id.clone(),
            class_scores: scores,
            points: centers.iter().map(|&(x, y, _)| (x, y)).collect(),
        })
    })
}

/// Cascade predictions plus the mean proposal count per image.
pub fn cascade_predictions(
    rt: &CascadeRuntime,
    samples: &[ImageSample],
    workers: usize,
) -> Result<(Vec<ImagePrediction>, f64)> {
    let results = run_parallel(samples, workers, |sample| {
        let r = rt.infer(&sample.pixels)?;
        Ok((sample.id.clone(), r))
    })?;
    let mean_props =
        results.iter().map(|(_, r)| r.proposal_count as f64).sum::<f64>() / samples.len().max(1) as f64;
    let preds = results
        .into_iter()
        .map(|(id, r)| ImagePrediction {
            id,
            class_scores: r.class_scores,
            points: r.points,
        })
        .collect();
    Ok((preds, mean_props))
}

/// Runs `op` over the samples on `workers` threads, preserving input order.
fn run_parallel<T, F>(samples: &[ImageSample], workers: usize, op: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&ImageSample) -> Result<T> + Sync,
{
    let workers = workers.max(1).min(samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(&op).collect();
    }
    let chunk_size = samples.len().div_ceil(workers);
    let mut results: Vec<Result<Vec<T>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in samples.chunks(chunk_size) {
            handles.push(scope.spawn(|| chunk.iter().map(&op).collect::<Result<Vec<T>>>()));
        }
        for h in handles {
            results.push(h.join().expect("inference worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate(
    preds: &[ImagePrediction],
    gt: &GroundTruth,
    tolerance: f64,
) -> Result<MetricsPair> {
    Ok(MetricsPair {
        cls: classification_ap(preds, gt)?,
        loc: point_localization_ap(preds, gt, tolerance)?,
    })
}

/// The per-image surviving boxes of the current cascade over a training
/// tranche: the sampling pool for the next verifier stage.
pub fn survivor_pool(rt: &CascadeRuntime, samples: &[ImageSample]) -> Result<Vec<Vec<ScoredBox>>> {
    samples
        .iter()
        .map(|s| rt.surviving_boxes(&s.pixels))
        .collect()
}

/// Trains one verifier stage by random mini-batch sampling over the pool.
/// `scope` restricts the sampled proposal boxes to the node's classes;
/// images whose surviving boxes all lie outside the scope are dropped from
/// the pool rather than converted into full-image fallbacks.
pub fn train_verifier_stage(
    samples: &[ImageSample],
    boxes: &[Vec<ScoredBox>],
    scope: &[usize],
    classes: usize,
    cfg: &RunConfig,
    net_seed: u64,
) -> Result<Network> {
    let mut kept_samples: Vec<ImageSample> = Vec::new();
    let mut kept_boxes: Vec<Vec<ScoredBox>> = Vec::new();
    for (s, bs) in samples.iter().zip(boxes.iter()) {
        let scoped: Vec<ScoredBox> = bs
            .iter()
            .filter(|b| scope.contains(&b.class_id))
            .cloned()
            .collect();
        if scoped.is_empty() && !bs.is_empty() {
            // boxes exist but all belong to other branches
            continue;
        }
        kept_samples.push(s.clone());
        kept_boxes.push(scoped);
    }
    if kept_samples.is_empty() {
        return Err(Error::invalid("verifier training pool is empty".to_string()));
    }
    let mut net = Network::init(desk_verifier_spec(classes, net_seed))?;
    let mut rng = ChaCha20Rng::seed_from_u64(net_seed ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..cfg.verifier_steps {
        let batch = sample_minibatch(
            &kept_samples,
            &kept_boxes,
            cfg.batch,
            cfg.threshold,
            cfg.patch_side,
            &mut rng,
        )?;
        train_verifier_step(&mut net, &batch, cfg.lr_verifier)?;
    }
    Ok(net)
}

fn full_scope(classes: usize) -> Vec<usize> {
    (0..classes).collect()
}

/// Wraps a bare proposal net as a root-only cascade.
pub fn root_only_runtime(pnet: ProposalNet, cfg: &RunConfig) -> CascadeRuntime {
    let classes = pnet.class_count();
    CascadeRuntime {
        topology: CascadeNode {
            id: 0,
            threshold: cfg.threshold,
            k_top: cfg.k_top,
            class_scope: full_scope(classes),
            checkpoint: "proposal".into(),
            children: Vec::new(),
        },
        proposal: pnet,
        verifiers: BTreeMap::new(),
        patch_side: cfg.patch_side,
    }
}

/// Appends a freshly trained chain stage: the new verifier learns from boxes
/// that survive every existing stage, previous networks stay frozen.
pub fn extend_chain(
    rt: &CascadeRuntime,
    samples: &[ImageSample],
    cfg: &RunConfig,
    net_seed: u64,
) -> Result<CascadeRuntime> {
    let classes = rt.proposal.class_count();
    let pool = survivor_pool(rt, samples)?;
    let net = train_verifier_stage(samples, &pool, &full_scope(classes), classes, cfg, net_seed)?;
    let mut out = rt.clone();
    let new_id = out.topology.nodes().iter().map(|n| n.id).max().unwrap() + 1;
    let tail = out.topology.chain_tail_id();
    out.topology
        .find_mut(tail)
        .unwrap()
        .children
        .push(CascadeNode {
            id: new_id,
            threshold: cfg.threshold,
            k_top: cfg.k_top,
            class_scope: full_scope(classes),
            checkpoint: format!("verifier{new_id}"),
            children: Vec::new(),
        });
    out.verifiers.insert(new_id, net);
    out.validate()?;
    Ok(out)
}

/// Builds a tree cascade: one branch verifier per super-category, each
/// trained on the sampled boxes whose active classes belong to it.
pub fn build_tree(
    pnet: ProposalNet,
    manifest: &Manifest,
    samples: &[ImageSample],
    cfg: &RunConfig,
    seed_base: u64,
) -> Result<CascadeRuntime> {
    let classes = pnet.class_count();
    let base = root_only_runtime(pnet, cfg);
    let pool = survivor_pool(&base, samples)?;
    let mut out = base;
    let mut verifiers = BTreeMap::new();
    let mut children = Vec::new();
    for (i, (_, scope)) in manifest.super_categories().into_iter().enumerate() {
        let id = i + 1;
        let net = train_verifier_stage(samples, &pool, &scope, classes, cfg, seed_base + id as u64)?;
        verifiers.insert(id, net);
        children.push(CascadeNode {
            id,
            threshold: cfg.threshold,
            k_top: cfg.k_top,
            class_scope: scope,
            checkpoint: format!("branch{id}"),
            children: Vec::new(),
        });
    }
    out.topology.children = children;
    out.verifiers = verifiers;
    out.validate()?;
    Ok(out)
}

/// Proposal-count sensitivity: rerun cascade inference with each k_top and
/// tabulate mean proposal counts and both mAPs.
pub fn proposal_count_sweep(
    rt: &CascadeRuntime,
    k_values: &[usize],
    eval_samples: &[ImageSample],
    gt: &GroundTruth,
    cfg: &RunConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut variant = rt.clone();
        variant.topology.k_top = k;
        for node in variant.topology.nodes().iter().map(|n| n.id).collect::<Vec<_>>() {
            variant.topology.find_mut(node).unwrap().k_top = k;
        }
        let (preds, mean_props) = cascade_predictions(&variant, eval_samples, cfg.workers)?;
        let m = evaluate(&preds, gt, cfg.tolerance)?;
        rows.push(SweepRow {
            k_top: k,
            mean_proposals: mean_props,
            cls_map: m.cls.map,
            loc_map: m.loc.map,
        });
    }
    Ok(rows)
}

/// Prediction rows as `image_id,class,score,x,y`, one row per image-class.
pub fn predictions_csv(preds: &[ImagePrediction], class_names: &[String]) -> String {
    let mut out = String::from("image_id,class,score,x,y\n");
    for p in preds {
        for (c, name) in class_names.iter().enumerate() {
            let (x, y) = p.points[c];
            out.push_str(&format!(
                "{},{},{:.6},{:.2},{:.2}\n",
                p.id, name, p.class_scores[c], x, y
            ));
        }
    }
    out
}

/// Proposal rows as `image_id,class,score,x1,y1,x2,y2,scale`.
pub fn proposals_csv(
    rows: &[(String, crate::proposal::Proposal)],
    class_names: &[String],
    scales: &[usize],
) -> String {
    let mut out = String::from("image_id,class,score,x1,y1,x2,y2,scale\n");
    for (id, p) in rows {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{}\n",
            id,
            class_names[p.class_id],
            p.score,
            p.bbox.x1,
            p.bbox.y1,
            p.bbox.x2,
            p.bbox.y2,
            scales[p.stream]
        ));
    }
    out
}

/// Everything the full desk experiment produces.
#[derive(Debug, Clone)]
pub struct FullRunResult {
    pub lse_proposal: MetricsPair,
    pub mean_proposal: MetricsPair,
    pub cascade1: MetricsPair,
    pub cascade2: MetricsPair,
    pub tree: MetricsPair,
    pub sweep: Vec<SweepRow>,
    /// CSV artifacts by file name, exactly as written to disk.
    pub metric_files: BTreeMap<String, String>,
    /// Data generation through the second-stage evaluation.
    pub core_run_secs: f64,
    /// Including the tree variant and the k_top sweep.
    pub elapsed_secs: f64,
}

/// The full seed-pinned pipeline: generate data, train LSE and mean proposal
/// nets, add one verification stage, extend with a second stage on a fresh
/// tranche, build a tree variant, and sweep k_top. Writes metric CSVs and a
/// reproducibility stamp under `out_dir` when given.
pub fn run_full_experiment(cfg: &RunConfig, work_dir: &Path, out_dir: Option<&Path>) -> Result<FullRunResult> {
    let start = Instant::now();
    let data_root = work_dir.join("data");
    let ds = DatasetConfig {
        side: cfg.side,
        ..DatasetConfig::desk(cfg.seed, cfg.train_count, cfg.train2_count, cfg.eval_count)
    };
    datagen::generate(&ds, &data_root)?;
    let manifest = datagen::load_manifest(&data_root)?;
    let classes = manifest.classes.len();
    let class_names = manifest.class_names();

    let train = datagen::load_split_samples(&data_root, "train")?;
    let train2 = datagen::load_split_samples(&data_root, "train2")?;
    let eval_samples = datagen::load_split_samples(&data_root, "eval")?;
    let gt = datagen::load_split_ground_truth(&data_root, "eval")?;

    // same initialization for both pooling variants; only the pooling differs
    let net_seed = cfg.seed.wrapping_add(101);
    let (lse_net, _) = train_proposal_net(&train, classes, cfg, PoolingKind::Lse, net_seed)?;
    let (mean_net, _) = train_proposal_net(&train, classes, cfg, PoolingKind::Mean, net_seed)?;

    let lse_preds = proposal_predictions(&lse_net, &eval_samples, cfg.workers)?;
    let mean_preds = proposal_predictions(&mean_net, &eval_samples, cfg.workers)?;
    let lse_proposal = evaluate(&lse_preds, &gt, cfg.tolerance)?;
    let mean_proposal = evaluate(&mean_preds, &gt, cfg.tolerance)?;

    // chain stage 1 on the first tranche
    let rt0 = root_only_runtime(lse_net.clone(), cfg);
    let rt1 = extend_chain(&rt0, &train, cfg, cfg.seed.wrapping_add(201))?;
    let (c1_preds, _) = cascade_predictions(&rt1, &eval_samples, cfg.workers)?;
    let cascade1 = evaluate(&c1_preds, &gt, cfg.tolerance)?;

    // chain stage 2 on the fresh tranche, previous stages frozen
    let rt2 = extend_chain(&rt1, &train2, cfg, cfg.seed.wrapping_add(301))?;
    let (c2_preds, _) = cascade_predictions(&rt2, &eval_samples, cfg.workers)?;
    let cascade2 = evaluate(&c2_preds, &gt, cfg.tolerance)?;
    let core_run_secs = start.elapsed().as_secs_f64();

    // tree variant over the super-categories; each branch gets an equal
    // per-class sampling budget (half the chain steps for two branches)
    let mut tree_cfg = cfg.clone();
    tree_cfg.verifier_steps = (cfg.verifier_steps / 2).max(1);
    let tree_rt = build_tree(lse_net, &manifest, &train, &tree_cfg, cfg.seed.wrapping_add(401))?;
    let (tree_preds, _) = cascade_predictions(&tree_rt, &eval_samples, cfg.workers)?;
    let tree = evaluate(&tree_preds, &gt, cfg.tolerance)?;

    let sweep = proposal_count_sweep(&rt1, &[1, 2, 3], &eval_samples, &gt, cfg)?;

    let mut metric_files = BTreeMap::new();
    metric_files.insert(
        "proposal_lse.csv".to_string(),
        metrics_csv(&lse_proposal.cls, &lse_proposal.loc, &class_names),
    );
    metric_files.insert(
        "proposal_mean.csv".to_string(),
        metrics_csv(&mean_proposal.cls, &mean_proposal.loc, &class_names),
    );
    metric_files.insert(
        "cascade1.csv".to_string(),
        metrics_csv(&cascade1.cls, &cascade1.loc, &class_names),
    );
    metric_files.insert(
        "cascade2.csv".to_string(),
        metrics_csv(&cascade2.cls, &cascade2.loc, &class_names),
    );
    metric_files.insert(
        "tree.csv".to_string(),
        metrics_csv(&tree.cls, &tree.loc, &class_names),
    );
    metric_files.insert("sweep.csv".to_string(), sweep_table_csv(&sweep));

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &metric_files {
            crate::fsio::write_atomic_str(&dir.join(name), content)?;
        }
        crate::fsio::write_stamp(dir, cfg.hash(), cfg.seed)?;
    }

    Ok(FullRunResult {
        lse_proposal,
        mean_proposal,
        cascade1,
        cascade2,
        tree,
        sweep,
        metric_files,
        core_run_secs,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
