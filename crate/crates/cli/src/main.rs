//! Command-line surface for the weakly supervised localization pipeline:
//! dataset generation, two-stage training, cascade assembly, inference,
//! evaluation, sweeps, geometry dumps, and heat map export.
//!
//! Every command writes its artifacts atomically plus a `stamp.txt`
//! reproducibility record (config hash + seed). Identical configurations
//! produce byte-identical outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use weakloc::cascade::CascadeRuntime;
use weakloc::config::{PoolingKind, RunConfig};
use weakloc::datagen::{self, DatasetConfig};
use weakloc::error::Error;
use weakloc::eval::metrics_csv;
use weakloc::experiment::{
    build_tree, cascade_predictions, evaluate, extend_chain, predictions_csv, proposal_count_sweep,
    proposal_predictions, proposals_csv, root_only_runtime, train_proposal_net, MetricsPair,
};
use weakloc::fsio;
use weakloc::geometry::FieldGeometry;
use weakloc::image::write_pgm;
use weakloc::net::NetworkSpec;
use weakloc::proposal::ProposalNet;
use weakloc::{Result, Tensor};

#[derive(Parser)]
#[command(name = "weakloc", version, about = "weakly supervised object classification and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; explicit flags override `--config`.
#[derive(Args, Clone)]
struct Common {
    /// Key-value config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pooling method: lse | mean | max.
    #[arg(long)]
    pooling: Option<String>,
    /// LSE sharpness.
    #[arg(long)]
    r: Option<f64>,
    /// Proposal score threshold t.
    #[arg(long)]
    threshold: Option<f64>,
    /// Top-k regions per class per scale.
    #[arg(long)]
    topk: Option<usize>,
    /// Stream scales, comma separated.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    verifier_steps: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Inference worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn build(&self, lr_target: LrTarget) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.pooling {
            cfg.pooling = PoolingKind::parse(p)?;
        }
        if let Some(r) = self.r {
            cfg.r = r;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(k) = self.topk {
            cfg.k_top = k;
        }
        if let Some(s) = &self.scales {
            cfg.set("scales", s)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            match lr_target {
                LrTarget::Proposal => cfg.lr_proposal = lr,
                LrTarget::Verifier => cfg.lr_verifier = lr,
            }
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(vs) = self.verifier_steps {
            cfg.verifier_steps = vs;
        }
        if let Some(t) = self.tolerance {
            cfg.tolerance = t;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy)]
enum LrTarget {
    Proposal,
    Verifier,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Image side in pixels.
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        train2: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
    },
    /// Train the multi-scale proposal network from image-level labels.
    TrainProposal {
        #[command(flatten)]
        common: Common,
        /// Dataset root (from `gen`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training split name.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a verification stage on top of an existing cascade.
    TrainVerifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Existing cascade topology file.
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// chain adds one full-scope stage; tree adds one branch per
        /// super-category.
        #[arg(long, default_value = "chain")]
        structure: String,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Extend a chain cascade with one more stage trained on fresh data.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train2")]
        split: String,
    },
    /// Run inference, writing predictions.csv and proposals.csv.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Cascade topology file; falls back to the config `topology` key.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Run inference and score it: metrics.csv with per-class AP rows.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Cascade topology file; falls back to the config `topology` key.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Sensitivity sweeps: `--kind pooling` retrains with lse/max/mean,
    /// `--kind topk` re-runs inference with k_top in {1,2,3}.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: String,
        /// Cascade topology (required for `--kind topk`).
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scale receptive-field geometry of a proposal network as CSV.
    Geometry {
        #[command(flatten)]
        common: Common,
        /// Network spec file; defaults to the desk proposal architecture.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Export per-class heat maps (PGM) for one image under one or more
    /// trained proposal networks, plus a side-by-side montage.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated cascade topology files; each contributes one
        /// column to the montage.
        #[arg(long)]
        topology: String,
        /// Image id within the split.
        #[arg(long)]
        image: String,
        /// Class id; omit for all classes.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = match &e {
                Error::Shape(_) => "shape",
                Error::InvalidArg(_) => "invalid-arg",
                Error::NonFinite(_) => "non-finite",
                Error::Parse(_) => "parse",
                Error::Config(_) => "config",
                Error::Topology(_) => "topology",
                Error::Io(_) => "io",
            };
            eprintln!("error: {category}: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_runtime(topology: &Path, cfg: &RunConfig) -> Result<CascadeRuntime> {
    let dir = topology.parent().unwrap_or_else(|| Path::new("."));
    CascadeRuntime::load(dir, cfg.scales.clone(), cfg.pooling_method()?, cfg.patch_side)
}

/// The --topology flag, or the config file's `topology` key.
fn resolve_topology(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.topology.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no cascade topology given (flag or config)".to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out, side, train, train2, eval } => {
            let mut cfg = common.build(LrTarget::Proposal)?;
            if let Some(s) = side {
                cfg.side = s;
            }
            if let Some(n) = train {
                cfg.train_count = n;
            }
            if let Some(n) = train2 {
                cfg.train2_count = n;
            }
            if let Some(n) = eval {
                cfg.eval_count = n;
            }
            let ds = DatasetConfig {
                side: cfg.side,
                ..DatasetConfig::desk(cfg.seed, cfg.train_count, cfg.train2_count, cfg.eval_count)
            };
            datagen::generate(&ds, &out)?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }

        Command::TrainProposal { common, data, out, split } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let manifest = datagen::load_manifest(&data)?;
            let samples = datagen::load_split_samples(&data, &split)?;
            let (pnet, losses) =
                train_proposal_net(&samples, manifest.classes.len(), &cfg, cfg.pooling, cfg.seed)?;
            let rt = root_only_runtime(pnet, &cfg);
            rt.save(&out)?;
            let mut loss_csv = String::from("epoch,loss\n");
            for (i, l) in losses.iter().enumerate() {
                loss_csv.push_str(&format!("{},{:.6}\n", i + 1, l));
            }
            fsio::write_atomic_str(&out.join("losses.csv"), &loss_csv)?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("proposal network written to {}", out.display());
            Ok(())
        }

        Command::TrainVerifier { common, data, topology, out, structure, split } => {
            let cfg = common.build(LrTarget::Verifier)?;
            let manifest = datagen::load_manifest(&data)?;
            let rt = load_runtime(&topology, &cfg)?;
            let samples = datagen::load_split_samples(&data, &split)?;
            let extended = match structure.as_str() {
                "chain" => extend_chain(&rt, &samples, &cfg, cfg.seed.wrapping_add(201))?,
                "tree" => {
                    if !rt.topology.children.is_empty() {
                        return Err(Error::Topology(
                            "tree structure must be built on a bare proposal stage".to_string(),
                        ));
                    }
                    build_tree(rt.proposal.clone(), &manifest, &samples, &cfg, cfg.seed.wrapping_add(401))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "structure must be chain or tree, got {other:?}"
                    )))
                }
            };
            extended.save(&out)?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("cascade written to {}", out.display());
            Ok(())
        }

        Command::Extend { common, data, topology, out, split } => {
            let cfg = common.build(LrTarget::Verifier)?;
            let rt = load_runtime(&topology, &cfg)?;
            let samples = datagen::load_split_samples(&data, &split)?;
            let extended = extend_chain(&rt, &samples, &cfg, cfg.seed.wrapping_add(301))?;
            extended.save(&out)?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("extended cascade written to {}", out.display());
            Ok(())
        }

        Command::Infer { common, data, topology, out, split } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let manifest = datagen::load_manifest(&data)?;
            let class_names = manifest.class_names();
            let topology = resolve_topology(topology, &cfg)?;
            let rt = load_runtime(&topology, &cfg)?;
            let samples = datagen::load_split_samples(&data, &split)?;
            let (preds, _) = cascade_predictions(&rt, &samples, cfg.workers)?;
            fsio::write_atomic_str(&out.join("predictions.csv"), &predictions_csv(&preds, &class_names))?;
            // proposals from the root selection stage
            let mut rows = Vec::new();
            for s in &samples {
                let (maps, infos) = rt.proposal.forward_multiscale(&s.pixels)?;
                let (_, h, w) = s.pixels.dims3()?;
                for p in rt.proposal.propose(
                    &maps,
                    &infos,
                    (h, w),
                    rt.topology.threshold,
                    rt.topology.k_top,
                )? {
                    rows.push((s.id.clone(), p));
                }
            }
            fsio::write_atomic_str(
                &out.join("proposals.csv"),
                &proposals_csv(&rows, &class_names, &cfg.scales),
            )?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("predictions written to {}", out.display());
            Ok(())
        }

        Command::Eval { common, data, topology, out, split } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let manifest = datagen::load_manifest(&data)?;
            let class_names = manifest.class_names();
            let topology = resolve_topology(topology, &cfg)?;
            let rt = load_runtime(&topology, &cfg)?;
            let samples = datagen::load_split_samples(&data, &split)?;
            let gt = datagen::load_split_ground_truth(&data, &split)?;
            let preds = if rt.topology.children.is_empty() {
                proposal_predictions(&rt.proposal, &samples, cfg.workers)?
            } else {
                cascade_predictions(&rt, &samples, cfg.workers)?.0
            };
            let m: MetricsPair = evaluate(&preds, &gt, cfg.tolerance)?;
            fsio::write_atomic_str(&out.join("metrics.csv"), &metrics_csv(&m.cls, &m.loc, &class_names))?;
            fsio::write_atomic_str(&out.join("predictions.csv"), &predictions_csv(&preds, &class_names))?;
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!(
                "classification mAP {:.4}, localization mAP {:.4} -> {}",
                m.cls.map,
                m.loc.map,
                out.join("metrics.csv").display()
            );
            Ok(())
        }

        Command::Sweep { common, data, kind, topology, out } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let manifest = datagen::load_manifest(&data)?;
            match kind.as_str() {
                "pooling" => {
                    let samples = datagen::load_split_samples(&data, "train")?;
                    let eval_samples = datagen::load_split_samples(&data, "eval")?;
                    let gt = datagen::load_split_ground_truth(&data, "eval")?;
                    let mut csv = String::from("pooling,cls_map,loc_map\n");
                    for kind in [PoolingKind::Lse, PoolingKind::Max, PoolingKind::Mean] {
                        let (pnet, _) = train_proposal_net(
                            &samples,
                            manifest.classes.len(),
                            &cfg,
                            kind,
                            cfg.seed.wrapping_add(101),
                        )?;
                        let preds = proposal_predictions(&pnet, &eval_samples, cfg.workers)?;
                        let m = evaluate(&preds, &gt, cfg.tolerance)?;
                        csv.push_str(&format!("{},{:.6},{:.6}\n", kind.name(), m.cls.map, m.loc.map));
                    }
                    fsio::write_atomic_str(&out.join("pooling_sweep.csv"), &csv)?;
                }
                "topk" => {
                    let topo = topology.ok_or_else(|| {
                        Error::Config("--kind topk needs --topology".to_string())
                    })?;
                    let rt = load_runtime(&topo, &cfg)?;
                    let eval_samples = datagen::load_split_samples(&data, "eval")?;
                    let gt = datagen::load_split_ground_truth(&data, "eval")?;
                    let rows = proposal_count_sweep(&rt, &[1, 2, 3], &eval_samples, &gt, &cfg)?;
                    fsio::write_atomic_str(&out.join("topk_sweep.csv"), &weakloc::eval::sweep_table_csv(&rows))?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "sweep kind must be pooling or topk, got {other:?}"
                    )))
                }
            }
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("sweep written to {}", out.display());
            Ok(())
        }

        Command::Geometry { common, spec } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let net_spec = match spec {
                Some(path) => NetworkSpec::from_text(&std::fs::read_to_string(path)?)?,
                None => weakloc::proposal::desk_proposal_spec(6, cfg.seed),
            };
            let geom = FieldGeometry::from_spec(&net_spec);
            println!("scale,stride,window,offset,map_w,map_h");
            for &s in &cfg.scales {
                let (mh, mw) = net_spec.output_hw(s, s)?;
                println!("{s},{},{},{},{mw},{mh}", geom.stride, geom.window, geom.offset);
            }
            Ok(())
        }

        Command::Heatmap { common, data, topology, image, class, out, split } => {
            let cfg = common.build(LrTarget::Proposal)?;
            let manifest = datagen::load_manifest(&data)?;
            let class_names = manifest.class_names();
            let samples = datagen::load_split_samples(&data, &split)?;
            let sample = samples
                .iter()
                .find(|s| s.id == image)
                .ok_or_else(|| Error::invalid(format!("no image {image} in split {split}")))?;
            let class_ids: Vec<usize> = match class {
                Some(c) => vec![c],
                None => (0..class_names.len()).collect(),
            };
            let mut nets: Vec<(String, ProposalNet)> = Vec::new();
            for topo in topology.split(',') {
                let path = PathBuf::from(topo.trim());
                let rt = load_runtime(&path, &cfg)?;
                let name = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| "net".to_string());
                nets.push((name, rt.proposal));
            }
            std::fs::create_dir_all(&out)?;
            let (_, h, w) = sample.pixels.dims3()?;
            let mut montages: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
            for (name, pnet) in &nets {
                let (maps, infos) = pnet.forward_multiscale(&sample.pixels)?;
                for &c in &class_ids {
                    let hm = pnet.heatmap(&maps, &infos, c, (h, w))?;
                    write_pgm(&out.join(format!("heat_{name}_{}.pgm", class_names[c])), &hm)?;
                    montages.entry(c).or_default().push(hm);
                }
            }
            // side-by-side montage per class when several nets were given
            if nets.len() > 1 {
                for (c, tiles) in montages {
                    let cols = tiles.len();
                    let stride = w * cols + (cols - 1);
                    let mut strip = Tensor::filled(&[h, stride], 255.0);
                    for (i, tile) in tiles.iter().enumerate() {
                        for y in 0..h {
                            for x in 0..w {
                                strip.data_mut()[y * stride + i * (w + 1) + x] =
                                    tile.data()[y * w + x];
                            }
                        }
                    }
                    write_pgm(&out.join(format!("heat_compare_{}.pgm", class_names[c])), &strip)?;
                }
            }
            fsio::write_stamp(&out, cfg.hash(), cfg.seed)?;
            println!("heat maps written to {}", out.display());
            Ok(())
        }
    }
}
