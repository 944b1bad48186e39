//! End-to-end tests of the command-line surface on a miniature dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_weakloc")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Tiny dataset + trained artifacts shared by the tests.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> String {
        self.root.join("data").display().to_string()
    }

    fn proposal_topo(&self) -> String {
        self.root.join("proposal/cascade.topo").display().to_string()
    }

    fn cascade_topo(&self) -> String {
        self.root.join("cascade/cascade.topo").display().to_string()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let fx = Fixture { root };
        let data = fx.data();
        ok(&[
            "gen", "--out", &data, "--seed", "9", "--train", "30", "--train2", "20", "--eval", "12",
        ]);
        let proposal = fx.path("proposal").display().to_string();
        ok(&[
            "train-proposal", "--data", &data, "--out", &proposal,
            "--seed", "9", "--epochs", "1", "--lr", "0.3", "--batch", "8",
        ]);
        let cascade = fx.path("cascade").display().to_string();
        ok(&[
            "train-verifier", "--data", &data, "--topology", &fx.proposal_topo(),
            "--out", &cascade, "--seed", "9", "--verifier-steps", "3", "--lr", "0.1", "--batch", "4",
        ]);
        fx
    })
}

#[test]
fn gen_is_deterministic_and_stamped() {
    let fx = fixture();
    let again = fx.path("data2").display().to_string();
    ok(&[
        "gen", "--out", &again, "--seed", "9", "--train", "30", "--train2", "20", "--eval", "12",
    ]);
    let a = std::fs::read(fx.path("data/eval/labels.txt")).unwrap();
    let b = std::fs::read(fx.path("data2/eval/labels.txt")).unwrap();
    assert_eq!(a, b);
    let stamp = std::fs::read_to_string(fx.path("data/stamp.txt")).unwrap();
    assert!(stamp.contains("config_hash="));
    assert!(stamp.contains("seed=9"));
}

#[test]
fn zero_epoch_training_keeps_initialization() {
    let fx = fixture();
    let out = fx.path("proposal-e0").display().to_string();
    ok(&[
        "train-proposal", "--data", &fx.data(), "--out", &out,
        "--seed", "31", "--epochs", "0",
    ]);
    let spec_text = std::fs::read_to_string(fx.path("proposal-e0/proposal.spec")).unwrap();
    let spec = weakloc::net::NetworkSpec::from_text(&spec_text).unwrap();
    let loaded = weakloc::net::Network::load_checkpoint(
        spec.clone(),
        &fx.path("proposal-e0/proposal.ckpt"),
    )
    .unwrap();
    let fresh = weakloc::net::Network::init(spec).unwrap();
    for (a, b) in loaded.params().iter().zip(fresh.params()) {
        assert_eq!(
            a.as_ref().map(|p| p.weight.data().to_vec()),
            b.as_ref().map(|p| p.weight.data().to_vec()),
            "checkpoint after zero epochs must equal the seeded initialization"
        );
    }
}

#[test]
fn eval_emits_comparable_metric_csvs_for_proposal_and_cascade() {
    let fx = fixture();
    let out_p = fx.path("eval-proposal").display().to_string();
    let out_c = fx.path("eval-cascade").display().to_string();
    ok(&[
        "eval", "--data", &fx.data(), "--topology", &fx.proposal_topo(), "--out", &out_p,
    ]);
    ok(&[
        "eval", "--data", &fx.data(), "--topology", &fx.cascade_topo(), "--out", &out_c,
    ]);
    let a = std::fs::read_to_string(fx.path("eval-proposal/metrics.csv")).unwrap();
    let b = std::fs::read_to_string(fx.path("eval-cascade/metrics.csv")).unwrap();
    assert_eq!(a.lines().next(), Some("class,ap_cls,ap_loc"));
    assert_eq!(a.lines().count(), b.lines().count(), "same table shape");
    assert!(a.lines().last().unwrap().starts_with("mAP,"));
    assert!(b.lines().last().unwrap().starts_with("mAP,"));
}

#[test]
fn infer_writes_predictions_and_proposals() {
    let fx = fixture();
    let out = fx.path("infer").display().to_string();
    ok(&[
        "infer", "--data", &fx.data(), "--topology", &fx.cascade_topo(), "--out", &out,
    ]);
    let preds = std::fs::read_to_string(fx.path("infer/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("image_id,class,score,x,y"));
    // 12 eval images x 6 classes + header
    assert_eq!(preds.lines().count(), 12 * 6 + 1);
    let props = std::fs::read_to_string(fx.path("infer/proposals.csv")).unwrap();
    assert_eq!(
        props.lines().next(),
        Some("image_id,class,score,x1,y1,x2,y2,scale")
    );
}

#[test]
fn infer_is_reproducible_and_worker_count_invariant() {
    let fx = fixture();
    let out1 = fx.path("infer-a").display().to_string();
    let out2 = fx.path("infer-b").display().to_string();
    ok(&[
        "infer", "--data", &fx.data(), "--topology", &fx.cascade_topo(), "--out", &out1,
        "--workers", "1",
    ]);
    ok(&[
        "infer", "--data", &fx.data(), "--topology", &fx.cascade_topo(), "--out", &out2,
        "--workers", "3",
    ]);
    let a = std::fs::read(fx.path("infer-a/predictions.csv")).unwrap();
    let b = std::fs::read(fx.path("infer-b/predictions.csv")).unwrap();
    assert_eq!(a, b, "worker count must not change output bytes");
}

#[test]
fn extend_appends_a_chain_stage() {
    let fx = fixture();
    let out = fx.path("cascade2").display().to_string();
    ok(&[
        "extend", "--data", &fx.data(), "--topology", &fx.cascade_topo(), "--out", &out,
        "--seed", "9", "--verifier-steps", "2", "--batch", "4",
    ]);
    let topo = std::fs::read_to_string(fx.path("cascade2/cascade.topo")).unwrap();
    assert_eq!(topo.lines().count(), 3, "root + two verifier stages");
}

#[test]
fn tree_structure_builds_one_branch_per_super_category() {
    let fx = fixture();
    let out = fx.path("tree").display().to_string();
    ok(&[
        "train-verifier", "--data", &fx.data(), "--topology", &fx.proposal_topo(),
        "--out", &out, "--structure", "tree", "--seed", "9", "--verifier-steps", "2",
        "--batch", "4",
    ]);
    let topo = std::fs::read_to_string(fx.path("tree/cascade.topo")).unwrap();
    assert_eq!(topo.lines().count(), 3, "root + curved + polygonal branches");
}

#[test]
fn topk_sweep_emits_three_rows() {
    let fx = fixture();
    let out = fx.path("sweep").display().to_string();
    ok(&[
        "sweep", "--data", &fx.data(), "--kind", "topk",
        "--topology", &fx.cascade_topo(), "--out", &out,
    ]);
    let csv = std::fs::read_to_string(fx.path("sweep/topk_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("k_top,mean_proposals,cls_map,loc_map"));
}

#[test]
fn pooling_sweep_emits_lse_max_mean_rows() {
    let fx = fixture();
    let out = fx.path("sweep-pooling").display().to_string();
    ok(&[
        "sweep", "--data", &fx.data(), "--kind", "pooling", "--out", &out,
        "--seed", "9", "--epochs", "1", "--batch", "8",
    ]);
    let csv = std::fs::read_to_string(fx.path("sweep-pooling/pooling_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("lse,"));
    assert!(lines[2].starts_with("max,"));
    assert!(lines[3].starts_with("mean,"));
}

#[test]
fn geometry_dump_prints_per_scale_rows() {
    let out = ok(&["geometry"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "scale,stride,window,offset,map_w,map_h");
    assert_eq!(lines.len(), 4, "one row per default scale");
    assert!(lines[1].starts_with("32,8,23,-8,"));
    assert!(lines[3].starts_with("64,8,23,-8,8,8"));
}

#[test]
fn heatmap_exports_pgms_and_montage() {
    let fx = fixture();
    let out = fx.path("heat").display().to_string();
    let image_id = "eval_00000";
    let topos = format!("{},{}", fx.proposal_topo(), fx.cascade_topo());
    ok(&[
        "heatmap", "--data", &fx.data(), "--topology", &topos,
        "--image", image_id, "--class", "0", "--out", &out,
    ]);
    let entries: Vec<String> = std::fs::read_dir(fx.path("heat"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .collect();
    assert!(entries.iter().any(|e| e == "heat_compare_disk.pgm"), "{entries:?}");
    assert!(entries.iter().filter(|e| e.starts_with("heat_") && e.ends_with(".pgm")).count() >= 3);
    let montage = std::fs::read(fx.path("heat/heat_compare_disk.pgm")).unwrap();
    assert!(montage.starts_with(b"P5\n"));
}

#[test]
fn errors_are_single_line_and_machine_parsable() {
    let out = run(&[
        "eval", "--data", "/nonexistent-data", "--topology", "/nonexistent/topo",
        "--out", "/tmp/weakloc-err-out",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "one-line error, got {stderr:?}");
    assert!(lines[0].starts_with("error: "), "{stderr}");
}

#[test]
fn bad_pooling_flag_is_a_config_error() {
    let out = run(&["geometry", "--pooling", "softmax"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: config:"), "{stderr}");
}
