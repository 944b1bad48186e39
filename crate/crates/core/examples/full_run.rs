//! Runs the full desk experiment once and prints the summary table.
//! Usage: `cargo run --release -p weakloc --example full_run -- [key value]...`

use weakloc::config::RunConfig;
use weakloc::experiment::run_full_experiment;

fn main() {
    let mut cfg = RunConfig::default();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let v = args.next().expect("value");
        cfg.set(&a, &v).expect("config");
    }
    let dir = std::env::temp_dir().join(format!("weakloc-calib-{}", std::process::id()));
    let t = std::time::Instant::now();
    let r = run_full_experiment(&cfg, &dir, None).unwrap();
    println!(
        "core {:.1}s, with tree+sweep {:.1}s (wall {:.1}s)",
        r.core_run_secs, r.elapsed_secs, t.elapsed().as_secs_f64()
    );
    println!("lse  proposal: cls {:.4} loc {:.4}", r.lse_proposal.cls.map, r.lse_proposal.loc.map);
    println!("mean proposal: cls {:.4} loc {:.4}", r.mean_proposal.cls.map, r.mean_proposal.loc.map);
    println!("cascade1:      cls {:.4} loc {:.4}", r.cascade1.cls.map, r.cascade1.loc.map);
    println!("cascade2:      cls {:.4} loc {:.4}", r.cascade2.cls.map, r.cascade2.loc.map);
    println!("tree:          cls {:.4} loc {:.4}", r.tree.cls.map, r.tree.loc.map);
    for row in &r.sweep {
        println!("sweep k={} props {:.1} cls {:.4} loc {:.4}", row.k_top, row.mean_proposals, row.cls_map, row.loc_map);
    }
    std::fs::remove_dir_all(&dir).ok();
}
