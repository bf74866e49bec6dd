//! End-to-end acceptance: the phantom → train → eval overfit pipeline must
//! reach its quality bar (median over 3 seeds) inside the wall-time budget,
//! and repeating it with identical seeds must reproduce the checkpoint
//! digest and eval CSV byte-for-byte.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use sha2::{Digest, Sha256};

fn vgdm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vgdm"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn vgdm");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    let mut h = Sha256::new();
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const TRAIN_STEPS: usize = 1500;

fn write_train_config(path: &Path, seed: u64) {
    let text = format!(
        "# overfit acceptance run\n\
         steps={TRAIN_STEPS}\n\
         batch_size=4\n\
         learning_rate=0.001\n\
         timesteps=50\n\
         beta_start=0.002\n\
         beta_end=0.4\n\
         depth=2\n\
         embed_dim=64\n\
         log_every=250\n\
         seed={seed}\n"
    );
    std::fs::write(path, text).unwrap();
}

struct PipelineResult {
    mean_dice: f64,
    hd95_defined: usize,
    n_samples: usize,
    checkpoint_digest: String,
    report_csv: String,
}

fn run_pipeline(root: &Path, seed: u64) -> PipelineResult {
    let data = root.join(format!("data_{seed}"));
    let cfg = root.join(format!("train_{seed}.cfg"));
    let ckpt = root.join(format!("model_{seed}.vgdm"));
    let report = root.join(format!("report_{seed}.csv"));

    run_ok(
        vgdm()
            .args(["phantom", "--n", "8", "--size", "32"])
            .args(["--seed", &seed.to_string()])
            .arg("--out")
            .arg(&data),
    );

    write_train_config(&cfg, seed);
    run_ok(
        vgdm()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&ckpt),
    );

    run_ok(
        vgdm()
            .arg("eval")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .arg("--report")
            .arg(&report)
            .args(["--seed", &seed.to_string()]),
    );

    let report_csv = std::fs::read_to_string(&report).unwrap();
    let rows = vgdm_core::metrics::parse_eval_csv(&report_csv).unwrap();
    let (agg, samples): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.id == "aggregate");
    assert_eq!(agg.len(), 1);
    PipelineResult {
        mean_dice: agg[0].dice,
        hd95_defined: samples.iter().filter(|r| r.hd95.is_some()).count(),
        n_samples: samples.len(),
        checkpoint_digest: sha256_file(&ckpt),
        report_csv,
    }
}

#[test]
fn end_to_end_overfit_and_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().into();

    let seeds = [1u64, 2, 3];
    let mut results: Vec<PipelineResult> = seeds.iter().map(|&s| run_pipeline(&root, s)).collect();

    for (seed, r) in seeds.iter().zip(results.iter()) {
        println!(
            "seed {seed}: mean dice {:.4}, hd95 defined on {}/{}",
            r.mean_dice, r.hd95_defined, r.n_samples
        );
        assert_eq!(r.n_samples, 8);
    }

    let mut dices: Vec<f64> = results.iter().map(|r| r.mean_dice).collect();
    dices.sort_by(f64::total_cmp);
    let median_dice = dices[1];
    let mut defined: Vec<usize> = results.iter().map(|r| r.hd95_defined).collect();
    defined.sort_unstable();
    let median_defined = defined[1];

    assert!(
        median_dice >= 0.90,
        "median mean-dice over 3 seeds = {median_dice:.4}, need >= 0.90"
    );
    assert!(
        median_defined >= 6,
        "median defined-hd95 count = {median_defined}, need >= 6/8"
    );

    // Determinism: repeat seed 1's pipeline in a fresh directory.
    let rerun_root = root.join("rerun");
    std::fs::create_dir_all(&rerun_root).unwrap();
    let repeat = run_pipeline(&rerun_root, 1);
    let first = results.remove(0);
    assert_eq!(
        repeat.checkpoint_digest, first.checkpoint_digest,
        "checkpoint digest changed across identical runs"
    );
    assert_eq!(
        repeat.report_csv, first.report_csv,
        "eval CSV changed across identical runs"
    );

    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "ACCEPTANCE PASS: end-to-end overfit, median dice {median_dice:.4}, \
         hd95 defined {median_defined}/8 ({elapsed:.0}s, budget 900s)"
    );
    println!("ACCEPTANCE PASS: pipeline determinism (checkpoint digest and eval CSV identical)");
    assert!(elapsed < 900.0, "pipeline took {elapsed:.0}s, budget 900s");
}
