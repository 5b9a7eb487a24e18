//! Drives the compiled binary the way a user would: every subcommand, the
//! documented exit codes (0 success, 1 runtime failure, 2 usage error), and a
//! tiny synth -> pretrain -> infer round trip.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckan-sr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("process not killed by signal")
}

/// Parses `P6\n{w} {h}\n255\n` and returns (height, width).
fn ppm_dims(path: &Path) -> (usize, usize) {
    let bytes = std::fs::read(path).expect("readable ppm");
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).into_owned();
    let mut words = header.split_ascii_whitespace();
    assert_eq!(words.next(), Some("P6"), "{}: not a raw ppm", path.display());
    let w: usize = words.next().unwrap().parse().unwrap();
    let h: usize = words.next().unwrap().parse().unwrap();
    (h, w)
}

fn synth(dir: &Path, out: &str, n: usize, size: usize, seed: u64) {
    let o = run_in(
        dir,
        &[
            "synth",
            "--n",
            &n.to_string(),
            "--size",
            &size.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            out,
        ],
    );
    assert_eq!(code(&o), 0, "synth failed: {}", stderr(&o));
}

#[test]
fn synth_writes_manifest_and_reruns_byte_identical() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a", 3, 24, 11);
    synth(tmp.path(), "b", 3, 24, 11);

    let manifest = tmp.path().join("a/manifest.txt");
    assert!(manifest.is_file());
    let listed = std::fs::read_to_string(&manifest).unwrap();
    for i in 0..3 {
        let name = format!("synth-{i:03}.ppm");
        assert!(listed.contains(&name), "manifest misses {name}");
        let a = std::fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        assert_eq!(ppm_dims(&tmp.path().join("a").join(&name)), (24, 24));
    }
}

#[test]
fn degrade_downscales_and_rejects_indivisible_sizes() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 2, 32, 4);
    let o = run_in(
        tmp.path(),
        &["degrade", "--manifest", "hr/manifest.txt", "--out", "lr", "--scale", "4"],
    );
    assert_eq!(code(&o), 0, "degrade failed: {}", stderr(&o));
    assert_eq!(ppm_dims(&tmp.path().join("lr/synth-000-x4.ppm")), (8, 8));
    let lr_manifest = std::fs::read_to_string(tmp.path().join("lr/manifest.txt")).unwrap();
    assert!(lr_manifest.contains('\t'), "lr manifest should pair hr and lr paths");

    synth(tmp.path(), "odd", 1, 33, 4);
    let o = run_in(
        tmp.path(),
        &["degrade", "--manifest", "odd/manifest.txt", "--out", "lr2", "--scale", "4"],
    );
    assert_eq!(code(&o), 2, "indivisible size must be a usage error");
    assert!(stderr(&o).contains("not divisible"), "stderr: {}", stderr(&o));
}

#[test]
fn selftest_filter_runs_named_checks() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(tmp.path(), &["selftest", "--filter", "metric"]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS metric-psnr"), "stdout: {out}");
    assert!(out.contains("PASS metric-ssim"), "stdout: {out}");
    assert!(out.contains("2/2 checks passed"), "stdout: {out}");
}

#[test]
fn selftest_break_fold_is_caught() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &["selftest", "--filter", "conv-equivalence", "--break-fold"],
    );
    assert_eq!(code(&o), 1, "sabotaged fold must fail the run");
    assert!(stdout(&o).contains("FAIL conv-equivalence"), "stdout: {}", stdout(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 1, 16, 2);
    let o = run_in(
        tmp.path(),
        &[
            "pretrain",
            "--manifest",
            "hr/manifest.txt",
            "--val-manifest",
            "hr/manifest.txt",
            "--out",
            "run",
            "--set",
            "bogus=1",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "stderr: {}", stderr(&o));
}

#[test]
fn gan_needs_a_source_checkpoint() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 1, 16, 2);
    let o = run_in(
        tmp.path(),
        &[
            "gan",
            "--manifest",
            "hr/manifest.txt",
            "--val-manifest",
            "hr/manifest.txt",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("pretrained checkpoint"),
        "stderr: {}",
        stderr(&o)
    );
}

#[test]
fn bench_prints_fit_and_passes() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "bench", "--kernels", "3", "--channels", "4", "--size", "16", "--chunks", "1,8,64",
        ],
    );
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("R^2 ="), "stdout: {out}");
    assert!(out.contains("| yes |"), "every row should match the cost model: {out}");
}

#[test]
fn infer_with_missing_checkpoint_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 1, 16, 2);
    let o = run_in(
        tmp.path(),
        &[
            "infer",
            "--ckpt",
            "nope.ckpt",
            "--input",
            "hr/synth-000.ppm",
            "--out",
            "sr.ppm",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_direct_mode_on_identical_pairs_reports_infinite_psnr() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 2, 16, 6);
    let m = "# pairs\nhr/synth-000.ppm\thr/synth-000.ppm\nhr/synth-001.ppm\thr/synth-001.ppm\n";
    std::fs::write(tmp.path().join("pairs.txt"), m).unwrap();
    let o = run_in(tmp.path(), &["eval", "--manifest", "pairs.txt"]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("inf"), "identical pairs should hit infinite psnr: {out}");
    assert!(out.contains("| MEAN |"), "stdout: {out}");
}

#[test]
fn pretrain_then_infer_round_trip() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "hr", 2, 16, 9);
    let o = run_in(
        tmp.path(),
        &[
            "pretrain",
            "--manifest",
            "hr/manifest.txt",
            "--val-manifest",
            "hr/manifest.txt",
            "--out",
            "run",
            "--seed",
            "3",
            "--set",
            "epochs=1",
            "--set",
            "patches_per_epoch=2",
            "--set",
            "patch_size=8",
            "--set",
            "gen.base_channels=4",
            "--set",
            "gen.num_residual_blocks=1",
            "--set",
            "gen.upscale_factor=2",
            "--set",
            "gen.ckan_blocks=0",
        ],
    );
    assert_eq!(code(&o), 0, "pretrain failed: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("config: seed = 3"), "stdout: {out}");
    assert!(out.contains("final validation"), "stdout: {out}");

    let log = std::fs::read_to_string(tmp.path().join("run/pretrain.log.jsonl")).unwrap();
    let first = log.lines().next().expect("log has records");
    assert!(first.starts_with("{\"stage\":\"pretrain\""), "record: {first}");
    assert!(tmp.path().join("run/latest.ckpt").is_file());
    assert!(tmp.path().join("run/best.ckpt").is_file());

    let o = run_in(
        tmp.path(),
        &["degrade", "--manifest", "hr/manifest.txt", "--out", "lr", "--scale", "2"],
    );
    assert_eq!(code(&o), 0, "degrade failed: {}", stderr(&o));
    let o = run_in(
        tmp.path(),
        &[
            "infer",
            "--ckpt",
            "run/best.ckpt",
            "--input",
            "lr/synth-000-x2.ppm",
            "--out",
            "out/sr.ppm",
            "--baseline",
        ],
    );
    assert_eq!(code(&o), 0, "infer failed: {}", stderr(&o));
    assert_eq!(ppm_dims(&tmp.path().join("out/sr.ppm")), (16, 16));
    assert_eq!(ppm_dims(&tmp.path().join("out/sr.baseline.ppm")), (16, 16));
}
