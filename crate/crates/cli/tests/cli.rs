//! End-to-end checks of the command-line surface: exit codes, determinism,
//! format contracts. Training itself is exercised by the core acceptance
//! suite; these tests stay at desk scale with tiny inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cloudseg::render::parse_ppm;

fn cloudseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn gen_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let res = cloudseg(&[
            "gen",
            "--days",
            "3",
            "--scale",
            "desk",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(dir_bytes(&a).len(), 4, "3 records plus manifest");
}

#[test]
fn gen_zero_days_leaves_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("corpus");
    let res = cloudseg(&["gen", "--days", "0", "--out", out.to_str().unwrap()]);
    assert_code(&res, 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# days = 0"));
    assert!(manifest.contains("corpus_cloud_fraction"));
}

#[test]
fn gen_manifest_reports_calibrated_cloud_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("corpus");
    let res = cloudseg(&[
        "gen", "--days", "30", "--seed", "7", "--out", out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    let line = manifest
        .lines()
        .find(|l| l.starts_with("# corpus_cloud_fraction"))
        .unwrap();
    let fraction: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!(
        (0.02..=0.12).contains(&fraction),
        "corpus cloud fraction {fraction} outside the calibration band"
    );
}

#[test]
fn bad_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("gen.conf");
    fs::write(&conf, "dayz = 3\n").unwrap();
    let res = cloudseg(&[
        "gen",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
    ]);
    assert_code(&res, 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown config key"));
}

#[test]
fn unknown_flag_is_an_error() {
    let res = cloudseg(&["gen", "--dayz", "3"]);
    assert_code(&res, 2);
}

#[test]
fn help_lists_every_subcommand() {
    let res = cloudseg(&["--help"]);
    assert_code(&res, 0);
    let text = String::from_utf8_lossy(&res.stdout);
    for cmd in ["gen", "assemble", "train", "eval", "predict", "render", "gradcheck"] {
        assert!(text.contains(cmd), "help missing {cmd}");
    }
    let res = cloudseg(&["train", "--help"]);
    let text = String::from_utf8_lossy(&res.stdout);
    for flag in ["--corpus", "--scale", "--seed", "--out", "--ablation", "--config"] {
        assert!(text.contains(flag), "train help missing {flag}");
    }
}

#[test]
fn assemble_writes_the_dataset_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let res = cloudseg(&[
        "gen", "--days", "80", "--seed", "7", "--out", corpus.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let manifest = tmp.path().join("datasets.txt");
    let res = cloudseg(&[
        "assemble",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let text = fs::read_to_string(&manifest).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 160 + 200 + 80 + 40);
    // `day_id,quarter,flipped,dataset,has_cloud`
    for line in &lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5, "bad manifest line {line}");
        assert!(fields[0].starts_with("day"));
        assert!(["classification", "noisy", "hand_labeled", "holdout"].contains(&fields[3]));
    }
}

#[test]
fn train_no_noisy_without_full_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let res = cloudseg(&[
        "train",
        "--corpus",
        tmp.path().join("corpus").to_str().unwrap(),
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
        "--ablation",
        "no_noisy",
    ]);
    assert_code(&res, 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("prerequisite"));
}

#[test]
fn render_roundtrips_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let res = cloudseg(&[
        "gen", "--days", "1", "--seed", "3", "--out", corpus.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let day = corpus.join("day0000.mplb");
    let out_a = tmp.path().join("render_a");
    let out_b = tmp.path().join("render_b");
    for out in [&out_a, &out_b] {
        let res = cloudseg(&[
            "render",
            "--day",
            day.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    assert_eq!(dir_bytes(&out_a), dir_bytes(&out_b));
    // Panels parse back with the day's exact pixel count (desk 67x344).
    for panel in ["backscatter.ppm", "ldr.ppm", "clean_mask.ppm", "noisy_mask.ppm"] {
        let (w, h, rgb) = parse_ppm(&out_a.join(panel)).unwrap();
        assert_eq!((w, h), (344, 67), "{panel}");
        assert_eq!(rgb.len(), 344 * 67 * 3);
    }
}

#[test]
fn render_rejects_shape_mismatch_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_code(
        &cloudseg(&["gen", "--days", "1", "--seed", "3", "--out", corpus.to_str().unwrap()]),
        0,
    );
    // A CSV backscatter/ldr pair of different shape than the --mask panel.
    let bs = tmp.path().join("bs.csv");
    let ldr = tmp.path().join("ldr.csv");
    fs::write(&bs, "1,2\n3,4\n").unwrap();
    fs::write(&ldr, "0,0\n0,0\n").unwrap();
    // Make a mask file from the generated day (67x344) to clash with 2x2.
    let mask_out = tmp.path().join("mask.mplb");
    let day = cloudseg::format::read_record(&corpus.join("day0000.mplb")).unwrap();
    cloudseg::format::write_mask(day.clean_mask.as_ref().unwrap(), &mask_out).unwrap();
    let res = cloudseg(&[
        "render",
        "--backscatter",
        bs.to_str().unwrap(),
        "--ldr",
        ldr.to_str().unwrap(),
        "--mask",
        mask_out.to_str().unwrap(),
        "--out",
        tmp.path().join("panels").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
}

#[test]
fn eval_prints_csv_rows_from_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("runs").join("full");
    fs::create_dir_all(&full).unwrap();
    fs::write(
        full.join("report_holdout.txt"),
        "10,2,3,85,0.833333,0.769231,0.800000,0.950000\n",
    )
    .unwrap();
    fs::write(
        full.join("baseline_report_holdout.txt"),
        "8,20,5,67,0.285714,0.615385,0.390244,0.750000\n",
    )
    .unwrap();
    let res = cloudseg(&[
        "eval",
        "--run",
        tmp.path().join("runs").to_str().unwrap(),
        "--split",
        "holdout",
    ]);
    assert_code(&res, 0);
    let text = String::from_utf8_lossy(&res.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,f1,precision,recall");
    assert!(lines.contains(&"baseline,0.390244,0.285714,0.615385"));
    assert!(lines.contains(&"full,0.800000,0.833333,0.769231"));
}

#[test]
fn predict_with_missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let res = cloudseg(&[
        "predict",
        "--checkpoint",
        tmp.path().join("nope.mplp").to_str().unwrap(),
        "--day",
        tmp.path().join("nope.mplb").to_str().unwrap(),
        "--out",
        tmp.path().join("mask.mplb").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
}

#[test]
fn gradcheck_smoke_passes() {
    let res = cloudseg(&["gradcheck", "--seeds", "2"]);
    assert_code(&res, 0);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("conv2d_valid"));
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}
