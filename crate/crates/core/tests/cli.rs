use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use teachsal::pipeline::{load_summary, CohortResult};

const DATA_SPEC: &str = r#"
image_size = [24, 24]
num_per_split = [10, 10, 20, 10]
spurious_correlation_train = 0.95
noise_std = 0.1
seed = 3

[causal_patch]
region = { row = 2, col = 2, height = 7, width = 7 }
textures = [
    { orientation = "horizontal", period = 2, amplitude = 0.12 },
    { orientation = "vertical", period = 2, amplitude = 0.12 },
]

[spurious_cue]
region = { row = 14, col = 14, height = 7, width = 7 }
levels = [-0.15, 0.15]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_teachsal"));
    c.env_remove("TEACHSAL_OUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).args(["--log", "warn"]).output().unwrap()
}

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs/smoke.toml")
        .to_string_lossy()
        .into_owned()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("spec.toml");
    std::fs::write(&cfg, DATA_SPEC).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "png")));
    for f in files.iter().filter(|f| !f.ends_with("run_manifest.json")) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let ma: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["config_sha256"].as_str().unwrap().len(), 64);

    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(!o.status.success(), "non-empty output dir without --force");
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--force"]);
    assert!(o.status.success());
}

#[test]
fn gen_data_overlap_names_both_regions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("spec.toml");
    std::fs::write(&cfg, DATA_SPEC.replace("row = 14, col = 14", "row = 5, col = 5")).unwrap();
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("causal_patch.region") && err.contains("spurious_cue.region"), "{err}");
}

#[test]
fn out_root_env_supplies_default_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("spec.toml");
    std::fs::write(&cfg, DATA_SPEC).unwrap();
    let o = bin()
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("TEACHSAL_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("data/run_manifest.json").exists());
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn report_requires_finished_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!run(&["report", "--dir", tmp.path().join("missing").to_str().unwrap()]).status.success());
    assert!(!run(&["report", "--dir", tmp.path().to_str().unwrap()]).status.success());
}

#[test]
fn full_run_then_report_regenerates_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o = run(&["run-experiment", "--config", &smoke(), "--out", out.to_str().unwrap(), "--condition", "full"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = load_summary(&out).unwrap();
    let conditions: Vec<&str> = summary.conditions.iter().map(|c| c.condition.as_str()).collect();
    assert_eq!(conditions, ["teacher", "baseline1", "baseline2", "student"]);
    let hygiene: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report/hygiene.json")).unwrap()).unwrap();
    assert_eq!(hygiene["eais_ids_in_loaders"].as_array().unwrap().len(), 0);

    let report = out.join("report");
    let before: Vec<(PathBuf, Vec<u8>)> = files_under(&report)
        .into_iter()
        .filter(|f| !f.ends_with("hygiene.json"))
        .map(|f| (f.clone(), std::fs::read(report.join(&f)).unwrap()))
        .collect();
    std::fs::remove_file(report.join("results.csv")).unwrap();
    assert!(run(&["report", "--dir", out.to_str().unwrap()]).status.success());
    for (f, bytes) in &before {
        assert_eq!(&std::fs::read(report.join(f)).unwrap(), bytes, "{}", f.display());
    }

    let j = tmp.path().join("json_only");
    std::fs::create_dir_all(&j).unwrap();
    for f in ["conditions.json", "config.toml"] {
        std::fs::copy(out.join(f), j.join(f)).unwrap();
    }
    copy_dir(&out.join("cohorts"), &j.join("cohorts"));
    assert!(run(&["report", "--dir", j.to_str().unwrap(), "--format", "json-only"]).status.success());
    assert_eq!(files_under(&j.join("report")), [PathBuf::from("summary.json")]);
}

fn copy_dir(from: &Path, to: &Path) {
    for f in files_under(from) {
        let dst = to.join(&f);
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(from.join(&f), dst).unwrap();
    }
}

fn cohort(dir: &Path, name: &str) -> CohortResult {
    serde_json::from_slice(&std::fs::read(dir.join("cohorts").join(name).join("cohort.json")).unwrap()).unwrap()
}

#[test]
fn baseline2_condition_trains_only_without_salience() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o = run(&[
        "run-experiment",
        "--config",
        &smoke(),
        "--out",
        out.to_str().unwrap(),
        "--condition",
        "baseline2",
        "--seed-list",
        "4,9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = std::fs::read_dir(out.join("cohorts"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["baseline2_plain"]);
    assert!(!out.join("archives").exists());
    let c = cohort(&out, "baseline2_plain");
    assert_eq!(c.salience_reads, 0);
    assert_eq!(c.train_size, 24 + 48);
    assert_eq!(c.records.iter().map(|r| r.seed).collect::<Vec<_>>(), [4, 9]);
}

#[test]
fn resume_reuses_finished_cohorts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o_str = out.to_str().unwrap();
    let cfg = smoke();
    assert!(run(&["run-experiment", "--config", &cfg, "--out", o_str, "--condition", "teacher"]).status.success());
    let record = out.join("cohorts/teacher_plain_cyborg_a0.5/seed_0/record.json");
    let stamp = std::fs::metadata(&record).unwrap().modified().unwrap();
    let ckpt = std::fs::read(out.join("cohorts/teacher_plain_cyborg_a0.5/seed_0/best.ckpt")).unwrap();

    // A different config cannot resume into the same directory.
    let o = run(&["run-experiment", "--config", &cfg, "--out", o_str, "--condition", "student", "--resume", "--alpha", "0.5"]);
    assert!(!o.status.success());

    let o = run(&["run-experiment", "--config", &cfg, "--out", o_str, "--condition", "student", "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::metadata(&record).unwrap().modified().unwrap(), stamp);
    assert_eq!(std::fs::read(out.join("cohorts/teacher_plain_cyborg_a0.5/seed_0/best.ckpt")).unwrap(), ckpt);
    let student = std::fs::read_dir(out.join("cohorts"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .find(|n| n.starts_with("student_"))
        .unwrap();
    let c = cohort(&out, &student);
    assert_eq!(c.salience_reads, 2 * 48);
}

#[test]
fn bad_flags_fail() {
    let o = run(&["run-experiment", "--config", &smoke(), "--out", "/nonexistent/x", "--condition", "bogus"]);
    assert!(!o.status.success());
    let o = run(&["run-experiment", "--config", "/nonexistent.toml", "--out", "/tmp/x", "--condition", "full"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
