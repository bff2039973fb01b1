use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]

[data]
train = 200
val = 100
test = 400

[train]
epochs = 4
"#;

fn shiftkd(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_shiftkd"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bench_writes_every_split_and_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["bench", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let config = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(config.starts_with("# shiftkd experiment-config v1"));
    assert!(config.contains("seeds = [4]"));
    for f in ["train.csv", "val.csv", "val_restricted.csv", "test.csv"] {
        assert!(out.join("seed-4").join(f).is_file(), "{f}");
    }
}

#[test]
fn train_accepts_the_combined_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["train", "--loss", "erm+edrm", "--mix", "convex"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("loss erm+edrm")).count(), 2);
    let metrics = fs::read_to_string(dir.path().join("out/seed-1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# shiftkd group-metrics v1"));
    assert!(metrics.lines().any(|l| l.starts_with("worst_group,")));
}

#[test]
fn pipeline_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["pipeline", "--seed", "0", "--method", "latent-perturb", "--multiplicity", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("method latent-perturb m 2"));
    let seed_dir = dir.path().join("out/seed-0");
    let summary = fs::read_to_string(seed_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(2).unwrap().contains("latent-perturb,2,"));

    let ckpt = seed_dir.join("final_student.ckpt");
    let e = Command::new(env!("CARGO_BIN_EXE_shiftkd"))
        .args(["eval", "--seed", "0", "--config"])
        .arg(dir.path().join("small.toml"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(
        fs::read(seed_dir.join("final_metrics.csv")).unwrap(),
        fs::read(dir.path().join("eval/seed-0/eval_metrics.csv")).unwrap()
    );
}

#[test]
fn augment_reports_difficulty() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["augment", "--seed", "1", "--method", "student-adversarial"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("acc_s"));
    assert!(dir.path().join("out/seed-1/augmentation_batch.csv").is_file());
    assert!(dir.path().join("out/seed-1/difficulty.csv").is_file());
}

#[test]
fn sweep_prints_one_row_per_seed_and_multiplicity() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["sweep-multiplicity", "--multiplicities", "0,2", "--method", "noise-resample"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("# shiftkd multiplicity-sweep v1"));
    assert_eq!(text.lines().count(), 2 + 4);
}

#[test]
fn verify_theory_passes_on_the_constructed_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["verify-theory", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("bound holds; lemma points holding 3/3"));
    let report = fs::read_to_string(dir.path().join("out/seed-0/theory_report.txt")).unwrap();
    assert!(report.starts_with("# shiftkd theory-report v1"));
    assert!(report.contains("flag bound_holds true"));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = shiftkd(dir.path(), &["pipeline", "--method", "diffusion"]);
    assert!(!o.status.success());
    fs::write(dir.path().join("bad.toml"), "epochs = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_shiftkd"))
        .args(["bench", "--config"])
        .arg(dir.path().join("bad.toml"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}
