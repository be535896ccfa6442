use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use humanline_lab::eval::EvalReport;
use humanline_lab::theory::TheoryReport;

fn lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humanline-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const THREE_VARIANTS: &str = r#"
name = "three"
objective = "dpo"
variant = "offline"
seeds = [0, 1, 2, 3, 4]

[trainer]
steps = 30
batch_size = 8
collapse_window = 0

[trainer.optimizer]
lr = 0.1

[data]
sampler = "worse"

[eval]
contexts = 64

[[sweep]]
label = "offline"

[[sweep]]
label = "offline+humanline"
variant = "offline+humanline"
trainer.humanline = { mode = "clipping", k = 1 }

[[sweep]]
label = "online"
variant = "online"
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &THREE_VARIANTS.replace("variant = \"online\"", "variant = \"sideways\""));
    let o = lab(&["train", "--config", &bad], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));

    let o = lab(&["train"], dir.path());
    assert_eq!(code(&o), 2);

    let good = write_config(dir.path(), THREE_VARIANTS);
    let o = lab(&["train", "--config", &good, "--seed", "9"], dir.path());
    assert_eq!(code(&o), 2, "unlisted seed: {}", stderr(&o));

    // Nothing trained yet, so the checkpoints are missing.
    let o = lab(&["eval", "--config", &good], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn theory_suite_passes_and_the_corrupted_clamp_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["verify-theory", "--out", "ok"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = std::fs::read_to_string(dir.path().join("ok/theory-report.json")).unwrap();
    let report: TheoryReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.checks.len(), 8);
    assert_eq!(report.failures(), 0);

    let o = lab(&["verify-theory", "--out", "bad", "--corrupt-clamp"], dir.path());
    assert_eq!(code(&o), 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL rejection-limit-is-clipping"), "{stdout}");
    assert_eq!(stdout.matches("FAIL").count(), 1);
}

#[test]
fn reward_collapse_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), THREE_VARIANTS);
    let o = lab(&["generate-data", "--config", &cfg, "--seed", "0", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let corpus = String::from_utf8_lossy(&o.stdout).lines().next().unwrap().to_owned();

    // Swap every preference so training drives the true reward down.
    let swapped: String = std::fs::read_to_string(dir.path().join(&corpus))
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            let o = v.as_object_mut().unwrap();
            let (w, l) = (o["y_w"].clone(), o["y_l"].clone());
            o.insert("y_w".into(), l);
            o.insert("y_l".into(), w);
            let (rw, rl) = (o["r_w"].clone(), o["r_l"].clone());
            o.insert("r_w".into(), rl);
            o.insert("r_l".into(), rw);
            v.to_string() + "\n"
        })
        .collect();
    std::fs::write(dir.path().join("swapped.jsonl"), swapped).unwrap();
    let text = r#"
name = "collapse"
objective = "dpo"
variant = "offline"
seeds = [0]

[trainer]
steps = 200
batch_size = 4
collapse_window = 10

[trainer.optimizer]
lr = 0.2

[data]
corpus = "swapped.jsonl"
"#;
    let cfg = write_config(dir.path(), text);
    let o = lab(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("collapse"));
    // Every step before the aborting one is kept.
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics-offline-seed0.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 9);
}

#[test]
fn three_variants_by_five_seeds_give_fifteen_series_and_symmetric_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), THREE_VARIANTS);
    for cmd in ["generate-data", "train", "eval", "plot-data"] {
        let o = lab(&[cmd, "--config", &cfg], dir.path());
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let mut reader = csv::Reader::from_path(dir.path().join("out/plot-data.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["variant", "seed", "step", "metric", "value"]);
    let mut series = BTreeSet::new();
    let mut winrates = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        if &rec[3] == "mean_reward" {
            series.insert((rec[0].to_owned(), rec[1].to_owned()));
            assert!(!rec[2].is_empty());
        }
        if &rec[3] == "winrate" {
            winrates += 1;
            assert!(rec[2].is_empty());
        }
    }
    assert_eq!(series.len(), 15);
    assert_eq!(winrates, 15);

    for label in ["offline", "offline+humanline", "online"] {
        let text = std::fs::read_to_string(dir.path().join(format!("out/eval-{label}.json"))).unwrap();
        let report: EvalReport = serde_json::from_str(&text).unwrap();
        let xs: Vec<f64> = report.seeds.iter().map(|s| s.result.winrate).collect();
        assert_eq!(xs.len(), 5);
        assert!(xs.iter().all(|w| (0.0..=1.0).contains(w)));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((report.winrate.mean - mean).abs() < 1e-12);
        assert!((report.winrate.se.unwrap() - std / 5f64.sqrt()).abs() < 1e-12);
        assert!(report.winrate.mean > 0.5, "{label} {}", report.winrate.mean);

        // Swapping checkpoint and baseline mirrors every winrate.
        let o = lab(
            &[
                "eval",
                "--config",
                &cfg,
                "--out",
                "swapped",
                "--checkpoint",
                &format!("out/policy-init-{{label}}-seed{{seed}}.json"),
                "--baseline",
                &format!("out/policy-{{label}}-seed{{seed}}.json"),
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = std::fs::read_to_string(dir.path().join(format!("swapped/eval-{label}.json"))).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        for (a, b) in report.seeds.iter().zip(&back.seeds) {
            assert_eq!(a.result.winrate + b.result.winrate, 1.0);
        }
    }
}

#[test]
fn k_sweep_emits_five_histories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/k-sweep.toml");
    let cfg = cfg.to_string_lossy();
    let o = lab(&["train", "--config", &cfg, "--seed", "0", "--out", "k"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in [1, 2, 4, 8, 16] {
        let path = dir.path().join(format!("k/metrics-k{k}-seed0.jsonl"));
        let lines = std::fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, 200, "k{k}");
    }
}
