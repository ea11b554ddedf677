use std::path::Path;
use std::process::{Command, Output};

fn workbench(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnnt-workbench"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[experiment]
name = "cli"
seed = 3

[task]
train = 12
dev = 3
test = 3
length = [2, 4]

[model]
joints = ["additive"]
encoder_layers = 1
encoder_cells = 6
prediction_embed = 4
prediction_cells = 6
joint_dim = 6

[train]
epochs = 1

[train.schedule]
kind = "one_cycle"
start = 1e-4
peak = 1e-3
warmup_epochs = 0.5
total_epochs = 1.0

[decode]
beam_width = 2
n_best = 2
"#;

#[test]
fn config_presets_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["reference", "fusion", "sweep"] {
        let out = workbench(dir.path(), &["config", preset]);
        assert!(out.status.success());
        let path = dir.path().join(format!("{preset}.toml"));
        std::fs::write(&path, stdout(&out)).unwrap();
        let check = workbench(&dir.path().join("x"), &["--config", path.to_str().unwrap(), "config"]);
        assert!(check.status.success());
    }
}

#[test]
fn staged_run_scores_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");

    let gen = workbench(&run, &["--config", cfg.to_str().unwrap(), "generate"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(run.join("config.toml").exists());
    // Later stages pick up the stored config.
    for stage in ["train", "decode", "rescore", "score", "verify"] {
        let out = workbench(&run, &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = workbench(&run, &["report"]);
    assert!(stdout(&report).contains("additive"));
    let json = workbench(&run, &["report", "--json"]);
    let value: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(value["name"], "cli");
    assert_eq!(value["seed"], 3);

    let nbest = run.join("nbest/additive.no_lm.test.tsv");
    let refs = run.join("data/test.txt");
    let scored = workbench(&run, &["score", "--nbest", nbest.to_str().unwrap(), "--reference", refs.to_str().unwrap()]);
    assert!(stdout(&scored).starts_with("WER "), "{}", stdout(&scored));

    // Edited hypotheses no longer reproduce the report.
    let body = std::fs::read_to_string(&nbest).unwrap();
    let tampered: Vec<String> = body
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 1 {
                let mut f: Vec<&str> = l.split('\t').collect();
                f[2] = "aaa_b_c_d_e";
                f.join("\t")
            } else {
                l.to_string()
            }
        })
        .collect();
    std::fs::write(&nbest, tampered.join("\n") + "\n").unwrap();
    assert_eq!(workbench(&run, &["verify"]).status.code(), Some(1));
}

#[test]
fn validation_and_runtime_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nno_such_key = 1\n").unwrap();
    let out = workbench(&dir.path().join("a"), &["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(1));

    // Training past the schedule end fails at run time.
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY.replace("epochs = 1\n", "epochs = 2\n")).unwrap();
    let out = workbench(&dir.path().join("b"), &["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage train failed"));

    // Decoding before anything was trained is a runtime failure too.
    let out = workbench(&dir.path().join("c"), &["decode"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (run, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let out = workbench(run, &["--config", cfg.to_str().unwrap(), "--seed", seed, "generate"]);
        assert!(out.status.success());
    }
    let feats = |p: &Path| std::fs::read(p.join("data/train.feats")).unwrap();
    assert_eq!(feats(&a), feats(&b));
    assert_ne!(feats(&a), feats(&c));
    assert!(std::fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 5"));
}
