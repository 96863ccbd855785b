//! End-to-end checks of the command-line contract: artifact layout,
//! reproducibility, CSV shapes, and the 0/1/2 exit-code convention.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stacklab"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("STACKLAB_SEED")
        .output()
        .expect("spawn stacklab")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn dataset_build_is_reproducible_and_stats_reads_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        "dataset",
        "build",
        "--groups",
        "4B-2D-Uni",
        "--per-group",
        "10",
        "--seed",
        "5",
    ];
    let a = run(&[&args[..], &["--out", "a"]].concat(), dir);
    assert_code(&a, 0);
    let b = run(&[&args[..], &["--out", "b", "--jobs", "3"]].concat(), dir);
    assert_code(&b, 0);
    for sub in ["masks", "heat", "manifest.jsonl"] {
        let ta = read_tree(&dir.join("a"))
            .into_iter()
            .filter(|(p, _)| p.starts_with(sub));
        let tb = read_tree(&dir.join("b"))
            .into_iter()
            .filter(|(p, _)| p.starts_with(sub));
        assert!(ta.eq(tb), "artifact {sub} differs between reruns");
    }

    let stats = run(&["dataset", "stats", "--root", "a", "--out", "s"], dir);
    assert_code(&stats, 0);
    let text = String::from_utf8_lossy(&stats.stdout);
    assert!(text.contains("4B-2D-Uni,10,"), "stats row missing: {text}");
}

#[test]
fn bad_group_name_exits_2_and_lists_valid_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["dataset", "build", "--groups", "9B-2D-Uni", "--out", "x"],
        tmp.path(),
    );
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("4B-2D-Uni") && err.contains("14B-3D-NonUni"),
        "{err}"
    );
}

#[test]
fn train_then_eval_checkpoint_produces_rounded_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_code(
        &run(
            &[
                "dataset",
                "build",
                "--groups",
                "4B-2D-Uni",
                "--per-group",
                "12",
                "--out",
                "d",
            ],
            dir,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "train",
                "--root",
                "d",
                "--groups",
                "4B-2D-Uni",
                "--steps",
                "6",
                "--out",
                "t",
            ],
            dir,
        ),
        0,
    );
    assert!(dir.join("t/model.ckpt").is_file());
    assert!(dir.join("t/run.json").is_file());
    let eval = run(
        &[
            "eval",
            "--root",
            "d",
            "--checkpoint",
            "t/model.ckpt",
            "--groups",
            "4B-2D-Uni",
            "--out",
            "e",
        ],
        dir,
    );
    assert_code(&eval, 0);
    let csv = std::fs::read_to_string(dir.join("e/eval.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "group,n,accuracy_pct");
    assert_eq!(lines.len(), 3, "one group row plus the overall row: {csv}");
    for line in &lines[1..] {
        let acc = line.rsplit(',').next().unwrap();
        assert!(
            acc.contains('.'),
            "accuracy must carry one decimal place: {line}"
        );
    }
    assert!(lines[2].starts_with("all,"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_code(
        &run(
            &[
                "dataset",
                "build",
                "--groups",
                "4B-2D-Uni",
                "--per-group",
                "4",
                "--out",
                "d",
            ],
            dir,
        ),
        0,
    );
    let eval = run(
        &[
            "eval",
            "--root",
            "d",
            "--checkpoint",
            "ghost.ckpt",
            "--groups",
            "4B-2D-Uni",
            "--out",
            "e",
        ],
        dir,
    );
    assert_code(&eval, 2);
}

#[test]
fn cross_design_emits_exactly_two_directions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_code(
        &run(&["dataset", "build", "--per-group", "6", "--out", "d"], dir),
        0,
    );
    let eval = run(
        &[
            "eval", "--root", "d", "--design", "cross", "--steps", "4", "--out", "e",
        ],
        dir,
    );
    assert_code(&eval, 0);
    let csv = std::fs::read_to_string(dir.join("e/eval.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "direction,n,accuracy_pct");
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("simple_to_complex,"));
    assert!(lines[2].starts_with("complex_to_simple,"));
    assert!(dir.join("e/model-simple_to_complex.ckpt").is_file());
    assert!(dir.join("e/model-complex_to_simple.ckpt").is_file());
}

#[test]
fn seed_precedence_flag_beats_config_beats_env() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.json"), r#"{"seed": 11}"#).unwrap();
    assert_code(
        &run(
            &[
                "dataset",
                "build",
                "--groups",
                "4B-2D-Uni",
                "--per-group",
                "2",
                "--out",
                "d",
            ],
            dir,
        ),
        0,
    );
    // Env only.
    let a = bin()
        .args(["dataset", "stats", "--root", "d", "--out", "s1"])
        .current_dir(dir)
        .env("STACKLAB_SEED", "7")
        .output()
        .unwrap();
    assert_code(&a, 0);
    let echo = std::fs::read_to_string(dir.join("s1/run.json")).unwrap();
    assert!(echo.contains("\"seed\": 7"), "{echo}");
    // Config file beats env.
    let b = bin()
        .args([
            "dataset", "stats", "--root", "d", "--config", "cfg.json", "--out", "s2",
        ])
        .current_dir(dir)
        .env("STACKLAB_SEED", "7")
        .output()
        .unwrap();
    assert_code(&b, 0);
    let echo = std::fs::read_to_string(dir.join("s2/run.json")).unwrap();
    assert!(echo.contains("\"seed\": 11"), "{echo}");
    // Flag beats both.
    let c = bin()
        .args([
            "dataset", "stats", "--root", "d", "--config", "cfg.json", "--seed", "3", "--out", "s3",
        ])
        .current_dir(dir)
        .env("STACKLAB_SEED", "7")
        .output()
        .unwrap();
    assert_code(&c, 0);
    let echo = std::fs::read_to_string(dir.join("s3/run.json")).unwrap();
    assert!(echo.contains("\"seed\": 3"), "{echo}");
}
