use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "n_speakers=8",
    "utts_per_speaker=6",
    "frames=20",
    "eval_speakers=4",
    "val_fraction=0.1",
];
const SMALL_MODEL: &[&str] = &[
    "state_dim=8",
    "encoder_width=16",
    "uncertainty_bottleneck=16",
    "generator_hidden=16",
    "n_components=4",
    "embed_dim=16",
    "batch_size=8",
];

fn recxi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recxi"))
        .args(args)
        .env("RECXI_THREADS", "1")
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
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate-data", "--out", path(dir)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    recxi(&args)
}

fn train(data: &Path, run: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", path(data), "--run", path(run)];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    recxi(&args)
}

#[test]
fn help_lists_keys_with_defaults() {
    let o = recxi(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for needle in ["n_components", "[default: 16]", "RECXI_THREADS", "generate-data", "export-embeddings"] {
        assert!(text.contains(needle), "help lacks `{needle}`:\n{text}");
    }
}

#[test]
fn usage_errors_exit_one_and_name_the_key() {
    assert_eq!(code(&recxi(&[])), 1);
    assert_eq!(code(&recxi(&["frobnicate"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = recxi(&["generate-data", "--out", path(&out), "margin=0.9"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("margin"), "{}", stderr(&o));

    let o = recxi(&["generate-data", "--out", path(&out), "bogus_key=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus_key"));

    let o = recxi(&["generate-data", "--out", path(&out), "epochs"]);
    assert_eq!(code(&o), 1);

    let o = Command::new(env!("CARGO_BIN_EXE_recxi"))
        .args(["verify", "--instances", "1", "--score-sets", "1"])
        .env("RECXI_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("nope"), &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn verify_reports_every_check() {
    let o = recxi(&["verify", "--instances", "10", "--score-sets", "50"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for suite in ["recursion/", "transition/", "losses/", "gradients/", "metrics/"] {
        assert!(text.contains(suite), "no `{suite}` checks in:\n{text}");
    }
    assert!(text.contains("max_error="));
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# tiny\nseed=3\nnoise_sigma=0.5\n").unwrap();
    let out = dir.path().join("d");
    let mut args = vec!["generate-data", "--config", path(&file), "--out", path(&out), "seed=4"];
    args.extend_from_slice(TINY);
    let o = recxi(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("\nseed=4\n"));
    assert!(text.contains("\nnoise_sigma=0.5\n"));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=4"));
}

#[test]
fn generate_data_is_idempotent_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&generate(&out, &[])), 0);
    let first = fs::read(out.join("manifest.txt")).unwrap();
    let first_utt = fs::read(out.join("utts/spk0000-u000.csv")).unwrap();

    let o = generate(&out, &[]);
    assert_eq!(code(&o), 1, "overwrite without --force must be refused");
    assert!(stderr(&o).contains("--force"));

    assert_eq!(code(&generate(&out, &["--force"])), 0);
    assert_eq!(fs::read(out.join("manifest.txt")).unwrap(), first);
    assert_eq!(fs::read(out.join("utts/spk0000-u000.csv")).unwrap(), first_utt);
}

#[test]
fn train_evaluate_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&generate(&data, &[])), 0);

    let o = train(&data, &run, &["epochs=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["last.ckpt", "best.ckpt", "metrics.csv", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(code(&train(&data, &run, &["epochs=2"])), 1, "run dir is guarded");

    let ckpt = run.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let evaluate = |extra: &[&str]| {
        let mut args = vec![
            "evaluate",
            "--data",
            path(&data),
            "--checkpoint",
            path(&ckpt),
            "--out",
            path(&eval_dir),
            "--representation",
            "rho",
            "n_target_trials=20",
            "n_nontarget_trials=20",
        ];
        args.extend_from_slice(extra);
        recxi(&args)
    };
    let o = evaluate(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("representation=rho"));
    let report = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    for key in ["eer=", "min_dcf=", "n_target=20", "n_nontarget=20"] {
        assert!(report.contains(key), "{report}");
    }
    let scores = fs::read_to_string(eval_dir.join("scores.txt")).unwrap();
    assert_eq!(scores.lines().count(), 40);
    assert!(scores.lines().all(|l| l.split(' ').count() == 3));

    assert_eq!(code(&evaluate(&[])), 1);
    assert_eq!(code(&evaluate(&["--force"])), 0);
    assert_eq!(fs::read_to_string(eval_dir.join("scores.txt")).unwrap(), scores);

    // A trial file given by key replaces sampling.
    let trials = eval_dir.join("trials.txt");
    let copy = dir.path().join("trials.txt");
    fs::copy(&trials, &copy).unwrap();
    let trial_key = format!("trials={}", path(&copy));
    assert_eq!(code(&evaluate(&["--force", &trial_key])), 0);
    assert_eq!(fs::read_to_string(eval_dir.join("scores.txt")).unwrap(), scores);

    let csv = dir.path().join("emb.csv");
    let o = recxi(&[
        "export-embeddings",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&csv),
        "--representation",
        "phi",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("utt_id,v0,v1"));
    let width = header.split(',').count();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 6, "one row per test-split utterance");
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), width);
        assert!(f[1..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&generate(&data, &[])), 0);

    let full = dir.path().join("full");
    assert_eq!(code(&train(&data, &full, &["epochs=3"])), 0);

    let split = dir.path().join("split");
    assert_eq!(code(&train(&data, &split, &["epochs=1"])), 0);
    let o = train(&data, &split, &["epochs=3", "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(split.join("metrics.csv")).unwrap()
    );
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(split.join("last.ckpt")).unwrap());

    let o = train(&data, &split, &["epochs=3", "lr_max=0.1", "--resume"]);
    assert_eq!(code(&o), 3, "resuming with a different setup must fail");
}
