use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ae_lab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ae-lab"));
    cmd.env_remove("AE_LAB_DATA").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    ae_lab().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--model", "conv", "--data", "x", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--model", "mlp", "--data", "x"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--model", "conv"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = run(&["prepare", "--data", s(&missing), "--out", s(&dir.path().join("split.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    assert!(!dir.path().join("split.txt").exists());

    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--classes", "2", "--per-class", "3", "--size", "8"]);
    let out = run(&["train", "--model", "ff", "--data", s(&data), "--epochs", "0", "--size", "8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn desk_pipeline_from_synth_to_mos_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--classes", "3", "--per-class", "5", "--size", "16", "--seed", "2"]);
    let split = root.join("split.txt");
    let summary = ok(&["prepare", "--data", s(&data), "--out", s(&split), "--seed", "3"]);
    assert!(summary.contains("12 train, 3 val"), "{summary}");

    let mut runs = Vec::new();
    for (model, epochs) in [("ff", "2"), ("conv", "10"), ("diff", "2")] {
        let out = root.join("runs").join(model);
        ok(&[
            "train", "--model", model, "--data", s(&data), "--split", s(&split), "--size", "16", "--epochs", epochs,
            "--batch-size", "4", "--seed", "7", "--out", s(&out),
        ]);
        assert!(out.join("model.aec").exists());
        let history = fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 1 + epochs.parse::<usize>().unwrap());
        runs.push(out);
    }

    let eval_dir = root.join("eval");
    let mut args = vec!["eval", "--data", s(&data), "--split", s(&split), "--out", s(&eval_dir)];
    for r in &runs {
        args.extend(["--checkpoint", s(r)]);
    }
    let csv = ok(&args);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "model,n,mean_mse");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("feedforward,3,") && rows[2].starts_with("convolutional,3,"));
    assert_eq!(fs::read_to_string(eval_dir.join("eval.csv")).unwrap(), csv);
    assert!(eval_dir.join("eval_per_class.csv").exists());

    let export = root.join("export");
    let mut args = vec!["reconstruct", "--data", s(&data), "--split", s(&split), "--count", "2", "--out", s(&export)];
    for r in &runs {
        args.extend(["--checkpoint", s(r)]);
    }
    ok(&args);
    let grid = image::open(export.join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (4 * 16 + 3 * 2, 2 * 16 + 2));
    let names: Vec<String> =
        fs::read_dir(export.join("img")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 8);
    for n in &names {
        for id in ["ff", "conv", "diff", "feedforward", "convolutional", "diffusion"] {
            assert!(!n.contains(id), "{n}");
        }
    }

    let table = ok(&["mos-report", "--export", s(&export)]);
    assert_eq!(table, "model,mos,count,r1,r2,r3,r4,r5\n");
}

#[test]
fn reruns_with_the_same_seed_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(&d.join("data")), "--classes", "2", "--per-class", "4", "--size", "8", "--seed", "5"]);
    }
    let data = a.join("data");
    for d in [&a, &b] {
        ok(&[
            "train", "--model", "diff", "--data", s(&data), "--size", "8", "--epochs", "2", "--seed", "1", "--out",
            s(&d.join("run")),
        ]);
    }
    for f in ["data/class_01/img_0003.png", "run/model.aec", "run/history.csv", "run/split.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_overrides_flags_and_env_supplies_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--classes", "2", "--per-class", "4", "--size", "8"]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# experiment\nepochs = 3\nsize=8\n").unwrap();
    let out = dir.path().join("run");
    let status = ae_lab()
        .env("AE_LAB_DATA", &data)
        .args(["train", "--model", "conv", "--epochs", "1", "--out", s(&out), "--config", s(&cfg)])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 4);

    fs::write(&cfg, "epochs\n").unwrap();
    assert_eq!(run(&["train", "--model", "conv", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn rate_serve_answers_the_client() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--classes", "2", "--per-class", "3", "--size", "8"]);
    let run_dir = root.join("run");
    ok(&["train", "--model", "conv", "--data", s(&data), "--size", "8", "--epochs", "1", "--out", s(&run_dir)]);
    let export = root.join("export");
    ok(&["reconstruct", "--data", s(&data), "--checkpoint", s(&run_dir), "--out", s(&export)]);

    let mut server = ae_lab()
        .args(["rate-serve", "--export", s(&export), "--port", "0", "--items", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");

    let table = ok(&["mos-report", "--server", &url]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(table, "model,mos,count,r1,r2,r3,r4,r5\n");
}
