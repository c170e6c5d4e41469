use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
[data]
train_subjects = 1
test_subjects = 1
sequences = 1
frames = 3
image_size = 32

[train]
iterations = 3
checkpoint_every = 2
widths = [16, 16, 16, 16, 8, 8]
head_width = 8

[enroll]
iterations = 2
"#;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_splathead")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "splathead {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    fs::write(&config, CONFIG).unwrap();
    let cfg = s(&config);
    let data = root.join("data");
    run(&["gen-data", "--config", cfg, "--seed", "3", "--deterministic", "--out", s(&data)]);
    assert!(data.join("manifest.json").exists() && data.join("run_manifest.json").exists());

    let train = root.join("train");
    run(&["train", "--config", cfg, "--seed", "1", "--deterministic", "--data", s(&data), "--out", s(&train)]);
    let ckpt = train.join("checkpoints/latest.safetensors");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(train.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let enroll = root.join("enroll");
    run(&["enroll", "--config", cfg, "--seed", "1", "--deterministic", "--data", s(&data), "--prior", s(&ckpt), "--out", s(&enroll)]);
    let enrollment = enroll.join("enrollment.safetensors");
    assert!(enrollment.exists());
    assert_eq!(fs::read_to_string(enroll.join("enroll_log.jsonl")).unwrap().lines().count(), 2);

    let drive = root.join("drive");
    let drive_args = ["drive", "--config", cfg, "--seed", "1", "--deterministic", "--data", s(&data), "--prior", s(&ckpt)];
    let mut args = drive_args.to_vec();
    args.extend(["--enrollment", s(&enrollment), "--out", s(&drive)]);
    run(&args);
    let frames = drive.join("frames");
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 3);

    let render = root.join("render");
    let mut args = vec!["render", "--config", cfg, "--seed", "1", "--deterministic", "--data", s(&data)];
    args.extend(["--prior", s(&ckpt), "--enrollment", s(&enrollment), "--frame", "1", "--out", s(&render)]);
    run(&args);
    let gaussians = render.join("gaussians.safetensors");
    assert!(render.join("render.png").exists() && gaussians.exists());
    // the exported set renders to the same image
    let again = root.join("render2");
    run(&["render", "--config", cfg, "--seed", "1", "--deterministic", "--data", s(&data), "--gaussians", s(&gaussians), "--out", s(&again)]);
    assert_eq!(fs::read(render.join("render.png")).unwrap(), fs::read(again.join("render.png")).unwrap());

    let report = root.join("report");
    let gt = data.join("subjects/s001/seq0/cam0");
    let table = run(&[
        "eval", "--config", cfg, "--seed", "1", "--deterministic", "--pred", s(&frames), "--gt", s(&gt), "--mask", "head",
        "--name", "tiny", "--out", s(&report),
    ]);
    assert!(table.contains("| tiny"), "{table}");
    let jsonl = fs::read_to_string(report.join("report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1 + 3 + 1);
    assert!(report.join("run_manifest.json").exists());
}

#[test]
fn deterministic_training_logs_match() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    run(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = root.join(n);
            run(&["train", "--config", s(&config), "--seed", "9", "--deterministic", "--data", s(&data), "--out", s(&out)]);
            fs::read_to_string(out.join("train_log.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train]\nlearning_rate = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_splathead"))
        .args(["gen-data", "--config", s(&config), "--out", s(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    fs::write(&config, "[trian]\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_splathead"))
        .args(["gen-data", "--config", s(&config), "--out", s(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
