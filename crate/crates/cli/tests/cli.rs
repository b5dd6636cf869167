use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn frs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frs")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in {out:?}, stderr {}", stderr(o)));
    PathBuf::from(line)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout {}\nstderr {}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn out_arg(dir: &Path) -> String {
    format!("--out={}", dir.display())
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let o = frs(&["count-params", "--varient=FR"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("varient"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"depht": 2}}"#).unwrap();
    let o = frs(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.depht"));
}

#[test]
fn ill_typed_value_is_a_validation_error() {
    let o = frs(&["count-params", "--depth=deep"]);
    assert_eq!(o.status.code(), Some(1));
    let o = frs(&["count-params", "--variant=G"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn count_params_reports_sharing_ratios() {
    for (v, ratio) in [("FRS", "1/32"), ("FR", "1/8"), ("FS", "1/4"), ("F", "1/1")] {
        let o = ok(frs(&["count-params", &format!("--variant={v}")]));
        let text = stdout(&o);
        assert!(text.contains(&format!("intermediate ratio {v}/F = {ratio}")), "{text}");
    }
    let o = ok(frs(&["count-params", "--variant=vanilla"]));
    assert!(stdout(&o).contains("vanilla,31037633,"));
}

#[test]
fn help_lists_keys_with_defaults() {
    let o = ok(frs(&["train", "--help"]));
    let text = stdout(&o);
    for key in ["model.variant", "\"FRS\"", "patch.size", "augment.rotation", "data.source", "lr"] {
        assert!(text.contains(key), "missing {key} in help");
    }
    let o = ok(frs(&["verify", "--help"]));
    assert!(stdout(&o).contains("n_rot"));
}

#[test]
fn fit_basis_round_trips_random_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(frs(&["fit-basis", &out_arg(tmp.path()), "--count=10"]));
    let csv = fs::read_to_string(run_dir(&o).join("fit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    for line in csv.lines().skip(1) {
        let err: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(err <= 1e-10);
    }
}

#[test]
fn fit_basis_reads_a_kernel_file() {
    let tmp = tempfile::tempdir().unwrap();
    let k = tmp.path().join("k.txt");
    let rows: Vec<String> = (0..4).map(|i| (0..4).map(|j| format!("{}", (i * 4 + j) as f64 / 10.0)).collect::<Vec<_>>().join(" ")).collect();
    fs::write(&k, rows.join("\n")).unwrap();
    let o = ok(frs(&["fit-basis", &out_arg(tmp.path()), "--p=4", &format!("--kernel={}", k.display())]));
    let coef = fs::read_to_string(run_dir(&o).join("coefficients.txt")).unwrap();
    assert_eq!(coef.lines().count(), 16);
}

#[test]
fn gen_bank_writes_a_record_and_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(frs(&["gen-bank", &out_arg(tmp.path()), "--n_rot=4", "--n_scale=2"]));
    let dir = run_dir(&o);
    let blob = fs::read(dir.join("bank.bin")).unwrap();
    assert_eq!(&blob[..4], b"FRSB");
    assert_eq!(fs::read_dir(dir.join("kernels")).unwrap().count(), 8);
    let o = ok(frs(&["gen-bank", &out_arg(tmp.path()), "--n_rot=4", "--n_scale=2", "--kind=group", "--seed=3"]));
    assert_eq!(fs::read_dir(run_dir(&o).join("kernels")).unwrap().count(), 8);
}

#[test]
fn verify_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["verify", "--size=32", "--seeds=2", "--n_rot=8", "--n_scale=2", "--sigma=2.0"];
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let mut a = args.to_vec();
        let out = out_arg(tmp.path());
        a.push(&out);
        let o = ok(frs(&a));
        csvs.push(fs::read_to_string(run_dir(&o).join("verify.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let mut lines = csvs[0].lines();
    assert_eq!(lines.next(), Some("layer,theta_hat,s_hat,interpolation,seed,error"));
    // 2 seeds x 5 warps x 3 layers
    assert_eq!(lines.count(), 30);
    for line in csvs[0].lines().filter(|l| l.starts_with("lifting") && l.contains("exact90")) {
        let err: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err < 1e-10, "{line}");
    }
}

#[test]
fn synth_train_eval_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());

    let o = ok(frs(&["synth-data", &out, "--data.count=3", "--data.size=32"]));
    let samples = run_dir(&o).join("samples");
    for sub in ["images", "labels", "fov"] {
        assert_eq!(fs::read_dir(samples.join(sub)).unwrap().count(), 3);
    }

    let train = [
        "train",
        &out,
        "--model.variant=FR",
        "--model.depth=2",
        "--model.base_channels=8",
        "--model.n_rot=4",
        "--epochs=2",
        "--patches_per_image=2",
        "--patch.size=32",
        "--patch.stride=16",
        "--augment_enabled=false",
        "--lr=1e-3",
        "--data.count=3",
        "--data.size=32",
    ];
    let mut losses = Vec::new();
    let mut checkpoint = PathBuf::new();
    for _ in 0..2 {
        let o = ok(frs(&train));
        let dir = run_dir(&o);
        losses.push(fs::read_to_string(dir.join("loss.csv")).unwrap());
        assert!(dir.join("timing.csv").exists());
        checkpoint = dir.join("checkpoints/final.bin");
        assert!(checkpoint.exists());
    }
    assert_eq!(losses[0], losses[1]);
    assert!(losses[0].starts_with("epoch,loss,steps\n"));

    let ck = format!("--checkpoint={}", checkpoint.display());
    let from_dir = format!("--data.path={}", samples.display());
    let eval = ["eval", &out, &ck, "--data.source=directory", &from_dir, "--patch.size=32", "--patch.stride=16"];
    let mut metrics = Vec::new();
    for _ in 0..2 {
        let o = ok(frs(&eval));
        let dir = run_dir(&o);
        let micro = fs::read_to_string(dir.join("metrics_micro.csv")).unwrap();
        assert!(dir.join("metrics_macro.csv").exists());
        assert!(dir.join("metrics_per_image.csv").exists());
        metrics.push(micro);
    }
    assert_eq!(metrics[0], metrics[1]);
    let mut lines = metrics[0].lines();
    assert_eq!(lines.next(), Some("dataset,model,Se,Sp,F1,Acc,AUC"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], ["synthetic", "FR"]);
    assert!(row[2..].iter().all(|v| *v == "NA" || v.split('.').nth(1).map(str::len) == Some(4)));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = frs(&["eval", &out_arg(tmp.path()), "--checkpoint=/nonexistent/model.bin"]);
    assert_eq!(o.status.code(), Some(2));
    let o = frs(&["eval", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_directory_is_named_by_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_dir(&ok(frs(&["fit-basis", &out_arg(tmp.path()), "--count=1"])));
    let b = run_dir(&ok(frs(&["fit-basis", &out_arg(tmp.path()), "--count=2"])));
    let prefix = |p: &Path| p.file_name().unwrap().to_str().unwrap()[..12].to_string();
    assert_ne!(prefix(&a), prefix(&b));
    assert!(prefix(&a).chars().all(|c| c.is_ascii_hexdigit()));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["count"], 1);
}
