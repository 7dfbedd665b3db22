use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mdcpc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdcpc"))
        .args(args)
        .arg("--run-root")
        .arg(root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(root: &Path, out: &Path, n: &str, seed: &str) {
    let o = mdcpc(
        root,
        &["synth", "--n", n, "--size", "32", "--seed", seed, "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_dir() {
            v.extend(sorted_files(&e.path()).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            v.push((name, std::fs::read(e.path()).unwrap()));
        }
    }
    v.sort();
    v
}

#[test]
fn help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&mdcpc(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&mdcpc(tmp.path(), &["pretrain", "--help"])), 0);
}

#[test]
fn missing_required_flag_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = mdcpc(tmp.path(), &["synth"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--n"));
}

#[test]
fn unknown_mask_value_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&mdcpc(tmp.path(), &["leakcheck", "--mask", "diagonal"])), 1);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(tmp.path(), &a, "6", "9");
    synth(tmp.path(), &b, "6", "9");
    synth(tmp.path(), &c, "6", "10");
    let fa = sorted_files(&a);
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".png")).count(), 12);
    assert_eq!(fa, sorted_files(&b));
    assert_ne!(fa, sorted_files(&c));
}

#[test]
fn synth_refuses_non_empty_directory_without_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    synth(tmp.path(), &out, "2", "0");
    let args = ["synth", "--n", "2", "--out", out.to_str().unwrap()];
    assert_eq!(code(&mdcpc(tmp.path(), &args)), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&mdcpc(tmp.path(), &forced)), 0);
}

#[test]
fn missing_dataset_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let gone = tmp.path().join("nowhere");
    let o = mdcpc(tmp.path(), &["pretrain", "--data", gone.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn leakcheck_passes_default_and_fails_unmasked_centre() {
    let tmp = TempDir::new().unwrap();
    let ok = mdcpc(tmp.path(), &["leakcheck", "--trials", "3"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).lines().last().unwrap().starts_with("PASS"));

    let bad = mdcpc(
        tmp.path(),
        &["leakcheck", "--trials", "3", "--directional", "single", "--mask-pattern", "all-b"],
    );
    assert_eq!(code(&bad), 3);
    let text = stdout(&bad);
    assert!(text.lines().last().unwrap().starts_with("FAIL"));
    assert!(text.contains("self-position leakage"), "{text}");
}

#[test]
fn plot_of_header_only_csv_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("empty.csv");
    std::fs::write(&csv, "epoch,split,metric,value\n").unwrap();
    let out = tmp.path().join("plots");
    let spec = format!("run={}", csv.display());
    let o = mdcpc(tmp.path(), &["plot", "--loss", &spec, "--out", out.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn plot_without_inputs_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&mdcpc(tmp.path(), &["plot"])), 1);
}

#[test]
fn sweep_missing_checkpoint_names_the_variant() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(tmp.path(), &data, "6", "0");
    let o = mdcpc(
        tmp.path(),
        &["sweep", "--data", data.to_str().unwrap(), "--variants", "single_infill", "--sizes", "4", "--seeds", "1"],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("single_infill"));
}

#[test]
fn pretrain_finetune_evaluate_round_trip_with_manifests() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let data = root.join("d");
    synth(root, &data, "8", "3");
    let d = data.to_str().unwrap();
    let pt = root.join("pt");
    let o = mdcpc(
        root,
        &[
            "pretrain", "--data", d, "--epochs", "1", "--batch", "4", "--negatives", "2", "--ar-blocks", "2",
            "--out", pt.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(pt.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,metric,value"));
    assert!(metrics.contains("0,valid,info_nce,"));

    let ckpt = pt.join("checkpoint.ckpt");
    let ft = root.join("ft");
    let o = mdcpc(
        root,
        &[
            "finetune", "--data", d, "--init", ckpt.to_str().unwrap(), "--subset", "6", "--epochs", "1",
            "--out", ft.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test accuracy"));

    let fck = ft.join("checkpoint.ckpt");
    let o = mdcpc(root, &["evaluate", "--data", d, "--checkpoint", fck.to_str().unwrap(), "--split", "valid"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("valid accuracy"));

    let log = std::fs::read_to_string(root.join("manifests.jsonl")).unwrap();
    let commands: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["command"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(commands, ["synth", "pretrain", "finetune", "evaluate"]);
    let last: serde_json::Value = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
    assert_eq!(last["status"], "ok");
    assert!(last["artifacts"].as_object().unwrap().values().all(|h| h.as_str().unwrap().len() == 64));
}

#[test]
fn config_file_with_unknown_key_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[pretrain]\nlearning_rate = 0.1\n").unwrap();
    let o = mdcpc(tmp.path(), &["leakcheck", "--trials", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
