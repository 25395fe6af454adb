//! End-to-end runs of the command-line entry point on a small synthetic set.

use std::path::{Path, PathBuf};

fn run(args: &[&str]) -> i32 {
    let argv = std::iter::once("gazekit").chain(args.iter().copied()).map(String::from);
    gazekit::cli::main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn find(dir: &Path, prefix: &str, ext: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let n = p.file_name().unwrap().to_str().unwrap();
            n.starts_with(prefix) && n.ends_with(ext) && n != "ablation-runs.json"
        })
        .unwrap_or_else(|| panic!("no {prefix}*{ext} in {}", dir.display()))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const FAST: [&str; 6] = ["--set", "pretrain.epochs=1", "--set", "finetune.epochs=2", "--set", "data.dark_fraction=0.1"];

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(FAST).collect()
}

#[test]
fn full_pipeline_on_500_images() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, pre, ft, out) = (root.join("data"), root.join("pre"), root.join("ft"), root.join("out"));
    assert_eq!(run(&with_fast(&["synth-data", "--out", s(&data), "--samples", "500", "--subjects", "5"])), 0);
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 500);

    assert_eq!(run(&with_fast(&["pretrain", "--data", s(&data), "--out", s(&pre)])), 0);
    let log = json(&pre.join("pretrain-log.json"));
    assert_eq!(log["epochs"].as_array().unwrap().len(), 1);
    assert!(pre.join("resolved-config.toml").exists());

    let encoder = pre.join("encoder.safetensors");
    assert_eq!(run(&with_fast(&["finetune", "--data", s(&data), "--out", s(&ft), "--encoder", s(&encoder)])), 0);
    let model = ft.join("model.safetensors");
    let m = ["--data", s(&data), "--model", s(&model), "--out", s(&out)];

    assert_eq!(run(&[&["eval"][..], &m].concat()), 0);
    let report = json(&find(&out, "eval-", ".json"));
    assert!(report["count"].as_u64().unwrap() > 0);
    assert_eq!(report["slices"].as_array().unwrap().len(), 3);
    assert!(find(&out, "eval-", ".txt").exists());

    assert_eq!(run(&[&["equivariance"][..], &m, &["--thetas", "0,15"]].concat()), 0);
    let curve = find(&out, "equivariance-", ".json");
    assert_eq!(json(&curve)["points"].as_array().unwrap().len(), 2);

    assert_eq!(run(&[&["corrupt-eval"][..], &m, &["--darken", "2.0"]].concat()), 0);
    let c = json(&find(&out, "corrupt-eval-", ".json"));
    assert!(c["corrupted"]["mean_error_deg"].as_f64().is_some());

    let plots = root.join("plots");
    let pm = ["--data", s(&data), "--model", s(&model), "--out", s(&plots)];
    assert_eq!(run(&[&["plot"][..], &pm, &["--limit", "3", "--curve", s(&curve)]].concat()), 0);
    let pngs = std::fs::read_dir(&plots).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 4);
}

#[test]
fn ablate_and_loso_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let small = ["--set", "pretrain.epochs=1", "--set", "finetune.epochs=1"];
    assert_eq!(run(&[&["synth-data", "--out", s(&data), "--samples", "90", "--subjects", "3"][..], &small].concat()), 0);

    let ab = tmp.path().join("ablate");
    let args = [&["ablate", "--data", s(&data), "--out", s(&ab), "--seeds", "0", "--variants", "full,w/o-inv-EV"][..], &small].concat();
    assert_eq!(run(&args), 0);
    let table = json(&find(&ab, "ablation-", ".json"));
    assert_eq!(table["reference"], "full");
    assert_eq!(json(&ab.join("ablation-runs.json")).as_array().unwrap().len(), 2);

    let lo = tmp.path().join("loso");
    let args = [&["loso", "--data", s(&data), "--out", s(&lo), "--set", "ablation.use_ssl_init=false"][..], &small].concat();
    assert_eq!(run(&args), 0);
    assert_eq!(json(&find(&lo, "loso-", ".json"))["folds"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let bad = ["synth-data", "--out", s(&out), "--set", "finetune.lr=-1", "--set", "pretrain.batch_size=0"];
    assert_eq!(run(&bad), 3);
    assert!(!out.exists());
    assert_eq!(run(&["pretrain", "--data", s(&tmp.path().join("missing")), "--out", s(&out)]), 4);
    let model = tmp.path().join("model.safetensors");
    std::fs::write(&model, b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--data", s(tmp.path()), "--model", s(&model), "--out", s(&out)]), 5);
    assert_eq!(run(&["ablate", "--data", s(tmp.path()), "--out", s(&out), "--variants", "nope"]), 4);
}
