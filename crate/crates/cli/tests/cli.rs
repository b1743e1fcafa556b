use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chestloc::data::load_corpus_manifests;
use chestloc::eval::{write_score_file, AucReport};
use chestloc::labelspace::build_combined_labelspace;
use chestloc::netcore::Matrix;
use chestloc::splits::{read_split_files, Subset};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chestloc"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Small corpus plus default splits under `dir`.
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let (data, splits) = (dir.join("data"), dir.join("splits"));
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--patients",
        "50",
        "--seed",
        "3",
    ]);
    ok(&["split", "--data", s(&data), "--out", s(&splits)]);
    (data, splits)
}

#[test]
fn synth_writes_both_datasets_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["synth", "--out", s(&a), "--patients", "20", "--seed", "7"]);
    assert!(stdout.contains("CXR14:") && stdout.contains("PLCO:"));
    assert!(a.join("cxr14/manifest.csv").is_file());
    assert!(a.join("plco/manifest.csv").is_file());
    ok(&["synth", "--out", s(&b), "--patients", "20", "--seed", "7"]);
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn synth_hits_requested_images_per_patient() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let stdout = ok(&[
        "synth",
        "--out",
        s(&out),
        "--patients",
        "1000",
        "--images-per-patient-mean",
        "3.3",
        "--image-size",
        "32",
    ]);
    let means: Vec<f64> = stdout
        .lines()
        .map(|l| {
            l.split(", ")
                .last()
                .unwrap()
                .split(' ')
                .next()
                .unwrap()
                .parse()
                .unwrap()
        })
        .collect();
    assert_eq!(means.len(), 2);
    assert!(means.iter().all(|m| (m - 3.3).abs() <= 0.1), "{means:?}");
}

#[test]
fn split_defaults_and_audit_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, splits) = corpus(dir.path());
    for f in ["train.txt", "val.txt", "test.txt"] {
        assert!(splits.join(f).is_file());
    }
    let explicit = dir.path().join("explicit");
    let stdout = ok(&[
        "split",
        "--data",
        s(&data),
        "--out",
        s(&explicit),
        "--ratios",
        "0.7",
        "0.1",
        "0.2",
    ]);
    assert!(stdout.contains("leakage: none"));
    assert_eq!(read_tree(&splits), read_tree(&explicit));
    assert_eq!(
        code(&["audit", "--data", s(&data), "--splits", s(&splits)]),
        0
    );

    // Move one image of a multi-image training patient into the test file.
    let train = fs::read_to_string(splits.join("train.txt")).unwrap();
    let ids: Vec<&str> = train.lines().collect();
    let victim = ids
        .windows(2)
        .find(|w| w[0].rsplit_once('_').unwrap().0 == w[1].rsplit_once('_').unwrap().0)
        .unwrap()[0];
    let bad = dir.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    let kept: Vec<&str> = ids.iter().copied().filter(|id| *id != victim).collect();
    fs::write(bad.join("train.txt"), kept.join("\n") + "\n").unwrap();
    fs::copy(splits.join("val.txt"), bad.join("val.txt")).unwrap();
    let test = fs::read_to_string(splits.join("test.txt")).unwrap();
    fs::write(bad.join("test.txt"), format!("{test}{victim}\n")).unwrap();
    let out = run(&["audit", "--data", s(&data), "--splits", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train,test"));
}

#[test]
fn usage_data_and_numerical_errors_map_to_exit_codes() {
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["split", "--data", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(
        code(&["audit", "--data", s(&missing), "--splits", s(&missing)]),
        2
    );
    let (data, splits) = corpus(dir.path());
    let run_dir = dir.path().join("nan");
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--splits",
        s(&splits),
        "--out",
        s(&run_dir),
        "--epochs",
        "2",
        "--lr",
        "1e300",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical failure"));
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--splits",
            s(&splits),
            "--out",
            s(&run_dir),
            "--set",
            "bogus=1"
        ]),
        1
    );
}

#[test]
fn train_is_reproducible_from_its_stored_config() {
    let dir = tempfile::tempdir().unwrap();
    let (data, splits) = corpus(dir.path());
    let (r1, r2, r3) = (
        dir.path().join("r1"),
        dir.path().join("r2"),
        dir.path().join("r3"),
    );
    let base = [
        "train",
        "--data",
        s(&data),
        "--splits",
        s(&splits),
        "--epochs",
        "2",
        "--seed",
        "5",
    ];
    ok(&[&base[..], &["--out", s(&r1)]].concat());
    ok(&[&base[..], &["--out", s(&r2)]].concat());
    let config = r1.join("config.txt");
    ok(&["train", "--config", s(&config), "--out", s(&r3)]);
    let files = [
        "config.txt",
        "train_log.csv",
        "epochs.csv",
        "checkpoint.json",
    ];
    for f in files {
        let a = fs::read(r1.join(f)).unwrap();
        assert_eq!(a, fs::read(r2.join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(r3.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(r1.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,split,total,CXR14:Atelectasis"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    assert!(fs::read_to_string(&config).unwrap().contains("seed = 5"));

    // Evaluating the checkpoint and comparing a run with itself.
    let e1 = dir.path().join("e1");
    let stdout = ok(&[
        "eval",
        "--data",
        s(&data),
        "--splits",
        s(&splits),
        "--checkpoint",
        s(&r1.join("checkpoint.json")),
        "--out",
        s(&e1),
    ]);
    assert!(stdout.contains("Mean (all pathologies)"));
    for f in [
        "auc_cxr14.csv",
        "auc_plco.csv",
        "auc_location.csv",
        "auc_cxr14.svg",
        "report.json",
    ] {
        assert!(e1.join(f).is_file(), "{f}");
    }
    let delta_dir = dir.path().join("delta");
    ok(&["compare", s(&e1), s(&e1), "--out", s(&delta_dir)]);
    let csv = fs::read_to_string(delta_dir.join("delta.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let last = line.rsplit(',').next().unwrap();
        assert!(
            last.is_empty() || last.parse::<f64>().unwrap() == 0.0,
            "{line}"
        );
    }
}

#[test]
fn eval_of_oracle_scores_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (data, splits) = corpus(dir.path());
    let space = build_combined_labelspace();
    let manifests = load_corpus_manifests(&data).unwrap();
    let refs: Vec<_> = manifests.iter().collect();
    let assignment = read_split_files(&splits, &refs).unwrap();
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for m in &manifests {
        for r in &m.records {
            if assignment.subset_of(&r.image_id) == Some(Subset::Test) {
                ids.push(r.image_id.clone());
                scores.extend(
                    space
                        .label_vector(r)
                        .unwrap()
                        .values()
                        .iter()
                        .map(|&v| v as f64),
                );
            }
        }
    }
    let path = dir.path().join("oracle.csv");
    write_score_file(
        &path,
        &space,
        &ids,
        &Matrix::from_vec(ids.len(), space.len(), scores).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--splits",
        s(&splits),
        "--scores",
        s(&path),
        "--out",
        s(&out),
    ]);
    let report = AucReport::load(&out.join("report.json")).unwrap();
    let defined: Vec<f64> = report.labels.iter().filter_map(|l| l.auc).collect();
    assert!(defined.len() > 10);
    assert!(defined.iter().all(|&a| a == 1.0), "{defined:?}");
}
