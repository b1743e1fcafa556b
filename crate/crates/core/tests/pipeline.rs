use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use chestloc::data::{
    load_corpus_manifests, load_prepared, synth_generate, Manifest, PreparedSample, SynthConfig,
};
use chestloc::eval::{compare_runs, evaluate, AucReport};
use chestloc::labelspace::{build_combined_labelspace, LabelSpace, LabelVector, MaskVector};
use chestloc::lossfns::{pooled_loss_grad, weights_for_mode, LossMode};
use chestloc::netcore::{Checkpoint, Matrix};
use chestloc::splits::{patient_split_all, Subset, DEFAULT_RATIOS};
use chestloc::train::{train, training_masks, TrainConfig};

fn small_config(seed: u64, patients: usize) -> SynthConfig {
    let mut cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    for d in &mut cfg.datasets {
        d.patients = patients;
    }
    cfg
}

fn split_indices(samples: &[PreparedSample], manifests: &[Manifest], seed: u64) -> [Vec<usize>; 3] {
    let refs: Vec<&Manifest> = manifests.iter().collect();
    let a = patient_split_all(&refs, DEFAULT_RATIOS, seed).unwrap();
    let pick = |s| {
        (0..samples.len())
            .filter(|&i| a.subset_of(&samples[i].image_id) == Some(s))
            .collect()
    };
    [pick(Subset::Train), pick(Subset::Val), pick(Subset::Test)]
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    out
}

#[test]
fn corpus_survives_disk_roundtrip() {
    let space = build_combined_labelspace();
    let corpus = synth_generate(&small_config(3, 25)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let manifests = load_corpus_manifests(dir.path()).unwrap();
    let mut from_disk = Vec::new();
    for m in &manifests {
        from_disk.extend(load_prepared(&space, m).unwrap());
    }
    assert_eq!(from_disk, corpus.prepared(&space).unwrap());
}

#[test]
fn same_seed_gives_identical_corpus_directory() {
    let cfg = small_config(7, 15);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(&cfg).unwrap().write(a.path()).unwrap();
    synth_generate(&cfg).unwrap().write(b.path()).unwrap();
    let (ha, hb) = (hash_tree(a.path()), hash_tree(b.path()));
    assert!(ha.len() > 100);
    assert_eq!(ha, hb);
    let c = tempfile::tempdir().unwrap();
    synth_generate(&small_config(8, 15))
        .unwrap()
        .write(c.path())
        .unwrap();
    assert_ne!(ha, hash_tree(c.path()));
}

#[test]
fn requested_images_per_patient_is_met() {
    let mut cfg = small_config(1, 1000);
    for d in &mut cfg.datasets {
        d.images_per_patient = 3.3;
    }
    let corpus = synth_generate(&cfg).unwrap();
    assert_eq!(corpus.manifests.len(), 2);
    for m in &corpus.manifests {
        let st = m.stats();
        assert_eq!(st.patients, 1000);
        assert!(
            (st.images_per_patient - 3.3).abs() <= 0.1,
            "{}",
            st.images_per_patient
        );
    }
}

#[test]
fn location_off_zeroes_location_gradient() {
    let space = build_combined_labelspace();
    let corpus = synth_generate(&small_config(2, 20)).unwrap();
    let samples = corpus.prepared(&space).unwrap();
    let masks = training_masks(&samples, false);
    let labels: Vec<LabelVector> = samples.iter().map(|s| s.label.clone()).collect();
    let preds = Matrix::from_vec(
        samples.len(),
        space.len(),
        (0..samples.len() * space.len())
            .map(|k| 0.05 + 0.9 * ((k * 37 % 101) as f64 / 101.0))
            .collect(),
    )
    .unwrap();
    let w = weights_for_mode(LossMode::Weighted, &labels, &masks).unwrap();
    let g = pooled_loss_grad(&preds, &labels, &masks, &w).unwrap();
    for i in 0..samples.len() {
        for j in space.location_range() {
            assert_eq!(g.get(i, j).to_bits(), 0);
        }
    }
    // Location-on masks do supervise the block on PLCO images.
    let on: Vec<MaskVector> = training_masks(&samples, true);
    assert!(on
        .iter()
        .any(|m| space.location_range().any(|j| m.get(j) == 1)));
}

#[test]
fn checkpoint_reproduces_best_model_predictions() {
    let space = build_combined_labelspace();
    let corpus = synth_generate(&small_config(4, 40)).unwrap();
    let samples = corpus.prepared(&space).unwrap();
    let [tr, va, te] = split_indices(&samples, &corpus.manifests, 4);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &space, &samples, &tr, &va, |_| {}).unwrap();
    assert_eq!(out.history.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.checkpoint.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore_model().unwrap();
    assert_eq!(restored.flat_params(), out.best.flat_params());
    assert_eq!(restored.norm_buffers(), out.best.norm_buffers());
    let direct = evaluate(&out.best, &samples, &te, &out.normalization, &space, 64).unwrap();
    let again = evaluate(&restored, &samples, &te, &out.normalization, &space, 64).unwrap();
    assert_eq!(direct, again);
    let delta = compare_runs(&direct, &again).unwrap();
    assert!(delta.rows.iter().all(|r| r.delta.is_none_or(|d| d == 0.0)));
}

fn oracle_report(space: &LabelSpace, samples: &[PreparedSample], idx: &[usize]) -> AucReport {
    let labels: Vec<LabelVector> = idx.iter().map(|&i| samples[i].label.clone()).collect();
    let masks: Vec<MaskVector> = idx.iter().map(|&i| samples[i].mask.clone()).collect();
    let ids: Vec<String> = idx.iter().map(|&i| samples[i].image_id.clone()).collect();
    let scores: Vec<f64> = labels
        .iter()
        .flat_map(|l| l.values().iter().map(|&v| v as f64))
        .collect();
    let preds = Matrix::from_vec(idx.len(), space.len(), scores).unwrap();
    AucReport::from_predictions(space, &preds, &labels, &masks, &ids).unwrap()
}

#[test]
fn oracle_scores_give_unit_auc() {
    let space = build_combined_labelspace();
    let corpus = synth_generate(&small_config(5, 60)).unwrap();
    let samples = corpus.prepared(&space).unwrap();
    let [_, _, te] = split_indices(&samples, &corpus.manifests, 5);
    let report = oracle_report(&space, &samples, &te);
    let defined: Vec<f64> = report.labels.iter().filter_map(|l| l.auc).collect();
    assert!(defined.len() > 20);
    assert!(defined.iter().all(|&a| a == 1.0));
    assert_eq!(report.means.pathologies, Some(1.0));
}

/// Weighted loss lifts positive recall on rare labels relative to plain
/// cross-entropy; paired runs over five seeds, recall at epoch 5.
#[test]
fn weighted_loss_recall_beats_unweighted() {
    let space = build_combined_labelspace();
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..5u64 {
        let cfg = SynthConfig {
            image_size: 32,
            ..small_config(seed, 150)
        };
        let corpus = synth_generate(&cfg).unwrap();
        let samples = corpus.prepared(&space).unwrap();
        let [tr, va, _] = split_indices(&samples, &corpus.manifests, seed);
        let mut recall = Vec::new();
        for mode in [LossMode::Weighted, LossMode::Unweighted] {
            let tc = TrainConfig {
                seed,
                epochs: 5,
                loss_mode: mode,
                ..TrainConfig::default()
            };
            let out = train(&tc, &space, &samples, &tr, &va, |_| {}).unwrap();
            recall.push(out.history[4].val_recall);
        }
        log.push(format!(
            "seed {seed}: weighted {:.3} unweighted {:.3}",
            recall[0], recall[1]
        ));
        if recall[0] > recall[1] {
            wins += 1;
        }
    }
    println!("{}", log.join("\n"));
    assert_eq!(wins, 5, "{log:?}");
}
