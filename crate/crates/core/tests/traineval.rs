use std::collections::BTreeSet;

use facestress::dataset::{build_windows, DatasetOptions, InputKind, WindowSet};
use facestress::features::StressLabel;
use facestress::model::{MlpConfig, ModelConfig};
use facestress::synth::{benchmark_preset, generate};
use facestress::traineval::*;

fn windows(preset: &str, n_subjects: usize) -> WindowSet {
    let mut cfg = benchmark_preset(preset).unwrap();
    cfg.n_subjects = n_subjects;
    let sessions: Vec<_> = generate(&cfg).unwrap().into_iter().flat_map(|p| [p.md, p.nd]).collect();
    build_windows(&sessions, &DatasetOptions::default()).unwrap()
}

fn small(configurations: Vec<ExperimentKind>, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        configurations,
        model: ModelConfig { embed_dim: 8, n_layers: 1, n_heads: 2, ffn_dim: 16, ..ModelConfig::default() },
        mlp: MlpConfig { hidden: vec![16, 8], dropout: 0.2 },
        train: TrainConfig { max_epochs: 3, ..TrainConfig::default() },
        knn_k: 3,
        n_folds: 3,
        val_fraction: 0.2,
        seed,
    }
}

#[test]
fn fold_roles_are_disjoint_on_window_sets() {
    let set = windows("separable_strong", 7);
    let folds = make_folds(&set.subjects(), 5, 0.2, 1).unwrap();
    let mut tested = BTreeSet::new();
    for plan in &folds {
        let (tr, va, te) = split_indices(&set, plan);
        assert_eq!(tr.len() + va.len() + te.len(), set.windows.len());
        let subj = |idx: &[usize]| idx.iter().map(|&i| set.windows[i].window.subject_id.clone()).collect::<BTreeSet<_>>();
        let (a, b, c) = (subj(&tr), subj(&va), subj(&te));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        for s in c {
            assert!(tested.insert(s));
        }
    }
    assert_eq!(tested.len(), 7);
}

#[test]
fn patience_zero_stops_one_epoch_after_first_non_improvement() {
    let set = windows("separable_strong", 6);
    let inputs = set.inputs(InputKind::FacialSummary).unwrap();
    let plan = &make_folds(&set.subjects(), 3, 0.2, 4).unwrap()[0];
    let mut cfg = small(vec![ExperimentKind::Mlp], 4);
    cfg.train = TrainConfig { max_epochs: 50, patience: 0, lr: 0.05, ..TrainConfig::default() };
    let b = train_fold(plan, &set, &inputs, ExperimentKind::Mlp, &cfg).unwrap();
    let log = &b.epoch_log;
    let first_bad = log.iter().position(|e| !e.improved).expect("validation loss never worsened in 50 epochs");
    assert_eq!(log.len(), first_bad + 1);
    assert_eq!(b.best_epoch, Some(first_bad - 1));
}

#[test]
fn training_is_reproducible() {
    let set = windows("separable_strong", 6);
    let inputs = set.inputs(InputKind::Facial).unwrap();
    let plan = &make_folds(&set.subjects(), 3, 0.2, 9).unwrap()[1];
    let cfg = small(vec![ExperimentKind::Facial], 9);
    let a = train_fold(plan, &set, &inputs, ExperimentKind::Facial, &cfg).unwrap();
    let b = train_fold(plan, &set, &inputs, ExperimentKind::Facial, &cfg).unwrap();
    assert_eq!(a.epoch_log, b.epoch_log);
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 10;
    let c = train_fold(plan, &set, &inputs, ExperimentKind::Facial, &other).unwrap();
    assert_ne!(a.epoch_log, c.epoch_log);
}

#[test]
fn separable_fold_reaches_high_validation_auroc() {
    let set = windows("separable_strong", 10);
    let inputs = set.inputs(InputKind::Facial).unwrap();
    let plan = &make_folds(&set.subjects(), 5, 0.2, 3).unwrap()[0];
    let cfg = ExperimentConfig {
        configurations: vec![ExperimentKind::Facial],
        model: ModelConfig { embed_dim: 32, n_layers: 1, n_heads: 4, ffn_dim: 64, ..ModelConfig::default() },
        seed: 3,
        ..ExperimentConfig::default()
    };
    let b = train_fold(plan, &set, &inputs, ExperimentKind::Facial, &cfg).unwrap();
    let (_, val, _) = split_indices(&set, plan);
    let scores = b.predict(&val.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>()).unwrap();
    let labels: Vec<f64> = val.iter().map(|&i| set.windows[i].label()).collect();
    let a = auroc(&scores, &labels).unwrap();
    assert!(a > 0.95, "validation AUROC {a}");
}

#[test]
fn bundles_round_trip_through_disk() {
    let set = windows("separable_strong", 6);
    let folds = make_folds(&set.subjects(), 3, 0.2, 2).unwrap();
    let cfg = small(vec![ExperimentKind::CrossFacialGaze, ExperimentKind::Mlp, ExperimentKind::Knn], 2);
    let dir = tempfile::tempdir().unwrap();
    for kind in cfg.configurations.clone() {
        let inputs = set.inputs(kind.input_kind()).unwrap();
        let b = train_fold(&folds[0], &set, &inputs, kind, &cfg).unwrap();
        let path = dir.path().join(kind.as_str());
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.predict(&inputs).unwrap(), b.predict(&inputs).unwrap());
    }
    let inputs = set.inputs(InputKind::Facial).unwrap();
    let b = train_fold(&folds[0], &set, &inputs, ExperimentKind::Facial, &cfg).unwrap();
    let path = dir.path().join("facial");
    b.save(&path).unwrap();
    let mut ck: ndcore::Checkpoint = ndcore::Checkpoint::load(&path.join("checkpoint.json")).unwrap();
    ck.config_hash = "0".repeat(64);
    ck.save(&path.join("checkpoint.json")).unwrap();
    assert_eq!(ModelBundle::load(&path).unwrap_err().class(), "CheckpointError");
}

#[test]
fn report_rows_and_aggregates() {
    let set = windows("separable_strong", 6);
    let out = run_experiment(&set, &small(ExperimentKind::ALL.to_vec(), 5), 1).unwrap();
    let rows: Vec<&str> = out.report.configurations.iter().map(|c| c.display_name.as_str()).collect();
    assert_eq!(
        rows,
        [
            "facial features",
            "Bio (PP, HR, BR)",
            "Early Fusion(facial features + Bio)",
            "Early Fusion(facial features + Gaze)",
            "Cross-Modal (facial features + Bio)",
            "Cross-Modal (facial features + Gaze)",
            "Cross-Modal (Gaze + Bio)",
            "facial features (kNN)",
            "facial features (MLP)",
        ]
    );
    for c in &out.report.configurations {
        assert_eq!(c.folds.len(), 3);
        for m in METRIC_NAMES {
            let vals: Vec<f64> = c.folds.iter().filter_map(|f| f.get(m)).collect();
            assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            let agg = c.aggregate[m];
            assert_eq!(agg.n, 3);
            let mean = vals.iter().sum::<f64>() / 3.0;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
            assert!((agg.mean.unwrap() - mean).abs() < 1e-12 && (agg.std.unwrap() - sd).abs() < 1e-12);
        }
    }
    // label sets agree across configurations
    let labels_of = |k: ExperimentKind| -> Vec<(String, usize, f64)> {
        out.predictions
            .iter()
            .filter(|((kind, _), _)| *kind == k)
            .flat_map(|(_, p)| p.iter().map(|x| (x.subject_id.clone(), x.window_index, x.label)))
            .collect()
    };
    for k in ExperimentKind::ALL {
        assert_eq!(labels_of(k), labels_of(ExperimentKind::Facial));
    }
    let mut csv = Vec::new();
    out.report.write_comparison(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 10);
}

#[test]
fn all_no_stress_dataset_reports_invalid_rank_metrics() {
    let mut set = windows("separable_strong", 6);
    for w in &mut set.windows {
        w.window.label = StressLabel::NoStress;
    }
    let out = run_experiment(&set, &small(vec![ExperimentKind::Mlp, ExperimentKind::Knn, ExperimentKind::Bio], 6), 1).unwrap();
    for c in &out.report.configurations {
        assert!(c.folds.iter().all(|f| f.auroc.is_none() && f.auprc.is_none() && f.balanced_accuracy.is_none()));
        assert_eq!(c.mean("auroc"), None);
        assert!(c.mean("accuracy").is_some());
    }
    let json: serde_json::Value = serde_json::from_str(&out.report.to_json().unwrap()).unwrap();
    assert!(json["configurations"][0]["aggregate"]["auroc"]["mean"].is_null());
}

#[test]
fn non_finite_inputs_abort_training() {
    let set = windows("separable_strong", 6);
    let mut inputs = set.inputs(InputKind::FacialSummary).unwrap();
    let plan = &make_folds(&set.subjects(), 3, 0.2, 4).unwrap()[0];
    let (train, _, _) = split_indices(&set, plan);
    inputs[train[0]][0].data_mut()[0] = f64::INFINITY;
    let err = train_fold(plan, &set, &inputs, ExperimentKind::Mlp, &small(vec![ExperimentKind::Mlp], 4)).unwrap_err();
    assert_eq!(err.class(), "NonFiniteGradientError", "{err:?}");
    assert!(err.to_string().contains("epoch 0"), "{err}");
}
