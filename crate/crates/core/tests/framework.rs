use tlm::framework::{
    importance_of, read_report, run, run_auto, run_iteration, run_scripted, scripted_views, write_run, FrameworkConfig,
    FrameworkError, Mode, TerminationReason, REPORT_FILE,
};
use tlm::interpret::{read_impact_csv, select_leakers, SelectionPolicy};
use tlm::models::{DecisionTree, ModelError, ModelKind};
use tlm::synth::{self, LeakageProfile};
use tlm::{LabeledDataset, MaskRange, ViewSpec};

fn dataset(length_leak: bool, seed: u64) -> LabeledDataset {
    synth::generate(&LeakageProfile {
        classes: 4,
        sessions_per_class: 60,
        length_leak,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick(mode: Mode) -> FrameworkConfig {
    FrameworkConfig {
        mode,
        train_cnn: false,
        tree_depths: vec![4, 8],
        ..Default::default()
    }
}

fn with_small_cnn(mode: Mode) -> FrameworkConfig {
    FrameworkConfig {
        train_cnn: true,
        cnn_search_budget: 1,
        cnn_epochs: 2,
        ..quick(mode)
    }
}

#[test]
fn planted_length_leak_is_found_on_tls_view() {
    let o = run_iteration(&dataset(true, 1), &ViewSpec::tls_app_data(), &quick(Mode::Scripted)).unwrap();
    assert!(o.report.tree_accuracy() >= 0.95);
    assert_eq!(o.report.selection.offsets, [3, 4]);
    assert!(o.report.dt_close_to_nn);
    assert!(!o.report.terminated);
}

#[test]
fn single_class_is_degenerate() {
    let mut ds = dataset(false, 2);
    ds.sessions.retain(|s| s.label == "class00");
    let ds = LabeledDataset::new(ds.sessions, 42);
    let err = run_iteration(&ds, &ViewSpec::tls_app_data(), &quick(Mode::Scripted)).unwrap_err();
    assert!(matches!(err, FrameworkError::Model(ModelError::DegenerateData)));
}

#[test]
fn scripted_run_echoes_five_views() {
    let out = run_scripted(&dataset(true, 3), &with_small_cnn(Mode::Scripted)).unwrap();
    assert_eq!(out.len(), 5);
    let views: Vec<ViewSpec> = out.iter().map(|o| o.report.view.clone()).collect();
    assert_eq!(views, scripted_views());
    assert_eq!(
        serde_json::to_string(&views).unwrap(),
        serde_json::to_string(&scripted_views()).unwrap()
    );
    for (i, o) in out.iter().enumerate() {
        assert_eq!(o.report.index, i);
        let kinds: Vec<ModelKind> = o.report.model_reports.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, [ModelKind::DecisionTree, ModelKind::Cnn]);
        for r in &o.report.model_reports {
            assert!((0.0..=1.0).contains(&r.test_accuracy));
            assert!((0.0..=1.0).contains(&r.train_accuracy));
        }
        assert_eq!(o.report.terminated, i == 4);
    }
    assert_eq!(out[4].report.termination_reason, Some(TerminationReason::ManualScript));
    assert!(out[0..4].iter().all(|o| o.report.termination_reason.is_none()));
}

#[test]
fn closeness_flag_is_definitional() {
    let out = run_scripted(&dataset(true, 4), &with_small_cnn(Mode::Scripted)).unwrap();
    let cfg = FrameworkConfig::default();
    for o in &out {
        let tree = o.report.tree_accuracy();
        let cnn = o.report.cnn_accuracy().unwrap();
        assert_eq!(o.report.dt_close_to_nn, tree >= cfg.closeness_ratio * cnn.max(tree));
        if tree < cfg.closeness_ratio * cnn {
            assert!(!o.report.dt_close_to_nn);
        }
    }
}

#[test]
fn auto_masks_the_planted_offsets_then_stops() {
    let out = run_auto(&dataset(true, 5), &quick(Mode::Auto)).unwrap();
    assert!(out.len() >= 2);
    assert_eq!(out[0].report.view.kind, tlm::ViewKind::TcpPayload);
    assert_eq!(out[0].report.selection.offsets, [3, 4]);
    assert_eq!(out[1].report.view.per_packet_mask, MaskRange::prefix(5));
    let last = &out.last().unwrap().report;
    assert!(last.terminated);
    assert!(last.tree_accuracy() <= last.chance_level + 0.10);
    for w in out.windows(2) {
        assert!(w[1]
            .report
            .view
            .per_packet_mask
            .contains_range(&w[0].report.view.per_packet_mask));
    }
    assert!(out[..out.len() - 1].iter().all(|o| !o.report.terminated));
}

#[test]
fn auto_on_null_data_stops_at_once() {
    // Small trees fitted to noise credit few offsets, so the null needs
    // enough sessions for the importance to spread out.
    let ds = synth::generate(&LeakageProfile {
        classes: 8,
        sessions_per_class: 100,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let cfg = FrameworkConfig {
        mode: Mode::Auto,
        train_cnn: false,
        ..Default::default()
    };
    let out = run_auto(&ds, &cfg).unwrap();
    assert_eq!(out.len(), 1);
    let r = &out[0].report;
    assert_eq!(r.termination_reason, Some(TerminationReason::ImportanceDiffuse));
    assert!(r.selection.concentration < 0.30);
    assert!((r.tree_accuracy() - 0.125).abs() <= 0.10);
}

#[test]
fn auto_budget_of_one() {
    let cfg = FrameworkConfig {
        max_iterations: 1,
        ..quick(Mode::Auto)
    };
    let out = run(&dataset(true, 7), &cfg).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].report.termination_reason, Some(TerminationReason::MaxIterations));
}

#[test]
fn mode_mismatch_and_bad_config_are_rejected() {
    let ds = dataset(false, 8);
    assert!(matches!(
        run_auto(&ds, &quick(Mode::Scripted)),
        Err(FrameworkError::Config(_))
    ));
    assert!(matches!(
        run_scripted(&ds, &quick(Mode::Auto)),
        Err(FrameworkError::Config(_))
    ));
    let bad = FrameworkConfig {
        closeness_ratio: 1.5,
        ..quick(Mode::Scripted)
    };
    assert!(matches!(run(&ds, &bad), Err(FrameworkError::Config(_))));
    let concat_auto = FrameworkConfig {
        auto_start_view: ViewSpec::concat_tls(),
        ..quick(Mode::Auto)
    };
    assert!(concat_auto.validate().is_err());
}

#[test]
fn config_json_fills_defaults_and_rejects_unknown_keys() {
    let cfg: FrameworkConfig = serde_json::from_str(r#"{"mode":"auto","seed":7}"#).unwrap();
    assert_eq!(cfg.mode, Mode::Auto);
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.closeness_ratio, 0.85);
    assert_eq!(cfg.concentration_threshold, 0.30);
    assert_eq!(cfg.top_k, 16);
    assert_eq!(cfg.min_share, 0.02);
    assert_eq!(cfg.max_iterations, 8);
    assert_eq!(cfg.chance_margin, 0.10);
    assert!(serde_json::from_str::<FrameworkConfig>(r#"{"closenes_ratio":0.5}"#).is_err());
}

#[test]
fn report_round_trips_and_artifacts_reproduce_the_impact() {
    let ds = dataset(true, 9);
    let cfg = with_small_cnn(Mode::Scripted);
    let mut out = run(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = write_run(dir.path(), &cfg, &ds, &mut out).unwrap();
    let back = read_report(&dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.termination_reason, Some(TerminationReason::ManualScript));

    let policy = SelectionPolicy {
        top_k: cfg.top_k,
        min_share: cfg.min_share,
    };
    for it in &back.iterations {
        let a = &it.artifacts;
        let read = |rel: &Option<String>| std::fs::read_to_string(dir.path().join(rel.as_ref().unwrap())).unwrap();
        let tree: DecisionTree = serde_json::from_str(&read(&a.tree_json)).unwrap();
        let resampled: Vec<DecisionTree> = serde_json::from_str(&read(&a.resampled_trees_json)).unwrap();
        let impact = importance_of(&tree, &resampled, &it.view).unwrap();
        assert_eq!(impact, it.impact);
        assert_eq!(select_leakers(&impact, &it.view, &policy).unwrap(), it.selection);
        let csv = read_impact_csv(&dir.path().join(a.impact_csv.as_ref().unwrap())).unwrap();
        for (x, y) in csv.iter().zip(&it.impact.values) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-300));
        }
        assert!(a.cnn_json.is_some());
    }
    assert!(dir.path().join("timings.json").exists());
}

#[test]
fn identical_runs_write_identical_reports() {
    let ds = dataset(true, 10);
    let cfg = with_small_cnn(Mode::Auto);
    let bytes = || {
        let dir = tempfile::tempdir().unwrap();
        let mut out = run(&ds, &cfg).unwrap();
        write_run(dir.path(), &cfg, &ds, &mut out).unwrap();
        std::fs::read(dir.path().join(REPORT_FILE)).unwrap()
    };
    assert_eq!(bytes(), bytes());
}
