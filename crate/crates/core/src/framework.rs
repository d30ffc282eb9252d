//! The iterative leaker-byte loop.
//!
//! One iteration builds a view, trains the decision tree and the CNN on the
//! same training sessions, checks that the tree keeps up with the CNN, and
//! reads leaker offsets off the tree's impact vector. Scripted mode replays a
//! fixed view sequence; auto mode keeps masking the selected offsets (as a
//! prefix) until one of the stopping conditions fires.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{build_view, FeatureError, MaskRange, ViewDataset, ViewSpec};
use crate::ingest::{split_dataset, IngestError, LabeledDataset, DEFAULT_TEST_FRACTION};
use crate::interpret::{
    export_impact_csv, impact_from_tree, mean_impact, select_leakers, ImpactVector, InterpretError, LeakerSelection,
    SelectionPolicy, DEFAULT_CONCENTRATION_THRESHOLD, DEFAULT_MIN_SHARE, DEFAULT_TOP_K,
};
use crate::models::{
    accuracy, desk_cnn_space, random_search, train_cnn, train_tree, tune_tree_depth, CnnHyperparams, CnnModel,
    Criterion, DecisionTree, HyperparamSpace, ModelError, ModelKind, TrainOptions, TrainedModelReport, TreeParams,
    Trial, DEFAULT_DEPTH_GRID,
};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum FrameworkError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FrameworkError + '_ {
    move |source| FrameworkError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Scripted,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    /// No offset stands out: top-k concentration fell below the threshold.
    ImportanceDiffuse,
    /// The tree's test accuracy fell below the closeness ratio of the CNN's.
    TreeLagsDeepModel,
    /// The tree is within the chance margin of `1/C`.
    TreeAtChance,
    /// The next prefix mask would cover the whole packet.
    MaskExhausted,
    MaxIterations,
    ManualScript,
}

/// The five-view sequence: raw TCP payloads, TLS application data, the same
/// with the record header masked, with header and IV masked, and finally the
/// concatenated record stream with header and IV masked per record.
pub fn scripted_views() -> Vec<ViewSpec> {
    vec![
        ViewSpec::tcp_payload(),
        ViewSpec::tls_app_data(),
        ViewSpec::tls_app_data().with_mask(MaskRange::prefix(5)),
        ViewSpec::tls_app_data().with_mask(MaskRange::prefix(21)),
        ViewSpec::concat_tls().with_mask(MaskRange::prefix(21)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkConfig {
    pub mode: Mode,
    pub closeness_ratio: f64,
    pub concentration_threshold: f64,
    pub top_k: usize,
    pub min_share: f64,
    pub max_iterations: usize,
    pub chance_margin: f64,
    /// Root of every seed: the session split, depth tuning, CNN search and training.
    pub seed: u64,
    pub test_fraction: f64,
    /// Share of the training split held out for depth tuning and CNN search.
    pub validation_fraction: f64,
    pub tree_depths: Vec<usize>,
    pub tree_criterion: Criterion,
    pub tree_min_samples_split: usize,
    /// Average the impact vector over this many trees: the full fit plus
    /// trees on random halves of the training split.
    pub importance_repeats: usize,
    pub train_cnn: bool,
    pub cnn_search_budget: usize,
    pub cnn_space: HyperparamSpace,
    pub cnn_epochs: usize,
    pub cnn_batch_size: usize,
    pub scripted_views: Vec<ViewSpec>,
    pub auto_start_view: ViewSpec,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        FrameworkConfig {
            mode: Mode::Scripted,
            closeness_ratio: 0.85,
            concentration_threshold: DEFAULT_CONCENTRATION_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            min_share: DEFAULT_MIN_SHARE,
            max_iterations: 8,
            chance_margin: 0.10,
            seed: 42,
            test_fraction: DEFAULT_TEST_FRACTION,
            validation_fraction: 0.2,
            tree_depths: DEFAULT_DEPTH_GRID.to_vec(),
            tree_criterion: Criterion::Gini,
            tree_min_samples_split: 10,
            importance_repeats: 5,
            train_cnn: true,
            cnn_search_budget: 2,
            cnn_space: desk_cnn_space(),
            cnn_epochs: 30,
            cnn_batch_size: 64,
            scripted_views: scripted_views(),
            auto_start_view: ViewSpec::tcp_payload(),
        }
    }
}

impl FrameworkConfig {
    pub fn validate(&self) -> Result<(), FrameworkError> {
        let bad = |m: String| Err(FrameworkError::Config(m));
        for (name, v) in [
            ("closeness_ratio", self.closeness_ratio),
            ("concentration_threshold", self.concentration_threshold),
            ("min_share", self.min_share),
            ("chance_margin", self.chance_margin),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("test_fraction", self.test_fraction),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.tree_depths.is_empty() {
            return bad("tree_depths must not be empty".into());
        }
        if self.importance_repeats == 0 {
            return bad("importance_repeats must be at least 1".into());
        }
        if self.train_cnn {
            if self.cnn_search_budget == 0 {
                return bad("cnn_search_budget must be at least 1".into());
            }
            if self.cnn_batch_size == 0 {
                return bad("cnn_batch_size must be at least 1".into());
            }
            self.cnn_space
                .validate()
                .map_err(|e| FrameworkError::Config(e.to_string()))?;
        }
        match self.mode {
            Mode::Scripted if self.scripted_views.is_empty() => bad("scripted_views must not be empty".into()),
            Mode::Auto if !self.auto_start_view.is_packetized() => {
                bad("auto mode grows per-packet masks and needs a packetized start view".into())
            }
            _ => {
                for v in self.scripted_views.iter().chain([&self.auto_start_view]) {
                    v.validate()?;
                }
                Ok(())
            }
        }
    }

    fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            top_k: self.top_k,
            min_share: self.min_share,
        }
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: *self.tree_depths.iter().max().unwrap_or(&10),
            min_samples_split: self.tree_min_samples_split,
            criterion: self.tree_criterion,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub impact_csv: Option<String>,
    pub tree_json: Option<String>,
    pub resampled_trees_json: Option<String>,
    pub cnn_json: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub index: usize,
    pub view: ViewSpec,
    pub train_samples: usize,
    pub test_samples: usize,
    pub dropped_samples: usize,
    pub chance_level: f64,
    pub model_reports: Vec<TrainedModelReport>,
    /// `(depth, validation accuracy)` per grid point.
    pub tree_depth_scores: Vec<(usize, f64)>,
    pub cnn_trials: Vec<Trial>,
    pub impact: ImpactVector,
    pub selection: LeakerSelection,
    pub dt_close_to_nn: bool,
    pub importance_diffuse: bool,
    pub tree_at_chance: bool,
    pub terminated: bool,
    pub termination_reason: Option<TerminationReason>,
    pub artifacts: ArtifactPaths,
}

impl IterationReport {
    pub fn accuracy_of(&self, kind: ModelKind) -> Option<f64> {
        self.model_reports
            .iter()
            .find(|r| r.kind == kind)
            .map(|r| r.test_accuracy)
    }

    pub fn tree_accuracy(&self) -> f64 {
        self.accuracy_of(ModelKind::DecisionTree)
            .expect("every iteration trains a tree")
    }

    pub fn cnn_accuracy(&self) -> Option<f64> {
        self.accuracy_of(ModelKind::Cnn)
    }

    /// The first stopping condition that holds, in auto-mode precedence order.
    pub fn triggered_condition(&self) -> Option<TerminationReason> {
        if self.importance_diffuse || self.selection.offsets.is_empty() {
            Some(TerminationReason::ImportanceDiffuse)
        } else if !self.dt_close_to_nn {
            Some(TerminationReason::TreeLagsDeepModel)
        } else if self.tree_at_chance {
            Some(TerminationReason::TreeAtChance)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTimings {
    pub view_secs: f64,
    pub tree_secs: f64,
    pub cnn_secs: f64,
}

/// A report together with the trained models it describes.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub report: IterationReport,
    pub tree: DecisionTree,
    /// Trees on random halves of the training split, averaged into the impact.
    pub resampled_trees: Vec<DecisionTree>,
    pub cnn: Option<CnnModel>,
    pub timings: IterationTimings,
}

/// The session-level train/test split shared by every iteration of a run.
#[derive(Debug, Clone)]
pub struct RunSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl RunSplit {
    pub fn new(ds: &LabeledDataset, cfg: &FrameworkConfig) -> Result<Self, FrameworkError> {
        let ds = ds.clone().with_split_seed(derive_seed(cfg.seed, &[0x5e55]));
        let (train, test) = split_dataset(&ds, cfg.test_fraction)?;
        Ok(RunSplit { train, test })
    }
}

struct TreeResult {
    tree: DecisionTree,
    resampled: Vec<DecisionTree>,
    depth_scores: Vec<(usize, f64)>,
    impact: ImpactVector,
    report: TrainedModelReport,
    secs: f64,
}

fn run_tree(
    train: &ViewDataset,
    test: &ViewDataset,
    cfg: &FrameworkConfig,
    seed: u64,
) -> Result<TreeResult, FrameworkError> {
    let start = Instant::now();
    let search = tune_tree_depth(
        train,
        &cfg.tree_depths,
        cfg.tree_params(),
        cfg.validation_fraction,
        seed,
    )?;
    let params = cfg.tree_params().with_depth(search.depth);
    let tree = train_tree(train, params)?;
    let mut resampled = Vec::new();
    for r in 1..cfg.importance_repeats {
        let (half, _) = train.split(0.5, derive_seed(seed, &[r as u64]));
        if half.classes_present() >= 2 {
            resampled.push(train_tree(&half, params)?);
        }
    }
    let impact = importance_of(&tree, &resampled, &train.spec)?;
    let report = TrainedModelReport {
        kind: ModelKind::DecisionTree,
        hyperparams: params.to_hyperparams(),
        train_accuracy: accuracy(&tree, train)?,
        test_accuracy: accuracy(&tree, test)?,
        seed,
    };
    Ok(TreeResult {
        tree,
        resampled,
        depth_scores: search.scores,
        impact,
        report,
        secs: start.elapsed().as_secs_f64(),
    })
}

/// The iteration's impact vector: the mean over the full-split tree and the
/// trees fitted on random halves of the training split.
pub fn importance_of(
    tree: &DecisionTree,
    resampled: &[DecisionTree],
    spec: &ViewSpec,
) -> Result<ImpactVector, FrameworkError> {
    let mut impacts = vec![impact_from_tree(tree, spec)?];
    for t in resampled {
        impacts.push(impact_from_tree(t, spec)?);
    }
    if impacts.len() == 1 {
        Ok(impacts.pop().expect("one vector"))
    } else {
        Ok(mean_impact(&impacts)?)
    }
}

struct CnnResult {
    model: CnnModel,
    trials: Vec<Trial>,
    report: TrainedModelReport,
    secs: f64,
}

fn run_cnn(
    train: &ViewDataset,
    test: &ViewDataset,
    cfg: &FrameworkConfig,
    seed: u64,
) -> Result<CnnResult, FrameworkError> {
    let start = Instant::now();
    let (fit, val) = train.split(cfg.validation_fraction, derive_seed(seed, &[0x7a1]));
    let outcome = random_search(&cfg.cnn_space, cfg.cnn_search_budget, seed, |i, h| {
        let hp = CnnHyperparams::from_params(h)?;
        let opts = TrainOptions {
            epochs: cfg.cnn_epochs,
            batch_size: cfg.cnn_batch_size,
            seed: derive_seed(seed, &[i as u64]),
        };
        let (model, _) = train_cnn(&fit, &hp, &opts)?;
        let score = model.accuracy(&val)?;
        tracing::debug!(trial = i, score, "cnn trial");
        Ok((score, (model, opts.seed)))
    })?;
    let (model, model_seed) = outcome.best;
    let report = TrainedModelReport {
        kind: ModelKind::Cnn,
        hyperparams: outcome.best_params,
        train_accuracy: model.accuracy(train)?,
        test_accuracy: model.accuracy(test)?,
        seed: model_seed,
    };
    Ok(CnnResult {
        model,
        trials: outcome.trace,
        report,
        secs: start.elapsed().as_secs_f64(),
    })
}

/// One pass on a prepared split. The caller decides termination and masking.
pub fn run_iteration_on(
    split: &RunSplit,
    spec: &ViewSpec,
    cfg: &FrameworkConfig,
    index: usize,
) -> Result<IterationOutcome, FrameworkError> {
    let start = Instant::now();
    let train = build_view(&split.train, spec)?;
    let test = build_view(&split.test, spec)?;
    let view_secs = start.elapsed().as_secs_f64();
    if train.classes_present() < 2 {
        return Err(ModelError::DegenerateData.into());
    }
    let seed = derive_seed(cfg.seed, &[index as u64]);
    let (tree, cnn) = rayon::join(
        || run_tree(&train, &test, cfg, derive_seed(seed, &[0x7ee])),
        || {
            cfg.train_cnn
                .then(|| run_cnn(&train, &test, cfg, derive_seed(seed, &[0xc22])))
                .transpose()
        },
    );
    let tree = tree?;
    let cnn = cnn?;

    let selection = select_leakers(&tree.impact, spec, &cfg.policy())?;
    let tree_acc = tree.report.test_accuracy;
    let dt_close_to_nn = match &cnn {
        Some(c) => tree_acc >= cfg.closeness_ratio * c.report.test_accuracy.max(tree_acc),
        None => true,
    };
    let chance_level = 1.0 / train.n_classes() as f64;
    let mut model_reports = vec![tree.report];
    model_reports.extend(cnn.as_ref().map(|c| c.report.clone()));
    let report = IterationReport {
        index,
        view: spec.clone(),
        train_samples: train.len(),
        test_samples: test.len(),
        dropped_samples: train.dropped + test.dropped,
        chance_level,
        model_reports,
        tree_depth_scores: tree.depth_scores,
        cnn_trials: cnn.as_ref().map(|c| c.trials.clone()).unwrap_or_default(),
        importance_diffuse: selection.concentration < cfg.concentration_threshold,
        tree_at_chance: tree_acc <= chance_level + cfg.chance_margin,
        impact: tree.impact,
        selection,
        dt_close_to_nn,
        terminated: false,
        termination_reason: None,
        artifacts: ArtifactPaths::default(),
    };
    tracing::info!(
        index,
        kind = ?spec.kind,
        mask = ?spec.per_packet_mask,
        tree = tree_acc,
        cnn = ?report.cnn_accuracy(),
        offsets = ?report.selection.offsets,
        concentration = report.selection.concentration,
        "iteration done"
    );
    Ok(IterationOutcome {
        report,
        tree: tree.tree,
        resampled_trees: tree.resampled,
        cnn: cnn.as_ref().map(|c| c.model.clone()),
        timings: IterationTimings {
            view_secs,
            tree_secs: tree.secs,
            cnn_secs: cnn.map_or(0.0, |c| c.secs),
        },
    })
}

/// Splits `ds` with the configured seed and runs a single iteration.
pub fn run_iteration(
    ds: &LabeledDataset,
    spec: &ViewSpec,
    cfg: &FrameworkConfig,
) -> Result<IterationOutcome, FrameworkError> {
    cfg.validate()?;
    run_iteration_on(&RunSplit::new(ds, cfg)?, spec, cfg, 0)
}

/// Runs every configured scripted view; the last report terminates with
/// [`TerminationReason::ManualScript`].
pub fn run_scripted(ds: &LabeledDataset, cfg: &FrameworkConfig) -> Result<Vec<IterationOutcome>, FrameworkError> {
    if cfg.mode != Mode::Scripted {
        return Err(FrameworkError::Config("run_scripted needs mode = scripted".into()));
    }
    cfg.validate()?;
    let split = RunSplit::new(ds, cfg)?;
    let mut out = Vec::with_capacity(cfg.scripted_views.len());
    for (i, spec) in cfg.scripted_views.iter().enumerate() {
        out.push(run_iteration_on(&split, spec, cfg, i)?);
    }
    if let Some(last) = out.last_mut() {
        last.report.terminated = true;
        last.report.termination_reason = Some(TerminationReason::ManualScript);
    }
    Ok(out)
}

/// Grows a prefix mask over the selected offsets until a stopping condition
/// fires. Precedence: diffuse importance, tree lagging the CNN, tree at
/// chance, exhausted mask, then the iteration budget.
pub fn run_auto(ds: &LabeledDataset, cfg: &FrameworkConfig) -> Result<Vec<IterationOutcome>, FrameworkError> {
    if cfg.mode != Mode::Auto {
        return Err(FrameworkError::Config("run_auto needs mode = auto".into()));
    }
    cfg.validate()?;
    let split = RunSplit::new(ds, cfg)?;
    let mut spec = cfg.auto_start_view.clone();
    let mut out: Vec<IterationOutcome> = Vec::new();
    for i in 0..cfg.max_iterations {
        let mut o = run_iteration_on(&split, &spec, cfg, i)?;
        let next_mask = o
            .report
            .selection
            .offsets
            .last()
            .map(|&m| MaskRange::prefix(m + 1).hull(spec.per_packet_mask));
        let reason = o.report.triggered_condition().or_else(|| {
            if next_mask.is_some_and(|m| m.end >= spec.bytes_per_packet) {
                Some(TerminationReason::MaskExhausted)
            } else if i + 1 == cfg.max_iterations {
                Some(TerminationReason::MaxIterations)
            } else {
                None
            }
        });
        o.report.terminated = reason.is_some();
        o.report.termination_reason = reason;
        out.push(o);
        if reason.is_some() {
            break;
        }
        spec = spec.with_mask(next_mask.expect("non-empty selection"));
    }
    Ok(out)
}

pub fn run(ds: &LabeledDataset, cfg: &FrameworkConfig) -> Result<Vec<IterationOutcome>, FrameworkError> {
    match cfg.mode {
        Mode::Scripted => run_scripted(ds, cfg),
        Mode::Auto => run_auto(ds, cfg),
    }
}

// ---------------------------------------------------------------------------
// run report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub sessions: usize,
    pub segments: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
}

impl DatasetSummary {
    pub fn of(ds: &LabeledDataset) -> Self {
        DatasetSummary {
            sessions: ds.sessions.len(),
            segments: ds.num_segments(),
            class_names: ds.class_names.clone(),
            class_counts: ds.class_counts(),
        }
    }
}

/// Everything a run produced except wall-clock timings, which live in a
/// sidecar so identical runs give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: FrameworkConfig,
    pub dataset: DatasetSummary,
    pub iterations: Vec<IterationReport>,
    pub termination_reason: Option<TerminationReason>,
    pub timings_file: String,
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FrameworkError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes per-iteration impact CSVs and model JSONs plus `report.json` and
/// `timings.json` under `out_dir`. Artifact paths are relative to `out_dir`.
pub fn write_run(
    out_dir: &Path,
    cfg: &FrameworkConfig,
    ds: &LabeledDataset,
    outcomes: &mut [IterationOutcome],
) -> Result<RunReport, FrameworkError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut timings = Vec::new();
    for o in outcomes.iter_mut() {
        let dir_name = format!("iter{:02}", o.report.index + 1);
        let dir = out_dir.join(&dir_name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        export_impact_csv(&o.report.impact, &dir.join("impact.csv"))?;
        write_json(&dir.join("tree.json"), &o.tree)?;
        write_json(&dir.join("resampled_trees.json"), &o.resampled_trees)?;
        let mut paths = ArtifactPaths {
            impact_csv: Some(format!("{dir_name}/impact.csv")),
            tree_json: Some(format!("{dir_name}/tree.json")),
            resampled_trees_json: Some(format!("{dir_name}/resampled_trees.json")),
            cnn_json: None,
        };
        if let Some(cnn) = &o.cnn {
            write_json(&dir.join("cnn.json"), &cnn.to_document())?;
            paths.cnn_json = Some(format!("{dir_name}/cnn.json"));
        }
        o.report.artifacts = paths;
        timings.push(o.timings);
    }
    let report = RunReport {
        config: cfg.clone(),
        dataset: DatasetSummary::of(ds),
        termination_reason: outcomes.last().and_then(|o| o.report.termination_reason),
        iterations: outcomes.iter().map(|o| o.report.clone()).collect(),
        timings_file: TIMINGS_FILE.into(),
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    write_json(&out_dir.join(TIMINGS_FILE), &timings)?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<RunReport, FrameworkError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
