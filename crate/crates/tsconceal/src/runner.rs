//! Experiment orchestration: config files, the end-to-end pipeline
//! (fit target, curriculum-train discriminator, attack, score), grid
//! search over attack hyperparameters, persistence, and SVG overlays.
//!
//! Everything here is deterministic given the config and seed: reruns
//! produce byte-identical results.csv and summary.json.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AggregationKind, AggregationSpec};
use crate::attacks::{run_attack, AttackConfig, AttackKind};
use crate::data::{
    generate_synthetic, load_ucr_tsv, zscore_normalize, LabeledSeriesSet, SyntheticKind,
    SyntheticSpec,
};
use crate::discriminator::{curriculum_train, CurriculumConfig, CurriculumReport};
use crate::error::{Error, Result};
use crate::metrics::{
    concealability, efficiency, f1, iteration_floor, select_best_iteration, successfulness,
    Averaging, IterationRecord, MetricsReport, SelectionReason,
};
use crate::models::{ModelFamily, ModelSpec, TrainConfig, TrainedClassifier};
use crate::rng::{derive_seed, streams};
use crate::tensor::Tensor;

/// Output root override; a --out flag still wins over it.
pub const OUT_ENV_VAR: &str = "TSCONCEAL_OUT";

/// Present in a run directory while a run is in flight or after it failed;
/// removed on clean completion.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Precedence: explicit flag, then the environment variable, then the
/// config's output directory, then ./runs.
pub fn resolve_output_root(flag: Option<&Path>, config_dir: Option<&Path>) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(OUT_ENV_VAR) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    config_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    TwoSine,
    WarpedBump,
    Ucr,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSection {
    pub kind: DataKind,
    /// Synthetic only. Test split defaults to the same size.
    #[serde(default)]
    pub n_per_class: usize,
    #[serde(default)]
    pub n_test_per_class: usize,
    #[serde(default)]
    pub length: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Z-normalize both splits with training-set statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl DataSection {
    fn validate(&self) -> Result<()> {
        match self.kind {
            DataKind::Ucr => {
                if self.train_path.is_none() || self.test_path.is_none() {
                    return Err(Error::InvalidConfig(
                        "ucr data needs train_path and test_path".to_string(),
                    ));
                }
            }
            _ => {
                if self.n_per_class < 2 {
                    return Err(Error::InvalidConfig(
                        "synthetic data needs n_per_class >= 2".to_string(),
                    ));
                }
                if self.length < 4 {
                    return Err(Error::InvalidConfig(
                        "synthetic data needs length >= 4".to_string(),
                    ));
                }
                if self.noise_std < 0.0 {
                    return Err(Error::InvalidConfig("noise_std must be >= 0".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Architecture plus training hyperparameters for one model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub family: ModelFamily,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub kernel_sizes: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub patience: usize,
}

impl ModelSection {
    fn spec(&self, n_classes: usize, input_length: usize) -> ModelSpec {
        ModelSpec {
            family: self.family,
            hidden: self.hidden.clone(),
            kernel_sizes: self.kernel_sizes.clone(),
            n_classes,
            input_length,
            dropout: self.dropout,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed,
            patience: self.patience,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorSection {
    #[serde(flatten)]
    pub model: ModelSection,
    pub epsilon_init: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_true")]
    pub reduce_iterations: bool,
    #[serde(default)]
    pub half_width: bool,
}

fn default_decay() -> f64 {
    0.8
}

fn default_threshold() -> f64 {
    0.9
}

fn default_max_rounds() -> usize {
    8
}

fn default_finetune_epochs() -> usize {
    8
}

impl DiscriminatorSection {
    fn curriculum_config(&self, seed: u64) -> CurriculumConfig {
        CurriculumConfig {
            epsilon_init: self.epsilon_init,
            decay: self.decay,
            accuracy_threshold: self.accuracy_threshold,
            max_rounds: self.max_rounds,
            finetune_epochs: self.finetune_epochs,
            reduce_iterations: self.reduce_iterations,
            half_width: self.half_width,
            train: self.model.train_config(seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(flatten)]
    pub base: AttackConfig,
    /// Apply the per-attack iteration floor when selecting the reported
    /// iteration; turn off for short smoke runs.
    #[serde(default = "default_true")]
    pub respect_iteration_floor: bool,
}

/// Grid axes; absent axes keep the base attack's value. Present axes must
/// be non-empty.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GridSection {
    #[serde(default)]
    pub aggregation: Option<Vec<AggregationKind>>,
    #[serde(default)]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default)]
    pub iterations: Option<Vec<usize>>,
    #[serde(default)]
    pub t_max: Option<Vec<usize>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    #[serde(default)]
    pub delta: Option<Vec<f64>>,
    /// Sets sgm_l2 and sgm_smooth together; the two move jointly.
    #[serde(default)]
    pub sgm_coeff: Option<Vec<f64>>,
}

impl GridSection {
    fn validate(&self) -> Result<()> {
        fn check<T>(name: &str, axis: &Option<Vec<T>>) -> Result<()> {
            match axis {
                Some(v) if v.is_empty() => Err(Error::InvalidConfig(format!(
                    "grid axis `{name}` is empty"
                ))),
                _ => Ok(()),
            }
        }
        check("aggregation", &self.aggregation)?;
        check("epsilon", &self.epsilon)?;
        check("eta", &self.eta)?;
        check("iterations", &self.iterations)?;
        check("t_max", &self.t_max)?;
        check("alpha", &self.alpha)?;
        check("gamma", &self.gamma)?;
        check("delta", &self.delta)?;
        check("sgm_coeff", &self.sgm_coeff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    /// How many test rows to render per combination when svg is on.
    #[serde(default = "default_plot_series")]
    pub plot_series: usize,
    #[serde(default)]
    pub plot_truncate: Option<usize>,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

fn default_plot_series() -> usize {
    2
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: None,
            formats: default_formats(),
            plot_series: default_plot_series(),
            plot_truncate: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub target_model: ModelSection,
    pub discriminator: DiscriminatorSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.target_model.train_config(0).validate()?;
        self.discriminator.model.train_config(0).validate()?;
        self.discriminator.curriculum_config(0).validate()?;
        self.attack.base.validate()?;
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        Ok(())
    }

    /// Hash of the parsed config, so reordering keys in the file does not
    /// change it.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// One cell of the hyperparameter grid: the nominal axis assignments and
/// the attack config they produce.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub index: usize,
    pub assignments: BTreeMap<String, String>,
    pub config: AttackConfig,
}

/// Fields the attack never reads are reset to fixed values, so nominally
/// different combinations with identical behavior collapse to one
/// execution: seed for the deterministic gradient attacks, and the unused
/// aggregation parameters for each aggregation kind.
fn canonicalize(cfg: &AttackConfig) -> AttackConfig {
    let mut c = cfg.clone();
    if matches!(c.kind, AttackKind::Ifgsm | AttackKind::Pgd) {
        c.seed = 0;
    }
    c.aggregation = match c.aggregation.kind {
        AggregationKind::None => AggregationSpec::none(),
        AggregationKind::Sum => AggregationSpec::sum(c.aggregation.alpha),
        AggregationKind::Harmonic => AggregationSpec {
            gamma: c.aggregation.gamma,
            ..AggregationSpec::harmonic()
        },
        AggregationKind::Hypercone => AggregationSpec::hypercone(c.aggregation.delta),
    };
    c
}

fn fmt_axis(v: f64) -> String {
    format!("{v}")
}

/// Cartesian product of the present grid axes over the base config. Every
/// combination is validated; combination i runs with seed derived from
/// (base attack seed, i).
pub fn expand_grid(
    base: &AttackConfig,
    grid: &GridSection,
    seed_base: u64,
) -> Result<Vec<GridPoint>> {
    grid.validate()?;
    type Setter = Box<dyn Fn(&mut AttackConfig)>;
    let mut axes: Vec<(&'static str, Vec<(String, Setter)>)> = Vec::new();

    if let Some(vs) = &grid.aggregation {
        axes.push((
            "aggregation",
            vs.iter()
                .map(|&k| {
                    let s: Setter = Box::new(move |c: &mut AttackConfig| c.aggregation.kind = k);
                    (k.name().to_string(), s)
                })
                .collect(),
        ));
    }
    macro_rules! float_axis {
        ($name:literal, $field:expr, $apply:expr) => {
            if let Some(vs) = $field {
                axes.push((
                    $name,
                    vs.iter()
                        .map(|&v| {
                            let s: Setter = Box::new(move |c: &mut AttackConfig| $apply(c, v));
                            (fmt_axis(v), s)
                        })
                        .collect(),
                ));
            }
        };
    }
    float_axis!("epsilon", &grid.epsilon, |c: &mut AttackConfig, v| c.epsilon = v);
    float_axis!("eta", &grid.eta, |c: &mut AttackConfig, v| c.eta = v);
    if let Some(vs) = &grid.iterations {
        axes.push((
            "iterations",
            vs.iter()
                .map(|&v| {
                    let s: Setter = Box::new(move |c: &mut AttackConfig| c.iterations = v);
                    (v.to_string(), s)
                })
                .collect(),
        ));
    }
    if let Some(vs) = &grid.t_max {
        axes.push((
            "t_max",
            vs.iter()
                .map(|&v| {
                    let s: Setter = Box::new(move |c: &mut AttackConfig| c.t_max = v);
                    (v.to_string(), s)
                })
                .collect(),
        ));
    }
    float_axis!("alpha", &grid.alpha, |c: &mut AttackConfig, v| {
        c.aggregation.alpha = v
    });
    float_axis!("gamma", &grid.gamma, |c: &mut AttackConfig, v| {
        c.aggregation.gamma = v
    });
    float_axis!("delta", &grid.delta, |c: &mut AttackConfig, v| {
        c.aggregation.delta = v
    });
    float_axis!("sgm_coeff", &grid.sgm_coeff, |c: &mut AttackConfig, v| {
        c.sgm_l2 = v;
        c.sgm_smooth = v;
    });

    let total: usize = axes.iter().map(|(_, vs)| vs.len()).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut cfg = base.clone();
        let mut assignments = BTreeMap::new();
        // Row-major: the first declared axis varies slowest.
        let mut rem = index;
        let mut stride = total;
        for (name, values) in &axes {
            stride /= values.len();
            let pick = rem / stride;
            rem %= stride;
            let (label, setter) = &values[pick];
            setter(&mut cfg);
            assignments.insert((*name).to_string(), label.clone());
        }
        cfg.seed = derive_seed(seed_base, index as u64);
        let cfg = canonicalize(&cfg);
        cfg.validate().map_err(|e| {
            Error::InvalidConfig(format!("grid combination {index} ({assignments:?}): {e}"))
        })?;
        points.push(GridPoint {
            index,
            assignments,
            config: cfg,
        });
    }
    Ok(points)
}

/// Load the configured dataset pair, z-normalized with train statistics
/// when requested.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledSeriesSet, LabeledSeriesSet)> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.kind {
        DataKind::TwoSine | DataKind::WarpedBump => {
            let kind = match d.kind {
                DataKind::TwoSine => SyntheticKind::TwoSine,
                _ => SyntheticKind::WarpedBump,
            };
            let data_seed = derive_seed(cfg.seed, streams::DATA);
            let n_test = if d.n_test_per_class == 0 {
                d.n_per_class
            } else {
                d.n_test_per_class
            };
            let train = generate_synthetic(&SyntheticSpec {
                kind,
                n_per_class: d.n_per_class,
                length: d.length,
                noise_std: d.noise_std,
                seed: derive_seed(data_seed, 0),
            })?;
            let test = generate_synthetic(&SyntheticSpec {
                kind,
                n_per_class: n_test,
                length: d.length,
                noise_std: d.noise_std,
                seed: derive_seed(data_seed, 1),
            })?;
            (train, test)
        }
        DataKind::Ucr => {
            let train_path = d.train_path.as_ref().expect("validated");
            let test_path = d.test_path.as_ref().expect("validated");
            let train = load_ucr_tsv(train_path)?;
            let test = load_ucr_tsv(test_path)?;
            if train.series_length() != test.series_length() {
                return Err(Error::shape(
                    "ucr train/test",
                    format!("length {}", train.series_length()),
                    format!("length {}", test.series_length()),
                ));
            }
            let universe = |s: &LabeledSeriesSet| {
                let mut l = s.original_labels().unwrap_or(&[]).to_vec();
                l.sort_unstable();
                l.dedup();
                l
            };
            if universe(&train) != universe(&test) {
                return Err(Error::InvalidConfig(format!(
                    "train/test label sets differ: {:?} vs {:?}",
                    universe(&train),
                    universe(&test)
                )));
            }
            (train, test)
        }
    };
    if d.normalize {
        zscore_normalize(&mut train, &mut [&mut test]);
    }
    Ok((train, test))
}

pub fn fit_target(cfg: &ExperimentConfig, train: &LabeledSeriesSet) -> Result<TrainedClassifier> {
    let seed = derive_seed(cfg.seed, streams::TRAIN);
    let spec = cfg
        .target_model
        .spec(train.n_classes(), train.series_length());
    TrainedClassifier::build(spec, seed)?.fit(train, &cfg.target_model.train_config(seed))
}

pub fn train_discriminator(
    cfg: &ExperimentConfig,
    train: &LabeledSeriesSet,
    target: &TrainedClassifier,
) -> Result<(TrainedClassifier, CurriculumReport)> {
    let seed = derive_seed(cfg.seed, streams::DISC_DATA);
    let spec = cfg.discriminator.model.spec(2, train.series_length());
    let curriculum = cfg.discriminator.curriculum_config(seed);
    curriculum_train(spec, train, target, &cfg.attack.base, &curriculum)
}

#[derive(Clone, Debug)]
pub struct CombinationRecord {
    pub index: usize,
    pub assignments: BTreeMap<String, String>,
    pub attack: AttackConfig,
    pub report: MetricsReport,
    pub queries: usize,
}

impl CombinationRecord {
    pub fn selected(&self) -> &IterationRecord {
        self.report.selected()
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub combinations: Vec<CombinationRecord>,
    pub curriculum: CurriculumReport,
    pub clean_macro_f1: f64,
    pub wall_clock_secs: f64,
    pub artifact_paths: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

/// The persisted view of a run; every metric in it also appears as a row
/// of results.csv.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: String,
    pub attack_kind: AttackKind,
    pub clean_macro_f1: f64,
    pub curriculum: CurriculumReport,
    pub combinations: Vec<ComboSummary>,
    /// Combination indices ordered by selected Successfulness, best first.
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComboSummary {
    pub index: usize,
    pub assignments: BTreeMap<String, String>,
    pub attack: AttackConfig,
    pub queries: usize,
    pub selected_iteration: usize,
    pub selection_reason: SelectionReason,
    pub efficiency: f64,
    pub concealability: f64,
    pub successfulness: f64,
}

struct ComboOutcome {
    report: MetricsReport,
    queries: usize,
    selected_snapshot: Tensor,
}

fn run_combination(
    target: &TrainedClassifier,
    disc: &TrainedClassifier,
    test: &LabeledSeriesSet,
    combo: &AttackConfig,
    respect_floor: bool,
) -> Result<ComboOutcome> {
    let needs_disc = combo.aggregation.kind != AggregationKind::None;
    let traj = run_attack(
        target,
        needs_disc.then_some(disc),
        test.features(),
        test.labels(),
        combo,
    )?;
    let mut rows = Vec::with_capacity(traj.snapshots.len().saturating_sub(1));
    for (t, snap) in traj.snapshots.iter().enumerate().skip(1) {
        let e = efficiency(target, snap, test.labels())?;
        let c = concealability(disc, test.features(), snap)?;
        rows.push(IterationRecord::new(t, e, c)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidAttack(
            "attack produced no iterations to score".to_string(),
        ));
    }
    let floor = if respect_floor {
        iteration_floor(combo.kind)
    } else {
        0
    };
    let selection = select_best_iteration(&rows, floor)?;
    let selected_snapshot = traj.snapshots[rows[selection.index].iteration].clone();
    Ok(ComboOutcome {
        report: MetricsReport { rows, selection },
        queries: traj.queries,
        selected_snapshot,
    })
}

/// Run the base attack config as a single combination.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let out = resolve_output_root(None, cfg.output.directory.as_deref());
    run_pipeline_in(cfg, &out)
}

pub fn run_pipeline_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    let mut base = canonicalize(&cfg.attack.base);
    if !matches!(base.kind, AttackKind::Ifgsm | AttackKind::Pgd) {
        base.seed = derive_seed(derive_seed(cfg.seed, streams::ATTACK), 0);
    }
    let point = GridPoint {
        index: 0,
        assignments: BTreeMap::new(),
        config: base,
    };
    execute(cfg, out_dir, vec![point])
}

/// Expand the grid section and run every combination; identical effective
/// configs are executed once and shared.
pub fn grid_search(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let out = resolve_output_root(None, cfg.output.directory.as_deref());
    grid_search_in(cfg, &out)
}

pub fn grid_search_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("grid subcommand needs a [grid] section".to_string()))?;
    let points = expand_grid(
        &cfg.attack.base,
        grid,
        derive_seed(cfg.seed, streams::ATTACK),
    )?;
    execute(cfg, out_dir, points)
}

fn execute(cfg: &ExperimentConfig, out_dir: &Path, points: Vec<GridPoint>) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;

    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))
        .map_err(|e| e.in_stage("persist"))?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run did not finish\n")
        .map_err(|e| Error::io(format!("writing {}", marker.display()), e))
        .map_err(|e| e.in_stage("persist"))?;

    let (train, test) = load_data(cfg).map_err(|e| e.in_stage("data"))?;
    let target = fit_target(cfg, &train).map_err(|e| e.in_stage("fit-target"))?;
    let clean_macro_f1 = target
        .predict_labels(test.features())
        .and_then(|preds| f1(test.labels(), &preds, Averaging::Macro))
        .map_err(|e| e.in_stage("fit-target"))?;
    let (disc, curriculum) =
        train_discriminator(cfg, &train, &target).map_err(|e| e.in_stage("curriculum"))?;

    // Deduplicate identical effective configs, keeping first-seen order.
    let mut unique: Vec<AttackConfig> = Vec::new();
    let mut slot_of_point: Vec<usize> = Vec::with_capacity(points.len());
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for p in &points {
        let key = serde_json::to_string(&p.config).expect("attack config serializes");
        let next = unique.len();
        let slot = *seen.entry(key).or_insert_with(|| {
            unique.push(p.config.clone());
            next
        });
        slot_of_point.push(slot);
    }
    let outcomes: Vec<Result<ComboOutcome>> = unique
        .par_iter()
        .map(|c| run_combination(&target, &disc, &test, c, cfg.attack.respect_iteration_floor))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        results.push(outcome.map_err(|e| e.in_stage("attack"))?);
    }

    let combinations: Vec<CombinationRecord> = points
        .iter()
        .map(|p| {
            let r = &results[slot_of_point[p.index]];
            CombinationRecord {
                index: p.index,
                assignments: p.assignments.clone(),
                attack: p.config.clone(),
                report: r.report.clone(),
                queries: r.queries,
            }
        })
        .collect();

    let mut record = RunRecord {
        config_hash: cfg.config_hash(),
        combinations,
        curriculum,
        clean_macro_f1,
        wall_clock_secs: 0.0,
        artifact_paths: Vec::new(),
        out_dir: out_dir.to_path_buf(),
    };
    persist(cfg, out_dir, &test, &target, &disc, &mut record, &results, &slot_of_point)
        .map_err(|e| e.in_stage("persist"))?;

    fs::remove_file(&marker)
        .map_err(|e| Error::io(format!("removing {}", marker.display()), e))
        .map_err(|e| e.in_stage("persist"))?;
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

pub fn results_csv(combinations: &[CombinationRecord]) -> String {
    let mut out = String::from("combination,iteration,efficiency,concealability,successfulness\n");
    for combo in combinations {
        for row in &combo.report.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                combo.index, row.iteration, row.efficiency, row.concealability, row.successfulness
            );
        }
    }
    out
}

pub fn build_summary(cfg: &ExperimentConfig, dataset: &str, record: &RunRecord) -> RunSummary {
    let combinations: Vec<ComboSummary> = record
        .combinations
        .iter()
        .map(|c| {
            let sel = c.selected();
            ComboSummary {
                index: c.index,
                assignments: c.assignments.clone(),
                attack: c.attack.clone(),
                queries: c.queries,
                selected_iteration: sel.iteration,
                selection_reason: c.report.selection.reason,
                efficiency: sel.efficiency,
                concealability: sel.concealability,
                successfulness: sel.successfulness,
            }
        })
        .collect();
    let mut ranking: Vec<usize> = (0..combinations.len()).collect();
    ranking.sort_by(|&a, &b| {
        combinations[b]
            .successfulness
            .partial_cmp(&combinations[a].successfulness)
            .expect("metrics are finite")
            .then(a.cmp(&b))
    });
    RunSummary {
        config_hash: record.config_hash.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        dataset: dataset.to_string(),
        attack_kind: cfg.attack.base.kind,
        clean_macro_f1: record.clean_macro_f1,
        curriculum: record.curriculum.clone(),
        combinations,
        ranking,
    }
}

#[allow(clippy::too_many_arguments)]
fn persist(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    test: &LabeledSeriesSet,
    target: &TrainedClassifier,
    disc: &TrainedClassifier,
    record: &mut RunRecord,
    results: &[ComboOutcome],
    slot_of_point: &[usize],
) -> Result<()> {
    let add = |record: &mut RunRecord, path: PathBuf| record.artifact_paths.push(path);

    let clean_path = out_dir.join("test_clean.tsv");
    test.write_tsv(&clean_path)?;
    add(record, clean_path);

    let target_path = out_dir.join("target_params.json");
    target.save_parameters(&target_path)?;
    add(record, target_path);
    let disc_path = out_dir.join("disc_params.json");
    disc.save_parameters(&disc_path)?;
    add(record, disc_path);

    for combo in &record.combinations {
        let snapshot = &results[slot_of_point[combo.index]].selected_snapshot;
        let attacked = LabeledSeriesSet::from_parts(
            format!("{}-attacked-{}", test.name(), combo.index),
            snapshot.clone(),
            test.labels().to_vec(),
            test.n_classes(),
        )?;
        let path = out_dir.join(format!("combo_{:03}_attacked.tsv", combo.index));
        attacked.write_tsv(&path)?;
        record.artifact_paths.push(path);
    }

    if cfg.output.formats.contains(&OutputFormat::Csv) {
        let path = out_dir.join("results.csv");
        fs::write(&path, results_csv(&record.combinations))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        add(record, path);
    }
    if cfg.output.formats.contains(&OutputFormat::Json) {
        let summary = build_summary(cfg, test.name(), record);
        let path = out_dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        add(record, path);
    }
    if cfg.output.formats.contains(&OutputFormat::Svg) {
        let n_rows = cfg.output.plot_series.min(test.len());
        for combo in &record.combinations {
            let snapshot = &results[slot_of_point[combo.index]].selected_snapshot;
            for row in 0..n_rows {
                let path = out_dir.join(format!("combo_{:03}_row_{row:02}.svg", combo.index));
                emit_plot(
                    test.features().row(row),
                    snapshot.row(row),
                    &path,
                    cfg.output.plot_truncate,
                )?;
                record.artifact_paths.push(path);
            }
        }
    }
    Ok(())
}

/// One clean/attacked pair scored at a single point (the evaluate
/// subcommand's output).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvaluationScores {
    pub efficiency: f64,
    pub concealability: f64,
    pub successfulness: f64,
}

pub fn evaluate_sets(
    target: &TrainedClassifier,
    disc: &TrainedClassifier,
    clean: &LabeledSeriesSet,
    attacked: &Tensor,
) -> Result<EvaluationScores> {
    let e = efficiency(target, attacked, clean.labels())?;
    let c = concealability(disc, clean.features(), attacked)?;
    Ok(EvaluationScores {
        efficiency: e,
        concealability: c,
        successfulness: successfulness(c, e)?,
    })
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const SVG_ML: f64 = 58.0;
const SVG_MR: f64 = 16.0;
const SVG_MT: f64 = 34.0;
const SVG_MB: f64 = 46.0;

/// Overlay the original and attacked series as two polylines. `truncate`
/// keeps only the first n points of both.
pub fn emit_plot(
    original: &[f64],
    attacked: &[f64],
    path: &Path,
    truncate: Option<usize>,
) -> Result<()> {
    if original.len() != attacked.len() {
        return Err(Error::shape(
            "plot series",
            format!("{}", original.len()),
            format!("{}", attacked.len()),
        ));
    }
    if original.is_empty() {
        return Err(Error::EmptyInput("plot"));
    }
    let n = truncate.unwrap_or(original.len()).min(original.len());
    if n == 0 {
        return Err(Error::InvalidConfig(
            "plot truncation must keep at least one point".to_string(),
        ));
    }
    let original = &original[..n];
    let attacked = &attacked[..n];

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in original.iter().chain(attacked) {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput("plot"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = SVG_W - SVG_ML - SVG_MR;
    let plot_h = SVG_H - SVG_MT - SVG_MB;
    let x = |i: usize| {
        if n == 1 {
            SVG_ML + plot_w / 2.0
        } else {
            SVG_ML + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| SVG_MT + plot_h * (hi - v) / (hi - lo);
    let polyline = |series: &[f64]| {
        let mut pts = String::new();
        for (i, &v) in series.iter().enumerate() {
            if i > 0 {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", x(i), y(v));
        }
        pts
    };

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(svg, r#"  <rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    // Axes.
    let x0 = SVG_ML;
    let x1 = SVG_W - SVG_MR;
    let y0 = SVG_MT;
    let y1 = SVG_H - SVG_MB;
    let _ = writeln!(
        svg,
        r##"  <line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="#444" stroke-width="1"/>"##
    );
    let _ = writeln!(
        svg,
        r##"  <line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#444" stroke-width="1"/>"##
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">time step</text>"#,
        (x0 + x1) / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"  <text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">value</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    // Tick labels: series bounds and index range.
    let _ = writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{:.3}</text>"#,
        x0 - 4.0,
        y0 + 4.0,
        hi
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{:.3}</text>"#,
        x0 - 4.0,
        y1 + 4.0,
        lo
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{x0:.2}" y="{:.2}" font-size="11" text-anchor="middle">0</text>"#,
        y1 + 16.0
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{x1:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
        y1 + 16.0,
        n - 1
    );
    // Series.
    let _ = writeln!(
        svg,
        r##"  <polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        polyline(original)
    );
    let _ = writeln!(
        svg,
        r##"  <polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##,
        polyline(attacked)
    );
    // Legend.
    let lx = x1 - 120.0;
    let _ = writeln!(
        svg,
        r##"  <rect x="{lx}" y="{y0}" width="12" height="3" fill="#1f77b4"/>"##
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" font-size="12">original</text>"#,
        lx + 18.0,
        y0 + 5.0
    );
    let _ = writeln!(
        svg,
        r##"  <rect x="{lx}" y="{:.2}" width="12" height="3" fill="#d62728"/>"##,
        y0 + 16.0
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" font-size="12">attacked</text>"#,
        lx + 18.0,
        y0 + 21.0
    );
    let _ = writeln!(svg, "</svg>");

    fs::write(path, svg).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn smoke_config_text(out_dir: &Path) -> String {
        format!(
            r#"
seed = 11

[data]
kind = "two_sine"
n_per_class = 8
n_test_per_class = 6
length = 16
noise_std = 0.3

[target_model]
family = "mlp"
hidden = [8]
epochs = 8
batch_size = 8
learning_rate = 0.01

[discriminator]
family = "mlp"
hidden = [8]
epochs = 6
batch_size = 8
learning_rate = 0.01
epsilon_init = 0.3
max_rounds = 2
finetune_epochs = 3

[attack]
kind = "ifgsm"
epsilon = 0.03
iterations = 10
respect_iteration_floor = false

[output]
directory = "{}"
"#,
            out_dir.display()
        )
    }

    #[test]
    fn toml_round_trip_applies_defaults() {
        let dir = tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(&smoke_config_text(dir.path())).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.discriminator.decay, 0.8);
        assert_eq!(cfg.discriminator.accuracy_threshold, 0.9);
        assert!(cfg.data.normalize);
        assert!(!cfg.attack.respect_iteration_floor);
        assert_eq!(cfg.attack.base.aggregation.kind, AggregationKind::None);
        assert_eq!(
            cfg.output.formats,
            vec![OutputFormat::Csv, OutputFormat::Json]
        );
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a = ExperimentConfig::from_toml_str(
            r#"
seed = 1
[data]
kind = "two_sine"
n_per_class = 4
length = 8
noise_std = 0.1
[target_model]
family = "mlp"
hidden = [4]
epochs = 1
batch_size = 4
learning_rate = 0.01
[discriminator]
family = "mlp"
hidden = [4]
epochs = 1
batch_size = 4
learning_rate = 0.01
epsilon_init = 0.1
[attack]
kind = "ifgsm"
epsilon = 0.01
iterations = 2
"#,
        )
        .unwrap();
        let b = ExperimentConfig::from_toml_str(
            r#"
seed = 1
[data]
noise_std = 0.1
length = 8
n_per_class = 4
kind = "two_sine"
[target_model]
learning_rate = 0.01
batch_size = 4
epochs = 1
hidden = [4]
family = "mlp"
[discriminator]
epsilon_init = 0.1
learning_rate = 0.01
batch_size = 4
epochs = 1
hidden = [4]
family = "mlp"
[attack]
iterations = 2
epsilon = 0.01
kind = "ifgsm"
"#,
        )
        .unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.seed = 2;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    fn base_ifgsm() -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Ifgsm,
            epsilon: 0.03,
            iterations: 5,
            eta: 0.0,
            t_max: 0,
            sgm_l2: 0.0,
            sgm_smooth: 0.0,
            aggregation: AggregationSpec::sum(1.0),
            seed: 0,
        }
    }

    #[test]
    fn grid_of_four_by_six_has_24_combinations() {
        let grid = GridSection {
            epsilon: Some(vec![0.005, 0.01, 0.03, 0.05]),
            alpha: Some(vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0]),
            ..GridSection::default()
        };
        let points = expand_grid(&base_ifgsm(), &grid, 3).unwrap();
        assert_eq!(points.len(), 24);
        // Row-major: epsilon (declared first) varies slowest.
        assert_eq!(points[0].assignments["epsilon"], "0.005");
        assert_eq!(points[0].assignments["alpha"], "0.001");
        assert_eq!(points[5].assignments["alpha"], "100");
        assert_eq!(points[6].assignments["epsilon"], "0.01");
        // All 24 effective configs are distinct here (sum uses alpha).
        let mut keys: Vec<String> = points
            .iter()
            .map(|p| serde_json::to_string(&p.config).unwrap())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 24);
    }

    #[test]
    fn vanilla_combinations_collapse_to_one_execution() {
        let mut base = base_ifgsm();
        base.aggregation = AggregationSpec::none();
        let grid = GridSection {
            alpha: Some(vec![0.1, 1.0, 10.0]),
            ..GridSection::default()
        };
        let points = expand_grid(&base, &grid, 3).unwrap();
        assert_eq!(points.len(), 3);
        let keys: Vec<String> = points
            .iter()
            .map(|p| serde_json::to_string(&p.config).unwrap())
            .collect();
        assert_eq!(keys[0], keys[1]);
        assert_eq!(keys[1], keys[2]);
    }

    #[test]
    fn invalid_grid_combination_is_rejected() {
        let mut base = base_ifgsm();
        base.kind = AttackKind::Simba;
        base.t_max = 10;
        let grid = GridSection {
            aggregation: Some(vec![AggregationKind::Hypercone]),
            ..GridSection::default()
        };
        assert!(expand_grid(&base, &grid, 0).is_err());
        let grid = GridSection {
            epsilon: Some(vec![]),
            ..GridSection::default()
        };
        assert!(expand_grid(&base_ifgsm(), &grid, 0).is_err());
    }

    #[test]
    fn smoke_pipeline_emits_csv_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let cfg = ExperimentConfig::from_toml_str(&smoke_config_text(dir.path())).unwrap();

        let record = run_pipeline_in(&cfg, &out_a).unwrap();
        assert_eq!(record.combinations.len(), 1);
        assert_eq!(record.combinations[0].report.rows.len(), 10);
        assert!(!out_a.join(INCOMPLETE_MARKER).exists());

        let csv_a = fs::read(out_a.join("results.csv")).unwrap();
        let lines = csv_a.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        assert_eq!(lines, 11, "header plus ten iteration rows");

        let record_b = run_pipeline_in(&cfg, &out_b).unwrap();
        let csv_b = fs::read(out_b.join("results.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(
            fs::read(out_a.join("summary.json")).unwrap(),
            fs::read(out_b.join("summary.json")).unwrap()
        );
        assert_eq!(record.config_hash, record_b.config_hash);
        assert!(record.wall_clock_secs > 0.0);
    }

    #[test]
    fn grid_of_one_point_matches_run_pipeline() {
        let dir = tempdir().unwrap();
        let out_single = dir.path().join("single");
        let out_grid = dir.path().join("grid");
        let mut cfg = ExperimentConfig::from_toml_str(&smoke_config_text(dir.path())).unwrap();
        run_pipeline_in(&cfg, &out_single).unwrap();
        cfg.grid = Some(GridSection {
            epsilon: Some(vec![cfg.attack.base.epsilon]),
            ..GridSection::default()
        });
        grid_search_in(&cfg, &out_grid).unwrap();
        assert_eq!(
            fs::read(out_single.join("results.csv")).unwrap(),
            fs::read(out_grid.join("results.csv")).unwrap()
        );
    }

    #[test]
    fn summary_matches_csv_and_recomputes() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = ExperimentConfig::from_toml_str(&smoke_config_text(dir.path())).unwrap();
        cfg.grid = Some(GridSection {
            aggregation: Some(vec![AggregationKind::None, AggregationKind::Sum]),
            alpha: Some(vec![0.1, 1.0]),
            ..GridSection::default()
        });
        let record = grid_search_in(&cfg, &out).unwrap();
        assert_eq!(record.combinations.len(), 4);

        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.combinations.len(), 4);
        assert_eq!(summary.ranking.len(), 4);
        let csv = fs::read_to_string(out.join("results.csv")).unwrap();
        for combo in &summary.combinations {
            // S recomputes from its stored E and C.
            let s = successfulness(combo.concealability, combo.efficiency).unwrap();
            assert_eq!(s, combo.successfulness);
            // The selected row is present verbatim in the CSV.
            let row = format!(
                "{},{},{},{},{}",
                combo.index,
                combo.selected_iteration,
                combo.efficiency,
                combo.concealability,
                combo.successfulness
            );
            assert!(csv.lines().any(|l| l == row), "missing row: {row}");
        }
        // Ranking is sorted by S, best first.
        for pair in summary.ranking.windows(2) {
            assert!(
                summary.combinations[pair[0]].successfulness
                    >= summary.combinations[pair[1]].successfulness
            );
        }
    }

    #[test]
    fn failed_stage_leaves_incomplete_marker() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("broken");
        let mut cfg = ExperimentConfig::from_toml_str(&smoke_config_text(dir.path())).unwrap();
        cfg.data.kind = DataKind::Ucr;
        cfg.data.train_path = Some(dir.path().join("missing_train.tsv"));
        cfg.data.test_path = Some(dir.path().join("missing_test.tsv"));
        let err = run_pipeline_in(&cfg, &out).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "data", .. }));
        assert!(out.join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn output_root_resolution_prefers_flag() {
        let flag = PathBuf::from("/tmp/flagged");
        let cfg_dir = PathBuf::from("/tmp/config");
        assert_eq!(
            resolve_output_root(Some(&flag), Some(&cfg_dir)),
            PathBuf::from("/tmp/flagged")
        );
        if std::env::var_os(OUT_ENV_VAR).is_none() {
            assert_eq!(
                resolve_output_root(None, Some(&cfg_dir)),
                PathBuf::from("/tmp/config")
            );
            assert_eq!(resolve_output_root(None, None), PathBuf::from("runs"));
        }
    }

    #[test]
    fn plot_is_valid_xml_and_honors_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("overlay.svg");
        let original: Vec<f64> = (0..80).map(|i| (i as f64 * 0.2).sin()).collect();
        let attacked: Vec<f64> = original.iter().map(|v| v + 0.05).collect();
        emit_plot(&original, &attacked, &path, Some(50)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let polylines: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .collect();
        assert_eq!(polylines.len(), 2);
        for p in &polylines {
            let points = p.attribute("points").unwrap();
            assert_eq!(points.split_whitespace().count(), 50);
        }

        // Identical series still produce a valid file.
        let path2 = dir.path().join("flat.svg");
        emit_plot(&original, &original, &path2, None).unwrap();
        let text2 = fs::read_to_string(&path2).unwrap();
        roxmltree::Document::parse(&text2).unwrap();
    }

    #[test]
    fn plot_rejects_mismatched_lengths() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.svg");
        assert!(emit_plot(&[1.0, 2.0], &[1.0], &path, None).is_err());
        assert!(emit_plot(&[], &[], &path, None).is_err());
        assert!(emit_plot(&[1.0], &[1.0], &path, Some(0)).is_err());
    }
}
