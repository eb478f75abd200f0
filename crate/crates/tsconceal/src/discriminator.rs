//! Original-vs-perturbed datasets and the curriculum that trains a
//! discriminator against progressively weaker attacks.
//!
//! The curriculum starts with a strong, easy-to-spot perturbation and keeps
//! shrinking the attack strength by a fixed factor while the discriminator
//! still clears an accuracy bar on held-out data. The result is a detector
//! sensitive to small perturbations, which the concealed attacks then have
//! to evade.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationKind;
use crate::attacks::{run_attack, AttackConfig, AttackKind};
use crate::data::LabeledSeriesSet;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, TrainConfig, TrainedClassifier};
use crate::rng::{derive_seed, streams};
use crate::tensor::Tensor;

/// Balanced set of clean rows (label 0) and their perturbed counterparts
/// (label 1). Row n + i is the attacked version of row i.
#[derive(Clone, Debug)]
pub struct AdversarialDataset {
    set: LabeledSeriesSet,
    provenance: AttackConfig,
}

impl AdversarialDataset {
    pub fn series(&self) -> &LabeledSeriesSet {
        &self.set
    }

    pub fn provenance(&self) -> &AttackConfig {
        &self.provenance
    }

    /// Number of clean/perturbed pairs (half the row count).
    pub fn n_pairs(&self) -> usize {
        self.set.len() / 2
    }

    pub fn into_series_set(self) -> LabeledSeriesSet {
        self.set
    }
}

/// Attack a dataset with a vanilla (non-regularized) config and stack the
/// final snapshots under the originals.
pub fn build_adversarial_dataset(
    target: &TrainedClassifier,
    attack_cfg: &AttackConfig,
    originals: &LabeledSeriesSet,
) -> Result<AdversarialDataset> {
    if attack_cfg.aggregation.kind != AggregationKind::None {
        return Err(Error::InvalidAttack(
            "discriminator data must come from a vanilla attack, not a regularized one"
                .to_string(),
        ));
    }
    let traj = run_attack(target, None, originals.features(), originals.labels(), attack_cfg)?;
    let perturbed = traj.final_snapshot();
    let n = originals.len();
    let length = originals.series_length();
    let mut values = Vec::with_capacity(2 * n * length);
    values.extend_from_slice(originals.features().values());
    values.extend_from_slice(perturbed.values());
    let features = Tensor::new(vec![2 * n, length], values)?;
    let mut labels = vec![0usize; n];
    labels.extend(std::iter::repeat(1).take(n));
    let set = LabeledSeriesSet::from_parts(
        format!("{}-vs-{}", originals.name(), attack_cfg.kind),
        features,
        labels,
        2,
    )?;
    Ok(AdversarialDataset {
        set,
        provenance: attack_cfg.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Starting attack strength; large enough that round 0 is easy.
    pub epsilon_init: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Halve the attack iteration budget relative to the evaluation attack,
    /// so discriminator data is weakly perturbed.
    #[serde(default = "default_true")]
    pub reduce_iterations: bool,
    /// Halve the discriminator's hidden widths (useful for pgd, whose
    /// perturbations are hardest to detect with a large model).
    #[serde(default)]
    pub half_width: bool,
    pub train: TrainConfig,
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

fn default_true() -> bool {
    true
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon_init > 0.0) {
            return bad(format!("epsilon_init must be > 0, got {}", self.epsilon_init));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must be in (0,1), got {}", self.decay));
        }
        if !(self.accuracy_threshold > 0.5 && self.accuracy_threshold <= 1.0) {
            return bad(format!(
                "accuracy threshold must be in (0.5,1], got {}",
                self.accuracy_threshold
            ));
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be >= 1".to_string());
        }
        if self.finetune_epochs == 0 {
            return bad("finetune_epochs must be >= 1".to_string());
        }
        Ok(())
    }
}

/// What the curriculum did, round by round. Persisted into run summaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurriculumReport {
    /// Attack strength per trained round; geometric with ratio `decay`.
    pub epsilon_schedule: Vec<f64>,
    /// Held-out accuracy measured right after each round's training.
    pub round_accuracies: Vec<f64>,
    pub last_trained_epsilon: f64,
    /// First strength whose held-out accuracy failed to clear the
    /// threshold; absent when the loop ran out of rounds still passing.
    pub first_failed_epsilon: Option<f64>,
    /// Set when even the round-0 (strongest) attack was not detected.
    pub weak_initial_fit: bool,
}

/// The vanilla data-generation variant of an evaluation attack: strip the
/// concealment aggregation, set the strength, and optionally halve the
/// iteration budget. sgm additionally drops its own regularizers so only
/// the clip remains.
fn curriculum_attack(eval: &AttackConfig, strength: f64, reduce: bool, seed: u64) -> AttackConfig {
    let mut cfg = eval.clone();
    cfg.aggregation = crate::aggregation::AggregationSpec::none();
    cfg.seed = seed;
    match cfg.kind {
        AttackKind::Pgd => cfg.eta = strength,
        _ => cfg.epsilon = strength,
    }
    if cfg.kind == AttackKind::Sgm {
        cfg.sgm_l2 = 0.0;
        cfg.sgm_smooth = 0.0;
    }
    if reduce {
        match cfg.kind {
            AttackKind::Simba => cfg.t_max = (cfg.t_max / 2).max(1),
            _ => cfg.iterations = (cfg.iterations / 2).max(1),
        }
    }
    cfg
}

fn halve_width(mut spec: ModelSpec) -> ModelSpec {
    for h in &mut spec.hidden {
        *h = (*h / 2).max(1);
    }
    spec
}

fn holdout_accuracy(disc: &TrainedClassifier, set: &LabeledSeriesSet) -> Result<f64> {
    let preds = disc.predict_labels(set.features())?;
    let correct = preds.iter().zip(set.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / set.len() as f64)
}

/// Iterative curriculum: train at `epsilon_init`, then keep decaying the
/// strength, regenerating the perturbed half, and finetuning while held-out
/// accuracy stays above the threshold and rounds remain. The round that
/// breaks the loop is recorded but never retrained on.
pub fn curriculum_train(
    disc_spec: ModelSpec,
    originals: &LabeledSeriesSet,
    target: &TrainedClassifier,
    eval_attack: &AttackConfig,
    cfg: &CurriculumConfig,
) -> Result<(TrainedClassifier, CurriculumReport)> {
    cfg.validate()?;
    eval_attack.validate()?;
    let spec = if cfg.half_width {
        halve_width(disc_spec)
    } else {
        disc_spec
    };
    if spec.n_classes != 2 {
        return Err(Error::InvalidSpec(format!(
            "discriminator must be binary, got {} classes",
            spec.n_classes
        )));
    }
    if spec.input_length != target.spec().input_length {
        return Err(Error::shape(
            "discriminator input",
            format!("{}", target.spec().input_length),
            format!("{}", spec.input_length),
        ));
    }
    if originals.len() < 2 {
        return Err(Error::InvalidConfig(
            "curriculum needs at least 2 series for a held-out split".to_string(),
        ));
    }

    let data_seed = derive_seed(cfg.train.seed, streams::DISC_DATA);
    let mut disc = TrainedClassifier::build(spec, cfg.train.seed)?;
    let mut schedule = Vec::new();
    let mut accuracies = Vec::new();
    let mut first_failed_epsilon = None;
    let mut weak_initial_fit = false;
    let mut strength = cfg.epsilon_init;

    for round in 0..cfg.max_rounds {
        if round > 0 {
            strength *= cfg.decay;
        }
        let attack_cfg = curriculum_attack(
            eval_attack,
            strength,
            cfg.reduce_iterations,
            derive_seed(data_seed, 2 * round as u64),
        );
        let adv = build_adversarial_dataset(target, &attack_cfg, originals)?;
        let (train_set, heldout) = adv
            .series()
            .split_holdout(0.2, derive_seed(data_seed, 2 * round as u64 + 1))?;
        let round_train = TrainConfig {
            epochs: if round == 0 {
                cfg.train.epochs
            } else {
                cfg.finetune_epochs
            },
            seed: derive_seed(cfg.train.seed, round as u64),
            ..cfg.train.clone()
        };
        disc = disc.fit(&train_set, &round_train)?;
        let acc = holdout_accuracy(&disc, &heldout)?;
        schedule.push(strength);
        accuracies.push(acc);
        if acc <= cfg.accuracy_threshold {
            if round == 0 {
                weak_initial_fit = acc < cfg.accuracy_threshold;
            }
            first_failed_epsilon = Some(strength);
            break;
        }
    }

    let report = CurriculumReport {
        last_trained_epsilon: *schedule.last().expect("max_rounds >= 1"),
        epsilon_schedule: schedule,
        round_accuracies: accuracies,
        first_failed_epsilon,
        weak_initial_fit,
    };
    Ok((disc, report))
}

/// P(perturbed) per row, clamped away from 0 and 1 so -log D stays finite.
pub fn disc_score(disc: &TrainedClassifier, x: &Tensor) -> Result<Vec<f64>> {
    if disc.spec().n_classes != 2 {
        return Err(Error::InvalidSpec(format!(
            "discriminator must be binary, got {} classes",
            disc.spec().n_classes
        )));
    }
    let scores = disc.attacked_scores(x)?;
    Ok(scores
        .into_iter()
        .map(|p| p.clamp(1e-7, 1.0 - 1e-7))
        .collect())
}
