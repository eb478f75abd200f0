//! Attack implementations: iFGSM, PGD, SimBA, and the smooth-gradient
//! baseline, each with optional concealment regularization.
//!
//! Every attack records the full per-iteration trajectory so metric curves
//! and best-iteration selection can run afterwards. Gradient attacks are
//! deterministic given the models and config; SimBA and the smooth-gradient
//! init are deterministic given the config seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    clamp_neg_log_d, harmonic_objective, harmonic_partials, hypercone_direction, sum_objective,
    AggregationKind, AggregationSpec,
};
use crate::error::{Error, Result};
use crate::models::TrainedClassifier;
use crate::rng::{derive_seed, rng_from, streams};
use crate::tensor::Tensor;

/// Which attack family a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Ifgsm,
    Pgd,
    Simba,
    Sgm,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Ifgsm => "ifgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Simba => "simba",
            AttackKind::Sgm => "sgm",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Step size (ifgsm, simba) or perturbation clip (sgm).
    pub epsilon: f64,
    /// Gradient-attack iteration count T.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// l-inf radius for pgd.
    #[serde(default)]
    pub eta: f64,
    /// SimBA iteration budget; queries are at most twice this.
    #[serde(default)]
    pub t_max: usize,
    #[serde(default)]
    pub sgm_l2: f64,
    #[serde(default)]
    pub sgm_smooth: f64,
    #[serde(default)]
    pub aggregation: AggregationSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    1
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAttack(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        match self.kind {
            AttackKind::Ifgsm | AttackKind::Sgm => {
                if self.iterations == 0 {
                    return bad("iterations must be >= 1".to_string());
                }
            }
            AttackKind::Pgd => {
                if self.iterations == 0 {
                    return bad("iterations must be >= 1".to_string());
                }
                if !(self.eta > 0.0) {
                    return bad(format!("pgd needs eta > 0, got {}", self.eta));
                }
            }
            AttackKind::Simba => {}
        }
        if self.sgm_l2 < 0.0 || self.sgm_smooth < 0.0 {
            return bad("sgm coefficients must be >= 0".to_string());
        }
        self.aggregation.validate()?;
        if self.aggregation.kind == AggregationKind::Hypercone
            && !matches!(self.kind, AttackKind::Ifgsm | AttackKind::Pgd)
        {
            return bad(format!(
                "hypercone aggregation is gradient-only, not available for {}",
                self.kind
            ));
        }
        Ok(())
    }
}

/// Per-iteration perturbed inputs; snapshot 0 is always the clean input.
#[derive(Clone, Debug)]
pub struct AttackTrajectory {
    pub snapshots: Vec<Tensor>,
    /// Batched target-model queries (SimBA only; 0 for gradient attacks).
    pub queries: usize,
    pub config: AttackConfig,
}

impl AttackTrajectory {
    pub fn final_snapshot(&self) -> &Tensor {
        self.snapshots.last().expect("at least the clean snapshot")
    }
}

/// Dispatch on `cfg.kind`. `disc` must be present exactly when the config
/// asks for concealment aggregation.
pub fn run_attack(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    cfg.validate()?;
    check_attack_inputs(target, disc, x, y, cfg)?;
    match cfg.kind {
        AttackKind::Ifgsm | AttackKind::Pgd => signed_gradient_attack(target, disc, x, y, cfg),
        AttackKind::Simba => simba_impl(target, disc, x, y, cfg),
        AttackKind::Sgm => sgm_impl(target, disc, x, y, cfg),
    }
}

pub fn ifgsm_attack(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    expect_kind(cfg, AttackKind::Ifgsm)?;
    run_attack(target, disc, x, y, cfg)
}

pub fn pgd_attack(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    expect_kind(cfg, AttackKind::Pgd)?;
    run_attack(target, disc, x, y, cfg)
}

/// Black-box SimBA; the concealment-regularized variant goes through
/// [`run_attack`] with a discriminator.
pub fn simba_attack(
    target: &TrainedClassifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    expect_kind(cfg, AttackKind::Simba)?;
    run_attack(target, None, x, y, cfg)
}

pub fn sgm_attack(
    target: &TrainedClassifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    expect_kind(cfg, AttackKind::Sgm)?;
    run_attack(target, None, x, y, cfg)
}

fn expect_kind(cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::InvalidAttack(format!(
            "config is for {}, called the {} entry point",
            cfg.kind, kind
        )));
    }
    Ok(())
}

fn check_attack_inputs(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != target.spec().input_length {
        return Err(Error::shape(
            "attack input",
            format!("[n,{}]", target.spec().input_length),
            format!("{:?}", x.shape()),
        ));
    }
    if x.shape()[0] == 0 {
        return Err(Error::EmptyInput("attack"));
    }
    if y.len() != x.shape()[0] {
        return Err(Error::shape(
            "attack labels",
            format!("{}", x.shape()[0]),
            format!("{}", y.len()),
        ));
    }
    let k = target.spec().n_classes;
    if let Some(&label) = y.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: k,
        });
    }
    let needs_disc = cfg.aggregation.kind != AggregationKind::None;
    match (needs_disc, disc) {
        (true, None) => {
            return Err(Error::InvalidAttack(
                "concealment aggregation requires a discriminator".to_string(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::InvalidAttack(
                "discriminator given but aggregation is `none`".to_string(),
            ))
        }
        _ => {}
    }
    if let Some(d) = disc {
        if d.spec().input_length != target.spec().input_length {
            return Err(Error::shape(
                "discriminator input",
                format!("{}", target.spec().input_length),
                format!("{}", d.spec().input_length),
            ));
        }
    }
    Ok(())
}

fn onehot(y: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[y.len(), k]);
    for (i, &label) in y.iter().enumerate() {
        t.values_mut()[i * k + label] = 1.0;
    }
    t
}

/// One-hot "attacked" targets for reading -log D(x) off the discriminator's
/// cross-entropy graph.
fn attacked_onehot(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        t.values_mut()[i * 2 + 1] = 1.0;
    }
    t
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample gradient of the aggregated objective with respect to x.
fn concealed_gradient(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    targets: &Tensor,
    agg: &AggregationSpec,
) -> Result<Tensor> {
    let (a_vals, g_target) = target.per_sample_loss_and_grad(x, targets)?;
    if agg.kind == AggregationKind::None {
        return Ok(g_target);
    }
    let disc = disc.expect("checked by check_attack_inputs");
    let n = x.shape()[0];
    let width = x.shape()[1];
    let (d_raw, g_disc) = disc.per_sample_loss_and_grad(x, &attacked_onehot(n))?;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let t_row = g_target.row(i);
        let d_row = g_disc.row(i);
        let (d_val, in_range) = clamp_neg_log_d(d_raw[i]);
        let o = &mut out.values_mut()[i * width..(i + 1) * width];
        match agg.kind {
            AggregationKind::Sum => {
                for j in 0..width {
                    let gd = if in_range { d_row[j] } else { 0.0 };
                    o[j] = t_row[j] + agg.alpha * gd;
                }
            }
            AggregationKind::Harmonic => {
                let (pa, pd) = harmonic_partials(a_vals[i], d_val, agg.gamma);
                for j in 0..width {
                    let gd = if in_range { d_row[j] } else { 0.0 };
                    o[j] = pa * t_row[j] + pd * gd;
                }
            }
            AggregationKind::Hypercone => {
                let masked;
                let gd: &[f64] = if in_range {
                    d_row
                } else {
                    masked = vec![0.0; width];
                    &masked
                };
                match hypercone_direction(t_row, gd, agg.delta) {
                    Ok(v) => o.copy_from_slice(&v),
                    Err(Error::DegenerateGradient(_)) => o.copy_from_slice(t_row),
                    Err(e) => return Err(e),
                }
            }
            AggregationKind::None => unreachable!("handled above"),
        }
    }
    Ok(out)
}

/// iFGSM and PGD share the signed-ascent loop; PGD scales the step to
/// lambda = 2.5 eta / T and projects every iterate back into the l-inf ball.
fn signed_gradient_attack(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    let targets = onehot(y, target.spec().n_classes);
    let step = match cfg.kind {
        AttackKind::Pgd => 2.5 * cfg.eta / cfg.iterations as f64,
        _ => cfg.epsilon,
    };
    let mut snapshots = Vec::with_capacity(cfg.iterations + 1);
    snapshots.push(x.clone());
    let mut cur = x.clone();
    for _ in 0..cfg.iterations {
        let grad = concealed_gradient(target, disc, &cur, &targets, &cfg.aggregation)?;
        for (c, g) in cur.values_mut().iter_mut().zip(grad.values()) {
            *c += step * sign(*g);
        }
        if cfg.kind == AttackKind::Pgd {
            for (c, orig) in cur.values_mut().iter_mut().zip(x.values()) {
                *c = c.clamp(orig - cfg.eta, orig + cfg.eta);
            }
        }
        snapshots.push(cur.clone());
    }
    Ok(AttackTrajectory {
        snapshots,
        queries: 0,
        config: cfg.clone(),
    })
}

/// Per-sample SimBA state: a shuffled coordinate pool that refills once
/// exhausted, so picks are without replacement within each pass.
struct CoordinatePool {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl CoordinatePool {
    fn new(length: usize, seed: u64, sample: usize) -> Self {
        let mut rng = rng_from(derive_seed(seed, sample as u64), streams::ATTACK);
        let mut order: Vec<usize> = (0..length).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let q = self.order[self.cursor];
        self.cursor += 1;
        q
    }
}

/// The acceptance objective SimBA maximizes: plain -log p_y for the vanilla
/// attack, or the aggregate of it with -log D when concealment is on.
fn simba_objective(
    agg: &AggregationSpec,
    p_y: f64,
    disc_score: Option<f64>,
) -> Result<f64> {
    let a = -(p_y.max(f64::MIN_POSITIVE).ln());
    match agg.kind {
        AggregationKind::None => Ok(a),
        AggregationKind::Sum => {
            let (d, _) = clamp_neg_log_d(-(disc_score.expect("disc required").ln()));
            sum_objective(a, d, agg.alpha)
        }
        AggregationKind::Harmonic => {
            let (d, _) = clamp_neg_log_d(-(disc_score.expect("disc required").ln()));
            harmonic_objective(a, d, agg.gamma)
        }
        AggregationKind::Hypercone => unreachable!("rejected at validation"),
    }
}

fn simba_impl(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    let n = x.shape()[0];
    let length = x.shape()[1];
    let eps = cfg.epsilon;
    let aggregated = cfg.aggregation.kind != AggregationKind::None;

    let mut cur = x.clone();
    let mut snapshots = vec![x.clone()];
    let mut queries = 0usize;

    let probs = target.predict_proba(&cur)?;
    let k = target.spec().n_classes;
    let mut p_cur: Vec<f64> = (0..n).map(|i| probs.values()[i * k + y[i]]).collect();
    let mut done: Vec<bool> = (0..n).map(|i| argmax(probs.row(i)) != y[i]).collect();
    let mut obj_cur: Vec<f64> = if aggregated {
        let scores = disc.expect("checked").attacked_scores(&cur)?;
        (0..n)
            .map(|i| simba_objective(&cfg.aggregation, p_cur[i], Some(scores[i])))
            .collect::<Result<_>>()?
    } else {
        p_cur
            .iter()
            .map(|&p| simba_objective(&cfg.aggregation, p, None))
            .collect::<Result<_>>()?
    };

    let mut pools: Vec<CoordinatePool> = (0..n)
        .map(|i| CoordinatePool::new(length, cfg.seed, i))
        .collect();

    for _ in 0..cfg.t_max {
        let pending: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if pending.is_empty() {
            break;
        }
        let coords: Vec<usize> = pending.iter().map(|&i| pools[i].next()).collect();

        let mut accepted: Vec<Option<f64>> = vec![None; pending.len()];
        for step_sign in [1.0, -1.0] {
            let open: Vec<usize> = (0..pending.len())
                .filter(|&j| accepted[j].is_none())
                .collect();
            if open.is_empty() {
                break;
            }
            let mut candidate = Tensor::zeros(&[open.len(), length]);
            for (row, &j) in open.iter().enumerate() {
                let i = pending[j];
                let slice = &mut candidate.values_mut()[row * length..(row + 1) * length];
                slice.copy_from_slice(cur.row(i));
                slice[coords[j]] += step_sign * eps;
            }
            let probs = target.predict_proba(&candidate)?;
            queries += 1;
            let scores = if aggregated {
                Some(disc.expect("checked").attacked_scores(&candidate)?)
            } else {
                None
            };
            for (row, &j) in open.iter().enumerate() {
                let i = pending[j];
                let p_new = probs.values()[row * k + y[i]];
                let improved = if aggregated {
                    let s = scores.as_ref().expect("aggregated")[row];
                    let o_new = simba_objective(&cfg.aggregation, p_new, Some(s))?;
                    if o_new > obj_cur[i] {
                        obj_cur[i] = o_new;
                        true
                    } else {
                        false
                    }
                } else {
                    p_new < p_cur[i]
                };
                if improved {
                    accepted[j] = Some(step_sign);
                    p_cur[i] = p_new;
                    if !aggregated {
                        obj_cur[i] = simba_objective(&cfg.aggregation, p_new, None)?;
                    }
                    if argmax(probs.row(row)) != y[i] {
                        done[i] = true;
                    }
                }
            }
        }

        for (j, step) in accepted.iter().enumerate() {
            if let Some(s) = step {
                let i = pending[j];
                let idx = i * length + coords[j];
                cur.values_mut()[idx] += s * eps;
            }
        }
        snapshots.push(cur.clone());
    }

    Ok(AttackTrajectory {
        snapshots,
        queries,
        config: cfg.clone(),
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Smoothed |u| gradient with the 1e-6 knee.
fn smooth_abs_grad(u: f64) -> f64 {
    const KNEE: f64 = 1e-6;
    u / (u * u + KNEE * KNEE).sqrt()
}

/// Ascent on KL(f(x) || f(x + delta)) minus L2 and fused-lasso penalties on
/// delta. The KL gradient vanishes at delta = 0, so delta starts from a tiny
/// seeded perturbation; snapshot 0 is still the clean input.
fn sgm_impl(
    target: &TrainedClassifier,
    disc: Option<&TrainedClassifier>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackTrajectory> {
    let _ = y;
    let n = x.shape()[0];
    let length = x.shape()[1];
    let eps = cfg.epsilon;
    let step = eps / 10.0;
    let aggregated = cfg.aggregation.kind != AggregationKind::None;

    let p_clean = target.predict_proba(x)?;
    // Entropy of each clean prediction; KL_i = CE_i - H_i.
    let k = target.spec().n_classes;
    let entropy: Vec<f64> = (0..n)
        .map(|i| {
            p_clean
                .row(i)
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum()
        })
        .collect();
    let _ = k;

    let mut rng = rng_from(cfg.seed, streams::ATTACK);
    let mut delta = Tensor::zeros(x.shape());
    for v in delta.values_mut() {
        *v = rng.gen_range(-eps / 100.0..eps / 100.0);
    }

    let mut snapshots = vec![x.clone()];
    let mut cur = x.clone();
    for (c, d) in cur.values_mut().iter_mut().zip(delta.values()) {
        *c += d;
    }

    for _ in 0..cfg.iterations {
        let (ce_vals, g_kl) = target.per_sample_loss_and_grad(&cur, &p_clean)?;
        let disc_info = if aggregated {
            let d = disc.expect("checked");
            Some(d.per_sample_loss_and_grad(&cur, &attacked_onehot(n))?)
        } else {
            None
        };

        let mut grad = Tensor::zeros(x.shape());
        for i in 0..n {
            let kl_val = (ce_vals[i] - entropy[i]).max(0.0);
            let g_row = g_kl.row(i);
            let d_slice = delta.row(i);
            let o = &mut grad.values_mut()[i * length..(i + 1) * length];

            match cfg.aggregation.kind {
                AggregationKind::None => o.copy_from_slice(g_row),
                AggregationKind::Sum => {
                    let (d_raw, g_disc) = disc_info.as_ref().expect("aggregated");
                    let (_, in_range) = clamp_neg_log_d(d_raw[i]);
                    let dg = g_disc.row(i);
                    for j in 0..length {
                        let gd = if in_range { dg[j] } else { 0.0 };
                        o[j] = g_row[j] + cfg.aggregation.alpha * gd;
                    }
                }
                AggregationKind::Harmonic => {
                    let (d_raw, g_disc) = disc_info.as_ref().expect("aggregated");
                    let (d_val, in_range) = clamp_neg_log_d(d_raw[i]);
                    let (pa, pd) = harmonic_partials(kl_val, d_val, cfg.aggregation.gamma);
                    let dg = g_disc.row(i);
                    for j in 0..length {
                        let gd = if in_range { dg[j] } else { 0.0 };
                        o[j] = pa * g_row[j] + pd * gd;
                    }
                }
                AggregationKind::Hypercone => unreachable!("rejected at validation"),
            }

            // Penalty gradients; subtracted because the loop ascends.
            for j in 0..length {
                let mut penalty = 2.0 * cfg.sgm_l2 * d_slice[j];
                if j > 0 {
                    penalty += cfg.sgm_smooth * smooth_abs_grad(d_slice[j] - d_slice[j - 1]);
                }
                if j + 1 < length {
                    penalty -= cfg.sgm_smooth * smooth_abs_grad(d_slice[j + 1] - d_slice[j]);
                }
                o[j] -= penalty;
            }
        }

        for i in 0..delta.len() {
            let updated = (delta.values()[i] + step * grad.values()[i]).clamp(-eps, eps);
            delta.values_mut()[i] = updated;
            cur.values_mut()[i] = x.values()[i] + updated;
        }
        snapshots.push(cur.clone());
    }

    Ok(AttackTrajectory {
        snapshots,
        queries: 0,
        config: cfg.clone(),
    })
}
