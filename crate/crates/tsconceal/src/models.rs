//! Classifier families, training, and parameter persistence.
//!
//! Three desk-scale families share one interface: a plain MLP, a small
//! residual 1-D CNN, and (behind the `recurrent` feature) a single gated
//! recurrent layer. A [`TrainedClassifier`] owns its parameters plus three
//! prebuilt graphs: class probabilities, mean training loss, and sum loss.
//! The sum-reduced graph matters for attacks: with independent per-row
//! losses, the rows of d(sum loss)/dx are exactly the per-sample gradients.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSeriesSet;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId};
use crate::metrics::{f1, Averaging};
use crate::rng::{rng_from, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Mlp,
    Rescnn,
    #[cfg(feature = "recurrent")]
    Recurrent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Dense widths (mlp), conv channels (rescnn), or state size (recurrent,
    /// one entry).
    pub hidden: Vec<usize>,
    /// One odd kernel size per conv block; rescnn only.
    #[serde(default)]
    pub kernel_sizes: Vec<usize>,
    pub n_classes: usize,
    pub input_length: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.input_length == 0 {
            return bad("input_length must be positive".to_string());
        }
        if self.hidden.is_empty() {
            return bad("at least one hidden layer required".to_string());
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        match self.family {
            ModelFamily::Mlp => {
                if !self.kernel_sizes.is_empty() {
                    return bad("mlp takes no kernel sizes".to_string());
                }
            }
            ModelFamily::Rescnn => {
                if self.kernel_sizes.len() != self.hidden.len() {
                    return bad(format!(
                        "need one kernel size per conv block: {} blocks, {} kernels",
                        self.hidden.len(),
                        self.kernel_sizes.len()
                    ));
                }
                if self.hidden.len() < 2 {
                    return bad("rescnn needs at least 2 conv blocks".to_string());
                }
                if self.kernel_sizes.iter().any(|&k| k % 2 == 0 || k == 0) {
                    return bad("kernel sizes must be odd".to_string());
                }
                let n = self.hidden.len();
                if self.hidden[n - 1] != self.hidden[n - 2] {
                    return bad(
                        "last two channel counts must match for the residual skip".to_string(),
                    );
                }
            }
            #[cfg(feature = "recurrent")]
            ModelFamily::Recurrent => {
                if self.hidden.len() != 1 {
                    return bad("recurrent takes a single state width".to_string());
                }
                if !self.kernel_sizes.is_empty() {
                    return bad("recurrent takes no kernel sizes".to_string());
                }
            }
        }
        Ok(())
    }

    /// Parameter names with shapes and fan-in, head parameters last.
    fn parameter_layout(&self) -> Vec<ParamInit> {
        let mut layout = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize, head: bool| {
            layout.push(ParamInit {
                name,
                shape,
                fan_in,
                head,
            });
        };
        let head_in = match self.family {
            ModelFamily::Mlp => {
                let mut d_in = self.input_length;
                for (i, &width) in self.hidden.iter().enumerate() {
                    push(format!("dense{i}_w"), vec![d_in, width], d_in, false);
                    push(format!("dense{i}_b"), vec![width], d_in, false);
                    d_in = width;
                }
                d_in
            }
            ModelFamily::Rescnn => {
                let mut c_in = 1;
                for (i, (&c_out, &k)) in self.hidden.iter().zip(&self.kernel_sizes).enumerate() {
                    push(format!("conv{i}_w"), vec![c_out, c_in, k], c_in * k, false);
                    push(format!("conv{i}_b"), vec![c_out], c_in * k, false);
                    c_in = c_out;
                }
                c_in
            }
            #[cfg(feature = "recurrent")]
            ModelFamily::Recurrent => {
                let h = self.hidden[0];
                for part in ["gate", "cand"] {
                    push(format!("{part}_wx"), vec![1, h], 1, false);
                    push(format!("{part}_wh"), vec![h, h], h, false);
                    push(format!("{part}_b"), vec![h], h, false);
                }
                h
            }
        };
        push(
            "head_w".to_string(),
            vec![head_in, self.n_classes],
            head_in,
            true,
        );
        push("head_b".to_string(), vec![self.n_classes], head_in, true);
        layout
    }
}

struct ParamInit {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GraphMode {
    Probs,
    LossMean,
    LossSum,
}

/// Graphs prebuilt from a spec. `masks` names the dropout leaves present in
/// the mean-loss (training) graph; the other two run in inference mode.
#[derive(Clone)]
struct ModelGraphs {
    probs: Graph,
    loss_mean: Graph,
    loss_sum: Graph,
    /// CE node inside `loss_sum`, for reading per-sample losses.
    per_sample_ce: NodeId,
    masks: Vec<String>,
}

fn assemble(spec: &ModelSpec, mode: GraphMode) -> (Graph, NodeId, Vec<String>) {
    let mut b = GraphBuilder::new();
    let x = b.leaf("x");
    let mut masks = Vec::new();
    let training = mode == GraphMode::LossMean && spec.dropout > 0.0;

    let features = match spec.family {
        ModelFamily::Mlp => {
            let mut h = x;
            for i in 0..spec.hidden.len() {
                let w = b.leaf(format!("dense{i}_w"));
                let bias = b.leaf(format!("dense{i}_b"));
                let lin = b.matmul(h, w);
                let lin = b.bias_add(lin, bias);
                h = b.relu(lin);
                if training {
                    let name = format!("mask{i}");
                    let mask = b.input(&name);
                    h = b.mul(h, mask);
                    masks.push(name);
                }
            }
            h
        }
        ModelFamily::Rescnn => {
            let mut cur = b.insert_axis(x, 1);
            let n_blocks = spec.hidden.len();
            let mut skip = None;
            for i in 0..n_blocks {
                let w = b.leaf(format!("conv{i}_w"));
                let bias = b.leaf(format!("conv{i}_b"));
                let conv = b.conv1d(cur, w);
                let mut pre = b.bias_add(conv, bias);
                if i + 1 == n_blocks {
                    let from = skip.expect("validated: at least 2 blocks");
                    pre = b.add(pre, from);
                }
                cur = b.relu(pre);
                if i + 2 == n_blocks {
                    skip = Some(cur);
                }
            }
            let pooled = b.mean_over_time(cur);
            if training {
                let mask = b.input("mask0");
                masks.push("mask0".to_string());
                b.mul(pooled, mask)
            } else {
                pooled
            }
        }
        #[cfg(feature = "recurrent")]
        ModelFamily::Recurrent => {
            let gate_wx = b.leaf("gate_wx");
            let gate_wh = b.leaf("gate_wh");
            let gate_b = b.leaf("gate_b");
            let cand_wx = b.leaf("cand_wx");
            let cand_wh = b.leaf("cand_wh");
            let cand_b = b.leaf("cand_b");
            let mut h: Option<NodeId> = None;
            for t in 0..spec.input_length {
                let xt = b.slice_time(x, t);
                let gx = b.matmul(xt, gate_wx);
                let cx = b.matmul(xt, cand_wx);
                let (gate_pre, cand_pre) = match h {
                    None => (gx, cx),
                    Some(h_prev) => {
                        let gh = b.matmul(h_prev, gate_wh);
                        let ch = b.matmul(h_prev, cand_wh);
                        (b.add(gx, gh), b.add(cx, ch))
                    }
                };
                let gate_pre = b.bias_add(gate_pre, gate_b);
                let cand_pre = b.bias_add(cand_pre, cand_b);
                let f = b.sigmoid(gate_pre);
                let c = b.tanh(cand_pre);
                let keep = b.affine(f, -1.0, 1.0);
                let fresh = b.mul(keep, c);
                h = Some(match h {
                    None => fresh,
                    Some(h_prev) => {
                        let carried = b.mul(f, h_prev);
                        b.add(carried, fresh)
                    }
                });
            }
            let state = h.expect("validated: input_length >= 1");
            if training {
                let mask = b.input("mask0");
                masks.push("mask0".to_string());
                b.mul(state, mask)
            } else {
                state
            }
        }
    };

    let head_w = b.leaf("head_w");
    let head_b = b.leaf("head_b");
    let lin = b.matmul(features, head_w);
    let logits = b.bias_add(lin, head_b);

    match mode {
        GraphMode::Probs => {
            let out = b.softmax(logits);
            (b.finish(out), out, masks)
        }
        GraphMode::LossMean => {
            let targets = b.input("targets");
            let ce = b.softmax_cross_entropy(logits, targets);
            let out = b.mean(ce);
            (b.finish(out), ce, masks)
        }
        GraphMode::LossSum => {
            let targets = b.input("targets");
            let ce = b.softmax_cross_entropy(logits, targets);
            let out = b.sum(ce);
            (b.finish(out), ce, masks)
        }
    }
}

impl ModelGraphs {
    fn build(spec: &ModelSpec) -> Self {
        let (probs, _, _) = assemble(spec, GraphMode::Probs);
        let (loss_mean, _, masks) = assemble(spec, GraphMode::LossMean);
        let (loss_sum, per_sample_ce, _) = assemble(spec, GraphMode::LossSum);
        Self {
            probs,
            loss_mean,
            loss_sum,
            per_sample_ce,
            masks,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many epochs without train-loss improvement; 0 = off.
    #[serde(default)]
    pub patience: usize,
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".to_string()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// A classifier: spec, parameters, training history, and prebuilt graphs.
#[derive(Clone)]
pub struct TrainedClassifier {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
    history: Vec<EpochStats>,
    seed: u64,
    graphs: ModelGraphs,
}

impl TrainedClassifier {
    /// Initialize parameters: scaled-uniform fan-in for weights, zeros for
    /// biases and the whole head, so an untrained model predicts uniformly.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from(seed, streams::INIT);
        let mut params = BTreeMap::new();
        for p in spec.parameter_layout() {
            let tensor = if p.head || p.shape.len() == 1 {
                Tensor::zeros(&p.shape)
            } else {
                let bound = 1.0 / (p.fan_in as f64).sqrt();
                let n: usize = p.shape.iter().product();
                let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(p.shape.clone(), values)?
            };
            params.insert(p.name, tensor);
        }
        let graphs = ModelGraphs::build(&spec);
        Ok(Self {
            spec,
            params,
            history: Vec::new(),
            seed,
            graphs,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.input_length {
            return Err(Error::shape(
                "model input",
                format!("[n,{}]", self.spec.input_length),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn bound(&self, x: &Tensor) -> Bindings {
        let mut b = Bindings::new();
        b.set("x", x.clone());
        for (name, value) in &self.params {
            b.set(name.clone(), value.clone());
        }
        b
    }

    /// Class probabilities, [n, n_classes]; rows sum to 1.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let bindings = self.bound(x);
        Ok(self.graphs.probs.evaluate(&bindings)?.output().clone())
    }

    /// Argmax class per row; ties resolve to the lowest index.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_proba(x)?;
        let k = self.spec.n_classes;
        Ok(probs
            .values()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect())
    }

    /// P(class 1) per row; the discriminator's "attacked" score.
    pub fn attacked_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let probs = self.predict_proba(x)?;
        let k = self.spec.n_classes;
        Ok(probs.values().chunks(k).map(|row| row[1]).collect())
    }

    /// Mean cross-entropy against one-hot or soft targets, [n, n_classes].
    pub fn mean_loss(&self, x: &Tensor, targets: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut bindings = self.bound(x);
        bindings.set("targets", targets.clone());
        for (site, name) in self.graphs.masks.iter().enumerate() {
            let shape = [x.shape()[0], self.mask_width(site)];
            bindings.set(name.clone(), Tensor::filled(&shape, 1.0));
        }
        self.graphs
            .loss_mean
            .evaluate(&bindings)?
            .output()
            .scalar_value()
    }

    /// Per-sample cross-entropy losses and their input gradients. Row i of
    /// the gradient is d(loss_i)/d(x_i): the sum reduction has no cross
    /// terms between rows.
    pub fn per_sample_loss_and_grad(
        &self,
        x: &Tensor,
        targets: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let mut bindings = self.bound(x);
        bindings.set("targets", targets.clone());
        let eval = self.graphs.loss_sum.evaluate(&bindings)?;
        let losses = eval.value(self.graphs.per_sample_ce).values().to_vec();
        let mut grads = eval.gradients_for(&["x"])?;
        let grad = grads.remove("x").expect("x is a differentiable leaf");
        Ok((losses, grad))
    }

    /// d(total loss)/dx only.
    pub fn input_gradient(&self, x: &Tensor, targets: &Tensor) -> Result<Tensor> {
        Ok(self.per_sample_loss_and_grad(x, targets)?.1)
    }

    /// Train with Adam (b1 0.9, b2 0.999, eps 1e-8) plus decoupled weight
    /// decay. Deterministic in `cfg.seed`: shuffling and dropout masks come
    /// from one derived stream.
    pub fn fit(mut self, train: &LabeledSeriesSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset(train.name().to_string()));
        }
        if train.series_length() != self.spec.input_length {
            return Err(Error::shape(
                "fit",
                format!("series length {}", self.spec.input_length),
                format!("{}", train.series_length()),
            ));
        }
        if let Some(&label) = train.labels().iter().max() {
            if label >= self.spec.n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    n_classes: self.spec.n_classes,
                });
            }
        }

        let onehot_width = self.spec.n_classes;
        let full_targets = {
            let mut t = Tensor::zeros(&[train.len(), onehot_width]);
            for (i, &label) in train.labels().iter().enumerate() {
                t.values_mut()[i * onehot_width + label] = 1.0;
            }
            t
        };

        let param_names: Vec<String> = self.params.keys().cloned().collect();
        let name_refs: Vec<&str> = param_names.iter().map(String::as_str).collect();
        let mut m: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        let mut v = m.clone();
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut step = 0usize;

        let mut rng = rng_from(cfg.seed, streams::TRAIN);
        let mut best_loss = f64::INFINITY;
        let mut stale = 0usize;
        self.history.clear();

        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }

            for chunk in order.chunks(cfg.batch_size) {
                let xb = batch_rows(train.features(), chunk);
                let tb = batch_rows(&full_targets, chunk);
                let mut bindings = self.bound(&xb);
                bindings.set("targets", tb);
                for (site, name) in self.graphs.masks.iter().enumerate() {
                    let width = self.mask_width(site);
                    bindings.set(
                        name.clone(),
                        sample_mask(&mut rng, chunk.len(), width, self.spec.dropout),
                    );
                }
                let eval = self.graphs.loss_mean.evaluate(&bindings)?;
                let grads = eval.gradients_for(&name_refs)?;

                step += 1;
                let bias1 = 1.0 - beta1.powi(step as i32);
                let bias2 = 1.0 - beta2.powi(step as i32);
                for name in &param_names {
                    let g = &grads[name];
                    let p = self.params.get_mut(name).expect("known parameter");
                    let mv = m.get_mut(name).expect("state");
                    let vv = v.get_mut(name).expect("state");
                    for i in 0..p.len() {
                        let gi = g.values()[i];
                        mv.values_mut()[i] = beta1 * mv.values()[i] + (1.0 - beta1) * gi;
                        vv.values_mut()[i] = beta2 * vv.values()[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = mv.values()[i] / bias1;
                        let v_hat = vv.values()[i] / bias2;
                        let decayed =
                            p.values()[i] - cfg.learning_rate * cfg.weight_decay * p.values()[i];
                        p.values_mut()[i] =
                            decayed - cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }

            let loss = self.mean_loss(train.features(), &full_targets)?;
            let preds = self.predict_labels(train.features())?;
            let macro_f1 = f1(train.labels(), &preds, Averaging::Macro)?;
            self.history.push(EpochStats {
                epoch,
                loss,
                macro_f1,
            });

            if loss < best_loss - 1e-12 {
                best_loss = loss;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
        Ok(self)
    }

    fn mask_width(&self, site: usize) -> usize {
        match self.spec.family {
            ModelFamily::Mlp => self.spec.hidden[site],
            ModelFamily::Rescnn => *self.spec.hidden.last().expect("validated"),
            #[cfg(feature = "recurrent")]
            ModelFamily::Recurrent => self.spec.hidden[0],
        }
    }

    /// Write parameters as JSON {name: {shape, values}}.
    pub fn save_parameters(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.params)?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Replace every parameter after checking names and shapes against the
    /// spec's layout.
    pub fn with_parameters(mut self, params: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, fresh) in &self.params {
            let Some(stored) = params.get(name) else {
                return Err(Error::InvalidSpec(format!("missing parameter `{name}`")));
            };
            if stored.shape() != fresh.shape() {
                return Err(Error::shape(
                    format!("parameter `{name}`"),
                    format!("{:?}", fresh.shape()),
                    format!("{:?}", stored.shape()),
                ));
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::InvalidSpec(format!("unknown parameter `{extra}`")));
        }
        self.params = params;
        Ok(self)
    }

    /// Rebuild a classifier from a spec and a saved parameter file.
    pub fn load_parameters(spec: ModelSpec, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let loaded: BTreeMap<String, Tensor> = serde_json::from_str(&text)?;
        Self::build(spec, 0)?.with_parameters(loaded)
    }
}

fn batch_rows(source: &Tensor, indices: &[usize]) -> Tensor {
    let width = source.shape()[1];
    let mut values = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        values.extend_from_slice(source.row(i));
    }
    Tensor::new(vec![indices.len(), width], values).expect("consistent rows")
}

fn sample_mask(rng: &mut impl Rng, n: usize, width: usize, dropout: f64) -> Tensor {
    let keep = 1.0 - dropout;
    let values = (0..n * width)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![n, width], values).expect("mask shape")
}
