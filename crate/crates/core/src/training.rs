//! The optimization loop: augment, forward, match, loss, backward, AdamW.
//!
//! Every sample of a step draws its augmentation and dropout from its own
//! generator seeded by `(seed, step, slot)`, and gradients are summed in
//! slot order, so results do not depend on how many threads run the batch.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    build_cost_matrix, compute_loss, hungarian_match, softmax_rows, Assignment, LossBreakdown, LossConfig,
};
use crate::autograd::Graph;
use crate::data::{augment, AugmentConfig, Cell, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, Detection, EvalConfig, EvalReport};
use crate::model::{save_checkpoint, Model, ModelInput, ModelOutput};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Runs each batch on one thread.
    pub strict_deterministic: bool,
    /// Steps between evaluations on the validation split; 0 evaluates only
    /// after the last step.
    pub eval_every: usize,
    /// Multiply the learning rate by `lr_decay_factor` every
    /// `lr_decay_every` steps; 0 keeps it constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            strict_deterministic: true,
            eval_every: 100,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            augment: true,
            augmentation: AugmentConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive (use evaluate for an evaluation-only run)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("AdamW betas must lie in [0, 1) and epsilon must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
        }
    }
}

/// Loss, assignment and parameter gradients for one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub assignment: Assignment,
    pub loss: LossBreakdown,
    pub output: ModelOutput,
    pub grads: BTreeMap<String, Tensor>,
}

fn assign(output: &ModelOutput, gts: &[Cell], cfg: &LossConfig) -> Result<Assignment> {
    let probs = softmax_rows(&output.candidate_logits);
    hungarian_match(&build_cost_matrix(&output.candidate_points, &probs, gts, cfg.tau)?)
}

/// One forward/backward pass. With `fixed` the matcher is skipped and the
/// given assignment is used; with `rng` dropout is active.
pub fn loss_and_gradients<R: Rng>(
    model: &Model,
    input: &ModelInput,
    gts: &[Cell],
    cfg: &LossConfig,
    fixed: Option<&Assignment>,
    rng: Option<&mut R>,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let vars = model.forward(&mut g, input, rng)?;
    let output = ModelOutput::read(&g, &vars, model.config().interval);
    if !output.candidate_logits.all_finite() || !output.candidate_points.iter().all(|p| p.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            detail: "non-finite network output".into(),
        });
    }
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => assign(&output, gts, cfg)?,
    };
    let lg = compute_loss(&output.candidate_points, &output.candidate_logits, gts, &assignment, cfg)?;
    let back = g.backward(vec![(vars.candidate_points, lg.d_points), (vars.candidate_logits, lg.d_logits)]);
    let grads = g
        .params()
        .map(|(name, v)| {
            let grad = back
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            (name.to_string(), grad)
        })
        .collect();
    Ok(SampleGrad {
        assignment,
        loss: lg.breakdown,
        output,
        grads,
    })
}

/// Evaluation-mode loss without gradients.
pub fn evaluate_loss(
    model: &Model,
    input: &ModelInput,
    gts: &[Cell],
    cfg: &LossConfig,
    fixed: Option<&Assignment>,
) -> Result<(Assignment, LossBreakdown)> {
    let output = model.infer(input)?;
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => assign(&output, gts, cfg)?,
    };
    let lg = compute_loss(&output.candidate_points, &output.candidate_logits, gts, &assignment, cfg)?;
    Ok((assignment, lg.breakdown))
}

/// AdamW state.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    step: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, p) in model.params_mut().iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                *w -= lr * (update + cfg.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// One line of the JSON-lines history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(flatten)]
    pub train_loss: LossBreakdown,
    pub macro_f1: f64,
    pub macro_ap: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model,
    /// Parameters with the best validation macro F1 (the last model when no
    /// validation split was given).
    pub best: Model,
    pub best_step: usize,
    pub best_macro_f1: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn slot_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng.random()
}

/// Batch-mean loss and gradients for one step.
fn batch_step(
    model: &Model,
    batch: &[&Sample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let run = |(slot, s): (usize, &&Sample)| -> Result<SampleGrad> {
        let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(cfg.seed, step, slot));
        let aug;
        let sample = if cfg.augment {
            aug = augment(s, &cfg.augmentation, &mut rng);
            &aug
        } else {
            *s
        };
        let input = ModelInput {
            views: sample.views.clone(),
        };
        loss_and_gradients(model, &input, &sample.cells, &cfg.loss, None, Some(&mut rng))
    };
    let results: Vec<Result<SampleGrad>> = if cfg.strict_deterministic {
        batch.iter().enumerate().map(run).collect()
    } else {
        batch.par_iter().enumerate().map(run).collect()
    };
    let n = batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let r = r.map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step, detail },
            e => e,
        })?;
        loss.cls_loss += r.loss.cls_loss / n;
        loss.loc_loss += r.loss.loc_loss / n;
        loss.total += r.loss.total / n;
        for (name, mut gr) in r.grads {
            gr.scale_inplace(1.0 / n);
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&gr),
                None => {
                    grads.insert(name, gr);
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Detections for every sample at `threshold`, plus images per second.
pub fn predict(model: &Model, samples: &[Sample], threshold: f64) -> Result<(Vec<Vec<Detection>>, f64)> {
    let start = Instant::now();
    let dets = samples
        .iter()
        .map(|s| {
            let out = model.infer(&ModelInput { views: s.views.clone() })?;
            Ok(out.detections(threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64();
    let ips = if secs > 0.0 { samples.len() as f64 / secs } else { f64::INFINITY };
    Ok((dets, ips))
}

/// Predicts at confidence 0 and scores against the samples' cells.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    let (dets, ips) = predict(model, samples, 0.0)?;
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for (i, (s, d)) in samples.iter().zip(dets).enumerate() {
        let key = format!("{i:06}_{}", s.name);
        preds.insert(key.clone(), d);
        gts.insert(key, s.cells.clone());
    }
    let mut report = evaluate_dataset(&preds, &gts, cfg)?;
    report.images_per_second = Some(ips);
    Ok(report)
}

/// Trains `model` on `train_set`.
///
/// With `out_dir`, writes `history.jsonl` (one line per evaluation),
/// `best.ckpt` and `last.ckpt`. `on_step` sees every step's record.
pub fn train(
    mut model: Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in train_set.iter().chain(val_set) {
        model.check_input(&ModelInput { views: s.views.clone() })?;
    }
    let mut history = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("history.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new();
    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best = model.clone();
    let mut best_step = 0;
    let mut best_f1: Option<f64> = None;

    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(&train_set[order.pop().expect("refilled")]);
        }
        let (loss, grads) = batch_step(&model, &batch, cfg, step)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {:?}", loss),
            });
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient for `{name}`"),
            });
        }
        let lr = cfg.lr_at(step);
        opt.update(&mut model, &grads, lr, cfg);
        let rec = StepRecord { step, lr, loss };
        on_step(&rec);
        steps.push(rec);

        let last = step + 1 == cfg.max_steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if !val_set.is_empty() && (due || last) {
            let report = evaluate(&model, val_set, eval_cfg)?;
            let rec = EvalRecord {
                step: step + 1,
                train_loss: loss,
                macro_f1: report.macro_f1,
                macro_ap: report.macro_ap,
            };
            if let Some(h) = history.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(h, "{line}").map_err(|e| Error::io(out_dir.unwrap().join("history.jsonl"), e))?;
            }
            if best_f1.is_none_or(|b| report.macro_f1 > b) {
                best_f1 = Some(report.macro_f1);
                best = model.clone();
                best_step = step + 1;
            }
            evals.push(rec);
        }
    }
    if val_set.is_empty() {
        best = model.clone();
        best_step = cfg.max_steps;
    }
    if let Some(dir) = out_dir {
        if let Some(mut h) = history {
            h.flush().map_err(|e| Error::io(dir.join("history.jsonl"), e))?;
        }
        save_checkpoint(&dir.join("best.ckpt"), &best)?;
        save_checkpoint(&dir.join("last.ckpt"), &model)?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_step,
        best_macro_f1: best_f1,
        steps,
        evals,
    })
}
