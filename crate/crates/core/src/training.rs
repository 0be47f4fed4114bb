//! Joint multi-task training, evaluation, and freeze-and-extend transfer.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::backbone::{self, ScalePyramid};
use crate::data::{batch_images, batch_target, Sample};
use crate::error::{Error, Result};
use crate::heads::{HeadOptions, TaskSpec};
use crate::losses::{task_loss, MetricAccumulator, TaskPerformance};
use crate::model::Medusa;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub backbone_lr_scale: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub intermediate_loss_weight: f64,
    /// Per-task loss weights; tasks not listed weigh 1.
    pub task_loss_weights: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 1e-4,
            backbone_lr_scale: 0.1,
            poly_power: 0.9,
            batch_size: 8,
            seed: 0,
            intermediate_loss_weight: 1.0,
            task_loss_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.poly_power > 0.0) {
            return bad(format!("poly_power {} must be positive", self.poly_power));
        }
        // Zero is allowed for both: it pins the backbone, or drops the
        // auxiliary per-scale losses.
        if !(self.backbone_lr_scale >= 0.0) || !(self.intermediate_loss_weight >= 0.0) {
            return bad("backbone_lr_scale and intermediate_loss_weight must be non-negative".into());
        }
        if let Some((t, w)) = self.task_loss_weights.iter().find(|(_, w)| !(**w > 0.0)) {
            return bad(format!("loss weight {w} of task {t} must be positive"));
        }
        Ok(())
    }

    pub fn task_weight(&self, task: &str) -> f64 {
        self.task_loss_weights.get(task).copied().unwrap_or(1.0)
    }
}

/// `base_lr · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("poly_lr needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, keyed by parameter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub base_lr: f64,
    /// Multiplier applied to parameters under the backbone prefix.
    pub backbone_lr_scale: f64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(base_lr: f64, backbone_lr_scale: f64) -> Self {
        Self {
            step: 0,
            base_lr,
            backbone_lr_scale,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One Adam update of `params` at learning rate `lr`. Frozen entries are
/// skipped; a trainable entry without a gradient is an error.
pub fn adam_step(store: &mut ParamStore, params: &[ParamId], state: &mut OptimState, lr: f64) -> Result<()> {
    for &id in params {
        let p = store.get(id);
        if p.requires_grad() && p.grad.is_none() {
            return Err(Error::InvalidState(format!("parameter {} has no gradient", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for &id in params {
        let p = store.get_mut(id);
        if !p.requires_grad() {
            continue;
        }
        let scale = if p.name.starts_with(backbone::PREFIX) {
            state.backbone_lr_scale
        } else {
            1.0
        };
        let step_lr = lr * scale;
        let n = p.value.numel();
        let (m, v) = state.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.grad.as_ref().expect("checked above").data();
        for (((w, g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= step_lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub task: TaskSpec,
    pub loss: f64,
    pub metric: f64,
}

impl TaskEval {
    pub fn performance(&self) -> TaskPerformance {
        TaskPerformance {
            task: self.task.clone(),
            value: self.metric,
        }
    }
}

/// Per-epoch training losses and the final held-out evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub final_eval: Vec<TaskEval>,
}

impl TrainReport {
    /// Mean training loss of `task` per epoch.
    pub fn loss_curve(&self, task: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.task == task && r.split == "train")
            .map(|r| r.loss)
            .collect()
    }

    pub fn performances(&self) -> Vec<TaskPerformance> {
        self.final_eval.iter().map(TaskEval::performance).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: &str) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "task", "split", "loss", "metric"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.task.clone(),
                r.split.clone(),
                format!("{:.17e}", r.loss),
                r.metric.map(|m| format!("{m:.17e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-sample backbone features of a frozen backbone. Valid only while the
/// backbone stays frozen, since the pyramid is then a fixed function of the
/// image.
#[derive(Default)]
struct FeatureCache {
    features: HashMap<usize, Vec<Tensor>>,
}

impl FeatureCache {
    fn pyramid(
        &mut self,
        model: &mut Medusa,
        tape: &mut Tape,
        samples: &[Sample],
        batch: &[usize],
    ) -> Result<ScalePyramid> {
        for &i in batch {
            if !self.features.contains_key(&i) {
                let mut t = Tape::new();
                let x = t.constant(Tensor::stack_batch(&[&samples[i].image])?);
                let pyr = model.extract_features(&mut t, x, false)?;
                let feats = pyr.features.iter().map(|&v| t.value(v).clone()).collect();
                self.features.insert(i, feats);
            }
        }
        let levels = self.features[&batch[0]].len();
        let features = (0..levels)
            .map(|l| {
                let items: Vec<&Tensor> = batch.iter().map(|i| &self.features[i][l]).collect();
                Ok(tape.constant(Tensor::stack_batch(&items)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScalePyramid { features })
    }
}

fn task_specs(model: &Medusa, tasks: &[String]) -> Result<Vec<TaskSpec>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train".into()));
    }
    tasks
        .iter()
        .map(|t| {
            model
                .head(t)
                .map(|h| h.spec().clone())
                .ok_or_else(|| Error::InvalidArgument(format!("model has no head named {t}")))
        })
        .collect()
}

/// Parameters the optimizer updates: the backbone (unless frozen) and the
/// heads of `tasks`, minus the auxiliary predictors when their loss is off.
fn trainable_params(model: &Medusa, tasks: &[String], config: &TrainConfig) -> Vec<ParamId> {
    let prefixes: Vec<String> = tasks.iter().map(|t| format!("{}{t}.", crate::heads::PREFIX)).collect();
    model
        .store()
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .filter(|(_, p)| {
            p.name.starts_with(backbone::PREFIX) || prefixes.iter().any(|pre| p.name.starts_with(pre.as_str()))
        })
        .filter(|(_, p)| config.intermediate_loss_weight > 0.0 || !p.name.contains(".init_pred."))
        .map(|(id, _)| id)
        .collect()
}

/// Trains the backbone and the heads named in `tasks` jointly, then scores
/// every task on `eval`.
///
/// The per-step objective is `Σ_t w_t · (loss_t + λ · Σ_s loss_{t,s})`, where
/// `loss_{t,s}` are the auxiliary per-scale losses and `λ` is
/// `intermediate_loss_weight`. When the backbone is frozen its features are
/// computed once per sample and reused.
pub fn train_multitask(
    model: &mut Medusa,
    tasks: &[String],
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let specs = task_specs(model, tasks)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, s) in train.iter().enumerate() {
        for spec in &specs {
            s.label(spec.label)
                .map_err(|_| Error::InvalidData(format!("training sample {i} has no label for task {}", spec.name)))?;
        }
    }

    let params = trainable_params(model, tasks, config);
    let frozen_backbone = model.backbone_frozen();
    let mut cache = FeatureCache::default();
    let mut state = OptimState::new(config.base_lr, config.backbone_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; specs.len()];
        for batch in order.chunks(config.batch_size) {
            let lr = poly_lr(step, total_steps, config.base_lr, config.poly_power)?;
            let mut tape = Tape::new();
            let outputs = if frozen_backbone {
                let pyr = cache.pyramid(model, &mut tape, train, batch)?;
                model.forward_heads(&mut tape, &pyr, Some(tasks), true)?
            } else {
                let refs: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
                let images = batch_images(&refs)?;
                model.forward(&mut tape, &images, Some(tasks), true)?
            };

            let refs: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let mut total = None;
            for (k, (spec, (_, out))) in specs.iter().zip(&outputs).enumerate() {
                let target = batch_target(&refs, spec.label)?;
                let main = task_loss(&mut tape, spec.loss_kind, out.prediction, &target)?;
                sums[k] += tape.value(main).data()[0];
                let mut task_total = main;
                if config.intermediate_loss_weight > 0.0 {
                    for &init in &out.initial {
                        let aux = task_loss(&mut tape, spec.loss_kind, init, &target)?;
                        let aux = tape.scale(aux, config.intermediate_loss_weight);
                        task_total = tape.add(task_total, aux)?;
                    }
                }
                let weighted = tape.scale(task_total, config.task_weight(&spec.name));
                total = Some(match total {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted)?,
                });
            }
            let total = total.expect("at least one task");
            let value = tape.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    detail: format!("total loss {value}"),
                });
            }
            model.store_mut().zero_grad();
            tape.backward(total, model.store_mut())?;
            adam_step(model.store_mut(), &params, &mut state, lr)?;
            step += 1;
        }
        for (spec, sum) in specs.iter().zip(&sums) {
            report.rows.push(ReportRow {
                epoch,
                task: spec.name.clone(),
                split: "train".into(),
                loss: sum / batches_per_epoch as f64,
                metric: None,
            });
        }
    }
    model.store_mut().zero_grad();

    if !eval.is_empty() {
        report.final_eval = evaluate(model, tasks, eval, config.batch_size)?;
        for e in &report.final_eval {
            report.rows.push(ReportRow {
                epoch: config.epochs,
                task: e.task.name.clone(),
                split: "eval".into(),
                loss: e.loss,
                metric: Some(e.metric),
            });
        }
    }
    Ok(report)
}

/// Scores the heads named in `tasks` on `samples` in inference mode.
pub fn evaluate(model: &mut Medusa, tasks: &[String], samples: &[Sample], batch_size: usize) -> Result<Vec<TaskEval>> {
    let specs = task_specs(model, tasks)?;
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs samples and a positive batch size".into(),
        ));
    }
    let mut accs: Vec<MetricAccumulator> = specs.iter().map(MetricAccumulator::for_task).collect();
    let mut loss_sums = vec![0.0; specs.len()];
    let mut weight = 0.0;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = batch_images(&refs)?;
        let mut tape = Tape::new();
        let outputs = model.forward(&mut tape, &images, Some(tasks), false)?;
        for (k, (spec, (_, out))) in specs.iter().zip(&outputs).enumerate() {
            let target = batch_target(&refs, spec.label)?;
            let loss = task_loss(&mut tape, spec.loss_kind, out.prediction, &target)?;
            loss_sums[k] += tape.value(loss).data()[0] * chunk.len() as f64;
            accs[k].update(tape.value(out.prediction), &target)?;
        }
        weight += chunk.len() as f64;
    }
    specs
        .into_iter()
        .zip(accs)
        .zip(loss_sums)
        .map(|((task, acc), loss)| {
            Ok(TaskEval {
                task,
                loss: loss / weight,
                metric: acc.finish()?,
            })
        })
        .collect()
}

/// Freezes the backbone and all existing heads.
pub fn freeze_backbone(model: &mut Medusa) {
    model.freeze_backbone();
}

/// Attaches fresh heads to a frozen model and trains only them.
pub fn attach_and_train_heads(
    model: &mut Medusa,
    new_tasks: &[(TaskSpec, HeadOptions)],
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if !model.backbone_frozen() {
        return Err(Error::InvalidState("transfer requires a frozen backbone".into()));
    }
    for (i, (spec, _)) in new_tasks.iter().enumerate() {
        if model.head(&spec.name).is_some() || new_tasks[..i].iter().any(|(s, _)| s.name == spec.name) {
            return Err(Error::InvalidArgument(format!(
                "a head named {} already exists",
                spec.name
            )));
        }
    }
    for (spec, options) in new_tasks {
        model.add_head(spec.clone(), *options)?;
    }
    let names: Vec<String> = new_tasks.iter().map(|(s, _)| s.name.clone()).collect();
    train_multitask(model, &names, train, eval, config)
}

/// Single-head form of [`attach_and_train_heads`].
pub fn attach_and_train_head(
    model: &mut Medusa,
    new_task: TaskSpec,
    options: HeadOptions,
    train: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    attach_and_train_heads(model, &[(new_task, options)], train, eval, config)
}
