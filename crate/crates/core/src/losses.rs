//! Training losses, evaluation metrics and the relative multi-task
//! performance measure (Δ-MTL).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::heads::TaskSpec;

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    L1,
    CrossEntropy,
    /// BCE with weight `pos_weight` on the positive term and
    /// `1 - pos_weight` on the negative term.
    WeightedBce {
        pos_weight: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    Miou,
    BceError,
}

impl MetricKind {
    pub fn lower_is_better(self) -> bool {
        match self {
            MetricKind::Rmse | MetricKind::BceError => true,
            MetricKind::Miou => false,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Miou => "miou",
            MetricKind::BceError => "bce_error",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(MetricKind::Rmse),
            "miou" => Ok(MetricKind::Miou),
            "bce_error" => Ok(MetricKind::BceError),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Ground truth for one batch of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Regression or binary maps, shaped like the prediction.
    Dense(Tensor),
    /// Class ids in N×H×W order.
    Classes(Vec<usize>),
}

struct L1Fn {
    n: f64,
}

impl Function for L1Fn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let s = g[0] / self.n;
        let dp: Vec<f64> = p
            .iter()
            .zip(t)
            .map(|(p, t)| match p.partial_cmp(t) {
                Some(std::cmp::Ordering::Greater) => s,
                Some(std::cmp::Ordering::Less) => -s,
                _ => 0.0,
            })
            .collect();
        let dt = needs[1].then(|| dp.iter().map(|v| -v).collect());
        vec![needs[0].then_some(dp), dt]
    }
}

/// Mean absolute error.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(shape_err!(
            "l1_loss: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    let (p, t) = (tape.value(pred).data(), tape.value(target).data());
    let n = p.len() as f64;
    let loss = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(tape.push(Tensor::scalar(loss), &[pred, target], L1Fn { n }))
}

struct CrossEntropyFn {
    /// Softmax probabilities, N×K×H×W.
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    plane: usize,
    count: f64,
}

impl Function for CrossEntropyFn {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut grad = vec![0.0; self.probs.len()];
        if self.count == 0.0 {
            return vec![Some(grad)];
        }
        let s = g[0] / self.count;
        let (k, plane) = (self.classes, self.plane);
        for (pix, &label) in self.labels.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let (b, i) = (pix / plane, pix % plane);
            for c in 0..k {
                let idx = (b * k + c) * plane + i;
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad[idx] = s * (self.probs[idx] - onehot);
            }
        }
        vec![Some(grad)]
    }
}

/// Softmax cross-entropy over the channel axis of N×K×H×W logits, averaged
/// over pixels whose label is not `ignore_index`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
    let (n, k, h, w) = tape.value(logits).dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(shape_err!(
            "cross_entropy: {} labels for {n}×{h}×{w} logits",
            labels.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l >= k) {
        return Err(Error::InvalidLabel(format!("class {bad} outside 0..{k}")));
    }
    let labels: Vec<usize> = labels
        .iter()
        .map(|&l| if l == ignore_index { IGNORE_INDEX } else { l })
        .collect();
    let x = tape.value(logits).data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (pix, &label) in labels.iter().enumerate() {
        let (b, i) = (pix / plane, pix % plane);
        let idx = |c: usize| (b * k + c) * plane + i;
        let max = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (x[idx(c)] - max).exp()).sum();
        for c in 0..k {
            probs[idx(c)] = (x[idx(c)] - max).exp() / z;
        }
        if label != IGNORE_INDEX {
            total += max + z.ln() - x[idx(label)];
            count += 1;
        }
    }
    let loss = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(tape.push(
        Tensor::scalar(loss),
        &[logits],
        CrossEntropyFn {
            probs,
            labels,
            classes: k,
            plane,
            count: count as f64,
        },
    ))
}

struct WeightedBceFn {
    targets: Vec<f64>,
    pos_weight: f64,
}

impl Function for WeightedBceFn {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let s = g[0] / x.len() as f64;
        let p = self.pos_weight;
        vec![Some(
            x.iter()
                .zip(&self.targets)
                .map(|(&x, &t)| {
                    let sg = sigmoid(x);
                    -s * (p * t * (1.0 - sg) - (1.0 - p) * (1.0 - t) * sg)
                })
                .collect(),
        )]
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn weighted_bce_value(logits: &[f64], targets: &[f64], pos_weight: f64) -> f64 {
    let p = pos_weight;
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| -(p * t * log_sigmoid(x) + (1.0 - p) * (1.0 - t) * log_sigmoid(-x)))
        .sum::<f64>()
        / logits.len() as f64
}

/// Mean binary cross-entropy on logits with the positive term weighted by
/// `pos_weight` and the negative term by `1 - pos_weight`.
pub fn weighted_bce(tape: &mut Tape, logits: Var, targets: &Tensor, pos_weight: f64) -> Result<Var> {
    if !(pos_weight > 0.0 && pos_weight <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pos_weight {pos_weight} outside (0, 1]"
        )));
    }
    if tape.shape(logits) != targets.shape() {
        return Err(shape_err!(
            "weighted_bce: logits {:?} vs targets {:?}",
            tape.shape(logits),
            targets.shape()
        ));
    }
    let loss = weighted_bce_value(tape.value(logits).data(), targets.data(), pos_weight);
    Ok(tape.push(
        Tensor::scalar(loss),
        &[logits],
        WeightedBceFn {
            targets: targets.data().to_vec(),
            pos_weight,
        },
    ))
}

/// Dispatches to the loss of `kind`.
pub fn task_loss(tape: &mut Tape, kind: LossKind, pred: Var, target: &Target) -> Result<Var> {
    match (kind, target) {
        (LossKind::L1, Target::Dense(t)) => {
            let t = tape.constant(t.clone());
            l1_loss(tape, pred, t)
        }
        (LossKind::CrossEntropy, Target::Classes(labels)) => cross_entropy(tape, pred, labels, IGNORE_INDEX),
        (LossKind::WeightedBce { pos_weight }, Target::Dense(t)) => weighted_bce(tape, pred, t, pos_weight),
        (kind, _) => Err(Error::InvalidData(format!(
            "target representation does not fit loss {kind:?}"
        ))),
    }
}

/// Root mean squared error over the pixels where `valid` is set (all pixels
/// when `valid` is `None`).
pub fn rmse(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(shape_err!("rmse: mismatched lengths"));
    }
    let mut acc = RmseAccumulator::default();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if valid.map_or(true, |v| v[i]) {
            acc.push(p - g);
        }
    }
    acc.finish()
}

#[derive(Clone, Debug, Default)]
pub struct RmseAccumulator {
    sse: f64,
    count: usize,
}

impl RmseAccumulator {
    fn push(&mut self, err: f64) {
        self.sse += err * err;
        self.count += 1;
    }

    fn finish(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("rmse over an empty mask".into()));
        }
        Ok((self.sse / self.count as f64).sqrt())
    }
}

/// Per-class intersection and union counts.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            pred: vec![0; num_classes],
            gt: vec![0; num_classes],
        }
    }

    pub fn update(&mut self, pred: &[usize], gt: &[usize], ignore_index: usize) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("miou: {} predictions vs {} labels", pred.len(), gt.len()));
        }
        let k = self.gt.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g >= k || p >= k {
                return Err(Error::InvalidLabel(format!("class {} outside 0..{k}", g.max(p))));
            }
            self.gt[g] += 1;
            self.pred[p] += 1;
            if p == g {
                self.intersection[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over classes present in the ground truth or the prediction.
    pub fn finish(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.gt.len())
            .filter_map(|c| {
                let union = self.gt[c] + self.pred[c] - self.intersection[c];
                (union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("miou with every pixel ignored".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize, ignore_index: usize) -> Result<f64> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.update(pred, gt, ignore_index)?;
    acc.finish()
}

/// Per-pixel class decision: channel argmax, or `logit > 0` for a
/// single-channel (binary) output.
pub fn predicted_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let at = |c: usize| x[(b * k + c) * plane + i];
            let cls = if k == 1 {
                usize::from(at(0) > 0.0)
            } else {
                (1..k).fold(0, |best, c| if at(c) > at(best) { c } else { best })
            };
            out.push(cls);
        }
    }
    Ok(out)
}

/// Streams batches of one task into its evaluation metric.
#[derive(Clone, Debug)]
pub enum MetricAccumulator {
    Rmse(RmseAccumulator),
    Miou(IouAccumulator),
    BceError { sum: f64, count: usize, pos_weight: f64 },
}

impl MetricAccumulator {
    pub fn for_task(task: &TaskSpec) -> Self {
        match task.metric_kind {
            MetricKind::Rmse => MetricAccumulator::Rmse(RmseAccumulator::default()),
            MetricKind::Miou => MetricAccumulator::Miou(IouAccumulator::new(task.out_channels.max(2))),
            MetricKind::BceError => MetricAccumulator::BceError {
                sum: 0.0,
                count: 0,
                pos_weight: match task.loss_kind {
                    LossKind::WeightedBce { pos_weight } => pos_weight,
                    _ => 0.5,
                },
            },
        }
    }

    pub fn update(&mut self, pred: &Tensor, target: &Target) -> Result<()> {
        match (self, target) {
            (MetricAccumulator::Rmse(acc), Target::Dense(t)) => {
                if t.shape() != pred.shape() {
                    return Err(shape_err!("rmse: {:?} vs {:?}", pred.shape(), t.shape()));
                }
                for (p, g) in pred.data().iter().zip(t.data()) {
                    acc.push(p - g);
                }
                Ok(())
            }
            (MetricAccumulator::Miou(acc), target) => {
                let gt: Vec<usize> = match target {
                    Target::Classes(l) => l.clone(),
                    Target::Dense(t) => t.data().iter().map(|&v| usize::from(v > 0.5)).collect(),
                };
                acc.update(&predicted_classes(pred)?, &gt, IGNORE_INDEX)
            }
            (MetricAccumulator::BceError { sum, count, pos_weight }, Target::Dense(t)) => {
                if t.shape() != pred.shape() {
                    return Err(shape_err!("bce: {:?} vs {:?}", pred.shape(), t.shape()));
                }
                *sum += weighted_bce_value(pred.data(), t.data(), *pos_weight) * t.numel() as f64;
                *count += t.numel();
                Ok(())
            }
            _ => Err(Error::InvalidData("target representation does not fit metric".into())),
        }
    }

    pub fn finish(&self) -> Result<f64> {
        match self {
            MetricAccumulator::Rmse(acc) => acc.finish(),
            MetricAccumulator::Miou(acc) => acc.finish(),
            MetricAccumulator::BceError { sum, count, .. } => {
                if *count == 0 {
                    return Err(Error::UndefinedMetric("bce over no pixels".into()));
                }
                Ok(sum / *count as f64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPerformance {
    pub task: TaskSpec,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlDelta {
    pub tasks: Vec<String>,
    pub per_task_relative: Vec<f64>,
    pub aggregate: f64,
}

/// Mean signed relative change of each task's metric with respect to its
/// baseline; improvements are positive whichever direction the metric runs.
pub fn delta_mtl(multitask: &[TaskPerformance], baseline: &[TaskPerformance]) -> Result<MtlDelta> {
    if multitask.is_empty() || multitask.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "delta_mtl needs matching non-empty task lists, got {} and {}",
            multitask.len(),
            baseline.len()
        )));
    }
    let mut per_task_relative = Vec::with_capacity(multitask.len());
    for (m, b) in multitask.iter().zip(baseline) {
        if m.task.name != b.task.name || m.task.lower_is_better != b.task.lower_is_better {
            return Err(Error::InvalidArgument(format!(
                "task mismatch: {} vs {}",
                m.task.name, b.task.name
            )));
        }
        if b.value == 0.0 {
            return Err(Error::DivisionByZero(format!(
                "baseline of task {} is zero",
                b.task.name
            )));
        }
        let sign = if b.task.lower_is_better { -1.0 } else { 1.0 };
        per_task_relative.push(sign * (m.value - b.value) / b.value);
    }
    let aggregate = per_task_relative.iter().sum::<f64>() / per_task_relative.len() as f64;
    Ok(MtlDelta {
        tasks: multitask.iter().map(|p| p.task.name.clone()).collect(),
        per_task_relative,
        aggregate,
    })
}

/// Writes `task,metric_kind,value` rows after a `# config_hash=...` line.
pub fn write_metrics_csv<W: Write>(mut out: W, config_hash: &str, perf: &[TaskPerformance]) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "metric_kind", "value"])?;
    for p in perf {
        w.write_record([
            p.task.name.as_str(),
            &p.task.metric_kind.to_string(),
            &format!("{:.17e}", p.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(task, metric_kind, value)` rows written by
/// [`write_metrics_csv`].
pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<(String, MetricKind, f64)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let value: f64 = rec[2]
            .parse()
            .map_err(|e| Error::InvalidData(format!("bad metric value {:?}: {e}", &rec[2])))?;
        rows.push((rec[0].to_string(), rec[1].parse()?, value));
    }
    Ok(rows)
}

/// Writes the per-task relative terms and the aggregate of a Δ-MTL
/// comparison.
pub fn write_delta_csv<W: Write>(mut out: W, config_hash: &str, delta: &MtlDelta) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "relative", "percent"])?;
    for (t, r) in delta.tasks.iter().zip(&delta.per_task_relative) {
        w.write_record([t.as_str(), &format!("{r:.17e}"), &format!("{:.4}", 100.0 * r)])?;
    }
    w.write_record([
        "aggregate",
        &format!("{:.17e}", delta.aggregate),
        &format!("{:.4}", 100.0 * delta.aggregate),
    ])?;
    w.flush()?;
    Ok(())
}
