//! AdamW, stratified splitting, the training loop and score metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, ParamStore, Tape};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{ModelState, RastGModel};
use crate::tensor::NdArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub delta: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Scores are divided by this before entering the loss.
    pub score_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            delta: 0.1,
            seed: 0,
            shuffle: true,
            score_scale: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("delta", self.delta),
            ("eps", self.eps),
            ("score_scale", self.score_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.lr and train.weight_decay must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over every trainable parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<NdArray>,
    v: Vec<NdArray>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(NdArray::zeros(p.value.shape()));
                self.v.push(NdArray::zeros(p.value.shape()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - math::powi(self.beta1, t);
        let bc2 = 1.0 - math::powi(self.beta2, t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8.0,
            val: 1.0,
            test: 1.0,
        }
    }
}

/// Sample ids of each split, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `n` items by `weights`.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| math::floor(*x) as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (ideal[b] - counts[b] as f64)
            .total_cmp(&(ideal[a] - counts[a] as f64))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Disjoint, exhaustive split stratified by class label.
pub fn split_dataset(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let w = [ratios.train, ratios.val, ratios.test];
    if w.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive, got {w:?}")));
    }
    let n = manifest.len();
    if n < w.len() {
        return Err(Error::Data(format!(
            "degenerate split: {n} samples cannot fill {} splits",
            w.len()
        )));
    }
    let mut targets = apportion(n, &w);
    // every split keeps at least one sample
    for s in 0..targets.len() {
        if targets[s] == 0 {
            let donor = (0..targets.len()).max_by_key(|&i| targets[i]).unwrap_or(0);
            targets[donor] -= 1;
            targets[s] = 1;
        }
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.class_label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = w.iter().sum();
    let mut quota: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut need = targets.clone();
    for (&class, idx) in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        let q: Vec<f64> = w.iter().map(|r| idx.len() as f64 * r / total).collect();
        let floors: Vec<usize> = q.iter().map(|x| math::floor(*x) as usize).collect();
        for s in 0..3 {
            need[s] = need[s].saturating_sub(floors[s]);
            remainders.push((q[s] - floors[s] as f64, class, s));
        }
        quota.insert(class, floors);
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let spare = |quota: &BTreeMap<u8, Vec<usize>>, class: u8, by_class: &BTreeMap<u8, Vec<usize>>| {
        by_class[&class].len() - quota[&class].iter().sum::<usize>()
    };
    for &(_, class, s) in &remainders {
        if need[s] > 0 && spare(&quota, class, &by_class) > 0 {
            quota.get_mut(&class).expect("class present")[s] += 1;
            need[s] -= 1;
        }
    }
    for (&class, _) in by_class.iter() {
        while spare(&quota, class, &by_class) > 0 {
            let s = (0..3).find(|&s| need[s] > 0).unwrap_or(0);
            quota.get_mut(&class).expect("class present")[s] += 1;
            need[s] = need[s].saturating_sub(1);
        }
    }
    // per-class floors can overshoot a split's target; move the excess back
    loop {
        let totals: Vec<usize> = (0..3).map(|s| quota.values().map(|q| q[s]).sum()).collect();
        let (Some(short), Some(over)) = (
            (0..3).find(|&s| totals[s] < targets[s]),
            (0..3).find(|&s| totals[s] > targets[s]),
        ) else {
            break;
        };
        let class = *quota
            .iter()
            .max_by(|a, b| a.1[over].cmp(&b.1[over]).then(b.0.cmp(a.0)))
            .expect("at least one class")
            .0;
        let q = quota.get_mut(&class).expect("class present");
        q[over] -= 1;
        q[short] += 1;
    }
    let mut assign = vec![0usize; n];
    for (class, idx) in &by_class {
        let q = &quota[class];
        for (pos, &i) in idx.iter().enumerate() {
            assign[i] = if pos < q[0] {
                0
            } else if pos < q[0] + q[1] {
                1
            } else {
                2
            };
        }
    }
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (r, s) in manifest.records.iter().zip(assign) {
        match s {
            0 => out.train.push(r.id.clone()),
            1 => out.val.push(r.id.clone()),
            _ => out.test.push(r.id.clone()),
        }
    }
    Ok(out)
}

/// A preprocessed sample ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `C × T × V`
    pub input: NdArray,
    /// Total score on the 0–50 scale.
    pub score: f64,
    pub class_label: u8,
}

/// Stacks `examples[idx]` into an `N × C × T × V` batch.
pub fn batch_input(examples: &[Example], idx: &[usize]) -> Result<NdArray> {
    let parts: Vec<&NdArray> = idx.iter().map(|&i| &examples[i].input).collect();
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("cannot build an empty batch".into()))?
        .shape()
        .to_vec();
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&first);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        if p.shape() != first.as_slice() {
            return Err(Error::Shape {
                op: "batch_input",
                lhs: first,
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    NdArray::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose validation loss was lowest (the final epoch without validation data).
    pub best_epoch: usize,
    pub best_state: ModelState,
}

/// Mean Huber loss over `examples` in eval mode, in normalized units.
pub fn eval_loss(model: &mut RastGModel, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
    let preds = predict_all(model, examples, cfg.batch_size)?;
    let n = preds.len().max(1) as f64;
    let mut total = 0.0;
    for (p, e) in preds.iter().zip(examples) {
        let r = (e.score - p) / cfg.score_scale;
        total += huber(r, cfg.delta);
    }
    Ok(total / n)
}

fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * r.abs() - 0.5 * delta * delta
    }
}

/// Fits `model` to `train` with AdamW on the Huber loss.
///
/// `on_epoch` sees each record as soon as the epoch ends.
pub fn train(
    model: &mut RastGModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_input(train, chunk)?;
            let y = NdArray::from_fn(&[chunk.len(), 1], |i| train[chunk[i]].score / cfg.score_scale);
            model.params_mut().zero_grad();
            let mut tape = Tape::new();
            let out = model.forward_on_tape(&mut tape, &x, Mode::Train)?;
            let loss = tape.huber_loss(out.scores, &y, cfg.delta)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch_ids: chunk.iter().map(|&i| train[i].id.clone()).collect(),
                    param_norm: model.params().value_norm(),
                });
            }
            tape.backward(loss, model.params_mut())?;
            drop(tape);
            opt.step(model.params_mut());
            loss_sum += lv * chunk.len() as f64;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(eval_loss(model, val, cfg)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            param_norm: model.params().value_norm(),
        };
        on_epoch(&record);
        let key = val_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| key <= *b) {
            best = Some((key, epoch, model.state()));
        }
        history.push(record);
    }
    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, model.state()),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_state,
    })
}

/// Eval-mode predictions on the 0–50 scale.
pub fn predict_all(model: &mut RastGModel, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    predict_all_scaled(model, examples, batch_size, TrainConfig::default().score_scale)
}

pub fn predict_all_scaled(
    model: &mut RastGModel,
    examples: &[Example],
    batch_size: usize,
    score_scale: f64,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = batch_input(examples, chunk)?;
        out.extend(model.predict(&x)?.into_iter().map(|p| p * score_scale));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mad: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is zero.
    pub mape: Option<f64>,
    /// Samples left out of MAPE because their target is zero.
    pub mape_excluded: usize,
}

/// MAD, RMSE and MAPE of `pred` against `truth`.
pub fn metrics(truth: &[f64], pred: &[f64]) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Contract("metrics of an empty dataset".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let n = truth.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut excluded = 0;
    for (y, p) in truth.iter().zip(pred) {
        let r = y - p;
        abs += r.abs();
        sq += r * r;
        if *y == 0.0 {
            excluded += 1;
        } else {
            pct += (r / y).abs();
        }
    }
    let counted = truth.len() - excluded;
    Ok(Metrics {
        n: truth.len(),
        mad: abs / n,
        rmse: math::sqrt(sq / n),
        mape: (counted > 0).then(|| pct / counted as f64 * 100.0),
        mape_excluded: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub per_class: BTreeMap<u8, Metrics>,
}

impl MetricsReport {
    pub fn from_predictions(labels: &[u8], truth: &[f64], pred: &[f64]) -> Result<Self> {
        let overall = metrics(truth, pred)?;
        let mut groups: BTreeMap<u8, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((l, y), p) in labels.iter().zip(truth).zip(pred) {
            let g = groups.entry(*l).or_default();
            g.0.push(*y);
            g.1.push(*p);
        }
        let per_class = groups
            .into_iter()
            .map(|(l, (y, p))| Ok((l, metrics(&y, &p)?)))
            .collect::<Result<_>>()?;
        Ok(Self { overall, per_class })
    }
}

/// Eval-mode metrics of `model` on `examples`.
pub fn evaluate(model: &mut RastGModel, examples: &[Example], cfg: &TrainConfig) -> Result<(MetricsReport, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let pred = predict_all_scaled(model, examples, cfg.batch_size, cfg.score_scale)?;
    let truth: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.class_label).collect();
    Ok((MetricsReport::from_predictions(&labels, &truth, &pred)?, pred))
}
