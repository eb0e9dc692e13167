//! Adam, cosine decay, discounted-distance regression and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Array, Tape, Var};
use crate::encoders::Mode;
use crate::graphs::{discount, Pair, PairDataset};
use crate::models::{predict, PairModel};
use crate::{io_err, seeded, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Triangle regularizer weight; only used by baseline families.
    pub reg_weight: f64,
    /// Triples per step; `None` means `batch_size / 3`.
    pub triplets: Option<usize>,
    /// Validation interval in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3000,
            batch_size: 2048,
            lr: 1e-3,
            gamma: 0.9,
            reg_weight: 0.0,
            triplets: None,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad(format!("reg_weight {} must be a finite value ≥ 0", self.reg_weight));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive".into());
        }
        Ok(())
    }

    pub fn triplet_count(&self) -> usize {
        self.triplets.unwrap_or(self.batch_size / 3)
    }
}

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Bias-corrected Adam over a list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn for_blocks(blocks: &[&Array]) -> Self {
        Self::new(&blocks.iter().map(|b| b.len()).collect::<Vec<_>>())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Returns `false` (and counts a skip) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "{} parameter blocks and {} gradients for {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Invalid(format!("block {i} changed size")));
            }
        }
        if !grads.iter().all(Array::all_finite) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// `γ^x` on the tape.
fn discounted(tape: &mut Tape, x: Var, gamma: f64) -> Result<Var> {
    let s = tape.scale(x, gamma.ln());
    Ok(tape.exp(s)?)
}

/// Mean of `(γ^d̂ − target)²`; targets are already discounted.
pub fn discounted_mse_loss(tape: &mut Tape, pred: Var, targets: &[f64], gamma: f64) -> Result<Var> {
    let g = discounted(tape, pred, gamma)?;
    let t = tape.constant(Array::vector(targets.to_vec()));
    let diff = tape.sub(g, t)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq)?)
}

/// Scalar form of one triangle hinge term, `max(0, γ^{a+b} − γ^c)²`.
pub fn triangle_hinge(d_xy: f64, d_yz: f64, d_xz: f64, gamma: f64) -> f64 {
    let h = (discount(gamma, d_xy + d_yz) - discount(gamma, d_xz)).max(0.0);
    h * h
}

/// Mean squared hinge over `triples` of endpoints `(x, y, z)`.
pub fn triangle_regularizer(
    tape: &mut Tape,
    model: &dyn PairModel,
    p: &[Var],
    features: &Array,
    triples: &[(usize, usize, usize)],
    gamma: f64,
    mode: Mode,
) -> Result<Var> {
    let t = triples.len();
    if t == 0 {
        return Err(Error::Invalid("triangle regularizer needs at least one triple".into()));
    }
    let mut src = Vec::with_capacity(3 * t);
    let mut dst = Vec::with_capacity(3 * t);
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        for tr in triples {
            let e = [tr.0, tr.1, tr.2];
            src.push(e[a]);
            dst.push(e[b]);
        }
    }
    let d = model.forward(tape, p, features, &src, &dst, mode)?.distance;
    let xy = tape.slice(d, 0, 0, t)?;
    let yz = tape.slice(d, 0, t, 2 * t)?;
    let xz = tape.slice(d, 0, 2 * t, 3 * t)?;
    let path = tape.add(xy, yz)?;
    let gp = discounted(tape, path, gamma)?;
    let gd = discounted(tape, xz, gamma)?;
    let h = tape.sub(gp, gd)?;
    let h = tape.relu(h);
    let h = tape.square(h);
    Ok(tape.mean(h)?)
}

/// Validation metrics in the shape of the random-graph result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pairs: usize,
    /// Mean `(γ^d̂ − γ^d)²`.
    pub mse: f64,
    /// ℓ1 error on pairs with finite true distance.
    pub l1_finite: Option<f64>,
    /// Mean prediction on pairs with infinite true distance.
    pub pred_inf: Option<f64>,
    /// Some prediction was non-finite.
    pub overflow: bool,
}

impl EvalMetrics {
    /// MSE on the ×10⁻³ display scale.
    pub fn mse_milli(&self) -> f64 {
        self.mse * 1e3
    }
}

/// Metrics from predicted and true distances.
pub fn metrics_from(pred: &[f64], truth: &[f64], gamma: f64) -> Result<EvalMetrics> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Invalid(format!("{} predictions for {} pairs", pred.len(), truth.len())));
    }
    let (mut se, mut l1, mut nf, mut inf, mut ni) = (0.0, 0.0, 0usize, 0.0, 0usize);
    let mut overflow = false;
    for (&p, &d) in pred.iter().zip(truth) {
        overflow |= !p.is_finite();
        let e = discount(gamma, p) - discount(gamma, d);
        se += e * e;
        if d.is_finite() {
            l1 += (p - d).abs();
            nf += 1;
        } else {
            inf += p;
            ni += 1;
        }
    }
    Ok(EvalMetrics {
        pairs: pred.len(),
        mse: se / pred.len() as f64,
        l1_finite: (nf > 0).then(|| l1 / nf as f64),
        pred_inf: (ni > 0).then(|| inf / ni as f64),
        overflow,
    })
}

pub fn evaluate(model: &dyn PairModel, features: &Array, pairs: &[Pair], gamma: f64) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let src: Vec<usize> = pairs.iter().map(|p| p.src).collect();
    let dst: Vec<usize> = pairs.iter().map(|p| p.dst).collect();
    let (pred, _) = predict(model, features, &src, &dst)?;
    let truth: Vec<f64> = pairs.iter().map(|p| p.dist).collect();
    metrics_from(&pred, &truth, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Mean batch MSE (regularizer excluded).
    pub train_mse: f64,
    pub val: Option<EvalMetrics>,
}

/// Optimizer and schedule state at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub adam: Adam,
    pub step: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    /// Epoch at which the loss became non-finite; history stops there.
    pub diverged_at: Option<usize>,
    /// Discounted outputs clamped during training.
    pub clamped: usize,
}

impl TrainReport {
    /// Last validation record.
    pub fn final_metrics(&self) -> Option<&EvalMetrics> {
        self.history.iter().rev().find_map(|r| r.val.as_ref())
    }
}

/// Seeded mini-batch training over `data.train`, validating on `data.val`.
pub fn train(model: &mut dyn PairModel, data: &PairDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let mut rng = seeded(cfg.seed);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_blocks(&model.blocks());
    let regularize = model.uses_regularizer() && cfg.reg_weight > 0.0;
    let endpoints = data.features.rows() * model.slots();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut step, mut clamped) = (0usize, 0usize);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.lr);
            let pairs: Vec<&Pair> = batch.iter().map(|&i| &data.train[i]).collect();
            let src: Vec<usize> = pairs.iter().map(|p| p.src).collect();
            let dst: Vec<usize> = pairs.iter().map(|p| p.dst).collect();
            let targets: Vec<f64> = pairs.iter().map(|p| p.target).collect();

            let mut tape = Tape::new();
            let p: Vec<Var> = model.blocks().into_iter().map(|b| tape.param(b.clone())).collect();
            let pred = model.forward(&mut tape, &p, &data.features, &src, &dst, Mode::Train)?;
            clamped += pred.clamped;
            let mse = discounted_mse_loss(&mut tape, pred.distance, &targets, cfg.gamma)?;
            let mut loss = mse;
            if regularize {
                let triples: Vec<_> = (0..cfg.triplet_count().max(1))
                    .map(|_| (rng.random_range(0..endpoints), rng.random_range(0..endpoints), rng.random_range(0..endpoints)))
                    .collect();
                let r = triangle_regularizer(&mut tape, model, &p, &data.features, &triples, cfg.gamma, Mode::Train)?;
                let r = tape.scale(r, cfg.reg_weight);
                loss = tape.add(loss, r)?;
            }
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Ok(TrainReport {
                    history,
                    state: TrainState { adam, step, total_steps: total },
                    diverged_at: Some(epoch),
                    clamped,
                });
            }
            loss_sum += loss_value;
            mse_sum += tape.value(mse).item()?;
            tape.backward(loss)?;
            let grads: Vec<Array> = p
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Array::zeros(tape.shape(v))))
                .collect();
            adam.step(&mut model.blocks_mut(), &grads, lr)?;
            model.apply_norm_updates(&pred.norm_updates);
            step += 1;
        }
        let val = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            Some(evaluate(model, &data.features, &data.val, cfg.gamma)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            train_mse: mse_sum / steps_per_epoch as f64,
            val,
        });
    }
    Ok(TrainReport { history, state: TrainState { adam, step, total_steps: total }, diverged_at: None, clamped })
}

/// Short hex digest of a value's canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest[..6].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,split,mse,l1_finite,pred_inf,lr,loss`.
pub fn metrics_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,split,mse,l1_finite,pred_inf,lr,loss\n");
    for r in &report.history {
        let _ = writeln!(s, "{},train,{},,,{},{}", r.epoch, r.train_mse, r.lr, r.loss);
        if let Some(v) = &r.val {
            let _ = writeln!(s, "{},val,{},{},{},{},{}", r.epoch, v.mse, opt(v.l1_finite), opt(v.pred_inf), r.lr, r.loss);
        }
    }
    s
}

/// Writes `metrics.csv` and `result.json` into `dir`.
pub fn write_run(dir: &Path, report: &TrainReport, result: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, metrics_csv(report)).map_err(io_err(&csv))?;
    let json = dir.join("result.json");
    fs::write(&json, serde_json::to_string_pretty(result)?).map_err(io_err(&json))
}
