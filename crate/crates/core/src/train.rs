//! Joint loss, AdamW with decoupled decay, cosine schedule and the pairwise
//! training loop.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::data::{build_pair_batch, AugSettings, DatasetIndex};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalSettings, MetricsReport};
use crate::model::{ForwardOptions, ForwardOutputs, Model};
use crate::rng::hash64;
use crate::tensor::Tensor;

/// Floor applied to the predicted distribution inside the KL term.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// `KL(softmax(clean) || softmax(distorted))`.
    Clean,
    /// `KL(softmax(distorted) || softmax(clean))`.
    Distorted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Cross-entropy on the distorted branch too; off means clean only.
    pub ce_both: bool,
    pub kl_target: KlTarget,
    /// Stop the gradient through the KL target distribution.
    pub kl_detach: bool,
    /// Stop the gradient into the clean features in the MSE term.
    pub mse_detach_clean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            ce_both: true,
            kl_target: KlTarget::Clean,
            kl_detach: true,
            mse_detach_clean: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss: alpha {} and beta {} must be finite and non-negative",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Default weights with both stop-gradients off, so the tape gradient is
    /// the true derivative of the loss value.
    pub fn exact_gradient() -> Self {
        Self {
            kl_detach: false,
            mse_detach_clean: false,
            ..Self::default()
        }
    }

    /// Whether the distorted branch contributes anything.
    pub fn uses_distorted(&self) -> bool {
        self.ce_both || self.alpha > 0.0 || self.beta > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base checkpoint to start from; in LoRA mode its backbone is frozen.
    pub init: Option<PathBuf>,
    /// Validation cadence in epochs.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 2e-4,
            weight_decay: 5e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and eps > 0");
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1");
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, never negative.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    (lr0 * 0.5 * (1.0 + (PI * t).cos())).max(0.0)
}

/// Mean over rows of `sum p ln(p / max(q, floor))`.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let rows = g.value(p).shape()[0] as f64;
    let plogp = g.xlogx(p);
    let qf = g.clamp_min(q, KL_FLOOR);
    let lq = g.ln(qf);
    let cross = g.mul(p, lq)?;
    let diff = g.sub(plogp, cross)?;
    let s = g.sum(diff);
    Ok(g.scale(s, 1.0 / rows))
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce_clean: f64,
    pub ce_dist: f64,
    pub kl: f64,
    pub mse: f64,
    pub total: f64,
}

/// Builds the joint objective on `g`. Terms with zero weight are left off the
/// tape and reported as 0.
pub fn joint_loss(g: &mut Graph, out: &ForwardOutputs, y: &[usize], w: &LossConfig) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let ce_c = g.cross_entropy(out.logits_clean, y)?;
    parts.ce_clean = g.value(ce_c).item();
    let mut total = ce_c;
    if w.ce_both {
        let ce_d = g.cross_entropy(out.logits_dist, y)?;
        parts.ce_dist = g.value(ce_d).item();
        total = g.add(total, ce_d)?;
    }
    if w.alpha > 0.0 {
        let pc = g.softmax(out.logits_clean, 1)?;
        let pd = g.softmax(out.logits_dist, 1)?;
        let (target, pred) = match w.kl_target {
            KlTarget::Clean => (pc, pd),
            KlTarget::Distorted => (pd, pc),
        };
        let target = if w.kl_detach { g.detach(target) } else { target };
        let kl = kl_divergence(g, target, pred)?;
        parts.kl = g.value(kl).item();
        let kl = g.scale(kl, w.alpha);
        total = g.add(total, kl)?;
    }
    if w.beta > 0.0 {
        let f = if w.mse_detach_clean { g.detach(out.f) } else { out.f };
        let m = mse(g, f, out.f_corr)?;
        parts.mse = g.value(m).item();
        let m = g.scale(m, w.beta);
        total = g.add(total, m)?;
    }
    parts.total = g.value(total).item();
    Ok((total, parts))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update. Decay is decoupled: `p *= 1 - lr * wd` comes first and
/// does not pass through the moments.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    h: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let shrink = 1.0 - lr * wd;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].len() != p.numel() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pi *= shrink;
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// One line of `train.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce_clean: f64,
    pub ce_dist: f64,
    pub kl: f64,
    pub mse: f64,
    pub total: f64,
}

/// One line of `val.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub step: usize,
    pub score: f64,
    pub report: MetricsReport,
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints/best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints/last.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("logs/train.jsonl")
    }
    pub fn val_log(&self) -> PathBuf {
        self.root.join("logs/val.jsonl")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub struct TrainOutcome {
    pub last: Model,
    /// Best by validation score; the last model when no validation ran.
    pub best: Model,
    pub best_score: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Starting model for a run: fresh, or built on the configured base.
pub fn initial_model(cfg: &RunConfig) -> Result<Model> {
    let seed = hash64(cfg.seed, 0x1000);
    match &cfg.train.init {
        None => Model::new(cfg.model.clone(), seed),
        Some(path) => {
            let base = Model::load(path)?;
            let want = &cfg.model;
            let have = base.config();
            if (want.input_size, want.patch, want.dim, want.heads, want.depth, want.mlp_ratio)
                != (have.input_size, have.patch, have.dim, have.heads, have.depth, have.mlp_ratio)
            {
                return Err(Error::Config(format!(
                    "base checkpoint {} has a different architecture",
                    path.display()
                )));
            }
            match want.mode {
                crate::model::TrainMode::Lora => Model::lora_from_base(&base, want.lora_rank, want.lora_scale, seed),
                crate::model::TrainMode::Full => {
                    let mut m = Model::new(want.clone(), seed)?;
                    for name in base.names().to_vec() {
                        if m.index_of(&name).is_some() && !name.contains(".lora_") {
                            m.set_param(&name, base.param(&name).clone())?;
                        }
                    }
                    Ok(m)
                }
            }
        }
    }
}

/// Writes the pipelines of a batch that produced a non-finite loss.
fn dump_batch(dir: Option<&RunDir>, step: usize, batch: &crate::data::PairBatch, index: &DatasetIndex) -> String {
    let rows: Vec<serde_json::Value> = (0..batch.len())
        .map(|i| {
            serde_json::json!({
                "source": index.entries[batch.sources[i]].path,
                "label": batch.y[i],
                "pipeline": batch.pipelines[i],
                "size_aug": batch.traces[i],
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&rows).unwrap_or_default();
    if let Some(d) = dir {
        let p = d.root.join(format!("logs/nonfinite_step{step}.json"));
        let _ = std::fs::write(&p, &text);
    }
    batch
        .pipelines
        .iter()
        .map(|p| p.describe())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs the pairwise loop. With `dir` set, logs and checkpoints are written
/// into the run directory as training proceeds.
pub fn train(
    cfg: &RunConfig,
    train_idx: &DatasetIndex,
    val_idx: Option<&DatasetIndex>,
    dir: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Contract("training manifest is empty".into()));
    }
    let mut model = initial_model(cfg)?;
    let tc = &cfg.train;
    let aug = AugSettings {
        size_aug: cfg.size_aug.clone(),
        distortion: cfg.distortion.clone(),
        norm: cfg.data.clone(),
        input_size: cfg.model.input_size,
    };
    let eval_st = EvalSettings {
        seed: hash64(cfg.seed, 0x2000),
        norm: cfg.data.clone(),
        tables: cfg.distortion.tables.clone(),
        batch_size: cfg.eval.batch_size,
        threshold: cfg.eval.threshold,
        corrector: cfg.eval.corrector,
    };
    let val_profiles = cfg.eval.resolve(&cfg.eval.val_profiles)?;
    let trainable = model.trainable_parameters();
    let mut state = AdamState::new(&trainable.iter().map(|&i| &model.tensors()[i]).collect::<Vec<_>>());
    let hyper = AdamHyper::from(tc);
    let steps_per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let opts = ForwardOptions::default();
    let use_dist = cfg.loss.uses_distorted();

    let mut train_log = match dir {
        Some(d) => Some((open_log(&d.train_log())?, d.train_log())),
        None => None,
    };
    let mut val_log = match dir {
        Some(d) => Some((open_log(&d.val_log())?, d.val_log())),
        None => None,
    };
    let mut steps = Vec::with_capacity(total);
    let mut validations = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    info!(
        "training {} trainable / {} total parameters for {total} steps",
        model.trainable_count(),
        model.total_count()
    );

    for step in 0..total {
        let lr = cosine_lr(step, total, tc.lr);
        let batch = build_pair_batch(train_idx, tc.batch_size, &aug, hash64(cfg.seed, step as u64))?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, None)?;
        let (loss, parts) = if use_dist {
            let out = model.forward_pair(&mut g, &bound, &batch.x, &batch.x_hat, opts)?;
            joint_loss(&mut g, &out, &batch.y, &cfg.loss)?
        } else {
            let f = model.encode(&mut g, &bound, &batch.x, opts)?;
            let logits = model.classify(&mut g, &bound, f)?;
            let ce = g.cross_entropy(logits, &batch.y)?;
            let v = g.value(ce).item();
            (
                ce,
                LossParts {
                    ce_clean: v,
                    total: v,
                    ..Default::default()
                },
            )
        };
        if !parts.total.is_finite() {
            let which = dump_batch(dir, step, &batch, train_idx);
            return Err(Error::NonFinite {
                step,
                msg: format!("loss {} with pipelines [{which}]", parts.total),
            });
        }
        let vars: Vec<Var> = trainable.iter().map(|&i| model.var(&bound, &model.names()[i])).collect();
        let grads = g.backward(loss)?;
        let zeros: Vec<Tensor>;
        let grad_refs: Vec<&Tensor> = {
            zeros = trainable
                .iter()
                .zip(&vars)
                .filter(|(_, v)| grads.get(**v).is_none())
                .map(|(&i, _)| Tensor::zeros(model.tensors()[i].shape()))
                .collect();
            let mut zi = zeros.iter();
            vars.iter()
                .map(|v| grads.get(*v).unwrap_or_else(|| zi.next().expect("zero grad slot")))
                .collect()
        };
        {
            let mut params = collect_mut(&mut model, &trainable);
            adamw_step(&mut params, &grad_refs, &mut state, lr, tc.weight_decay, hyper)?;
        }
        let rec = StepRecord {
            step,
            lr,
            ce_clean: parts.ce_clean,
            ce_dist: parts.ce_dist,
            kl: parts.kl,
            mse: parts.mse,
            total: parts.total,
        };
        if let Some((w, p)) = train_log.as_mut() {
            write_line(w, p, &rec)?;
        }
        if step % 20 == 0 {
            info!("step {step}/{total} lr {lr:.3e} loss {:.4}", parts.total);
        }
        steps.push(rec);

        let epoch_end = (step + 1) % steps_per_epoch == 0;
        let epoch = (step + 1) / steps_per_epoch;
        if epoch_end && (epoch % tc.val_every == 0 || epoch == tc.epochs) {
            if let Some(vi) = val_idx {
                let report = evaluate(&model, vi, &val_profiles, &eval_st)?;
                let names: Vec<&str> = val_profiles.iter().map(|p| p.name.as_str()).collect();
                let score = names.iter().map(|n| report.per_profile[*n].auc).sum::<f64>() / names.len() as f64;
                info!("epoch {epoch}: validation AUC {score:.4}");
                let rec = ValRecord {
                    epoch,
                    step: step + 1,
                    score,
                    report,
                };
                if let Some((w, p)) = val_log.as_mut() {
                    write_line(w, p, &rec)?;
                }
                validations.push(rec);
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    if let Some(d) = dir {
                        model.save(&d.best())?;
                    }
                    best = Some((score, model.clone()));
                }
            }
        }
    }
    for (w, p) in [train_log.as_mut(), val_log.as_mut()].into_iter().flatten() {
        w.flush().map_err(|e| Error::io(&*p, e))?;
    }
    if let Some(d) = dir {
        model.save(&d.last())?;
        if best.is_none() {
            model.save(&d.best())?;
        }
    }
    let (best_score, best_model) = match best {
        Some((s, m)) => (Some(s), m),
        None => (None, model.clone()),
    };
    Ok(TrainOutcome {
        last: model,
        best: best_model,
        best_score,
        steps,
        validations,
    })
}

fn collect_mut<'a>(model: &'a mut Model, idx: &[usize]) -> Vec<&'a mut Tensor> {
    let mut out: Vec<Option<&'a mut Tensor>> = Vec::new();
    let tensors = model.tensors_mut();
    let mut wanted = idx.iter().peekable();
    for (i, t) in tensors.iter_mut().enumerate() {
        if wanted.peek() == Some(&&i) {
            out.push(Some(t));
            wanted.next();
        }
    }
    out.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn logits(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.param(Tensor::from_rows(rows))
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let a = logits(&mut g, &[&[0.0, 0.0]]);
        let ce = g.cross_entropy(a, &[1]).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-15);
        let b = logits(&mut g, &[&[20.0, -20.0]]);
        let ce = g.cross_entropy(b, &[0]).unwrap();
        assert!(g.value(ce).item() < 1e-15);
        let c = logits(&mut g, &[&[1.0, -1.0]]);
        let ce = g.cross_entropy(c, &[1]).unwrap();
        assert!((g.value(ce).item() - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((g.value(ce).item() - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[&[0.3, 0.7]]));
        let k = kl_divergence(&mut g, p, p).unwrap();
        assert_eq!(g.value(k).item(), 0.0);
        let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let q = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
        let k = kl_divergence(&mut g, p, q).unwrap();
        assert!((g.value(k).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_is_non_negative_on_random_pairs() {
        let mut rng = rng_from_seed(5);
        let rows = 10_000;
        let mut pd = Vec::with_capacity(rows * 2);
        let mut qd = Vec::with_capacity(rows * 2);
        for _ in 0..rows {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            pd.extend([a, 1.0 - a]);
            qd.extend([b, 1.0 - b]);
        }
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![rows, 2], pd.clone()).unwrap());
        let q = g.constant(Tensor::new(vec![rows, 2], qd.clone()).unwrap());
        let plogp = g.xlogx(p);
        let qf = g.clamp_min(q, KL_FLOOR);
        let lq = g.ln(qf);
        let cross = g.mul(p, lq).unwrap();
        let per = g.sub(plogp, cross).unwrap();
        for r in 0..rows {
            let v: f64 = g.value(per).row(r).iter().sum();
            assert!(v >= -1e-15, "row {r}: {v}");
        }
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let m = mse(&mut g, a, b).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
        let m2 = mse(&mut g, b, a).unwrap();
        assert_eq!(g.value(m2).item(), 1.0);
        let z = mse(&mut g, a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
    }

    fn outputs(g: &mut Graph, lc: &[f64], ld: &[f64], f: &[f64], fc: &[f64]) -> ForwardOutputs {
        ForwardOutputs {
            logits_clean: g.param(Tensor::from_rows(&[lc])),
            logits_dist: g.param(Tensor::from_rows(&[ld])),
            f: g.param(Tensor::from_rows(&[f])),
            f_corr: g.param(Tensor::from_rows(&[fc])),
        }
    }

    #[test]
    fn joint_loss_hand_case() {
        // clean [0, 0] -> ln 2, dist [1, -1] with y = 1 -> ln(1 + e^2)
        let mut g = Graph::new();
        let out = outputs(&mut g, &[0.0, 0.0], &[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let (_, parts) = joint_loss(&mut g, &out, &[1], &LossConfig::default()).unwrap();
        let q = [1f64.exp() / (1f64.exp() + (-1f64).exp()), (-1f64).exp() / (1f64.exp() + (-1f64).exp())];
        let kl = 0.5 * (0.5 / q[0]).ln() + 0.5 * (0.5 / q[1]).ln();
        let want = 2f64.ln() + (1.0 + 2f64.exp()).ln() + 0.5 * kl + 0.25 * 1.0;
        assert!((parts.total - want).abs() < 1e-12, "{} vs {want}", parts.total);
        assert!((parts.kl - kl).abs() < 1e-12);
        assert_eq!(parts.mse, 1.0);
    }

    #[test]
    fn degenerate_pair_is_twice_ce() {
        let mut g = Graph::new();
        let out = outputs(&mut g, &[0.3, -0.2], &[0.3, -0.2], &[0.5, 2.0], &[0.5, 2.0]);
        let (_, parts) = joint_loss(&mut g, &out, &[0], &LossConfig::default()).unwrap();
        assert_eq!(parts.kl, 0.0);
        assert_eq!(parts.mse, 0.0);
        assert_eq!(parts.total, 2.0 * parts.ce_clean);
        let w = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let mut g = Graph::new();
        let out = outputs(&mut g, &[0.3, -0.2], &[1.0, 0.5], &[0.5, 2.0], &[0.1, 2.0]);
        let (_, parts) = joint_loss(&mut g, &out, &[1], &w).unwrap();
        assert_eq!(parts.total, parts.ce_clean + parts.ce_dist);
    }

    #[test]
    fn kl_target_is_detached_by_default() {
        let mut g = Graph::new();
        let out = outputs(&mut g, &[0.3, -0.2], &[1.0, 0.5], &[0.5, 2.0], &[0.1, 2.0]);
        let w = LossConfig { alpha: 1.0, beta: 0.0, ce_both: false, ..Default::default() };
        let lc = out.logits_clean;
        let (loss, _) = joint_loss(&mut g, &out, &[1], &w).unwrap();
        let grads = g.backward(loss).unwrap();
        // only the clean CE reaches the clean logits: softmax - onehot
        let p1 = 1.0 / (1.0 + (0.3f64 - -0.2).exp());
        let gc = grads.get(lc).unwrap();
        assert!((gc.data()[1] - (p1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[&p]);
        let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, 0.0, h).unwrap();
        assert_eq!(p, before);
        adamw_step(&mut [&mut p], &[&g], &mut st, 2e-4, 5e-4, h).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - 2e-4 * 5e-4));
        }
    }

    #[test]
    fn adamw_descends_and_converges() {
        let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&[&w]);
        let g = w.clone();
        adamw_step(&mut [&mut w], &[&g], &mut st, 0.1, 0.0, h).unwrap();
        assert!(w.data()[0] < 1.0);
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        for t in 0..200 {
            let lr = cosine_lr(t, 200, 0.5);
            let d = p.data().to_vec();
            let g = Tensor::new(vec![2], vec![2.0 * (d[0] - 1.0), 20.0 * (d[1] + 2.0)]).unwrap();
            adamw_step(&mut [&mut p], &[&g], &mut st, lr, 0.0, h).unwrap();
        }
        let dist = ((p.data()[0] - 1.0).powi(2) + (p.data()[1] + 2.0).powi(2)).sqrt();
        assert!(dist < 1e-3, "{:?}", p.data());
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 2e-4), 2e-4);
        assert!(cosine_lr(100, 100, 2e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 2e-4) - 1e-4).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 2e-4)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
