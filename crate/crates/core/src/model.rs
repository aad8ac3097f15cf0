//! Toy vision transformer with LoRA adapters on every attention and MLP
//! linear, a residual feature corrector and a linear real/fake head.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::child_rng;
use crate::tensor::{read_u32, Tensor};

const LN_EPS: f64 = 1e-6;
const CKPT_MAGIC: &[u8; 4] = b"LPTC";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Everything but the adapters trains; used to build a base.
    Full,
    /// Backbone frozen; adapters, corrector and head train.
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub input_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub mode: TrainMode,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            patch: 16,
            channels: 3,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            num_classes: 2,
            lora_rank: 16,
            lora_scale: 16.0,
            mode: TrainMode::Lora,
        }
    }
}

impl ViTConfig {
    /// Desk-scale preset. Rank 4 keeps the LoRA-mode trainable share under
    /// 15% at this width.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            patch: 8,
            lora_rank: 4,
            lora_scale: 4.0,
            ..Self::default()
        }
    }

    /// Tiny preset for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            input_size: 16,
            patch: 4,
            dim: 16,
            heads: 2,
            depth: 2,
            lora_rank: 4,
            lora_scale: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.input_size == 0 || self.patch == 0 || self.input_size % self.patch != 0 {
            return bad(format!(
                "input size {} not divisible by patch {}",
                self.input_size, self.patch
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return bad("depth, mlp_ratio and channels must be positive".into());
        }
        if self.num_classes != 2 {
            return bad("the detector head is binary (num_classes = 2)".into());
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            return bad(format!(
                "LoRA rank {} must lie in [1, {}] (min of adapted layer dims)",
                self.lora_rank, self.dim
            ));
        }
        if !(self.lora_scale > 0.0 && self.lora_scale.is_finite()) {
            return bad(format!("LoRA scale {} must be positive", self.lora_scale));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn lora_multiplier(&self) -> f64 {
        self.lora_scale / self.lora_rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Lora,
    Corrector,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Which optional paths a forward pass takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Route adapted linears through their low-rank update.
    pub lora: bool,
    /// At inference, pass every feature through the corrector.
    pub corrector: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            lora: true,
            corrector: true,
        }
    }
}

/// Graph handles for one forward pass.
pub struct ForwardOutputs {
    pub f: Var,
    pub f_corr: Var,
    pub logits_clean: Var,
    pub logits_dist: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ViTConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    lookup: HashMap<String, usize>,
}

/// Parameters bound to a graph, in model order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Model {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut m = Self {
            cfg,
            names: Vec::new(),
            tensors: Vec::new(),
            groups: Vec::new(),
            lookup: HashMap::new(),
        };
        let specs = m.layout();
        for (i, (name, shape, group, init)) in specs.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let mut rng = child_rng(seed, i as u64);
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            m.lookup.insert(name.clone(), i);
            m.names.push(name);
            m.tensors.push(Tensor::new(shape, data)?);
            m.groups.push(group);
        }
        Ok(m)
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, ParamGroup, Init)> {
        use ParamGroup::*;
        let c = &self.cfg;
        let (d, r, hid) = (c.dim, c.lora_rank, c.dim * c.mlp_ratio);
        let xavier = |fi: usize, fo: usize| Init::Normal((2.0 / (fi + fo) as f64).sqrt());
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, g: ParamGroup, init: Init| out.push((name, shape, g, init));
        push("patch_embed.weight".into(), vec![c.patch_dim(), d], Backbone, xavier(c.patch_dim(), d));
        push("patch_embed.bias".into(), vec![d], Backbone, Init::Zeros);
        push("cls_token".into(), vec![1, d], Backbone, Init::Normal(0.02));
        push("pos_embed".into(), vec![c.tokens(), d], Backbone, Init::Normal(0.02));
        for b in 0..c.depth {
            let p = format!("blocks.{b}");
            push(format!("{p}.norm1.gamma"), vec![d], Backbone, Init::Ones);
            push(format!("{p}.norm1.beta"), vec![d], Backbone, Init::Zeros);
            let linears = [
                ("attn.q", d, d),
                ("attn.k", d, d),
                ("attn.v", d, d),
                ("attn.out", d, d),
                ("mlp.fc1", d, hid),
                ("mlp.fc2", hid, d),
            ];
            for (i, (lname, fi, fo)) in linears.into_iter().enumerate() {
                if i == 4 {
                    push(format!("{p}.norm2.gamma"), vec![d], Backbone, Init::Ones);
                    push(format!("{p}.norm2.beta"), vec![d], Backbone, Init::Zeros);
                }
                push(format!("{p}.{lname}.weight"), vec![fi, fo], Backbone, xavier(fi, fo));
                push(format!("{p}.{lname}.bias"), vec![fo], Backbone, Init::Zeros);
                push(format!("{p}.{lname}.lora_a"), vec![fi, r], Lora, Init::Normal(0.02));
                push(format!("{p}.{lname}.lora_b"), vec![r, fo], Lora, Init::Zeros);
            }
        }
        push("norm.gamma".into(), vec![d], Backbone, Init::Ones);
        push("norm.beta".into(), vec![d], Backbone, Init::Zeros);
        push("corrector.fc1.weight".into(), vec![d, 2 * d], Corrector, xavier(d, 2 * d));
        push("corrector.fc1.bias".into(), vec![2 * d], Corrector, Init::Zeros);
        push("corrector.fc2.weight".into(), vec![2 * d, d], Corrector, Init::Zeros);
        push("corrector.fc2.bias".into(), vec![d], Corrector, Init::Zeros);
        push("head.weight".into(), vec![d, c.num_classes], Head, xavier(d, c.num_classes));
        push("head.bias".into(), vec![c.num_classes], Head, Init::Zeros);
        out
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.tensors[self.lookup[name]]
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        match (self.cfg.mode, self.groups[i]) {
            (TrainMode::Full, ParamGroup::Lora) => false,
            (TrainMode::Full, _) => true,
            (TrainMode::Lora, ParamGroup::Backbone) => false,
            (TrainMode::Lora, _) => true,
        }
    }

    /// Indices of trainable parameters, in model order.
    pub fn trainable_parameters(&self) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|&i| self.tensors[i].numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Number of adapted linear layers (one A/B pair each).
    pub fn adapter_count(&self) -> usize {
        self.names.iter().filter(|n| n.ends_with(".lora_a")).count()
    }

    /// A LoRA-mode model on top of `base`: backbone and head are copied,
    /// adapters and corrector start fresh (B = 0, corrector identity).
    pub fn lora_from_base(base: &Model, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let cfg = ViTConfig {
            lora_rank: rank,
            lora_scale: scale,
            mode: TrainMode::Lora,
            ..base.cfg.clone()
        };
        let mut m = Model::new(cfg, seed)?;
        for i in 0..m.tensors.len() {
            if matches!(m.groups[i], ParamGroup::Backbone | ParamGroup::Head) {
                m.tensors[i] = base.param(&m.names[i]).clone();
            }
        }
        Ok(m)
    }

    /// Places every parameter on `g`. Trainable ones become gradient leaves,
    /// or are taken in order from `overrides` when given.
    pub fn bind(&self, g: &mut Graph, overrides: Option<&[Var]>) -> Result<Bound> {
        let trainable = self.trainable_parameters();
        if let Some(o) = overrides {
            if o.len() != trainable.len() {
                return Err(Error::Contract(format!(
                    "bind: {} overrides for {} trainable parameters",
                    o.len(),
                    trainable.len()
                )));
            }
        }
        let mut next = 0;
        let mut vars = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            let v = if self.is_trainable(i) {
                let v = match overrides {
                    Some(o) => o[next],
                    None => g.param(t.clone()),
                };
                next += 1;
                v
            } else {
                g.constant(t.clone())
            };
            vars.push(v);
        }
        Ok(Bound { vars })
    }

    /// Graph handle of parameter `name` under `bound`.
    pub fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.lookup[name]]
    }

    /// `[B, C, S, S]` images to `[B * n, C * p * p]` patch rows.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let s = c.input_size;
        if x.rank() != 4 || x.shape()[1] != c.channels || x.shape()[2] != s || x.shape()[3] != s {
            return Err(Error::Shape {
                op: "patchify",
                lhs: x.shape().to_vec(),
                rhs: vec![0, c.channels, s, s],
            });
        }
        let (b, p, gsz, ch) = (x.shape()[0], c.patch, c.grid(), c.channels);
        let pd = c.patch_dim();
        let mut out = vec![0.0; b * gsz * gsz * pd];
        let src = x.data();
        for bi in 0..b {
            for py in 0..gsz {
                for px in 0..gsz {
                    let row = (bi * gsz + py) * gsz + px;
                    let dst = &mut out[row * pd..(row + 1) * pd];
                    for cc in 0..ch {
                        for dy in 0..p {
                            let y = py * p + dy;
                            let base = ((bi * ch + cc) * s + y) * s + px * p;
                            dst[(cc * p + dy) * p..(cc * p + dy + 1) * p].copy_from_slice(&src[base..base + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b * gsz * gsz, pd], out)
    }

    /// `x W + b`, plus `(s / r) (x A) B` when `lora` is set.
    pub fn linear(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str, lora: bool) -> Result<Var> {
        let w = self.var(bound, &format!("{prefix}.weight"));
        let b = self.var(bound, &format!("{prefix}.bias"));
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        if !lora {
            return Ok(y);
        }
        let a = self.var(bound, &format!("{prefix}.lora_a"));
        let bb = self.var(bound, &format!("{prefix}.lora_b"));
        let xa = g.matmul(x, a)?;
        let up = g.matmul(xa, bb)?;
        let up = g.scale(up, self.cfg.lora_multiplier());
        g.add(y, up)
    }

    /// Multi-head self-attention over `batch` sequences of equal length.
    pub fn mhsa(&self, g: &mut Graph, bound: &Bound, h: Var, batch: usize, prefix: &str, lora: bool) -> Result<Var> {
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let q = self.linear(g, bound, h, &format!("{prefix}.q"), lora)?;
        let k = self.linear(g, bound, h, &format!("{prefix}.k"), lora)?;
        let v = self.linear(g, bound, h, &format!("{prefix}.v"), lora)?;
        let q = g.split_heads(q, batch, heads)?;
        let k = g.split_heads(k, batch, heads)?;
        let v = g.split_heads(v, batch, heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(att, v, false)?;
        let ctx = g.merge_heads(ctx, batch, heads)?;
        self.linear(g, bound, ctx, &format!("{prefix}.out"), lora)
    }

    fn block(&self, g: &mut Graph, bound: &Bound, x: Var, batch: usize, i: usize, lora: bool) -> Result<Var> {
        let p = format!("blocks.{i}");
        let h = g.layer_norm(
            x,
            self.var(bound, &format!("{p}.norm1.gamma")),
            self.var(bound, &format!("{p}.norm1.beta")),
            LN_EPS,
        )?;
        let a = self.mhsa(g, bound, h, batch, &format!("{p}.attn"), lora)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(
            x,
            self.var(bound, &format!("{p}.norm2.gamma")),
            self.var(bound, &format!("{p}.norm2.beta")),
            LN_EPS,
        )?;
        let h = self.linear(g, bound, h, &format!("{p}.mlp.fc1"), lora)?;
        let h = g.gelu(h);
        let h = self.linear(g, bound, h, &format!("{p}.mlp.fc2"), lora)?;
        g.add(x, h)
    }

    /// Class-token features `[B, d]` for images `[B, C, S, S]`.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, x: &Tensor, opts: ForwardOptions) -> Result<Var> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let patches = self.patchify(x)?;
        let n = self.cfg.grid() * self.cfg.grid();
        let t = self.cfg.tokens();
        let patches = g.constant(patches);
        let emb = g.matmul(patches, self.var(bound, "patch_embed.weight"))?;
        let emb = g.add_row(emb, self.var(bound, "patch_embed.bias"))?;
        let all = g.concat_rows(self.var(bound, "cls_token"), emb)?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..n).map(move |j| 1 + b * n + j)))
            .collect();
        let tokens = g.gather_rows(all, &order)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(self.var(bound, "pos_embed"), &pos_idx)?;
        let mut h = g.add(tokens, pos)?;
        for i in 0..self.cfg.depth {
            h = self.block(g, bound, h, batch, i, opts.lora)?;
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = g.gather_rows(h, &cls_rows)?;
        g.layer_norm(cls, self.var(bound, "norm.gamma"), self.var(bound, "norm.beta"), LN_EPS)
    }

    /// Residual corrector `f + FC2(gelu(FC1(f)))`.
    pub fn correct(&self, g: &mut Graph, bound: &Bound, f: Var) -> Result<Var> {
        let h = self.linear(g, bound, f, "corrector.fc1", false)?;
        let h = g.gelu(h);
        let h = self.linear(g, bound, h, "corrector.fc2", false)?;
        g.add(f, h)
    }

    pub fn classify(&self, g: &mut Graph, bound: &Bound, f: Var) -> Result<Var> {
        self.linear(g, bound, f, "head", false)
    }

    /// Training forward: clean features go straight to the head, distorted
    /// features are corrected first.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: &Tensor,
        x_hat: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardOutputs> {
        if x.shape() != x_hat.shape() {
            return Err(Error::Shape {
                op: "forward_pair",
                lhs: x.shape().to_vec(),
                rhs: x_hat.shape().to_vec(),
            });
        }
        let f = self.encode(g, bound, x, opts)?;
        let f_hat = self.encode(g, bound, x_hat, opts)?;
        let f_corr = self.correct(g, bound, f_hat)?;
        let logits_clean = self.classify(g, bound, f)?;
        let logits_dist = self.classify(g, bound, f_corr)?;
        Ok(ForwardOutputs {
            f,
            f_corr,
            logits_clean,
            logits_dist,
        })
    }

    /// Gradient-free logits `[B, 2]`.
    pub fn logits(&self, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let f = self.encode(&mut g, &bound, x, opts)?;
        let f = if opts.corrector { self.correct(&mut g, &bound, f)? } else { f };
        let l = self.classify(&mut g, &bound, f)?;
        Ok(g.value(l).clone())
    }

    /// Gradient-free class-token features `[B, d]`.
    pub fn features(&self, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let f = self.encode(&mut g, &bound, x, opts)?;
        Ok(g.value(f).clone())
    }

    /// Gradient-free corrector output for feature rows `[B, d]`.
    pub fn correct_features(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let f = g.constant(f.clone());
        let out = self.correct(&mut g, &bound, f)?;
        Ok(g.value(out).clone())
    }

    fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Serializes config and every named tensor.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let js = serde_json::to_vec(&self.cfg).expect("config serializes");
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(js.len() as u32).to_le_bytes())?;
        w.write_all(&js)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_checkpoint(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |msg: String| Error::Format { what: "checkpoint", msg };
        let io = |e: std::io::Error| fmt(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != CKPT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let len = read_u32(r).map_err(io)? as usize;
        let mut js = vec![0u8; len];
        r.read_exact(&mut js).map_err(io)?;
        let cfg: ViTConfig = serde_json::from_slice(&js)?;
        let mut m = Model::new(cfg, 0)?;
        let n = read_u32(r).map_err(io)? as usize;
        if n != m.tensors.len() {
            return Err(fmt(format!("{n} tensors, model has {}", m.tensors.len())));
        }
        for _ in 0..n {
            let nl = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; nl];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| fmt(e.to_string()))?;
            let t = Tensor::read_from(r)?;
            m.set_param(&name, t).map_err(|e| fmt(format!("{name}: {e}")))?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}
