//! Temporal classifiers: multiscale depthwise stem, pre-norm Transformer
//! encoder with learned positional embeddings, attention pooling and a small
//! head, in unimodal, early-fusion and bidirectional cross-modal forms. Also
//! the kNN and fully-connected baselines over window summaries.

use std::collections::BTreeMap;

use ndcore::{Init, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Unimodal,
    Early,
    CrossModal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_t: usize,
    pub stem_kernels: Vec<usize>,
    pub fusion: Fusion,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.2,
            max_t: 45,
            stem_kernels: vec![3, 5, 7],
            fusion: Fusion::Unimodal,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_t == 0 || self.ffn_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("max_t, ffn_dim and head_hidden must be positive".into()));
        }
        if self.stem_kernels.is_empty() || self.stem_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("stem kernels must be odd and non-empty".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    /// Puts every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

struct Builder<'a> {
    params: ParamSet,
    init: &'a mut Init,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.params.push(format!("{name}.w"), self.init.fan_in_uniform(&[fan_in, fan_out], fan_in));
        let b = bias.then(|| self.params.push(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        match self.b {
            Some(b) => tape.add_broadcast(y, p[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
struct Stem {
    convs: Vec<(usize, usize)>,
    proj: Linear,
}

impl Stem {
    fn new(b: &mut Builder, name: &str, f: usize, cfg: &ModelConfig) -> Self {
        let convs = cfg
            .stem_kernels
            .iter()
            .map(|&k| {
                let w = b.params.push(format!("{name}.conv{k}.w"), b.init.fan_in_uniform(&[f, k], k));
                let bias = b.params.push(format!("{name}.conv{k}.b"), Tensor::zeros(&[f]));
                (w, bias)
            })
            .collect();
        let proj = b.linear(&format!("{name}.proj"), f * cfg.stem_kernels.len(), cfg.embed_dim, true);
        Stem { convs, proj }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut branches = Vec::with_capacity(self.convs.len());
        for &(w, b) in &self.convs {
            branches.push(tape.depthwise_conv1d(x, p[w], p[b])?);
        }
        let cat = tape.concat(&branches);
        Ok(self.proj.forward(tape, p, cat))
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &mut Builder, name: &str, e: usize, heads: usize) -> Self {
        Attention {
            q: b.linear(&format!("{name}.q"), e, e, true),
            k: b.linear(&format!("{name}.k"), e, e, true),
            v: b.linear(&format!("{name}.v"), e, e, true),
            o: b.linear(&format!("{name}.o"), e, e, true),
            heads,
        }
    }

    fn split(&self, tape: &mut Tape, x: Var, bsz: usize, t: usize, e: usize) -> Var {
        let h = self.heads;
        let r = tape.reshape(x, &[bsz, t, h, e / h]);
        let r = tape.permute_0213(r);
        tape.reshape(r, &[bsz * h, t, e / h])
    }

    /// Returns the output `[B, Tq, E]` and the probabilities `[B*H, Tq, Tk]`.
    fn forward(&self, tape: &mut Tape, p: &[Var], xq: Var, xkv: Var) -> (Var, Var) {
        let sq = tape.shape(xq).to_vec();
        let tk = tape.shape(xkv)[1];
        let (bsz, tq, e) = (sq[0], sq[1], sq[2]);
        let h = self.heads;
        let q = self.q.forward(tape, p, xq);
        let k = self.k.forward(tape, p, xkv);
        let v = self.v.forward(tape, p, xkv);
        let q = self.split(tape, q, bsz, tq, e);
        let k = self.split(tape, k, bsz, tk, e);
        let v = self.split(tape, v, bsz, tk, e);
        let scores = tape.bmm(q, k, true);
        let scores = tape.scale(scores, 1.0 / ((e / h) as f64).sqrt());
        let probs = tape.softmax(scores);
        let ctx = tape.bmm(probs, v, false);
        let ctx = tape.reshape(ctx, &[bsz, h, tq, e / h]);
        let ctx = tape.permute_0213(ctx);
        let ctx = tape.reshape(ctx, &[bsz, tq, e]);
        (self.o.forward(tape, p, ctx), probs)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Encoder {
    pos: usize,
    blocks: Vec<Block>,
}

impl Encoder {
    fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Self {
        let pos = b.params.push(format!("{name}.pos"), b.init.normal(&[cfg.max_t, cfg.embed_dim], 0.02));
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                attn: Attention::new(b, &format!("{name}.layer{l}.attn"), cfg.embed_dim, cfg.n_heads),
                ff1: b.linear(&format!("{name}.layer{l}.ff1"), cfg.embed_dim, cfg.ffn_dim, true),
                ff2: b.linear(&format!("{name}.layer{l}.ff2"), cfg.ffn_dim, cfg.embed_dim, true),
            })
            .collect();
        Encoder { pos, blocks }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], z: Var, dropout: f64, rec: &mut Recorder, name: &str) -> Var {
        let t = tape.shape(z)[1];
        let pos = tape.slice_rows(p[self.pos], t);
        let mut x = tape.add_broadcast(z, pos);
        for (l, blk) in self.blocks.iter().enumerate() {
            let n1 = tape.layer_norm(x);
            let (a, probs) = blk.attn.forward(tape, p, n1, n1);
            rec.push(format!("{name}.layer{l}.self"), probs);
            let a = tape.dropout(a, dropout);
            x = tape.add(x, a);
            let n2 = tape.layer_norm(x);
            let f = blk.ff1.forward(tape, p, n2);
            let f = tape.relu(f);
            let f = blk.ff2.forward(tape, p, f);
            let f = tape.dropout(f, dropout);
            x = tape.add(x, f);
        }
        if self.blocks.is_empty() {
            x
        } else {
            tape.layer_norm(x)
        }
    }
}

#[derive(Clone, Debug)]
struct Pool {
    w: usize,
    v: usize,
}

impl Pool {
    fn new(b: &mut Builder, name: &str, e: usize) -> Self {
        let w = b.params.push(format!("{name}.w"), b.init.fan_in_uniform(&[e, e], e));
        let v = b.params.push(format!("{name}.v"), b.init.fan_in_uniform(&[e, 1], e));
        Pool { w, v }
    }

    /// `a = softmax_t(v^T tanh(W z_t))`, `h = sum_t a_t z_t`.
    fn forward(&self, tape: &mut Tape, p: &[Var], z: Var, rec: &mut Recorder, name: &str) -> Var {
        let s = tape.shape(z).to_vec();
        let (bsz, t, e) = (s[0], s[1], s[2]);
        let u = tape.matmul(z, p[self.w]);
        let u = tape.tanh(u);
        let scores = tape.matmul(u, p[self.v]);
        let scores = tape.reshape(scores, &[bsz, 1, t]);
        let a = tape.softmax(scores);
        rec.push(name.to_string(), a);
        let h = tape.bmm(a, z, false);
        tape.reshape(h, &[bsz, e])
    }
}

#[derive(Clone, Debug)]
struct Head {
    fc1: Linear,
    fc2: Linear,
}

impl Head {
    fn forward(&self, tape: &mut Tape, p: &[Var], h: Var, dropout: f64) -> Var {
        let bsz = tape.shape(h)[0];
        let x = self.fc1.forward(tape, p, h);
        let x = tape.relu(x);
        let x = tape.dropout(x, dropout);
        let y = self.fc2.forward(tape, p, x);
        tape.reshape(y, &[bsz])
    }
}

#[derive(Clone, Debug)]
struct Branch {
    stem: Stem,
    encoder: Encoder,
}

#[derive(Clone, Debug)]
enum Layout {
    Single { branch: Branch, pool: Pool },
    Cross { a: Branch, b: Branch, a_from_b: Attention, b_from_a: Attention, pool_a: Pool, pool_b: Pool },
}

/// Named attention probability nodes collected during a forward pass.
#[derive(Default)]
struct Recorder {
    enabled: bool,
    entries: Vec<(String, Var)>,
}

impl Recorder {
    fn push(&mut self, name: String, v: Var) {
        if self.enabled {
            self.entries.push((name, v));
        }
    }
}

/// Attention weights of one forward pass, keyed by site. Self- and
/// cross-attention maps are `[B*H, Tq, Tk]`; pooling maps are `[B, 1, T]`.
pub type AttentionMaps = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Bypass both cross-attention blocks.
    pub skip_cross: bool,
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    pub config: ModelConfig,
    pub input_dims: Vec<usize>,
    pub params: ParamSet,
    layout: Layout,
    head: Head,
}

impl TemporalModel {
    /// `input_dims` holds one width for unimodal/early fusion and two for
    /// cross-modal (facial stream first).
    pub fn new(config: ModelConfig, input_dims: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        let expected = if config.fusion == Fusion::CrossModal { 2 } else { 1 };
        if input_dims.len() != expected || input_dims.contains(&0) {
            return Err(Error::Config(format!(
                "{:?} fusion needs {expected} positive input widths, got {input_dims:?}",
                config.fusion
            )));
        }
        let mut init = Init::new(seed);
        let mut b = Builder { params: ParamSet::default(), init: &mut init };
        let e = config.embed_dim;
        let (layout, pooled) = if expected == 1 {
            let branch = Branch { stem: Stem::new(&mut b, "stem", input_dims[0], &config), encoder: Encoder::new(&mut b, "enc", &config) };
            (Layout::Single { branch, pool: Pool::new(&mut b, "pool", e) }, e)
        } else {
            let a = Branch { stem: Stem::new(&mut b, "a.stem", input_dims[0], &config), encoder: Encoder::new(&mut b, "a.enc", &config) };
            let bb = Branch { stem: Stem::new(&mut b, "b.stem", input_dims[1], &config), encoder: Encoder::new(&mut b, "b.enc", &config) };
            let a_from_b = Attention::new(&mut b, "cross_a_from_b", e, config.n_heads);
            let b_from_a = Attention::new(&mut b, "cross_b_from_a", e, config.n_heads);
            let pool_a = Pool::new(&mut b, "a.pool", e);
            let pool_b = Pool::new(&mut b, "b.pool", e);
            (Layout::Cross { a, b: bb, a_from_b, b_from_a, pool_a, pool_b }, 2 * e)
        };
        let head = Head {
            fc1: b.linear("head.fc1", pooled, config.head_hidden, true),
            fc2: b.linear("head.fc2", config.head_hidden, 1, true),
        };
        let params = b.params;
        Ok(TemporalModel { config, input_dims: input_dims.to_vec(), params, layout, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_inputs(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.input_dims.len() {
            return Err(Error::Shape(format!("expected {} input streams, got {}", self.input_dims.len(), shapes.len())));
        }
        for (s, &f) in shapes.iter().zip(&self.input_dims) {
            if s.len() != 3 || s[2] != f {
                return Err(Error::Shape(format!("input {s:?} does not match width {f}")));
            }
            if s[1] > self.config.max_t {
                return Err(Error::Config(format!("sequence length {} exceeds max_t {}", s[1], self.config.max_t)));
            }
            if s[1] == 0 {
                return Err(Error::Shape("empty sequence".into()));
            }
        }
        if shapes.len() == 2 && (shapes[0][0] != shapes[1][0] || shapes[0][1] != shapes[1][1]) {
            return Err(Error::Shape(format!("stream shapes {:?} and {:?} disagree", shapes[0], shapes[1])));
        }
        Ok(())
    }

    /// Builds the graph for `inputs` (`[B, T, F]` leaves) and returns the
    /// logits `[B]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], inputs: &[Var], opts: ForwardOptions) -> Result<Var> {
        let mut rec = Recorder::default();
        self.forward_recorded(tape, p, inputs, opts, &mut rec)
    }

    fn forward_recorded(&self, tape: &mut Tape, p: &[Var], inputs: &[Var], opts: ForwardOptions, rec: &mut Recorder) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| tape.shape(v).to_vec()).collect();
        self.check_inputs(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let d = self.config.dropout;
        let pooled = match &self.layout {
            Layout::Single { branch, pool } => {
                let z = branch.stem.forward(tape, p, inputs[0])?;
                let z = branch.encoder.forward(tape, p, z, d, rec, "enc");
                pool.forward(tape, p, z, rec, "pool")
            }
            Layout::Cross { a, b, a_from_b, b_from_a, pool_a, pool_b } => {
                let za = a.stem.forward(tape, p, inputs[0])?;
                let za = a.encoder.forward(tape, p, za, d, rec, "a.enc");
                let zb = b.stem.forward(tape, p, inputs[1])?;
                let zb = b.encoder.forward(tape, p, zb, d, rec, "b.enc");
                let (fa, fb) = if opts.skip_cross {
                    (za, zb)
                } else {
                    let na = tape.layer_norm(za);
                    let nb = tape.layer_norm(zb);
                    let (ua, pa) = a_from_b.forward(tape, p, na, nb);
                    let (ub, pb) = b_from_a.forward(tape, p, nb, na);
                    rec.push("cross_a_from_b".into(), pa);
                    rec.push("cross_b_from_a".into(), pb);
                    let ua = tape.dropout(ua, d);
                    let ub = tape.dropout(ub, d);
                    (tape.add(za, ua), tape.add(zb, ub))
                };
                let ha = pool_a.forward(tape, p, fa, rec, "a.pool");
                let hb = pool_b.forward(tape, p, fb, rec, "b.pool");
                tape.concat(&[ha, hb])
            }
        };
        Ok(self.head.forward(tape, p, pooled, d))
    }

    /// Eval-mode logits.
    pub fn logits(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        self.logits_with(inputs, ForwardOptions::default())
    }

    pub fn logits_with(&self, inputs: &[Tensor], opts: ForwardOptions) -> Result<Vec<f64>> {
        let mut tape = Tape::eval();
        let p = self.params.bind(&mut tape);
        let x: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = self.forward(&mut tape, &p, &x, opts)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Eval-mode logits and every attention map.
    pub fn attention_maps(&self, inputs: &[Tensor]) -> Result<(Vec<f64>, AttentionMaps)> {
        let mut tape = Tape::eval();
        let p = self.params.bind(&mut tape);
        let x: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut rec = Recorder { enabled: true, entries: Vec::new() };
        let out = self.forward_recorded(&mut tape, &p, &x, ForwardOptions::default(), &mut rec)?;
        let maps = rec.entries.into_iter().map(|(n, v)| (n, tape.value(v).clone())).collect();
        Ok((tape.value(out).data().to_vec(), maps))
    }

    /// Mean BCE loss and parameter gradients on one batch; dropout is active
    /// and seeded by `seed`.
    pub fn loss_and_grads(&self, inputs: &[Tensor], labels: &[f64], seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::train(seed);
        let p = self.params.bind(&mut tape);
        let x: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let logits = self.forward(&mut tape, &p, &x, ForwardOptions::default())?;
        let loss = tape.bce_with_logits(logits, labels)?;
        let g = tape.backward(loss);
        Ok((tape.value(loss).item(), p.iter().map(|&v| g.tensor(v)).collect()))
    }

    /// Eval-mode mean BCE loss.
    pub fn loss(&self, inputs: &[Tensor], labels: &[f64]) -> Result<f64> {
        let mut tape = Tape::eval();
        let p = self.params.bind(&mut tape);
        let x: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let logits = self.forward(&mut tape, &p, &x, ForwardOptions::default())?;
        let loss = tape.bce_with_logits(logits, labels)?;
        Ok(tape.value(loss).item())
    }
}

/// Fraction of stress labels among the `k` nearest training rows
/// (Euclidean; ties in distance broken by training order).
pub fn knn_scores(train: &[Vec<f64>], train_labels: &[f64], test: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k = {k} with {} training rows", train.len())));
    }
    if train.len() != train_labels.len() {
        return Err(Error::Shape("training rows and labels differ in length".into()));
    }
    let dim = train[0].len();
    if train.iter().chain(test).any(|r| r.len() != dim) {
        return Err(Error::Shape("summary rows differ in width".into()));
    }
    Ok(test
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().map(|&(_, i)| train_labels[i]).sum::<f64>() / k as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 64], dropout: 0.2 }
    }
}

/// Fully-connected baseline over per-window summary features.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub input_dim: usize,
    pub params: ParamSet,
    layers: Vec<Linear>,
}

impl MlpModel {
    pub fn new(config: MlpConfig, input_dim: usize, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) || input_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("invalid MLP configuration".into()));
        }
        let mut init = Init::new(seed);
        let mut b = Builder { params: ParamSet::default(), init: &mut init };
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(b.linear(&format!("mlp.fc{i}"), fan_in, h, true));
            fan_in = h;
        }
        layers.push(b.linear("mlp.out", fan_in, 1, true));
        let params = b.params;
        Ok(MlpModel { config, input_dim, params, layers })
    }

    /// `x` is `[B, D]`; returns logits `[B]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::Shape(format!("MLP input {s:?} does not match width {}", self.input_dim)));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h);
            if i < last {
                h = tape.relu(h);
                h = tape.dropout(h, self.config.dropout);
            }
        }
        Ok(tape.reshape(h, &[s[0]]))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::eval();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn loss_and_grads(&self, x: &Tensor, labels: &[f64], seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::train(seed);
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, &p, xv)?;
        let loss = tape.bce_with_logits(logits, labels)?;
        let g = tape.backward(loss);
        Ok((tape.value(loss).item(), p.iter().map(|&v| g.tensor(v)).collect()))
    }

    pub fn loss(&self, x: &Tensor, labels: &[f64]) -> Result<f64> {
        let mut tape = Tape::eval();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, &p, xv)?;
        let loss = tape.bce_with_logits(logits, labels)?;
        Ok(tape.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            max_t: 12,
            stem_kernels: vec![3, 5, 7],
            fusion,
            head_hidden: 8,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        assert!(TemporalModel::new(toy(Fusion::CrossModal), &[8], 0).is_err());
    }

    #[test]
    fn default_parameter_count() {
        let m = TemporalModel::new(ModelConfig::default(), &[168], 1).unwrap();
        let (f, e, t, ffn, h) = (168, 64, 45, 256, 32);
        let stem = f * (3 + 5 + 7) + 3 * f + 3 * f * e + e;
        let layer = 4 * (e * e + e) + (e * ffn + ffn) + (ffn * e + e);
        let expected = stem + t * e + 2 * layer + (e * e + e) + (e * h + h) + (h + 1);
        assert_eq!(m.parameter_count(), expected);
        assert_eq!(m.parameter_count(), 143_953);
        let again = TemporalModel::new(ModelConfig::default(), &[168], 1).unwrap();
        assert_eq!(again.params, m.params);
    }

    #[test]
    fn shapes_and_determinism() {
        let m = TemporalModel::new(toy(Fusion::Unimodal), &[8], 3).unwrap();
        let x = random(&[2, 12, 8], 4);
        let a = m.logits(&[x.clone()]).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.logits(&[x.clone()]).unwrap());
        let mut dup = x.data()[..96].to_vec();
        dup.extend_from_slice(&x.data()[..96]);
        let d = m.logits(&[Tensor::new(&[2, 12, 8], dup).unwrap()]).unwrap();
        assert_eq!(d[0], d[1]);
        assert!(matches!(m.logits(&[random(&[1, 13, 8], 5)]), Err(Error::Config(_))));
        assert!(matches!(m.logits(&[random(&[1, 12, 7], 5)]), Err(Error::Shape(_))));
    }

    #[test]
    fn stem_of_zero_input_is_zero() {
        let m = TemporalModel::new(toy(Fusion::Unimodal), &[8], 3).unwrap();
        let Layout::Single { branch, .. } = &m.layout else { unreachable!() };
        let mut tape = Tape::eval();
        let p = m.params.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[1, 12, 8]));
        let z = branch.stem.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(z), &[1, 12, 16]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_output_shape_default() {
        let m = TemporalModel::new(ModelConfig { max_t: 90, ..ModelConfig::default() }, &[168], 3).unwrap();
        let Layout::Single { branch, .. } = &m.layout else { unreachable!() };
        let mut tape = Tape::eval();
        let p = m.params.bind(&mut tape);
        let x = tape.leaf(random(&[1, 90, 168], 1));
        let z = branch.stem.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(z), &[1, 90, 64]);
    }

    fn encode(m: &TemporalModel, z: &Tensor) -> Tensor {
        let Layout::Single { branch, .. } = &m.layout else { unreachable!() };
        let mut tape = Tape::eval();
        let p = m.params.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = branch.encoder.forward(&mut tape, &p, zv, 0.0, &mut Recorder::default(), "enc");
        tape.value(out).clone()
    }

    #[test]
    fn zero_layer_encoder_adds_positions() {
        let m = TemporalModel::new(ModelConfig { n_layers: 0, ..toy(Fusion::Unimodal) }, &[8], 3).unwrap();
        let z = random(&[1, 10, 16], 8);
        let out = encode(&m, &z);
        let pos = &m.params.tensors[m.params.index("enc.pos").unwrap()];
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, z.data()[i] + pos.data()[i]);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let mut m = TemporalModel::new(toy(Fusion::Unimodal), &[8], 3).unwrap();
        m.params.get_mut("enc.pos").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (t, e) = (10, 16);
        let z = random(&[1, t, e], 9);
        let perm = [3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let zp = Tensor::from_fn(&[1, t, e], |i| z.data()[perm[i / e] * e + i % e]);
        let a = encode(&m, &z);
        let b = encode(&m, &zp);
        for i in 0..t * e {
            assert!((b.data()[i] - a.data()[perm[i / e] * e + i % e]).abs() < 1e-12);
        }
    }

    fn assert_rows_sum_to_one(maps: &AttentionMaps) {
        for (name, m) in maps {
            let n = m.last_dim();
            for row in m.data().chunks(n) {
                assert!(row.iter().all(|&v| v >= 0.0), "{name}");
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10, "{name}");
            }
        }
    }

    #[test]
    fn attention_weights_are_distributions() {
        let m = TemporalModel::new(toy(Fusion::CrossModal), &[8, 3], 3).unwrap();
        let (_, maps) = m.attention_maps(&[random(&[2, 12, 8], 1), random(&[2, 12, 3], 2)]).unwrap();
        assert_eq!(maps.len(), 2 + 2 + 2 + 2);
        assert_eq!(maps["a.enc.layer0.self"].shape(), &[4, 12, 12]);
        assert_eq!(maps["a.pool"].shape(), &[2, 1, 12]);
        assert_rows_sum_to_one(&maps);
        let u = TemporalModel::new(toy(Fusion::Unimodal), &[8], 3).unwrap();
        assert_rows_sum_to_one(&u.attention_maps(&[random(&[2, 12, 8], 1)]).unwrap().1);
    }

    fn pool_only(w: Vec<f64>, v: Vec<f64>, z: Tensor) -> (Tensor, Tensor) {
        let e = z.last_dim();
        let mut tape = Tape::eval();
        let pw = tape.leaf(Tensor::new(&[e, e], w).unwrap());
        let pv = tape.leaf(Tensor::new(&[e, 1], v).unwrap());
        let zv = tape.leaf(z);
        let pool = Pool { w: 0, v: 1 };
        let mut rec = Recorder { enabled: true, entries: vec![] };
        let h = pool.forward(&mut tape, &[pw, pv], zv, &mut rec, "pool");
        (tape.value(h).clone(), tape.value(rec.entries[0].1).clone())
    }

    #[test]
    fn attention_pool_examples() {
        let z = Tensor::new(&[1, 4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let (h, a) = pool_only(vec![0.0; 4], vec![0.0; 2], z);
        assert_eq!(a.data(), &[0.25; 4]);
        assert_eq!(h.data(), &[4.0, 5.0]);
        let z1 = Tensor::new(&[1, 1, 2], vec![0.3, -0.7]).unwrap();
        let (h, a) = pool_only(vec![0.5, 0.1, -0.2, 0.4], vec![1.0, 2.0], z1);
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(h.data(), &[0.3, -0.7]);
        // W = I, v = (ln3 / tanh(0.5), 0) with z_1 = (0.5, 0), z_2 = 0 gives scores [ln 3, 0]
        let s = 3f64.ln() / 0.5f64.tanh();
        let z2 = Tensor::new(&[1, 2, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let (h, a) = pool_only(vec![1.0, 0.0, 0.0, 1.0], vec![s, 0.0], z2);
        assert!((a.data()[0] - 0.75).abs() < 1e-15 && (a.data()[1] - 0.25).abs() < 1e-15);
        assert!((h.data()[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn zero_value_projections_bypass_cross_attention() {
        let mut m = TemporalModel::new(toy(Fusion::CrossModal), &[8, 3], 5).unwrap();
        for name in ["cross_a_from_b.v.w", "cross_b_from_a.v.w"] {
            m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = [random(&[2, 12, 8], 1), random(&[2, 12, 3], 2)];
        let fused = m.logits(&x).unwrap();
        let skipped = m.logits_with(&x, ForwardOptions { skip_cross: true }).unwrap();
        assert_eq!(fused, skipped);
    }

    #[test]
    fn swapping_stream_contents_changes_logits() {
        let m = TemporalModel::new(toy(Fusion::CrossModal), &[4, 4], 6).unwrap();
        let (a, b) = (random(&[2, 12, 4], 1), random(&[2, 12, 4], 2));
        assert_ne!(m.logits(&[a.clone(), b.clone()]).unwrap(), m.logits(&[b, a]).unwrap());
        assert!(matches!(m.logits(&[random(&[2, 12, 4], 1), random(&[2, 11, 4], 2)]), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_modal_default_shapes() {
        let m = TemporalModel::new(ModelConfig { fusion: Fusion::CrossModal, max_t: 90, ..ModelConfig::default() }, &[168, 3], 1)
            .unwrap();
        let idx = m.params.index("head.fc1.w").unwrap();
        assert_eq!(m.params.tensors[idx].shape(), &[128, 32]);
        let out = m.logits(&[random(&[1, 90, 168], 1), random(&[1, 90, 3], 2)]).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn training_decreases_loss_on_separable_batch() {
        let m0 = TemporalModel::new(ModelConfig { dropout: 0.1, ..toy(Fusion::Unimodal) }, &[4], 7).unwrap();
        let mut x = random(&[8, 12, 4], 3);
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if labels[i / 48] == 1.0 {
                *v += 1.0;
            }
        }
        let mut m = m0.clone();
        let mut adam = ndcore::Adam::new(1e-3, &m.params.tensors);
        let mut losses = vec![m.loss(&[x.clone()], &labels).unwrap()];
        for epoch in 0..5 {
            let (_, g) = m.loss_and_grads(&[x.clone()], &labels, epoch).unwrap();
            adam.step(&mut m.params.tensors, &g, &m.params.names).unwrap();
            losses.push(m.loss(&[x.clone()], &labels).unwrap());
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn knn_examples() {
        let train = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0], vec![6.0, 6.0]];
        let labels = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(knn_scores(&train, &labels, &[vec![5.0, 5.0], vec![0.0, 0.0]], 1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(knn_scores(&train, &labels, &[vec![5.0, 5.0], vec![-3.0, 9.0]], 4).unwrap(), vec![0.5, 0.5]);
        assert_eq!(knn_scores(&train, &labels, &[vec![5.5, 5.0]], 3).unwrap(), vec![2.0 / 3.0]);
        assert!(matches!(knn_scores(&train, &labels, &[vec![0.0, 0.0]], 5), Err(Error::Config(_))));
    }

    #[test]
    fn mlp_shapes() {
        let m = MlpModel::new(MlpConfig::default(), 10, 1).unwrap();
        assert_eq!(m.params.count(), 10 * 128 + 128 + 128 * 64 + 64 + 64 + 1);
        let out = m.logits(&random(&[3, 10], 2)).unwrap();
        assert_eq!(out.len(), 3);
        let (loss, g) = m.loss_and_grads(&random(&[3, 10], 2), &[0.0, 1.0, 1.0], 4).unwrap();
        assert!(loss.is_finite());
        assert_eq!(g.len(), m.params.len());
    }
}
