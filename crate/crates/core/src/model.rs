//! Relative-position transformer encoder–decoder with an exemplar guider.
//!
//! All sequences are processed one example at a time (no batch axis). Every
//! method takes the [`Graph`] it records into; the graph borrows the model's
//! parameters, so a training step is: build a graph, compute the loss,
//! `backward`, accumulate into `params`, then step the optimizer.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tensorgrad::{AdamW, Graph, ParamId, ParamSet, Real, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Plain encoder–decoder over the input diff.
    None,
    /// Exemplars weighted by the guider.
    Guided,
    /// Exemplars concatenated without weighting.
    Unguided,
}

/// Which exemplar encoding is fused into the decoder memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseSource {
    Message,
    ExemplarDiff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub rel_clip: usize,
    pub vocab_size: usize,
    pub max_diff_len: usize,
    pub max_msg_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub shared_encoders: bool,
    pub retrieval: RetrievalMode,
    pub fuse_source: FuseSource,
    pub guider_bias: bool,
    pub num_exemplars: usize,
    /// Output logits reuse the token embedding table (plus `out.b`).
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            num_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 512,
            rel_clip: 16,
            vocab_size: 0,
            max_diff_len: 200,
            max_msg_len: 50,
            dropout: 0.1,
            init_std: 0.02,
            shared_encoders: true,
            retrieval: RetrievalMode::Guided,
            fuse_source: FuseSource::Message,
            guider_bias: true,
            num_exemplars: 1,
            tie_output: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(invalid!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model,
                self.num_heads
            ));
        }
        if self.rel_clip == 0 {
            return Err(invalid!("rel_clip must be at least 1"));
        }
        if self.max_diff_len == 0 || self.max_msg_len < 2 || self.ffn_dim == 0 {
            return Err(invalid!("lengths and widths must be positive (max_msg_len ≥ 2)"));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(invalid!("need at least one encoder and one decoder layer"));
        }
        if self.vocab_size <= EOS_ID {
            return Err(invalid!("vocab_size {} too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1)"));
        }
        if self.retrieval != RetrievalMode::None && self.num_exemplars == 0 {
            return Err(invalid!("retrieval needs at least one exemplar"));
        }
        Ok(())
    }

    fn uses_exemplars(&self) -> bool {
        self.retrieval != RetrievalMode::None
    }
}

/// Which of the three encoder inputs is being encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRole {
    Diff,
    ExemplarDiff,
    ExemplarMsg,
}

impl EncoderRole {
    fn prefix(self, shared: bool) -> &'static str {
        match (shared, self) {
            (true, _) | (false, EncoderRole::Diff) => "enc",
            (false, EncoderRole::ExemplarDiff) => "enc_exdiff",
            (false, EncoderRole::ExemplarMsg) => "enc_exmsg",
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    rel: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    attn: AttnIds,
    ln1: NormIds,
    ffn: FfnIds,
    ln2: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    self_attn: AttnIds,
    ln1: NormIds,
    cross: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
    ln3: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct GuiderIds {
    w: ParamId,
    b: Option<ParamId>,
}

/// Encoder states of one sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[len, d_model]`
    pub states: Var,
    pub mask: Vec<bool>,
    /// `[d_model]`, mean of the unmasked rows of `states`.
    pub pooled: Var,
}

/// Decoder memory: `[len, d_model]` states and their mask.
#[derive(Clone, Debug)]
pub struct Fused {
    pub states: Var,
    pub mask: Vec<bool>,
}

/// Attention probabilities recorded during a forward pass, one `[q, k]`
/// node per layer and head.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

/// One retrieved exemplar as encoder ids (no `<bos>`/`<eos>`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarIds {
    pub diff: Vec<usize>,
    pub msg: Vec<usize>,
}

/// A training or inference item with padding removed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub diff: Vec<usize>,
    pub exemplars: Vec<ExemplarIds>,
    /// `<bos> message <eos>`; empty for inference-only items.
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, ending in `<eos>` unless the length cap was hit.
    pub ids: Vec<usize>,
    /// Guider outputs per exemplar (empty without a guider).
    pub lambdas: Vec<f64>,
}

pub struct RaceModel<T: Real> {
    config: ModelConfig,
    pub params: ParamSet<T>,
    embed: ParamId,
    encoders: Vec<(EncoderRole, Vec<EncLayer>)>,
    guider: Option<GuiderIds>,
    decoder: Vec<DecLayer>,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, hd, r) = (c.d_model, c.ffn_dim, c.head_dim(), 2 * c.rel_clip + 1);
    let mut specs = vec![("embed".to_string(), vec![c.vocab_size, d], Init::Normal)];
    let attn = |specs: &mut Vec<_>, p: &str, rel: bool| {
        for w in ["wq", "wk", "wv"] {
            specs.push((format!("{p}.{w}"), vec![d, d], Init::Normal));
        }
        if rel {
            specs.push((format!("{p}.rel_k"), vec![r, hd], Init::Normal));
            specs.push((format!("{p}.rel_v"), vec![r, hd], Init::Normal));
        }
    };
    let norm = |specs: &mut Vec<_>, p: &str| {
        specs.push((format!("{p}.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.bias"), vec![d], Init::Zeros));
    };
    let ffn = |specs: &mut Vec<_>, p: &str| {
        specs.push((format!("{p}.w1"), vec![d, f], Init::Normal));
        specs.push((format!("{p}.b1"), vec![f], Init::Zeros));
        specs.push((format!("{p}.w2"), vec![f, d], Init::Normal));
        specs.push((format!("{p}.b2"), vec![d], Init::Zeros));
    };
    for role in encoder_roles(c) {
        let prefix = role.prefix(c.shared_encoders);
        for l in 0..c.enc_layers {
            let p = format!("{prefix}.{l}");
            attn(&mut specs, &format!("{p}.attn"), true);
            norm(&mut specs, &format!("{p}.ln1"));
            ffn(&mut specs, &format!("{p}.ffn"));
            norm(&mut specs, &format!("{p}.ln2"));
        }
    }
    if c.retrieval == RetrievalMode::Guided {
        specs.push(("guider.w".into(), vec![1, 2 * d], Init::Normal));
        if c.guider_bias {
            specs.push(("guider.b".into(), vec![1], Init::Zeros));
        }
    }
    for l in 0..c.dec_layers {
        let p = format!("dec.{l}");
        attn(&mut specs, &format!("{p}.self"), true);
        norm(&mut specs, &format!("{p}.ln1"));
        attn(&mut specs, &format!("{p}.cross"), false);
        norm(&mut specs, &format!("{p}.ln2"));
        ffn(&mut specs, &format!("{p}.ffn"));
        norm(&mut specs, &format!("{p}.ln3"));
    }
    if !c.tie_output {
        specs.push(("out.w".into(), vec![d, c.vocab_size], Init::Normal));
    }
    specs.push(("out.b".into(), vec![c.vocab_size], Init::Zeros));
    specs
}

fn encoder_roles(c: &ModelConfig) -> Vec<EncoderRole> {
    if c.shared_encoders || !c.uses_exemplars() {
        vec![EncoderRole::Diff]
    } else {
        vec![EncoderRole::Diff, EncoderRole::ExemplarDiff, EncoderRole::ExemplarMsg]
    }
}

/// `idx[i * m + j]` is the flat position of `(i, clip(j - i) + w)` in an
/// `[n, 2w + 1]` table.
fn relative_index(n: usize, m: usize, w: usize) -> Rc<[usize]> {
    let r = 2 * w + 1;
    let w = w as isize;
    let mut idx = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let off = (j as isize - i as isize).clamp(-w, w) + w;
            idx.push(i * r + off as usize);
        }
    }
    idx.into()
}

/// Additive attention mask: `-inf` where key `j` is masked or, when causal,
/// where `j > i`.
fn mask_bias<T: Real>(n: usize, key_mask: &[bool], causal: bool) -> Vec<T> {
    let m = key_mask.len();
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            if !key_mask[j] || (causal && j > i) {
                out[i * m + j] = T::neg_infinity();
            }
        }
    }
    out
}

impl<T: Real> RaceModel<T> {
    /// Fresh parameters: weights `N(0, init_std)`, norm gains 1, biases 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| invalid!("init_std {}: {e}", config.init_std))?;
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal => (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            params.add(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Binds a parameter set (e.g. from a checkpoint) to `config`, checking
    /// that every expected tensor exists with the right shape and nothing else.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(invalid!(
                "parameter set has {} tensors, configuration expects {}",
                params.len(),
                specs.len()
            ));
        }
        for (name, shape, _) in &specs {
            match params.by_name(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(invalid!("{name}: shape {:?}, expected {shape:?}", t.shape()));
                }
                None => return Err(invalid!("missing parameter {name}")),
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let attn = |p: &str, rel: bool| AttnIds {
            wq: id(&format!("{p}.wq")),
            wk: id(&format!("{p}.wk")),
            wv: id(&format!("{p}.wv")),
            rel: rel.then(|| (id(&format!("{p}.rel_k")), id(&format!("{p}.rel_v")))),
        };
        let norm = |p: &str| NormIds {
            gain: id(&format!("{p}.gain")),
            bias: id(&format!("{p}.bias")),
        };
        let ffn = |p: &str| FfnIds {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let encoders = encoder_roles(&config)
            .into_iter()
            .map(|role| {
                let prefix = role.prefix(config.shared_encoders);
                let layers = (0..config.enc_layers)
                    .map(|l| EncLayer {
                        attn: attn(&format!("{prefix}.{l}.attn"), true),
                        ln1: norm(&format!("{prefix}.{l}.ln1")),
                        ffn: ffn(&format!("{prefix}.{l}.ffn")),
                        ln2: norm(&format!("{prefix}.{l}.ln2")),
                    })
                    .collect();
                (role, layers)
            })
            .collect();
        let guider = (config.retrieval == RetrievalMode::Guided).then(|| GuiderIds {
            w: id("guider.w"),
            b: config.guider_bias.then(|| id("guider.b")),
        });
        let decoder = (0..config.dec_layers)
            .map(|l| DecLayer {
                self_attn: attn(&format!("dec.{l}.self"), true),
                ln1: norm(&format!("dec.{l}.ln1")),
                cross: attn(&format!("dec.{l}.cross"), false),
                ln2: norm(&format!("dec.{l}.ln2")),
                ffn: ffn(&format!("dec.{l}.ffn")),
                ln3: norm(&format!("dec.{l}.ln3")),
            })
            .collect();
        Ok(Self {
            embed: id("embed"),
            out_w: (!config.tie_output).then(|| id("out.w")),
            out_b: id("out.b"),
            encoders,
            guider,
            decoder,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn encoder_layers(&self, role: EncoderRole) -> &[EncLayer] {
        let want = if self.config.shared_encoders || !self.config.uses_exemplars() {
            EncoderRole::Diff
        } else {
            role
        };
        &self
            .encoders
            .iter()
            .find(|(r, _)| *r == want)
            .expect("encoder exists for every role")
            .1
    }

    fn attention(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        memory: Var,
        ids: &AttnIds,
        rel_index: Option<&Rc<[usize]>>,
        bias: &[T],
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let hd = self.config.head_dim();
        let n = g.shape(query)[0];
        let m = g.shape(memory)[0];
        let r = 2 * self.config.rel_clip + 1;
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let (wq, wk, wv) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv));
        let q = g.matmul(query, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let rel = match (ids.rel, rel_index) {
            (Some((pk, pv)), Some(idx)) => Some((g.param(pk), g.param(pv), idx)),
            (None, None) => None,
            _ => unreachable!("relative tables and index come together"),
        };
        let mut heads = Vec::with_capacity(self.config.num_heads);
        let mut probs = Vec::new();
        for h in 0..self.config.num_heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let mut scores = g.matmul_t(qh, kh)?;
            if let Some((pk, _, idx)) = &rel {
                let table = g.matmul_t(qh, *pk)?;
                let per_pair = g.gather(table, Rc::clone(idx), vec![n, m])?;
                scores = g.add(scores, per_pair)?;
            }
            let scores = g.scale(scores, scale);
            let scores = g.add_const(scores, bias)?;
            let alpha = g.softmax(scores)?;
            probs.push(alpha);
            let mut out = g.matmul(alpha, vh)?;
            if let Some((_, pv, idx)) = &rel {
                let by_offset = g.scatter_add(alpha, Rc::clone(idx), vec![n, r])?;
                let rel_out = g.matmul(by_offset, *pv)?;
                out = g.add(out, rel_out)?;
            }
            heads.push(out);
        }
        if let Some(t) = trace {
            t.extend(probs);
        }
        Ok(g.concat(&heads, 1)?)
    }

    fn add_norm(&self, g: &mut Graph<'_, T>, a: Var, b: Var, ids: &NormIds) -> Result<Var> {
        let s = g.add(a, b)?;
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        Ok(g.layer_norm(s, gain, bias)?)
    }

    fn ffn(&self, g: &mut Graph<'_, T>, x: Var, ids: &FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout);
        let o = g.matmul(h, w2)?;
        Ok(g.add(o, b2)?)
    }

    fn embed(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(invalid!("token id {bad} outside vocabulary of {}", self.config.vocab_size));
        }
        let table = g.param(self.embed);
        let x = g.embedding(table, ids)?;
        Ok(g.dropout(x, self.config.dropout))
    }

    /// Encodes `ids` (mask 1 = real token); pooled is the mean over real tokens.
    pub fn encode(&self, g: &mut Graph<'_, T>, role: EncoderRole, ids: &[usize], mask: &[bool]) -> Result<EncoderOutput> {
        self.encode_traced(g, role, ids, mask, None)
    }

    pub fn encode_traced(
        &self,
        g: &mut Graph<'_, T>,
        role: EncoderRole,
        ids: &[usize],
        mask: &[bool],
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<EncoderOutput> {
        let n = ids.len();
        if n != mask.len() {
            return Err(invalid!("{n} ids with a mask of {}", mask.len()));
        }
        if n > self.config.max_diff_len {
            return Err(invalid!("encoder input of {n} tokens exceeds cap {}", self.config.max_diff_len));
        }
        if !mask.iter().any(|&m| m) {
            return Err(invalid!("encoder input has no unmasked tokens"));
        }
        let idx = relative_index(n, n, self.config.rel_clip);
        let bias = mask_bias::<T>(n, mask, false);
        let mut x = self.embed(g, ids)?;
        for layer in self.encoder_layers(role) {
            let a = self.attention(g, x, x, &layer.attn, Some(&idx), &bias, trace.as_deref_mut().map(|t| &mut t.self_attn))?;
            let a = g.dropout(a, self.config.dropout);
            let hid = self.add_norm(g, a, x, &layer.ln1)?;
            let f = self.ffn(g, hid, &layer.ffn)?;
            let f = g.dropout(f, self.config.dropout);
            x = self.add_norm(g, f, hid, &layer.ln2)?;
        }
        let pooled = g.masked_mean(x, mask)?;
        Ok(EncoderOutput {
            states: x,
            mask: mask.to_vec(),
            pooled,
        })
    }

    /// `σ(W_s [pool_d; pool_s] + b)` as a one-element node.
    pub fn guider_lambda(&self, g: &mut Graph<'_, T>, enc_d: &EncoderOutput, enc_s: &EncoderOutput) -> Result<Var> {
        let ids = self
            .guider
            .ok_or_else(|| invalid!("model was built without a guider"))?;
        let d = self.config.d_model;
        if g.shape(enc_d.pooled) != [d] || g.shape(enc_s.pooled) != [d] {
            return Err(Error::Tensor(tensorgrad::TensorError::Shape {
                op: "guider_lambda",
                detail: format!("pooled {:?} and {:?}, width {d}", g.shape(enc_d.pooled), g.shape(enc_s.pooled)),
            }));
        }
        let both = g.concat(&[enc_d.pooled, enc_s.pooled], 0)?;
        let w = g.param(ids.w);
        let z = g.matmul_t(both, w)?;
        let z = match ids.b {
            Some(b) => {
                let b = g.param(b);
                g.add(z, b)?
            }
            None => z,
        };
        Ok(g.sigmoid(z))
    }

    /// Runs the encoders and fusion for `ex`; returns the decoder memory and
    /// the guider outputs.
    pub fn memory(&self, g: &mut Graph<'_, T>, ex: &Example) -> Result<(Fused, Vec<Var>)> {
        let all = vec![true; ex.diff.len()];
        let enc_d = self.encode(g, EncoderRole::Diff, &ex.diff, &all)?;
        if !self.config.uses_exemplars() {
            return Ok((fuse_noguider(g, &enc_d, &[])?, Vec::new()));
        }
        let k = self.config.num_exemplars;
        if ex.exemplars.len() < k {
            return Err(invalid!("example has {} exemplars, model expects {k}", ex.exemplars.len()));
        }
        let mut fused_parts = Vec::with_capacity(k);
        let mut lambdas = Vec::new();
        for e in &ex.exemplars[..k] {
            let guided = self.config.retrieval == RetrievalMode::Guided;
            let need_exdiff = guided || self.config.fuse_source == FuseSource::ExemplarDiff;
            let enc_s = if need_exdiff {
                Some(self.encode(g, EncoderRole::ExemplarDiff, &e.diff, &vec![true; e.diff.len()])?)
            } else {
                None
            };
            if guided {
                lambdas.push(self.guider_lambda(g, &enc_d, enc_s.as_ref().unwrap())?);
            }
            let part = match self.config.fuse_source {
                FuseSource::ExemplarDiff => enc_s.unwrap(),
                FuseSource::Message => self.encode(g, EncoderRole::ExemplarMsg, &e.msg, &vec![true; e.msg.len()])?,
            };
            fused_parts.push(part);
        }
        let fused = if self.config.retrieval == RetrievalMode::Guided {
            fuse_multi(g, &enc_d, &fused_parts, &lambdas)?
        } else {
            fuse_noguider(g, &enc_d, &fused_parts)?
        };
        Ok((fused, lambdas))
    }

    /// Logits `[prefix.len(), vocab]` for the next token after each prefix position.
    pub fn decode_logits(&self, g: &mut Graph<'_, T>, memory: &Fused, prefix: &[usize]) -> Result<Var> {
        self.decode_logits_traced(g, memory, prefix, None)
    }

    pub fn decode_logits_traced(
        &self,
        g: &mut Graph<'_, T>,
        memory: &Fused,
        prefix: &[usize],
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let t = prefix.len();
        if t == 0 || t > self.config.max_msg_len {
            return Err(invalid!("decoder prefix of {t} tokens (cap {})", self.config.max_msg_len));
        }
        let idx = relative_index(t, t, self.config.rel_clip);
        let self_bias = mask_bias::<T>(t, &vec![true; t], true);
        let cross_bias = mask_bias::<T>(t, &memory.mask, false);
        let mut y = self.embed(g, prefix)?;
        for layer in &self.decoder {
            let a = self.attention(g, y, y, &layer.self_attn, Some(&idx), &self_bias, trace.as_deref_mut().map(|t| &mut t.self_attn))?;
            let a = g.dropout(a, self.config.dropout);
            let h1 = self.add_norm(g, a, y, &layer.ln1)?;
            let c = self.attention(g, h1, memory.states, &layer.cross, None, &cross_bias, trace.as_deref_mut().map(|t| &mut t.cross_attn))?;
            let c = g.dropout(c, self.config.dropout);
            let h2 = self.add_norm(g, c, h1, &layer.ln2)?;
            let f = self.ffn(g, h2, &layer.ffn)?;
            let f = g.dropout(f, self.config.dropout);
            y = self.add_norm(g, f, h2, &layer.ln3)?;
        }
        let logits = match self.out_w {
            Some(w) => {
                let w = g.param(w);
                g.matmul(y, w)?
            }
            None => {
                let table = g.param(self.embed);
                g.matmul_t(y, table)?
            }
        };
        let b = g.param(self.out_b);
        Ok(g.add(logits, b)?)
    }

    /// Teacher-forced cross-entropy of `ex.target`; also returns the λ nodes.
    pub fn loss(&self, g: &mut Graph<'_, T>, ex: &Example) -> Result<(Var, Vec<Var>)> {
        if ex.target.len() < 2 {
            return Err(invalid!("target needs at least <bos> and <eos>"));
        }
        let (memory, lambdas) = self.memory(g, ex)?;
        let n = ex.target.len();
        let logits = self.decode_logits(g, &memory, &ex.target[..n - 1])?;
        let loss = g.cross_entropy(logits, &ex.target[1..], Some(PAD_ID))?;
        Ok((loss, lambdas))
    }

    /// Greedy or beam decoding. Beam hypotheses are ranked by total
    /// log-probability divided by their length; equal scores go to the lower
    /// token id. The output holds at most `max_len` ids, `<eos>` included.
    pub fn generate(&self, ex: &Example, strategy: Strategy, max_len: usize) -> Result<Generation> {
        if max_len == 0 || max_len > self.config.max_msg_len {
            return Err(invalid!("max_len {max_len} outside 1..={}", self.config.max_msg_len));
        }
        let mut g = Graph::inference(&self.params);
        let (memory, lambda_vars) = self.memory(&mut g, ex)?;
        let lambdas = lambda_vars.iter().map(|&l| g.scalar(l).as_f64()).collect();
        let ids = match strategy {
            Strategy::Greedy => self.greedy(&mut g, &memory, max_len)?,
            Strategy::Beam { width } => self.beam(&mut g, &memory, max_len, width)?,
        };
        Ok(Generation { ids, lambdas })
    }

    fn next_logprobs(&self, g: &mut Graph<'_, T>, memory: &Fused, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.decode_logits(g, memory, prefix)?;
        let v = self.config.vocab_size;
        let row: Vec<f64> = g.value(logits)[(prefix.len() - 1) * v..].iter().map(|x| x.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(row.into_iter().map(|x| x - lse).collect())
    }

    fn greedy(&self, g: &mut Graph<'_, T>, memory: &Fused, max_len: usize) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_logprobs(g, memory, &prefix)?;
            let best = argmax(&lp);
            out.push(best);
            if best == EOS_ID {
                break;
            }
            prefix.push(best);
        }
        Ok(out)
    }

    fn beam(&self, g: &mut Graph<'_, T>, memory: &Fused, max_len: usize, width: usize) -> Result<Vec<usize>> {
        if width == 0 {
            return Err(invalid!("beam width must be at least 1"));
        }
        struct Hyp {
            ids: Vec<usize>,
            logp: f64,
        }
        let score = |h: &Hyp| h.logp / h.ids.len() as f64;
        let mut active = vec![Hyp {
            ids: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (b, h) in active.iter().enumerate() {
                let mut prefix = vec![BOS_ID];
                prefix.extend(&h.ids);
                let lp = self.next_logprobs(g, memory, &prefix)?;
                let len = (h.ids.len() + 1) as f64;
                for (tok, &l) in lp.iter().enumerate() {
                    cands.push(((h.logp + l) / len, b, tok, h.logp + l));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(width);
            for &(_, b, tok, logp) in cands.iter().take(width) {
                let mut ids = active[b].ids.clone();
                ids.push(tok);
                let h = Hyp { ids, logp };
                if tok == EOS_ID {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
            active = next;
            if active.is_empty() {
                break;
            }
        }
        finished.extend(active);
        let best = finished
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| score(a).total_cmp(&score(b)).then(j.cmp(i)))
            .map(|(_, h)| h.ids.clone())
            .unwrap_or_default();
        Ok(best)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn concat_rows<T: Real>(g: &mut Graph<'_, T>, parts: &[(Var, &[bool])]) -> Result<Fused> {
    let kept: Vec<&(Var, &[bool])> = parts.iter().filter(|(_, m)| !m.is_empty()).collect();
    let states = if kept.len() == 1 {
        kept[0].0
    } else {
        g.concat(&kept.iter().map(|(v, _)| *v).collect::<Vec<_>>(), 0)?
    };
    Ok(Fused {
        states,
        mask: kept.iter().flat_map(|(_, m)| m.iter().copied()).collect(),
    })
}

/// `[(1 - λ)·enc_d ; λ·enc_m]` along the sequence axis.
pub fn fuse<T: Real>(g: &mut Graph<'_, T>, enc_d: &EncoderOutput, enc_m: &EncoderOutput, lambda: Var) -> Result<Fused> {
    fuse_multi(g, enc_d, std::slice::from_ref(enc_m), &[lambda])
}

/// `[(1 - max λ)·enc_d ; λ_1·e_1 ; … ; λ_k·e_k]` in exemplar order.
pub fn fuse_multi<T: Real>(
    g: &mut Graph<'_, T>,
    enc_d: &EncoderOutput,
    exemplars: &[EncoderOutput],
    lambdas: &[Var],
) -> Result<Fused> {
    if exemplars.is_empty() {
        return Err(invalid!("fuse_multi needs at least one exemplar"));
    }
    if exemplars.len() != lambdas.len() {
        return Err(invalid!("{} exemplars with {} λ values", exemplars.len(), lambdas.len()));
    }
    let top = lambdas
        .iter()
        .copied()
        .enumerate()
        .max_by(|(i, a), (j, b)| g.scalar(*a).as_f64().total_cmp(&g.scalar(*b).as_f64()).then(j.cmp(i)))
        .map(|(_, v)| v)
        .expect("non-empty");
    let keep = g.one_minus(top);
    fuse_scaled(g, enc_d, keep, exemplars, lambdas)
}

/// `[diff_scale·enc_d ; s_1·e_1 ; … ; s_k·e_k]` with scalar scales.
pub fn fuse_scaled<T: Real>(
    g: &mut Graph<'_, T>,
    enc_d: &EncoderOutput,
    diff_scale: Var,
    exemplars: &[EncoderOutput],
    scales: &[Var],
) -> Result<Fused> {
    if exemplars.len() != scales.len() {
        return Err(invalid!("{} exemplars with {} scales", exemplars.len(), scales.len()));
    }
    let d = g.scale_by(enc_d.states, diff_scale)?;
    let mut parts = vec![(d, enc_d.mask.as_slice())];
    for (e, &l) in exemplars.iter().zip(scales) {
        let s = g.scale_by(e.states, l)?;
        parts.push((s, e.mask.as_slice()));
    }
    concat_rows(g, &parts)
}

/// Unweighted `[enc_d ; e_1 ; … ; e_k]`.
pub fn fuse_noguider<T: Real>(g: &mut Graph<'_, T>, enc_d: &EncoderOutput, exemplars: &[EncoderOutput]) -> Result<Fused> {
    let mut parts = vec![(enc_d.states, enc_d.mask.as_slice())];
    parts.extend(exemplars.iter().map(|e| (e.states, e.mask.as_slice())));
    concat_rows(g, &parts)
}

/// One optimizer step over `batch`: the mean example loss is backpropagated
/// and applied with `opt`. Dropout masks are drawn from `dropout_seed`.
pub fn training_step<T: Real>(
    model: &mut RaceModel<T>,
    opt: &mut AdamW<T>,
    batch: &[Example],
    dropout_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    model.params.zero_grad();
    let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let grads = {
            let mut g = Graph::new(&model.params).with_dropout_seed(dropout_seed.wrapping_add(i as u64));
            let (loss, _) = model.loss(&mut g, ex)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value}")));
            }
            total += value;
            let scaled = g.scale(loss, inv);
            g.backward(scaled)?
        };
        model.params.accumulate(&grads);
    }
    opt.step(&mut model.params)?;
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny(retrieval: RetrievalMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            rel_clip: 2,
            vocab_size: 32,
            max_diff_len: 20,
            max_msg_len: 10,
            dropout: 0.0,
            init_std: 0.3,
            retrieval,
            ..ModelConfig::default()
        }
    }

    fn example() -> Example {
        Example {
            diff: vec![4, 14, 15, 5, 10, 16, 11, 17, 12],
            exemplars: vec![ExemplarIds {
                diff: vec![4, 14, 5, 10, 18, 11, 17, 12],
                msg: vec![20, 21, 22],
            }],
            target: vec![BOS_ID, 20, 23, 22, EOS_ID],
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(RetrievalMode::Guided);
        assert!(c.validate().is_ok());
        c.d_model = 9;
        assert!(c.validate().is_err());
        let mut c = tiny(RetrievalMode::Guided);
        c.rel_clip = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_index_clips() {
        let idx = relative_index(3, 4, 1);
        // row 0: offsets 0, 1, 1, 1 → columns 1, 2, 2, 2
        assert_eq!(&idx[..4], &[1, 2, 2, 2]);
        // row 2: offsets -2, -1, 0, 1 → columns 0, 0, 1, 2 (+ 2 * 3)
        assert_eq!(&idx[8..], &[6, 6, 7, 8]);
    }

    #[test]
    fn no_guider_checkpoint_has_no_guider_params() {
        let m = RaceModel::<f32>::new(tiny(RetrievalMode::Unguided), 0).unwrap();
        assert!(m.params.iter().all(|(_, n, _)| !n.starts_with("guider")));
        let m = RaceModel::<f32>::new(tiny(RetrievalMode::Guided), 0).unwrap();
        assert!(m.params.contains("guider.w") && m.params.contains("guider.b"));
    }

    #[test]
    fn unshared_encoders_get_their_own_params() {
        let mut c = tiny(RetrievalMode::Guided);
        c.shared_encoders = false;
        let m = RaceModel::<f64>::new(c, 1).unwrap();
        assert!(m.params.contains("enc_exdiff.0.attn.wq"));
        assert!(m.params.contains("enc_exmsg.0.ffn.w1"));
        let mut g = Graph::new(&m.params);
        let (loss, _) = m.loss(&mut g, &example()).unwrap();
        let grads = g.backward(loss).unwrap();
        let id = m.params.id("enc_exmsg.0.attn.wv").unwrap();
        assert!(grads.param_grad(id).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn from_params_rejects_mismatched_sets() {
        let m = RaceModel::<f32>::new(tiny(RetrievalMode::Guided), 0).unwrap();
        assert!(RaceModel::from_params(tiny(RetrievalMode::Unguided), m.params.clone()).is_err());
        let mut c = tiny(RetrievalMode::Guided);
        c.ffn_dim = 12;
        assert!(RaceModel::from_params(c, m.params).is_err());
    }

    #[test]
    fn single_token_pool_is_its_state() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::None), 3).unwrap();
        let mut g = Graph::inference(&m.params);
        let e = m.encode(&mut g, EncoderRole::Diff, &[7], &[true]).unwrap();
        assert_eq!(g.value(e.pooled), g.value(e.states));
    }

    #[test]
    fn pooled_is_masked_mean() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::None), 3).unwrap();
        let mut g = Graph::inference(&m.params);
        let mask = [true, true, false, true, false];
        let e = m.encode(&mut g, EncoderRole::Diff, &[5, 6, 7, 8, 0], &mask).unwrap();
        let states = g.value(e.states);
        let pooled = g.value(e.pooled);
        for c in 0..8 {
            let want = [0, 1, 3].iter().map(|&r| states[r * 8 + c]).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(pooled[c], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn padding_content_is_invisible() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::None), 3).unwrap();
        let mask = [true, true, true, false, false];
        let mut g = Graph::inference(&m.params);
        let a = m.encode(&mut g, EncoderRole::Diff, &[9, 10, 11, 0, 0], &mask).unwrap();
        let b = m.encode(&mut g, EncoderRole::Diff, &[9, 10, 11, 25, 3], &mask).unwrap();
        let c = m.encode(&mut g, EncoderRole::Diff, &[9, 10, 11], &[true; 3]).unwrap();
        assert_eq!(g.value(a.pooled), g.value(b.pooled));
        assert_eq!(&g.value(a.states)[..24], &g.value(b.states)[..24]);
        assert_eq!(&g.value(a.states)[..24], g.value(c.states));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::None), 3).unwrap();
        let mut g = Graph::inference(&m.params);
        let mut trace = AttentionTrace::default();
        m.encode_traced(&mut g, EncoderRole::Diff, &[9, 10], &[true, true], Some(&mut trace)).unwrap();
        assert_eq!(trace.self_attn.len(), 2);
        for &p in &trace.self_attn {
            for row in g.value(p).chunks(2) {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn encoder_rejects_overlong_input() {
        let m = RaceModel::<f32>::new(tiny(RetrievalMode::None), 3).unwrap();
        let mut g = Graph::inference(&m.params);
        let ids = vec![5; 21];
        assert!(m.encode(&mut g, EncoderRole::Diff, &ids, &vec![true; 21]).is_err());
    }

    #[test]
    fn guider_zero_weights_give_one_half() {
        let mut m = RaceModel::<f64>::new(tiny(RetrievalMode::Guided), 3).unwrap();
        m.params.by_name_mut("guider.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::inference(&m.params);
        let d = m.encode(&mut g, EncoderRole::Diff, &[5, 6], &[true; 2]).unwrap();
        let s = m.encode(&mut g, EncoderRole::ExemplarDiff, &[7], &[true]).unwrap();
        let l = m.guider_lambda(&mut g, &d, &s).unwrap();
        assert_eq!(g.scalar(l), 0.5);
    }

    #[test]
    fn guider_matches_hand_arithmetic() {
        let mut m = RaceModel::<f64>::new(tiny(RetrievalMode::Guided), 5).unwrap();
        m.params.by_name_mut("guider.b").unwrap().data_mut()[0] = 0.3;
        let mut g = Graph::inference(&m.params);
        let d = m.encode(&mut g, EncoderRole::Diff, &[5, 6, 9], &[true; 3]).unwrap();
        let s = m.encode(&mut g, EncoderRole::ExemplarDiff, &[7, 8], &[true; 2]).unwrap();
        let l = m.guider_lambda(&mut g, &d, &s).unwrap();
        let w = m.params.by_name("guider.w").unwrap().data();
        let u: Vec<f64> = g.value(d.pooled).iter().chain(g.value(s.pooled)).copied().collect();
        let z: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + 0.3;
        assert_abs_diff_eq!(g.scalar(l), 1.0 / (1.0 + (-z).exp()), epsilon = 1e-14);
    }

    #[test]
    fn guider_saturates_with_large_bias() {
        let mut m = RaceModel::<f64>::new(tiny(RetrievalMode::Guided), 5).unwrap();
        m.params.by_name_mut("guider.b").unwrap().data_mut()[0] = 20.0;
        let mut g = Graph::inference(&m.params);
        let d = m.encode(&mut g, EncoderRole::Diff, &[5], &[true]).unwrap();
        let l = m.guider_lambda(&mut g, &d, &d.clone()).unwrap();
        assert!(g.scalar(l) > 0.9999 && g.scalar(l) < 1.0);
    }

    fn leaf_output(g: &mut Graph<'_, f64>, rows: usize, seed: f64) -> EncoderOutput {
        let data: Vec<f64> = (0..rows * 2).map(|i| seed + i as f64).collect();
        let states = g.constant(Tensor::new(vec![rows, 2], data).unwrap());
        let pooled = g.masked_mean(states, &vec![true; rows]).unwrap();
        EncoderOutput {
            states,
            mask: vec![true; rows],
            pooled,
        }
    }

    #[test]
    fn fuse_scales_and_lengths() {
        let mut g = Graph::<f64>::detached();
        let d = leaf_output(&mut g, 3, 1.0);
        let m = leaf_output(&mut g, 2, 10.0);
        let half = g.constant(Tensor::scalar(0.5));
        let f = fuse(&mut g, &d, &m, half).unwrap();
        assert_eq!(g.shape(f.states), &[5, 2]);
        assert_eq!(f.mask.len(), 5);
        let want: Vec<f64> = g.value(d.states).iter().chain(g.value(m.states)).map(|x| x * 0.5).collect();
        assert_eq!(g.value(f.states), want.as_slice());

        let plain = fuse_noguider(&mut g, &d, std::slice::from_ref(&m)).unwrap();
        let one = g.constant(Tensor::scalar(1.0));
        let unit = fuse_scaled(&mut g, &d, one, std::slice::from_ref(&m), &[one]).unwrap();
        assert_eq!(g.value(plain.states), g.value(unit.states));
        assert_eq!(plain.mask, unit.mask);
    }

    #[test]
    fn fuse_with_empty_exemplar_keeps_diff() {
        let mut g = Graph::<f64>::detached();
        let d = leaf_output(&mut g, 3, 1.0);
        let states = g.constant(Tensor::new(vec![0, 2], vec![]).unwrap());
        let empty = EncoderOutput {
            states,
            mask: vec![],
            pooled: d.pooled,
        };
        let l = g.constant(Tensor::scalar(0.25));
        let f = fuse(&mut g, &d, &empty, l).unwrap();
        let want: Vec<f64> = g.value(d.states).iter().map(|x| x * 0.75).collect();
        assert_eq!(g.value(f.states), want.as_slice());
        let p = fuse_noguider(&mut g, &d, &[empty]).unwrap();
        assert_eq!(g.value(p.states), g.value(d.states));
    }

    #[test]
    fn fuse_multi_uses_largest_lambda_for_diff() {
        let mut g = Graph::<f64>::detached();
        let d = leaf_output(&mut g, 2, 1.0);
        let es: Vec<_> = (0..3).map(|i| leaf_output(&mut g, i + 1, 5.0)).collect();
        let ls: Vec<Var> = [0.2, 0.7, 0.4].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let f = fuse_multi(&mut g, &d, &es, &ls).unwrap();
        assert_eq!(g.shape(f.states), &[2 + 1 + 2 + 3, 2]);
        assert_abs_diff_eq!(g.value(f.states)[0], 0.3 * g.value(d.states)[0], epsilon = 1e-15);
        assert!(fuse_multi(&mut g, &d, &[], &[]).is_err());
        let single = fuse_multi(&mut g, &d, &es[..1], &ls[..1]).unwrap();
        let direct = fuse(&mut g, &d, &es[0], ls[0]).unwrap();
        assert_eq!(g.value(single.states), g.value(direct.states));
    }

    #[test]
    fn decoder_is_causal() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::Guided), 9).unwrap();
        let mut g = Graph::inference(&m.params);
        let (mem, _) = m.memory(&mut g, &example()).unwrap();
        let a = m.decode_logits(&mut g, &mem, &[BOS_ID, 20, 21, 22]).unwrap();
        let b = m.decode_logits(&mut g, &mem, &[BOS_ID, 20, 30, 31]).unwrap();
        let v = 32;
        assert_eq!(&g.value(a)[..2 * v], &g.value(b)[..2 * v]);
        assert_ne!(&g.value(a)[2 * v..3 * v], &g.value(b)[2 * v..3 * v]);
    }

    #[test]
    fn masked_memory_gets_no_cross_attention() {
        let m = RaceModel::<f64>::new(tiny(RetrievalMode::None), 9).unwrap();
        let mut g = Graph::inference(&m.params);
        let mask = [true, true, false, true, false, false];
        let e = m.encode(&mut g, EncoderRole::Diff, &[5, 6, 0, 7, 0, 0], &mask).unwrap();
        let fused = Fused {
            states: e.states,
            mask: mask.to_vec(),
        };
        let mut trace = AttentionTrace::default();
        m.decode_logits_traced(&mut g, &fused, &[BOS_ID, 20], Some(&mut trace)).unwrap();
        assert_eq!(trace.cross_attn.len(), 2);
        for &p in &trace.cross_attn {
            for row in g.value(p).chunks(6) {
                for (w, &keep) in row.iter().zip(&mask) {
                    if !keep {
                        assert!(*w <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn beam_one_matches_greedy() {
        for seed in 0..5 {
            let m = RaceModel::<f32>::new(tiny(RetrievalMode::Guided), seed).unwrap();
            let ex = example();
            let a = m.generate(&ex, Strategy::Greedy, 8).unwrap();
            let b = m.generate(&ex, Strategy::Beam { width: 1 }, 8).unwrap();
            assert_eq!(a, b);
            assert!(a.ids.len() <= 8);
            assert!(a.ids.last() == Some(&EOS_ID) || a.ids.len() == 8);
            let w = m.generate(&ex, Strategy::Beam { width: 3 }, 8).unwrap();
            assert!(w.ids.len() <= 8);
        }
    }

    #[test]
    fn training_step_is_deterministic_and_learns() {
        let run = || {
            let mut c = tiny(RetrievalMode::Guided);
            c.init_std = 0.02;
            c.dropout = 0.1;
            let mut m = RaceModel::<f32>::new(c, 11).unwrap();
            let mut opt = AdamW::new(tensorgrad::AdamWConfig {
                lr: 1e-3,
                warmup_steps: 0,
                ..Default::default()
            });
            let ex = vec![example()];
            (0..50)
                .map(|s| training_step(&mut m, &mut opt, &ex, s).unwrap())
                .collect::<Vec<f64>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[49] < a[0], "{a:?}");
    }

    #[test]
    fn loss_decreases_every_step_without_dropout() {
        let mut c = tiny(RetrievalMode::Guided);
        c.init_std = 0.02;
        let mut m = RaceModel::<f32>::new(c, 11).unwrap();
        let mut opt = AdamW::new(tensorgrad::AdamWConfig {
            lr: 1e-3,
            warmup_steps: 0,
            ..Default::default()
        });
        let ex = vec![example()];
        let losses: Vec<f64> = (0..50).map(|s| training_step(&mut m, &mut opt, &ex, s).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut m = RaceModel::<f32>::new(tiny(RetrievalMode::Guided), 2).unwrap();
        m.params.set_frozen("enc.", true);
        let before = m.params.by_name("enc.0.attn.wq").unwrap().data().to_vec();
        let mut opt = AdamW::new(Default::default());
        training_step(&mut m, &mut opt, &[example()], 0).unwrap();
        assert_eq!(m.params.by_name("enc.0.attn.wq").unwrap().data(), before.as_slice());
    }
}
