//! Cross-encoder re-ranker: embeddings, pre-norm transformer layers with
//! sliding-window plus global attention, and a two-layer classifier head on
//! the `<s>` position.

pub mod attention;

use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::config::KvConfig;
use crate::data::{CandidateSet, Document, DocumentStore, Query, RunEntry};
use crate::error::{Error, Result};
use crate::numeric::{checkpoint, Gradients, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::retrieval::rank_order;
use crate::rng::Rng;
use crate::tokenizer::{encode_pair_with, DocumentText, EncodeOptions, GlobalAttention, TokenSequence, Vocabulary};

pub use attention::{sliding_window_attention, sliding_window_attention_eval, sliding_window_pattern, SplitPattern};

/// Index of the relevant class in the classifier output.
pub const RELEVANT: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Full window width; each side sees `window / 2` neighbours.
    pub window: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub classifier_hidden_dim: usize,
    pub separate_global_projections: bool,
    pub init_std: f64,
    pub global_attention: GlobalAttention,
    pub document_text: DocumentText,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8192,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            window: 64,
            max_len: 512,
            dropout_rate: 0.1,
            classifier_hidden_dim: 64,
            separate_global_projections: true,
            init_std: 0.02,
            global_attention: GlobalAttention::ClsAndQuery,
            document_text: DocumentText::TitleBody,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "hidden_dim",
    "num_layers",
    "num_heads",
    "window",
    "max_len",
    "dropout_rate",
    "classifier_hidden_dim",
    "separate_global_projections",
    "init_std",
    "global_attention",
    "document_text",
];

pub(crate) fn global_attention_name(g: GlobalAttention) -> &'static str {
    match g {
        GlobalAttention::ClsAndQuery => "cls_query",
        GlobalAttention::ClsOnly => "cls",
    }
}

pub(crate) fn document_text_name(d: DocumentText) -> &'static str {
    match d {
        DocumentText::TitleBody => "title_body",
        DocumentText::Body => "body",
        DocumentText::UrlTitleBody => "url_title_body",
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            window: 4,
            max_len: 32,
            dropout_rate: 0.0,
            classifier_hidden_dim: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= 4 {
            return fail(format!("vocab_size must exceed 4, got {}", self.vocab_size));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return fail(format!("window must be even and >= 2, got {}", self.window));
        }
        if self.max_len < 8 {
            return fail(format!("max_len must be >= 8, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.classifier_hidden_dim == 0 || self.num_layers == 0 {
            return fail("num_layers and classifier_hidden_dim must be positive".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be finite and non-negative, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            max_len: self.max_len,
            document_text: self.document_text,
            global: self.global_attention,
        }
    }

    /// Starts from `self` and applies every key present in `kv`.
    pub fn with_overrides(&self, kv: &KvConfig) -> Result<Self> {
        kv.check_keys(MODEL_KEYS)?;
        let mut c = self.clone();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(vocab_size);
        take!(hidden_dim);
        take!(num_layers);
        take!(num_heads);
        take!(window);
        take!(max_len);
        take!(dropout_rate);
        take!(classifier_hidden_dim);
        take!(separate_global_projections);
        take!(init_std);
        if let Some(g) = kv.get_str("global_attention") {
            c.global_attention = match g {
                "cls_query" => GlobalAttention::ClsAndQuery,
                "cls" => GlobalAttention::ClsOnly,
                other => return Err(Error::Config(format!("unknown global_attention `{other}`"))),
            };
        }
        if let Some(d) = kv.get_str("document_text") {
            c.document_text = match d {
                "title_body" => DocumentText::TitleBody,
                "body" => DocumentText::Body,
                "url_title_body" => DocumentText::UrlTitleBody,
                other => return Err(Error::Config(format!("unknown document_text `{other}`"))),
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("vocab_size", self.vocab_size.to_string());
        kv.set("hidden_dim", self.hidden_dim.to_string());
        kv.set("num_layers", self.num_layers.to_string());
        kv.set("num_heads", self.num_heads.to_string());
        kv.set("window", self.window.to_string());
        kv.set("max_len", self.max_len.to_string());
        kv.set("dropout_rate", format!("{:?}", self.dropout_rate));
        kv.set("classifier_hidden_dim", self.classifier_hidden_dim.to_string());
        kv.set("separate_global_projections", self.separate_global_projections.to_string());
        kv.set("init_std", format!("{:?}", self.init_std));
        kv.set("global_attention", global_attention_name(self.global_attention));
        kv.set("document_text", document_text_name(self.document_text));
        kv
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_kv().render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelConfig::default().with_overrides(&KvConfig::load(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    global: Option<[Linear; 3]>,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerLayout>,
    final_ln: Norm,
    head1: Linear,
    head2: Linear,
}

/// All learnable tensors of the encoder and classifier head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut Rng>,
    std: f64,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::randn(shape, self.std, rng),
            None => Tensor::zeros(shape),
        };
        self.store.push(name, t)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.weight(format!("{prefix}.weight"), &[fan_in, fan_out]);
        let b = self.store.push(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        let gain = self.store.push(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
        let bias = self.store.push(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
        Norm { gain, bias }
    }
}

impl ModelParams {
    fn build(config: &ModelConfig, rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            std: config.init_std,
        };
        let tok = b.weight("embeddings.token".into(), &[config.vocab_size, d]);
        let pos = b.weight("embeddings.position".into(), &[config.max_len, d]);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let q = b.linear(&format!("{p}.attn.query"), d, d);
            let k = b.linear(&format!("{p}.attn.key"), d, d);
            let v = b.linear(&format!("{p}.attn.value"), d, d);
            let global = config.separate_global_projections.then(|| {
                [
                    b.linear(&format!("{p}.attn.query_global"), d, d),
                    b.linear(&format!("{p}.attn.key_global"), d, d),
                    b.linear(&format!("{p}.attn.value_global"), d, d),
                ]
            });
            let o = b.linear(&format!("{p}.attn.output"), d, d);
            let ln2 = b.norm(&format!("{p}.ln2"), d);
            let ff1 = b.linear(&format!("{p}.ffn.in"), d, 4 * d);
            let ff2 = b.linear(&format!("{p}.ffn.out"), 4 * d, d);
            layers.push(LayerLayout { ln1, q, k, v, o, global, ln2, ff1, ff2 });
        }
        let final_ln = b.norm("final_ln", d);
        let head1 = b.linear("head.dense", d, config.classifier_hidden_dim);
        let head2 = b.linear("head.out", config.classifier_hidden_dim, 2);
        Ok(ModelParams {
            config: config.clone(),
            store: b.store,
            layout: Layout { tok, pos, layers, final_ln, head1, head2 },
        })
    }

    /// Normal(0, init_std) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// All weights zero (layer-norm gains still one).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    /// Builds parameters for `config` from checkpoint records. Extra records
    /// (optimizer state) are ignored; missing or mis-shaped ones are errors.
    pub fn from_records(config: &ModelConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        p.store.assign(records)?;
        Ok(p)
    }

    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(config, &checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, self.store.iter())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn with_store(&self, store: ParamStore) -> Self {
        ModelParams {
            config: self.config.clone(),
            store,
            layout: self.layout.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }
}

/// One forward pass on its own tape. Parameters are registered once, in
/// store order, so gradients come back aligned with [`ParamStore`].
pub struct Session<'p> {
    pub tape: Tape<'p>,
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut tape = Tape::new();
        let vars = params.store.tensors().iter().map(|t| tape.param(t)).collect();
        Session { tape, params, vars }
    }

    fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.var(l.w))?;
        self.tape.add_row(y, self.var(l.b))
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        self.tape.layer_norm(x, self.var(n.gain), self.var(n.bias), LAYER_NORM_EPS)
    }

    /// Encoder output `[n, d]` for one sequence.
    pub fn encode(&mut self, seq: &TokenSequence, training: bool, rng: &mut Rng) -> Result<Var> {
        let params: &'p ModelParams = self.params;
        let cfg = &params.config;
        let n = seq.len();
        if n == 0 || n > cfg.max_len {
            return Err(Error::Constraint(format!("sequence length {n} outside 1..={}", cfg.max_len)));
        }
        if seq.attention_mask.len() != n || seq.global_mask.len() != n {
            return Err(Error::shape("encode", &[n], &[seq.attention_mask.len(), seq.global_mask.len()]));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Constraint(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
        }
        let (heads, window, rate, separate) = (cfg.num_heads, cfg.window, cfg.dropout_rate, cfg.separate_global_projections);
        let layout = &params.layout;
        let split = SplitPattern::build(window, &seq.global_mask, &seq.attention_mask)?;
        let combined = (!separate).then(|| Rc::new(split.combined()));

        let tok = self.tape.embedding(self.var(layout.tok), &ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.tape.embedding(self.var(layout.pos), &positions)?;
        let mut x = self.tape.add(tok, pos)?;
        x = self.tape.dropout(x, rate, training, rng)?;

        for layer in &layout.layers {
            let h = self.norm(x, layer.ln1)?;
            let q = self.linear(h, layer.q)?;
            let k = self.linear(h, layer.k)?;
            let v = self.linear(h, layer.v)?;
            let attn = match (&layer.global, &combined) {
                (Some([qg, kg, vg]), _) => {
                    let local = self.tape.attention(q, k, v, heads, split.local.clone())?;
                    let qg = self.linear(h, *qg)?;
                    let kg = self.linear(h, *kg)?;
                    let vg = self.linear(h, *vg)?;
                    let global = self.tape.attention(qg, kg, vg, heads, split.global.clone())?;
                    self.tape.add(local, global)?
                }
                (None, Some(pattern)) => self.tape.attention(q, k, v, heads, pattern.clone())?,
                (None, None) => unreachable!("shared projections always build a combined pattern"),
            };
            let attn = self.linear(attn, layer.o)?;
            let attn = self.tape.dropout(attn, rate, training, rng)?;
            x = self.tape.add(x, attn)?;

            let h = self.norm(x, layer.ln2)?;
            let f = self.linear(h, layer.ff1)?;
            let f = self.tape.gelu(f);
            let f = self.linear(f, layer.ff2)?;
            let f = self.tape.dropout(f, rate, training, rng)?;
            x = self.tape.add(x, f)?;
        }
        self.norm(x, layout.final_ln)
    }

    /// `W₂ · gelu(dropout(W₁ · h0 + b₁)) + b₂` on a `[1, d]` vector; index
    /// 0 is the non-relevant logit, index 1 the relevant one.
    pub fn head(&mut self, h0: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        let (h1, h2) = (self.params.layout.head1, self.params.layout.head2);
        let z = self.linear(h0, h1)?;
        let z = self.tape.dropout(z, self.params.config.dropout_rate, training, rng)?;
        let z = self.tape.gelu(z);
        self.linear(z, h2)
    }

    /// Classifier logits `[1, 2]` for a packed sequence.
    pub fn logits(&mut self, seq: &TokenSequence, training: bool, rng: &mut Rng) -> Result<Var> {
        let enc = self.encode(seq, training, rng)?;
        let cls = self.tape.slice(enc, 0, 0, 1)?;
        self.head(cls, training, rng)
    }

    pub fn loss(&mut self, seq: &TokenSequence, label: usize, training: bool, rng: &mut Rng) -> Result<Var> {
        let logits = self.logits(seq, training, rng)?;
        self.tape.cross_entropy(logits, label)
    }

    /// Gradients of `loss` for every parameter, in store order.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut g: Gradients = self.tape.backward(loss)?;
        Ok(self.vars.iter().map(|&v| g.take(v)).collect())
    }
}

/// Encoder output as a plain tensor.
pub fn encoder_forward(seq: &TokenSequence, params: &ModelParams, training: bool, rng: &mut Rng) -> Result<Tensor> {
    let mut s = Session::new(params);
    let out = s.encode(seq, training, rng)?;
    Ok(s.tape.tensor(out))
}

/// Classifier logits for a `[d]` `<s>` vector.
pub fn relevance_head(h0: &Tensor, params: &ModelParams, training: bool, rng: &mut Rng) -> Result<Tensor> {
    let d = params.config.hidden_dim;
    if h0.numel() != d {
        return Err(Error::shape("relevance_head", h0.shape(), &[d]));
    }
    let mut s = Session::new(params);
    let x = s.tape.constant(Tensor::matrix(1, d, h0.data().to_vec())?);
    let out = s.head(x, training, rng)?;
    Ok(Tensor::vector(s.tape.value(out).to_vec()))
}

pub fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// Relevance probability of an already packed sequence, dropout off.
pub fn score_sequence(seq: &TokenSequence, params: &ModelParams) -> Result<f64> {
    let mut s = Session::new(params);
    // dropout is disabled, so the stream is never drawn from
    let mut rng = crate::rng::SeedStream::new(0).derive(crate::rng::Purpose::Dropout, 0);
    let logits = s.logits(seq, false, &mut rng)?;
    Ok(softmax2(s.tape.value(logits))[RELEVANT])
}

pub fn score_pair(query: &Query, doc: &Document, vocab: &Vocabulary, params: &ModelParams) -> Result<f64> {
    let seq = encode_pair_with(query, doc, vocab, &params.config.encode_options())?;
    score_sequence(&seq, params)
}

/// Orders `(doc_id, score)` pairs by score descending, doc id ascending,
/// and assigns ranks from 1.
pub fn rank_scored(query_id: &str, mut scored: Vec<(String, f64)>, run_tag: &str) -> Vec<RunEntry> {
    scored.sort_by(|a, b| rank_order((a.1, &a.0), (b.1, &b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (doc_id, score))| RunEntry {
            query_id: query_id.to_string(),
            doc_id,
            rank: i + 1,
            score,
            run_tag: run_tag.to_string(),
        })
        .collect()
}

/// Scores every candidate independently and re-orders by relevance
/// probability.
pub fn rerank(
    query: &Query,
    candidates: &CandidateSet,
    docs: &DocumentStore,
    vocab: &Vocabulary,
    params: &ModelParams,
    run_tag: &str,
) -> Result<Vec<RunEntry>> {
    if candidates.is_empty() {
        return Err(Error::Empty(format!("query {} has no candidates", query.query_id)));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for c in &candidates.candidates {
        let doc = docs
            .get(&c.doc_id)
            .ok_or_else(|| Error::Constraint(format!("candidate {} not in the document store", c.doc_id)))?;
        scored.push((c.doc_id.clone(), score_pair(query, doc, vocab, params)?));
    }
    Ok(rank_scored(&query.query_id, scored, run_tag))
}

#[cfg(test)]
mod tests;
