//! Fine-tuning: negative sampling, warmup-linear learning rate, Adam, and the
//! training loop with checkpointing and a per-step metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};

use crate::config::KvConfig;
use crate::data::{CandidateSet, DocumentStore, Qrels, QueryStore};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Session};
use crate::numeric::{checkpoint, gradient_check_with, GradCheckReport, Objective, ParamStore, Stencil, Tensor};
use crate::rng::{Purpose, Rng, SeedStream};
use crate::tokenizer::{encode_pair_with, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub neg_per_pos: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Global gradient-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            learning_rate: 3e-5,
            warmup_steps: 2500,
            total_steps: 150_000,
            neg_per_pos: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            checkpoint_interval: 10_000,
            grad_clip: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "total_steps",
    "neg_per_pos",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "checkpoint_interval",
    "grad_clip",
];

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.neg_per_pos == 0 || self.batch_size == 0 {
            return fail("neg_per_pos and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.checkpoint_interval == 0 {
            return fail("checkpoint_interval must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn with_overrides(&self, kv: &KvConfig) -> Result<Self> {
        kv.check_keys(TRAIN_KEYS)?;
        let mut c = self.clone();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(batch_size);
        take!(learning_rate);
        take!(warmup_steps);
        take!(total_steps);
        take!(neg_per_pos);
        take!(beta1);
        take!(beta2);
        take!(adam_eps);
        take!(seed);
        take!(checkpoint_interval);
        match kv.get_str("grad_clip") {
            None => {}
            Some("none") | Some("") => c.grad_clip = None,
            Some(_) => c.grad_clip = kv.get("grad_clip")?,
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("batch_size", self.batch_size.to_string());
        kv.set("learning_rate", format!("{:?}", self.learning_rate));
        kv.set("warmup_steps", self.warmup_steps.to_string());
        kv.set("total_steps", self.total_steps.to_string());
        kv.set("neg_per_pos", self.neg_per_pos.to_string());
        kv.set("beta1", format!("{:?}", self.beta1));
        kv.set("beta2", format!("{:?}", self.beta2));
        kv.set("adam_eps", format!("{:?}", self.adam_eps));
        kv.set("seed", self.seed.to_string());
        kv.set("checkpoint_interval", self.checkpoint_interval.to_string());
        kv.set(
            "grad_clip",
            self.grad_clip.map_or_else(|| "none".to_string(), |c| format!("{c:?}")),
        );
        kv
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainingConfig::default().with_overrides(&KvConfig::load(path)?)
    }
}

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, config: &TrainingConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::Constraint(format!(
            "step {step} beyond total_steps {}",
            config.total_steps
        )));
    }
    let lr = config.learning_rate;
    if step < config.warmup_steps {
        Ok(lr * (step as f64 / config.warmup_steps as f64))
    } else {
        let remaining = (config.total_steps - step) as f64;
        Ok(lr * (remaining / (config.total_steps - config.warmup_steps) as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub query_id: String,
    pub doc_id: String,
    pub label: u8,
}

/// For every relevant candidate, emits it plus `neg_per_pos` non-relevant
/// candidates of the same query drawn uniformly without replacement (all of
/// them if there are fewer).
pub fn sample_query(set: &CandidateSet, qrels: &Qrels, neg_per_pos: usize, rng: &mut Rng) -> Vec<TrainingExample> {
    let (pos, neg): (Vec<&str>, Vec<&str>) = set
        .doc_ids()
        .partition(|d| qrels.is_relevant(&set.query_id, d));
    let make = |doc: &str, label| TrainingExample {
        query_id: set.query_id.clone(),
        doc_id: doc.to_string(),
        label,
    };
    let mut out = Vec::new();
    for p in pos {
        out.push(make(p, 1));
        let k = neg_per_pos.min(neg.len());
        let mut picked: Vec<usize> = index::sample(rng, neg.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| make(neg[i], 0)));
    }
    out
}

/// Samples every query in id order; queries without a relevant candidate
/// contribute nothing.
pub fn sample_negatives(
    candidates: &BTreeMap<String, CandidateSet>,
    qrels: &Qrels,
    neg_per_pos: usize,
    rng: &mut Rng,
) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for set in candidates.values() {
        let examples = sample_query(set, qrels, neg_per_pos, rng);
        if examples.is_empty() {
            log::debug!("query {} has no relevant candidate; skipped", set.query_id);
        }
        out.extend(examples);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainingConfig> for AdamConfig {
    fn from(c: &TrainingConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for i in 0..params.len() {
        let shape = params.get(i).shape();
        if grads[i].shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape {
            return Err(Error::shape("adam_step", shape, grads[i].shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(i).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Mean cross-entropy over a batch and its gradient. Each example runs on
/// its own tape with its own dropout stream, and gradients are summed in
/// batch order, so the result does not depend on how the batch is split.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[(TokenSequence, usize)],
    training: bool,
    dropout: &SeedStream,
    step: u64,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples".into()));
    }
    let mut total = 0.0;
    let mut grads = params.store().zeros_like();
    for (i, (seq, label)) in batch.iter().enumerate() {
        let mut rng = dropout.derive(Purpose::Dropout, (step << 24) | i as u64);
        let mut session = Session::new(params);
        let loss = session.loss(seq, *label, training, &mut rng)?;
        total += session.tape.scalar_value(loss);
        for (acc, g) in grads.iter_mut().zip(session.gradients(loss)?) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((total * scale, grads))
}

struct BatchObjective<'a> {
    template: &'a ModelParams,
    batch: &'a [(TokenSequence, usize)],
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, p: &ParamStore) -> Result<f64> {
        let params = self.template.with_store(p.clone());
        let mut total = 0.0;
        let mut rng = SeedStream::new(0).derive(Purpose::Dropout, 0);
        for (seq, label) in self.batch {
            let mut s = Session::new(&params);
            let l = s.loss(seq, *label, false, &mut rng)?;
            total += s.tape.scalar_value(l);
        }
        Ok(total / self.batch.len() as f64)
    }

    fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
        let params = self.template.with_store(p.clone());
        batch_loss_and_grad(&params, self.batch, false, &SeedStream::new(0), 0)
    }
}

/// Finite-difference check of the full model's batch loss, dropout off.
pub fn model_gradient_check(
    params: &ModelParams,
    batch: &[(TokenSequence, usize)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    model_gradient_check_with(params, batch, epsilon, tolerance, Stencil::default())
}

pub fn model_gradient_check_with(
    params: &ModelParams,
    batch: &[(TokenSequence, usize)],
    epsilon: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let objective = BatchObjective { template: params, batch };
    gradient_check_with(&objective, params.store(), epsilon, tolerance, stencil)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl StepReport {
    /// `step \t lr \t loss` with fixed 6-decimal reals.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\n", self.step, self.lr, self.loss)
    }
}

/// Parameters plus optimizer state; one call to [`Trainer::step`] is one
/// optimizer update.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: TrainingConfig,
    pub step: usize,
    dropout: SeedStream,
}

const OPTIM_STEP: &str = "optim.step";

impl Trainer {
    pub fn new(params: ModelParams, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(params.store());
        let dropout = SeedStream::new(config.seed);
        Ok(Trainer {
            params,
            adam,
            config,
            step: 0,
            dropout,
        })
    }

    pub fn step(&mut self, batch: &[(TokenSequence, usize)]) -> Result<StepReport> {
        let lr = lr_at(self.step, &self.config)?;
        let (loss, mut grads) = batch_loss_and_grad(&self.params, batch, true, &self.dropout, self.step as u64)?;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|x| *x *= s);
            }
        }
        let adam_cfg = AdamConfig::from(&self.config);
        adam_step(self.params.store_mut(), &grads, &mut self.adam, lr, &adam_cfg)?;
        let report = StepReport { step: self.step, lr, loss };
        self.step += 1;
        Ok(report)
    }

    /// Parameters, Adam moments and the step counter in one checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let store = self.params.store();
        let step = Tensor::scalar(self.step as f64);
        let m_names: Vec<String> = store.names().iter().map(|n| format!("optim.m.{n}")).collect();
        let v_names: Vec<String> = store.names().iter().map(|n| format!("optim.v.{n}")).collect();
        let records = store
            .iter()
            .chain(std::iter::once((OPTIM_STEP, &step)))
            .chain(m_names.iter().map(String::as_str).zip(&self.adam.m))
            .chain(v_names.iter().map(String::as_str).zip(&self.adam.v));
        checkpoint::save(path, records)
    }

    pub fn load(model: &ModelConfig, config: TrainingConfig, path: impl AsRef<Path>) -> Result<Self> {
        let records = checkpoint::load(path)?;
        let params = ModelParams::from_records(model, &records)?;
        let mut trainer = Trainer::new(params, config)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record `{name}`")))
        };
        trainer.step = find(OPTIM_STEP)?.data()[0] as usize;
        trainer.adam.t = trainer.step as u64;
        let names: Vec<String> = trainer.params.store().names().to_vec();
        for (i, n) in names.iter().enumerate() {
            let m = find(&format!("optim.m.{n}"))?;
            let v = find(&format!("optim.v.{n}"))?;
            if m.shape() != trainer.adam.m[i].shape() || v.shape() != trainer.adam.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer state for `{n}` has the wrong shape")));
            }
            trainer.adam.m[i] = m.clone();
            trainer.adam.v[i] = v.clone();
        }
        Ok(trainer)
    }
}

/// Endless stream of sampled examples: each epoch resamples negatives and
/// reshuffles with streams derived from the epoch number.
struct ExampleStream<'a> {
    candidates: &'a BTreeMap<String, CandidateSet>,
    qrels: &'a Qrels,
    neg_per_pos: usize,
    seeds: SeedStream,
    epoch: u64,
    pos: usize,
    current: Vec<TrainingExample>,
}

impl<'a> ExampleStream<'a> {
    fn new(
        candidates: &'a BTreeMap<String, CandidateSet>,
        qrels: &'a Qrels,
        neg_per_pos: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut s = ExampleStream {
            candidates,
            qrels,
            neg_per_pos,
            seeds: SeedStream::new(seed),
            epoch: 0,
            pos: 0,
            current: Vec::new(),
        };
        s.refill();
        if s.current.is_empty() {
            return Err(Error::Empty("no training examples: no query has a relevant candidate".into()));
        }
        Ok(s)
    }

    fn refill(&mut self) {
        let mut rng = self.seeds.derive(Purpose::Sampling, self.epoch);
        self.current = sample_negatives(self.candidates, self.qrels, self.neg_per_pos, &mut rng);
        let mut rng = self.seeds.derive(Purpose::Shuffle, self.epoch);
        self.current.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> &TrainingExample {
        if self.pos == self.current.len() {
            self.epoch += 1;
            self.refill();
        }
        self.pos += 1;
        &self.current[self.pos - 1]
    }
}

pub struct TrainInputs<'a> {
    pub docs: &'a DocumentStore,
    pub queries: &'a QueryStore,
    pub qrels: &'a Qrels,
    pub candidates: &'a BTreeMap<String, CandidateSet>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub reports: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.reports.last().map(|r| r.loss)
    }
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const TRAIN_CONFIG_FILE: &str = "train.cfg";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Loads a checkpoint written by [`train`] together with the model config
/// and vocabulary stored next to it.
pub fn load_trained(checkpoint: impl AsRef<Path>) -> Result<(Vocabulary, ModelParams)> {
    let checkpoint = checkpoint.as_ref();
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config = ModelConfig::load(dir.join(MODEL_CONFIG_FILE))?;
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens but the model embeds {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let params = ModelParams::load(&config, checkpoint)?;
    Ok((vocab, params))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Builds the vocabulary, initializes the model from `training.seed`, and
/// runs `total_steps` updates over sampled examples. With `out_dir`, writes
/// the vocabulary, both configs, the metrics log, periodic checkpoints and
/// the final `model.ckpt`.
pub fn train(
    inputs: &TrainInputs<'_>,
    model: &ModelConfig,
    training: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model.validate()?;
    training.validate()?;
    let vocab = Vocabulary::build(inputs.docs, inputs.queries, model.document_text, model.vocab_size)?;
    let mut stream = ExampleStream::new(inputs.candidates, inputs.qrels, training.neg_per_pos, training.seed)?;

    let mut init_rng = SeedStream::new(training.seed).derive(Purpose::Init, 0);
    let params = ModelParams::init(model, &mut init_rng)?;
    let mut trainer = Trainer::new(params, training.clone())?;
    let opts = model.encode_options();

    let mut metrics = String::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(dir.join(VOCAB_FILE))?;
        model.save(dir.join(MODEL_CONFIG_FILE))?;
        write(&dir.join(TRAIN_CONFIG_FILE), training.to_kv().render())?;
    }

    let mut reports = Vec::with_capacity(training.total_steps);
    for _ in 0..training.total_steps {
        let mut batch = Vec::with_capacity(training.batch_size);
        for _ in 0..training.batch_size {
            let ex = stream.next();
            let query = inputs
                .queries
                .get(&ex.query_id)
                .ok_or_else(|| Error::Constraint(format!("candidate query {} not in query store", ex.query_id)))?;
            let doc = inputs
                .docs
                .get(&ex.doc_id)
                .ok_or_else(|| Error::Constraint(format!("candidate document {} not in document store", ex.doc_id)))?;
            batch.push((encode_pair_with(query, doc, &vocab, &opts)?, usize::from(ex.label)));
        }
        let report = trainer.step(&batch)?;
        if report.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.6}", report.step, report.lr, report.loss);
        }
        metrics.push_str(&report.log_line());
        reports.push(report);
        if let Some(dir) = out_dir {
            if trainer.step % training.checkpoint_interval == 0 && trainer.step < training.total_steps {
                let path = dir.join(format!("checkpoint-{:06}.ckpt", trainer.step));
                trainer.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        write(&dir.join(METRICS_FILE), &metrics)?;
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        params: trainer.params,
        vocab,
        reports,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Candidate;
    use proptest::prelude::*;

    fn set(n: usize) -> CandidateSet {
        CandidateSet {
            query_id: "q".into(),
            candidates: (0..n)
                .map(|i| Candidate {
                    doc_id: format!("d{i:03}"),
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    fn qrels(relevant: &[usize]) -> Qrels {
        let mut q = Qrels::new();
        for &r in relevant {
            q.insert("q", &format!("d{r:03}"), 1);
        }
        q.insert("q", "d099", 0);
        q
    }

    fn rng(i: u64) -> crate::rng::Rng {
        SeedStream::new(3).derive(Purpose::Test, i)
    }

    #[test]
    fn one_positive_in_hundred_gives_eleven() {
        let ex = sample_query(&set(100), &qrels(&[17]), 10, &mut rng(0));
        assert_eq!(ex.len(), 11);
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 1);
        assert_eq!(ex[0].doc_id, "d017");
        let mut negs: Vec<_> = ex[1..].iter().map(|e| e.doc_id.clone()).collect();
        negs.dedup();
        assert_eq!(negs.len(), 10);
        assert!(ex[1..].iter().all(|e| e.label == 0 && e.doc_id != "d017"));
    }

    #[test]
    fn exhausted_negatives_emit_all() {
        let ex = sample_query(&set(5), &qrels(&[2]), 10, &mut rng(0));
        assert_eq!(ex.len(), 5);
    }

    #[test]
    fn no_positive_emits_nothing() {
        assert!(sample_query(&set(5), &qrels(&[]), 10, &mut rng(0)).is_empty());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_query(&set(100), &qrels(&[1, 50]), 10, &mut rng(4));
        let b = sample_query(&set(100), &qrels(&[1, 50]), 10, &mut rng(4));
        assert_eq!(a, b);
        let c = sample_query(&set(100), &qrels(&[1, 50]), 10, &mut rng(5));
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn realized_ratio_is_bounded(n in 1usize..60, rel in proptest::collection::btree_set(0usize..60, 0..5), k in 1usize..12) {
            let rel: Vec<usize> = rel.into_iter().filter(|&r| r < n).collect();
            let ex = sample_query(&set(n), &qrels(&rel), k, &mut rng(9));
            let pos = ex.iter().filter(|e| e.label == 1).count();
            let neg = ex.len() - pos;
            prop_assert_eq!(pos, rel.len());
            prop_assert!(neg <= k * pos);
            if n - rel.len() >= k {
                prop_assert_eq!(neg, k * pos);
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainingConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(2500, &c).unwrap(), 3e-5);
        assert_eq!(lr_at(150_000, &c).unwrap(), 0.0);
        assert!((lr_at(1250, &c).unwrap() - 1.5e-5).abs() < 1e-18);
        assert!(lr_at(150_001, &c).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let c = TrainingConfig::default();
        let left = lr_at(2499, &c).unwrap() + c.learning_rate / 2500.0;
        let right = lr_at(2501, &c).unwrap() + c.learning_rate / (150_000.0 - 2500.0);
        assert!((left - 3e-5).abs() < 1e-15);
        assert!((right - 3e-5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![1.0, -2.0]));
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut state, 0.1, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn scalar_adam_matches_hand_computation() {
        // state after some history: m = 0.2, v = 0.05, t = 2; gradient 0.5
        let mut p = ParamStore::new();
        p.push("w", Tensor::scalar(1.0));
        let mut state = AdamState {
            m: vec![Tensor::scalar(0.2)],
            v: vec![Tensor::scalar(0.05)],
            t: 2,
        };
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut p, &[Tensor::scalar(0.5)], &mut state, 0.01, &cfg).unwrap();
        // m3 = 0.9·0.2 + 0.1·0.5 = 0.23; v3 = 0.999·0.05 + 0.001·0.25 = 0.0502
        // m̂ = 0.23 / (1 − 0.9³) = 0.848708487084871
        // v̂ = 0.0502 / (1 − 0.999³) = 16.7500083361
        // w = 1 − 0.01 · m̂ / (√v̂ + 1e-8)
        let m_hat = 0.23 / 0.271;
        let v_hat: f64 = 0.0502 / 0.002_997_001;
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((state.m[0].data()[0] - 0.23).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.0502).abs() < 1e-15);
        assert!((p.get(0).data()[0] - expected).abs() < 1e-12);
        assert!((p.get(0).data()[0] - 0.997_926_282).abs() < 1e-8);
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let run = || {
            let mut p = ParamStore::new();
            p.push("w", Tensor::vector(vec![0.3, 0.1, -0.2]));
            let mut s = AdamState::new(&p);
            let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
            for i in 0..20 {
                let g = Tensor::vector(vec![i as f64 * 0.1, -0.5, 0.25]);
                adam_step(&mut p, &[g], &mut s, 1e-2, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut p = ParamStore::new();
        p.push("w", Tensor::zeros(&[3]));
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, &cfg).is_err());
    }

    #[test]
    fn config_validation_and_roundtrip() {
        let bad = TrainingConfig {
            warmup_steps: 10,
            total_steps: 10,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
        let c = TrainingConfig {
            grad_clip: Some(1.5),
            ..TrainingConfig::default()
        };
        assert_eq!(TrainingConfig::default().with_overrides(&c.to_kv()).unwrap(), c);
        let mut kv = KvConfig::new();
        kv.set("neg_per_pos", "0");
        assert!(TrainingConfig::default().with_overrides(&kv).is_err());
    }

    fn toy_batch(config: &ModelConfig, seed: u64) -> Vec<(TokenSequence, usize)> {
        let mut r = rng(seed);
        (0..4)
            .map(|i| {
                let ids = Tensor::uniform(&[10], 4.0, config.vocab_size as f64, &mut r);
                let ids: Vec<u32> = ids.data().iter().map(|&x| x as u32).collect();
                let seq = crate::tokenizer::pack_ids(&ids[..3], &ids[3..], config.max_len, config.global_attention).unwrap();
                (seq, i % 2)
            })
            .collect()
    }

    #[test]
    fn resumed_trainer_repeats_the_same_steps() {
        let model = ModelConfig {
            dropout_rate: 0.1,
            ..ModelConfig::tiny(20)
        };
        let cfg = TrainingConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_steps: 2,
            total_steps: 10,
            ..TrainingConfig::default()
        };
        let params = ModelParams::init(&model, &mut rng(1)).unwrap();
        let mut a = Trainer::new(params, cfg.clone()).unwrap();
        for s in 0..3 {
            a.step(&toy_batch(&model, s)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        a.save(&path).unwrap();
        let mut b = Trainer::load(&model, cfg, &path).unwrap();
        assert_eq!(b.step, 3);
        assert_eq!(b.adam, a.adam);
        for s in 3..6 {
            let ra = a.step(&toy_batch(&model, s)).unwrap();
            let rb = b.step(&toy_batch(&model, s)).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.params.store(), b.params.store());
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let model = ModelConfig::tiny(20);
        let params = ModelParams::init(&model, &mut rng(2)).unwrap();
        let batch = toy_batch(&model, 0);
        let stream = SeedStream::new(0);
        let (loss, grads) = batch_loss_and_grad(&params, &batch, false, &stream, 0).unwrap();
        let mut loss_sum = 0.0;
        let mut first = params.store().zeros_like();
        for ex in &batch {
            let (l, g) = batch_loss_and_grad(&params, std::slice::from_ref(ex), false, &stream, 0).unwrap();
            loss_sum += l;
            for (a, b) in first.iter_mut().zip(&g) {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y / 4.0);
            }
        }
        assert!((loss - loss_sum / 4.0).abs() < 1e-12);
        for (g, h) in grads.iter().zip(&first) {
            assert!(g.max_abs_diff(h) < 1e-12);
        }
    }
}
