//! The knowledge-grounded generator.
//!
//! History and response are read by a shared bi-directional GRU whose final
//! states are projected to `hidden_dim`. Each triplet is linearized to
//! "head relation tail", read by a unidirectional GRU and projected, giving
//! one row `k_i` of the knowledge matrix. Two selection distributions sit on
//! top:
//!
//! * prior `p(k | x) = softmax(K x)`
//! * posterior `p(k | x, y) = softmax(K MLP([x; y]))`
//!
//! The fused knowledge vector is the posterior-weighted sum of rows during
//! training and the prior-weighted sum at inference. An attentive GRU decoder
//! consumes `[embed(prev); context; fused]` at every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::DialogueSample;
use crate::layers::{gru_encode, AttentionLayer, EmbeddingLayer, Encoded, GruCell, Linear, Mlp};
use crate::params::{Grads, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

/// Floor applied before taking the log of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub kl_weight: f64,
    pub nll_weight: f64,
    pub bow_weight: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
            kl_weight: 1.0,
            nll_weight: 1.0,
            bow_weight: 1.0,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig::new(vocab_size, 32, 32)
    }

    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig::new(vocab_size, 300, 300)
    }
}

/// Per-term losses of one sample (or a mean over several).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub kl: f64,
    pub nll: f64,
    pub bow: f64,
    pub total: f64,
}

/// Values produced by one teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    pub token_logits: Vec<Vec<f64>>,
    pub losses: Losses,
}

impl ModelOutput {
    /// Index of the most probable prior triplet; the first index wins ties.
    pub fn selected(&self) -> usize {
        argmax(&self.prior)
    }
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub selected_triplet: usize,
    pub prior: Vec<f64>,
}

/// Handles for the parts of one forward pass that the losses need.
pub struct ForwardVars {
    pub prior: Var,
    pub posterior: Var,
    pub logits: Vec<Var>,
    pub kl: Var,
    pub nll: Var,
    pub bow: Var,
    pub total: Var,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(K x)` over the triplet rows of `k_matrix`.
pub fn prior_distribution(tape: &mut Tape, k_matrix: Var, x_summary: Var) -> Result<Var> {
    let scores = tape.matmul(k_matrix, x_summary)?;
    tape.softmax(scores)
}

/// `sum_i post_i * (log post_i - log prior_i)`, with both logs floored.
pub fn kl_div_loss(tape: &mut Tape, posterior: Var, prior: Var) -> Result<Var> {
    if tape.shape(posterior) != tape.shape(prior) {
        return Err(Error::contract(format!(
            "kl between distributions of shapes {:?} and {:?}",
            tape.shape(posterior),
            tape.shape(prior)
        )));
    }
    let lp = tape.log_floor(posterior, PROB_FLOOR)?;
    let lq = tape.log_floor(prior, PROB_FLOOR)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(posterior, diff)?;
    tape.sum(terms)
}

/// Summed cross entropy of `targets` under per-step logits.
pub fn nll_loss(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::contract(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (&l, &y) in logits.iter().zip(targets) {
        let size = tape.value(l).len();
        if y >= size {
            return Err(Error::Vocab { index: y, size });
        }
        let lp = tape.log_softmax(l)?;
        terms.push(tape.pick(lp, y)?);
    }
    let sum = tape.add_all(&terms)?;
    tape.affine(sum, -1.0, 0.0)
}

/// `kl + nll + bow`; every input must be finite.
pub fn total_loss(kl: f64, nll: f64, bow: f64) -> Result<f64> {
    let total = kl + nll + bow;
    if !total.is_finite() || !kl.is_finite() || !nll.is_finite() || !bow.is_finite() {
        return Err(Error::Numeric { op: "total_loss" });
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct KnowledgeModel {
    cfg: ModelConfig,
    pub embedding: EmbeddingLayer,
    pub enc_fwd: GruCell,
    pub enc_bwd: GruCell,
    pub enc_proj: Linear,
    pub know_gru: GruCell,
    pub know_proj: Linear,
    pub posterior_mlp: Mlp,
    pub attention: AttentionLayer,
    pub decoder: GruCell,
    pub output: Linear,
    pub bow_mlp: Mlp,
}

impl KnowledgeModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        KnowledgeModel {
            embedding: EmbeddingLayer::new("model.emb", v, e),
            enc_fwd: GruCell::new("model.enc.fwd", e, h),
            enc_bwd: GruCell::new("model.enc.bwd", e, h),
            enc_proj: Linear::new("model.enc.proj", 2 * h, h),
            know_gru: GruCell::new("model.know.gru", e, h),
            know_proj: Linear::new("model.know.proj", h, h),
            posterior_mlp: Mlp::new("model.post", vec![2 * h, h, h]),
            attention: AttentionLayer::new("model.att", h, 2 * h, h),
            decoder: GruCell::new("model.dec", e + 2 * h + h, h),
            output: Linear::new("model.out", h + 2 * h + h, v),
            bow_mlp: Mlp::new("model.bow", vec![h, h, v]),
            cfg,
        }
    }

    /// Rebuilds the architecture from parameter shapes; loss weights default
    /// to 1.
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let emb = store
            .get("model.emb")
            .ok_or_else(|| Error::Checkpoint("missing `model.emb`".into()))?;
        let proj = store
            .get("model.enc.proj.W")
            .ok_or_else(|| Error::Checkpoint("missing `model.enc.proj.W`".into()))?;
        let (v, e, h) = (emb.shape()[0], emb.shape()[1], proj.shape()[0]);
        let model = KnowledgeModel::new(ModelConfig::new(v, e, h));
        let reference = model.init_params(0)?;
        if !reference.same_layout(store) {
            return Err(Error::Checkpoint("parameter layout does not match the model".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn with_loss_weights(mut self, kl: f64, nll: f64, bow: f64) -> Self {
        self.cfg.kl_weight = kl;
        self.cfg.nll_weight = nll;
        self.cfg.bow_weight = bow;
        self
    }

    /// Fresh seeded parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        self.embedding.init(&mut store, &mut rng)?;
        self.enc_fwd.init(&mut store, &mut rng)?;
        self.enc_bwd.init(&mut store, &mut rng)?;
        self.enc_proj.init(&mut store, &mut rng)?;
        self.know_gru.init(&mut store, &mut rng)?;
        self.know_proj.init(&mut store, &mut rng)?;
        self.posterior_mlp.init(&mut store, &mut rng)?;
        self.attention.init(&mut store, &mut rng)?;
        self.decoder.init(&mut store, &mut rng)?;
        self.output.init(&mut store, &mut rng)?;
        self.bow_mlp.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Bi-GRU states plus the projected `hidden_dim` summary.
    pub fn encode_utterance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<(Encoded, Var)> {
        let enc = gru_encode(
            tape,
            store,
            tokens,
            &self.embedding,
            &self.enc_fwd,
            Some(&self.enc_bwd),
        )?;
        let summary = self.enc_proj.forward(tape, store, enc.summary)?;
        Ok((enc, summary))
    }

    /// One row per triplet: the projected final GRU state over its tokens.
    pub fn encode_knowledge(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        triplets: &[Vec<usize>],
    ) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::contract("cannot encode an empty knowledge graph"));
        }
        let rows = triplets
            .iter()
            .map(|t| {
                let enc = gru_encode(tape, store, t, &self.embedding, &self.know_gru, None)?;
                self.know_proj.forward(tape, store, enc.summary)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.stack(&rows)
    }

    pub fn posterior_distribution(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k_matrix: Var,
        x_summary: Var,
        y_summary: Var,
    ) -> Result<Var> {
        let xy = tape.concat(&[x_summary, y_summary])?;
        let q = self.posterior_mlp.forward(tape, store, xy)?;
        let scores = tape.matmul(k_matrix, q)?;
        tape.softmax(scores)
    }

    /// Teacher-forced decoding of `targets`, starting from BOS with the
    /// decoder state initialized to the history summary. Returns one logit
    /// vector per target position.
    pub fn decode_with_knowledge(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history_states: &[Var],
        init_state: Var,
        fused_knowledge: Var,
        targets: &[usize],
    ) -> Result<Vec<Var>> {
        if targets.is_empty() {
            return Err(Error::contract("cannot decode an empty response"));
        }
        let keys = self.attention.prepare(tape, store, history_states)?;
        let mut h = init_state;
        let mut prev = BOS;
        let mut logits = Vec::with_capacity(targets.len());
        for &y in targets {
            let (step_logits, next) = self.decode_step(tape, store, &keys, h, prev, fused_knowledge)?;
            logits.push(step_logits);
            h = next;
            prev = y;
        }
        Ok(logits)
    }

    fn decode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        keys: &crate::layers::PreparedKeys,
        h: Var,
        prev: usize,
        fused: Var,
    ) -> Result<(Var, Var)> {
        let e = self.embedding.lookup(tape, store, prev)?;
        let (ctx, _) = self.attention.attend_prepared(tape, store, h, keys)?;
        let input = tape.concat(&[e, ctx, fused])?;
        let next = self.decoder.step(tape, store, input, h)?;
        let features = tape.concat(&[next, ctx, fused])?;
        let logits = self.output.forward(tape, store, features)?;
        Ok((logits, next))
    }

    /// Position-independent bag-of-words loss of `response` given the fused
    /// knowledge vector.
    pub fn bow_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused_knowledge: Var,
        response: &[usize],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::contract("bag-of-words loss over an empty response"));
        }
        let scores = self.bow_mlp.forward(tape, store, fused_knowledge)?;
        let lp = tape.log_softmax(scores)?;
        let size = tape.value(lp).len();
        let mut terms = Vec::with_capacity(response.len());
        for &y in response {
            if y >= size {
                return Err(Error::Vocab { index: y, size });
            }
            terms.push(tape.pick(lp, y)?);
        }
        let sum = tape.add_all(&terms)?;
        tape.affine(sum, -1.0, 0.0)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            Some(&t) => Err(Error::Vocab {
                index: t,
                size: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Full teacher-forced pass with posterior-fused knowledge.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &DialogueSample,
    ) -> Result<ForwardVars> {
        self.check_tokens(&sample.history)?;
        self.check_tokens(&sample.response)?;
        let (x_enc, x) = self.encode_utterance(tape, store, &sample.history)?;
        let (_, y) = self.encode_utterance(tape, store, &sample.response)?;
        let k = self.encode_knowledge(tape, store, &sample.knowledge)?;
        let prior = prior_distribution(tape, k, x)?;
        let posterior = self.posterior_distribution(tape, store, k, x, y)?;
        let kl = kl_div_loss(tape, posterior, prior)?;
        let fused = tape.matmul(posterior, k)?;
        let mut targets = sample.response.clone();
        targets.push(EOS);
        let logits = self.decode_with_knowledge(tape, store, &x_enc.states, x, fused, &targets)?;
        let nll = nll_loss(tape, &logits, &targets)?;
        let bow = self.bow_loss(tape, store, fused, &sample.response)?;
        let wk = tape.affine(kl, self.cfg.kl_weight, 0.0)?;
        let wn = tape.affine(nll, self.cfg.nll_weight, 0.0)?;
        let wb = tape.affine(bow, self.cfg.bow_weight, 0.0)?;
        let total = tape.add_all(&[wk, wn, wb])?;
        Ok(ForwardVars {
            prior,
            posterior,
            logits,
            kl,
            nll,
            bow,
            total,
        })
    }

    fn losses_of(tape: &Tape, f: &ForwardVars) -> Result<Losses> {
        Ok(Losses {
            kl: tape.value(f.kl).item()?,
            nll: tape.value(f.nll).item()?,
            bow: tape.value(f.bow).item()?,
            total: tape.value(f.total).item()?,
        })
    }

    /// Forward values without gradient bookkeeping.
    pub fn run(&self, store: &ParamStore, sample: &DialogueSample) -> Result<ModelOutput> {
        let mut tape = Tape::inference();
        let f = self.forward(&mut tape, store, sample)?;
        Ok(ModelOutput {
            prior: tape.value(f.prior).values().to_vec(),
            posterior: tape.value(f.posterior).values().to_vec(),
            token_logits: f.logits.iter().map(|&l| tape.value(l).values().to_vec()).collect(),
            losses: Self::losses_of(&tape, &f)?,
        })
    }

    /// Losses and the gradient of the weighted total.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        sample: &DialogueSample,
    ) -> Result<(ModelOutput, Grads)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, sample)?;
        let grads = tape.backward(f.total, store)?;
        let out = ModelOutput {
            prior: tape.value(f.prior).values().to_vec(),
            posterior: tape.value(f.posterior).values().to_vec(),
            token_logits: Vec::new(),
            losses: Self::losses_of(&tape, &f)?,
        };
        Ok((out, grads))
    }

    /// Teacher-forced NLL of `response + EOS` with prior-fused knowledge, and
    /// the number of scored tokens.
    pub fn prior_nll(&self, store: &ParamStore, sample: &DialogueSample) -> Result<(f64, usize)> {
        self.check_tokens(&sample.history)?;
        self.check_tokens(&sample.response)?;
        let mut tape = Tape::inference();
        let (x_enc, x) = self.encode_utterance(&mut tape, store, &sample.history)?;
        let k = self.encode_knowledge(&mut tape, store, &sample.knowledge)?;
        let prior = prior_distribution(&mut tape, k, x)?;
        let fused = tape.matmul(prior, k)?;
        let mut targets = sample.response.clone();
        targets.push(EOS);
        let logits = self.decode_with_knowledge(&mut tape, store, &x_enc.states, x, fused, &targets)?;
        let nll = nll_loss(&mut tape, &logits, &targets)?;
        Ok((tape.value(nll).item()?, targets.len()))
    }

    /// Greedy decoding from BOS with prior-fused knowledge. Stops at EOS or
    /// after `max_len` tokens; EOS is not included in the output.
    pub fn generate(
        &self,
        store: &ParamStore,
        history: &[usize],
        knowledge: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Generation> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        self.check_tokens(history)?;
        let mut tape = Tape::inference();
        let (x_enc, x) = self.encode_utterance(&mut tape, store, history)?;
        let k = self.encode_knowledge(&mut tape, store, knowledge)?;
        let prior = prior_distribution(&mut tape, k, x)?;
        let fused = tape.matmul(prior, k)?;
        let keys = self.attention.prepare(&mut tape, store, &x_enc.states)?;
        let mut h = x;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let (logits, next) = self.decode_step(&mut tape, store, &keys, h, prev, fused)?;
            let tok = argmax(tape.value(logits).values());
            if tok == EOS {
                break;
            }
            tokens.push(tok);
            h = next;
            prev = tok;
        }
        let prior = tape.value(prior).values().to_vec();
        Ok(Generation {
            selected_triplet: argmax(&prior),
            tokens,
            prior,
        })
    }

    /// Sets every parameter to zero; rigged test models start from here.
    pub fn zero_params(store: &mut ParamStore) {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            if let Some(t) = store.get_mut(&n) {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Convenience for tests and examples: a dense tensor from nested rows.
pub fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::matrix(rows.len(), cols, rows.concat())
}
