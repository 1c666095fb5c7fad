//! Embedding, GRU, additive attention and MLP building blocks.
//!
//! Layers are descriptions (parameter names plus dimensions); values live in
//! a [`ParamStore`] and are bound to a [`Tape`] on every forward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound for recurrent weight initialization.
pub const RECURRENT_INIT: f64 = 0.08;
/// Bound of the uniform embedding initialization.
pub const EMBED_INIT: f64 = 0.1;

fn expect_dim(tape: &Tape, v: Var, dim: usize, op: &'static str) -> Result<()> {
    let shape = tape.shape(v);
    if shape != [dim] {
        return Err(Error::Dimension {
            op,
            lhs: vec![dim],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// `W x + b` with parameters `{prefix}.W` and `{prefix}.b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.W", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_xavier(&self.weight_name(), &[self.out_dim, self.in_dim], rng)?;
        store.init_zeros(&self.bias_name(), &[self.out_dim])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        expect_dim(tape, x, self.in_dim, "linear")?;
        let w = tape.param_from(store, &self.weight_name())?;
        let b = tape.param_from(store, &self.bias_name())?;
        let wx = tape.matmul(w, x)?;
        tape.add(wx, b)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub name: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl EmbeddingLayer {
    pub fn new(name: impl Into<String>, vocab_size: usize, embed_dim: usize) -> Self {
        EmbeddingLayer {
            name: name.into(),
            vocab_size,
            embed_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_uniform(&self.name, &[self.vocab_size, self.embed_dim], EMBED_INIT, rng)
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, index: usize) -> Result<Var> {
        if index >= self.vocab_size {
            return Err(Error::Vocab {
                index,
                size: self.vocab_size,
            });
        }
        let table = tape.param_from(store, &self.name)?;
        tape.gather(table, index)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            prefix: prefix.into(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn param_name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        for gate in ["z", "r", "h"] {
            store.init_uniform(&self.param_name(&format!("W_{gate}")), &[h, i], RECURRENT_INIT, rng)?;
            store.init_uniform(&self.param_name(&format!("U_{gate}")), &[h, h], RECURRENT_INIT, rng)?;
            store.init_zeros(&self.param_name(&format!("b_{gate}")), &[h])?;
        }
        Ok(())
    }

    fn gate_pre(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gate: &str,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let w = tape.param_from(store, &self.param_name(&format!("W_{gate}")))?;
        let u = tape.param_from(store, &self.param_name(&format!("U_{gate}")))?;
        let b = tape.param_from(store, &self.param_name(&format!("b_{gate}")))?;
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        expect_dim(tape, x, self.input_dim, "gru_input")?;
        expect_dim(tape, h, self.hidden_dim, "gru_hidden")?;
        let z = self.gate_pre(tape, store, "z", x, h)?;
        let z = tape.sigmoid(z)?;
        let r = self.gate_pre(tape, store, "r", x, h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = self.gate_pre(tape, store, "h", x, rh)?;
        let cand = tape.tanh(cand)?;
        let delta = tape.sub(cand, h)?;
        let zd = tape.mul(z, delta)?;
        tape.add(h, zd)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.hidden_dim]))
    }
}

/// Output of [`gru_encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// One state per input position (`2 * hidden` wide when bidirectional).
    pub states: Vec<Var>,
    /// Final forward state, concatenated with the final backward state when
    /// bidirectional.
    pub summary: Var,
}

/// Runs a (bi-directional) GRU over embedded tokens.
pub fn gru_encode(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    embedding: &EmbeddingLayer,
    fwd: &GruCell,
    bwd: Option<&GruCell>,
) -> Result<Encoded> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot encode an empty sequence"));
    }
    let inputs = tokens
        .iter()
        .map(|&t| embedding.lookup(tape, store, t))
        .collect::<Result<Vec<_>>>()?;
    let mut h = fwd.zero_state(tape);
    let mut fwd_states = Vec::with_capacity(inputs.len());
    for &x in &inputs {
        h = fwd.step(tape, store, x, h)?;
        fwd_states.push(h);
    }
    let Some(bwd) = bwd else {
        return Ok(Encoded {
            summary: h,
            states: fwd_states,
        });
    };
    let mut hb = bwd.zero_state(tape);
    let mut bwd_states = vec![hb; inputs.len()];
    for (i, &x) in inputs.iter().enumerate().rev() {
        hb = bwd.step(tape, store, x, hb)?;
        bwd_states[i] = hb;
    }
    let states = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let summary = tape.concat(&[h, hb])?;
    Ok(Encoded { states, summary })
}

/// Additive attention: `score_i = v . tanh(W_q q + W_k k_i + b)`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub prefix: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub attn_dim: usize,
}

/// Keys with their projections precomputed, reusable across decoder steps.
#[derive(Clone, Debug)]
pub struct PreparedKeys {
    key_matrix: Var,
    projected: Vec<Var>,
}

impl PreparedKeys {
    pub fn len(&self) -> usize {
        self.projected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projected.is_empty()
    }
}

impl AttentionLayer {
    pub fn new(prefix: impl Into<String>, query_dim: usize, key_dim: usize, attn_dim: usize) -> Self {
        AttentionLayer {
            prefix: prefix.into(),
            query_dim,
            key_dim,
            attn_dim,
        }
    }

    pub fn param_name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_xavier(&self.param_name("W_q"), &[self.attn_dim, self.query_dim], rng)?;
        store.init_xavier(&self.param_name("W_k"), &[self.attn_dim, self.key_dim], rng)?;
        store.init_zeros(&self.param_name("b"), &[self.attn_dim])?;
        let bound = (6.0 / (self.attn_dim + 1) as f64).sqrt();
        store.init_uniform(&self.param_name("v"), &[self.attn_dim], bound, rng)?;
        Ok(())
    }

    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, keys: &[Var]) -> Result<PreparedKeys> {
        if keys.is_empty() {
            return Err(Error::contract("attention over zero keys"));
        }
        for &k in keys {
            expect_dim(tape, k, self.key_dim, "attention_key")?;
        }
        let wk = tape.param_from(store, &self.param_name("W_k"))?;
        let projected = keys
            .iter()
            .map(|&k| tape.matmul(wk, k))
            .collect::<Result<Vec<_>>>()?;
        let key_matrix = tape.stack(keys)?;
        Ok(PreparedKeys {
            key_matrix,
            projected,
        })
    }

    /// Returns `(context, weights)`.
    pub fn attend_prepared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        keys: &PreparedKeys,
    ) -> Result<(Var, Var)> {
        expect_dim(tape, query, self.query_dim, "attention_query")?;
        let wq = tape.param_from(store, &self.param_name("W_q"))?;
        let b = tape.param_from(store, &self.param_name("b"))?;
        let v = tape.param_from(store, &self.param_name("v"))?;
        let qp = tape.matmul(wq, query)?;
        let qp = tape.add(qp, b)?;
        let mut hidden = Vec::with_capacity(keys.len());
        for &kp in &keys.projected {
            let s = tape.add(qp, kp)?;
            hidden.push(tape.tanh(s)?);
        }
        let hidden = tape.stack(&hidden)?;
        let scores = tape.matmul(hidden, v)?;
        let weights = tape.softmax(scores)?;
        let context = tape.matmul(weights, keys.key_matrix)?;
        Ok((context, weights))
    }

    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        keys: &[Var],
    ) -> Result<(Var, Var)> {
        let prepared = self.prepare(tape, store, keys)?;
        self.attend_prepared(tape, store, query, &prepared)
    }
}

/// Feed-forward network: affine + tanh per hidden layer, affine output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dimensions");
        Mlp {
            prefix: prefix.into(),
            dims,
        }
    }

    pub fn layers(&self) -> Vec<Linear> {
        self.dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{}.{i}", self.prefix), w[0], w[1]))
            .collect()
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers().iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut x = input;
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut store = ParamStore::new(0);
        let emb = EmbeddingLayer::new("emb", 5, 3);
        emb.init(&mut store, &mut rng(0)).unwrap();
        let mut t = Tape::new();
        let row = emb.lookup(&mut t, &store, 2).unwrap();
        assert_eq!(t.value(row).values(), store.get("emb").unwrap().row(2));
        assert!(matches!(
            emb.lookup(&mut t, &store, 5),
            Err(Error::Vocab { index: 5, size: 5 })
        ));
    }

    #[test]
    fn gru_step_matches_hand_gates() {
        let cell = GruCell::new("g", 2, 2);
        let mut store = ParamStore::new(0);
        let set = |store: &mut ParamStore, n: &str, shape: &[usize], v: Vec<f64>| {
            store.insert(cell.param_name(n), Tensor::new(shape.to_vec(), v).unwrap()).unwrap();
        };
        set(&mut store, "W_z", &[2, 2], vec![0.5, -0.2, 0.1, 0.3]);
        set(&mut store, "U_z", &[2, 2], vec![0.2, 0.0, -0.1, 0.4]);
        set(&mut store, "b_z", &[2], vec![0.1, -0.1]);
        set(&mut store, "W_r", &[2, 2], vec![-0.3, 0.2, 0.6, 0.1]);
        set(&mut store, "U_r", &[2, 2], vec![0.1, 0.1, 0.0, -0.2]);
        set(&mut store, "b_r", &[2], vec![0.0, 0.2]);
        set(&mut store, "W_h", &[2, 2], vec![0.7, -0.4, 0.2, 0.5]);
        set(&mut store, "U_h", &[2, 2], vec![-0.5, 0.3, 0.4, 0.1]);
        set(&mut store, "b_h", &[2], vec![0.05, 0.0]);
        let x = [1.0, -0.5];
        let h = [0.2, 0.4];
        let mv = |m: [f64; 4], v: [f64; 2]| [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]];
        let wzx = mv([0.5, -0.2, 0.1, 0.3], x);
        let uzh = mv([0.2, 0.0, -0.1, 0.4], h);
        let z = [sigmoid(wzx[0] + uzh[0] + 0.1), sigmoid(wzx[1] + uzh[1] - 0.1)];
        let wrx = mv([-0.3, 0.2, 0.6, 0.1], x);
        let urh = mv([0.1, 0.1, 0.0, -0.2], h);
        let r = [sigmoid(wrx[0] + urh[0]), sigmoid(wrx[1] + urh[1] + 0.2)];
        let whx = mv([0.7, -0.4, 0.2, 0.5], x);
        let uhr = mv([-0.5, 0.3, 0.4, 0.1], [r[0] * h[0], r[1] * h[1]]);
        let cand = [(whx[0] + uhr[0] + 0.05).tanh(), (whx[1] + uhr[1]).tanh()];
        let expect = [
            (1.0 - z[0]) * h[0] + z[0] * cand[0],
            (1.0 - z[1]) * h[1] + z[1] * cand[1],
        ];
        let mut t = Tape::new();
        let xv = t.constant(Tensor::vector(x.to_vec()));
        let hv = t.constant(Tensor::vector(h.to_vec()));
        let out = cell.step(&mut t, &store, xv, hv).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(t.value(out).values()[i], expect[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_weight_gru_is_deterministic() {
        let cell = GruCell::new("g", 3, 2);
        let mut store = ParamStore::new(0);
        cell.init(&mut store, &mut rng(1)).unwrap();
        for name in store.names().cloned().collect::<Vec<_>>() {
            let t = store.get_mut(&name).unwrap();
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3]));
        let h = t.constant(Tensor::vector(vec![0.4, -0.6]));
        let out = cell.step(&mut t, &store, x, h).unwrap();
        // z = 0.5, candidate = 0, so h' = h / 2.
        assert_eq!(t.value(out).values(), &[0.2, -0.3]);
    }

    fn encoder_setup(mirrored: bool) -> (ParamStore, EmbeddingLayer, GruCell, GruCell) {
        let mut store = ParamStore::new(0);
        let mut r = rng(7);
        let emb = EmbeddingLayer::new("emb", 6, 3);
        emb.init(&mut store, &mut r).unwrap();
        let fwd = GruCell::new("enc.fwd", 3, 4);
        let bwd = GruCell::new("enc.bwd", 3, 4);
        fwd.init(&mut store, &mut r).unwrap();
        if mirrored {
            for gate in ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"] {
                let t = store.get(&fwd.param_name(gate)).unwrap().clone();
                store.insert(bwd.param_name(gate), t).unwrap();
            }
        } else {
            bwd.init(&mut store, &mut r).unwrap();
        }
        (store, emb, fwd, bwd)
    }

    #[test]
    fn length_one_summary_equals_state() {
        let (store, emb, fwd, bwd) = encoder_setup(false);
        let mut t = Tape::new();
        let enc = gru_encode(&mut t, &store, &[3], &emb, &fwd, Some(&bwd)).unwrap();
        assert_eq!(enc.states.len(), 1);
        assert_eq!(t.value(enc.states[0]), t.value(enc.summary));
        assert_eq!(t.shape(enc.summary), &[8]);
    }

    #[test]
    fn reversal_swaps_directions_under_mirrored_cells() {
        let (store, emb, fwd, bwd) = encoder_setup(true);
        let seq = [1, 4, 2, 5];
        let rev: Vec<usize> = seq.iter().rev().cloned().collect();
        let mut t = Tape::new();
        let a = gru_encode(&mut t, &store, &seq, &emb, &fwd, Some(&bwd)).unwrap();
        let b = gru_encode(&mut t, &store, &rev, &emb, &fwd, Some(&bwd)).unwrap();
        let (sa, sb) = (t.value(a.summary).values(), t.value(b.summary).values());
        assert_eq!(&sa[..4], &sb[4..]);
        assert_eq!(&sa[4..], &sb[..4]);
    }

    #[test]
    fn empty_and_out_of_vocab_sequences_rejected() {
        let (store, emb, fwd, bwd) = encoder_setup(false);
        let mut t = Tape::new();
        assert!(matches!(
            gru_encode(&mut t, &store, &[], &emb, &fwd, Some(&bwd)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            gru_encode(&mut t, &store, &[1, 9], &emb, &fwd, None),
            Err(Error::Vocab { .. })
        ));
    }

    fn attention_setup() -> (ParamStore, AttentionLayer) {
        let mut store = ParamStore::new(0);
        let att = AttentionLayer::new("att", 3, 4, 5);
        att.init(&mut store, &mut rng(3)).unwrap();
        (store, att)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, att) = attention_setup();
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let k = t.constant(Tensor::vector(vec![1.0, -1.0, 0.5, 2.0]));
        let (ctx, w) = att.attend(&mut t, &store, q, &[k]).unwrap();
        assert_eq!(t.value(w).values(), &[1.0]);
        assert_eq!(t.value(ctx).values(), t.value(k).values());
    }

    #[test]
    fn identical_keys_get_uniform_weight() {
        let (store, att) = attention_setup();
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let k = t.constant(Tensor::vector(vec![0.3, 0.1, -0.5, 0.2]));
        let (ctx, w) = att.attend(&mut t, &store, q, &[k, k, k]).unwrap();
        for &x in t.value(w).values() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        for (a, b) in t.value(ctx).values().iter().zip(t.value(k).values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn context_is_weighted_sum_of_keys() {
        let (store, att) = attention_setup();
        let mut r = rng(9);
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector((0..3).map(|_| r.gen_range(-1.0..1.0)).collect()));
        let keys: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let kv: Vec<Var> = keys.iter().map(|k| t.constant(Tensor::vector(k.clone()))).collect();
        let (ctx, w) = att.attend(&mut t, &store, q, &kv).unwrap();
        let w = t.value(w).values().to_vec();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for d in 0..4 {
            let expect: f64 = (0..3).map(|i| w[i] * keys[i][d]).sum();
            assert_abs_diff_eq!(t.value(ctx).values()[d], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let (store, att) = attention_setup();
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(att.attend(&mut t, &store, q, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mlp = Mlp::new("m", vec![3, 4, 2]);
        let mut store = ParamStore::new(0);
        mlp.init(&mut store, &mut rng(0)).unwrap();
        for name in store.names().cloned().collect::<Vec<_>>() {
            store.get_mut(&name).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_mlp_reproduces_tanh() {
        let mlp = Mlp::new("m", vec![1, 1, 1]);
        let mut store = ParamStore::new(0);
        store.insert("m.0.W", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        store.insert("m.0.b", Tensor::vector(vec![0.0])).unwrap();
        store.insert("m.1.W", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        store.insert("m.1.b", Tensor::vector(vec![0.0])).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7]));
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).values(), &[0.7f64.tanh()]);
    }

    #[test]
    fn two_layer_mlp_matches_hand_arithmetic() {
        let mlp = Mlp::new("m", vec![2, 2, 1]);
        let mut store = ParamStore::new(0);
        store.insert("m.0.W", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        store.insert("m.0.b", Tensor::vector(vec![0.1, -0.2])).unwrap();
        store.insert("m.1.W", Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap()).unwrap();
        store.insert("m.1.b", Tensor::vector(vec![0.3])).unwrap();
        let x = [0.4, 0.8];
        let h0 = (0.5 * x[0] - 1.0 * x[1] + 0.1f64).tanh();
        let h1 = (2.0 * x[0] + 0.25 * x[1] - 0.2f64).tanh();
        let expect = 1.5 * h0 - 0.5 * h1 + 0.3;
        let mut t = Tape::new();
        let xv = t.constant(Tensor::vector(x.to_vec()));
        let y = mlp.forward(&mut t, &store, xv).unwrap();
        assert_abs_diff_eq!(t.value(y).item().unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn mlp_rejects_wrong_input_dim() {
        let mlp = Mlp::new("m", vec![3, 2]);
        let mut store = ParamStore::new(0);
        mlp.init(&mut store, &mut rng(0)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4]));
        assert!(matches!(mlp.forward(&mut t, &store, x), Err(Error::Dimension { .. })));
    }
}
