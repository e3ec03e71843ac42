//! Attentional encoder-decoder building blocks and the one-to-one model.
//!
//! The encoder is a single-layer bidirectional LSTM whose per-position
//! annotations are the concatenated forward and backward states. The
//! decoder is an LSTM with input feeding: its input at step `t` is the
//! embedding of the previous target token concatenated with the attentional
//! vector `h̃_{t-1}`. Attention is global with a bilinear score.

mod decode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{beam_decode, greedy_decode, Stepper, BANNED_OUTPUTS};

use crate::autodiff::{Bound, Graph, ParamId, Params, Tensor, Var};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::trainer::Trainable;

/// Half-width of the uniform initialization of embedding tables.
pub const EMBED_INIT_SCALE: f64 = 1.0;

/// Glorot-uniform half-width for a `rows × cols` matrix.
pub fn glorot_scale(shape: &[usize]) -> f64 {
    let fan: usize = shape.iter().sum();
    (6.0 / fan.max(1) as f64).sqrt()
}

/// Glorot-uniform initialized matrix.
pub fn glorot(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, glorot_scale(shape), rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_cap: usize,
    pub layers: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            hidden_dim: 512,
            embed_dim: 512,
            vocab_cap: 30_000,
            layers: 1,
        }
    }
}

impl Hyper {
    pub fn small(hidden_dim: usize, embed_dim: usize) -> Self {
        Hyper {
            hidden_dim,
            embed_dim,
            ..Hyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.vocab_cap == 0 {
            return Err(Error::Contract("hyperparameters must be positive".into()));
        }
        if self.layers != 1 {
            return Err(Error::Contract(format!(
                "only single-layer models are supported, got {} layers",
                self.layers
            )));
        }
        Ok(())
    }
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weight(params: &mut Params, name: String, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    params.add(name, glorot(shape, rng))
}

fn bias(params: &mut Params, name: String, n: usize) -> ParamId {
    params.add(name, Tensor::zeros(&[n]))
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        params: &mut Params,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Embedding {
            table: params.add(
                format!("{name}.table"),
                Tensor::uniform(&[vocab, dim], EMBED_INIT_SCALE, rng),
            ),
            vocab,
            dim,
        }
    }

    pub fn lookup(&self, g: &mut Graph, b: &mut Bound, id: usize) -> Result<Var> {
        let t = b.get(g, self.table);
        g.gather(t, id)
    }
}

/// LSTM cell with gates stacked as input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `4H × (I + H)`
    pub weight: ParamId,
    /// `4H`
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new(
        params: &mut Params,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LstmCell {
            input_dim,
            hidden_dim,
            weight: weight(
                params,
                format!("{name}.w"),
                &[4 * hidden_dim, input_dim + hidden_dim],
                rng,
            ),
            bias: bias(params, format!("{name}.b"), 4 * hidden_dim),
        }
    }

    pub fn step(&self, g: &mut Graph, b: &mut Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        lstm_step(g, b, self, x, h, c)
    }
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step(
    g: &mut Graph,
    b: &mut Bound,
    cell: &LstmCell,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hd = cell.hidden_dim;
    if g.width(x) != cell.input_dim || g.width(h) != hd || g.width(c) != hd {
        return Err(Error::Dimension(format!(
            "lstm step expects input {} and state {}, got input {}, h {}, c {}",
            cell.input_dim,
            hd,
            g.width(x),
            g.width(h),
            g.width(c)
        )));
    }
    let w = b.get(g, cell.weight);
    let bias = b.get(g, cell.bias);
    let xh = g.concat(&[x, h], 0)?;
    let pre = g.matmul(w, xh)?;
    let pre = g.add(pre, bias)?;
    let i = g.slice(pre, 0, hd)?;
    let f = g.slice(pre, hd, hd)?;
    let o = g.slice(pre, 2 * hd, hd)?;
    let cand = g.slice(pre, 3 * hd, hd)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let o = g.sigmoid(o);
    let cand = g.tanh(cand);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One `2H` vector per source position.
    pub annotations: Vec<Var>,
    /// Annotations stacked as an `S × 2H` matrix.
    pub matrix: Var,
    pub final_h: Var,
    pub final_c: Var,
}

#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub embed: Embedding,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    /// `H × 2H`, followed by tanh.
    pub proj_h: ParamId,
    /// `H × 2H`, linear.
    pub proj_c: ParamId,
}

impl BiEncoder {
    pub fn new(
        params: &mut Params,
        name: &str,
        vocab: usize,
        hyper: &Hyper,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (e, h) = (hyper.embed_dim, hyper.hidden_dim);
        BiEncoder {
            embed: Embedding::new(params, &format!("{name}.embed"), vocab, e, rng),
            fwd: LstmCell::new(params, &format!("{name}.fwd"), e, h, rng),
            bwd: LstmCell::new(params, &format!("{name}.bwd"), e, h, rng),
            proj_h: weight(params, format!("{name}.proj_h"), &[h, 2 * h], rng),
            proj_c: weight(params, format!("{name}.proj_c"), &[h, 2 * h], rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim
    }

    pub fn encode(&self, g: &mut Graph, b: &mut Bound, tokens: &[usize]) -> Result<EncoderOutput> {
        encode_bidirectional(g, b, self, tokens)
    }
}

pub fn encode_bidirectional(
    g: &mut Graph,
    b: &mut Bound,
    enc: &BiEncoder,
    tokens: &[usize],
) -> Result<EncoderOutput> {
    if tokens.is_empty() {
        return Err(Error::Contract(
            "cannot encode an empty token sequence".into(),
        ));
    }
    let hd = enc.hidden_dim();
    let embeds = tokens
        .iter()
        .map(|&t| enc.embed.lookup(g, b, t))
        .collect::<Result<Vec<_>>>()?;

    let run = |g: &mut Graph,
               b: &mut Bound,
               cell: &LstmCell,
               order: &mut dyn Iterator<Item = usize>|
     -> Result<(Vec<Option<Var>>, Var, Var)> {
        let mut h = g.zeros(hd);
        let mut c = g.zeros(hd);
        let mut states = vec![None; tokens.len()];
        for t in order {
            (h, c) = cell.step(g, b, embeds[t], h, c)?;
            states[t] = Some(h);
        }
        Ok((states, h, c))
    };
    let (fwd, fwd_h, fwd_c) = run(g, b, &enc.fwd, &mut (0..tokens.len()))?;
    let (bwd, bwd_h, bwd_c) = run(g, b, &enc.bwd, &mut (0..tokens.len()).rev())?;

    let annotations = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, r)| g.concat(&[f.expect("visited"), r.expect("visited")], 0))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&annotations, 0)?;
    let matrix = g.reshape(stacked, &[tokens.len(), 2 * hd])?;

    let hh = g.concat(&[fwd_h, bwd_h], 0)?;
    let ph = b.get(g, enc.proj_h);
    let final_h = g.matmul(ph, hh)?;
    let final_h = g.tanh(final_h);
    let cc = g.concat(&[fwd_c, bwd_c], 0)?;
    let pc = b.get(g, enc.proj_c);
    let final_c = g.matmul(pc, cc)?;
    Ok(EncoderOutput {
        annotations,
        matrix,
        final_h,
        final_c,
    })
}

/// Global attention with bilinear score `annotation_sᵀ · W · h_t`.
#[derive(Debug, Clone)]
pub struct Attention {
    /// `2H × H`
    pub weight: ParamId,
}

impl Attention {
    pub fn new(
        params: &mut Params,
        name: &str,
        annotation_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            weight: weight(
                params,
                format!("{name}.w"),
                &[annotation_dim, hidden_dim],
                rng,
            ),
        }
    }

    pub fn attend(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        enc: &EncoderOutput,
        h: Var,
    ) -> Result<(Var, Var)> {
        global_attention(g, b, self, enc.matrix, h)
    }
}

/// Returns `(context, weights)` for decoder state `h` over an `S × D`
/// annotation matrix.
pub fn global_attention(
    g: &mut Graph,
    b: &mut Bound,
    att: &Attention,
    annotations: Var,
    h: Var,
) -> Result<(Var, Var)> {
    let w = b.get(g, att.weight);
    let query = g.matmul(w, h)?;
    let scores = g.matmul(annotations, query)?;
    let weights = g.softmax(scores);
    let context = g.matmul(weights, annotations)?;
    Ok((context, weights))
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub h_tilde_prev: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub dist: Var,
    pub state: DecoderState,
    /// Embedding of the previous target token.
    pub embedding: Var,
    /// Full decoder input: embedding concatenated with `h̃_{t-1}`.
    pub input: Var,
    pub h_tilde: Var,
}

/// Input-feeding decoder attending to one or more encoders.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Embedding,
    pub cell: LstmCell,
    pub attentions: Vec<Attention>,
    /// `H × (H + K·2H)`, followed by tanh.
    pub w_out: ParamId,
    /// `V × H`
    pub w_vocab: ParamId,
    /// `V`
    pub b_vocab: ParamId,
}

impl Decoder {
    pub fn new(
        params: &mut Params,
        vocab: usize,
        encoders: usize,
        hyper: &Hyper,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (e, h) = (hyper.embed_dim, hyper.hidden_dim);
        Decoder {
            embed: Embedding::new(params, "dec.embed", vocab, e, rng),
            cell: LstmCell::new(params, "dec.lstm", e + h, h, rng),
            attentions: (0..encoders)
                .map(|k| Attention::new(params, &format!("dec.attn{k}"), 2 * h, h, rng))
                .collect(),
            w_out: weight(params, "dec.out.w".into(), &[h, h + encoders * 2 * h], rng),
            w_vocab: weight(params, "dec.vocab.w".into(), &[vocab, h], rng),
            b_vocab: bias(params, "dec.vocab.b".into(), vocab),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim
    }

    pub fn vocab(&self) -> usize {
        self.embed.vocab
    }

    pub fn initial_feed(&self, g: &mut Graph) -> Var {
        g.zeros(self.hidden_dim())
    }

    /// `h̃_t = tanh(W_out · [h_t; c_t^1; …; c_t^K])`.
    pub fn combine(&self, g: &mut Graph, b: &mut Bound, h: Var, contexts: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(1 + contexts.len());
        parts.push(h);
        parts.extend_from_slice(contexts);
        let joined = g.concat(&parts, 0)?;
        let w = b.get(g, self.w_out);
        let expected = g.shape(w)[1];
        if g.width(joined) != expected {
            return Err(Error::Dimension(format!(
                "output combiner expects width {expected}, got {}",
                g.width(joined)
            )));
        }
        let pre = g.matmul(w, joined)?;
        Ok(g.tanh(pre))
    }

    pub fn step(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        state: &DecoderState,
        y_prev: usize,
        encoders: &[EncoderOutput],
    ) -> Result<StepOutput> {
        if y_prev >= self.vocab() {
            return Err(Error::Index {
                index: y_prev,
                size: self.vocab(),
            });
        }
        if encoders.len() != self.attentions.len() {
            return Err(Error::Dimension(format!(
                "decoder has {} attentions but got {} encoders",
                self.attentions.len(),
                encoders.len()
            )));
        }
        let embedding = self.embed.lookup(g, b, y_prev)?;
        let input = g.concat(&[embedding, state.h_tilde_prev], 0)?;
        let (h, c) = self.cell.step(g, b, input, state.h, state.c)?;
        let contexts = self
            .attentions
            .iter()
            .zip(encoders)
            .map(|(att, enc)| att.attend(g, b, enc, h).map(|(ctx, _)| ctx))
            .collect::<Result<Vec<_>>>()?;
        let h_tilde = self.combine(g, b, h, &contexts)?;
        let wv = b.get(g, self.w_vocab);
        let bv = b.get(g, self.b_vocab);
        let logits = g.matmul(wv, h_tilde)?;
        let logits = g.add(logits, bv)?;
        let dist = g.softmax(logits);
        Ok(StepOutput {
            dist,
            state: DecoderState {
                h,
                c,
                h_tilde_prev: h_tilde,
            },
            embedding,
            input,
            h_tilde,
        })
    }

    /// Teacher-forced summed negative log-likelihood of `target`, which is
    /// framed as `[BOS] … [EOS]`; the BOS position is not predicted.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        init: DecoderState,
        encoders: &[EncoderOutput],
        target: &[usize],
    ) -> Result<Var> {
        check_target(target)?;
        let mut state = init;
        let mut terms = Vec::with_capacity(target.len() - 1);
        for pair in target.windows(2) {
            let out = self.step(g, b, &state, pair[0], encoders)?;
            terms.push(g.cross_entropy(out.dist, pair[1])?);
            state = out.state;
        }
        g.sum_all(&terms)
    }
}

pub(crate) fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::Contract(
            "target must contain at least BOS and EOS".into(),
        ));
    }
    if target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(Error::Contract("target must be framed by BOS … EOS".into()));
    }
    Ok(())
}

/// A framed source/target id pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One-to-one attentional encoder-decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub hyper: Hyper,
    pub params: Params,
    pub encoder: BiEncoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new(hyper: Hyper, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = rng_for(seed);
        let mut params = Params::new();
        let encoder = BiEncoder::new(&mut params, "enc0", src_vocab, &hyper, &mut rng);
        let decoder = Decoder::new(&mut params, tgt_vocab, 1, &hyper, &mut rng);
        Ok(Seq2Seq {
            hyper,
            params,
            encoder,
            decoder,
        })
    }

    pub fn src_vocab(&self) -> usize {
        self.encoder.embed.vocab
    }

    pub fn tgt_vocab(&self) -> usize {
        self.decoder.vocab()
    }

    pub fn encode(&self, g: &mut Graph, b: &mut Bound, source: &[usize]) -> Result<EncoderOutput> {
        self.encoder.encode(g, b, source)
    }

    /// Decoder starts from the encoder's projected final state.
    pub fn init_state(&self, g: &mut Graph, enc: &EncoderOutput) -> DecoderState {
        DecoderState {
            h: enc.final_h,
            c: enc.final_c,
            h_tilde_prev: self.decoder.initial_feed(g),
        }
    }

    pub fn decoder_step(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        state: &DecoderState,
        y_prev: usize,
        enc: &EncoderOutput,
    ) -> Result<StepOutput> {
        self.decoder
            .step(g, b, state, y_prev, std::slice::from_ref(enc))
    }

    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        source: &[usize],
        target: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(g, b, source)?;
        let init = self.init_state(g, &enc);
        self.decoder
            .sequence_loss(g, b, init, std::slice::from_ref(&enc), target)
    }

    pub fn session(&self, source: &[usize]) -> Result<Seq2SeqSession<'_>> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&self.params);
        let enc = self.encode(&mut g, &mut b, source)?;
        Ok(Seq2SeqSession {
            model: self,
            g,
            b,
            enc,
        })
    }

    /// Greedy decoding for `width == 1`, beam search otherwise.
    pub fn translate(&self, source: &[usize], width: usize, max_len: usize) -> Result<Vec<usize>> {
        let mut s = self.session(source)?;
        if width <= 1 {
            greedy_decode(&mut s, max_len)
        } else {
            beam_decode(&mut s, width, max_len)
        }
    }
}

pub struct Seq2SeqSession<'m> {
    model: &'m Seq2Seq,
    g: Graph,
    b: Bound<'m>,
    enc: EncoderOutput,
}

impl Stepper for Seq2SeqSession<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        Ok(self.model.init_state(&mut self.g, &self.enc))
    }

    fn step(&mut self, state: &DecoderState, y_prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let out = self
            .model
            .decoder_step(&mut self.g, &mut self.b, state, y_prev, &self.enc)?;
        Ok((self.g.value(out.dist).to_vec(), out.state))
    }
}

impl Trainable for Seq2Seq {
    type Example = PairExample;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn accumulate_gradients(&mut self, ex: &PairExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut b = Bound::trainable(&self.params);
        let loss = self.sequence_loss(&mut g, &mut b, &ex.source, &ex.target)?;
        g.backward(loss)?;
        let grads = b.gradients(&g);
        let value = g.scalar(loss);
        self.params.accumulate(grads);
        Ok((value, ex.target.len() - 1))
    }

    fn example_nll(&self, ex: &PairExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&self.params);
        let loss = self.sequence_loss(&mut g, &mut b, &ex.source, &ex.target)?;
        Ok((g.scalar(loss), ex.target.len() - 1))
    }
}

#[cfg(test)]
mod tests;
