//! Multi-encoder NMT over `K` source languages.
//!
//! Each source has its own bidirectional encoder. The decoder starts from
//! `h = tanh(W_init · [h_1; …; h_K])` and `c = c_1 + … + c_K`, attends to
//! every encoder separately at each step and combines the `K` contexts
//! through `W_out`. A missing source is encoded as `[BOS] <NULL> [EOS]`.

use crate::autodiff::{Bound, Graph, ParamId, Params, Var};
use crate::corpus::{frame, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::seq2seq::{
    beam_decode, glorot, greedy_decode, rng_for, BiEncoder, Decoder, DecoderState, EncoderOutput,
    Hyper, StepOutput, Stepper,
};
use crate::trainer::Trainable;

/// Framed source id sequences (one per encoder) and a framed target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiExample {
    pub sources: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

/// Frames each source cell; missing cells become `[BOS] <NULL> [EOS]`.
/// `row` only labels the error raised when every cell is missing.
pub fn prepare_inputs(
    row: usize,
    cells: &[Option<&Sentence>],
    vocabs: &[Vocabulary],
) -> Result<Vec<Vec<usize>>> {
    if cells.len() != vocabs.len() {
        return Err(Error::Dimension(format!(
            "{} source cells for {} vocabularies",
            cells.len(),
            vocabs.len()
        )));
    }
    if cells.iter().all(Option::is_none) {
        return Err(Error::RejectedRow { row });
    }
    Ok(cells
        .iter()
        .zip(vocabs)
        .map(|(c, v)| frame(*c, v))
        .collect())
}

#[derive(Debug, Clone)]
pub struct MultiEncoderModel {
    pub hyper: Hyper,
    pub params: Params,
    pub encoders: Vec<BiEncoder>,
    /// `H × K·H`
    pub w_init: ParamId,
    pub decoder: Decoder,
}

impl MultiEncoderModel {
    pub fn new(hyper: Hyper, src_vocabs: &[usize], tgt_vocab: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if src_vocabs.is_empty() {
            return Err(Error::Contract(
                "a multi-encoder model needs at least one source".into(),
            ));
        }
        let k = src_vocabs.len();
        let h = hyper.hidden_dim;
        let mut rng = rng_for(seed);
        let mut params = Params::new();
        let encoders = src_vocabs
            .iter()
            .enumerate()
            .map(|(i, &v)| BiEncoder::new(&mut params, &format!("enc{i}"), v, &hyper, &mut rng))
            .collect();
        let w_init = params.add("init.w", glorot(&[h, k * h], &mut rng));
        let decoder = Decoder::new(&mut params, tgt_vocab, k, &hyper, &mut rng);
        Ok(MultiEncoderModel {
            hyper,
            params,
            encoders,
            w_init,
            decoder,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.encoders.len()
    }

    pub fn src_vocabs(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.embed.vocab).collect()
    }

    pub fn tgt_vocab(&self) -> usize {
        self.decoder.vocab()
    }

    pub fn encode_all(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        sources: &[Vec<usize>],
    ) -> Result<Vec<EncoderOutput>> {
        if sources.len() != self.num_sources() {
            return Err(Error::Dimension(format!(
                "{} source sequences for {} encoders",
                sources.len(),
                self.num_sources()
            )));
        }
        self.encoders
            .iter()
            .zip(sources)
            .map(|(enc, src)| enc.encode(g, b, src))
            .collect()
    }

    pub fn init_state(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        encs: &[EncoderOutput],
    ) -> Result<DecoderState> {
        let finals: Vec<(Var, Var)> = encs.iter().map(|e| (e.final_h, e.final_c)).collect();
        init_decoder_state(g, b, self.w_init, &self.decoder, &finals)
    }

    pub fn step(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        state: &DecoderState,
        y_prev: usize,
        encs: &[EncoderOutput],
    ) -> Result<StepOutput> {
        self.decoder.step(g, b, state, y_prev, encs)
    }

    /// Teacher-forced summed NLL of `target` given all sources.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        sources: &[Vec<usize>],
        target: &[usize],
    ) -> Result<Var> {
        let encs = self.encode_all(g, b, sources)?;
        let init = self.init_state(g, b, &encs)?;
        self.decoder.sequence_loss(g, b, init, &encs, target)
    }

    pub fn session(&self, sources: &[Vec<usize>]) -> Result<MultiSession<'_>> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&self.params);
        let encs = self.encode_all(&mut g, &mut b, sources)?;
        Ok(MultiSession {
            model: self,
            g,
            b,
            encs,
        })
    }

    /// Greedy decoding for `width == 1`, beam search otherwise.
    pub fn translate(
        &self,
        sources: &[Vec<usize>],
        width: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut s = self.session(sources)?;
        if width <= 1 {
            greedy_decode(&mut s, max_len)
        } else {
            beam_decode(&mut s, width, max_len)
        }
    }
}

/// `h = tanh(W_init · [h_1; …; h_K])`, `c = Σ c_i`, zero attentional feed.
pub fn init_decoder_state(
    g: &mut Graph,
    b: &mut Bound,
    w_init: ParamId,
    decoder: &Decoder,
    finals: &[(Var, Var)],
) -> Result<DecoderState> {
    let hd = decoder.hidden_dim();
    if finals.is_empty() {
        return Err(Error::Dimension("no encoder final states".into()));
    }
    if let Some((h, c)) = finals
        .iter()
        .find(|(h, c)| g.width(*h) != hd || g.width(*c) != hd)
    {
        return Err(Error::Dimension(format!(
            "encoder final state widths {} and {} differ from decoder width {hd}",
            g.width(*h),
            g.width(*c)
        )));
    }
    let hs: Vec<Var> = finals.iter().map(|(h, _)| *h).collect();
    let joined = g.concat(&hs, 0)?;
    let w = b.get(g, w_init);
    let pre = g.matmul(w, joined)?;
    let h = g.tanh(pre);
    let mut c = finals[0].1;
    for (_, ci) in &finals[1..] {
        c = g.add(c, *ci)?;
    }
    Ok(DecoderState {
        h,
        c,
        h_tilde_prev: decoder.initial_feed(g),
    })
}

/// `h̃_t = tanh(W_out · [h_t; c_t^1; …; c_t^K])`.
pub fn multi_context(
    g: &mut Graph,
    b: &mut Bound,
    decoder: &Decoder,
    h: Var,
    contexts: &[Var],
) -> Result<Var> {
    decoder.combine(g, b, h, contexts)
}

/// Teacher-forced loss of one prepared example.
pub fn multi_forward_loss(
    g: &mut Graph,
    b: &mut Bound,
    model: &MultiEncoderModel,
    ex: &MultiExample,
) -> Result<Var> {
    model.sequence_loss(g, b, &ex.sources, &ex.target)
}

/// Prepares the row's source cells and decodes.
pub fn multi_translate(
    model: &MultiEncoderModel,
    vocabs: &[Vocabulary],
    row: usize,
    cells: &[Option<&Sentence>],
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let sources = prepare_inputs(row, cells, vocabs)?;
    model.translate(&sources, width, max_len)
}

pub struct MultiSession<'m> {
    model: &'m MultiEncoderModel,
    g: Graph,
    b: Bound<'m>,
    encs: Vec<EncoderOutput>,
}

impl Stepper for MultiSession<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        self.model.init_state(&mut self.g, &mut self.b, &self.encs)
    }

    fn step(&mut self, state: &DecoderState, y_prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let out = self
            .model
            .step(&mut self.g, &mut self.b, state, y_prev, &self.encs)?;
        Ok((self.g.value(out.dist).to_vec(), out.state))
    }
}

impl Trainable for MultiEncoderModel {
    type Example = MultiExample;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn accumulate_gradients(&mut self, ex: &MultiExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut b = Bound::trainable(&self.params);
        let loss = multi_forward_loss(&mut g, &mut b, self, ex)?;
        g.backward(loss)?;
        let grads = b.gradients(&g);
        let value = g.scalar(loss);
        self.params.accumulate(grads);
        Ok((value, ex.target.len() - 1))
    }

    fn example_nll(&self, ex: &MultiExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&self.params);
        let loss = multi_forward_loss(&mut g, &mut b, self, ex)?;
        Ok((g.scalar(loss), ex.target.len() - 1))
    }
}
