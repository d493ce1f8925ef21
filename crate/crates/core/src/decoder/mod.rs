//! Two-layer GRU caption decoder with hyper-node attention between layers.

use rand::Rng;

use crate::data::{END, PAD, START, EMBED_DIM, MAX_CAPTION_TOKENS};
use crate::layers::{check_linear, linear, register_bias, register_linear};
use crate::slgc::NODE_DIM;
use crate::{Error, ParamId, ParamSet, Result, Scalar, Tape, Tensor, Var};


/// Gated recurrent unit: `r` and `z` gates and a `tanh` candidate `n`;
/// `h' = n + z * (h - n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_ir: ParamId,
    pub w_iz: ParamId,
    pub w_in: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_in: ParamId,
    pub b_hn: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut lin = |n: &str, i: usize| register_linear(set, &format!("{prefix}.{n}"), i, hidden, rng);
        let (w_ir, w_iz, w_in) = (lin("w_ir", input), lin("w_iz", input), lin("w_in", input));
        let (w_hr, w_hz, w_hn) = (lin("w_hr", hidden), lin("w_hz", hidden), lin("w_hn", hidden));
        let mut bias = |n: &str| register_bias(set, &format!("{prefix}.{n}"), hidden, hidden, rng);
        GruParams {
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_r: bias("b_r"),
            b_z: bias("b_z"),
            b_in: bias("b_in"),
            b_hn: bias("b_hn"),
            input,
            hidden,
        }
    }

    pub fn lookup<T: Scalar>(set: &ParamSet<T>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let id = |n: &str| set.id(&format!("{prefix}.{n}"));
        let p = GruParams {
            w_ir: id("w_ir")?,
            w_iz: id("w_iz")?,
            w_in: id("w_in")?,
            w_hr: id("w_hr")?,
            w_hz: id("w_hz")?,
            w_hn: id("w_hn")?,
            b_r: id("b_r")?,
            b_z: id("b_z")?,
            b_in: id("b_in")?,
            b_hn: id("b_hn")?,
            input,
            hidden,
        };
        p.check(set)?;
        Ok(p)
    }

    pub fn check<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        for w in [self.w_ir, self.w_iz, self.w_in] {
            check_linear(set, w, self.input, self.hidden)?;
        }
        for w in [self.w_hr, self.w_hz, self.w_hn] {
            check_linear(set, w, self.hidden, self.hidden)?;
        }
        for b in [self.b_r, self.b_z, self.b_in, self.b_hn] {
            if set.get(b).shape() != [self.hidden] {
                return Err(Error::contract(format!("{} must have {} entries", set.name(b), self.hidden)));
            }
        }
        Ok(())
    }

    /// `x: [B, input]`, `h: [B, hidden]`.
    pub fn step<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, set: &'p ParamSet<T>, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape<'p, T>, wi: ParamId, wh: ParamId, b: ParamId| -> Result<Var> {
            let a = linear(tape, set, wi, x)?;
            let c = linear(tape, set, wh, h)?;
            let s = tape.add(a, c)?;
            let bias = tape.param(set, b);
            tape.add(s, bias)
        };
        let r = gate(tape, self.w_ir, self.w_hr, self.b_r)?;
        let r = tape.sigmoid(r);
        let z = gate(tape, self.w_iz, self.w_hz, self.b_z)?;
        let z = tape.sigmoid(z);
        let xn = linear(tape, set, self.w_in, x)?;
        let b_in = tape.param(set, self.b_in);
        let xn = tape.add(xn, b_in)?;
        let hn = linear(tape, set, self.w_hn, h)?;
        let b_hn = tape.param(set, self.b_hn);
        let hn = tape.add(hn, b_hn)?;
        let hn = tape.mul(r, hn)?;
        let n = tape.add(xn, hn)?;
        let n = tape.tanh(n);
        let d = tape.sub(h, n)?;
        let d = tape.mul(z, d)?;
        tape.add(n, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    /// Frozen `[V, 300]` input word embeddings.
    pub embedding: ParamId,
    pub gru1: GruParams,
    pub gru2: GruParams,
    pub w10: ParamId,
    pub w11: ParamId,
    pub w_gamma: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub hidden: usize,
    pub vocab: usize,
}

impl DecoderParams {
    /// `embedding` must be `[V, 300]`; it is stored frozen.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        embedding: Tensor<T>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if embedding.shape().len() != 2 || embedding.shape()[1] != EMBED_DIM || embedding.shape()[0] < 4 {
            return Err(Error::contract(format!(
                "decoder embedding must be [V >= 4, 300], got {:?}",
                embedding.shape()
            )));
        }
        if hidden == 0 {
            return Err(Error::Config("decoder hidden size must be positive".into()));
        }
        let vocab = embedding.shape()[0];
        let embedding = set.add_frozen(format!("{prefix}.embedding"), embedding);
        let gru1 = GruParams::register(set, &format!("{prefix}.gru1"), EMBED_DIM + hidden + NODE_DIM, hidden, rng);
        let gru2 = GruParams::register(set, &format!("{prefix}.gru2"), NODE_DIM + hidden, hidden, rng);
        let p = DecoderParams {
            embedding,
            gru1,
            gru2,
            w10: register_linear(set, &format!("{prefix}.w10"), hidden, NODE_DIM, rng),
            w11: register_linear(set, &format!("{prefix}.w11"), NODE_DIM, NODE_DIM, rng),
            w_gamma: register_linear(set, &format!("{prefix}.w_gamma"), NODE_DIM, 1, rng),
            w_out: register_linear(set, &format!("{prefix}.w_out"), hidden, vocab, rng),
            b_out: register_bias(set, &format!("{prefix}.b_out"), hidden, vocab, rng),
            hidden,
            vocab,
        };
        p.check(set)?;
        Ok(p)
    }

    pub fn lookup<T: Scalar>(set: &ParamSet<T>, prefix: &str) -> Result<Self> {
        let id = |n: &str| set.id(&format!("{prefix}.{n}"));
        let embedding = id("embedding")?;
        let w_out = id("w_out")?;
        let (hidden, vocab) = match set.get(w_out).shape() {
            &[h, v] => (h, v),
            s => return Err(Error::contract(format!("{prefix}.w_out has shape {s:?}"))),
        };
        let p = DecoderParams {
            embedding,
            gru1: GruParams::lookup(set, &format!("{prefix}.gru1"), EMBED_DIM + hidden + NODE_DIM, hidden)?,
            gru2: GruParams::lookup(set, &format!("{prefix}.gru2"), NODE_DIM + hidden, hidden)?,
            w10: id("w10")?,
            w11: id("w11")?,
            w_gamma: id("w_gamma")?,
            w_out,
            b_out: id("b_out")?,
            hidden,
            vocab,
        };
        p.check(set)?;
        Ok(p)
    }

    pub fn check<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        if set.get(self.embedding).shape() != [self.vocab, EMBED_DIM] {
            return Err(Error::contract("decoder embedding does not cover the vocabulary"));
        }
        self.gru1.check(set)?;
        self.gru2.check(set)?;
        check_linear(set, self.w10, self.hidden, NODE_DIM)?;
        check_linear(set, self.w11, NODE_DIM, NODE_DIM)?;
        check_linear(set, self.w_gamma, NODE_DIM, 1)?;
        check_linear(set, self.w_out, self.hidden, self.vocab)?;
        if set.get(self.b_out).shape() != [self.vocab] {
            return Err(Error::contract("classifier bias does not cover the vocabulary"));
        }
        Ok(())
    }
}

/// Per-batch inputs that stay fixed across time steps.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    /// `[B, 128]` initial target features.
    pub targets: Var,
    /// `[M, 128]` hyper-node features of all samples, stacked.
    pub hyper: Var,
    /// `W_11` applied to `hyper`.
    hyper_key: Var,
    /// Sample owning each hyper-node row.
    pub segments: Vec<usize>,
    pub batch: usize,
}

impl DecoderContext {
    pub fn new<'p, T: Scalar>(
        tape: &mut Tape<'p, T>,
        set: &'p ParamSet<T>,
        params: &DecoderParams,
        targets: Var,
        hyper: Var,
        segments: Vec<usize>,
    ) -> Result<Self> {
        let shape = tape.shape(targets);
        if shape.len() != 2 || shape[1] != NODE_DIM {
            return Err(Error::Shape {
                op: "decoder targets",
                left: shape.to_vec(),
                right: vec![NODE_DIM],
            });
        }
        let batch = shape[0];
        let mut seen = vec![false; batch];
        for &s in &segments {
            if s >= batch {
                return Err(Error::contract(format!("hyper-node owner {s} outside batch of {batch}")));
            }
            seen[s] = true;
        }
        if let Some(b) = seen.iter().position(|&x| !x) {
            return Err(Error::contract(format!("sample {b} has no hyper-nodes to attend over")));
        }
        if tape.shape(hyper) != [segments.len(), NODE_DIM] {
            return Err(Error::Shape {
                op: "decoder hyper-nodes",
                left: tape.shape(hyper).to_vec(),
                right: vec![segments.len(), NODE_DIM],
            });
        }
        let hyper_key = linear(tape, set, params.w11, hyper)?;
        Ok(DecoderContext {
            targets,
            hyper,
            hyper_key,
            segments,
            batch,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h1: Var,
    pub h2: Var,
}

impl DecoderState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<'_, T>, batch: usize, hidden: usize) -> Self {
        DecoderState {
            h1: tape.constant(Tensor::zeros(&[batch, hidden])),
            h2: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    /// `[B, V]`.
    pub logits: Var,
    /// `[M, 1]` normalised attention per hyper-node.
    pub gamma: Var,
}

/// One decoding step for every sample in the batch.
pub fn decode_step<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &DecoderParams,
    ctx: &DecoderContext,
    state: DecoderState,
    prev: &[usize],
) -> Result<StepOutput> {
    if prev.len() != ctx.batch {
        return Err(Error::contract(format!(
            "{} previous words for a batch of {}",
            prev.len(),
            ctx.batch
        )));
    }
    let emb = tape.param(set, params.embedding);
    let w = tape.gather(emb, prev)?;
    let x1 = tape.concat(&[w, state.h2, ctx.targets])?;
    let h1 = params.gru1.step(tape, set, x1, state.h1)?;

    let q = linear(tape, set, params.w10, h1)?;
    let q = tape.gather(q, &ctx.segments)?;
    let s = tape.add(q, ctx.hyper_key)?;
    let s = tape.tanh(s);
    let gamma = linear(tape, set, params.w_gamma, s)?;
    let gamma = tape.segment_softmax(gamma, &ctx.segments, ctx.batch)?;
    let weighted = tape.mul(ctx.hyper, gamma)?;
    let context = tape.segment_sum(weighted, &ctx.segments, ctx.batch)?;

    let x2 = tape.concat(&[context, h1])?;
    let h2 = params.gru2.step(tape, set, x2, state.h2)?;
    let logits = linear(tape, set, params.w_out, h2)?;
    let b = tape.param(set, params.b_out);
    let logits = tape.add(logits, b)?;
    Ok(StepOutput {
        state: DecoderState { h1, h2 },
        logits,
        gamma,
    })
}

/// Mean over samples of the per-sample mean token cross-entropy, with
/// teacher forcing from `<start>`.
pub fn teacher_forced_loss<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &DecoderParams,
    ctx: &DecoderContext,
    captions: &[&[usize]],
) -> Result<Var> {
    if captions.len() != ctx.batch {
        return Err(Error::contract(format!(
            "{} captions for a batch of {}",
            captions.len(),
            ctx.batch
        )));
    }
    for c in captions {
        if c.len() < 2 || c[0] != START || c[c.len() - 1] != END {
            return Err(Error::contract("caption must be framed by start and end tokens"));
        }
        if let Some(&bad) = c.iter().find(|&&t| t >= params.vocab) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of {}",
                params.vocab
            )));
        }
    }
    let b = T::from_usize(ctx.batch).unwrap();
    let steps = captions.iter().map(|c| c.len() - 1).max().unwrap_or(0);
    let mut state = DecoderState::zeros(tape, ctx.batch, params.hidden);
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let prev: Vec<usize> = captions.iter().map(|c| c.get(t).copied().unwrap_or(PAD)).collect();
        let next: Vec<usize> = captions.iter().map(|c| c.get(t + 1).copied().unwrap_or(PAD)).collect();
        let weights: Vec<T> = captions
            .iter()
            .map(|c| {
                if t + 1 < c.len() {
                    T::one() / (b * T::from_usize(c.len() - 1).unwrap())
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = decode_step(tape, set, params, ctx, state, &prev)?;
        state = out.state;
        let ce = tape.cross_entropy(out.logits, &next, Some(&weights))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::contract("empty caption batch"))
}

/// Greedy decoding for every sample: `<pad>` and `<start>` are never
/// emitted, ties go to the lower index, and each caption stops at `<end>` or
/// after `max_len` content tokens (capped at 30). Returned sequences hold
/// content tokens only.
pub fn generate<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &DecoderParams,
    ctx: &DecoderContext,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let max_len = max_len.min(MAX_CAPTION_TOKENS);
    let mut out = vec![Vec::new(); ctx.batch];
    let mut done = vec![false; ctx.batch];
    let mut prev = vec![START; ctx.batch];
    let mut state = DecoderState::zeros(tape, ctx.batch, params.hidden);
    for _ in 0..=max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let step = decode_step(tape, set, params, ctx, state, &prev)?;
        state = step.state;
        let logits = tape.value(step.logits);
        for b in 0..ctx.batch {
            if done[b] {
                continue;
            }
            let row = &logits[b * params.vocab..(b + 1) * params.vocab];
            let mut best = END;
            for (k, &v) in row.iter().enumerate() {
                if k != PAD && k != START && (v > row[best] || (v == row[best] && k < best)) {
                    best = k;
                }
            }
            if best == END || out[b].len() == max_len {
                done[b] = true;
            } else {
                out[b].push(best);
                prev[b] = best;
            }
        }
    }
    Ok(out)
}
