//! Bias-free linear maps stored as `[in, out]` matrices.

use rand::Rng;

use crate::{Error, ParamId, ParamSet, Result, Scalar, Tape, Tensor, Var};

/// Registers a trainable `in -> out` map initialised from `U[-1/sqrt(in), 1/sqrt(in)]`.
pub fn register_linear<T: Scalar, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    name: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) -> ParamId {
    set.add(name, Tensor::uniform(&[input, output], input, rng))
}

/// Registers a trainable bias vector with the same initialisation range as
/// the map it accompanies.
pub fn register_bias<T: Scalar, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    output: usize,
    rng: &mut R,
) -> ParamId {
    set.add(name, Tensor::uniform(&[output], fan_in, rng))
}

/// Fails unless parameter `id` is an `input -> output` map.
pub fn check_linear<T: Scalar>(set: &ParamSet<T>, id: ParamId, input: usize, output: usize) -> Result<()> {
    let shape = set.get(id).shape();
    if shape != [input, output] {
        return Err(Error::contract(format!(
            "{} has shape {shape:?}, expected {input}->{output}",
            set.name(id)
        )));
    }
    Ok(())
}

pub fn linear<'p, T: Scalar>(tape: &mut Tape<'p, T>, set: &'p ParamSet<T>, id: ParamId, x: Var) -> Result<Var> {
    let w = tape.param(set, id);
    tape.matmul(x, w)
}

/// Stacks `[m_k, d]` blocks into one `[sum m_k, d]` matrix.
pub fn stack_rows<T: Scalar>(tape: &mut Tape<'_, T>, blocks: &[Var]) -> Result<Var> {
    let rows: Vec<usize> = blocks.iter().map(|&b| tape.shape(b)[0]).collect();
    let total: usize = rows.iter().sum();
    let mut out: Option<Var> = None;
    let mut offset = 0;
    for (&b, &m) in blocks.iter().zip(&rows) {
        let seg: Vec<usize> = (offset..offset + m).collect();
        let placed = tape.segment_sum(b, &seg, total)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
        offset += m;
    }
    out.ok_or_else(|| Error::contract("stack_rows of zero blocks"))
}
