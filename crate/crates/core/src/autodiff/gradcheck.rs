//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, ParamId, ParamSet, Result, Scalar, Tape, Tensor, Var};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / T::of(1e-8).max(analytic.abs() + numeric.abs())
}

fn eval_scalar<T, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone().requires_grad(true));
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::contract("grad_check function must be scalar-valued"));
    }
    Ok(tape.scalar(y))
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with the given step.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, Var) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone().requires_grad(true));
        let y = f(&mut tape, xv)?;
        let base = tape.scalar(y);
        if base != eval_scalar(&f, x)? {
            return Err(Error::contract(
                "grad_check function is not deterministic: re-evaluation differs",
            ));
        }
        let g = tape.backward(y)?;
        g.wrt(xv)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); x.len()])
    };
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (fp - fm) / (two * step)));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates whose perturbation switched a rectifier on or off.
    pub coords_skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// Smallest denominator of the per-coordinate relative error in
/// [`grad_check_params`]. Central differences of a loss of order one carry
/// rounding noise near `1e-11` at the default steps, so gradients below this
/// are held to an absolute bound of `1e-6` times the tolerance instead.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks the gradient of a scalar function of a parameter set, sampling at
/// most `max_coords` coordinates of every listed parameter (all of them when
/// `ids` is empty).
///
/// A coordinate is compared as `|a - n| / max(|a| + |n|, GRAD_FLOOR)`.
/// Coordinates whose perturbation changes the active set of any rectifier
/// are skipped: the function is not differentiable between the two probes.
pub fn grad_check_params<T, F>(
    f: F,
    params: &mut ParamSet<T>,
    ids: &[ParamId],
    max_coords: usize,
    step: T,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    let eval = |p: &ParamSet<T>| -> Result<(T, u64)> {
        let mut tape = Tape::new();
        let y = f(&mut tape, p)?;
        if tape.value(y).len() != 1 {
            return Err(Error::contract("grad_check function must be scalar-valued"));
        }
        Ok((tape.scalar(y), tape.kink_signature()))
    };
    let ids: Vec<ParamId> = if ids.is_empty() {
        params
            .ids()
            .filter(|&id| params.get(id).is_trainable())
            .collect()
    } else {
        ids.to_vec()
    };
    let (analytic, signature): (Vec<Vec<T>>, u64) = {
        let mut tape = Tape::new();
        let y = f(&mut tape, params)?;
        let base = (tape.scalar(y), tape.kink_signature());
        if base != eval(params)? {
            return Err(Error::contract(
                "grad_check function is not deterministic: re-evaluation differs",
            ));
        }
        let g = tape.backward(y)?;
        let grads = ids
            .iter()
            .map(|&id| {
                g.param(id)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); params.get(id).len()])
            })
            .collect();
        (grads, base.1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two = T::of(2.0);
    let mut out = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let max_abs = grad.iter().fold(T::zero(), |m, g| m.max(g.abs()));
        let mut worst = T::zero();
        let mut skipped = 0;
        for &c in &coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + step;
            let (fp, sp) = eval(params)?;
            params.get_mut(id).data_mut()[c] = orig - step;
            let (fm, sm) = eval(params)?;
            params.get_mut(id).data_mut()[c] = orig;
            if sp != signature || sm != signature {
                skipped += 1;
                continue;
            }
            let (a, n) = (grad[c], (fp - fm) / (two * step));
            worst = worst.max((a - n).abs() / T::of(GRAD_FLOOR).max(a.abs() + n.abs()));
        }
        out.push(ParamCheck {
            name: params.name(id).to_string(),
            coords_checked: coords.len() - skipped,
            coords_skipped: skipped,
            max_rel_error: worst.as_f64(),
            max_abs_grad: max_abs.as_f64(),
        });
    }
    Ok(out)
}
