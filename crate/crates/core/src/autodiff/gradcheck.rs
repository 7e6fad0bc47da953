use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst-case mismatch between reverse-mode and central-difference
/// gradients of a scalar function, over every coordinate of `x`.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    gradcheck_coords(f, x, eps, &coords)
}

/// [`gradcheck`] restricted to the listed coordinates.
pub fn gradcheck_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let out = f(&tape, v)?;
        let grads = tape.backward(out)?;
        grads.wrt(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(f(&tape, v)?.item()? as f64)
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let base = x.data()[i];
        let hi = (base as f64 + eps) as f32;
        let lo = (base as f64 - eps) as f32;
        let mut xp = x.clone();
        xp.data_mut()[i] = hi;
        let mut xm = x.clone();
        xm.data_mut()[i] = lo;
        // divide by the step actually taken after rounding to f32
        let numeric = (eval(xp)? - eval(xm)?) / (hi as f64 - lo as f64);
        let err = (analytic[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
