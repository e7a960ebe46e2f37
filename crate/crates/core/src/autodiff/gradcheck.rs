use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Central-difference gradient estimate of a scalar function of `params`.
///
/// Each coordinate is perturbed by `±eps`; the quotient uses the step that was
/// actually representable in `T`, and the difference is taken in `f64`.
pub fn finite_diff_grad<T, F>(mut f: F, params: &[Tensor<T>], eps: T) -> Result<Vec<Tensor<T>>>
where
    T: Element,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    if eps.is_nan() || eps <= T::zero() {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![T::zero(); params[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let x = params[t].data()[i];
            let (hi, lo) = (x + eps, x - eps);
            work[t].data_mut()[i] = hi;
            let f_hi = f(&work)?.as_f64();
            work[t].data_mut()[i] = lo;
            let f_lo = f(&work)?.as_f64();
            work[t].data_mut()[i] = x;
            *gi = T::of_f64((f_hi - f_lo) / (hi.as_f64() - lo.as_f64()));
        }
        out.push(Tensor::from_parts(params[t].shape().to_vec(), g));
    }
    Ok(out)
}
