use crate::scalar::Scalar;

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradcheckReport<T> {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: T,
    /// coordinate attaining the maximum
    pub worst_index: usize,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
pub fn gradcheck<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<GradcheckReport<T>, AutodiffError>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, AutodiffError>,
{
    let tape = Tape::new();
    let xv = tape.param(x);
    let y = f(&tape, xv)?;
    let yv = y.item();
    if !yv.is_finite() {
        return Err(AutodiffError::NonFinite {
            index: 0,
            value: yv.to_f64_lossy(),
        });
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv).into_data();

    let eval = |t: &Tensor<T>| -> Result<T, AutodiffError> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        Ok(f(&tape, v)?.item())
    };

    let two_h = h + h;
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let d = (fp - fm) / two_h;
        if !d.is_finite() {
            return Err(AutodiffError::NonFinite {
                index: i,
                value: d.to_f64_lossy(),
            });
        }
        if !analytic[i].is_finite() {
            return Err(AutodiffError::NonFinite {
                index: i,
                value: analytic[i].to_f64_lossy(),
            });
        }
        numeric.push(d);
    }

    let mut max_rel_error = T::zero();
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = (a - n).abs() / n.abs().max(T::one());
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_self_passes() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let r = gradcheck(|_, v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let r = gradcheck(|t, _| Ok(t.scalar(4.0)), &x, 1e-5).unwrap();
        assert!(r.analytic.iter().all(|&g| g == 0.0));
        assert!(r.numeric.iter().all(|&g| g == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let err = gradcheck(|_, v| Ok(v.log().sum()), &x, 1e-5).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
    }

    #[test]
    fn softmax_cross_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec((0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
        let r = gradcheck(
            |t, v| {
                let target = t.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0]));
                Ok(v.softmax().log().mul(target)?.sum().neg())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4);
    }
}
