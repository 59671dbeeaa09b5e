//! Central finite-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// `f` builds the function on a fresh tape from the (tracked) input node and
/// returns the scalar output node. The result is
/// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(point.clone(), false);
        let out = f(&mut tape, input)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Contract("function output is not scalar".into()));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} at perturbed point")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let x = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.25, 7.0]).unwrap();
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_pick_first() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.softmax_rows(x)?;
                let pick = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0])?);
                let p = t.mul(s, pick)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            finite_diff_check(|t, x| Ok(t.sum(x)), &x, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_value_reported() {
        let x = Tensor::scalar(1.0);
        let r = finite_diff_check(
            |t, x| {
                let big = t.scale(x, f64::MAX);
                let bigger = t.scale(big, 10.0);
                Ok(t.sum(bigger))
            },
            &x,
            1e-3,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    /// Every differentiable op against central differences, many seeds.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let w = random(&[3, 4], &mut rng);
            let w2 = random(&[2, 4], &mut rng);
            let gamma = random(&[4], &mut rng);
            let beta = random(&[4], &mut rng);
            let bias = random(&[4], &mut rng);
            let x = random(&[2, 3], &mut rng);
            let f = |t: &mut Tape<'_>, x: NodeId| -> Result<NodeId> {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w)?; // 2x4
                let b = t.constant(bias.clone());
                let h = t.add_row(h, b)?;
                let g = t.constant(gamma.clone());
                let be = t.constant(beta.clone());
                let h = t.layer_norm(h, g, be)?;
                let h = t.gelu(h);
                let w2 = t.constant(w2.clone());
                let z = t.matmul_nt(h, w2)?; // 2x2
                let z = t.scale(z, 0.7);
                let z = t.causal_mask(z)?;
                let a = t.softmax_rows(z)?;
                let left = t.slice_cols(h, 0, 2)?;
                let right = t.slice_cols(h, 2, 2)?;
                let mixed = t.matmul(a, left)?;
                let cat = t.concat_cols(&[mixed, right])?;
                let sq = t.mul(cat, cat)?;
                let both = t.add(sq, cat)?;
                let ce = t.cross_entropy(both, &[(0, 1), (1, 3)])?;
                let s = t.sum(both);
                let s = t.scale(s, 0.1);
                t.add(ce, s)
            };
            let err = finite_diff_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gather_gradient_scatters() {
        let mut rng = Rng::new(9);
        let table = random(&[5, 3], &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let g = t.gather_rows(x, &[1, 3, 1])?;
                let sq = t.mul(g, g)?;
                Ok(t.sum(sq))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
