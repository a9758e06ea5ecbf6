//! Central finite-difference checks of tape gradients (64-bit only).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error `|analytic - numeric| / max(1, |numeric|)` per input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape's gradients of `f(inputs)` against central differences
/// with step `step`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[i].shape())?;
                &zeros
            }
        };
        let mut worst = 0.0f64;
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            if !rel.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            worst = worst.max(rel);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheck { max_rel_error })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::IGNORE_INDEX;

    const TOL: f64 = 1e-4;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_sound<F>(inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(inputs, DEFAULT_STEP, f).unwrap();
        assert!(report.worst() < TOL, "{:?}", report.max_rel_error);
    }

    #[test]
    fn square_sum_has_gradient_six() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [
            random(&[4, 3], &mut rng),
            random(&[3, 2], &mut rng),
            random(&[2, 2], &mut rng),
        ];
        assert_sound(&inputs, |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let abc = t.matmul(ab, v[2])?;
            let sq = t.mul(abc, abc)?;
            t.sum(sq)
        });
    }

    #[test]
    fn elementwise_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            random(&[3, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[3, 4], &mut rng),
        ];
        assert_sound(&inputs, |t, v| {
            let a = t.add_bias(v[0], v[1])?;
            let b = t.gelu(a)?;
            let c = t.tanh(b)?;
            let d = t.mul(c, v[2])?;
            let e = t.add(d, v[0])?;
            let f = t.scale(e, -1.7)?;
            let tr = t.transpose(f)?;
            let sq = t.mul(tr, tr)?;
            t.sum(sq)
        });
    }

    #[test]
    fn layer_norm_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random(&[5, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
            random(&[4, 6], &mut rng),
        ];
        assert_sound(&inputs, |t, v| {
            let rows = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            let x = t.mul(rows, v[3])?;
            let y = t.layer_norm(x, v[1], v[2], 1e-12)?;
            let w = t.mul(y, v[3])?;
            t.sum(w)
        });
    }

    #[test]
    fn attention_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            random(&[5, 4], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[5, 4], &mut rng),
        ];
        assert_sound(&inputs, |t, v| {
            let o = t.attention(v[0], v[1], v[2], &[true, false, true, true, false], 2)?;
            let w = t.mul(o, v[3])?;
            t.sum(w)
        });
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&[4, 3], &mut rng), random(&[2, 3], &mut rng)];
        assert_sound(&inputs, |t, v| {
            let ce = t.cross_entropy(v[0], &[2, IGNORE_INDEX, 0, 1], IGNORE_INDEX)?;
            let bce = t.bce_with_logits(v[1], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;
            let mse = t.mse(v[1], &[0.3, -0.2, 0.9, 0.0, 1.0, -1.0])?;
            let s = t.add(ce, bce)?;
            t.add(s, mse)
        });
    }

    #[test]
    fn dropout_gradients_use_fixed_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[3, 3], &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(x.clone()).unwrap();
        let mut mask_rng = ChaCha8Rng::seed_from_u64(9);
        let d = tape.dropout(v, 0.5, &mut mask_rng).unwrap();
        let loss = tape.sum(d).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(v).unwrap();
        for (gi, yi) in g.data().iter().zip(tape.value(d).data()) {
            assert!(*gi == 0.0 || *gi == 2.0);
            assert_eq!(*gi == 0.0, *yi == 0.0);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[2, 2]).unwrap()).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = tape.param(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let bias = tape.param(Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add_bias(a, bias).is_err());
        let c = tape.transpose(b).unwrap();
        assert!(tape.add(a, c).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.param(Tensor::scalar(f64::NAN)).is_err());
        let big = tape.param(Tensor::scalar(1e200)).unwrap();
        assert!(tape.mul(big, big).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let p = tape.param(Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(c, p).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
