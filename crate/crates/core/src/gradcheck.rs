//! Central finite-difference checks for analytic gradients.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("step size {0} outside [1e-6, 1e-3]")]
    Step(f64),
    #[error("analytic gradient has {analytic} entries but there are {params} parameters")]
    Length { analytic: usize, params: usize },
    #[error("function is not deterministic: {first} then {second} for identical inputs")]
    NonDeterministic { first: f64, second: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Central differences with step `h` at `params`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, params: &[f64], h: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            x[i] = params[i] + h;
            let plus = f(&x);
            x[i] = params[i] - h;
            let minus = f(&x);
            x[i] = params[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(GradCheckError::Step(h));
    }
    if analytic.len() != params.len() {
        return Err(GradCheckError::Length {
            analytic: analytic.len(),
            params: params.len(),
        });
    }
    let first = f(params);
    let second = f(params);
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let numeric = numeric_gradient(&mut f, params, h);
    let (worst_index, max_rel_error) = numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (a - n).abs() / n.abs().max(1.0))
        .map(|e| if e.is_nan() { f64::INFINITY } else { e })
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        coordinates: params.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        assert_eq!(
            grad_check(|x| x[0], &[1.0], &[1.0], 0.1),
            Err(GradCheckError::Step(0.1))
        );
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0.0);
        let res = grad_check(
            |x| {
                calls.set(calls.get() + 1.0);
                x[0] + calls.get()
            },
            &[1.0],
            &[1.0],
            1e-5,
        );
        assert!(matches!(res, Err(GradCheckError::NonDeterministic { .. })));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::row(p[..8].to_vec())).unwrap();
            let b = tape.param(Tensor::row(p[8..].to_vec())).unwrap();
            let c = tape.cosine_similarity(a, b).unwrap();
            let g = tape.backward(c).unwrap();
            let mut grad = g.get(a).unwrap().into_data();
            grad.extend(g.get(b).unwrap().into_data());
            (tape.value(c).item(), grad)
        };
        let (_, analytic) = eval(&params);
        let numeric = numeric_gradient(&mut |p: &[f64]| eval(p).0, &params, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
            assert!(rel <= 1e-6 || (a - n).abs() < 1e-10, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::matrix(2, 4, p[..8].to_vec()).unwrap()).unwrap();
            let w = tape.param(Tensor::matrix(4, 3, p[8..20].to_vec()).unwrap()).unwrap();
            let bias = tape.param(Tensor::row(p[20..23].to_vec())).unwrap();
            let mixw = tape.param(Tensor::matrix(2, 2, vec![p[23], 0.3, -0.4, 0.8]).unwrap()).unwrap();
            let h = tape.matmul(x, w).unwrap();
            let h = tape.add(h, bias).unwrap();
            let h = tape.tanh(h).unwrap();
            let m = tape.causal_mix(mixw, h).unwrap();
            let hn = tape.normalize_rows(m).unwrap();
            let ht = tape.transpose(hn).unwrap();
            let gram = tape.matmul(hn, ht).unwrap();
            let sm = tape.softmax(gram).unwrap();
            let e = tape.exp(sm).unwrap();
            let pooled = tape.mean_pool(e, crate::tensor::Axis::Rows).unwrap();
            let sel = tape.select_rows(h, &[1, 0, 1]).unwrap();
            let cat = tape.concat_rows(&[sel, hn]).unwrap();
            let ce = tape.cross_entropy(cat, &[0, 2, 1, 1, 0]).unwrap();
            let el = tape.element(w, 2, 1).unwrap();
            let prod = tape.mul(pooled, el).unwrap();
            let s = tape.sum(prod).unwrap();
            let d = tape.sub(ce, s).unwrap();
            let root = tape.scale(d, 1.7).unwrap();
            let g = tape.backward(root).unwrap();
            let mut grad = g.get_or_zeros(x).into_data();
            grad.extend(g.get_or_zeros(w).into_data());
            grad.extend(g.get_or_zeros(bias).into_data());
            grad.push(g.get_or_zeros(mixw).data()[0]);
            (tape.value(root).item(), grad)
        };
        let (_, analytic) = eval(&params);
        let r = grad_check(|p| eval(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
