//! Central finite-difference verification of recorded gradients.
//!
//! Always runs at f64: finite differences at f32 lose too many digits to
//! separate a wrong backward rule from rounding noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A differentiable scalar-valued function of several tensors, rebuilt on a
/// fresh tape for every evaluation.
pub trait ScalarFn {
    fn eval(&self, tape: &Tape<f64>, inputs: &[Var<f64>]) -> Result<Var<f64>>;
}

impl<F> ScalarFn for F
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    fn eval(&self, tape: &Tape<f64>, inputs: &[Var<f64>]) -> Result<Var<f64>> {
        self(tape, inputs)
    }
}

fn eval_value(f: &dyn ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    out.value().item()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn check_elements(
    f: &dyn ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    select: impl Fn(usize, usize) -> bool,
) -> Result<f64> {
    // Analytic gradients once.
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check function must produce a scalar, got shape {:?}",
            out.shape()
        )));
    }
    tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut max_err = 0.0f64;
    for (ti, base) in inputs.iter().enumerate() {
        for ei in 0..base.numel() {
            if !select(ti, ei) {
                continue;
            }
            let perturb = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[ei] += delta;
                let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                probe[ti] = Tensor::new(base.shape(), data)?;
                eval_value(f, &probe)
            };
            let numeric = (perturb(eps)? - perturb(-eps)?) / (2.0 * eps);
            let err = relative_error(analytic[ti].data()[ei], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Max relative error between recorded gradients and central differences,
/// over every element of every input.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    check_elements(&f, inputs, eps, |_, _| true)
}

/// Like [`grad_check`] but probing at most `max_per_input` randomly chosen
/// elements per input tensor; used for composite units where a full scan
/// would take hours.
pub fn grad_check_sampled(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= max_per_input {
                (0..n).collect()
            } else {
                let mut chosen: Vec<usize> = (0..max_per_input)
                    .map(|_| rng.gen_range(0..n))
                    .collect();
                chosen.sort_unstable();
                chosen.dedup();
                chosen
            }
        })
        .collect();
    check_elements(&f, inputs, eps, |ti, ei| picks[ti].binary_search(&ei).is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::concat;

    fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_sum_has_zero_error() {
        // Zero base input keeps every finite-difference evaluation exact, so
        // the reported error is 0.0 with no tolerance at all.
        let f = |_: &Tape<f64>, v: &[Var<f64>]| v[0].sum_all();
        let err = grad_check(f, &[Tensor::zeros(&[3, 3])], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn elementwise_chain_passes() {
        let f = |_: &Tape<f64>, v: &[Var<f64>]| {
            v[0].mish().gelu().sigmoid().mul(&v[0].tanh())?.sum_all()
        };
        for seed in [1u64, 2, 3] {
            let err = grad_check(f, &[randt(&[2, 5], seed)], 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn softmax_matmul_chain_passes() {
        let f = |_: &Tape<f64>, v: &[Var<f64>]| {
            let att = v[0].matmul(&v[1])?.softmax(1)?;
            att.matmul(&v[1])?.mul(&att)?.sum_all()
        };
        let err = grad_check(f, &[randt(&[3, 4], 10), randt(&[4, 4], 11)], 1e-5).unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn conv_ops_pass_on_multiple_shapes() {
        for (seed, (h, w)) in [(1u64, (5usize, 5usize)), (2, (6, 4)), (3, (7, 7))] {
            let f = |_: &Tape<f64>, v: &[Var<f64>]| {
                let y = v[0].conv2d(&v[1], Some(&v[2]), 2, 1, 1)?;
                let z = y.conv_transpose2d(&v[3], None, 2, 1)?;
                z.mish().sum_all()
            };
            let inputs = [
                randt(&[2, 3, h, w], seed),
                randt(&[4, 3, 3, 3], seed + 100),
                randt(&[4], seed + 200),
                randt(&[4, 2, 3, 3], seed + 300),
            ];
            let err = grad_check(f, &inputs, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn dilated_conv_and_dwconv_pass() {
        let f = |_: &Tape<f64>, v: &[Var<f64>]| {
            let y = v[0].conv2d(&v[1], None, 1, 2, 2)?;
            let z = y.dwconv2d(&v[2], Some(&v[3]), 1, 1)?;
            z.sum_all()
        };
        let inputs = [
            randt(&[1, 2, 8, 8], 5),
            randt(&[3, 2, 3, 3], 6),
            randt(&[3, 1, 3, 3], 7),
            randt(&[3], 8),
        ];
        let err = grad_check(f, &inputs, 1e-5).unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn reductions_shapes_and_pool_pass() {
        let f = |_: &Tape<f64>, v: &[Var<f64>]| {
            let p = v[0].maxpool2d(2, 2, 0)?;
            let m = p.mean_axes(&[0, 2, 3], true)?;
            let d = p.sub(&m)?.mul(&p.sub(&m)?)?;
            let c = concat(&[&d, &p], 1)?;
            c.permute(&[0, 2, 3, 1])?
                .reshape(&[c.numel()])?
                .clamp_min(-0.5)
                .sum_all()
        };
        for seed in [21u64, 22, 23] {
            let err = grad_check(f, &[randt(&[2, 3, 4, 4], seed)], 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn sampled_check_matches_full_on_small_input() {
        let f = |_: &Tape<f64>, v: &[Var<f64>]| v[0].mish().sum_all();
        let x = randt(&[4], 9);
        let full = grad_check(f, &[x.clone()], 1e-5).unwrap();
        let sampled = grad_check_sampled(f, &[x], 1e-5, 100, 0).unwrap();
        assert_eq!(full, sampled);
    }
}
