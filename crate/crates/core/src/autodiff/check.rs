//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which coordinates of each parameter tensor to probe.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProbeSelection {
    /// Upper bound on probed coordinates per tensor; `None` probes all.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

fn evaluate<F>(loss: &F, params: &[Tensor<f64>]) -> Result<(f64, Tape<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    Ok((value, tape, out, vars))
}

/// Compares `backward` against central differences over every coordinate.
///
/// Returns `max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<F>(loss: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(loss, params, epsilon, ProbeSelection::default())
}

/// Like [`finite_diff_check`] but probing a seeded subset of coordinates,
/// which keeps whole-network checks tractable.
pub fn finite_diff_check_with<F>(
    loss: F,
    params: &[Tensor<f64>],
    epsilon: f64,
    selection: ProbeSelection,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    let (_, tape, out, vars) = evaluate(&loss, params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(selection.seed);
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = match selection.max_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let base = param.data()[j];
            probe[pi].data_mut()[j] = base + epsilon;
            let plus = evaluate(&loss, &probe)?.0;
            probe[pi].data_mut()[j] = base - epsilon;
            let minus = evaluate(&loss, &probe)?.0;
            probe[pi].data_mut()[j] = base;

            let fd = (plus - minus) / (2.0 * epsilon);
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let p = vec![Tensor::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap()];
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let scaled = tape.scale(sq, 1.5);
                Ok(tape.sum(scaled))
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu evaluated exactly at its kink: the one-sided AD value and the
        // symmetric difference disagree.
        let p = vec![Tensor::from_f64(vec![1], &[0.0]).unwrap()];
        let err = finite_diff_check(
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let p = vec![Tensor::from_f64(vec![1], &[0.0]).unwrap()];
        assert!(finite_diff_check(|tape, v| Ok(tape.sum(v[0])), &p, 0.0).is_err());
    }
}
