use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Which coordinates [`grad_check`] perturbs.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per input tensor, chosen with
    /// `seed`. `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn exhaustive(epsilon: f64) -> Self {
        GradCheckOptions {
            epsilon,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }

    pub fn sampled(epsilon: f64, per_tensor: usize, seed: u64) -> Self {
        GradCheckOptions {
            epsilon,
            max_coords_per_tensor: Some(per_tensor),
            seed,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.frozen(t)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(g.shape(out).to_vec()));
    }
    if !v[0].is_finite() {
        g.check_finite()?;
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences and returns the largest relative error
/// `|a - n| / max(1e-8, |a| + |n|)` over the checked coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], options: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eps = options.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let owned: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = owned.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        g.check_finite()?;
        g.backward(out)?;
        g.into_grads(&vars)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut worst: f64 = 0.0;
    let mut probe = owned.clone();
    for (t, grads) in analytic.iter().enumerate() {
        let n = probe[t].len();
        let coords: Vec<usize> = match options.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = probe[t].values()[k];
            probe[t].values_mut()[k] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[t].values_mut()[k] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[t].values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[k];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite {
                    index: t,
                    op: format!("gradient coordinate {k}"),
                });
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn square_is_exact() {
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[Tensor::scalar(3.0)],
            GradCheckOptions::exhaustive(1e-5),
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let r = grad_check(
            |g, v| Ok(g.sum(v[0])),
            &[Tensor::scalar(1.0)],
            GradCheckOptions::exhaustive(0.0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn conv_relu_dense_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![
            random(&[2, 6, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[4, 3 * 3 * 3], &mut rng),
            random(&[4], &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let c = g.conv2d(v[0], v[1], 2, Padding::Same)?;
                let c = g.bias_add(c, v[2])?;
                let r = g.relu(c);
                let f = g.flatten(r)?;
                let d = g.dense(f, v[3], v[4])?;
                let s = g.sigmoid(d);
                Ok(g.sum(s))
            },
            &inputs,
            GradCheckOptions::exhaustive(1e-5),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        type Case = (
            Vec<Vec<usize>>,
            Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>,
        );
        let cases: Vec<Case> = vec![
            (
                vec![vec![2, 3, 4]],
                Box::new(|g, v| {
                    let s = g.softmax(v[0], 1)?;
                    let w = g.square(s);
                    Ok(g.sum(w))
                }),
            ),
            (
                vec![vec![5, 3]],
                Box::new(|g, v| {
                    let s = g.squash(v[0])?;
                    let n = g.norms(s)?;
                    let q = g.square(n);
                    Ok(g.sum(q))
                }),
            ),
            (
                vec![vec![4, 2], vec![4, 3, 5, 2]],
                Box::new(|g, v| {
                    let p = g.capsule_predict(v[0], v[1])?;
                    let s = g.route_sum(
                        p,
                        &[0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2, 0.3, 0.3, 0.4],
                    )?;
                    let q = g.squash(s)?;
                    let t = g.square(q);
                    Ok(g.sum(t))
                }),
            ),
            (
                vec![vec![2, 4, 6]],
                Box::new(|g, v| {
                    let p = g.max_pool(v[0], 2)?;
                    let u = g.upsample(p, 3)?;
                    let q = g.square(u);
                    Ok(g.sum(q))
                }),
            ),
            (
                vec![vec![3], vec![3]],
                Box::new(|g, v| {
                    let a = g.mul(v[0], v[1])?;
                    let b = g.sub(a, v[1])?;
                    let c = g.affine(b, 1.5, 4.0);
                    let d = g.ln(c);
                    let e = g.concat(&[d, v[0]])?;
                    let f = g.select(e, 1)?;
                    let s = g.sum(e);
                    g.add(f, s)
                }),
            ),
        ];
        for (i, (shapes, f)) in cases.iter().enumerate() {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err =
                grad_check(|g, v| f(g, v), &inputs, GradCheckOptions::exhaustive(1e-5)).unwrap();
            assert!(err < 1e-4, "case {i}: {err}");
        }
    }
}
