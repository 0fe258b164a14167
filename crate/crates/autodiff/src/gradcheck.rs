//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Largest elementwise absolute difference.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compare the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One row of [`op_suite`].
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub op: &'static str,
    pub shape: String,
    pub result: GradCheck,
}

/// Finite-difference step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// Gradient checks for every differentiable op on three randomised shapes
/// each. Non-scalar outputs are reduced with a fixed random weighting.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::ops::{NormMode, Padding};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Values bounded away from zero so kinks (relu, max) are not straddled.
    let mut rand_t = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
    };
    let mut cases = Vec::new();
    let mut run = |op: &'static str, shape: String, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let result = check_gradients(&inputs, SUITE_STEP, f)?;
        cases.push(SuiteCase { op, shape, result });
        Ok(())
    };

    for &(n, c, l, o, k, stride, pad) in &[
        (2usize, 3usize, 16usize, 4usize, 3usize, 1usize, Padding::Same),
        (1, 2, 9, 3, 4, 2, Padding::Same),
        (3, 1, 12, 2, 5, 1, Padding::Valid),
    ] {
        let (_, _, out_len) = pad.resolve(l, k, stride)?;
        let proj = rand_t(&[n, o, out_len]);
        run(
            "conv1d",
            format!("x=({n},{c},{l}) w=({o},{c},{k}) stride={stride} {pad:?}"),
            vec![rand_t(&[n, c, l]), rand_t(&[o, c, k]), rand_t(&[o])],
            &|g, v| {
                let y = g.conv1d(v[0], v[1], v[2], stride, pad)?;
                g.weighted_sum(y, &proj)
            },
        )?;
    }

    for &(n, c, l) in &[(2usize, 3usize, 5usize), (4, 2, 3), (3, 1, 7)] {
        let proj = rand_t(&[n, c, l]);
        run("batchnorm1d", format!("train ({n},{c},{l})"), vec![rand_t(&[n, c, l]), rand_t(&[c]), rand_t(&[c])], &|g, v| {
            let (y, _) = g.batch_norm1d(v[0], v[1], v[2], NormMode::Train, 1e-5)?;
            g.weighted_sum(y, &proj)
        })?;
        let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
        run("batchnorm1d", format!("eval ({n},{c},{l})"), vec![rand_t(&[n, c, l]), rand_t(&[c]), rand_t(&[c])], &|g, v| {
            let mode = NormMode::Eval { running_mean: &rm, running_var: &rv };
            let (y, _) = g.batch_norm1d(v[0], v[1], v[2], mode, 1e-5)?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for shape in [vec![7usize], vec![2, 3, 4], vec![5, 6]] {
        let proj = rand_t(&shape);
        run("relu", format!("{shape:?}"), vec![rand_t(&shape)], &|g, v| {
            let y = g.relu(v[0]);
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, c, l, k, s, p) in &[(2usize, 2usize, 9usize, 3usize, 2usize, 1usize), (1, 3, 8, 2, 2, 0), (2, 1, 10, 3, 1, 1)] {
        let out_len = (l + 2 * p - k) / s + 1;
        let proj = rand_t(&[n, c, out_len]);
        run("max_pool1d", format!("({n},{c},{l}) k={k} s={s} p={p}"), vec![rand_t(&[n, c, l])], &|g, v| {
            let y = g.max_pool1d(v[0], k, s, p)?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, c, l) in &[(2usize, 3usize, 4usize), (1, 5, 7), (3, 2, 1)] {
        let proj = rand_t(&[n, c]);
        run("global_avg_pool1d", format!("({n},{c},{l})"), vec![rand_t(&[n, c, l])], &|g, v| {
            let y = g.global_avg_pool1d(v[0])?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, i, o) in &[(3usize, 4usize, 2usize), (1, 6, 5), (4, 1, 3)] {
        let proj = rand_t(&[n, o]);
        run("dense", format!("x=({n},{i}) w=({o},{i})"), vec![rand_t(&[n, i]), rand_t(&[o, i]), rand_t(&[o])], &|g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, t, d, h) in &[(2usize, 4usize, 3usize, 5usize), (1, 1, 2, 3), (3, 3, 4, 2)] {
        let proj = rand_t(&[n, h]);
        run(
            "lstm",
            format!("x=({n},{t},{d}) H={h}"),
            vec![rand_t(&[n, t, d]), rand_t(&[4 * h, d]), rand_t(&[4 * h, h]), rand_t(&[4 * h])],
            &|g, v| {
                let y = g.lstm(v[0], v[1], v[2], v[3])?;
                g.weighted_sum(y, &proj)
            },
        )?;
    }

    for (shape, train) in [(vec![3usize, 4usize], false), (vec![2, 3, 5], false), (vec![4, 6], true)] {
        let proj = rand_t(&shape);
        let label = if train { "train, fixed mask" } else { "eval" };
        run("dropout", format!("{shape:?} {label}"), vec![rand_t(&shape)], &|g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(v[0], 0.3, train, &mut mask_rng)?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, k) in &[(2usize, 3usize), (4, 5), (1, 2)] {
        let proj = rand_t(&[n, k]);
        run("softmax", format!("({n},{k})"), vec![rand_t(&[n, k])], &|g, v| {
            let y = g.softmax(v[0])?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for &(n, k) in &[(3usize, 5usize), (1, 2), (6, 4)] {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % k).collect();
        run("cross_entropy", format!("({n},{k})"), vec![rand_t(&[n, k])], &|g, v| g.cross_entropy(v[0], &labels))?;
    }

    for (n, e, labels) in [(6usize, 4usize, vec![0usize, 0, 1, 1, 2, 2]), (4, 3, vec![0, 1, 0, 1]), (5, 2, vec![1, 1, 1, 0, 2])] {
        run("triplet_margin_loss", format!("({n},{e}) margin=1"), vec![rand_t(&[n, e])], &|g, v| {
            g.triplet_margin_loss(v[0], &labels, 1.0)
        })?;
    }

    for shape in [[1usize, 3, 5], [2, 4, 2], [3, 1, 6]] {
        let proj = rand_t(&[shape[0], shape[2], shape[1]]);
        run("dimension_shuffle", format!("{shape:?}"), vec![rand_t(&shape)], &|g, v| {
            let y = g.dimension_shuffle(v[0])?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for widths in [vec![2usize, 3], vec![1, 1, 4], vec![5]] {
        let n = 2;
        let proj = rand_t(&[n, widths.iter().sum()]);
        let inputs = widths.iter().map(|&w| rand_t(&[n, w])).collect();
        run("concat", format!("widths {widths:?}"), inputs, &|g, v| {
            let y = g.concat(v)?;
            g.weighted_sum(y, &proj)
        })?;
    }

    for shape in [vec![3usize], vec![2, 2], vec![1, 2, 3]] {
        let proj = rand_t(&shape);
        run("add+scale", format!("{shape:?}"), vec![rand_t(&shape), rand_t(&shape)], &|g, v| {
            let s = g.scale(v[1], -2.5);
            let y = g.add(v[0], s)?;
            g.weighted_sum(y, &proj)
        })?;
    }

    Ok(cases)
}
