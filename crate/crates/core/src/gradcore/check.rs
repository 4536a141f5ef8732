//! Central finite-difference verification of tape gradients.

use super::{GradError, NodeId, Tape, Tensor};

/// Compares tape gradients of a scalar function against central finite
/// differences, over several inputs at once.
///
/// `build` receives a fresh tape and one trainable leaf per entry of
/// `points` and must return the scalar output node. Returns the maximum over
/// all coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check_many<F>(build: F, points: &[Tensor], step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, GradError>,
{
    let eval = |pts: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId), GradError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = eval(points)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = points.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(points[k].shape()));
        for c in 0..points[k].len() {
            let orig = points[k].data()[c];
            probe[k].data_mut()[c] = orig + step;
            let (t_plus, _, o_plus) = eval(&probe)?;
            probe[k].data_mut()[c] = orig - step;
            let (t_minus, _, o_minus) = eval(&probe)?;
            probe[k].data_mut()[c] = orig;

            let numeric = (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * step);
            let err = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            // NaN must not be swallowed by f64::max
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, GradError>,
{
    grad_check_many(|t, ids| build(t, ids[0]), std::slice::from_ref(point), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn square_at_three() {
        let err = grad_check(|t, x| t.mul(x, x), &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn hard_max_is_reported() {
        // a near-tie that the finite-difference step straddles
        let x = Tensor::matrix(2, 1, vec![1.0, 1.0 + 1e-7]).unwrap();
        let err = grad_check(
            |t, x| {
                let m = t.max_pool_groups(x, 2)?;
                t.sum(m)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1, "err = {err}");
    }

    #[test]
    fn two_layer_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 5, 3, -1.0, 1.0);
        let w1 = random(&mut rng, 3, 4, -1.0, 1.0);
        let b1 = random(&mut rng, 1, 4, -1.0, 1.0);
        let w2 = random(&mut rng, 4, 2, -1.0, 1.0);
        let err = grad_check_many(
            |t, p| {
                let xi = t.constant(x.clone());
                let h = t.matmul(xi, p[0])?;
                let h = t.add_row(h, p[1])?;
                let h = t.leaky_relu(h, 0.2)?;
                let o = t.matmul(h, p[2])?;
                let o = t.softmax_rows(o)?;
                let o = t.log(o)?;
                t.mean(o)
            },
            &[w1, b1, w2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    type Builder = fn(&mut Tape, &[NodeId]) -> Result<NodeId, GradError>;

    /// One scalarizing weight per op so every output coordinate is probed.
    fn weighted(t: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId, GradError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = t.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let w = t.constant(w);
        let p = t.mul(out, w)?;
        t.sum(p)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let cases: Vec<(&str, Builder, Vec<(usize, usize, f64, f64)>)> = vec![
            ("add", |t, p| t.add(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)]),
            ("sub", |t, p| t.sub(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)]),
            ("mul", |t, p| t.mul(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (3, 4, -1.0, 1.0)]),
            ("div", |t, p| t.div(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (3, 4, 0.5, 2.0)]),
            ("scale", |t, p| t.scale(p[0], -1.7), vec![(3, 4, -1.0, 1.0)]),
            ("exp", |t, p| t.exp(p[0]), vec![(3, 4, -2.0, 2.0)]),
            ("log", |t, p| t.log(p[0]), vec![(3, 4, 0.2, 3.0)]),
            ("matmul", |t, p| t.matmul(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (4, 2, -1.0, 1.0)]),
            ("transpose", |t, p| t.transpose(p[0]), vec![(3, 4, -1.0, 1.0)]),
            ("row_sum", |t, p| t.row_sum(p[0]), vec![(3, 4, -1.0, 1.0)]),
            ("col_sum", |t, p| t.col_sum(p[0]), vec![(3, 4, -1.0, 1.0)]),
            ("div_rows", |t, p| t.div_rows(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (3, 1, 0.5, 2.0)]),
            ("div_cols", |t, p| t.div_cols(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (1, 4, 0.5, 2.0)]),
            ("add_row", |t, p| t.add_row(p[0], p[1]), vec![(3, 4, -1.0, 1.0), (1, 4, -1.0, 1.0)]),
            ("softmax_rows", |t, p| t.softmax_rows(p[0]), vec![(3, 4, -2.0, 2.0)]),
            ("log_normalize_rows", |t, p| t.log_normalize_rows(p[0]), vec![(3, 4, -2.0, 2.0)]),
            ("log_normalize_cols", |t, p| t.log_normalize_cols(p[0]), vec![(3, 4, -2.0, 2.0)]),
            ("leaky_relu", |t, p| t.leaky_relu(p[0], 0.2), vec![(3, 4, -1.0, 1.0)]),
            ("max_pool", |t, p| t.max_pool_groups(p[0], 3), vec![(6, 2, -1.0, 1.0)]),
            ("gather", |t, p| t.gather_rows(p[0], &[2, 0, 2, 1]), vec![(3, 4, -1.0, 1.0)]),
            ("concat_cols", |t, p| t.concat_cols(&[p[0], p[1]]), vec![(3, 2, -1.0, 1.0), (3, 3, -1.0, 1.0)]),
            ("sum", |t, p| t.sum(p[0]), vec![(3, 4, -1.0, 1.0)]),
            ("mean", |t, p| t.mean(p[0]), vec![(3, 4, -1.0, 1.0)]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, op, shapes) in &cases {
            for trial in 0..100u64 {
                let pts: Vec<Tensor> =
                    shapes.iter().map(|&(r, c, lo, hi)| random(&mut rng, r, c, lo, hi)).collect();
                let err = grad_check_many(
                    |t, p| {
                        let o = op(t, p)?;
                        weighted(t, o, trial)
                    },
                    &pts,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{name} trial {trial}: err = {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 4, -1.0, 1.0);
        let build = |t: &mut Tape, x: NodeId, which: u8| -> Result<NodeId, GradError> {
            let e = t.exp(x)?;
            let l1 = t.sum(e)?;
            let s = t.softmax_rows(x)?;
            let l2 = t.mean(s)?;
            let l2 = t.scale(l2, 3.0)?;
            match which {
                1 => Ok(l1),
                2 => Ok(l2),
                _ => t.add(l1, l2),
            }
        };
        let grad = |which| {
            let mut t = Tape::new();
            let id = t.param(x.clone());
            let l = build(&mut t, id, which).unwrap();
            t.backward(l).unwrap().get(id).unwrap().clone()
        };
        let (g1, g2, g12) = (grad(1), grad(2), grad(3));
        for k in 0..g12.len() {
            assert!((g12.data()[k] - g1.data()[k] - g2.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 6, 6, -3.0, 3.0);
        let run = || {
            let mut t = Tape::new();
            let id = t.param(x.clone());
            let z = t.log_normalize_rows(id).unwrap();
            let z = t.log_normalize_cols(z).unwrap();
            let p = t.exp(z).unwrap();
            t.value(p).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
