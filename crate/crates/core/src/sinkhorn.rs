//! Gumbel-Sinkhorn relaxation of a similarity matrix to a doubly
//! stochastic matrix.
//!
//! The tape version works in the log domain: `Z = (S + ε)/μ`, then
//! alternating row and column log-normalizations, then `P = exp(Z)`. This is
//! algebraically the same as exponentiating first and dividing by row and
//! column sums ([`sinkhorn_reference`]), but cannot overflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Error, Result};
use crate::gradcore::{NodeId, Tape, Tensor};

/// Clamp applied to uniform draws before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Temperature μ.
    pub mu: f64,
    /// Number of row+column normalization rounds.
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { mu: 0.5, iters: 5 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(config(format!("sinkhorn temperature must be positive, got {}", self.mu)));
        }
        if self.iters == 0 {
            return Err(config("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

/// Standard i.i.d. Gumbel noise together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub values: Tensor,
    pub seed: u64,
}

/// `−log(−log u)` with `u` clamped to `[1e-12, 1 − 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(n: usize, seed: u64) -> GumbelNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_fn(n, n, |_, _| gumbel_from_uniform(rng.random::<f64>()));
    GumbelNoise { values, seed }
}

/// Row-and-column-normalized matrix produced by [`gumbel_sinkhorn`].
///
/// Columns sum to one (the last step is a column normalization); rows
/// approach one as the iteration count grows.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublyStochasticMatrix {
    values: Tensor,
}

impl DoublyStochasticMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn max_row_deviation(&self) -> f64 {
        self.values.row_sums().iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }

    pub fn max_col_deviation(&self) -> f64 {
        self.values.col_sums().iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }
}

/// Nodes recorded by [`gumbel_sinkhorn`].
#[derive(Debug, Clone, Copy)]
pub struct SinkhornNodes {
    /// `log P`.
    pub log_p: NodeId,
    pub p: NodeId,
}

fn check_square(t: &Tensor) -> Result<usize> {
    if t.shape().len() != 2 || t.rows() != t.cols() {
        return Err(Error::Input(format!("expected a square matrix, got {:?}", t.shape())));
    }
    Ok(t.rows())
}

/// Records Gumbel-Sinkhorn on `tape`, starting from the similarity node `s`.
///
/// `noise = None` means ε = 0. Non-finite logits are rejected up front; past
/// that point every row keeps mass of at least `1/N²` after each round, so
/// the log-domain iteration cannot collapse.
pub fn gumbel_sinkhorn(
    tape: &mut Tape,
    s: NodeId,
    noise: Option<&GumbelNoise>,
    cfg: SinkhornConfig,
) -> Result<SinkhornNodes> {
    cfg.validate()?;
    let n = check_square(tape.value(s))?;
    let mut z = match noise {
        Some(eps) => {
            if eps.values.rows() != n || eps.values.cols() != n {
                return Err(Error::Input(format!(
                    "noise is {:?}, similarity is {n}x{n}",
                    eps.values.shape()
                )));
            }
            let e = tape.constant(eps.values.clone());
            tape.add(s, e)?
        }
        None => s,
    };
    z = tape.scale(z, 1.0 / cfg.mu)?;
    if !tape.value(z).all_finite() {
        return Err(Error::Input("similarity matrix has non-finite entries".into()));
    }
    for _ in 0..cfg.iters {
        z = tape.log_normalize_rows(z)?;
        z = tape.log_normalize_cols(z)?;
    }
    let p = tape.exp(z)?;
    Ok(SinkhornNodes { log_p: z, p })
}

/// Untaped [`gumbel_sinkhorn`].
pub fn gumbel_sinkhorn_values(
    s: &Tensor,
    noise: Option<&GumbelNoise>,
    cfg: SinkhornConfig,
) -> Result<DoublyStochasticMatrix> {
    let mut tape = Tape::new();
    let sn = tape.constant(s.clone());
    let nodes = gumbel_sinkhorn(&mut tape, sn, noise, cfg)?;
    Ok(DoublyStochasticMatrix { values: tape.value(nodes.p).clone() })
}

/// Literal exponentiate-then-divide form, one normalization at a time.
///
/// Returns the matrix after every half step (row, column, row, ...), so the
/// last entry is the final result. Overflows for large logits; intended as
/// the reference the log-domain version is checked against.
pub fn sinkhorn_reference(s: &Tensor, noise: Option<&Tensor>, mu: f64, iters: usize) -> Vec<Tensor> {
    let mut m = match noise {
        Some(e) => s.zip_map(e, |a, b| ((a + b) / mu).exp()),
        None => s.map(|a| (a / mu).exp()),
    };
    let mut steps = Vec::with_capacity(2 * iters);
    for _ in 0..iters {
        let rs = m.row_sums();
        m = Tensor::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) / rs[i]);
        steps.push(m.clone());
        let cs = m.col_sums();
        m = Tensor::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) / cs[j]);
        steps.push(m.clone());
    }
    steps
}

/// Same literal form recorded with the tape's exp / sum / divide ops.
pub fn sinkhorn_reference_taped(
    tape: &mut Tape,
    s: NodeId,
    mu: f64,
    iters: usize,
) -> Result<NodeId> {
    let z = tape.scale(s, 1.0 / mu)?;
    let mut m = tape.exp(z)?;
    for _ in 0..iters {
        let r = tape.row_sum(m)?;
        m = tape.div_rows(m, r)?;
        let c = tape.col_sum(m)?;
        m = tape.div_cols(m, c)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;

    fn random(n: usize, seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, n, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn gumbel_is_reproducible() {
        assert_eq!(sample_gumbel(5, 42), sample_gumbel(5, 42));
        assert_ne!(sample_gumbel(5, 42).values, sample_gumbel(5, 43).values);
    }

    #[test]
    fn gumbel_at_inverse_e() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let g = sample_gumbel(1000, 7);
        let mean = g.values.sum() / g.values.len() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn zero_similarity_is_uniform() {
        let p = gumbel_sinkhorn_values(&Tensor::zeros(&[4, 4]), None, SinkhornConfig { mu: 0.7, iters: 1 })
            .unwrap();
        for v in p.values().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_diagonal_gives_identity() {
        let s = Tensor::from_fn(5, 5, |i, j| if i == j { 50.0 } else { 0.0 });
        let p = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu: 0.5, iters: 5 }).unwrap();
        let eye = Tensor::identity(5);
        for (a, b) in p.values().data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_with_many_iterations() {
        let s = random(6, 1, 3.0);
        let p = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu: 0.5, iters: 100 }).unwrap();
        assert!(p.max_row_deviation() < 1e-6);
        assert!(p.max_col_deviation() < 1e-6);
    }

    #[test]
    fn matches_literal_exp_form() {
        for seed in 0..20 {
            let s = random(7, seed, 2.0);
            let eps = sample_gumbel(7, seed + 100);
            let cfg = SinkhornConfig { mu: 0.5, iters: 5 };
            let p = gumbel_sinkhorn_values(&s, Some(&eps), cfg).unwrap();
            let reference = sinkhorn_reference(&s, Some(&eps.values), 0.5, 5);
            let last = reference.last().unwrap();
            for (a, b) in p.values().data().iter().zip(last.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let s = random(8, 3, 2000.0);
        let p = gumbel_sinkhorn_values(&s, None, SinkhornConfig::default()).unwrap();
        assert!(p.values().all_finite());
        assert!(p.max_col_deviation() < 1e-12);
        // the literal form blows up on the same input
        let r = sinkhorn_reference(&s, None, 0.5, 5);
        assert!(!r.last().unwrap().all_finite());
    }

    #[test]
    fn marginals_exact_right_after_each_normalization() {
        for seed in 0..20 {
            let s = random(6, seed, 4.0);
            for (k, m) in sinkhorn_reference(&s, None, 0.5, 5).iter().enumerate() {
                let sums = if k % 2 == 0 { m.row_sums() } else { m.col_sums() };
                for v in sums {
                    assert!((v - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn row_deviation_never_increases() {
        for seed in 0..100 {
            let s = random(8, seed, 3.0);
            let steps = sinkhorn_reference(&s, None, 0.5, 30);
            let mut prev = f64::INFINITY;
            for m in steps.iter().skip(1).step_by(2) {
                let dev = m.row_sums().iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
                assert!(dev <= prev + 1e-12, "seed {seed}: {dev} > {prev}");
                prev = dev;
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let s = random(6, 9, 2.0);
        let shifted = s.map(|v| v + 7.25);
        let cfg = SinkhornConfig::default();
        let a = gumbel_sinkhorn_values(&s, None, cfg).unwrap();
        let b = gumbel_sinkhorn_values(&shifted, None, cfg).unwrap();
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn entries_strictly_positive() {
        let s = random(10, 4, 5.0);
        let p = gumbel_sinkhorn_values(&s, Some(&sample_gumbel(10, 1)), SinkhornConfig::default()).unwrap();
        assert!(p.values().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bad_temperature_is_config_error() {
        let s = Tensor::zeros(&[3, 3]);
        for mu in [0.0, -1.0, f64::NAN] {
            let r = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu, iters: 5 });
            assert!(matches!(r, Err(Error::Config(_))));
        }
        let r = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu: 0.5, iters: 0 });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_similarity_is_rejected() {
        let mut s = Tensor::zeros(&[3, 3]);
        s.set(1, 2, f64::NAN);
        let r = gumbel_sinkhorn_values(&s, None, SinkhornConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn row_mass_stays_bounded_below() {
        // after a full round every row keeps mass >= 1/N^2
        let s = Tensor::from_fn(4, 4, |i, j| if i == 0 { 0.0 } else if j == 0 { 900.0 } else { 300.0 * (i + j) as f64 });
        for iters in 1..6 {
            let p = gumbel_sinkhorn_values(&s, None, SinkhornConfig { mu: 0.5, iters }).unwrap();
            for r in p.values().row_sums() {
                assert!(r >= 1.0 / 16.0 - 1e-12, "{r}");
            }
        }
    }

    #[test]
    fn sum_of_p_gradient_checks() {
        for seed in 0..5 {
            let s = random(6, seed, 2.0);
            let eps = sample_gumbel(6, seed);
            let err = grad_check(
                |t, s| {
                    let nodes = gumbel_sinkhorn(t, s, Some(&eps), SinkhornConfig::default())
                        .map_err(|e| match e {
                            Error::Grad(g) => g,
                            other => panic!("{other}"),
                        })?;
                    let w = t.constant(random(6, 50 + seed, 1.0));
                    let wp = t.mul(nodes.p, w)?;
                    t.sum(wp)
                },
                &s,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: err = {err}");
        }
    }

    #[test]
    fn log_domain_and_literal_taped_gradients_agree() {
        let s_val = random(5, 77, 1.5);
        let w = random(5, 78, 1.0);
        let grad_of = |literal: bool| {
            let mut t = Tape::new();
            let s = t.param(s_val.clone());
            let p = if literal {
                sinkhorn_reference_taped(&mut t, s, 0.5, 5).unwrap()
            } else {
                gumbel_sinkhorn(&mut t, s, None, SinkhornConfig::default()).unwrap().p
            };
            let wc = t.constant(w.clone());
            let l = t.mul(p, wc).unwrap();
            let l = t.sum(l).unwrap();
            t.backward(l).unwrap().get(s).unwrap().clone()
        };
        let (a, b) = (grad_of(false), grad_of(true));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
