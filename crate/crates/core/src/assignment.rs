//! Projection of a profit matrix onto the permutation matrices.
//!
//! [`hungarian_max`] solves `argmax_M ⟨M, P⟩_F` exactly with the
//! Kuhn-Munkres algorithm (dual potentials, O(N³)). The maximization is run
//! as a minimization of `max(P) − P`.

use crate::error::{contract, Error, Result};
use crate::gradcore::Tensor;

/// Largest size [`brute_force_assignment`] will enumerate.
pub const BRUTE_FORCE_MAX_N: usize = 9;

/// A permutation matrix stored as its assignment vector: row `i` is matched
/// to column `sigma[i]`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PermutationMatrix {
    sigma: Vec<usize>,
}

impl std::fmt::Debug for PermutationMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PermutationMatrix{:?}", self.sigma)
    }
}

impl PermutationMatrix {
    /// Fails unless `sigma` is a bijection on `0..len`.
    pub fn from_assignment(sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        let mut seen = vec![false; n];
        for (row, &c) in sigma.iter().enumerate() {
            if c >= n {
                return Err(contract(format!("row {row} assigned to column {c} of {n}")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(contract(format!("column {c} assigned twice")));
            }
        }
        Ok(Self { sigma })
    }

    pub fn identity(n: usize) -> Self {
        Self { sigma: (0..n).collect() }
    }

    /// Fails unless `m` is square and binary with unit row and column sums.
    pub fn from_dense(m: &Tensor) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(contract(format!("permutation matrix must be square, got {:?}", m.shape())));
        }
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let row = m.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(contract(format!("row {i} is not binary")));
            }
            let ones: Vec<usize> = (0..n).filter(|&j| row[j] == 1.0).collect();
            if ones.len() != 1 {
                return Err(contract(format!("row {i} has {} ones", ones.len())));
            }
            sigma.push(ones[0]);
        }
        Self::from_assignment(sigma)
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.sigma
    }

    pub fn col_of(&self, row: usize) -> usize {
        self.sigma[row]
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.sigma[row] == col
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &j) in self.sigma.iter().enumerate() {
            t.set(i, j, 1.0);
        }
        t
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.n()];
        for (i, &j) in self.sigma.iter().enumerate() {
            inv[j] = i;
        }
        Self { sigma: inv }
    }

    /// `⟨M, P⟩_F = Σ_i P[i, σ(i)]`, summed in row order.
    pub fn objective(&self, profit: &Tensor) -> f64 {
        self.sigma.iter().enumerate().map(|(i, &j)| profit.get(i, j)).sum()
    }

    /// Number of rows on which two permutations agree.
    pub fn agreement(&self, other: &Self) -> usize {
        self.sigma.iter().zip(&other.sigma).filter(|(a, b)| a == b).count()
    }

    /// Re-checks the bijection invariant.
    pub fn is_valid(&self) -> bool {
        Self::from_assignment(self.sigma.clone()).is_ok()
    }
}

fn check_profit(p: &Tensor) -> Result<usize> {
    let n = p.rows();
    if p.shape().len() != 2 || p.cols() != n {
        return Err(Error::Input(format!("profit matrix must be square, got {:?}", p.shape())));
    }
    if let Some(k) = p.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "profit matrix entry ({}, {}) is {}",
            k / n,
            k % n,
            p.data()[k]
        )));
    }
    Ok(n)
}

/// Maximum-profit permutation of a square finite matrix.
pub fn hungarian_max(profit: &Tensor) -> Result<PermutationMatrix> {
    let n = check_profit(profit)?;
    if n == 0 {
        return Ok(PermutationMatrix::identity(0));
    }
    let top = profit.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| top - profit.get(i, j);

    // 1-based potentials; column 0 is the virtual start column
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[owner[j] - 1] = j - 1;
    }
    let m = PermutationMatrix { sigma };
    debug_assert!(m.is_valid());
    Ok(m)
}

/// Exhaustive search over all N! permutations in lexicographic order; the
/// first maximum wins. Refuses N > [`BRUTE_FORCE_MAX_N`].
pub fn brute_force_assignment(profit: &Tensor) -> Result<PermutationMatrix> {
    let n = check_profit(profit)?;
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::Input(format!(
            "brute force assignment limited to N <= {BRUTE_FORCE_MAX_N}, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_val = f64::NEG_INFINITY;
    loop {
        let val: f64 = perm.iter().enumerate().map(|(i, &j)| profit.get(i, j)).sum();
        if val > best_val {
            best_val = val;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(PermutationMatrix { sigma: best })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(n, n, |_, _| rng.random::<f64>())
    }

    #[test]
    fn identity_profit() {
        let p = Tensor::identity(5);
        let m = hungarian_max(&p).unwrap();
        assert_eq!(m, PermutationMatrix::identity(5));
        assert_eq!(m.objective(&p), 5.0);
    }

    #[test]
    fn anti_diagonal_profit() {
        let p = Tensor::from_fn(4, 4, |i, j| if i + j == 3 { 1.0 } else { 0.0 });
        let m = hungarian_max(&p).unwrap();
        assert_eq!(m.assignment(), &[3, 2, 1, 0]);
        assert_eq!(m.objective(&p), 4.0);
    }

    #[test]
    fn nan_is_input_error() {
        let mut p = Tensor::zeros(&[3, 3]);
        p.set(2, 1, f64::NAN);
        assert!(matches!(hungarian_max(&p), Err(Error::Input(_))));
    }

    #[test]
    fn brute_force_small_cases() {
        let one = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(brute_force_assignment(&one).unwrap().assignment(), &[0]);
        // both permutations score 5; lexicographic order keeps (0, 1)
        let p = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(brute_force_assignment(&p).unwrap().assignment(), &[0, 1]);
        assert!(brute_force_assignment(&Tensor::zeros(&[10, 10])).is_err());
    }

    #[test]
    fn brute_force_beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random(6, &mut rng);
        let best = brute_force_assignment(&p).unwrap().objective(&p);
        let mut perm: Vec<usize> = (0..6).collect();
        for _ in 0..1000 {
            perm.shuffle(&mut rng);
            let m = PermutationMatrix::from_assignment(perm.clone()).unwrap();
            assert!(best >= m.objective(&p));
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = random(7, &mut rng);
            let h = hungarian_max(&p).unwrap();
            let b = brute_force_assignment(&p).unwrap();
            assert!(h.is_valid());
            assert_eq!(h.objective(&p), b.objective(&p));
        }
    }

    #[test]
    fn affine_map_of_profit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random(8, &mut rng);
            let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
            let q = p.map(|v| a * v + b);
            let mp = hungarian_max(&p).unwrap();
            let mq = hungarian_max(&q).unwrap();
            let want = a * mp.objective(&p) + 8.0 * b;
            assert!((mq.objective(&q) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn handles_ties_deterministically() {
        let p = Tensor::filled(&[5, 5], 1.0);
        let a = hungarian_max(&p).unwrap();
        assert_eq!(a, hungarian_max(&p).unwrap());
        assert_eq!(a.objective(&p), 5.0);
    }

    #[test]
    fn dense_round_trip_and_validation() {
        let m = PermutationMatrix::from_assignment(vec![2, 0, 1]).unwrap();
        assert_eq!(PermutationMatrix::from_dense(&m.to_dense()).unwrap(), m);
        assert!(PermutationMatrix::from_assignment(vec![0, 0, 1]).is_err());
        assert!(PermutationMatrix::from_assignment(vec![0, 3, 1]).is_err());
        let mut bad = m.to_dense();
        bad.set(0, 0, 1.0);
        assert!(PermutationMatrix::from_dense(&bad).is_err());
        assert_eq!(m.inverse().inverse(), m);
    }

    #[test]
    fn large_instance_is_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random(512, &mut rng);
        let t0 = std::time::Instant::now();
        let m = hungarian_max(&p).unwrap();
        assert!(m.is_valid());
        assert!(t0.elapsed().as_secs_f64() < 2.0, "{:?}", t0.elapsed());
    }
}
