//! Rigid transform recovery from correspondences (Kabsch/Procrustes) and
//! Euler-angle conversion.

use nalgebra::{Matrix3, Vector3};

use crate::assignment::PermutationMatrix;
use crate::cloud::PointCloud;
use crate::error::{contract, Error, Result};

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Relative singular value below which a direction counts as missing.
const RANK_TOL: f64 = 1e-12;
/// Cosine of pitch below which the decomposition is treated as gimbal-locked.
const GIMBAL_TOL: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-6;

/// `A = U·diag(sigma)·Vᵀ` with `sigma` non-negative and descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

/// One-sided Jacobi SVD of a 3×3 matrix.
///
/// Column pairs of `A·V` are rotated until mutually orthogonal; the column
/// norms are then the singular values.
pub fn svd3(a: &Matrix3<f64>) -> Svd3 {
    let mut w = *a;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for r in 0..3 {
                    let (xp, xq) = (m[(r, p)], m[(r, q)]);
                    m[(r, p)] = c * xp - s * xq;
                    m[(r, q)] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let top = norms[order[0]];

    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut sigma = Vector3::zeros();
    let mut missing = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        sigma[k] = norms[src];
        vs.set_column(k, &v.column(src));
        if norms[src] > RANK_TOL * top && norms[src] > 0.0 {
            u.set_column(k, &(w.column(src) / norms[src]));
        } else {
            missing.push(k);
        }
    }
    for k in missing {
        let col = orthogonal_completion(&u, k);
        u.set_column(k, &col);
    }
    Svd3 { u, sigma, v: vs }
}

/// A unit vector orthogonal to columns `0..k` of `u`.
fn orthogonal_completion(u: &Matrix3<f64>, k: usize) -> Vector3<f64> {
    let mut best = Vector3::zeros();
    for e in 0..3 {
        let mut c = Vector3::zeros();
        c[e] = 1.0;
        for j in 0..k {
            let uj = u.column(j).into_owned();
            c -= uj * uj.dot(&c);
        }
        if c.norm() > best.norm() {
            best = c;
        }
    }
    best.normalize()
}

/// `y ≈ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q.x, q.y, q.z]
    }

    pub fn apply_cloud(&self, c: &PointCloud) -> PointCloud {
        PointCloud::new(c.points().iter().map(|&p| self.apply(p)).collect())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Orthogonality and unit determinant within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol)
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    (r.transpose() * r - Matrix3::identity()).norm() <= tol && (r.determinant() - 1.0).abs() <= tol
}

fn to_vec(p: [f64; 3]) -> Vector3<f64> {
    Vector3::from(p)
}

/// Least-squares rigid transform taking `x[i]` onto `y[σ(i)]`.
pub fn procrustes(x: &PointCloud, y: &PointCloud, m: &PermutationMatrix) -> Result<RigidTransform> {
    let n = x.len();
    if y.len() != n || m.n() != n {
        return Err(Error::Input(format!(
            "procrustes needs equal sizes, got {} points, {} points, {} rows",
            n,
            y.len(),
            m.n()
        )));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("procrustes needs at least 3 points, got {n}")));
    }
    let cx = to_vec(x.centroid());
    let cy = to_vec(y.centroid());
    let mut h = Matrix3::zeros();
    for i in 0..n {
        let a = to_vec(x.point(i)) - cx;
        let b = to_vec(y.point(m.col_of(i))) - cy;
        h += a * b.transpose();
    }
    let svd = svd3(&h);
    if !(svd.sigma[0] > 0.0) || svd.sigma[1] <= RANK_TOL * svd.sigma[0] {
        return Err(Error::Degenerate(format!(
            "cross-covariance has rank < 2 (singular values {:.3e}, {:.3e}, {:.3e}); points are collinear",
            svd.sigma[0], svd.sigma[1], svd.sigma[2]
        )));
    }
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let rotation = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.u.transpose();
    let translation = cy - rotation * cx;
    Ok(RigidTransform { rotation, translation })
}

/// Sum of squared residuals `Σ‖R·x_i + t − y_σ(i)‖²`.
pub fn residual(t: &RigidTransform, x: &PointCloud, y: &PointCloud, m: &PermutationMatrix) -> f64 {
    (0..x.len())
        .map(|i| (to_vec(t.apply(x.point(i))) - to_vec(y.point(m.col_of(i)))).norm_squared())
        .sum()
}

/// Intrinsic Z-Y-X angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

/// `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn rotation_from_euler(e: EulerAngles) -> Matrix3<f64> {
    let (sy, cy) = e.yaw.to_radians().sin_cos();
    let (sp, cp) = e.pitch.to_radians().sin_cos();
    let (sr, cr) = e.roll.to_radians().sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Inverse of [`rotation_from_euler`]. At gimbal lock the roll is zeroed
/// and folded into the yaw.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Result<EulerAngles> {
    if !is_rotation(r, ROTATION_TOL) {
        return Err(contract(format!(
            "not a rotation: |RᵀR − I| = {:.3e}, det = {:.6}",
            (r.transpose() * r - Matrix3::identity()).norm(),
            r.determinant()
        )));
    }
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let cp = (r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt();
    let (yaw, roll) = if cp < GIMBAL_TOL {
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    } else {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    };
    Ok(EulerAngles { yaw: yaw.to_degrees(), pitch: pitch.to_degrees(), roll: roll.to_degrees() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        rotation_from_euler(EulerAngles::new(
            rng.random_range(-180.0..180.0),
            rng.random_range(-89.0..89.0),
            rng.random_range(-180.0..180.0),
        ))
    }

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| [0.0; 3].map(|_: f64| rng.random_range(-1.0..1.0))).collect())
    }

    fn check_svd(a: &Matrix3<f64>, tol: f64) -> Svd3 {
        let s = svd3(a);
        assert!((s.reconstruct() - a).norm() < tol, "{a} -> {s:?}");
        assert!((s.u.transpose() * s.u - Matrix3::identity()).norm() < tol);
        assert!((s.v.transpose() * s.v - Matrix3::identity()).norm() < tol);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2] && s.sigma[2] >= 0.0);
        s
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        assert_eq!(check_svd(&Matrix3::identity(), 1e-12).sigma, Vector3::new(1.0, 1.0, 1.0));
        let s = check_svd(&Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0)), 1e-12);
        assert_eq!(s.sigma, Vector3::new(3.0, 2.0, 1.0));
        for k in 0..3 {
            assert_eq!(s.u[(k, k)].abs(), 1.0);
            assert_eq!(s.v[(k, k)].abs(), 1.0);
        }
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = random_matrix(&mut rng);
            let s = check_svd(&a, 1e-10);
            let oracle = a.svd(false, false).singular_values;
            let mut want: Vec<f64> = oracle.iter().copied().collect();
            want.sort_by(|a, b| b.total_cmp(a));
            for k in 0..3 {
                assert!((s.sigma[k] - want[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn svd_handles_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_svd(&Matrix3::zeros(), 1e-12);
        for _ in 0..100 {
            let a = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let b = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let c = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s1 = check_svd(&(a * b.transpose()), 1e-10);
            assert!(s1.sigma[1] < 1e-12);
            let s2 = check_svd(&(a * b.transpose() + c * a.transpose()), 1e-10);
            assert!(s2.sigma[2] < 1e-12);
        }
    }

    #[test]
    fn singular_values_invariant_under_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_matrix(&mut rng);
            let (q1, q2) = (random_rotation(&mut rng), random_rotation(&mut rng));
            let d = svd3(&a).sigma - svd3(&(q1 * a * q2)).sigma;
            assert!(d.norm() < 1e-10);
        }
    }

    #[test]
    fn procrustes_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(20, &mut rng);
        let id = PermutationMatrix::identity(20);
        let t = procrustes(&x, &x, &id).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        let shift = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        let t = procrustes(&x, &shift.apply_cloud(&x), &id).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!((t.translation - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn procrustes_recovers_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = random_cloud(50, &mut rng);
            let truth = RigidTransform::new(
                random_rotation(&mut rng),
                Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            );
            let mut sigma: Vec<usize> = (0..50).collect();
            sigma.shuffle(&mut rng);
            let m = PermutationMatrix::from_assignment(sigma).unwrap();
            let mut pts = vec![[0.0; 3]; 50];
            for i in 0..50 {
                pts[m.col_of(i)] = truth.apply(x.point(i));
            }
            let y = PointCloud::new(pts);
            let t = procrustes(&x, &y, &m).unwrap();
            assert!((t.rotation - truth.rotation).norm() < 1e-9);
            assert!((t.translation - truth.translation).norm() < 1e-9);
            assert!(t.is_proper(1e-9));
            assert!(residual(&t, &x, &y, &m) < 1e-18);
        }
    }

    #[test]
    fn procrustes_corrects_reflections() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_cloud(30, &mut rng);
        let mirrored = PointCloud::new(x.points().iter().map(|p| [-p[0], p[1], p[2]]).collect());
        let t = procrustes(&x, &mirrored, &PermutationMatrix::identity(30)).unwrap();
        assert!(t.is_proper(1e-9));
    }

    #[test]
    fn procrustes_on_planar_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = PointCloud::new((0..10).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0]).collect());
        let truth = RigidTransform::new(random_rotation(&mut rng), Vector3::new(0.1, 0.2, 0.3));
        let t = procrustes(&x, &truth.apply_cloud(&x), &PermutationMatrix::identity(10)).unwrap();
        assert!((t.rotation - truth.rotation).norm() < 1e-9);
    }

    #[test]
    fn procrustes_rejects_degenerate_clouds() {
        let line = PointCloud::new((0..6).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect());
        let r = procrustes(&line, &line, &PermutationMatrix::identity(6));
        assert!(matches!(r, Err(Error::Degenerate(_))));
        let two = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(procrustes(&two, &two, &PermutationMatrix::identity(2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn procrustes_invariant_to_consistent_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_cloud(25, &mut rng);
        let y = random_cloud(25, &mut rng);
        let mut sigma: Vec<usize> = (0..25).collect();
        sigma.shuffle(&mut rng);
        let m = PermutationMatrix::from_assignment(sigma.clone()).unwrap();
        let t1 = procrustes(&x, &y, &m).unwrap();
        let mut order: Vec<usize> = (0..25).collect();
        order.shuffle(&mut rng);
        let x2 = PointCloud::new(order.iter().map(|&i| x.point(i)).collect());
        let m2 = PermutationMatrix::from_assignment(order.iter().map(|&i| sigma[i]).collect()).unwrap();
        let t2 = procrustes(&x2, &y, &m2).unwrap();
        assert!((t1.rotation - t2.rotation).norm() < 1e-10);
        assert!((t1.translation - t2.translation).norm() < 1e-10);
    }

    #[test]
    fn euler_examples() {
        let e = euler_from_rotation(&Matrix3::identity()).unwrap();
        assert_eq!(e.as_array(), [0.0, 0.0, 0.0]);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let e = euler_from_rotation(&rz).unwrap();
        assert!((e.yaw - 90.0).abs() < 1e-12 && e.pitch.abs() < 1e-12 && e.roll.abs() < 1e-12);
        assert!(euler_from_rotation(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))).is_err());
        assert!(euler_from_rotation(&(Matrix3::identity() * 2.0)).is_err());
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let e = EulerAngles::new(
                rng.random_range(-179.0..179.0),
                rng.random_range(-89.0..89.0),
                rng.random_range(-179.0..179.0),
            );
            let back = euler_from_rotation(&rotation_from_euler(e)).unwrap();
            for (a, b) in e.as_array().iter().zip(back.as_array()) {
                assert!((a - b).abs() < 1e-9, "{e:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn gimbal_lock_folds_roll_into_yaw() {
        for pitch in [90.0, -90.0] {
            let r = rotation_from_euler(EulerAngles::new(30.0, pitch, 20.0));
            let e = euler_from_rotation(&r).unwrap();
            assert_eq!(e.roll, 0.0);
            assert!((rotation_from_euler(e) - r).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_inverse_and_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = RigidTransform::new(random_rotation(&mut rng), Vector3::new(1.0, -2.0, 0.5));
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }
}
