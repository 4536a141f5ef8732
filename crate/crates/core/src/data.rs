//! Synthetic pair generation, dataset splits and file formats.
//!
//! Every generator is a pure function of its configuration and seed.
//!
//! Cloud files come in two formats. The text format has one point per line
//! as three whitespace-separated numbers, with `#` starting a comment. The
//! binary format is the magic `PMPC`, a `u32` version, a `u32` point count,
//! then the coordinates as little-endian `f64`.
//!
//! A pair file is the magic `PMPR`, a `u32` version and a `u32` count,
//! followed by both clouds, the ground-truth assignment as `u32`, a flag byte
//! and, if the flag is set, the 3×3 rotation (row-major) and translation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::assignment::PermutationMatrix;
use crate::cloud::{Point3, PointCloud};
use crate::error::{config, Error, Result};
use crate::rigid::RigidTransform;

/// Mixes `(base, stream, index)` into an independent seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeCategory {
    Sphere,
    Box,
    Torus,
    Helix,
    Cylinder,
    Cone,
    Ellipsoid,
    Composite,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; 8] = [
        ShapeCategory::Sphere,
        ShapeCategory::Box,
        ShapeCategory::Torus,
        ShapeCategory::Helix,
        ShapeCategory::Cylinder,
        ShapeCategory::Cone,
        ShapeCategory::Ellipsoid,
        ShapeCategory::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeCategory::Sphere => "sphere",
            ShapeCategory::Box => "box",
            ShapeCategory::Torus => "torus",
            ShapeCategory::Helix => "helix",
            ShapeCategory::Cylinder => "cylinder",
            ShapeCategory::Cone => "cone",
            ShapeCategory::Ellipsoid => "ellipsoid",
            ShapeCategory::Composite => "composite",
        }
    }
}

impl fmt::Display for ShapeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| config(format!("unknown shape category `{s}`")))
    }
}

/// Parses a comma-separated category list.
pub fn parse_categories(s: &str) -> Result<Vec<ShapeCategory>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn sample_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    (0..n).map(|_| unit(rng)).collect()
}

fn sample_ellipsoid(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let axes = Vector3::new(uniform(rng, 0.8, 1.2), uniform(rng, 0.5, 0.8), uniform(rng, 0.25, 0.5));
    (0..n).map(|_| unit(rng).component_mul(&axes)).collect()
}

fn sample_box(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let h = Vector3::new(uniform(rng, 0.5, 1.0), uniform(rng, 0.3, 0.7), uniform(rng, 0.15, 0.4));
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = uniform(rng, 0.0, total);
            let mut axis = 0;
            while axis < 2 && pick >= areas[axis] {
                pick -= areas[axis];
                axis += 1;
            }
            let mut p = Vector3::new(uniform(rng, -h.x, h.x), uniform(rng, -h.y, h.y), uniform(rng, -h.z, h.z));
            p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
            p
        })
        .collect()
}

fn sample_torus(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let big = uniform(rng, 0.6, 0.9);
    let small = uniform(rng, 0.15, 0.35);
    (0..n)
        .map(|_| {
            // rejection on the tube angle for area-uniform sampling
            let (u, v) = loop {
                let u = uniform(rng, 0.0, std::f64::consts::TAU);
                let v = uniform(rng, 0.0, std::f64::consts::TAU);
                if uniform(rng, 0.0, big + small) <= big + small * v.cos() {
                    break (u, v);
                }
            };
            let r = big + small * v.cos();
            Vector3::new(r * u.cos(), r * u.sin(), small * v.sin())
        })
        .collect()
}

fn sample_helix(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let turns = uniform(rng, 1.5, 3.0);
    let height = uniform(rng, 1.0, 2.0);
    let tube = uniform(rng, 0.05, 0.12);
    (0..n)
        .map(|_| {
            let s = uniform(rng, 0.0, 1.0);
            let a = s * turns * std::f64::consts::TAU;
            let centre = Vector3::new(a.cos(), a.sin(), height * (s - 0.5));
            centre + unit(rng) * tube
        })
        .collect()
}

fn sample_cylinder(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let r = uniform(rng, 0.3, 0.6);
    let h = uniform(rng, 0.5, 1.0);
    let side = 2.0 * std::f64::consts::PI * r * 2.0 * h;
    let cap = std::f64::consts::PI * r * r;
    (0..n)
        .map(|_| {
            let a = uniform(rng, 0.0, std::f64::consts::TAU);
            if uniform(rng, 0.0, side + 2.0 * cap) < side {
                Vector3::new(r * a.cos(), r * a.sin(), uniform(rng, -h, h))
            } else {
                let rr = r * uniform(rng, 0.0, 1.0).sqrt();
                let z = if rng.random::<bool>() { h } else { -h };
                Vector3::new(rr * a.cos(), rr * a.sin(), z)
            }
        })
        .collect()
}

fn sample_cone(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let r = uniform(rng, 0.4, 0.8);
    let h = uniform(rng, 0.8, 1.6);
    let slant = (r * r + h * h).sqrt();
    let side = std::f64::consts::PI * r * slant;
    let base = std::f64::consts::PI * r * r;
    (0..n)
        .map(|_| {
            let a = uniform(rng, 0.0, std::f64::consts::TAU);
            if uniform(rng, 0.0, side + base) < side {
                // radius from apex grows linearly, so sample its square uniformly
                let s = uniform(rng, 0.0, 1.0).sqrt();
                Vector3::new(s * r * a.cos(), s * r * a.sin(), h * (1.0 - s))
            } else {
                let rr = r * uniform(rng, 0.0, 1.0).sqrt();
                Vector3::new(rr * a.cos(), rr * a.sin(), 0.0)
            }
        })
        .collect()
}

fn sample_composite(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    // a box body with a sphere and a cylinder attached at random offsets
    let n_body = n / 2;
    let n_ball = (n - n_body) / 2;
    let n_post = n - n_body - n_ball;
    let mut pts = sample_box(n_body, rng);
    let ball_at = unit(rng) * 0.9;
    let ball_r = uniform(rng, 0.25, 0.4);
    pts.extend(sample_sphere(n_ball, rng).into_iter().map(|p| p * ball_r + ball_at));
    let post_at = unit(rng) * 0.8;
    let post = Rotation3::rotation_between(&Vector3::z(), &post_at).unwrap_or_else(Rotation3::identity);
    pts.extend(sample_cylinder(n_post, rng).into_iter().map(|p| post * (p * 0.5) + post_at));
    pts
}

/// Zero mean, maximum distance from the origin 1.
pub fn normalize(points: &[Vector3<f64>]) -> Vec<Point3> {
    let n = points.len().max(1) as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let radius = points.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    points
        .iter()
        .map(|p| {
            let q = (p - mean) * scale;
            [q.x, q.y, q.z]
        })
        .collect()
}

/// A normalized instance of `category` with `n` points.
pub fn sample_shape(category: ShapeCategory, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match category {
        ShapeCategory::Sphere => sample_sphere(n, &mut rng),
        ShapeCategory::Box => sample_box(n, &mut rng),
        ShapeCategory::Torus => sample_torus(n, &mut rng),
        ShapeCategory::Helix => sample_helix(n, &mut rng),
        ShapeCategory::Cylinder => sample_cylinder(n, &mut rng),
        ShapeCategory::Cone => sample_cone(n, &mut rng),
        ShapeCategory::Ellipsoid => sample_ellipsoid(n, &mut rng),
        ShapeCategory::Composite => sample_composite(n, &mut rng),
    };
    PointCloud::new(normalize(&raw))
}

/// Per-coordinate Gaussian noise clipped to `[−clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub clip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.01, clip: 0.05 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { sigma: 0.0, clip: 0.0 }
    }

    pub fn is_none(&self) -> bool {
        self.sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(config(format!("noise sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.clip >= 0.0) {
            return Err(config(format!("noise clip must be >= 0, got {}", self.clip)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        if self.is_none() {
            return [0.0; 3];
        }
        let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
        [0.0; 3].map(|_: f64| normal.sample(rng).clamp(-self.clip, self.clip))
    }
}

/// Parameters shared by every pair of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub n: usize,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub noise: NoiseConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { n: 32, rot_max_deg: 45.0, trans_max: 0.5, noise: NoiseConfig::none() }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(config(format!("pairs need at least 3 points, got {}", self.n)));
        }
        if !(0.0..=180.0).contains(&self.rot_max_deg) {
            return Err(config(format!("rotation bound must be in [0, 180] degrees, got {}", self.rot_max_deg)));
        }
        if !(self.trans_max >= 0.0 && self.trans_max.is_finite()) {
            return Err(config(format!("translation bound must be finite and >= 0, got {}", self.trans_max)));
        }
        self.noise.validate()
    }
}

/// Source cloud, target cloud and their ground-truth matching.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x: PointCloud,
    pub y: PointCloud,
    /// `y[gt(i)]` corresponds to `x[i]`.
    pub gt: PermutationMatrix,
    /// Set for rigid pairs.
    pub transform: Option<RigidTransform>,
}

impl PairSample {
    pub fn n(&self) -> usize {
        self.x.len()
    }
}

/// Rotation about a uniformly random axis by an angle uniform in `[0, max]`.
fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> Matrix3<f64> {
    let axis = Unit::new_normalize(unit(rng));
    let angle = if max_deg > 0.0 { uniform(rng, 0.0, max_deg).to_radians() } else { 0.0 };
    *Rotation3::from_axis_angle(&axis, angle).matrix()
}

fn place(moved: Vec<Point3>, rng: &mut ChaCha8Rng) -> (PointCloud, PermutationMatrix) {
    let n = moved.len();
    let mut sigma: Vec<usize> = (0..n).collect();
    sigma.shuffle(rng);
    let mut y = vec![[0.0; 3]; n];
    for (i, p) in moved.into_iter().enumerate() {
        y[sigma[i]] = p;
    }
    let gt = PermutationMatrix::from_assignment(sigma).expect("shuffled identity");
    (PointCloud::new(y), gt)
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// `y[σ(i)] = R·x_i + t + noise`.
pub fn gen_rigid_pair(cfg: &PairConfig, category: ShapeCategory, seed: u64) -> Result<PairSample> {
    cfg.validate()?;
    let x = sample_shape(category, cfg.n, derive_seed(seed, 0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let rotation = random_rotation(&mut rng, cfg.rot_max_deg);
    let translation = if cfg.trans_max > 0.0 {
        Vector3::from_fn(|_, _| uniform(&mut rng, -cfg.trans_max, cfg.trans_max))
    } else {
        Vector3::zeros()
    };
    let transform = RigidTransform::new(rotation, translation);
    let moved: Vec<Point3> = x.points().iter().map(|&p| add(transform.apply(p), cfg.noise.sample(&mut rng))).collect();
    let (y, gt) = place(moved, &mut rng);
    Ok(PairSample { x, y, gt, transform: Some(transform) })
}

/// `y[σ(i)] = x_i + amplitude·Σ_m a_m sin(ω_m·x_i + φ_m) + noise`, three modes.
pub fn gen_nonrigid_pair(
    cfg: &PairConfig,
    category: ShapeCategory,
    amplitude: f64,
    seed: u64,
) -> Result<PairSample> {
    cfg.validate()?;
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(config(format!("warp amplitude must be finite and >= 0, got {amplitude}")));
    }
    let x = sample_shape(category, cfg.n, derive_seed(seed, 0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let modes: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..3)
        .map(|_| {
            let dir = unit(&mut rng);
            let freq = unit(&mut rng) * uniform(&mut rng, 0.5, 1.5) * std::f64::consts::PI;
            (dir, freq, uniform(&mut rng, 0.0, std::f64::consts::TAU))
        })
        .collect();
    let moved: Vec<Point3> = x
        .points()
        .iter()
        .map(|&p| {
            let v = Vector3::from(p);
            let d = modes.iter().fold(Vector3::zeros(), |acc, (dir, freq, phase)| {
                acc + dir * (freq.dot(&v) + phase).sin()
            }) * amplitude;
            add([v.x + d.x, v.y + d.y, v.z + d.z], cfg.noise.sample(&mut rng))
        })
        .collect();
    let (y, gt) = place(moved, &mut rng);
    Ok(PairSample { x, y, gt, transform: None })
}

/// Evaluation setting of a dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Unseen point clouds: same categories, fresh instances.
    Upc,
    /// Unseen categories: test categories are disjoint from training ones.
    Uc,
    /// Noisy data: UPC with noise on every pair.
    Nd,
    /// UPC categories with a smooth non-rigid warp instead of a rigid motion.
    NonRigid,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Upc => "upc",
            Setting::Uc => "uc",
            Setting::Nd => "nd",
            Setting::NonRigid => "nonrigid",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upc" => Ok(Setting::Upc),
            "uc" => Ok(Setting::Uc),
            "nd" => Ok(Setting::Nd),
            "nonrigid" | "non-rigid" => Ok(Setting::NonRigid),
            other => Err(config(format!("unknown setting `{other}` (expected upc, uc, nd or nonrigid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitPart {
    Train,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Test => "test",
        }
    }
}

/// Identifies one generated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSpec {
    pub part: SplitPart,
    pub index: usize,
    pub category: ShapeCategory,
    pub seed: u64,
}

/// Train and test generators of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub setting: Setting,
    pub pair: PairConfig,
    pub warp: f64,
    pub train_categories: Vec<ShapeCategory>,
    pub test_categories: Vec<ShapeCategory>,
    pub seed: u64,
}

pub const DEFAULT_WARP: f64 = 0.05;

/// Builds the generators for `setting`. UPC and UC pairs are noise-free and
/// ND pairs use `pair.noise`.
pub fn make_split(setting: Setting, categories: &[ShapeCategory], pair: PairConfig, seed: u64) -> Result<Split> {
    if categories.is_empty() {
        return Err(config("at least one shape category is required"));
    }
    let mut cats = categories.to_vec();
    cats.dedup();
    let (train, test) = match setting {
        Setting::Uc => {
            if cats.len() < 2 {
                return Err(config(format!(
                    "the unseen-categories setting needs at least 2 categories, got {}",
                    cats.len()
                )));
            }
            let cut = cats.len().div_ceil(2);
            (cats[..cut].to_vec(), cats[cut..].to_vec())
        }
        _ => (cats.clone(), cats),
    };
    let mut pair = pair;
    if setting != Setting::Nd {
        pair.noise = NoiseConfig::none();
    } else if pair.noise.is_none() {
        pair.noise = NoiseConfig::default();
    }
    pair.validate()?;
    Ok(Split { setting, pair, warp: DEFAULT_WARP, train_categories: train, test_categories: test, seed })
}

impl Split {
    pub fn spec(&self, part: SplitPart, index: usize) -> PairSpec {
        let cats = match part {
            SplitPart::Train => &self.train_categories,
            SplitPart::Test => &self.test_categories,
        };
        let stream = match part {
            SplitPart::Train => 10,
            SplitPart::Test => 11,
        };
        PairSpec { part, index, category: cats[index % cats.len()], seed: derive_seed(self.seed, stream, index as u64) }
    }

    pub fn generate(&self, spec: &PairSpec) -> Result<PairSample> {
        match self.setting {
            Setting::NonRigid => gen_nonrigid_pair(&self.pair, spec.category, self.warp, spec.seed),
            _ => gen_rigid_pair(&self.pair, spec.category, spec.seed),
        }
    }

    pub fn pair(&self, part: SplitPart, index: usize) -> Result<PairSample> {
        self.generate(&self.spec(part, index))
    }

    pub fn pairs(&self, part: SplitPart, count: usize) -> Result<Vec<PairSample>> {
        (0..count).map(|i| self.pair(part, i)).collect()
    }
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CloudFormat {
    XyzText,
    Binary,
}

impl CloudFormat {
    /// `.pmpc` and `.bin` are binary, anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pmpc") | Some("bin") => CloudFormat::Binary,
            _ => CloudFormat::XyzText,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xyz" | "text" | "xyz-text" => Ok(CloudFormat::XyzText),
            "bin" | "binary" | "pmpc" => Ok(CloudFormat::Binary),
            other => Err(config(format!("unknown cloud format `{other}`"))),
        }
    }
}

const CLOUD_MAGIC: &[u8; 4] = b"PMPC";
const PAIR_MAGIC: &[u8; 4] = b"PMPR";
const FORMAT_VERSION: u32 = 1;

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        s.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p[0], p[1], p[2]));
    }
    s
}

fn parse_error(source: &str, location: String, message: impl Into<String>) -> Error {
    Error::Parse { source_name: source.to_string(), location, message: message.into() }
}

pub fn parse_xyz(text: &str, source: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_error(
                source,
                format!("line {}", lineno + 1),
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                parse_error(source, format!("line {}", lineno + 1), format!("`{f}` is not a finite number"))
            })?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

fn put_points(buf: &mut Vec<u8>, cloud: &PointCloud) {
    for p in cloud.points() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + cloud.len() * 24);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    put_points(&mut buf, cloud);
    buf
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], source: &'a str) -> Self {
        Self { bytes, pos: 0, source }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        parse_error(self.source, format!("byte {}", self.pos), message)
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.error(format!(
                "unexpected end of data: need {len} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32()?;
        if v != supported {
            self.pos -= 4;
            return Err(self.error(format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    fn points(&mut self, count: usize) -> Result<PointCloud> {
        let mut pts = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            pts.push([self.f64()?, self.f64()?, self.f64()?]);
        }
        Ok(PointCloud::new(pts))
    }
}

pub fn decode_cloud(bytes: &[u8], source: &str) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, source);
    r.magic(CLOUD_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let count = r.u32()? as usize;
    let cloud = r.points(count)?;
    r.finish()?;
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::XyzText => write_xyz(cloud).into_bytes(),
        CloudFormat::Binary => encode_cloud(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        CloudFormat::Binary => decode_cloud(&bytes, &name),
        CloudFormat::XyzText => {
            let text = String::from_utf8(bytes)
                .map_err(|e| parse_error(&name, format!("byte {}", e.utf8_error().valid_up_to()), "invalid UTF-8"))?;
            parse_xyz(&text, &name)
        }
    }
}

pub fn encode_pair(pair: &PairSample) -> Vec<u8> {
    let n = pair.n();
    let mut buf = Vec::with_capacity(13 + n * 52 + 96);
    buf.extend_from_slice(PAIR_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    put_points(&mut buf, &pair.x);
    put_points(&mut buf, &pair.y);
    for &c in pair.gt.assignment() {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    match &pair.transform {
        None => buf.push(0),
        Some(t) => {
            buf.push(1);
            for r in 0..3 {
                for c in 0..3 {
                    buf.extend_from_slice(&t.rotation[(r, c)].to_le_bytes());
                }
            }
            for k in 0..3 {
                buf.extend_from_slice(&t.translation[k].to_le_bytes());
            }
        }
    }
    buf
}

pub fn decode_pair(bytes: &[u8], source: &str) -> Result<PairSample> {
    let mut r = Reader::new(bytes, source);
    r.magic(PAIR_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u32()? as usize;
    let x = r.points(n)?;
    let y = r.points(n)?;
    let mut sigma = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        sigma.push(r.u32()? as usize);
    }
    let at = r.pos;
    let gt = PermutationMatrix::from_assignment(sigma)
        .map_err(|e| parse_error(source, format!("byte {at}"), format!("ground truth: {e}")))?;
    let transform = match r.u8()? {
        0 => None,
        1 => {
            let mut rot = Matrix3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    rot[(row, col)] = r.f64()?;
                }
            }
            let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            Some(RigidTransform::new(rot, t))
        }
        other => return Err(r.error(format!("bad transform flag {other}"))),
    };
    r.finish()?;
    Ok(PairSample { x, y, gt, transform })
}

pub fn save_pair(pair: &PairSample, path: &Path) -> Result<()> {
    fs::write(path, encode_pair(pair)).map_err(|e| Error::io(path, e))
}

pub fn load_pair(path: &Path) -> Result<PairSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pair(&bytes, &path.display().to_string())
}


/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub part: SplitPart,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub seed: u64,
    pub category: ShapeCategory,
}

/// Text index of a generated dataset.
///
/// Header lines are `key=value`; pair lines are
/// `pair <train|test> <path> <seed> <category>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub header: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl DatasetManifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# permatch dataset\n");
        for (k, v) in &self.header {
            s.push_str(&format!("{k}={v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("pair {} {} {} {}\n", e.part.name(), e.path.display(), e.seed, e.category));
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("line {}", lineno + 1);
            if let Some(rest) = line.strip_prefix("pair ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(parse_error(source, loc(), "pair lines need part, path, seed and category"));
                }
                let part = match f[0] {
                    "train" => SplitPart::Train,
                    "test" => SplitPart::Test,
                    other => return Err(parse_error(source, loc(), format!("unknown split part `{other}`"))),
                };
                let seed = f[2].parse().map_err(|_| parse_error(source, loc(), format!("bad seed `{}`", f[2])))?;
                let category = f[3].parse().map_err(|e: Error| parse_error(source, loc(), e.to_string()))?;
                m.entries.push(ManifestEntry { part, path: PathBuf::from(f[1]), seed, category });
            } else if let Some((k, v)) = line.split_once('=') {
                m.header.push((k.trim().to_string(), v.trim().to_string()));
            } else {
                return Err(parse_error(source, loc(), format!("unrecognised line `{line}`")));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// A dataset on disk: manifest plus the pairs it lists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Accepts the dataset directory or the manifest file itself.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest: DatasetManifest::load(&manifest_path)? })
    }

    pub fn load_part(&self, part: SplitPart) -> Result<Vec<PairSample>> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.part == part)
            .map(|e| load_pair(&self.root.join(&e.path)))
            .collect()
    }
}

/// Writes `train` + `test` pairs of `split` under `dir` and returns the manifest.
pub fn write_dataset(dir: &Path, split: &Split, train: usize, test: usize) -> Result<DatasetManifest> {
    let pairs_dir = dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
    let mut manifest = DatasetManifest {
        header: vec![
            ("setting".into(), split.setting.to_string()),
            ("n".into(), split.pair.n.to_string()),
            ("seed".into(), split.seed.to_string()),
            ("rot_max_deg".into(), split.pair.rot_max_deg.to_string()),
            ("trans_max".into(), split.pair.trans_max.to_string()),
            ("noise_sigma".into(), split.pair.noise.sigma.to_string()),
            ("noise_clip".into(), split.pair.noise.clip.to_string()),
            ("warp".into(), split.warp.to_string()),
            ("train_categories".into(), join_categories(&split.train_categories)),
            ("test_categories".into(), join_categories(&split.test_categories)),
        ],
        entries: Vec::new(),
    };
    for (part, count) in [(SplitPart::Train, train), (SplitPart::Test, test)] {
        for i in 0..count {
            let spec = split.spec(part, i);
            let rel = PathBuf::from("pairs").join(format!("{}-{i:05}.pmpr", part.name()));
            save_pair(&split.generate(&spec)?, &dir.join(&rel))?;
            manifest.entries.push(ManifestEntry { part, path: rel, seed: spec.seed, category: spec.category });
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn join_categories(c: &[ShapeCategory]) -> String {
    c.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}
