//! Datasets: synthetic primitive shapes, XYZ text files, labeled manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::pointops::{Point, PointCloud};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Plane => "plane",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape kind {s:?}")))
    }
}

const TORUS_MAJOR: f64 = 0.35;
const TORUS_MINOR: f64 = 0.15;

/// Uniform surface sample of a unit-scale primitive plus isotropic Gaussian
/// noise. Sphere: radius 1. Cube: side 1. Cylinder and cone: radius 0.5,
/// height 1, caps included. Plane: unit square at z = 0. Torus: radii
/// 0.35 / 0.15.
pub fn generate_shape<R: Rng + ?Sized>(
    kind: ShapeKind,
    n_points: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::range(format!("need at least 8 points, got {n_points}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::range(format!("noise sigma {noise_sigma}")));
    }
    let mut pts: Vec<Point> = (0..n_points).map(|_| sample_surface(kind, rng)).collect();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    PointCloud::new(pts, None)
}

fn sample_surface<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Point {
    use std::f64::consts::{PI, TAU};
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break v.map(|x| x / n);
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
            let side = if face % 2 == 0 { 0.5 } else { -0.5 };
            match face / 2 {
                0 => [side, a, b],
                1 => [a, side, b],
                _ => [a, b, side],
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            // Area element ∝ (R + r cos θ); rejection-sample the tube angle.
            let theta = loop {
                let t = rng.random_range(0.0..TAU);
                if rng.random_range(0.0..(big + small)) <= big + small * t.cos() {
                    break t;
                }
            };
            let phi = rng.random_range(0.0..TAU);
            let ring = big + small * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
        }
        ShapeKind::Cylinder => {
            let r = 0.5;
            let lateral = TAU * r;
            let caps = 2.0 * PI * r * r;
            let phi = rng.random_range(0.0..TAU);
            if rng.random_range(0.0..lateral + caps) < lateral {
                [r * phi.cos(), r * phi.sin(), rng.random_range(-0.5..=0.5)]
            } else {
                let rho = r * rng.random_range(0.0f64..=1.0).sqrt();
                let z = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
                [rho * phi.cos(), rho * phi.sin(), z]
            }
        }
        ShapeKind::Cone => {
            let (r, h): (f64, f64) = (0.5, 1.0);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            let phi = rng.random_range(0.0..TAU);
            let frac = rng.random_range(0.0f64..=1.0).sqrt();
            if rng.random_range(0.0..lateral + base) < lateral {
                // Distance from the apex is ∝ sqrt(u) for uniform area.
                let rho = r * frac;
                [rho * phi.cos(), rho * phi.sin(), 0.5 - h * frac]
            } else {
                let rho = r * frac;
                [rho * phi.cos(), rho * phi.sin(), -0.5]
            }
        }
        ShapeKind::Plane => [rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5), 0.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Every sample carries its label.
    pub samples: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label.expect("dataset samples are labeled")
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for i in 0..self.len() {
            h[self.label(i)] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kinds: Vec<ShapeKind>,
    pub n_per_class: usize,
    pub n_points: usize,
    pub noise: f64,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` of class `class`, unique per `(seed, class, index)`.
pub fn sample_seed(seed: u64, class: usize, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ ((class as u64) << 40)) ^ index as u64)
}

/// Balanced synthetic train/test datasets with a stratified 80/20 split:
/// `ceil(n/5)` samples of each class go to test.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    make_synthetic_split(spec, spec.n_per_class.div_ceil(5))
}

/// Like [`make_synthetic_dataset`] with `n_test` samples of each class in
/// the test split.
pub fn make_synthetic_split(spec: &SyntheticSpec, n_test: usize) -> Result<(Dataset, Dataset)> {
    if spec.n_per_class < 2 {
        return Err(Error::range("need at least 2 samples per class"));
    }
    if n_test == 0 || n_test >= spec.n_per_class {
        return Err(Error::range(format!(
            "{n_test} test samples out of {} per class",
            spec.n_per_class
        )));
    }
    if spec.kinds.is_empty() {
        return Err(Error::config("no shape kinds given"));
    }
    let class_names: Vec<String> = spec.kinds.iter().map(|k| k.name().to_string()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, &kind) in spec.kinds.iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.n_per_class).collect();
        order.shuffle(&mut split_rng);
        let mut is_test = vec![false; spec.n_per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (i, &to_test) in is_test.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, class, i));
            let mut cloud = generate_shape(kind, spec.n_points, spec.noise, &mut rng)?;
            cloud.label = Some(class);
            if to_test {
                test.push(cloud);
            } else {
                train.push(cloud);
            }
        }
    }
    Ok((
        Dataset {
            samples: train,
            class_names: class_names.clone(),
            split: Split::Train,
        },
        Dataset {
            samples: test,
            class_names,
            split: Split::Test,
        },
    ))
}

/// Parses XYZ text: one `x y z` line per point, `#` comment lines skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.starts_with('#') || trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(line_no, format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| err(line_no, format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(line_no, format!("non-finite value {f:?}")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(0, "no points in file".into()));
    }
    PointCloud::new(points, None)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_xyz(&text, path)
}

/// Shortest decimal that round-trips the value rounded to 9 significant
/// digits.
pub fn format_coord(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("float formatting");
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for p in &cloud.points {
        out.push_str(&format_coord(p[0]));
        out.push(' ');
        out.push_str(&format_coord(p[1]));
        out.push(' ');
        out.push_str(&format_coord(p[2]));
        out.push('\n');
    }
    out
}

pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud))?;
    Ok(())
}

/// Writes each sample as `<dir>/<split>/<class>_<index>.xyz` and a manifest
/// `<dir>/<split>_manifest.tsv` of `relative/path.xyz<TAB>class` lines.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let split = match dataset.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    fs::create_dir_all(dir.join(split))?;
    let mut manifest = String::new();
    let mut counters = vec![0usize; dataset.num_classes()];
    for (i, cloud) in dataset.samples.iter().enumerate() {
        let label = dataset.label(i);
        let class = &dataset.class_names[label];
        let rel = format!("{split}/{class}_{:04}.xyz", counters[label]);
        counters[label] += 1;
        save_xyz(&dir.join(&rel), cloud)?;
        manifest.push_str(&format!("{rel}\t{class}\n"));
    }
    let path = dir.join(format!("{split}_manifest.tsv"));
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest of `relative/path.xyz<TAB>class` lines. Classes are
/// numbered in order of first appearance after any `known` names.
pub fn load_manifest(path: &Path, split: Split, known: &[String]) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut class_names = known.to_vec();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, class) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected path<TAB>class".into(),
        })?;
        let label = match class_names.iter().position(|c| c == class) {
            Some(l) => l,
            None => {
                class_names.push(class.to_string());
                class_names.len() - 1
            }
        };
        let mut cloud = load_xyz(&base.join(rel))?;
        cloud.label = Some(label);
        samples.push(cloud);
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "manifest lists no samples".into(),
        });
    }
    Ok(Dataset {
        samples,
        class_names,
        split,
    })
}
