//! Synthetic point-cloud shapes, dataset generation, and on-disk formats.
//!
//! Eight primitive surfaces are sampled uniformly by area, jittered with
//! isotropic Gaussian noise, and normalized into the unit sphere. Clouds
//! round-trip through a plain-text `.xyz` format losslessly; datasets are a
//! directory of those files plus a `manifest.csv` of `path,label` rows.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{norm, Tensor};

/// The eight shape classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Pyramid,
    Helix,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
        ShapeKind::Pyramid,
        ShapeKind::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Helix => "helix",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ShapeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown shape {name:?}")))
    }

    /// Class label: the index of this shape in [`ShapeKind::ALL`].
    pub fn label(self) -> usize {
        ShapeKind::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// A labelled cloud of 3-D points.
#[derive(Debug, Clone)]
pub struct PointCloud {
    /// Positions, shape `[n_points, 3]`.
    pub points: Tensor,
    /// Class label (index into [`ShapeKind::ALL`] for generated data).
    pub label: usize,
    /// Stable identifier, unique within a dataset (used in file names and
    /// reports).
    pub id: String,
}

/// Parameters for dataset synthesis.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub n_points: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_class_train: 100,
            per_class_test: 30,
            n_points: 256,
            noise_sd: 0.02,
            seed: 7,
        }
    }
}

/// Train/test splits of labelled clouds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    /// Human-readable name per class label, indexed by label.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Every generator below draws its proportions per cloud, so each class is
/// a family of related shapes rather than a fixed template. Neighbouring
/// families overlap on purpose — a thin torus resembles a banded sphere, a
/// flat box resembles a plane, a dense helix resembles a cylinder wall — so
/// classifiers trained on the data keep honest decision margins instead of
/// memorizing eight rigid prototypes.

/// Unit-sphere sample emitted as antipodal pairs so the sample centroid
/// vanishes exactly (for even counts): centering during normalization then
/// leaves every point at distance 1 from the origin. Each cloud confines
/// its directions to an equatorial band; wide bands look like full
/// spheres, narrow ones like rings close to a thin torus.
fn sample_sphere(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let half_width: f64 = rng.random_range(0.12..1.0);
    let draw = |rng: &mut ChaCha8Rng| {
        let z: f64 = rng.random_range(-half_width..half_width);
        let ring = (1.0 - z * z).sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        [ring * theta.cos(), ring * theta.sin(), z]
    };
    for _ in 0..n / 2 {
        let d = draw(rng);
        out.extend_from_slice(&d);
        out.extend_from_slice(&[-d[0], -d[1], -d[2]]);
    }
    if n % 2 == 1 {
        out.extend_from_slice(&draw(rng));
    }
}

/// Axis-aligned box with per-cloud half-extents; the thinnest boxes are a
/// small step away from the plane class.
fn sample_cube(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let ext = [
        1.0,
        rng.random_range(0.5..1.0),
        rng.random_range(0.05..1.0),
    ];
    // Pair areas for the faces normal to x, y, z.
    let areas = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut u = rng.random_range(0.0..total);
        let mut axis = 0;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                axis = i;
                break;
            }
            u -= a;
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        p[axis] = sign * ext[axis];
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        p[i] = rng.random_range(-ext[i]..ext[i]);
        p[j] = rng.random_range(-ext[j]..ext[j]);
        out.extend_from_slice(&p);
    }
}

/// Capped cylinder with per-cloud radius and height; squat ones approach
/// thick discs, tall narrow ones approach dense helices.
fn sample_cylinder(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let r = rng.random_range(0.4..1.0);
    let h = rng.random_range(0.5..1.2); // half-height
    let side = 2.0 * std::f64::consts::TAU * r * h;
    let cap = std::f64::consts::PI * r * r;
    let total = side + 2.0 * cap;
    for _ in 0..n {
        let u = rng.random_range(0.0..total);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        if u < side {
            let z = rng.random_range(-h..h);
            out.extend_from_slice(&[r * theta.cos(), r * theta.sin(), z]);
        } else {
            let z = if u < side + cap { h } else { -h };
            let rho = r * rng.random::<f64>().sqrt();
            out.extend_from_slice(&[rho * theta.cos(), rho * theta.sin(), z]);
        }
    }
}

/// Cone with per-cloud base radius and height, apex up; shallow wide cones
/// sit near the pyramid family.
fn sample_cone(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let r = rng.random_range(0.6..1.1);
    let height = rng.random_range(1.0..2.2);
    let lateral = std::f64::consts::PI * r * (r * r + height * height).sqrt();
    let base = std::f64::consts::PI * r * r;
    for _ in 0..n {
        let u = rng.random_range(0.0..lateral + base);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        if u < lateral {
            // Fraction of the way from apex to rim; sqrt for area weighting.
            let s = rng.random::<f64>().sqrt();
            out.extend_from_slice(&[
                s * r * theta.cos(),
                s * r * theta.sin(),
                height * (1.0 - s) - 1.0,
            ]);
        } else {
            let rho = r * rng.random::<f64>().sqrt();
            out.extend_from_slice(&[rho * theta.cos(), rho * theta.sin(), -1.0]);
        }
    }
}

/// Torus of ring radius 1 with a per-cloud tube radius; thin tubes are
/// nearly rings (close to banded spheres), fat ones nearly squat cylinders.
fn sample_torus(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let big_r = 1.0;
    let small_r = rng.random_range(0.1..0.6);
    let mut made = 0;
    while made < n {
        let u = rng.random_range(0.0..std::f64::consts::TAU);
        let v = rng.random_range(0.0..std::f64::consts::TAU);
        // Rejection step corrects for the area element depending on v.
        let w: f64 = rng.random();
        if w <= (big_r + small_r * v.cos()) / (big_r + small_r) {
            let ring = big_r + small_r * v.cos();
            out.extend_from_slice(&[ring * u.cos(), ring * u.sin(), small_r * v.sin()]);
            made += 1;
        }
    }
}

/// Flat rectangle in the z = 0 plane with a per-cloud aspect ratio. Kept
/// exactly coplanar so zero-thickness stays the class's defining trait.
fn sample_plane(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let b = rng.random_range(0.45..1.0);
    for _ in 0..n {
        let x = rng.random_range(-1.0..1.0);
        let y = rng.random_range(-b..b);
        out.extend_from_slice(&[x, y, 0.0]);
    }
}

/// Rectangular-based pyramid with per-cloud base aspect and apex height;
/// tall narrow ones drift toward the cone family.
fn sample_pyramid(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let a = 1.0;
    let b: f64 = rng.random_range(0.55..1.0);
    let height: f64 = rng.random_range(1.0..2.2);
    let apex = [0.0, 0.0, height];
    let corners = [[a, b], [-a, b], [-a, -b], [a, -b]];
    let base_area = 4.0 * a * b;
    // Triangle over an x-parallel edge (length 2a, apex offset b), then
    // over a y-parallel edge (length 2b, apex offset a).
    let face_areas = [
        a * (height * height + b * b).sqrt(),
        b * (height * height + a * a).sqrt(),
    ];
    let total = base_area + 2.0 * (face_areas[0] + face_areas[1]);
    for _ in 0..n {
        let u = rng.random_range(0.0..total);
        if u < base_area {
            let x = rng.random_range(-a..a);
            let y = rng.random_range(-b..b);
            out.extend_from_slice(&[x, y, 0.0]);
        } else {
            let mut v = u - base_area;
            let mut face = 3;
            for (i, fa) in [face_areas[0], face_areas[1], face_areas[0], face_areas[1]]
                .iter()
                .enumerate()
            {
                if v < *fa {
                    face = i;
                    break;
                }
                v -= fa;
            }
            let p = corners[face];
            let q = corners[(face + 1) % 4];
            let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            let x = p[0] + s * (q[0] - p[0]) + t * (apex[0] - p[0]);
            let y = p[1] + s * (q[1] - p[1]) + t * (apex[1] - p[1]);
            let z = t * apex[2];
            out.extend_from_slice(&[x, y, z]);
        }
    }
}

/// Unit-radius helix spanning z in [-1, 1] with a per-cloud turn count;
/// loosely wound ones are open arcs, tightly wound ones shade into the
/// cylinder wall.
fn sample_helix(n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let turns = rng.random_range(1.5..7.0);
    let span = turns * std::f64::consts::TAU;
    for _ in 0..n {
        let t = rng.random_range(0.0..span);
        out.extend_from_slice(&[t.cos(), t.sin(), 2.0 * t / span - 1.0]);
    }
}

/// Per-cloud orientation: a free spin about z plus a mild tilt in a random
/// direction. Shapes stay roughly upright — the way objects sit in aligned
/// scan collections — so classes remain learnable, while no cloud can lean
/// on one exact axis as a shortcut feature.
fn random_orientation(rng: &mut ChaCha8Rng, max_tilt: f64) -> [[f64; 3]; 3] {
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = rng.random_range(0.0..max_tilt);
    // Tilt about an axis in the xy-plane (Rodrigues form), then spin.
    let k = [azimuth.cos(), azimuth.sin(), 0.0];
    let (ct, st) = (tilt.cos(), tilt.sin());
    let mut tilt_rot = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { ct } else { 0.0 };
            let skew = match (i, j) {
                (0, 1) => -k[2],
                (0, 2) => k[1],
                (1, 0) => k[2],
                (1, 2) => -k[0],
                (2, 0) => -k[1],
                (2, 1) => k[0],
                _ => 0.0,
            };
            tilt_rot[i][j] = eye + st * skew + (1.0 - ct) * k[i] * k[j];
        }
    }
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let yaw_rot = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|l| yaw_rot[i][l] * tilt_rot[l][j]).sum();
        }
    }
    out
}

/// Rotates every xyz triple in `raw` by `rot` in place.
fn rotate_points(raw: &mut [f64], rot: &[[f64; 3]; 3]) {
    for p in raw.chunks_exact_mut(3) {
        let v = [p[0], p[1], p[2]];
        for (axis, row) in rot.iter().enumerate() {
            p[axis] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
}

/// Centers `points` on their centroid and scales so the farthest point
/// sits at distance exactly 1 (degenerate all-coincident clouds are left
/// at the origin).
pub fn normalize_unit_sphere(points: &mut Tensor) {
    let n = points.rows();
    if n == 0 {
        return;
    }
    let mut centroid = [0.0f64; 3];
    for r in 0..n {
        let row = points.row(r);
        for (c, v) in centroid.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let mut max_norm = 0.0f64;
    for r in 0..n {
        let row = points.row_mut(r);
        for (p, c) in row.iter_mut().zip(centroid) {
            *p -= c;
        }
        max_norm = max_norm.max(norm(row));
    }
    if max_norm > 1e-12 {
        for v in points.data_mut() {
            *v /= max_norm;
        }
    }
}

/// Samples one labelled cloud: surface points, Gaussian jitter of the
/// given standard deviation, then unit-sphere normalization.
pub fn gen_shape(kind: ShapeKind, n_points: usize, noise_sd: f64, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::Config(format!(
            "n_points must be at least 8, got {n_points}"
        )));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n_points * 3);
    match kind {
        ShapeKind::Sphere => sample_sphere(n_points, &mut rng, &mut raw),
        ShapeKind::Cube => sample_cube(n_points, &mut rng, &mut raw),
        ShapeKind::Cylinder => sample_cylinder(n_points, &mut rng, &mut raw),
        ShapeKind::Cone => sample_cone(n_points, &mut rng, &mut raw),
        ShapeKind::Torus => sample_torus(n_points, &mut rng, &mut raw),
        ShapeKind::Plane => sample_plane(n_points, &mut rng, &mut raw),
        ShapeKind::Pyramid => sample_pyramid(n_points, &mut rng, &mut raw),
        ShapeKind::Helix => sample_helix(n_points, &mut rng, &mut raw),
    }
    // Coplanarity and point norms are rotation-invariant, so the pinned
    // class traits survive the orientation draw.
    let rot = random_orientation(&mut rng, 0.35);
    rotate_points(&mut raw, &rot);
    if noise_sd > 0.0 {
        for v in raw.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise_sd * z;
        }
    }
    let mut points = Tensor::matrix(n_points, 3, raw)?;
    normalize_unit_sphere(&mut points);
    if !points.all_finite() {
        return Err(Error::Numeric(format!(
            "shape generator produced non-finite coordinates for {}",
            kind.name()
        )));
    }
    Ok(PointCloud {
        points,
        label: kind.label(),
        id: format!("{}_{seed}", kind.name()),
    })
}

/// Generates the full train/test dataset described by `cfg`.
///
/// Every cloud gets its own seed derived from `(cfg.seed, split, class,
/// index)`, so regenerating with the same config is bit-identical and
/// changing any one count does not reshuffle the others.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    build_dataset_with_classes(cfg, &ShapeKind::ALL)
}

/// Like [`build_dataset`] but restricted to the given shapes, labelled by
/// their position in `classes`. Per-cloud seeds still derive from the
/// shape's canonical index, so a sphere cloud is the same sphere cloud
/// whether it appears in a 2-class or the full 8-class dataset.
pub fn build_dataset_with_classes(cfg: &DataConfig, classes: &[ShapeKind]) -> Result<Dataset> {
    if cfg.per_class_train == 0 || cfg.per_class_test == 0 {
        return Err(Error::Config(
            "per_class_train and per_class_test must be at least 1".into(),
        ));
    }
    if classes.is_empty() {
        return Err(Error::Config("dataset needs at least one class".into()));
    }
    for (i, kind) in classes.iter().enumerate() {
        if classes[..i].contains(kind) {
            return Err(Error::Config(format!(
                "class {:?} listed twice",
                kind.name()
            )));
        }
    }
    let mut splits: [Vec<PointCloud>; 2] = [Vec::new(), Vec::new()];
    for (split_id, split_name, count) in [
        (0u64, "train", cfg.per_class_train),
        (1u64, "test", cfg.per_class_test),
    ] {
        for (label, kind) in classes.iter().enumerate() {
            for j in 0..count {
                let seed = seeds::derive(cfg.seed, &[split_id, kind.label() as u64, j as u64]);
                let mut cloud = gen_shape(*kind, cfg.n_points, cfg.noise_sd, seed)?;
                cloud.label = label;
                // Ids mirror the on-disk layout save_dataset produces:
                // class name + index within the split.
                let split = &mut splits[split_id as usize];
                cloud.id = format!("{split_name}_{}_{:04}", kind.name(), split.len());
                split.push(cloud);
            }
        }
    }
    let [train, test] = splits;
    Ok(Dataset {
        train,
        test,
        class_names: classes.iter().map(|k| k.name().to_string()).collect(),
    })
}

/// Formats an `f64` with enough digits to round-trip exactly.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a cloud as one `x y z` line per point, optionally preceded by a
/// `# label <name>` comment.
pub fn save_xyz(path: &Path, points: &Tensor, label: Option<&str>) -> Result<()> {
    let mut text = String::new();
    if let Some(name) = label {
        let _ = writeln!(text, "# label {name}");
    }
    for r in 0..points.rows() {
        let row = points.row(r);
        let _ = writeln!(
            text,
            "{} {} {}",
            format_f64(row[0]),
            format_f64(row[1]),
            format_f64(row[2])
        );
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a cloud written by [`save_xyz`]. Returns the points and the label
/// name if the file carried one.
pub fn load_xyz(path: &Path) -> Result<(Tensor, Option<String>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let what = path.display().to_string();
    let mut label = None;
    let mut data = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if idx == 0 {
                if let Some(name) = rest.trim().strip_prefix("label ") {
                    label = Some(name.trim().to_string());
                    continue;
                }
            }
            return Err(Error::ParseLine {
                what,
                line: line_no,
                msg: "unexpected comment line".into(),
            });
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::ParseLine {
                what,
                line: line_no,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::ParseLine {
                what: path.display().to_string(),
                line: line_no,
                msg: format!("invalid number {f:?}"),
            })?;
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Data(format!("{what} holds no points")));
    }
    let n = data.len() / 3;
    Ok((Tensor::matrix(n, 3, data)?, label))
}

/// Writes a dataset to `dir` as `train/` and `test/` subdirectories of
/// `.xyz` files plus a `manifest.csv` of `path,label` rows.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest
        .write_record(["path", "label"])
        .map_err(|e| Error::Data(format!("writing manifest: {e}")))?;
    for (split, clouds) in [("train", &dataset.train), ("test", &dataset.test)] {
        let split_dir = dir.join(split);
        fs::create_dir_all(&split_dir)
            .map_err(|e| Error::io(format!("creating {}", split_dir.display()), e))?;
        for (i, cloud) in clouds.iter().enumerate() {
            let class_name = dataset
                .class_names
                .get(cloud.label)
                .cloned()
                .unwrap_or_else(|| format!("class{}", cloud.label));
            let rel = format!("{split}/{class_name}_{i:04}.xyz");
            save_xyz(&dir.join(&rel), &cloud.points, Some(&class_name))?;
            manifest
                .write_record([rel.as_str(), &cloud.label.to_string()])
                .map_err(|e| Error::Data(format!("writing manifest: {e}")))?;
        }
    }
    let bytes = manifest
        .into_inner()
        .map_err(|e| Error::Data(format!("writing manifest: {e}")))?;
    let path = dir.join("manifest.csv");
    let mut file =
        fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads back a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest_path)
        .map_err(|e| Error::Data(format!("opening {}: {e}", manifest_path.display())))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut names: Vec<Option<String>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ParseLine {
            what: manifest_path.display().to_string(),
            line: row_idx + 2,
            msg: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(Error::ParseLine {
                what: manifest_path.display().to_string(),
                line: row_idx + 2,
                msg: format!("expected 2 columns, found {}", record.len()),
            });
        }
        let rel = PathBuf::from(&record[0]);
        let label: usize = record[1].parse().map_err(|_| Error::ParseLine {
            what: manifest_path.display().to_string(),
            line: row_idx + 2,
            msg: format!("invalid label {:?}", &record[1]),
        })?;
        let (points, label_name) = load_xyz(&dir.join(&rel))?;
        let id = record[0].trim_end_matches(".xyz").replace('/', "_");
        let cloud = PointCloud { points, label, id };
        if names.len() <= label {
            names.resize(label + 1, None);
        }
        if let Some(name) = label_name {
            names[label].get_or_insert(name);
        }
        if record[0].starts_with("train/") {
            train.push(cloud);
        } else if record[0].starts_with("test/") {
            test.push(cloud);
        } else {
            return Err(Error::Data(format!(
                "manifest path {:?} is in neither train/ nor test/",
                &record[0]
            )));
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no clouds",
            manifest_path.display()
        )));
    }
    let class_names = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.unwrap_or_else(|| format!("class{i}")))
        .collect();
    Ok(Dataset {
        train,
        test,
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;

    #[test]
    fn sphere_without_noise_sits_on_the_unit_sphere() {
        let cloud = gen_shape(ShapeKind::Sphere, 256, 0.0, 5).unwrap();
        for r in 0..cloud.points.rows() {
            let n = norm(cloud.points.row(r));
            assert!((n - 1.0).abs() < 1e-9, "point {r} has norm {n}");
        }
    }

    #[test]
    fn plane_without_noise_is_coplanar() {
        let cloud = gen_shape(ShapeKind::Plane, 64, 0.0, 5).unwrap();
        let n = cloud.points.rows();
        let m = nalgebra::DMatrix::from_fn(n, 3, |r, c| cloud.points.at(r, c));
        let svd = m.svd(false, false);
        let third = svd.singular_values[2];
        assert!(third < 1e-9, "third singular value {third}");
    }

    #[test]
    fn every_shape_normalizes_into_the_unit_sphere() {
        for kind in ShapeKind::ALL {
            let cloud = gen_shape(kind, 128, 0.02, 11).unwrap();
            let mut centroid = [0.0f64; 3];
            let mut max_norm = 0.0f64;
            for r in 0..cloud.points.rows() {
                let row = cloud.points.row(r);
                for (c, v) in centroid.iter_mut().zip(row) {
                    *c += v;
                }
                max_norm = max_norm.max(norm(row));
            }
            for c in centroid.iter_mut() {
                *c /= 128.0;
            }
            assert!(norm(&centroid) < 1e-9, "{}: centroid {centroid:?}", kind.name());
            assert!((max_norm - 1.0).abs() < 1e-9, "{}: max norm {max_norm}", kind.name());
            assert_eq!(cloud.label, kind.label());
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        for kind in [ShapeKind::Torus, ShapeKind::Helix] {
            let a = gen_shape(kind, 64, 0.01, 99).unwrap();
            let b = gen_shape(kind, 64, 0.01, 99).unwrap();
            assert_eq!(a.points.data(), b.points.data());
            let c = gen_shape(kind, 64, 0.01, 100).unwrap();
            assert_ne!(a.points.data(), c.points.data());
        }
    }

    #[test]
    fn gen_shape_validates_arguments() {
        assert!(matches!(
            gen_shape(ShapeKind::Cube, 7, 0.0, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen_shape(ShapeKind::Cube, 32, -0.1, 1),
            Err(Error::Config(_))
        ));
        assert!(ShapeKind::from_name("dodecahedron").is_err());
        assert_eq!(ShapeKind::from_name("torus").unwrap(), ShapeKind::Torus);
    }

    #[test]
    fn dataset_has_expected_sizes_and_labels() {
        let cfg = DataConfig {
            per_class_train: 3,
            per_class_test: 2,
            n_points: 32,
            noise_sd: 0.02,
            seed: 1,
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.test.len(), 16);
        assert_eq!(ds.num_classes(), 8);
        assert_eq!(ds.class_names[0], "sphere");
        for (i, cloud) in ds.train.iter().enumerate() {
            assert_eq!(cloud.label, i / 3);
            assert_eq!(cloud.points.shape(), &[32, 3]);
        }
        // Ids are unique across the whole dataset.
        let mut ids: Vec<&str> = ds
            .train
            .iter()
            .chain(&ds.test)
            .map(|c| c.id.as_str())
            .collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), before);
    }

    #[test]
    fn normalization_is_idempotent_and_translation_invariant() {
        let cloud = gen_shape(ShapeKind::Cube, 32, 0.01, 8).unwrap();
        let mut again = cloud.points.clone();
        normalize_unit_sphere(&mut again);
        for (a, b) in again.data().iter().zip(cloud.points.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut shifted = cloud.points.clone();
        for r in 0..shifted.rows() {
            let row = shifted.row_mut(r);
            row[0] += 3.5;
            row[1] -= 1.25;
            row[2] += 0.5;
        }
        normalize_unit_sphere(&mut shifted);
        for (a, b) in shifted.data().iter().zip(cloud.points.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_handles_a_degenerate_cloud() {
        let mut points = Tensor::matrix(4, 3, vec![2.0, -1.0, 0.5].repeat(4)).unwrap();
        normalize_unit_sphere(&mut points);
        for v in points.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn xyz_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let cloud = gen_shape(ShapeKind::Cone, 32, 0.05, 3).unwrap();
        save_xyz(&path, &cloud.points, Some("cone")).unwrap();
        let (loaded, label) = load_xyz(&path).unwrap();
        assert_eq!(label.as_deref(), Some("cone"));
        assert_eq!(loaded.shape(), cloud.points.shape());
        for (a, b) in loaded.data().iter().zip(cloud.points.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn xyz_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n1 1 1\n2 2\n").unwrap();
        match load_xyz(&path) {
            Err(Error::ParseLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, "0 0 zero\n").unwrap();
        match load_xyz(&path) {
            Err(Error::ParseLine { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("zero"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, "").unwrap();
        assert!(matches!(load_xyz(&path), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            per_class_train: 1,
            per_class_test: 1,
            n_points: 16,
            noise_sd: 0.02,
            seed: 4,
        };
        let ds = build_dataset(&cfg).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), ds.train.len());
        assert_eq!(loaded.test.len(), ds.test.len());
        assert_eq!(loaded.num_classes(), 8);
        assert_eq!(loaded.class_names, ds.class_names);
        for (a, b) in loaded.test.iter().zip(&ds.test) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.id, b.id);
            for (x, y) in a.points.data().iter().zip(b.points.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
