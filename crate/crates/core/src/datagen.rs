//! Synthetic nested-anatomy data: surface-sampled primitives with per-class
//! jitter, anchor-crop masking for completion pairs, fold splitting, and the
//! plain-text cloud/manifest file formats.
//!
//! Every generator is a pure function of (config, seed); per-sample seeds are
//! derived with splitmix so samples are independent streams.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::canonical_mean;
use crate::mat::Mat;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_NOISE: f64 = 0.01;

/// Labeled point cloud: per-point part labels (`-1` = unlabeled) plus a
/// sample-level class label.
#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub coords: Mat,
    pub point_labels: Vec<i32>,
    pub class_label: usize,
    pub sample_id: u64,
    pub seed: u64,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn has_part_labels(&self) -> bool {
        self.point_labels.iter().any(|&l| l >= 0)
    }
}

/// A completion training pair: the full cloud and its anchor-cropped partial.
#[derive(Debug, Clone)]
pub struct CompletionPair {
    pub partial: Mat,
    pub full: Mat,
    pub anchor_index: usize,
    pub removed_fraction: f64,
}

/// The five synthetic shape families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    SphereShell,
    NestedSpheres,
    BoxShell,
    Capsule,
    Torus,
}

pub const ALL_SHAPES: [ShapeClass; 5] = [
    ShapeClass::SphereShell,
    ShapeClass::NestedSpheres,
    ShapeClass::BoxShell,
    ShapeClass::Capsule,
    ShapeClass::Torus,
];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::SphereShell => "sphere_shell",
            ShapeClass::NestedSpheres => "nested_spheres",
            ShapeClass::BoxShell => "box_shell",
            ShapeClass::Capsule => "capsule",
            ShapeClass::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere_shell" => Ok(ShapeClass::SphereShell),
            "nested_spheres" => Ok(ShapeClass::NestedSpheres),
            "box_shell" => Ok(ShapeClass::BoxShell),
            "capsule" => Ok(ShapeClass::Capsule),
            "torus" => Ok(ShapeClass::Torus),
            other => Err(Error::invalid(format!("unknown shape class '{other}'"))),
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-9 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Scale so the farthest point sits on the unit sphere. The primitives are
/// origin-centered by construction, so no recentering happens here and a
/// noise-free shell keeps exactly unit radius.
pub fn normalize_to_unit_sphere(coords: &mut Mat) {
    let n = coords.rows();
    let mut max_norm: f64 = 0.0;
    for r in 0..n {
        let d2: f64 = coords.row(r).iter().map(|v| v * v).sum();
        max_norm = max_norm.max(d2.sqrt());
    }
    if max_norm > 0.0 {
        for v in coords.data_mut() {
            *v /= max_norm;
        }
    }
}

/// Subtract the centroid (canonical summation order, so row order does not
/// matter).
pub fn center_at_centroid(coords: &mut Mat) {
    let mean = canonical_mean(coords);
    for r in 0..coords.rows() {
        for c in 0..coords.cols() {
            let v = coords.get(r, c) - mean[c];
            coords.set(r, c, v);
        }
    }
}

fn sample_sphere_shell(rng: &mut ChaCha8Rng, n: usize, radius: f64, out: &mut Vec<[f64; 3]>) {
    for _ in 0..n {
        let d = unit_direction(rng);
        out.push([d[0] * radius, d[1] * radius, d[2] * radius]);
    }
}

fn sample_box_shell(rng: &mut ChaCha8Rng, n: usize, half: [f64; 3], out: &mut Vec<[f64; 3]>) {
    // choose face proportional to area
    let areas = [
        half[1] * half[2], // +-x
        half[0] * half[2], // +-y
        half[0] * half[1], // +-z
    ];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut axis = 2;
        let mut sign = 1.0;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                axis = i;
                sign = 1.0;
                break;
            }
            pick -= a;
            if pick < a {
                axis = i;
                sign = -1.0;
                break;
            }
            pick -= a;
        }
        let mut p = [0.0; 3];
        p[axis] = sign * half[axis];
        for c in 0..3 {
            if c != axis {
                p[c] = rng.gen_range(-half[c]..half[c]);
            }
        }
        out.push(p);
    }
}

fn sample_capsule(rng: &mut ChaCha8Rng, n: usize, radius: f64, half_len: f64, out: &mut Vec<[f64; 3]>) {
    let side_area = 2.0 * std::f64::consts::PI * radius * 2.0 * half_len;
    let cap_area = 4.0 * std::f64::consts::PI * radius * radius;
    let total = side_area + cap_area;
    for _ in 0..n {
        if rng.gen_range(0.0..total) < side_area {
            let z = rng.gen_range(-half_len..half_len);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            out.push([radius * phi.cos(), radius * phi.sin(), z]);
        } else {
            let d = unit_direction(rng);
            let offset = if d[2] >= 0.0 { half_len } else { -half_len };
            out.push([radius * d[0], radius * d[1], radius * d[2] + offset]);
        }
    }
}

fn sample_torus(rng: &mut ChaCha8Rng, n: usize, major: f64, minor: f64, out: &mut Vec<[f64; 3]>) {
    // rejection on the tube angle keeps the surface density uniform
    for _ in 0..n {
        let theta = loop {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let accept = (major + minor * t.cos()) / (major + minor);
            if rng.gen_range(0.0..1.0) < accept {
                break t;
            }
        };
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let ring = major + minor * theta.cos();
        out.push([ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]);
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform surface sampling of one primitive with per-sample size jitter and
/// Gaussian point noise, normalized to the unit sphere. `nested_spheres`
/// carries two part labels (0 = inner shell, 1 = outer shell); the other
/// classes label every point 0.
pub fn gen_shape(class: ShapeClass, n: usize, seed: u64, noise: f64) -> Result<LabeledCloud> {
    if n < 32 {
        return Err(Error::invalid(format!("need at least 32 points, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    let scale = rng.gen_range(0.9..1.1);
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut labels = vec![0i32; n];
    match class {
        ShapeClass::SphereShell => sample_sphere_shell(&mut rng, n, 1.0, &mut pts),
        ShapeClass::NestedSpheres => {
            let inner_r = rng.gen_range(0.45..0.55);
            let inner_n = n / 2;
            sample_sphere_shell(&mut rng, inner_n, inner_r, &mut pts);
            sample_sphere_shell(&mut rng, n - inner_n, 1.0, &mut pts);
            for l in labels.iter_mut().skip(inner_n) {
                *l = 1;
            }
        }
        ShapeClass::BoxShell => {
            let half = [1.0, rng.gen_range(0.55..0.75), rng.gen_range(0.35..0.55)];
            sample_box_shell(&mut rng, n, half, &mut pts);
        }
        ShapeClass::Capsule => {
            let radius = rng.gen_range(0.3..0.4);
            let half_len = rng.gen_range(0.7..0.9);
            sample_capsule(&mut rng, n, radius, half_len, &mut pts);
        }
        ShapeClass::Torus => {
            let minor = rng.gen_range(0.25..0.35);
            sample_torus(&mut rng, n, 1.0, minor, &mut pts);
        }
    }
    let mut coords = Mat::zeros(n, 3);
    for (r, p) in pts.iter().enumerate() {
        for c in 0..3 {
            let jitter = if noise > 0.0 { gaussian(&mut rng) * noise } else { 0.0 };
            coords.set(r, c, p[c] * scale + jitter);
        }
    }
    normalize_to_unit_sphere(&mut coords);
    Ok(LabeledCloud {
        coords,
        point_labels: labels,
        class_label: class as usize,
        sample_id: 0,
        seed,
    })
}

/// Union of 2..=4 offset primitives with one part label per component; used
/// for richer segmentation sets.
pub fn gen_composite(n: usize, seed: u64, noise: f64) -> Result<LabeledCloud> {
    if n < 32 {
        return Err(Error::invalid(format!("need at least 32 points, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    let parts = rng.gen_range(2..=4usize);
    let mut coords = Mat::zeros(n, 3);
    let mut labels = vec![0i32; n];
    let mut row = 0;
    for part in 0..parts {
        let count = if part == parts - 1 { n - row } else { n / parts };
        let class = ALL_SHAPES[rng.gen_range(0..ALL_SHAPES.len())];
        let sub_seed: u64 = rng.gen();
        let sub = gen_shape(class, count.max(32), sub_seed, noise)?;
        let offset = unit_direction(&mut rng);
        let spread = 0.9;
        for i in 0..count {
            for c in 0..3 {
                coords.set(row, c, 0.45 * sub.coords.get(i, c) + spread * offset[c]);
            }
            labels[row] = part as i32;
            row += 1;
        }
    }
    center_at_centroid(&mut coords);
    normalize_to_unit_sphere(&mut coords);
    Ok(LabeledCloud { coords, point_labels: labels, class_label: 0, sample_id: 0, seed })
}

/// Pick a uniform anchor and remove the `floor(fraction * N)` points nearest
/// to it (the anchor included); the partial keeps original relative order.
pub fn mask_anchor_crop(cloud: &Mat, fraction: f64, seed: u64) -> Result<CompletionPair> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::invalid(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = cloud.rows();
    if n == 0 {
        return Err(Error::invalid("empty cloud"));
    }
    let mut rng = rng_from_seed(seed);
    let anchor = rng.gen_range(0..n);
    let remove = (fraction * n as f64).floor() as usize;
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|r| (cloud.row_dist2(r, cloud, anchor), r))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut removed = vec![false; n];
    for &(_, r) in keyed.iter().take(remove) {
        removed[r] = true;
    }
    let mut partial = Mat::zeros(n - remove, cloud.cols());
    let mut w = 0;
    for r in 0..n {
        if !removed[r] {
            partial.row_mut(w).copy_from_slice(cloud.row(r));
            w += 1;
        }
    }
    Ok(CompletionPair {
        partial,
        full: cloud.clone(),
        anchor_index: anchor,
        removed_fraction: fraction,
    })
}

/// Random partition into `folds` near-equal parts (larger parts first),
/// deterministic per seed. Returns the fold id per sample.
pub fn split_folds(n_samples: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if n_samples < folds {
        return Err(Error::invalid(format!(
            "{n_samples} samples cannot fill {folds} folds"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    for i in (1..n_samples).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = n_samples / folds;
    let extra = n_samples % folds;
    let mut assignment = vec![0usize; n_samples];
    let mut at = 0;
    for fold in 0..folds {
        let size = base + usize::from(fold < extra);
        for _ in 0..size {
            assignment[order[at]] = fold;
            at += 1;
        }
    }
    Ok(assignment)
}

/// Train/validation/test roles over a 5-fold split: the first three folds
/// train, the fourth validates, the fifth tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldRole {
    Train,
    Validation,
    Test,
}

pub fn fold_role(fold: usize, folds: usize) -> FoldRole {
    if fold + 1 == folds {
        FoldRole::Test
    } else if fold + 2 == folds {
        FoldRole::Validation
    } else {
        FoldRole::Train
    }
}

// ---------------------------------------------------------------------------
// Cloud file format
// ---------------------------------------------------------------------------

/// Write the plain-text cloud format: a `# medpoints v1` header followed by
/// one `x y z [part_label]` line per point. The label column is included
/// when any point is labeled.
pub fn io_write(path: &Path, cloud: &LabeledCloud) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# medpoints v1 n={} class={}\n",
        cloud.len(),
        cloud.class_label
    ));
    let with_labels = cloud.has_part_labels();
    for r in 0..cloud.len() {
        let row = cloud.coords.row(r);
        if with_labels {
            out.push_str(&format!(
                "{:.9e} {:.9e} {:.9e} {}\n",
                row[0], row[1], row[2], cloud.point_labels[r]
            ));
        } else {
            out.push_str(&format!("{:.9e} {:.9e} {:.9e}\n", row[0], row[1], row[2]));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Read the plain-text cloud format; points without a label column get the
/// `-1` unlabeled sentinel.
pub fn io_read(path: &Path) -> Result<LabeledCloud> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file"))?
        .map_err(Error::Io)?;
    let mut n: Option<usize> = None;
    let mut class = 0usize;
    if !header.starts_with("# medpoints v1") {
        return Err(parse_err(1, "missing '# medpoints v1' header"));
    }
    for token in header.split_whitespace() {
        if let Some(v) = token.strip_prefix("n=") {
            n = Some(v.parse().map_err(|_| parse_err(1, format!("bad point count '{v}'")))?);
        } else if let Some(v) = token.strip_prefix("class=") {
            class = v.parse().map_err(|_| parse_err(1, format!("bad class '{v}'")))?;
        }
    }
    let n = n.ok_or_else(|| parse_err(1, "header missing n=<count>"))?;
    if n == 0 {
        return Err(parse_err(1, "point count must be positive"));
    }

    let mut coords = Mat::zeros(n, 3);
    let mut labels = vec![-1i32; n];
    let mut row = 0usize;
    let mut line_no = 1usize;
    for line in lines {
        let line = line.map_err(Error::Io)?;
        line_no += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if row >= n {
            return Err(parse_err(line_no, format!("more than n={n} points")));
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 3 or 4 columns, got {}", fields.len())));
        }
        for (c, field) in fields.iter().take(3).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad coordinate '{field}'")))?;
            coords.set(row, c, v);
        }
        if fields.len() == 4 {
            labels[row] = fields[3]
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad label '{}'", fields[3])))?;
        }
        row += 1;
    }
    if row < n {
        return Err(parse_err(line_no + 1, format!("expected {n} points, found {row}")));
    }
    Ok(LabeledCloud { coords, point_labels: labels, class_label: class, sample_id: 0, seed: 0 })
}

/// ASCII PLY export with optional per-vertex colors (for offline viewers).
pub fn write_ply(path: &Path, coords: &Mat, colors: Option<&[(u8, u8, u8)]>) -> Result<()> {
    let n = coords.rows();
    if let Some(c) = colors {
        if c.len() != n {
            return Err(Error::invalid("one color per vertex required"));
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {n}\n"));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    for r in 0..n {
        let row = coords.row(r);
        match colors {
            Some(c) => out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                row[0] as f32, row[1] as f32, row[2] as f32, c[r].0, c[r].1, c[r].2
            )),
            None => out.push_str(&format!("{} {} {}\n", row[0] as f32, row[1] as f32, row[2] as f32)),
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One sample in a dataset manifest; completion samples carry both the
/// partial (primary) path and the full-cloud path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub full_path: Option<String>,
    pub class_label: usize,
    pub fold: usize,
}

pub fn write_manifest(path: &Path, task: &str, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = format!("# medpoints-manifest v1 task={task} count={}\n", entries.len());
    for e in entries {
        match &e.full_path {
            Some(full) => out.push_str(&format!("{} {} {} {}\n", e.path, full, e.class_label, e.fold)),
            None => out.push_str(&format!("{} {} {}\n", e.path, e.class_label, e.fold)),
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(String, Vec<ManifestEntry>)> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest"))?
        .map_err(Error::Io)?;
    if !header.starts_with("# medpoints-manifest v1") {
        return Err(parse_err(1, "missing manifest header"));
    }
    let mut task = String::new();
    for token in header.split_whitespace() {
        if let Some(v) = token.strip_prefix("task=") {
            task = v.to_string();
        }
    }
    let mut entries = Vec::new();
    let mut line_no = 1;
    for line in lines {
        let line = line.map_err(Error::Io)?;
        line_no += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let entry = match fields.len() {
            3 => ManifestEntry {
                path: fields[0].to_string(),
                full_path: None,
                class_label: fields[1]
                    .parse()
                    .map_err(|_| parse_err(line_no, "bad class label"))?,
                fold: fields[2].parse().map_err(|_| parse_err(line_no, "bad fold"))?,
            },
            4 => ManifestEntry {
                path: fields[0].to_string(),
                full_path: Some(fields[1].to_string()),
                class_label: fields[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, "bad class label"))?,
                fold: fields[3].parse().map_err(|_| parse_err(line_no, "bad fold"))?,
            },
            other => {
                return Err(parse_err(line_no, format!("expected 3 or 4 columns, got {other}")))
            }
        };
        entries.push(entry);
    }
    Ok((task, entries))
}
