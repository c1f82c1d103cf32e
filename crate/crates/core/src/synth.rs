//! Synthetic multi-domain segmentation benchmark.
//!
//! A scene is a background with an elliptic disk nested inside an elliptic
//! annulus. Domains differ only in intensity: labels are rendered once from
//! the pose and never touched by a domain transform.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap};

pub const MAX_POSE_ATTEMPTS: usize = 100;

pub const BACKGROUND: u8 = 0;
pub const DISK: u8 = 1;
pub const ANNULUS: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Maximum offset of the centre from the grid middle, in pixels.
    pub center_jitter: f64,
    /// Disk radius range; the ellipse keeps area `pi r^2`.
    pub inner_radius: (f64, f64),
    pub ring_thickness: (f64, f64),
    /// Ratio of major to minor semi-axis.
    pub axis_ratio: (f64, f64),
    pub rotation: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            classes: 3,
            center_jitter: 6.0,
            inner_radius: (7.0, 12.0),
            ring_thickness: (4.0, 7.0),
            axis_ratio: (1.0, 1.3),
            rotation: (0.0, PI),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.inner_radius, self.ring_thickness, self.axis_ratio, self.rotation];
        if ranges
            .iter()
            .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(Error::Config("scene ranges must be finite with lo <= hi".into()));
        }
        if self.classes != 3 {
            return Err(Error::Config(format!("scene renders 3 classes, got {}", self.classes)));
        }
        if self.height < 8 || self.width < 8 || self.inner_radius.0 <= 0.0 || self.axis_ratio.0 < 1.0 {
            return Err(Error::Config(
                "scene needs an 8x8 grid, positive radii and axis ratio >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled geometry of one case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub thickness: f64,
    pub axis_ratio: f64,
    pub angle: f64,
}

impl Pose {
    pub fn disk_area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    pub fn annulus_area(&self) -> f64 {
        let outer = self.radius + self.thickness;
        PI * (outer * outer - self.radius * self.radius)
    }

    /// Largest semi-axis of the outer ellipse.
    fn extent(&self) -> f64 {
        (self.radius + self.thickness) * self.axis_ratio.sqrt()
    }

    /// Class at a point, by the analytic boundaries.
    pub fn class_at(&self, py: f64, px: f64) -> u8 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (py - self.cy, px - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let q = self.axis_ratio.sqrt();
        // squared radius in the area-preserving frame
        let r2 = (u / q).powi(2) + (v * q).powi(2);
        let outer = self.radius + self.thickness;
        if r2 <= self.radius * self.radius {
            DISK
        } else if r2 <= outer * outer {
            ANNULUS
        } else {
            BACKGROUND
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_pose(scene: &SceneSpec, rng: &mut impl Rng) -> Result<Pose> {
    let (h, w) = (scene.height as f64, scene.width as f64);
    for _ in 0..MAX_POSE_ATTEMPTS {
        let j = scene.center_jitter;
        let pose = Pose {
            cy: h / 2.0 + uniform(rng, (-j, j)),
            cx: w / 2.0 + uniform(rng, (-j, j)),
            radius: uniform(rng, scene.inner_radius),
            thickness: uniform(rng, scene.ring_thickness),
            axis_ratio: uniform(rng, scene.axis_ratio),
            angle: uniform(rng, scene.rotation),
        };
        let e = pose.extent() + 1.0;
        if pose.cy - e >= 0.0 && pose.cy + e <= h && pose.cx - e >= 0.0 && pose.cx + e <= w {
            return Ok(pose);
        }
    }
    Err(Error::Generation(format!(
        "no pose fits a {}x{} grid after {MAX_POSE_ATTEMPTS} attempts",
        scene.height, scene.width
    )))
}

/// Pixel `(y, x)` belongs to the structure containing its centre.
pub fn rasterize(scene: &SceneSpec, pose: &Pose) -> LabelMap {
    let labels = (0..scene.height * scene.width)
        .map(|i| pose.class_at((i / scene.width) as f64 + 0.5, (i % scene.width) as f64 + 0.5))
        .collect();
    LabelMap::new(scene.height, scene.width, scene.classes, labels).expect("rasterized labels are below K")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub class_means: Vec<f64>,
    pub class_stds: Vec<f64>,
    pub gamma: (f64, f64),
    pub contrast_scale: (f64, f64),
    pub contrast_offset: (f64, f64),
    pub bias_amplitude: f64,
    /// Half-periods of the bias field across the grid.
    pub bias_smoothness: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    /// Identity transforms over the source tissue model.
    pub fn source() -> Self {
        DomainSpec {
            name: "source".into(),
            class_means: vec![0.2, 0.5, 0.8],
            class_stds: vec![0.05, 0.05, 0.05],
            gamma: (1.0, 1.0),
            contrast_scale: (1.0, 1.0),
            contrast_offset: (0.0, 0.0),
            bias_amplitude: 0.0,
            bias_smoothness: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn mild_noise() -> Self {
        DomainSpec {
            name: "mild-noise".into(),
            noise_std: 0.08,
            ..Self::source()
        }
    }

    pub fn gamma_half() -> Self {
        DomainSpec {
            name: "gamma-0.5".into(),
            gamma: (0.5, 0.5),
            ..Self::source()
        }
    }

    pub fn strong_bias_field() -> Self {
        DomainSpec {
            name: "strong-bias-field".into(),
            bias_amplitude: 0.6,
            ..Self::source()
        }
    }

    pub fn contrast_inverted() -> Self {
        DomainSpec {
            name: "contrast-inverted".into(),
            contrast_scale: (-1.0, -1.0),
            contrast_offset: (1.0, 1.0),
            ..Self::source()
        }
    }

    /// Target domains ordered by severity; the last is the hardest.
    pub fn default_targets() -> Vec<Self> {
        vec![
            Self::mild_noise(),
            Self::gamma_half(),
            Self::strong_bias_field(),
            Self::contrast_inverted(),
        ]
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain {}: {m}", self.name)));
        if self.class_means.len() != classes || self.class_stds.len() != classes {
            return bad("need one mean and std per class");
        }
        if self.class_stds.iter().any(|s| !(*s >= 0.0)) || !(self.noise_std >= 0.0) {
            return bad("standard deviations must be nonnegative");
        }
        if !(self.gamma.0 > 0.0 && self.gamma.0 <= self.gamma.1) {
            return bad("gamma range must be positive and ordered");
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return bad("bias amplitude must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Min-max to `[0, 1]`; a constant image maps to zeros.
pub fn min_max_normalize(img: &ImageGrid) -> ImageGrid {
    let (lo, hi) = img.min_max();
    if hi > lo {
        img.map(|v| (v - lo) / (hi - lo))
    } else {
        img.map(|_| 0.0)
    }
}

/// Zero mean, unit population std; a constant image maps to zeros.
pub fn z_score(img: &ImageGrid) -> ImageGrid {
    let (mean, std) = (img.mean(), img.std());
    if std > 0.0 {
        img.map(|v| (v - mean) / std)
    } else {
        img.map(|_| 0.0)
    }
}

/// Smooth field in `[-1, 1]` varying along both axes.
pub fn bias_field(h: usize, w: usize, smoothness: f64, rng: &mut impl Rng) -> ImageGrid {
    let (py, px) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    ImageGrid::from_fn(h, w, |y, x| {
        let fy = (PI * smoothness * (y as f64 + 0.5) / h as f64 + py).cos();
        let fx = (PI * smoothness * (x as f64 + 0.5) / w as f64 + px).cos();
        0.5 * (fy + fx)
    })
}

/// min-max, gamma, contrast affine, bias field, noise, z-score, in that order.
pub fn apply_domain_shift(img: &ImageGrid, domain: &DomainSpec, rng: &mut impl Rng) -> ImageGrid {
    let gamma = uniform(rng, domain.gamma);
    let scale = uniform(rng, domain.contrast_scale);
    let offset = uniform(rng, domain.contrast_offset);
    let (h, w) = img.dims();
    let mut v = min_max_normalize(img);
    if gamma != 1.0 {
        v = v.map(|p| p.powf(gamma));
    }
    if scale != 1.0 || offset != 0.0 {
        v = v.map(|p| scale * p + offset);
    }
    if domain.bias_amplitude > 0.0 {
        let f = bias_field(h, w, domain.bias_smoothness, rng);
        v = v
            .zip_with(&f, |p, b| p * (1.0 + domain.bias_amplitude * b))
            .expect("same grid");
    }
    if domain.noise_std > 0.0 {
        let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
        v = ImageGrid::new(
            h,
            w,
            v.data()
                .iter()
                .zip(&noise)
                .map(|(p, n)| p + domain.noise_std * n)
                .collect(),
        )
        .expect("same grid");
    }
    z_score(&v)
}

/// Piecewise-constant tissue intensities with per-class texture, before any shift.
pub fn render_base(labels: &LabelMap, domain: &DomainSpec, rng: &mut impl Rng) -> ImageGrid {
    let (h, w) = (labels.height(), labels.width());
    let data = labels
        .labels()
        .iter()
        .map(|&k| {
            let e: f64 = StandardNormal.sample(rng);
            domain.class_means[k as usize] + domain.class_stds[k as usize] * e
        })
        .collect();
    ImageGrid::new(h, w, data).expect("label grid dims")
}

pub fn generate_case(scene: &SceneSpec, domain: &DomainSpec, rng: &mut impl Rng) -> Result<(ImageGrid, LabelMap)> {
    scene.validate()?;
    domain.validate(scene.classes)?;
    let pose = sample_pose(scene, rng)?;
    let labels = rasterize(scene, &pose);
    let base = render_base(&labels, domain, rng);
    Ok((apply_domain_shift(&base, domain, rng), labels))
}

/// Stream `index` of the ChaCha generator keyed by `seed`.
pub fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Test cases per target domain.
    pub target: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 20,
            test: 30,
            target: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub split: String,
    pub domain: String,
    pub seed: u64,
    pub image_path: String,
    pub label_path: String,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Every planned case in manifest order: source train, val, test, then targets.
pub fn plan_cases(targets: &[DomainSpec], counts: SplitCounts, seed: u64) -> Vec<ManifestRow> {
    let mut groups = vec![
        ("train", "source".to_string(), counts.train),
        ("val", "source".to_string(), counts.val),
        ("test", "source".to_string(), counts.test),
    ];
    groups.extend(targets.iter().map(|d| ("test", d.name.clone(), counts.target)));
    let mut rows = Vec::new();
    for (split, domain, n) in groups {
        for i in 0..n {
            let case_id = format!("{domain}-{split}-{i:04}");
            rows.push(ManifestRow {
                image_path: format!("images/{case_id}.bsten"),
                label_path: format!("labels/{case_id}.pgm"),
                case_id,
                split: split.into(),
                domain: domain.clone(),
                seed,
            });
        }
    }
    rows
}

/// Writes images, labels and the manifest under `root`; returns the manifest.
pub fn build_benchmark(
    root: &Path,
    scene: &SceneSpec,
    targets: &[DomainSpec],
    counts: SplitCounts,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    scene.validate()?;
    let source = DomainSpec::source();
    source.validate(scene.classes)?;
    for d in targets {
        d.validate(scene.classes)?;
        if d.name == source.name {
            return Err(Error::Config("target domain may not be named \"source\"".into()));
        }
    }
    for dir in ["images", "labels"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let rows = plan_cases(targets, counts, seed);
    for (index, row) in rows.iter().enumerate() {
        let domain = if row.domain == source.name {
            &source
        } else {
            targets.iter().find(|d| d.name == row.domain).expect("planned domain")
        };
        let (img, labels) = generate_case(scene, domain, &mut case_rng(seed, index as u64))?;
        let ip = root.join(&row.image_path);
        let t = bayeseg_tensor::Tensor::new(vec![scene.height, scene.width], img.data().to_vec())?;
        fs::write(&ip, t.to_bytes()).map_err(|e| Error::io(&ip, e))?;
        let lp = root.join(&row.label_path);
        fs::write(&lp, encode_pgm(&labels)).map_err(|e| Error::io(&lp, e))?;
    }
    write_manifest(&root.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Binary PGM with `maxval = K - 1`.
pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", labels.width(), labels.height(), labels.classes() - 1).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

pub fn decode_pgm(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    let bad = |m: &str| Error::Data(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header field is not a number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval + 1 != classes {
        return Err(bad(&format!("maxval {maxval} does not match {classes} classes")));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", data.len(), w * h)));
    }
    LabelMap::new(h, w, classes, data.to_vec())
}

/// One case loaded into memory.
#[derive(Clone, Debug)]
pub struct Case {
    pub row: ManifestRow,
    pub image: ImageGrid,
    pub labels: LabelMap,
}

/// A benchmark directory read back through its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: usize,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn load(root: &Path, classes: usize) -> Result<Self> {
        let rows = read_manifest(&root.join(MANIFEST_FILE))?;
        let cases = rows
            .into_iter()
            .map(|row| {
                let ip = root.join(&row.image_path);
                let bytes = fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
                let t = bayeseg_tensor::Tensor::<f64>::from_bytes(&bytes)
                    .map_err(|e| Error::Data(format!("{}: {e}", ip.display())))?;
                let d = t.dims();
                if d.len() != 2 {
                    return Err(Error::Data(format!(
                        "{}: expected a 2-D image, got {d:?}",
                        ip.display()
                    )));
                }
                let image = ImageGrid::new(d[0], d[1], t.data().to_vec())?;
                let lp = root.join(&row.label_path);
                let lb = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
                let labels = decode_pgm(&lb, classes).map_err(|e| Error::Data(format!("{}: {e}", lp.display())))?;
                if labels.height() != image.height() || labels.width() != image.width() {
                    return Err(Error::Data(format!("{}: label and image dims differ", row.case_id)));
                }
                Ok(Case { row, image, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            classes,
            cases,
        })
    }

    pub fn split(&self, split: &str, domain: &str) -> Vec<&Case> {
        self.cases
            .iter()
            .filter(|c| c.row.split == split && c.row.domain == domain)
            .collect()
    }

    /// Domains in manifest order, source first.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cases {
            if !out.contains(&c.row.domain) {
                out.push(c.row.domain.clone());
            }
        }
        out
    }
}
