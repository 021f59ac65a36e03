//! Procedural wide-FoV segmentation data.
//!
//! Scenes are drawn on a pinhole canvas and then resampled through a target
//! camera by inverse mapping: each output pixel asks where it lands on the
//! source canvas. Images are bilinear, labels nearest-neighbour, and pixels
//! with no source (outside the image circle or off the canvas) get
//! [`IGNORE_LABEL`].

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::Rng;
use crate::tensor::{io, Tensor};

pub use crate::tensor::IGNORE_LABEL;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole,
    #[serde(alias = "fisheye")]
    EquidistantFisheye,
    #[serde(alias = "equirect")]
    Equirectangular,
}

impl std::str::FromStr for CameraKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pinhole" => Ok(CameraKind::Pinhole),
            "fisheye" | "equidistant_fisheye" => Ok(CameraKind::EquidistantFisheye),
            "equirect" | "equirectangular" => Ok(CameraKind::Equirectangular),
            other => Err(Error::InvalidArgument(format!("unknown camera {other:?}"))),
        }
    }
}

/// Pixel centres sit on integer coordinates; `(cx, cy)` is the principal
/// point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub kind: CameraKind,
    /// Horizontal field of view for pinhole, full cone angle for fisheye,
    /// always 360 for equirectangular.
    pub fov_deg: f64,
    /// Pixels per unit tangent (pinhole) or per radian (fisheye, equirect).
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn pinhole(height: usize, width: usize, hfov_deg: f64) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::InvalidArgument(format!("pinhole fov {hfov_deg} must be in (0, 180)")));
        }
        let (cx, cy) = centre(height, width);
        let focal = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Ok(CameraModel { kind: CameraKind::Pinhole, fov_deg: hfov_deg, focal, cx, cy })
    }

    /// Equidistant `r = f * theta`; the image circle reaches the corners.
    pub fn fisheye(height: usize, width: usize, fov_deg: f64) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg <= 180.0) {
            return Err(Error::InvalidArgument(format!("fisheye fov {fov_deg} must be in (0, 180]")));
        }
        let (cx, cy) = centre(height, width);
        let radius = (height as f64).hypot(width as f64) / 2.0;
        let focal = radius / (fov_deg.to_radians() / 2.0);
        Ok(CameraModel { kind: CameraKind::EquidistantFisheye, fov_deg, focal, cx, cy })
    }

    /// Full sphere: longitude across the width, latitude down the height with
    /// row 0 on the north pole and row `H/2` on the equator.
    pub fn equirect(height: usize, width: usize) -> Self {
        CameraModel {
            kind: CameraKind::Equirectangular,
            fov_deg: 360.0,
            focal: width as f64 / (2.0 * PI),
            cx: (width as f64 - 1.0) / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    fn half_fov(&self) -> f64 {
        self.fov_deg.to_radians() / 2.0
    }

    /// Unit viewing ray through pixel `(u, v)`; `None` outside the field of
    /// view. Equirectangular cameras have no single centre of projection
    /// relative to a pinhole canvas and are handled by [`warp_equirect`].
    pub fn ray(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (du, dv) = (u - self.cx, v - self.cy);
        match self.kind {
            CameraKind::Pinhole => Some(normalize([du / self.focal, dv / self.focal, 1.0])),
            CameraKind::EquidistantFisheye => {
                let r = du.hypot(dv);
                let theta = r / self.focal;
                if theta > self.half_fov() {
                    return None;
                }
                if r == 0.0 {
                    return Some([0.0, 0.0, 1.0]);
                }
                let s = theta.sin() / r;
                Some([du * s, dv * s, theta.cos()])
            }
            CameraKind::Equirectangular => None,
        }
    }

    /// Pixel hit by ray `d`; `None` when it falls outside the field of view.
    pub fn project(&self, d: [f64; 3]) -> Option<(f64, f64)> {
        match self.kind {
            CameraKind::Pinhole => {
                (d[2] > 0.0).then(|| (self.cx + self.focal * d[0] / d[2], self.cy + self.focal * d[1] / d[2]))
            }
            CameraKind::EquidistantFisheye => {
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let theta = (d[2] / n).clamp(-1.0, 1.0).acos();
                if theta > self.half_fov() {
                    return None;
                }
                let rho = d[0].hypot(d[1]);
                if rho == 0.0 {
                    return Some((self.cx, self.cy));
                }
                let r = self.focal * theta;
                Some((self.cx + r * d[0] / rho, self.cy + r * d[1] / rho))
            }
            CameraKind::Equirectangular => None,
        }
    }

    /// Latitude of row `v` in radians, `-pi/2` at row 0.
    pub fn latitude(&self, v: f64) -> f64 {
        (v - self.cy) / self.cy * FRAC_PI_2
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            CameraKind::Pinhole => "pinhole",
            CameraKind::EquidistantFisheye => "equidistant_fisheye",
            CameraKind::Equirectangular => "equirectangular",
        }
    }
}

fn centre(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Class names; index 0 is background.
    pub classes: Vec<String>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub camera: CameraKind,
    /// Horizontal fov of the pinhole canvas scenes are drawn on.
    pub source_fov: f64,
    pub fisheye_fov: f64,
    /// Per-pixel Gaussian noise on the rendered image.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 128,
            classes: ["background", "disc", "box", "bar", "ring", "triangle"].map(String::from).to_vec(),
            min_shapes: 4,
            max_shapes: 10,
            camera: CameraKind::EquidistantFisheye,
            source_fov: 150.0,
            fisheye_fov: 160.0,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.classes.len() < 2 || self.classes.len() > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("need 2..255 classes, got {}", self.classes.len())));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }

    pub fn source_camera(&self) -> Result<CameraModel> {
        CameraModel::pinhole(self.height, self.width, self.source_fov)
    }

    pub fn target_camera(&self) -> Result<CameraModel> {
        match self.camera {
            CameraKind::Pinhole => self.source_camera(),
            CameraKind::EquidistantFisheye => CameraModel::fisheye(self.height, self.width, self.fisheye_fov),
            CameraKind::Equirectangular => Ok(CameraModel::equirect(self.height, self.width)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` class ids or [`IGNORE_LABEL`].
    pub label: Vec<u8>,
    pub seed: u64,
    pub camera: CameraModel,
}

impl Sample {
    pub fn image_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.image.clone(), &[1, 3, self.height, self.width]).expect("image shape")
    }

    pub fn label_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.label.iter().map(|&l| l as f32).collect(), &[self.height, self.width]).expect("label shape")
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Ring { cy: f64, cx: f64, r0: f64, r1: f64 },
    /// Oriented rectangle; bars are long thin ones.
    Rect { cy: f64, cx: f64, hl: f64, hw: f64, cos: f64, sin: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).hypot(x - cx) <= r,
            Shape::Ring { cy, cx, r0, r1 } => {
                let d = (y - cy).hypot(x - cx);
                d >= r0 && d <= r1
            }
            Shape::Rect { cy, cx, hl, hw, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                (dx * cos + dy * sin).abs() <= hl && (-dx * sin + dy * cos).abs() <= hw
            }
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let s = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Base colour of each class; the background is mid grey.
fn class_colour(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.5, 0.5, 0.5],
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.3, 0.9],
        [0.95, 0.85, 0.2],
        [0.8, 0.3, 0.85],
        [0.2, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        // Spread extra classes around a deterministic hue wheel.
        let h = class as f64 * 0.618_034 % 1.0 * 2.0 * PI;
        [0.5 + 0.4 * h.cos(), 0.5 + 0.4 * (h + 2.1).cos(), 0.5 + 0.4 * (h + 4.2).cos()]
    }
}

fn random_shape(rng: &mut Rng, class: usize, h: f64, w: f64) -> Shape {
    let (cy, cx) = (rng.uniform(0.0, h), rng.uniform(0.0, w));
    let scale = h.min(w);
    let angle = rng.uniform(0.0, PI);
    // The class picks the geometry so appearance alone is not the only cue.
    match class % 5 {
        1 => Shape::Disc { cy, cx, r: rng.uniform(0.08, 0.2) * scale },
        2 => {
            Shape::Rect { cy, cx, hl: rng.uniform(0.1, 0.25) * scale, hw: rng.uniform(0.08, 0.2) * scale, cos: angle.cos(), sin: angle.sin() }
        }
        3 => Shape::Rect {
            cy,
            cx,
            hl: rng.uniform(0.3, 0.6) * scale,
            hw: rng.uniform(0.03, 0.06) * scale,
            cos: angle.cos(),
            sin: angle.sin(),
        },
        4 => {
            let r1 = rng.uniform(0.12, 0.22) * scale;
            Shape::Ring { cy, cx, r0: r1 * rng.uniform(0.45, 0.65), r1 }
        }
        _ => {
            let r = rng.uniform(0.12, 0.25) * scale;
            let p = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|a| (cy + r * (a + angle).sin(), cx + r * (a + angle).cos()));
            Shape::Triangle { p }
        }
    }
}

/// Draws a labelled pinhole scene: a shaded background and a stack of
/// shapes, each with a jittered class colour. Later shapes occlude earlier
/// ones.
pub fn render_scene(seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let np = h * w;
    let mut rng = Rng::seeded(seed);
    let mut label = vec![0u8; np];
    let mut colour = vec![[0.0f64; 3]; np];
    let tilt = [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)];
    let bg = class_colour(0);
    for i in 0..h {
        for j in 0..w {
            let shade = tilt[0] * (i as f64 / h as f64 - 0.5) + tilt[1] * (j as f64 / w as f64 - 0.5);
            colour[i * w + j] = bg.map(|c| c + shade);
        }
    }
    let count = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    for _ in 0..count {
        let class = 1 + rng.below(cfg.num_classes() - 1);
        let shape = random_shape(&mut rng, class, h as f64, w as f64);
        let base = class_colour(class);
        let tint = [0; 3].map(|_| rng.uniform(-0.08, 0.08));
        for i in 0..h {
            for j in 0..w {
                if shape.contains(i as f64, j as f64) {
                    label[i * w + j] = class as u8;
                    colour[i * w + j] = [0, 1, 2].map(|c| base[c] + tint[c]);
                }
            }
        }
    }
    let mut image = vec![0.0f32; 3 * np];
    for (p, rgb) in colour.iter().enumerate() {
        for c in 0..3 {
            let v = rgb[c] + cfg.noise * rng.normal();
            image[c * np + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample { height: h, width: w, image, label, seed, camera: cfg.source_camera()? })
}

/// Coordinates this close to a pixel centre are treated as exact.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Resamples `src` onto a `height x width` grid through `map`, which sends an
/// output pixel to fractional source coordinates `(x, y)` or `None`.
fn remap(
    src: &Sample,
    camera: CameraModel,
    map: impl Fn(f64, f64) -> Option<(f64, f64)>,
) -> Sample {
    let (h, w) = (src.height, src.width);
    let np = h * w;
    let mut image = vec![0.0f32; 3 * np];
    let mut label = vec![IGNORE_LABEL; np];
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    for v in 0..h {
        for u in 0..w {
            let Some((x, y)) = map(u as f64, v as f64) else { continue };
            let (x, y) = (snap(x), snap(y));
            if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
                continue;
            }
            let p = v * w + u;
            label[p] = src.label[y.round() as usize * w + x.round() as usize];
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for c in 0..3 {
                let plane = &src.image[c * np..(c + 1) * np];
                let top = (1.0 - fx) * plane[y0 * w + x0] as f64 + fx * plane[y0 * w + x1] as f64;
                let bot = (1.0 - fx) * plane[y1 * w + x0] as f64 + fx * plane[y1 * w + x1] as f64;
                image[c * np + p] = ((1.0 - fy) * top + fy * bot) as f32;
            }
        }
    }
    Sample { height: h, width: w, image, label, seed: src.seed, camera }
}

fn require_pinhole(src: &Sample) -> Result<CameraModel> {
    if src.camera.kind != CameraKind::Pinhole {
        return Err(Error::InvalidArgument(format!("warps start from a pinhole sample, got {}", src.camera.name())));
    }
    Ok(src.camera)
}

/// Reprojects a pinhole sample into another pinhole or fisheye camera by
/// ray casting.
pub fn warp_to(src: &Sample, target: &CameraModel) -> Result<Sample> {
    let source = require_pinhole(src)?;
    match target.kind {
        CameraKind::Pinhole | CameraKind::EquidistantFisheye => {
            if target.kind == CameraKind::EquidistantFisheye && target.fov_deg > 180.0 {
                return Err(Error::InvalidArgument(format!("fisheye fov {} exceeds 180", target.fov_deg)));
            }
            Ok(remap(src, *target, |u, v| target.ray(u, v).and_then(|d| source.project(d))))
        }
        CameraKind::Equirectangular => warp_equirect(src, target),
    }
}

pub fn warp_fisheye(src: &Sample, model: &CameraModel) -> Result<Sample> {
    if model.kind != CameraKind::EquidistantFisheye {
        return Err(Error::InvalidArgument(format!("expected a fisheye camera, got {}", model.name())));
    }
    warp_to(src, model)
}

/// Reads the canvas as a sinusoidal (equal-area) map of the sphere, centred
/// on column `cx`, and re-plots it in longitude/latitude. Rows near the poles
/// are stretched out of a few source pixels.
pub fn warp_equirect(src: &Sample, model: &CameraModel) -> Result<Sample> {
    require_pinhole(src)?;
    if model.kind != CameraKind::Equirectangular {
        return Err(Error::InvalidArgument(format!("expected an equirectangular camera, got {}", model.name())));
    }
    let m = *model;
    Ok(remap(src, m, move |u, v| {
        // cos(pi/2) is not exactly zero in floating point.
        let c = m.latitude(v).cos();
        let c = if c.abs() < SNAP { 0.0 } else { c };
        Some((m.cx + (u - m.cx) * c, v))
    }))
}

/// Renders scene `seed` and warps it through the configured camera.
pub fn make_sample(seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    let scene = render_scene(seed, cfg)?;
    warp_to(&scene, &cfg.target_camera()?)
}

/// Seed of sample `index` under `master`.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_path: String,
    pub label_path: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub camera: CameraModel,
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

/// Number of training samples out of `n`: the first 80%, rounded up.
pub fn train_count(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Writes `n` samples as DMTS files under `dir` with a JSON manifest.
/// Images are `[1, 3, H, W]`; labels are `[H, W]` float tensors holding
/// integer ids.
pub fn gen_dataset(n: usize, dir: impl AsRef<Path>, seed: u64, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let n_train = train_count(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample_seed(seed, i);
        let sample = make_sample(s, cfg)?;
        let image_path = format!("images/{i:05}.dmts");
        let label_path = format!("labels/{i:05}.dmts");
        io::save(&sample.image_tensor(), dir.join(&image_path))?;
        io::save(&sample.label_tensor(), dir.join(&label_path))?;
        let split = if i < n_train { Split::Train } else { Split::Val };
        samples.push(SampleEntry { image_path, label_path, split, seed: s });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        camera: cfg.target_camera()?,
        classes: cfg.classes.clone(),
        height: cfg.height,
        width: cfg.width,
        seed,
        samples,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Manifest plus its directory, with samples loaded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Accepts the dataset directory or the manifest file itself.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::InvalidArgument(format!("no dataset manifest at {}: {e}", file.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} unsupported", manifest.version)));
        }
        Ok(Dataset { root, manifest })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn load_entry(&self, e: &SampleEntry) -> Result<Sample> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let image: Tensor<f32> = io::load(self.root.join(&e.image_path))?;
        let label: Tensor<f32> = io::load(self.root.join(&e.label_path))?;
        if image.shape() != [1, 3, h, w] || label.shape() != [h, w] {
            return Err(Error::Shape(format!("{}: image {:?}, label {:?}", e.image_path, image.shape(), label.shape())));
        }
        let k = self.num_classes();
        let label = label
            .data()
            .iter()
            .map(|&v| {
                let id = v as u8;
                if id as f32 != v || (id != IGNORE_LABEL && id as usize >= k) {
                    Err(Error::Format(format!("{}: bad label value {v}", e.label_path)))
                } else {
                    Ok(id)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample { height: h, width: w, image: image.to_vec(), label, seed: e.seed, camera: self.manifest.camera })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.samples.iter().filter(|e| e.split == split).map(|e| self.load_entry(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    fn label_set(labels: &[u8]) -> std::collections::BTreeSet<u8> {
        labels.iter().copied().filter(|&l| l != IGNORE_LABEL).collect()
    }

    #[test]
    fn render_is_deterministic_and_valid() {
        let a = render_scene(11, &cfg()).unwrap();
        assert_eq!(a, render_scene(11, &cfg()).unwrap());
        assert_ne!(a.image, render_scene(12, &cfg()).unwrap().image);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.label.iter().all(|&l| (l as usize) < cfg().num_classes()));
    }

    #[test]
    fn no_shapes_is_all_background() {
        let c = SynthConfig { min_shapes: 0, max_shapes: 0, ..cfg() };
        assert!(render_scene(3, &c).unwrap().label.iter().all(|&l| l == 0));
    }

    #[test]
    fn busy_scenes_hold_several_classes() {
        let c = SynthConfig { min_shapes: 10, max_shapes: 10, ..cfg() };
        for seed in 0..50 {
            let s = render_scene(seed, &c).unwrap();
            let ids: Vec<u8> = label_set(&s.label).into_iter().filter(|&l| l != 0).collect();
            assert!(ids.len() >= 2, "seed {seed}: {ids:?}");
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let fish = CameraModel::fisheye(64, 128, 180.0).unwrap();
        assert_eq!(fish.ray(fish.cx, fish.cy), Some([0.0, 0.0, 1.0]));
        assert_eq!(fish.project([0.0, 0.0, 1.0]), Some((fish.cx, fish.cy)));
        // r = f * theta off axis
        let theta: f64 = 0.7;
        let (u, v) = fish.project([theta.sin(), 0.0, theta.cos()]).unwrap();
        assert!((u - fish.cx - fish.focal * theta).abs() < 1e-9 && v == fish.cy);
        assert!(CameraModel::fisheye(64, 128, 190.0).is_err());
    }

    #[test]
    fn project_inverts_ray() {
        let mut rng = Rng::seeded(5);
        for cam in [CameraModel::fisheye(64, 128, 160.0).unwrap(), CameraModel::pinhole(64, 128, 120.0).unwrap()] {
            for _ in 0..200 {
                let (u, v) = (rng.uniform(0.0, 127.0), rng.uniform(0.0, 63.0));
                if let Some(d) = cam.ray(u, v) {
                    let (x, y) = cam.project(d).unwrap();
                    assert!((x - u).abs() < 1e-9 && (y - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let s = render_scene(4, &cfg()).unwrap();
        assert_eq!(warp_to(&s, &s.camera).unwrap(), s);
    }

    #[test]
    fn fisheye_rejects_wide_cones_and_masks_outside_circle() {
        let s = render_scene(4, &cfg()).unwrap();
        let mut m = CameraModel::fisheye(64, 128, 180.0).unwrap();
        m.fov_deg = 200.0;
        assert!(warp_fisheye(&s, &m).is_err());
        let narrow = CameraModel::fisheye(64, 128, 90.0).unwrap();
        let out = warp_fisheye(&s, &narrow).unwrap();
        for v in 0..64 {
            for u in 0..128 {
                if narrow.ray(u as f64, v as f64).is_none() {
                    assert_eq!(out.label[v * 128 + u], IGNORE_LABEL);
                }
            }
        }
        assert!(warp_fisheye(&s, &CameraModel::equirect(64, 128)).is_err());
    }

    /// RMS distance of points from their total-least-squares line.
    fn line_residual(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let (my, mx) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
        for &(y, x) in pts {
            syy += (y - my) * (y - my);
            sxx += (x - mx) * (x - mx);
            sxy += (y - my) * (x - mx);
        }
        let tr = syy + sxx;
        let det = syy * sxx - sxy * sxy;
        let smallest = tr / 2.0 - (tr * tr / 4.0 - det).max(0.0).sqrt();
        (smallest / n).sqrt()
    }

    #[test]
    fn straight_lines_bend() {
        // A one-pixel line across the canvas, well above the centre.
        let c = cfg();
        let mut s = render_scene(0, &SynthConfig { min_shapes: 0, max_shapes: 0, ..c.clone() }).unwrap();
        for u in 0..c.width {
            s.label[12 * c.width + u] = 3;
        }
        let src_pts: Vec<_> = (0..c.width).map(|u| (12.0, u as f64)).collect();
        assert!(line_residual(&src_pts) < 1e-9);
        let out = warp_fisheye(&s, &c.target_camera().unwrap()).unwrap();
        let pts: Vec<_> = (0..c.height * c.width)
            .filter(|&p| out.label[p] == 3)
            .map(|p| ((p / c.width) as f64, (p % c.width) as f64))
            .collect();
        assert!(pts.len() > 20);
        assert!(line_residual(&pts) > 1.0, "{}", line_residual(&pts));
    }

    #[test]
    fn warps_never_invent_classes() {
        let c = cfg();
        for seed in 0..20 {
            let s = render_scene(seed, &c).unwrap();
            let before = label_set(&s.label);
            for target in [c.target_camera().unwrap(), CameraModel::equirect(64, 128)] {
                let out = warp_to(&s, &target).unwrap();
                assert!(label_set(&out.label).is_subset(&before));
                assert!(out.image.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn equator_row_matches_source() {
        let c = cfg();
        let eq = CameraModel::equirect(c.height, c.width);
        let mid = c.height / 2;
        assert_eq!(eq.latitude(mid as f64), 0.0);
        for seed in 0..5 {
            let s = render_scene(seed, &c).unwrap();
            let out = warp_equirect(&s, &eq).unwrap();
            let np = c.height * c.width;
            for ch in 0..3 {
                for u in 0..c.width {
                    let p = ch * np + mid * c.width + u;
                    assert!((out.image[p] - s.image[p]).abs() < 1e-3);
                }
            }
        }
    }

    fn row_variance(img: &[f32], np: usize, w: usize, row: usize) -> f64 {
        (0..3)
            .map(|c| {
                let r = &img[c * np + row * w..][..w];
                let m = r.iter().map(|&v| v as f64).sum::<f64>() / w as f64;
                r.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / w as f64
            })
            .sum()
    }

    #[test]
    fn poles_collapse() {
        let c = cfg();
        let (h, w) = (c.height, c.width);
        let eq = CameraModel::equirect(h, w);
        let (mut top, mut bottom, mut middle) = (0.0, 0.0, 0.0);
        for seed in 0..10 {
            let out = warp_equirect(&render_scene(seed, &c).unwrap(), &eq).unwrap();
            top += row_variance(&out.image, h * w, w, 0);
            bottom += row_variance(&out.image, h * w, w, h - 1);
            middle += row_variance(&out.image, h * w, w, h / 2);
            // The north pole row samples a single source pixel.
            assert!(out.label[..w].iter().all(|&l| l == out.label[0]));
        }
        assert!(top < 1e-12, "{top}");
        assert!(bottom < 0.25 * middle, "{bottom} vs {middle}");
    }

    #[test]
    fn dataset_round_trip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig { height: 32, width: 64, ..cfg() };
        let m = gen_dataset(10, dir.path(), 9, &c).unwrap();
        assert_eq!(m.samples.len(), 10);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for e in &m.samples {
            let s = ds.load_entry(e).unwrap();
            assert_eq!(s, make_sample(e.seed, &c).unwrap());
        }
        assert_eq!(ds.load_split(Split::Train).unwrap().len(), 8);
        assert_eq!(ds.load_split(Split::Val).unwrap().len(), 2);
        assert_eq!((train_count(100), 100 - train_count(100)), (80, 20));

        let text = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let other = tempfile::tempdir().unwrap();
        gen_dataset(10, other.path(), 9, &c).unwrap();
        assert_eq!(fs::read(other.path().join(MANIFEST_FILE)).unwrap(), text);
        assert_eq!(
            fs::read(other.path().join("images/00003.dmts")).unwrap(),
            fs::read(dir.path().join("images/00003.dmts")).unwrap()
        );
    }
}
