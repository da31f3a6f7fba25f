//! Deterministic synthetic benchmark: flat pinhole-style source scenes and
//! wide equirectangular-style target scenes with latitude-dependent
//! horizontal stretch, seam wraparound and a colour shift.
//!
//! Every image is a pure function of `(spec, id)`; per-image random streams
//! are derived from the spec seed and the image id.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use dapass_tensor::{Tensor, IGNORE_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 8] = [
    "ceiling", "chair", "door", "floor", "sofa", "table", "wall", "window",
];

/// Low-frequency classes, reported as a separate mIoU group.
pub const MINORITY_CLASSES: [usize; 5] = [1, 2, 4, 5, 7];

/// Frequency rank of each class id, 0 = most frequent.
const FREQUENCY_RANK: [usize; 8] = [0, 3, 5, 2, 6, 4, 1, 7];

/// Base RGB colour per class.
const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.85, 0.80],
    [0.80, 0.30, 0.20],
    [0.55, 0.35, 0.15],
    [0.40, 0.40, 0.45],
    [0.25, 0.55, 0.30],
    [0.75, 0.60, 0.25],
    [0.60, 0.65, 0.80],
    [0.20, 0.45, 0.75],
];

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Flat,
    Rows(f32),
    Cols(f32),
    Checker(f32),
}

const PATTERNS: [Pattern; 8] = [
    Pattern::Flat,
    Pattern::Checker(6.0),
    Pattern::Cols(4.0),
    Pattern::Rows(5.0),
    Pattern::Rows(3.0),
    Pattern::Checker(3.0),
    Pattern::Flat,
    Pattern::Cols(3.0),
];

const PATTERN_AMPLITUDE: f32 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Single-channel class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Invalid(format!("label map {h}x{w} with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Distinct non-ignore classes present.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.data.iter().copied().filter(|&l| l != IGNORE_LABEL).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.w + left..y * self.w + left + w]);
        }
        Self { h, w, data }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub domain: Domain,
    pub split: Split,
}

/// A target image with its ground truth withheld.
#[derive(Clone, Debug)]
pub struct UnlabeledImage {
    pub id: String,
    pub image: Tensor<f32>,
}

/// Target ground truth, readable only through an instrumented accessor.
#[derive(Debug, Default)]
pub struct LabelStore {
    labels: Vec<(String, LabelMap)>,
    reads: AtomicUsize,
}

impl LabelStore {
    pub fn new(labels: Vec<(String, LabelMap)>) -> Self {
        Self {
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn get(&self, id: &str) -> Option<&LabelMap> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.labels.iter().find(|(i, _)| i == id).map(|(_, l)| l)
    }

    /// Number of label reads since construction.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Separates images from ground truth.
pub fn withhold_labels(samples: Vec<Sample>) -> (Vec<UnlabeledImage>, LabelStore) {
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        labels.push((s.id.clone(), s.label));
        images.push(UnlabeledImage {
            id: s.id,
            image: s.image,
        });
    }
    (images, LabelStore::new(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub classes: usize,
    /// Geometric decay of class frequency by rank.
    pub decay: f64,
    /// `[height, width]`.
    pub source_size: [usize; 2],
    pub target_size: [usize; 2],
    /// Object count range for a source-width image; scaled with width.
    pub objects: [usize; 2],
    pub noise_sigma: f64,
    pub distortion: bool,
    pub phi_max_deg: f64,
    pub stretch_clamp: f64,
    pub color_shift: bool,
    pub hue_shift_deg: f64,
    pub brightness_shift: f64,
    /// Per-image shift severity is drawn uniformly from this range.
    pub severity: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 8,
            decay: 0.65,
            source_size: [64, 128],
            target_size: [64, 256],
            objects: [4, 7],
            noise_sigma: 0.05,
            distortion: true,
            phi_max_deg: 60.0,
            stretch_clamp: 3.0,
            color_shift: true,
            hue_shift_deg: 40.0,
            brightness_shift: -0.12,
            severity: [0.0, 0.9],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > PALETTE.len() {
            return bad(format!("classes must be in [2, {}]", PALETTE.len()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.objects[0] > self.objects[1] {
            return bad("objects range is inverted".into());
        }
        for [h, w] in [self.source_size, self.target_size] {
            if h < 16 || w < 16 {
                return bad(format!("image size {h}x{w} too small"));
            }
        }
        if self.target_size[1] * self.source_size[0] <= self.source_size[1] * self.target_size[0] {
            return bad("target aspect ratio must be wider than source".into());
        }
        if self.stretch_clamp < 1.0 || !(0.0..90.0).contains(&self.phi_max_deg) {
            return bad("invalid distortion profile".into());
        }
        if self.severity[0] > self.severity[1] || self.severity[0] < 0.0 {
            return bad("severity range invalid".into());
        }
        let freqs = self.class_frequencies();
        let mut sorted = freqs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted[..self.classes / 2].iter().any(|&f| f < 0.005) {
            return bad("minority classes fall below 0.5% expected share".into());
        }
        Ok(())
    }

    /// Expected share per class id; sums to 1.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let rank = |c: usize| {
            if self.classes == 8 {
                FREQUENCY_RANK[c]
            } else {
                c
            }
        };
        let raw: Vec<f64> = (0..self.classes).map(|c| self.decay.powi(rank(c) as i32)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|f| f / total).collect()
    }

    fn size(&self, domain: Domain) -> (usize, usize) {
        let [h, w] = match domain {
            Domain::Source => self.source_size,
            Domain::Target => self.target_size,
        };
        (h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub class: u8,
    pub shape: Shape,
    /// Anchor in pixel coordinates.
    pub cx: f32,
    pub cy: f32,
    pub half_w: f32,
    pub half_h: f32,
}

/// Layered scene description: horizontal bands under a list of objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(first_row, class)`, ascending; the first band starts at row 0.
    pub bands: Vec<(usize, u8)>,
    pub objects: Vec<Object>,
}

/// How a scene is rasterised.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    /// Objects wrap across the left/right border.
    pub wrap: bool,
    /// Max latitude in degrees at the top/bottom rows; 0 disables the stretch.
    pub phi_max_deg: f64,
    pub stretch_clamp: f64,
}

impl Projection {
    pub const PINHOLE: Projection = Projection {
        wrap: false,
        phi_max_deg: 0.0,
        stretch_clamp: 1.0,
    };

    /// Horizontal stretch `sec(φ · φ_max)` for row `y`, clamped.
    pub fn stretch(&self, y: usize, h: usize) -> f32 {
        if self.phi_max_deg == 0.0 {
            return 1.0;
        }
        let lat = ((y as f64 + 0.5) / h as f64) * 2.0 - 1.0;
        let angle = (lat * self.phi_max_deg).to_radians();
        (1.0 / angle.cos()).min(self.stretch_clamp) as f32
    }
}

fn pattern_value(p: Pattern, u: f32, v: f32) -> f32 {
    let wave = |t: f32, period: f32| if (t / period).floor() as i64 % 2 == 0 { 1.0 } else { -1.0 };
    match p {
        Pattern::Flat => 0.0,
        Pattern::Rows(period) => wave(v, period),
        Pattern::Cols(period) => wave(u, period),
        Pattern::Checker(period) => wave(u, period) * wave(v, period),
    }
}

/// Which layer covers a pixel and its local (un-stretched) coordinates.
fn hit(scene: &Scene, proj: &Projection, x: usize, y: usize, h: usize, w: usize) -> (u8, f32, f32) {
    let s = proj.stretch(y, h);
    let px = x as f32 + 0.5;
    let py = y as f32 + 0.5;
    for obj in scene.objects.iter().rev() {
        let mut dx = px - obj.cx;
        if proj.wrap {
            let wf = w as f32;
            dx = (dx + wf / 2.0).rem_euclid(wf) - wf / 2.0;
        }
        let u = dx / s;
        let v = py - obj.cy;
        let inside = match obj.shape {
            Shape::Rect => u.abs() <= obj.half_w && v.abs() <= obj.half_h,
            Shape::Ellipse => (u / obj.half_w).powi(2) + (v / obj.half_h).powi(2) <= 1.0,
        };
        if inside {
            return (obj.class, u, v);
        }
    }
    let class = scene
        .bands
        .iter()
        .rev()
        .find(|(start, _)| *start <= y)
        .map_or(0, |b| b.1);
    let mut dx = px - w as f32 / 2.0;
    if proj.wrap {
        dx = dx.rem_euclid(w as f32);
    }
    (class, dx / s, py)
}

/// Rasterises the label map of a scene.
pub fn render_labels(scene: &Scene, proj: &Projection, h: usize, w: usize) -> LabelMap {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(hit(scene, proj, x, y, h, w).0);
        }
    }
    LabelMap { h, w, data }
}

/// Colour transform: rotation about the grey axis plus a brightness offset.
#[derive(Clone, Copy, Debug)]
pub struct ColorShift {
    matrix: [[f32; 3]; 3],
    offset: f32,
}

impl ColorShift {
    pub const IDENTITY: ColorShift = ColorShift {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: 0.0,
    };

    pub fn new(hue_deg: f64, brightness: f64) -> Self {
        let (s, c) = hue_deg.to_radians().sin_cos();
        let k = (1.0 - c) / 3.0;
        let r = (1.0f64 / 3.0).sqrt() * s;
        let m = [
            [c + k, k - r, k + r],
            [k + r, c + k, k - r],
            [k - r, k + r, c + k],
        ];
        Self {
            matrix: m.map(|row| row.map(|v| v as f32)),
            offset: brightness as f32,
        }
    }

    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        let m = &self.matrix;
        std::array::from_fn(|i| m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2] + self.offset)
    }
}

/// Rasterises the image of a scene; noise comes from `rng`.
pub fn render_image(
    scene: &Scene,
    proj: &Projection,
    shift: &ColorShift,
    noise_sigma: f64,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let noise = Normal::new(0.0f32, noise_sigma as f32).expect("finite sigma");
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (class, u, v) = hit(scene, proj, x, y, h, w);
            let base = PALETTE[class as usize];
            let tex = PATTERN_AMPLITUDE * pattern_value(PATTERNS[class as usize], u, v);
            let rgb = shift.apply(base.map(|c| c + tex));
            for (ch, &val) in rgb.iter().enumerate() {
                data[ch * h * w + y * w + x] = (val + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([1, 3, h, w], data).expect("consistent image shape")
}

fn stream_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the id, mixed with the run seed through splitmix64.
    let mut hsh: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        hsh ^= b as u64;
        hsh = hsh.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ hsh;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_scene(spec: &SceneSpec, domain: Domain, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = spec.size(domain);
    let classes = WeightedIndex::new(spec.class_frequencies()).expect("valid frequencies");
    let hf = h as f32;
    let b1 = (hf * rng.gen_range(0.2..0.4)) as usize;
    let b2 = (hf * rng.gen_range(0.6..0.8)) as usize;
    let bands = vec![
        (0, classes.sample(rng) as u8),
        (b1, classes.sample(rng) as u8),
        (b2, classes.sample(rng) as u8),
    ];
    let scale = w as f64 / spec.source_size[1] as f64;
    let lo = (spec.objects[0] as f64 * scale).round() as usize;
    let hi = (spec.objects[1] as f64 * scale).round() as usize;
    let count = rng.gen_range(lo..=hi.max(lo));
    let objects = (0..count)
        .map(|_| {
            let half_w = rng.gen_range(4.0..14.0f32);
            let half_h = rng.gen_range(4.0..12.0f32);
            Object {
                class: classes.sample(rng) as u8,
                shape: if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
                cx: rng.gen_range(0.0..w as f32),
                cy: rng.gen_range(half_h * 0.5..hf - half_h * 0.5),
                half_w,
                half_h,
            }
        })
        .collect();
    Scene { bands, objects }
}

/// Drops objects until the flat and projected label maps hold the same classes.
fn reconcile_inventory(scene: &mut Scene, proj: &Projection, h: usize, w: usize) {
    let flat = Projection {
        phi_max_deg: 0.0,
        ..*proj
    };
    loop {
        let a = render_labels(scene, &flat, h, w).classes();
        let b = render_labels(scene, proj, h, w).classes();
        if a == b {
            return;
        }
        let diff: BTreeSet<u8> = a.symmetric_difference(&b).copied().collect();
        let before = scene.objects.len();
        scene.objects.retain(|o| !diff.contains(&o.class));
        if scene.objects.len() == before {
            scene.objects.pop();
        }
    }
}

fn target_projection(spec: &SceneSpec) -> Projection {
    Projection {
        wrap: true,
        phi_max_deg: if spec.distortion { spec.phi_max_deg } else { 0.0 },
        stretch_clamp: spec.stretch_clamp,
    }
}

/// Renders one sample; deterministic in `(spec, id)`.
pub fn gen_sample(spec: &SceneSpec, domain: Domain, split: Split, index: usize) -> Sample {
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    let id = format!("{prefix}-{split}-{index:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &id));
    let (h, w) = spec.size(domain);
    let mut scene = random_scene(spec, domain, &mut rng);
    let (proj, shift) = match domain {
        Domain::Source => (Projection::PINHOLE, ColorShift::IDENTITY),
        Domain::Target => {
            let proj = target_projection(spec);
            reconcile_inventory(&mut scene, &proj, h, w);
            let shift = if spec.color_shift {
                let sev = rng.gen_range(spec.severity[0]..=spec.severity[1]);
                ColorShift::new(sev * spec.hue_shift_deg, sev * spec.brightness_shift)
            } else {
                ColorShift::IDENTITY
            };
            (proj, shift)
        }
    };
    let label = render_labels(&scene, &proj, h, w);
    let image = render_image(&scene, &proj, &shift, spec.noise_sigma, h, w, &mut rng);
    Sample {
        id,
        image,
        label,
        domain,
        split,
    }
}

fn gen_many(spec: &SceneSpec, domain: Domain, split: Split, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| gen_sample(spec, domain, split, i))
        .collect())
}

/// Labelled pinhole-style scenes.
pub fn gen_source(spec: &SceneSpec, split: Split, n: usize) -> Result<Vec<Sample>> {
    gen_many(spec, Domain::Source, split, n)
}

/// Panoramic scenes; labels are ground truth reserved for evaluation.
pub fn gen_target(spec: &SceneSpec, split: Split, n: usize) -> Result<Vec<Sample>> {
    gen_many(spec, Domain::Target, split, n)
}

/// Pixel share per class over a set of label maps (ignore excluded).
pub fn pixel_shares<'a>(labels: impl IntoIterator<Item = &'a LabelMap>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for l in labels {
        for &v in &l.data {
            if (v as usize) < classes {
                counts[v as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Horizontal extent (max - min + 1 column) of `class` within rows `rows`.
pub fn class_width(label: &LabelMap, class: u8, rows: std::ops::Range<usize>) -> usize {
    let mut cols = (usize::MAX, 0usize);
    for y in rows {
        for x in 0..label.w {
            if label.at(y, x) == class {
                cols = (cols.0.min(x), cols.1.max(x));
            }
        }
    }
    if cols.0 == usize::MAX {
        0
    } else {
        cols.1 - cols.0 + 1
    }
}
