//! Procedural single-shape scenes with exact ground truth, and the attribute
//! oracles that measure them back out of any image.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageSample, DEFAULT_CHANNELS, DEFAULT_SIZE};

pub const SIZE_RANGE: (f64, f64) = (0.1, 0.45);
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.3, 1.0);
pub const POSITION_RANGE: (f64, f64) = (0.3, 0.7);
pub const BACKGROUND_RANGE: (f64, f64) = (0.0, 0.2);
pub const MIN_CONTRAST: f64 = 0.1;

/// Size caption buckets: `< SMALL_MAX` small, `< MEDIUM_MAX` medium, else large.
pub const SMALL_MAX: f64 = 0.2;
pub const MEDIUM_MAX: f64 = 0.33;
/// Brightness caption buckets: `< DIM_MAX` dim, else bright.
pub const DIM_MAX: f64 = 0.65;

/// Sampled attributes stay this far from caption thresholds so the oracles'
/// tolerance never flips a bucket.
const SIZE_MARGIN: f64 = 0.01;
const BRIGHTNESS_MARGIN: f64 = 0.03;

/// Subsamples per pixel edge on circle boundary pixels.
const CIRCLE_SUBSAMPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Area of the shape with unit circumradius.
    pub fn unit_area(self) -> f64 {
        match self {
            Shape::Circle => PI,
            Shape::Square => 2.0,
            Shape::Triangle => 3.0 * 3f64.sqrt() / 4.0,
        }
    }

    /// `(left, right, top, bottom)` extents from the center, unit circumradius.
    fn extents(self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Circle => (1.0, 1.0, 1.0, 1.0),
            Shape::Square => {
                let h = 1.0 / 2f64.sqrt();
                (h, h, h, h)
            }
            Shape::Triangle => {
                let h = 3f64.sqrt() / 2.0;
                (h, h, 1.0, 0.5)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hue {
    Red,
    Green,
    Blue,
}

impl Hue {
    pub const ALL: [Hue; 3] = [Hue::Red, Hue::Green, Hue::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Hue::Red => "red",
            Hue::Green => "green",
            Hue::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

/// Ground-truth attributes of one image. `size` is the circumradius as a
/// fraction of the image width; intensities are in `[0, 1]` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub shape: Shape,
    pub size: f64,
    pub brightness: f64,
    pub position: (f64, f64),
    pub background: f64,
    pub hue: Hue,
}

impl ProceduralScene {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && (lo..=hi).contains(&v);
        let fail = |m: String| Err(Error::Validation(m));
        if !within(self.size, SIZE_RANGE) {
            return fail(format!("size {} outside {SIZE_RANGE:?}", self.size));
        }
        if !within(self.brightness, BRIGHTNESS_RANGE) {
            return fail(format!("brightness {} outside {BRIGHTNESS_RANGE:?}", self.brightness));
        }
        if !within(self.background, BACKGROUND_RANGE) {
            return fail(format!("background {} outside {BACKGROUND_RANGE:?}", self.background));
        }
        let (cx, cy) = self.position;
        if !within(cx, POSITION_RANGE) || !within(cy, POSITION_RANGE) {
            return fail(format!("position {:?} outside {POSITION_RANGE:?}²", self.position));
        }
        if self.brightness - self.background < MIN_CONTRAST - 1e-12 {
            return fail("foreground/background gap below 0.1".into());
        }
        if !fits_canvas(self.shape, self.size, self.position) {
            return fail("shape escapes the canvas".into());
        }
        Ok(())
    }

    /// Exact area in pixels on a `width`-pixel canvas.
    pub fn analytic_area(&self, width: usize) -> f64 {
        let r = self.size * width as f64;
        self.shape.unit_area() * r * r
    }

    pub fn caption(&self) -> Vec<String> {
        vec![
            size_bucket(self.size).to_string(),
            brightness_bucket(self.brightness).to_string(),
            self.hue.word().to_string(),
            self.shape.word().to_string(),
        ]
    }

    /// Fraction of the unit pixel `[px, px+1) × [py, py+1)` covered by the
    /// shape: exact for polygons, finely subsampled on circle rims.
    fn pixel_coverage(&self, px: f64, py: f64, width: f64) -> f64 {
        let (cx, cy) = (self.position.0 * width, self.position.1 * width);
        let r = self.size * width;
        match self.shape {
            Shape::Circle => {
                let nx = cx.clamp(px, px + 1.0);
                let ny = cy.clamp(py, py + 1.0);
                if (nx - cx).powi(2) + (ny - cy).powi(2) >= r * r {
                    return 0.0;
                }
                let fx = (px - cx).abs().max((px + 1.0 - cx).abs());
                let fy = (py - cy).abs().max((py + 1.0 - cy).abs());
                if fx * fx + fy * fy <= r * r {
                    return 1.0;
                }
                let n = CIRCLE_SUBSAMPLE;
                let step = 1.0 / n as f64;
                let mut hits = 0usize;
                for sy in 0..n {
                    let y = py + (sy as f64 + 0.5) * step - cy;
                    for sx in 0..n {
                        let x = px + (sx as f64 + 0.5) * step - cx;
                        if x * x + y * y <= r * r {
                            hits += 1;
                        }
                    }
                }
                hits as f64 / (n * n) as f64
            }
            Shape::Square => {
                let h = r / 2f64.sqrt();
                let ox = ((px + 1.0).min(cx + h) - px.max(cx - h)).max(0.0);
                let oy = ((py + 1.0).min(cy + h) - py.max(cy - h)).max(0.0);
                ox * oy
            }
            Shape::Triangle => {
                // Apex up (image y grows downward).
                let half = r * 3f64.sqrt() / 2.0;
                let tri = [(cx, cy - r), (cx + half, cy + r / 2.0), (cx - half, cy + r / 2.0)];
                clipped_area(&tri, px, py)
            }
        }
    }
}

/// Area of a convex polygon clipped to the unit pixel at `(px, py)`.
fn clipped_area(poly: &[(f64, f64)], px: f64, py: f64) -> f64 {
    let mut pts = poly.to_vec();
    // Each clip plane keeps points with `sign * (coord - bound) >= 0`.
    let planes: [(usize, f64, f64); 4] = [(0, px, 1.0), (0, px + 1.0, -1.0), (1, py, 1.0), (1, py + 1.0, -1.0)];
    for (axis, bound, sign) in planes {
        let coord = |p: &(f64, f64)| if axis == 0 { p.0 } else { p.1 };
        let inside = |p: &(f64, f64)| sign * (coord(p) - bound) >= 0.0;
        let mut next = Vec::with_capacity(pts.len() + 2);
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            if inside(&a) {
                next.push(a);
            }
            if inside(&a) != inside(&b) {
                let t = (bound - coord(&a)) / (coord(&b) - coord(&a));
                next.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            }
        }
        pts = next;
        if pts.is_empty() {
            return 0.0;
        }
    }
    let twice: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    0.5 * twice.abs()
}

fn fits_canvas(shape: Shape, size: f64, (cx, cy): (f64, f64)) -> bool {
    let (l, r, t, b) = shape.extents();
    cx - l * size >= 0.0 && cx + r * size <= 1.0 && cy - t * size >= 0.0 && cy + b * size <= 1.0
}

/// Feasible center interval along each axis for a shape of this size.
fn center_ranges(shape: Shape, size: f64) -> Option<((f64, f64), (f64, f64))> {
    let (l, r, t, b) = shape.extents();
    let (lo, hi) = POSITION_RANGE;
    let x = (lo.max(l * size), hi.min(1.0 - r * size));
    let y = (lo.max(t * size), hi.min(1.0 - b * size));
    (x.0 <= x.1 && y.0 <= y.1).then_some((x, y))
}

pub fn size_bucket(size: f64) -> &'static str {
    if size < SMALL_MAX {
        "small"
    } else if size < MEDIUM_MAX {
        "medium"
    } else {
        "large"
    }
}

pub fn brightness_bucket(brightness: f64) -> &'static str {
    if brightness < DIM_MAX {
        "dim"
    } else {
        "bright"
    }
}

/// Anti-aliased rasterization at the default 32×32×3 resolution.
pub fn render(scene: &ProceduralScene) -> Result<ImageSample> {
    render_sized(scene, DEFAULT_SIZE)
}

pub fn render_sized(scene: &ProceduralScene, width: usize) -> Result<ImageSample> {
    scene.validate()?;
    let w = width as f64;
    let mut pixels = Array3::from_elem(
        (width, width, DEFAULT_CHANNELS),
        (2.0 * scene.background - 1.0) as f32,
    );
    let fg = 2.0 * scene.brightness - 1.0;
    let bg = 2.0 * scene.background - 1.0;
    let ch = scene.hue.channel();
    for py in 0..width {
        for px in 0..width {
            let cov = scene.pixel_coverage(px as f64, py as f64, w);
            if cov > 0.0 {
                pixels[[py, px, ch]] = (bg + cov * (fg - bg)) as f32;
            }
        }
    }
    Ok(ImageSample::from_array_unchecked(pixels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub image: ImageSample,
    pub scene: ProceduralScene,
    pub caption: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn from_scenes(scenes: Vec<ProceduralScene>) -> Result<Self> {
        let items = scenes
            .into_iter()
            .map(|scene| {
                Ok(LabeledItem {
                    image: render(&scene)?,
                    caption: scene.caption(),
                    scene,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }
}

/// Sampling recipe. `shape_size_coupling` ∈ [0, 1] is the probability that
/// the shape is tied to the size bucket (small→square, medium→triangle,
/// large→circle) instead of drawn uniformly. Marginals stay balanced either
/// way; only the joint distribution changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub shape_size_coupling: f64,
}

impl DatasetConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            shape_size_coupling: 0.0,
        }
    }
}

/// Independent attributes, balanced over shape and size buckets.
pub fn sample_dataset(n: usize, seed: u64) -> Result<LabeledDataset> {
    sample_dataset_with(&DatasetConfig::new(n, seed))
}

pub fn sample_dataset_with(config: &DatasetConfig) -> Result<LabeledDataset> {
    if config.n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.shape_size_coupling) {
        return Err(Error::Argument("shape_size_coupling must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scenes = (0..config.n)
        .map(|_| sample_scene(&mut rng, config.shape_size_coupling))
        .collect();
    LabeledDataset::from_scenes(scenes)
}

const SIZE_BUCKETS: [(f64, f64); 3] = [
    (SIZE_RANGE.0, SMALL_MAX - SIZE_MARGIN),
    (SMALL_MAX + SIZE_MARGIN, MEDIUM_MAX - SIZE_MARGIN),
    (MEDIUM_MAX + SIZE_MARGIN, SIZE_RANGE.1),
];
const COUPLED_SHAPE: [Shape; 3] = [Shape::Square, Shape::Triangle, Shape::Circle];

pub fn sample_scene<R: Rng>(rng: &mut R, coupling: f64) -> ProceduralScene {
    let bucket = rng.random_range(0..3);
    let (lo, hi) = SIZE_BUCKETS[bucket];
    let size = rng.random_range(lo..=hi);
    let shape = if coupling > 0.0 && rng.random_bool(coupling) {
        COUPLED_SHAPE[bucket]
    } else {
        *Shape::ALL.choose(rng).expect("non-empty")
    };
    let brightness = if rng.random_bool(0.5) {
        rng.random_range(BRIGHTNESS_RANGE.0..DIM_MAX - BRIGHTNESS_MARGIN)
    } else {
        rng.random_range(DIM_MAX + BRIGHTNESS_MARGIN..=BRIGHTNESS_RANGE.1)
    };
    let background = rng.random_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1);
    let hue = *Hue::ALL.choose(rng).expect("non-empty");
    let (xr, yr) = center_ranges(shape, size).expect("every size in range fits centered");
    let position = (rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1));
    ProceduralScene {
        shape,
        size,
        brightness,
        position,
        background,
        hue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairAttribute {
    Size,
    Brightness,
}

/// Before/after pairs: `x^A` is the negative pole, `x^B` the positive one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePairSet {
    pub pairs: Vec<(ImageSample, ImageSample)>,
    /// Optional condition phrase used instead of the unconditional token.
    pub guidance: Option<String>,
}

impl ImagePairSet {
    pub fn new(pairs: Vec<(ImageSample, ImageSample)>, guidance: Option<String>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Argument("image pair set is empty".into()))?;
        let dim = first.0.pixels().dim();
        if pairs
            .iter()
            .any(|(a, b)| a.pixels().dim() != dim || b.pixels().dim() != dim)
        {
            return Err(Error::Shape("image pairs differ in shape".into()));
        }
        Ok(Self { pairs, guidance })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs of scenes identical except for `attribute` (low in A, high in B).
pub fn make_pairs(
    attribute: PairAttribute,
    low: f64,
    high: f64,
    n: usize,
    seed: u64,
) -> Result<ImagePairSet> {
    ImagePairSet::new(
        make_pair_scenes(attribute, low, high, n, seed)?
            .iter()
            .map(|(a, b)| Ok((render(a)?, render(b)?)))
            .collect::<Result<Vec<_>>>()?,
        None,
    )
}

pub fn make_pair_scenes(
    attribute: PairAttribute,
    low: f64,
    high: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(ProceduralScene, ProceduralScene)>> {
    if n == 0 {
        return Err(Error::Argument("need at least one pair".into()));
    }
    let range = match attribute {
        PairAttribute::Size => SIZE_RANGE,
        PairAttribute::Brightness => BRIGHTNESS_RANGE,
    };
    if !(low < high && range.0 <= low && high <= range.1) {
        return Err(Error::Argument(format!(
            "need {} <= low < high <= {} for {attribute:?}",
            range.0, range.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut base = sample_scene(&mut rng, 0.0);
        let (mut a, mut b) = (base, base);
        match attribute {
            PairAttribute::Size => {
                // Center must admit the larger shape.
                let (xr, yr) = center_ranges(base.shape, high)
                    .ok_or_else(|| Error::Argument(format!("size {high} cannot fit")))?;
                base.position = (rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1));
                a = ProceduralScene { size: low, ..base };
                b = ProceduralScene { size: high, ..base };
            }
            PairAttribute::Brightness => {
                let max_bg = (low - MIN_CONTRAST).min(BACKGROUND_RANGE.1);
                if max_bg < BACKGROUND_RANGE.0 {
                    return Err(Error::Argument("low brightness leaves no contrast".into()));
                }
                base.background = rng.random_range(BACKGROUND_RANGE.0..=max_bg);
                a.brightness = low;
                a.background = base.background;
                b.brightness = high;
                b.background = base.background;
            }
        }
        if a.validate().is_ok() && b.validate().is_ok() {
            out.push((a, b));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Oracles

/// Everything the oracles read from one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeasurement {
    /// Foreground area in pixels (coverage-weighted).
    pub area: f64,
    /// Foreground intensity in `[0, 1]` units.
    pub brightness: f64,
    pub background: f64,
    pub shape: Shape,
    pub shape_confidence: f64,
    pub hue: Hue,
}

impl SceneMeasurement {
    /// Circumradius fraction implied by the measured area and shape.
    pub fn size(&self, width: usize) -> f64 {
        (self.area / self.shape.unit_area()).sqrt() / width as f64
    }

    pub fn caption(&self, width: usize) -> Vec<String> {
        vec![
            size_bucket(self.size(width)).to_string(),
            brightness_bucket(self.brightness).to_string(),
            self.hue.word().to_string(),
            self.shape.word().to_string(),
        ]
    }
}

pub fn oracle_size(image: &ImageSample) -> f64 {
    measure(image).area
}

pub fn oracle_brightness(image: &ImageSample) -> f64 {
    measure(image).brightness
}

pub fn oracle_shape(image: &ImageSample) -> (Shape, f64) {
    let m = measure(image);
    (m.shape, m.shape_confidence)
}

pub fn oracle_hue(image: &ImageSample) -> Hue {
    measure(image).hue
}

/// Minimum foreground/background separation (in `[0, 1]` units) for the
/// image to count as containing a shape at all.
const MIN_SEPARATION: f64 = 0.05;

pub fn measure(image: &ImageSample) -> SceneMeasurement {
    let (h, w, c) = image.pixels().dim();
    let px = image.pixels();
    let unit = |v: f32| ((v as f64) + 1.0) * 0.5;
    let intensity: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (0..c).map(|ch| unit(px[[y, x, ch]])).fold(f64::MIN, f64::max)
        })
        .collect();

    let mut border: Vec<f64> = (0..h * w)
        .filter(|i| {
            let (y, x) = (i / w, i % w);
            y == 0 || x == 0 || y == h - 1 || x == w - 1
        })
        .map(|i| intensity[i])
        .collect();
    let background = median(&mut border);

    let blank = SceneMeasurement {
        area: 0.0,
        brightness: background,
        background,
        shape: Shape::Circle,
        shape_confidence: 0.0,
        hue: Hue::Red,
    };
    let peak = intensity.iter().copied().fold(f64::MIN, f64::max);
    if peak - background < MIN_SEPARATION {
        return blank;
    }

    // Two-class split seeded at the midpoint between background and peak.
    let mut fg_level = peak;
    let mut mask = vec![false; h * w];
    for _ in 0..10 {
        let threshold = 0.5 * (background + fg_level);
        for (m, v) in mask.iter_mut().zip(&intensity) {
            *m = *v > threshold;
        }
        let core = core_mean(&intensity, &mask, h, w);
        let next = core.unwrap_or(peak);
        if (next - fg_level).abs() < 1e-12 {
            break;
        }
        fg_level = next;
    }
    if !mask.iter().any(|m| *m) || fg_level - background < MIN_SEPARATION {
        return blank;
    }

    // Coverage is read inside the mask dilated by one pixel so that faint
    // anti-aliased rims count and distant noise does not.
    let support = dilate(&mask, h, w);
    let span = fg_level - background;
    let coverage: Vec<f64> = intensity
        .iter()
        .zip(&support)
        .map(|(v, s)| if *s { ((v - background) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let area: f64 = coverage.iter().sum();

    let mut channel_mass = vec![0.0; c];
    let mut weight = 0.0;
    for i in 0..h * w {
        if mask[i] {
            let (y, x) = (i / w, i % w);
            for (ch, m) in channel_mass.iter_mut().enumerate() {
                *m += unit(px[[y, x, ch]]);
            }
            weight += 1.0;
        }
    }
    let hue = channel_mass
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| Hue::ALL[i.min(2)])
        .unwrap_or(Hue::Red);
    debug_assert!(weight > 0.0);

    let features = moment_features(&coverage, h, w);
    let (shape, shape_confidence) = match features {
        Some((f, centroid)) => classify(&f, area, centroid, h, w),
        None => (Shape::Circle, 0.0),
    };
    SceneMeasurement {
        area,
        brightness: fg_level,
        background,
        shape,
        shape_confidence,
        hue,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean of mask pixels whose four neighbours are also in the mask; falls
/// back to the brightest mask pixels for shapes too thin to have a core.
fn core_mean(intensity: &[f64], mask: &[bool], h: usize, w: usize) -> Option<f64> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h * w {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        if inside(y, x) && inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1) {
            sum += intensity[i];
            count += 1;
        }
    }
    if count > 0 {
        return Some(sum / count as f64);
    }
    let mut fg: Vec<f64> = intensity
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .collect();
    if fg.is_empty() {
        return None;
    }
    fg.sort_by(|a, b| b.total_cmp(a));
    let k = fg.len().div_ceil(4);
    Some(fg[..k].iter().sum::<f64>() / k as f64)
}

fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}

/// Scale-normalized central moments of a coverage map.
/// Layout: `[η20+η02, η20−η02, η11, η22, η30, η03, η21, η12]`.
fn moment_features(weights: &[f64], h: usize, w: usize) -> Option<([f64; 8], (f64, f64))> {
    let m00: f64 = weights.iter().sum();
    if m00 < 1.0 {
        return None;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        mx += wt * (i % w) as f64;
        my += wt * (i / w) as f64;
    }
    mx /= m00;
    my /= m00;
    let mut mu = [[0.0f64; 4]; 4];
    for (i, wt) in weights.iter().enumerate() {
        if *wt == 0.0 {
            continue;
        }
        let dx = (i % w) as f64 - mx;
        let dy = (i / w) as f64 - my;
        for (p, row) in mu.iter_mut().enumerate() {
            for (q, m) in row.iter_mut().enumerate() {
                if p + q >= 2 && p + q <= 4 {
                    *m += wt * dx.powi(p as i32) * dy.powi(q as i32);
                }
            }
        }
    }
    debug_assert_eq!(weights.len(), h * w);
    let (mu20, mu02, mu22) = (mu[2][0], mu[0][2], mu[2][2]);
    let norm = |m: f64, order: i32| m / m00.powf(1.0 + order as f64 / 2.0);
    let e20 = norm(mu20, 2);
    let e02 = norm(mu02, 2);
    Some(([
        e20 + e02,
        e20 - e02,
        norm(mu[1][1], 2),
        norm(mu22, 4),
        norm(mu[3][0], 3),
        norm(mu[0][3], 3),
        norm(mu[2][1], 3),
        norm(mu[1][2], 3),
    ], (mx, my)))
}

/// Per-feature scales used when comparing against templates.
const FEATURE_SCALE: [f64; 8] = [0.004, 0.008, 0.008, 0.0008, 0.004, 0.004, 0.004, 0.004];
/// Template distance beyond which the fit itself is considered poor.
const FIT_TOLERANCE: f64 = 6.0;

/// Features of `shape` rendered on the same grid at the area-equivalent size
/// and at the measured sub-pixel phase, so template and measurement share
/// the same discretization.
fn template_features(shape: Shape, area: f64, centroid: (f64, f64), h: usize, w: usize) -> Option<[f64; 8]> {
    let width = w as f64;
    let size = ((area / shape.unit_area()).sqrt() / width).clamp(0.02, 0.49);
    // Pixel `i` spans `[i, i + 1)`, so index-space centroids sit 0.5 lower.
    let phase = |c: f64| (c + 0.5).rem_euclid(1.0);
    let (cx, cy) = ((w / 2) as f64 + phase(centroid.0), (h / 2) as f64 + phase(centroid.1));
    let scene = ProceduralScene {
        shape,
        size,
        brightness: 1.0,
        position: (cx / width, cy / width),
        background: 0.0,
        hue: Hue::Red,
    };
    let reach = size * width + 1.0;
    let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize + 1).min(w));
    let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize + 1).min(h));
    let mut weights = vec![0.0; h * w];
    for y in y0..y1 {
        for x in x0..x1 {
            weights[y * w + x] = scene.pixel_coverage(x as f64, y as f64, width);
        }
    }
    moment_features(&weights, h, w).map(|(f, _)| f)
}

fn classify(f: &[f64; 8], area: f64, centroid: (f64, f64), h: usize, w: usize) -> (Shape, f64) {
    let dists: Vec<(Shape, f64)> = Shape::ALL
        .iter()
        .map(|s| {
            let d = match template_features(*s, area, centroid, h, w) {
                Some(t) => f
                    .iter()
                    .zip(t)
                    .zip(FEATURE_SCALE)
                    .map(|((a, b), sc)| ((a - b) / sc).powi(2))
                    .sum::<f64>()
                    .sqrt(),
                None => f64::INFINITY,
            };
            (*s, d)
        })
        .collect();
    let (best, d_best) = dists
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("three templates");
    if !d_best.is_finite() {
        return (best, 0.0);
    }
    let z: f64 = dists.iter().map(|(_, d)| (-0.5 * (d * d - d_best * d_best)).exp()).sum();
    let fit = (-0.5 * (d_best / FIT_TOLERANCE).powi(2)).exp();
    (best, fit / z)
}

// ---------------------------------------------------------------------------
// Export / import

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    scene: ProceduralScene,
    caption: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    format_version: u32,
    items: Vec<IndexEntry>,
}

const INDEX_VERSION: u32 = 1;

/// Writes `index.json` plus one PNG per item.
pub fn export_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.items.iter().enumerate() {
        let file = format!("{i:05}.png");
        fs::write(dir.join(&file), item.image.to_png()?)?;
        items.push(IndexEntry {
            file,
            scene: item.scene,
            caption: item.caption.clone(),
        });
    }
    let index = DatasetIndex {
        format_version: INDEX_VERSION,
        items,
    };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads an exported dataset. Scenes are re-rendered at full precision and
/// checked against the stored PNGs, so the result equals the exported data.
pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    if index.format_version != INDEX_VERSION {
        return Err(Error::Version {
            found: index.format_version,
            expected: INDEX_VERSION,
        });
    }
    let mut items = Vec::with_capacity(index.items.len());
    for entry in index.items {
        let image = render(&entry.scene)?;
        let stored = ImageSample::from_png(&fs::read(dir.join(&entry.file))?)?;
        if stored != image.quantized() {
            return Err(Error::Format(format!("{} does not match its scene", entry.file)));
        }
        if entry.caption != entry.scene.caption() {
            return Err(Error::Format(format!("{} caption disagrees with scene", entry.file)));
        }
        items.push(LabeledItem {
            image,
            scene: entry.scene,
            caption: entry.caption,
        });
    }
    Ok(LabeledDataset { items })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairIndex {
    format_version: u32,
    guidance: Option<String>,
    pairs: Vec<(String, String)>,
}

/// Writes `pairs.json` plus `NNNNN_a.png` / `NNNNN_b.png` per pair.
pub fn export_pairs(pairs: &ImagePairSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(pairs.len());
    for (i, (a, b)) in pairs.pairs.iter().enumerate() {
        let names = (format!("{i:05}_a.png"), format!("{i:05}_b.png"));
        fs::write(dir.join(&names.0), a.to_png()?)?;
        fs::write(dir.join(&names.1), b.to_png()?)?;
        files.push(names);
    }
    let index = PairIndex {
        format_version: INDEX_VERSION,
        guidance: pairs.guidance.clone(),
        pairs: files,
    };
    fs::write(dir.join("pairs.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads pairs written by [`export_pairs`] (or by hand). Pixels come back
/// quantized to the PNG's 8 bits.
pub fn import_pairs(dir: &Path) -> Result<ImagePairSet> {
    let index: PairIndex = serde_json::from_slice(&fs::read(dir.join("pairs.json"))?)?;
    if index.format_version != INDEX_VERSION {
        return Err(Error::Version {
            found: index.format_version,
            expected: INDEX_VERSION,
        });
    }
    let load = |f: &str| -> Result<ImageSample> { ImageSample::from_png(&fs::read(dir.join(f))?) };
    let pairs = index
        .pairs
        .iter()
        .map(|(a, b)| Ok((load(a)?, load(b)?)))
        .collect::<Result<Vec<_>>>()?;
    ImagePairSet::new(pairs, index.guidance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(shape: Shape, size: f64, brightness: f64) -> ProceduralScene {
        ProceduralScene {
            shape,
            size,
            brightness,
            position: (0.5, 0.5),
            background: 0.0,
            hue: Hue::Green,
        }
    }

    #[test]
    fn centered_circle_area() {
        let img = render(&scene(Shape::Circle, 0.3, 1.0)).unwrap();
        // Foreground pixel count, coverage weighted.
        let count: f64 = img
            .pixels()
            .iter()
            .map(|v| (*v as f64 + 1.0) * 0.5)
            .sum();
        let expected = PI * (0.3f64 * 32.0).powi(2);
        assert!((count - expected).abs() / expected < 0.02, "{count} vs {expected}");
    }

    #[test]
    fn render_is_deterministic() {
        let s = scene(Shape::Triangle, 0.27, 0.8);
        assert_eq!(render(&s).unwrap(), render(&s).unwrap());
    }

    #[test]
    fn escaping_scene_is_rejected() {
        let mut s = scene(Shape::Circle, 0.5, 1.0);
        s.position = (0.7, 0.7);
        assert!(matches!(render(&s), Err(Error::Validation(_))));
        let mut s = scene(Shape::Circle, 0.4, 1.0);
        s.position = (0.7, 0.5);
        assert!(render(&s).is_err());
        let mut s = scene(Shape::Circle, 0.3, 0.15);
        s.background = 0.1;
        assert!(render(&s).is_err(), "contrast below 0.1");
    }

    #[test]
    fn oracles_on_rendered_circle() {
        let s = scene(Shape::Circle, 0.3, 0.8);
        let m = measure(&render(&s).unwrap());
        let area = s.analytic_area(32);
        assert!((m.area - area).abs() / area < 0.03, "{} vs {area}", m.area);
        assert!((m.brightness - 0.8).abs() < 0.02);
        assert_eq!(m.shape, Shape::Circle);
        assert!(m.shape_confidence >= 0.9);
        assert_eq!(m.hue, Hue::Green);
    }

    #[test]
    fn blank_image_has_low_confidence() {
        let img = ImageSample::filled(32, 32, 3, -0.8);
        let (_, conf) = oracle_shape(&img);
        assert!(conf < 0.5);
        assert_eq!(oracle_size(&img), 0.0);
    }

    #[test]
    fn small_dataset_cases() {
        let one = sample_dataset(1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(sample_dataset(0, 3).is_err());
        assert_eq!(sample_dataset(20, 9).unwrap(), sample_dataset(20, 9).unwrap());
        assert_ne!(sample_dataset(20, 9).unwrap(), sample_dataset(20, 10).unwrap());
    }

    #[test]
    fn captions_follow_buckets() {
        let s = ProceduralScene {
            hue: Hue::Blue,
            ..scene(Shape::Square, 0.35, 0.9)
        };
        assert_eq!(s.caption(), vec!["large", "bright", "blue", "square"]);
        assert_eq!(size_bucket(0.1999), "small");
        assert_eq!(size_bucket(0.2), "medium");
        assert_eq!(size_bucket(0.33), "large");
        assert_eq!(brightness_bucket(0.649), "dim");
    }

    #[test]
    fn pair_errors() {
        assert!(make_pairs(PairAttribute::Size, 0.2, 0.3, 0, 1).is_err());
        assert!(make_pairs(PairAttribute::Size, 0.3, 0.2, 3, 1).is_err());
        assert!(make_pairs(PairAttribute::Size, 0.05, 0.2, 3, 1).is_err());
        assert!(make_pairs(PairAttribute::Brightness, 0.5, 1.2, 3, 1).is_err());
    }

    #[test]
    fn size_pairs_differ_only_in_size() {
        let scenes = make_pair_scenes(PairAttribute::Size, 0.15, 0.3, 10, 4).unwrap();
        for (a, b) in &scenes {
            assert_eq!(a.size, 0.15);
            assert_eq!(b.size, 0.3);
            assert_eq!(ProceduralScene { size: b.size, ..*a }, *b);
            let ma = measure(&render(a).unwrap());
            let mb = measure(&render(b).unwrap());
            let ratio = mb.area / ma.area;
            assert!((ratio / 4.0 - 1.0).abs() < 0.05, "ratio {ratio}");
            assert_eq!(ma.shape, mb.shape);
            assert_eq!(ma.hue, mb.hue);
        }
    }

    #[test]
    fn brightness_pairs_differ_only_in_brightness() {
        let scenes = make_pair_scenes(PairAttribute::Brightness, 0.4, 0.9, 10, 5).unwrap();
        for (a, b) in &scenes {
            assert_eq!(ProceduralScene { brightness: b.brightness, ..*a }, *b);
            assert!((oracle_brightness(&render(a).unwrap()) - 0.4).abs() < 0.02);
            assert!((oracle_brightness(&render(b).unwrap()) - 0.9).abs() < 0.02);
        }
    }

    #[test]
    fn pair_export_round_trip_is_quantization() {
        let mut pairs = make_pairs(PairAttribute::Size, 0.15, 0.3, 3, 2).unwrap();
        pairs.guidance = Some("circle".into());
        let dir = tempfile::tempdir().unwrap();
        export_pairs(&pairs, dir.path()).unwrap();
        let back = import_pairs(dir.path()).unwrap();
        assert_eq!(back.guidance, pairs.guidance);
        for ((a, b), (qa, qb)) in pairs.pairs.iter().zip(&back.pairs) {
            assert_eq!((a.quantized(), b.quantized()), (qa.clone(), qb.clone()));
        }
    }

    #[test]
    fn export_import_round_trip() {
        let ds = sample_dataset(6, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        // A tampered scene no longer matches its PNG.
        let path = dir.path().join("index.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut index: serde_json::Value = serde_json::from_str(&text).unwrap();
        index["items"][0]["scene"]["brightness"] = serde_json::json!(0.99);
        std::fs::write(&path, index.to_string()).unwrap();
        assert!(import_dataset(dir.path()).is_err());
    }
}
