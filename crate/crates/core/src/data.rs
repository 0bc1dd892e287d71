//! Manifest loading, triplet decoding, dual-resolution preprocessing and the
//! synthetic shapes dataset.
//!
//! A manifest is JSON lines: `{"image": .., "mask": .., "expression": ..,
//! "split": "train" | "val" | "test"}` with paths relative to the manifest's
//! directory.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::resize::resize_hwc;
use crate::text::{TokenizedText, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// One manifest line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub expression: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub expression: String,
    pub split: Split,
    /// 1-based line in the manifest, used as the sample id.
    pub line: usize,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        format!("{}#{}", self.image_path.display(), self.line)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::ManifestNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut entries = Vec::new();
    let mut seen: HashMap<(PathBuf, PathBuf, String), Split> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(raw).map_err(|e| bad(line, format!("malformed entry: {e}")))?;
        let split: Split = rec.split.parse().map_err(|e: Error| bad(line, e.to_string()))?;
        if rec.expression.trim().is_empty() {
            return Err(bad(line, "empty expression".into()));
        }
        let image_path = root.join(&rec.image);
        let mask_path = root.join(&rec.mask);
        for p in [&image_path, &mask_path] {
            if !p.is_file() {
                return Err(bad(line, format!("missing file {}", p.display())));
            }
        }
        let key = (image_path.clone(), mask_path.clone(), rec.expression.clone());
        if let Some(prev) = seen.insert(key, split) {
            if prev != split {
                return Err(bad(
                    line,
                    format!("sample listed in both {prev} and {split} splits"),
                ));
            }
        }
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            expression: rec.expression,
            split,
            line,
        });
    }
    Ok(DatasetManifest { entries })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// `height × width × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbF32 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbF32 {
    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: resize_hwc(&self.data, self.height, self.width, 3, height, width),
        }
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?)
    }
}

/// Binary mask, one byte per pixel in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer of {} for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::shape("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.data[y as usize * self.width + x as usize] * 255])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.height, self.width), device)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image: RgbF32,
    pub mask: Mask,
    pub expression: String,
    pub id: String,
}

impl Triplet {
    pub fn new(image: RgbF32, mask: Mask, expression: String, id: String) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        if expression.trim().is_empty() {
            return Err(Error::config(format!("sample {id}: empty expression")));
        }
        Ok(Self {
            image,
            mask,
            expression,
            id,
        })
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Thresholds an 8-bit mask at 0.5 of full scale.
pub fn binarize_gray(gray: &GrayImage) -> Mask {
    let data = gray
        .as_raw()
        .iter()
        .map(|&v| u8::from(f32::from(v) / 255.0 >= 0.5))
        .collect();
    Mask {
        height: gray.height() as usize,
        width: gray.width() as usize,
        data,
    }
}

pub fn load_triplet(entry: &ManifestEntry) -> Result<Triplet> {
    let image = RgbF32::from_rgb8(&open_image(&entry.image_path)?.to_rgb8());
    let raw = open_image(&entry.mask_path)?;
    if raw.color().channel_count() != 1 {
        log::warn!(
            "{}: mask has {} channels, converting to luma",
            entry.mask_path.display(),
            raw.color().channel_count()
        );
    }
    let gray = raw.to_luma8();
    let distinct: BTreeSet<u8> = gray.as_raw().iter().copied().collect();
    if distinct.len() > 2 {
        log::warn!(
            "{}: mask has {} distinct values, thresholding at 0.5",
            entry.mask_path.display(),
            distinct.len()
        );
    }
    let mask = binarize_gray(&gray);
    Triplet::new(image, mask, entry.expression.clone(), entry.id())
}

/// Network-ready sample. The mask stays at its original resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DualResSample {
    pub image_lowres: RgbF32,
    pub image_highres: RgbF32,
    pub mask: Mask,
    pub tokens: TokenizedText,
    pub id: String,
}

pub fn preprocess_dual(
    triplet: &Triplet,
    size_low: usize,
    size_high: usize,
    tokenizer: &Tokenizer,
) -> Result<DualResSample> {
    if size_low >= size_high {
        return Err(Error::config(format!(
            "low-resolution size {size_low} must be below high-resolution size {size_high}"
        )));
    }
    let image_highres = triplet.image.resize(size_high, size_high);
    let image_lowres = image_highres.resize(size_low, size_low);
    Ok(DualResSample {
        image_lowres,
        image_highres,
        mask: triplet.mask.clone(),
        tokens: tokenizer.tokenize(&triplet.expression)?,
        id: triplet.id.clone(),
    })
}

/// Stacks samples into a model batch plus `(B, H, W)` ground truth.
pub fn collate(samples: &[&DualResSample], dtype: DType) -> Result<(ModelInput, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::shape("empty batch"))?;
    let target = (first.mask.height, first.mask.width);
    let dev = Device::Cpu;
    let mut low = Vec::with_capacity(samples.len());
    let mut high = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.mask.height, s.mask.width) != target {
            return Err(Error::shape(format!(
                "batch mixes mask sizes {:?} and {:?}",
                target,
                (s.mask.height, s.mask.width)
            )));
        }
        low.push(s.image_lowres.to_tensor(&dev)?);
        high.push(s.image_highres.to_tensor(&dev)?);
        gts.push(s.mask.to_tensor(&dev)?);
    }
    let input = ModelInput {
        image_low: Tensor::stack(&low, 0)?.to_dtype(dtype)?,
        image_high: Tensor::stack(&high, 0)?.to_dtype(dtype)?,
        tokens: samples.iter().map(|s| s.tokens.clone()).collect(),
        target,
    };
    Ok((input, Tensor::stack(&gts, 0)?.to_dtype(dtype)?))
}

// ---------------------------------------------------------------------------
// synthetic shapes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeSize {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
    fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl ShapeColor {
    const ALL: [ShapeColor; 3] = [ShapeColor::Red, ShapeColor::Green, ShapeColor::Blue];
    fn word(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
        }
    }
    fn rgb(self) -> [f64; 3] {
        match self {
            ShapeColor::Red => [215.0, 45.0, 40.0],
            ShapeColor::Green => [45.0, 190.0, 60.0],
            ShapeColor::Blue => [50.0, 85.0, 225.0],
        }
    }
}

impl ShapeSize {
    fn word(self) -> &'static str {
        match self {
            ShapeSize::Small => "small",
            ShapeSize::Large => "large",
        }
    }
    /// Half-extent as a fraction of the canvas side.
    fn radius(self) -> f64 {
        match self {
            ShapeSize::Small => 0.075,
            ShapeSize::Large => 0.13,
        }
    }
}

impl Position {
    const ALL: [Position; 4] = [Position::Left, Position::Right, Position::Top, Position::Bottom];
    fn phrase(self) -> &'static str {
        match self {
            Position::Left => "on the left",
            Position::Right => "on the right",
            Position::Top => "at the top",
            Position::Bottom => "at the bottom",
        }
    }
    fn center(self) -> (f64, f64) {
        match self {
            Position::Left => (0.22, 0.5),
            Position::Right => (0.78, 0.5),
            Position::Top => (0.5, 0.22),
            Position::Bottom => (0.5, 0.78),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub size: ShapeSize,
    pub position: Position,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl SynthShape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // apex at top, base at +0.8r
                let top = -r;
                let base = 0.8 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half = r * (dy - top) / (base - top);
                dx.abs() <= half
            }
        }
    }
}

/// Which attributes an expression mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Mentions {
    pub size: bool,
    pub color: bool,
    pub kind: bool,
    pub position: bool,
}

impl Mentions {
    fn from_bits(bits: u8) -> Self {
        Self {
            size: bits & 1 != 0,
            color: bits & 2 != 0,
            kind: bits & 4 != 0,
            position: bits & 8 != 0,
        }
    }

    fn matches(&self, target: &SynthShape, other: &SynthShape) -> bool {
        (!self.size || target.size == other.size)
            && (!self.color || target.color == other.color)
            && (!self.kind || target.kind == other.kind)
            && (!self.position || target.position == other.position)
    }

    pub fn describe(&self, s: &SynthShape) -> String {
        let mut words = vec!["the"];
        if self.size {
            words.push(s.size.word());
        }
        if self.color {
            words.push(s.color.word());
        }
        words.push(if self.kind { s.kind.word() } else { "shape" });
        if self.position {
            words.push(s.position.phrase());
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub shapes: Vec<SynthShape>,
    pub target: usize,
    pub mentions: Mentions,
    pub expression: String,
}

impl SynthScene {
    /// Number of shapes the expression matches.
    pub fn matching(&self) -> usize {
        let t = &self.shapes[self.target];
        self.shapes
            .iter()
            .filter(|s| self.mentions.matches(t, s))
            .count()
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, canvas: usize) -> SynthScene {
    let c = canvas as f64;
    let count = rng.random_range(2..=4);
    let mut positions = Position::ALL.to_vec();
    positions.shuffle(rng);
    let shapes: Vec<SynthShape> = positions
        .into_iter()
        .take(count)
        .map(|position| {
            let size = if rng.random_bool(0.5) {
                ShapeSize::Small
            } else {
                ShapeSize::Large
            };
            let (px, py) = position.center();
            let jitter = 0.04;
            SynthShape {
                kind: *ShapeKind::ALL.choose(rng).expect("nonempty"),
                color: *ShapeColor::ALL.choose(rng).expect("nonempty"),
                size,
                position,
                cx: (px + rng.random_range(-jitter..=jitter)) * c,
                cy: (py + rng.random_range(-jitter..=jitter)) * c,
                radius: size.radius() * c,
            }
        })
        .collect();
    let target = rng.random_range(0..shapes.len());
    // retry random attribute subsets until exactly one shape matches; the
    // position alone is always unique, so the loop terminates
    let mentions = loop {
        let m = Mentions::from_bits(rng.random_range(1..16u8));
        let t = &shapes[target];
        if shapes.iter().filter(|s| m.matches(t, s)).count() == 1 {
            break m;
        }
    };
    let expression = mentions.describe(&shapes[target]);
    SynthScene {
        shapes,
        target,
        mentions,
        expression,
    }
}

fn render_scene(rng: &mut ChaCha8Rng, scene: &SynthScene, canvas: usize) -> (RgbImage, Mask) {
    let tints: Vec<[f64; 3]> = scene
        .shapes
        .iter()
        .map(|s| {
            let base = s.color.rgb();
            let j = rng.random_range(-15.0..=15.0);
            [base[0] + j, base[1] + j, base[2] + j]
        })
        .collect();
    let background = rng.random_range(30.0..=60.0);
    let mut img = RgbImage::new(canvas as u32, canvas as u32);
    let mut mask = Mask::zeros(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise = rng.random_range(-8.0..=8.0);
            let mut px = [background + noise; 3];
            for (i, s) in scene.shapes.iter().enumerate() {
                if s.contains(fx, fy) {
                    px = [tints[i][0] + noise, tints[i][1] + noise, tints[i][2] + noise];
                    if i == scene.target {
                        mask.data[y * canvas + x] = 1;
                    }
                }
            }
            let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
        }
    }
    (img, mask)
}

/// Split for the `i`-th synthetic sample: 80% train, 10% val, 10% test.
pub fn synthetic_split(i: usize) -> Split {
    match i % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Scenes only, without touching the filesystem.
pub fn synthetic_scenes(n: usize, canvas: usize, seed: u64) -> Vec<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_scene(&mut rng, canvas)).collect()
}

/// Writes `n` samples plus `manifest.jsonl` under `out_dir` and returns the
/// loaded manifest.
pub fn generate_synthetic(n: usize, canvas: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::config("synthetic dataset needs n > 0"));
    }
    if canvas < 16 {
        return Err(Error::config(format!("canvas {canvas} is below 16 pixels")));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = sample_scene(&mut rng, canvas);
        let (img, mask) = render_scene(&mut rng, &scene, canvas);
        let image_rel = format!("images/{i:05}.png");
        let mask_rel = format!("masks/{i:05}.png");
        let image_path = out_dir.join(&image_rel);
        img.save(&image_path).map_err(|e| Error::Image {
            path: image_path.clone(),
            reason: e.to_string(),
        })?;
        mask.save_png(&out_dir.join(&mask_rel))?;
        records.push(ManifestRecord {
            image: image_rel,
            mask: mask_rel,
            expression: scene.expression,
            split: synthetic_split(i).to_string(),
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    load_manifest(&manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, names: &[&str], size: u32) {
        for n in names {
            let img = RgbImage::new(size, size);
            img.save(dir.join(n)).unwrap();
        }
    }

    #[test]
    fn manifest_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["a.png", "b.png", "c.png", "m.png"], 4);
        let p = dir.path().join("m.jsonl");
        let line = |img: &str, split: &str| {
            format!(r#"{{"image":"{img}","mask":"m.png","expression":"the thing","split":"{split}"}}"#)
        };
        fs::write(
            &p,
            [line("a.png", "train"), line("b.png", "train"), line("c.png", "test")].join("\n"),
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.count(Split::Train), 2);
        assert_eq!(m.count(Split::Test), 1);

        fs::write(&p, line("a.png", "validation")).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("validation"), "{err}");

        fs::write(&p, format!("{}\n{{bad json", line("a.png", "val"))).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        fs::write(&p, [line("a.png", "train"), line("a.png", "test")].join("\n")).unwrap();
        assert!(load_manifest(&p).is_err());

        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());

        assert!(matches!(
            load_manifest(&dir.path().join("nope.jsonl")),
            Err(Error::ManifestNotFound(_))
        ));
    }

    #[test]
    fn triplet_dimension_checks() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(20, 20).save(dir.path().join("i.png")).unwrap();
        GrayImage::new(20, 20).save(dir.path().join("m.png")).unwrap();
        GrayImage::new(12, 12).save(dir.path().join("small.png")).unwrap();
        let entry = |mask: &str| ManifestEntry {
            image_path: dir.path().join("i.png"),
            mask_path: dir.path().join(mask),
            expression: "x".into(),
            split: Split::Train,
            line: 1,
        };
        let t = load_triplet(&entry("m.png")).unwrap();
        assert_eq!(t.mask.count(), 0);
        assert!(load_triplet(&entry("small.png")).is_err());
    }

    #[test]
    fn gray_mask_is_thresholded() {
        let g = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(binarize_gray(&g).data, vec![0, 0, 1, 1]);
    }

    #[test]
    fn dual_resolution_sizes() {
        let tok = Tokenizer::from_expressions(["a b"], 4).unwrap();
        let img = RgbF32 {
            height: 16,
            width: 16,
            data: vec![0.25; 16 * 16 * 3],
        };
        let t = Triplet::new(img, Mask::zeros(16, 16), "a b".into(), "0".into()).unwrap();
        let s = preprocess_dual(&t, 8, 16, &tok).unwrap();
        assert_eq!((s.image_lowres.height, s.image_highres.height), (8, 16));
        assert_eq!((s.mask.height, s.mask.width), (16, 16));
        assert!(preprocess_dual(&t, 12, 12, &tok).is_err());
    }

    #[test]
    fn scenes_are_unambiguous() {
        for scene in synthetic_scenes(200, 64, 3) {
            assert_eq!(scene.matching(), 1, "{}", scene.expression);
            assert!((2..=4).contains(&scene.shapes.len()));
        }
    }

    #[test]
    fn triangle_membership() {
        let s = SynthShape {
            kind: ShapeKind::Triangle,
            color: ShapeColor::Red,
            size: ShapeSize::Large,
            position: Position::Left,
            cx: 10.0,
            cy: 10.0,
            radius: 5.0,
        };
        assert!(s.contains(10.0, 10.0));
        assert!(s.contains(10.0, 5.5));
        assert!(!s.contains(13.0, 6.0));
        assert!(!s.contains(10.0, 14.5));
    }
}
