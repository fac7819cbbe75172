//! Deterministic toy corpora: flat-coloured shapes moving over a static
//! noise background, each clip paired with a long expression naming the
//! target's colour, shape and motion, and its short subject phrase.
//!
//! Corpus layout on disk:
//! `<root>/<id>/frames/%04d.ppm`, `<root>/<id>/masks/%04d.pgm`,
//! `<root>/manifest.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RgbImage, VideoClip};
use crate::io;
use crate::matching::GroundTruthSequence;
use crate::rng::stream_rng;
use crate::text::{pos_tag, tokenize, LongShortPair, ShortSource};

const MAX_ATTEMPTS: usize = 1000;
pub const MIN_FRAMES: usize = 5;
const MIN_SIDE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Continuous area of the shape with the given size.
    pub fn analytic_area(self, size: usize) -> f64 {
        let s = size as f64;
        match self {
            Shape::Square => s * s,
            Shape::Circle => std::f64::consts::PI * s * s / 4.0,
            Shape::Triangle => s * s / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    MovingLeft,
    MovingRight,
    MovingUp,
    MovingDown,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [
        Motion::MovingLeft,
        Motion::MovingRight,
        Motion::MovingUp,
        Motion::MovingDown,
        Motion::Still,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Motion::MovingLeft => "moving left",
            Motion::MovingRight => "moving right",
            Motion::MovingUp => "moving up",
            Motion::MovingDown => "moving down",
            Motion::Still => "still",
        }
    }

    fn direction(self) -> (i64, i64) {
        match self {
            Motion::MovingLeft => (-1, 0),
            Motion::MovingRight => (1, 0),
            Motion::MovingUp => (0, -1),
            Motion::MovingDown => (0, 1),
            Motion::Still => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::invalid(format!("unknown difficulty {other:?}"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub shape: Shape,
    pub color: Color,
    /// Side length (square, triangle) or diameter (circle), in pixels.
    pub size: usize,
    /// Top-left corner of the bounding box at frame 0.
    pub start: (i64, i64),
    /// Pixels per frame.
    pub velocity: (i64, i64),
    pub motion: Motion,
}

impl Instance {
    /// Bounding box top-left at frame `t`.
    pub fn origin(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }

    pub fn contains(&self, t: usize, x: usize, y: usize) -> bool {
        let (ox, oy) = self.origin(t);
        let s = self.size as f64;
        // pixel centers relative to the box corner
        let px = x as f64 - ox as f64 + 0.5;
        let py = y as f64 - oy as f64 + 0.5;
        if !(0.0..s).contains(&px) || !(0.0..s).contains(&py) {
            return false;
        }
        match self.shape {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
    pub target_index: usize,
    pub frame_count: usize,
    pub annotated_indices: Vec<usize>,
    pub difficulty: Difficulty,
    pub background_seed: u64,
}

impl SceneSpec {
    pub fn target(&self) -> &Instance {
        &self.instances[self.target_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: VideoClip,
    pub gt: GroundTruthSequence,
    pub expression: LongShortPair,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub difficulty: Difficulty,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 32,
            difficulty: Difficulty::Easy,
            height: 64,
            width: 64,
            frames: 5,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::invalid("count must be >= 1"));
        }
        if self.frames < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "frames must be >= {MIN_FRAMES} so an annotated frame has two neighbours on each side, got {}",
                self.frames
            )));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "canvas must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Middle frame plus the first and last frames with two neighbours per side.
pub fn annotated_indices(frames: usize) -> Vec<usize> {
    let mut idx = vec![2, frames / 2, frames - 3];
    idx.sort_unstable();
    idx.dedup();
    idx
}

pub fn long_expression(inst: &Instance) -> String {
    format!(
        "a {} {} is {}",
        inst.color.word(),
        inst.shape.word(),
        inst.motion.words()
    )
}

pub fn short_expression(inst: &Instance) -> String {
    format!("a {} {}", inst.color.word(), inst.shape.word())
}

pub fn generate(seed: u64, config: &GenerateConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.count)
        .map(|i| generate_sample(seed, i, config))
        .collect()
}

/// Sample `index` of the corpus seeded by `seed`; independent of other samples.
pub fn generate_sample(seed: u64, index: usize, config: &GenerateConfig) -> Result<Sample> {
    config.validate()?;
    let mut rng = stream_rng(seed, index as u64);
    let scene = sample_scene(&mut rng, config)?;
    build_sample(format!("s{index:04}"), scene)
}

fn build_sample(id: String, scene: SceneSpec) -> Result<Sample> {
    let background = background_texture(scene.height, scene.width, scene.background_seed);
    let frames = (0..scene.frame_count)
        .map(|t| render_frame(&scene, &background, t))
        .collect::<Result<Vec<_>>>()?;
    let clip = VideoClip::new(frames, scene.annotated_indices.clone())?;
    let target = *scene.target();
    let masks = (0..scene.frame_count)
        .map(|t| rasterize_mask(&target, t, scene.height, scene.width).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let gt = GroundTruthSequence::new(masks)?;
    let expression = template_pair(&long_expression(&target), &short_expression(&target))?;
    Ok(Sample {
        id,
        clip,
        gt,
        expression,
        scene,
    })
}

fn template_pair(long: &str, short: &str) -> Result<LongShortPair> {
    Ok(LongShortPair {
        long: pos_tag(&tokenize(long))?,
        short: pos_tag(&tokenize(short))?,
        source: ShortSource::Manual,
        fallback: long == short,
    })
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], exclude: &[T]) -> T
where
    T: PartialEq,
{
    let allowed: Vec<T> = items.iter().copied().filter(|i| !exclude.contains(i)).collect();
    *allowed.choose(rng).expect("palette larger than exclusions")
}

/// Appearance and motion for each instance; the target is index 0 before shuffling.
fn scene_roles(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Vec<(Shape, Color, Motion)> {
    let shape = pick(rng, &Shape::ALL, &[]);
    let color = pick(rng, &Color::ALL, &[]);
    let motion = pick(rng, &Motion::ALL, &[]);
    let target = (shape, color, motion);
    match difficulty {
        Difficulty::Easy => {
            let other = (
                pick(rng, &Shape::ALL, &[shape]),
                pick(rng, &Color::ALL, &[color]),
                pick(rng, &Motion::ALL, &[motion]),
            );
            vec![target, other]
        }
        Difficulty::Hard => {
            // same motion, different look
            let c1 = pick(rng, &Color::ALL, &[color]);
            let same_motion = (pick(rng, &Shape::ALL, &[shape]), c1, motion);
            // same shape, different colour and motion
            let same_shape = (
                shape,
                pick(rng, &Color::ALL, &[color, c1]),
                pick(rng, &Motion::ALL, &[motion]),
            );
            vec![target, same_motion, same_shape]
        }
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, config: &GenerateConfig) -> Result<SceneSpec> {
    let GenerateConfig {
        height,
        width,
        frames,
        difficulty,
        ..
    } = *config;
    let side = height.min(width);
    let (min_size, max_size) = ((side / 6).max(6), (side / 4).max(7));
    let roles = scene_roles(rng, difficulty);
    let background_seed: u64 = rng.gen();

    for _ in 0..MAX_ATTEMPTS {
        let mut placed: Vec<Instance> = Vec::with_capacity(roles.len());
        let mut ok = true;
        for &(shape, color, motion) in &roles {
            let size = rng.gen_range(min_size..=max_size);
            let speed = if motion == Motion::Still {
                0
            } else {
                rng.gen_range(1..=3)
            };
            let (dx, dy) = motion.direction();
            let velocity = (dx * speed, dy * speed);
            let Some(start) = place(rng, size, velocity, frames, height, width) else {
                ok = false;
                break;
            };
            let inst = Instance {
                shape,
                color,
                size,
                start,
                velocity,
                motion,
            };
            if placed.iter().any(|p| trajectories_touch(p, &inst, frames)) {
                ok = false;
                break;
            }
            placed.push(inst);
        }
        if !ok {
            continue;
        }
        // shuffle so the target is not always painted first
        let mut order: Vec<usize> = (0..placed.len()).collect();
        order.shuffle(rng);
        let instances: Vec<Instance> = order.iter().map(|&i| placed[i]).collect();
        let target_index = order.iter().position(|&i| i == 0).expect("target present");
        return Ok(SceneSpec {
            height,
            width,
            instances,
            target_index,
            frame_count: frames,
            annotated_indices: annotated_indices(frames),
            difficulty,
            background_seed,
        });
    }
    Err(Error::Generation(format!(
        "no feasible placement after {MAX_ATTEMPTS} attempts on a {height}x{width} canvas"
    )))
}

/// Random start so the bounding box stays at least 1 px inside the canvas.
fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    velocity: (i64, i64),
    frames: usize,
    height: usize,
    width: usize,
) -> Option<(i64, i64)> {
    let travel = frames as i64 - 1;
    let mut axis = |v: i64, extent: usize| -> Option<i64> {
        let lo = 1 - (v * travel).min(0);
        let hi = extent as i64 - 1 - size as i64 - (v * travel).max(0);
        (lo <= hi).then(|| rng.gen_range(lo..=hi))
    };
    let x = axis(velocity.0, width)?;
    let y = axis(velocity.1, height)?;
    Some((x, y))
}

/// Bounding boxes closer than 2 px at any frame.
fn trajectories_touch(a: &Instance, b: &Instance, frames: usize) -> bool {
    (0..frames).any(|t| {
        let (ax, ay) = a.origin(t);
        let (bx, by) = b.origin(t);
        let gap = 2;
        ax < bx + b.size as i64 + gap
            && bx < ax + a.size as i64 + gap
            && ay < by + b.size as i64 + gap
            && by < ay + a.size as i64 + gap
    })
}

/// Smooth gray noise, quantized to 8 bits.
pub fn background_texture(height: usize, width: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = stream_rng(seed, u64::MAX);
    let raw: Vec<f64> = (0..height * width).map(|_| rng.gen::<f64>()).collect();
    let blurred = box3(&box3(&raw, height, width), height, width);
    blurred
        .iter()
        .map(|v| {
            let g = (90.0 + 80.0 * v).round() as u8;
            [g, g, g]
        })
        .collect()
}

fn box3(src: &[f64], height: usize, width: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        src[y * width + x]
    };
    let mut out = Vec::with_capacity(src.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(x + dx, y + dy);
                }
            }
            out.push(acc / 9.0);
        }
    }
    out
}

pub fn rasterize_mask(inst: &Instance, t: usize, height: usize, width: usize) -> Result<BinaryMask> {
    BinaryMask::from_fn(height, width, |x, y| inst.contains(t, x, y))
}

pub fn render_frame(scene: &SceneSpec, background: &[[u8; 3]], t: usize) -> Result<RgbImage> {
    let (h, w) = (scene.height, scene.width);
    if background.len() != h * w {
        return Err(Error::shape("render_frame background", h * w, background.len()));
    }
    let mut px = background.to_vec();
    for inst in &scene.instances {
        let rgb = inst.color.rgb();
        for y in 0..h {
            for x in 0..w {
                if inst.contains(t, x, y) {
                    px[y * w + x] = rgb;
                }
            }
        }
    }
    RgbImage::new(
        h,
        w,
        px.iter().map(|p| p.map(|c| f64::from(c) / 255.0)).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub annotated_indices: Vec<usize>,
    pub long: String,
    pub short: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub samples: Vec<ManifestRecord>,
}

pub fn write_corpus(root: impl AsRef<Path>, seed: u64, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let frames_dir = root.join(&s.id).join("frames");
        let masks_dir = root.join(&s.id).join("masks");
        for d in [&frames_dir, &masks_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut frame_paths = Vec::new();
        let mut mask_paths = Vec::new();
        for (t, frame) in s.clip.frames().iter().enumerate() {
            let rel = format!("{}/frames/{t:04}.ppm", s.id);
            io::write_frame(root.join(&rel), frame)?;
            frame_paths.push(rel);
        }
        for (t, mask) in s.gt.frames().iter().enumerate() {
            if let Some(mask) = mask {
                let rel = format!("{}/masks/{t:04}.pgm", s.id);
                io::write_binary_mask(root.join(&rel), mask)?;
                mask_paths.push(rel);
            }
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            frames: frame_paths,
            masks: mask_paths,
            annotated_indices: s.clip.annotated().to_vec(),
            long: s.expression.long.text(),
            short: s.expression.short.text(),
            scene: s.scene.clone(),
        });
    }
    let manifest = Manifest {
        seed,
        samples: records,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let path = root.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_corpus(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root: PathBuf = root.as_ref().to_path_buf();
    let manifest = read_manifest(&root)?;
    manifest
        .samples
        .into_iter()
        .map(|rec| {
            let frames = rec
                .frames
                .iter()
                .map(|p| io::read_frame(root.join(p)))
                .collect::<Result<Vec<_>>>()?;
            let clip = VideoClip::new(frames, rec.annotated_indices.clone())?;
            let mut masks = vec![None; clip.len()];
            for p in &rec.masks {
                let t = frame_index(p)?;
                if t >= masks.len() {
                    return Err(Error::invalid(format!("mask {p} beyond clip length")));
                }
                masks[t] = Some(io::read_binary_mask(root.join(p))?);
            }
            Ok(Sample {
                id: rec.id,
                clip,
                gt: GroundTruthSequence::new(masks)?,
                expression: template_pair(&rec.long, &rec.short)?,
                scene: rec.scene,
            })
        })
        .collect()
}

fn frame_index(rel: &str) -> Result<usize> {
    Path::new(rel)
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("cannot parse frame index from {rel}")))
}
