//! Procedurally rendered, class-imbalanced toy video dataset.
//!
//! Every video shows one colored square over a static textured background.
//! Square color, background and texture are drawn independently of the
//! class, so a single frame says little about the label; the class is the
//! motion pattern. Pixel values are quantized to 8 bits at render time so
//! the PNG container round-trips exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ClassEntry, ClassRegistry, TaskKind};
use crate::error::{invalid, Error, Result};
use crate::io::{read_frames, read_json, to_u8, write_frames, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Orbit,
    Sweep,
    Oscillate,
    Blink,
    Spiral,
    Zigzag,
    Jitter,
    /// Slow drift; the negative class of the event task.
    Drift,
    /// Slow drift plus a growing red blob from a random onset frame.
    Bleed,
}

impl MotionClass {
    pub const ALL: [MotionClass; 9] = [
        Self::Orbit,
        Self::Sweep,
        Self::Oscillate,
        Self::Blink,
        Self::Spiral,
        Self::Zigzag,
        Self::Jitter,
        Self::Drift,
        Self::Bleed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Orbit => "orbit",
            Self::Sweep => "sweep",
            Self::Oscillate => "oscillate",
            Self::Blink => "blink",
            Self::Spiral => "spiral",
            Self::Zigzag => "zigzag",
            Self::Jitter => "jitter",
            Self::Drift => "drift",
            Self::Bleed => "bleed",
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid!("unknown motion class {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub classes: Vec<MotionClass>,
    /// Videos per class.
    pub counts: Vec<usize>,
    pub frames: usize,
    pub resolution: usize,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            classes: vec![MotionClass::Orbit, MotionClass::Sweep, MotionClass::Oscillate],
            counts: vec![40, 40, 8],
            frames: 24,
            resolution: 16,
            task: TaskKind::Action,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(invalid!("dataset needs at least two classes"));
        }
        if self.classes.len() != self.counts.len() {
            return Err(invalid!(
                "{} classes but {} counts",
                self.classes.len(),
                self.counts.len()
            ));
        }
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return Err(invalid!("class {} has zero videos", self.classes[i]));
        }
        if self.resolution < 4 || self.frames == 0 {
            return Err(invalid!("resolution must be >= 4 and frames >= 1"));
        }
        if self.under_represented().is_empty() {
            return Err(invalid!(
                "no class has fewer than a quarter of the majority count {:?}",
                self.counts
            ));
        }
        Ok(())
    }

    /// Classes whose count is below a quarter of the majority count.
    pub fn under_represented(&self) -> Vec<usize> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        (0..self.counts.len()).filter(|&i| self.counts[i] * 4 < max).collect()
    }

    pub fn registry(&self) -> Result<ClassRegistry> {
        let under = self.under_represented();
        ClassRegistry::new(
            self.classes
                .iter()
                .enumerate()
                .map(|(id, c)| ClassEntry {
                    id,
                    name: c.name().to_string(),
                    template: self.task,
                    under_represented: under.contains(&id),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One rendered video; `data` is frame-major (f, c, h, w) in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Window of `len` frames starting at `start` as a clip tensor (c, f, h, w).
    pub fn clip_tensor(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.frames {
            return Err(invalid!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            ));
        }
        let n = self.frame_len();
        let slice = &self.data[start * n..(start + len) * n];
        let t = Tensor::from_slice(slice, (len, self.channels, self.height, self.width), &Device::Cpu)?;
        Ok(t.permute((1, 0, 2, 3))?.contiguous()?)
    }
}

/// Window starts for clips of `len` frames taken every `stride` frames.
pub fn window_starts(frames: usize, len: usize, stride: usize) -> Vec<usize> {
    if frames < len || stride == 0 {
        return Vec::new();
    }
    (0..=frames - len).step_by(stride).collect()
}

/// Stack clips (c, f, h, w) into (b, c, f, h, w) with the given dtype.
pub fn stack_clips(clips: &[Tensor], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::stack(clips, 0)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VideoIndex {
    id: usize,
    label: usize,
    split: Split,
    frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    spec: ToyDatasetSpec,
    videos: Vec<VideoIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub registry: ClassRegistry,
    pub videos: Vec<Video>,
}

fn quantize(v: f32) -> f32 {
    to_u8(v) as f32 / 255.0
}

/// Per-stream seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let d = Sha256::digest(label.as_bytes());
    base ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn triangle(x: f64) -> f64 {
    let f = x.rem_euclid(1.0);
    if f < 0.5 {
        2.0 * f
    } else {
        2.0 - 2.0 * f
    }
}

const PALETTE: [[f32; 3]; 4] = [
    [0.95, 0.85, 0.2],
    [0.2, 0.9, 0.95],
    [0.95, 0.4, 0.9],
    [0.9, 0.95, 0.9],
];

/// Render one video of `class`. All randomness comes from `rng`.
pub fn render_video<R: Rng + ?Sized>(class: MotionClass, frames: usize, res: usize, rng: &mut R) -> Vec<f32> {
    let (h, w) = (res, res);
    let tau = std::f64::consts::TAU;
    let phase: f64 = rng.random_range(0.0..tau);
    let speed: f64 = rng.random_range(0.85..1.15);
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let bg: [f32; 3] = [
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
    ];
    let texture: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.06..0.06)).collect();
    let anchor = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let side = (res as f64 / 5.0).max(1.5);
    let drift_dir = rng.random_range(0.0..tau);
    let onset = rng.random_range(frames / 6..=frames / 2);
    let blob_at = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
    let blink_offset = rng.random_range(0..6usize);
    let mut walk = anchor;
    let mut out = Vec::with_capacity(frames * 3 * h * w);
    for t in 0..frames {
        let tf = t as f64 * speed;
        let mut visible = true;
        let (cx, cy) = match class {
            MotionClass::Orbit => {
                let a = phase + tau * tf / 12.0;
                (0.5 + 0.28 * a.cos(), 0.5 + 0.28 * a.sin())
            }
            MotionClass::Sweep => (0.18 + 0.64 * triangle(phase / tau + tf / 16.0), anchor.1),
            MotionClass::Oscillate => (anchor.0, 0.5 + 0.25 * (phase + tau * tf / 4.0).sin()),
            MotionClass::Blink => {
                visible = ((t + blink_offset) / 3) % 2 == 0;
                anchor
            }
            MotionClass::Spiral => {
                let a = phase + tau * tf / 10.0;
                let r = 0.06 + 0.26 * (phase / tau + tf / 24.0).rem_euclid(1.0);
                (0.5 + r * a.cos(), 0.5 + r * a.sin())
            }
            MotionClass::Zigzag => (
                0.18 + 0.64 * triangle(phase / tau + tf / 8.0),
                0.18 + 0.64 * triangle(tf / 20.0),
            ),
            MotionClass::Jitter => {
                if t > 0 {
                    walk.0 = (walk.0 + rng.random_range(-0.1..0.1)).clamp(0.15, 0.85);
                    walk.1 = (walk.1 + rng.random_range(-0.1..0.1)).clamp(0.15, 0.85);
                }
                walk
            }
            MotionClass::Drift | MotionClass::Bleed => (
                anchor.0 + 0.006 * tf * drift_dir.cos(),
                anchor.1 + 0.006 * tf * drift_dir.sin(),
            ),
        };
        let (px, py) = (cx * w as f64, cy * h as f64);
        let blob_r = if class == MotionClass::Bleed && t >= onset {
            0.6 + 0.35 * (t - onset) as f64
        } else {
            0.0
        };
        let (bx, by) = (blob_at.0 * w as f64, blob_at.1 * h as f64);
        let mut frame = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                // Fractional overlap of the pixel with the square.
                let ox = ((x as f64 + 1.0).min(px + side / 2.0) - (x as f64).max(px - side / 2.0)).clamp(0.0, 1.0);
                let oy = ((y as f64 + 1.0).min(py + side / 2.0) - (y as f64).max(py - side / 2.0)).clamp(0.0, 1.0);
                let cover = if visible { (ox * oy) as f32 } else { 0.0 };
                let dist = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)).sqrt();
                let blob = (blob_r + 0.5 - dist).clamp(0.0, 1.0) as f32;
                for ch in 0..3 {
                    let base = (bg[ch] + texture[y * w + x]).clamp(0.0, 1.0);
                    let red = if ch == 0 { 0.85 } else { 0.05 };
                    let v = base * (1.0 - blob) + red * blob;
                    let v = v * (1.0 - cover) + color[ch] * cover;
                    frame[(ch * h + y) * w + x] = quantize(v);
                }
            }
        }
        out.extend(frame);
    }
    out
}

/// Per-class (train, val, test) sizes: test and val are rounded shares of
/// 20% and 10%, train takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = ((n as f64) * 0.2).round() as usize;
    let val = ((n as f64) * 0.1).round() as usize;
    let test = test.min(n);
    let val = val.min(n - test);
    (n - test - val, val, test)
}

impl ToyDataset {
    pub fn generate(spec: &ToyDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let registry = spec.registry()?;
        let mut videos = Vec::new();
        for (label, (&class, &count)) in spec.classes.iter().zip(&spec.counts).enumerate() {
            let mut order: Vec<usize> = (0..count).collect();
            let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split/{label}")));
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split_rng);
            let (train, val, _) = split_sizes(count);
            let mut splits = vec![Split::Test; count];
            for (rank, &i) in order.iter().enumerate() {
                splits[i] = if rank < train {
                    Split::Train
                } else if rank < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            for (i, split) in splits.into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("video/{label}/{i}")));
                let data = render_video(class, spec.frames, spec.resolution, &mut rng);
                videos.push(Video {
                    id: videos.len(),
                    label,
                    split,
                    frames: spec.frames,
                    channels: 3,
                    height: spec.resolution,
                    width: spec.resolution,
                    data,
                });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            registry,
            videos,
        })
    }

    /// Extra videos of one class from a stream disjoint from the dataset's,
    /// usable as held-out real clips.
    pub fn render_extra(&self, label: usize, n: usize, stream: &str) -> Result<Vec<Video>> {
        let class = *self
            .spec
            .classes
            .get(label)
            .ok_or_else(|| invalid!("class {label} out of range"))?;
        Ok((0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.spec.seed,
                    &format!("extra/{stream}/{label}/{i}"),
                ));
                Video {
                    id: usize::MAX - i,
                    label,
                    split: Split::Train,
                    frames: self.spec.frames,
                    channels: 3,
                    height: self.spec.resolution,
                    width: self.spec.resolution,
                    data: render_video(class, self.spec.frames, self.spec.resolution, &mut rng),
                }
            })
            .collect())
    }

    pub fn split(&self, split: Split) -> Vec<&Video> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.classes.len()];
        for v in &self.videos {
            h[v.label] += 1;
        }
        h
    }

    /// All frames of the given videos as (n, c, h, w).
    pub fn frames_tensor(videos: &[&Video]) -> Result<Tensor> {
        let first = videos.first().ok_or_else(|| invalid!("no videos"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let data: Vec<f32> = videos.iter().flat_map(|v| v.data.iter().copied()).collect();
        let n = data.len() / (c * h * w);
        Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?)
    }

    /// Write `index.json` plus one PNG frame directory per video.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let index = DatasetIndex {
            spec: self.spec.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoIndex {
                    id: v.id,
                    label: v.label,
                    split: v.split,
                    frames: v.frames,
                })
                .collect(),
        };
        for v in &self.videos {
            write_frames(
                &dir.join("videos").join(format!("{:05}", v.id)),
                &v.data,
                v.frames,
                v.channels,
                v.height,
                v.width,
            )?;
        }
        self.registry.save(&dir.join("registry.json"))?;
        write_json(&dir.join("index.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("no dataset index at {}", path.display())));
        }
        let index: DatasetIndex = read_json(&path)?;
        let registry = ClassRegistry::load(&dir.join("registry.json"))?;
        let mut videos = Vec::with_capacity(index.videos.len());
        for vi in index.videos {
            let (data, c, h, w) = read_frames(&dir.join("videos").join(format!("{:05}", vi.id)), vi.frames)?;
            videos.push(Video {
                id: vi.id,
                label: vi.label,
                split: vi.split,
                frames: vi.frames,
                channels: c,
                height: h,
                width: w,
                data,
            });
        }
        Ok(Self {
            spec: index.spec,
            registry,
            videos,
        })
    }
}

/// Mean absolute frame-to-frame change of the intensity-weighted centroid
/// of the foreground, per axis. A cheap displacement statistic.
pub fn displacement_stats(video: &Video) -> [f64; 2] {
    let (h, w) = (video.height, video.width);
    let mut centroids = Vec::with_capacity(video.frames);
    for t in 0..video.frames {
        let f = video.frame(t);
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let lum: f32 = (0..video.channels).map(|c| f[(c * h + y) * w + x]).sum::<f32>();
                let weight = (lum as f64 - 1.2).max(0.0);
                sx += weight * x as f64;
                sy += weight * y as f64;
                s += weight;
            }
        }
        centroids.push(if s > 0.0 { (sx / s, sy / s) } else { (w as f64 / 2.0, h as f64 / 2.0) });
    }
    let mut d = [0.0; 2];
    for p in centroids.windows(2) {
        d[0] += (p[1].0 - p[0].0).abs();
        d[1] += (p[1].1 - p[0].1).abs();
    }
    let n = (video.frames.max(2) - 1) as f64;
    [d[0] / n, d[1] / n]
}
