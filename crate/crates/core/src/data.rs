//! Frame-sequence ingestion, additive Gaussian noise, and window extraction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pipeline::{MID_INDEX, WINDOW_LEN};
use crate::scalar::Scalar;
use crate::stn::{IMAGE_CHANNELS, SPATIAL_MULTIPLE};
use crate::tensor::Tensor;

/// Training noise levels, in 8-bit units.
pub const SIGMA_SET: [f64; 9] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0];

const WINDOW_STREAM_BASE: u64 = 1 << 40;

/// Independent noise stream `stream` under `seed`.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `frame + N(0, (sigma255/255)²)` per element, drawn from `rng`. Not clipped.
pub fn add_gaussian_noise_with<T: Scalar>(frame: &Tensor<T>, sigma255: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if !(sigma255 >= 0.0) || !sigma255.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be a finite value >= 0, got {sigma255}")));
    }
    if sigma255 == 0.0 {
        return Ok(frame.clone());
    }
    let std = sigma255 / 255.0;
    let mut out = frame.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = T::of(v.f64() + std * n);
    }
    Ok(out)
}

/// Adds Gaussian noise with standard deviation `sigma255 / 255` from a seeded stream.
pub fn add_gaussian_noise<T: Scalar>(frame: &Tensor<T>, sigma255: f64, seed: u64) -> Result<Tensor<T>> {
    add_gaussian_noise_with(frame, sigma255, &mut noise_rng(seed, 0))
}

/// Mirrors an out-of-range frame index back into `0..len` (`-1 → 1`, `len → len-2`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source indices of the five-frame window centred on `t`.
pub fn window_indices(t: usize, len: usize) -> [usize; WINDOW_LEN] {
    std::array::from_fn(|k| reflect_index(t as isize + k as isize - MID_INDEX as isize, len))
}

/// Square crop rectangle shared by every frame of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub size: usize,
    pub y: usize,
    pub x: usize,
}

/// Five consecutive noisy frames and the clean middle frame.
#[derive(Debug, Clone)]
pub struct FrameWindow {
    pub frames: Vec<Tensor<f32>>,
    pub clean_mid: Tensor<f32>,
    pub sigma: f64,
    pub t: usize,
    pub indices: [usize; WINDOW_LEN],
}

impl FrameWindow {
    pub const MID: usize = MID_INDEX;

    pub fn noisy_mid(&self) -> &Tensor<f32> {
        &self.frames[MID_INDEX]
    }
}

/// A clip held in memory: `3×H×W` frames with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
}

impl Clip {
    pub fn new(name: impl Into<String>, frames: Vec<Tensor<f32>>) -> Result<Self> {
        let name = name.into();
        let first = frames.first().ok_or_else(|| Error::Dataset(format!("clip {name} has no frames")))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
            return Err(Error::Dataset(format!("clip {name}: frames must be 3×H×W, got {shape:?}")));
        }
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape.as_slice()) {
            return Err(Error::Dataset(format!(
                "clip {name}: frame {i} is {:?} but frame 0 is {shape:?}",
                f.shape()
            )));
        }
        Ok(Clip { name, frames })
    }

    /// Loads every numbered PNG frame of a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let paths = list_frames(dir)?;
        let frames = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Clip::new(name, frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)` shared by all frames.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

/// Builds the noisy window centred on frame `t`. The five frames get
/// independent noise realizations derived from `(seed, t, slot)`.
pub fn make_window(clip: &Clip, t: usize, sigma255: f64, crop: Option<Crop>, seed: u64) -> Result<FrameWindow> {
    if clip.is_empty() {
        return Err(Error::Dataset(format!("clip {} has no frames", clip.name)));
    }
    if t >= clip.len() {
        return Err(Error::InvalidArgument(format!("frame index {t} outside clip of {} frames", clip.len())));
    }
    let (h, w) = clip.dims();
    if let Some(c) = crop {
        if c.size == 0 || c.size % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "crop size {} must be a positive multiple of {SPATIAL_MULTIPLE}",
                c.size
            )));
        }
        if c.y + c.size > h || c.x + c.size > w {
            return Err(Error::InvalidArgument(format!(
                "crop {}×{} at ({}, {}) exceeds frame bounds {h}×{w}",
                c.size, c.size, c.y, c.x
            )));
        }
    }
    let cut = |f: &Tensor<f32>| match crop {
        Some(c) => f.crop(c.y, c.x, c.size, c.size),
        None => Ok(f.clone()),
    };
    let indices = window_indices(t, clip.len());
    let frames = indices
        .iter()
        .enumerate()
        .map(|(slot, &src)| {
            let stream = WINDOW_STREAM_BASE + ((t as u64) << 3) + slot as u64;
            add_gaussian_noise_with(&cut(&clip.frames[src])?, sigma255, &mut noise_rng(seed, stream))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameWindow { frames, clean_mid: cut(&clip.frames[t])?, sigma: sigma255, t, indices })
}

/// A dataset root: one clip per subdirectory, or a single clip if the root
/// itself holds frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs = Vec::new();
        let mut has_frames = false;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.is_dir() {
                dirs.push(path);
            } else if is_png(&path) {
                has_frames = true;
            }
        }
        dirs.sort();
        let clips = if dirs.is_empty() && has_frames {
            vec![Clip::load(root)?]
        } else {
            dirs.iter().map(|d| Clip::load(d)).collect::<Result<Vec<_>>>()?
        };
        if clips.is_empty() {
            return Err(Error::Dataset(format!("no clips found under {}", root.display())));
        }
        Ok(Dataset { clips })
    }

    pub fn num_windows(&self) -> usize {
        self.clips.iter().map(Clip::len).sum()
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// File name of frame `i`: `000042.png`.
pub fn frame_file_name(i: usize) -> String {
    format!("{i:06}.png")
}

/// Numbered PNG frames of a directory in order. Numbering must start at 0
/// and have no gaps.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut numbered = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_png(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let n: usize = stem
            .parse()
            .map_err(|_| Error::Dataset(format!("{}: frame names must be decimal numbers", path.display())))?;
        numbered.push((n, path));
    }
    numbered.sort();
    if numbered.is_empty() {
        return Err(Error::Dataset(format!("no PNG frames in {}", dir.display())));
    }
    for (expect, (n, path)) in numbered.iter().enumerate() {
        if *n != expect {
            return Err(Error::Dataset(format!(
                "{}: frame numbering has a gap, expected frame {expect}",
                path.display()
            )));
        }
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

/// Reads an 8-bit PNG as a `3×H×W` tensor in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_owned(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// `[0, 1]` value to an 8-bit level: clamp, scale, round half away from zero.
pub fn to_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Writes a `3×H×W` tensor as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = frame.dims3("write_frame")?;
    if c != IMAGE_CHANNELS {
        return Err(Error::shape("write_frame", format!("expected 3 channels, got {c}")));
    }
    let d = frame.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push(to_u8(d[ch * h * w + i]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_owned(), message: e.to_string() })
}

/// Frame quantized through the 8-bit export path.
pub fn quantize(frame: &Tensor<f32>) -> Tensor<f32> {
    frame.map(|v| to_u8(v) as f32 / 255.0)
}
