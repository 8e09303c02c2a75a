//! Synthetic training clips and frame-sequence ingestion.
//!
//! Synthetic scenes are rendered from continuous procedural textures, so a
//! sprite moving by an integer velocity reproduces the previous frame
//! shifted exactly by that many pixels.

use crate::error::{Error, Result};
use crate::scale_space::{create_gaussian_kernel, gaussian_blur};
use crate::tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

/// A time-ordered sequence of `[3, H, W]` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
}

impl Clip {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Ingestion("clip has no frames".into()))?;
        let s = first.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Ingestion(format!("frames must be [3, H, W], got {s:?}")));
        }
        if let Some(i) = frames.iter().position(|f| f.shape() != s.as_slice()) {
            return Err(Error::Ingestion(format!(
                "frame {i} is {:?}, frame 0 is {s:?}",
                frames[i].shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// Top-left `h x w` window of every frame.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let (fh, fw) = self.dims();
        if h > fh || w > fw {
            return Err(Error::Usage(format!("crop {w}x{h} exceeds frame {fw}x{fh}")));
        }
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let d = f.data();
                Tensor::from_fn(&[3, h, w], |i| {
                    let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                    d[(c * fh + y) * fw + x]
                })
            })
            .collect();
        Ok(Self { frames })
    }
}

/// Sum of oriented sinusoids, evaluated at continuous coordinates.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<([f64; 2], f64, [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    /// `waves` gratings with spatial frequency in `[f_lo, f_hi]` cycles per
    /// pixel and amplitude proportional to `1 / f`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, waves: usize, f_lo: f64, f_hi: f64) -> Self {
        let base = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let mut list = Vec::with_capacity(waves);
        let mut norm = 0.0;
        for _ in 0..waves {
            let f = f_lo * (f_hi / f_lo).powf(rng.gen::<f64>());
            let th = rng.gen_range(0.0..TAU);
            let amp = 1.0 / f;
            norm += amp;
            let tint = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            list.push(([f * th.cos(), f * th.sin()], rng.gen_range(0.0..TAU), [amp * tint[0], amp * tint[1], amp * tint[2]]));
        }
        for w in &mut list {
            for a in &mut w.2 {
                *a *= 0.9 / norm;
            }
        }
        Self { waves: list, base }
    }

    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let mut v = self.base[c];
        for (k, phase, amp) in &self.waves {
            v += amp[c] * (TAU * (k[0] * x + k[1] * y) + phase).cos();
        }
        v.clamp(0.0, 1.0)
    }
}

/// A disc-shaped textured object in uniform motion.
#[derive(Clone, Debug)]
pub struct Sprite {
    pub center: [f64; 2],
    pub radius: f64,
    /// Pixels per frame, `(x, y)`.
    pub velocity: [f64; 2],
    /// First frame in which the sprite is visible.
    pub appears_at: usize,
    pub texture: Texture,
}

/// Everything needed to render a clip deterministically.
#[derive(Clone, Debug)]
pub struct Scene {
    pub background: Texture,
    /// Background motion, pixels per frame.
    pub camera: [f64; 2],
    pub sprites: Vec<Sprite>,
    /// Frame from which a progressive blur starts, if any.
    pub blur_start: Option<usize>,
    /// Blur standard deviation added per frame after `blur_start`.
    pub blur_rate: f64,
}

impl Scene {
    /// Gaussian blur sigma applied to frame `t`.
    pub fn blur_sigma(&self, t: usize) -> f64 {
        match self.blur_start {
            Some(s) if t >= s => self.blur_rate * (t - s + 1) as f64,
            _ => 0.0,
        }
    }

    pub fn render(&self, t: usize, h: usize, w: usize) -> Result<Tensor> {
        let tf = t as f64;
        let mut img = Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), ((i / w) % h) as f64, (i % w) as f64);
            let mut v = self
                .background
                .sample(x - self.camera[0] * tf, y - self.camera[1] * tf, c);
            for s in self.sprites.iter().filter(|s| t >= s.appears_at) {
                let (lx, ly) = (x - s.velocity[0] * tf, y - s.velocity[1] * tf);
                let (dx, dy) = (lx - s.center[0], ly - s.center[1]);
                if dx * dx + dy * dy <= s.radius * s.radius {
                    v = s.texture.sample(lx, ly, c);
                }
            }
            v
        });
        let sigma = self.blur_sigma(t);
        if sigma > 0.0 {
            let k = create_gaussian_kernel(sigma)?;
            img = gaussian_blur(&Var::constant(img), &k)?.value().clone();
        }
        Ok(img)
    }

    pub fn clip(&self, length: usize, h: usize, w: usize) -> Result<Clip> {
        Clip::new((0..length).map(|t| self.render(t, h, w)).collect::<Result<Vec<_>>>()?)
    }
}

/// Seeded generator of textured-sprite clips with motion, progressive blur
/// and appearing objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub sprites: usize,
    /// Largest speed in pixels per frame along each axis.
    pub max_velocity: f64,
    /// Sinusoids per texture.
    pub texture_waves: usize,
    pub blur_probability: f64,
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            sprites: 3,
            max_velocity: 3.0,
            texture_waves: 8,
            blur_probability: 0.2,
            occlusion_probability: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSource {
    /// Scene `index` of this source; a pure function of `(seed, index)`.
    pub fn scene(&self, index: u64, length: usize, h: usize, w: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let v = self.max_velocity;
        let vel = |rng: &mut ChaCha8Rng, s: f64| [rng.gen_range(-v..=v) * s, rng.gen_range(-v..=v) * s];
        let camera = vel(&mut rng, 0.5);
        let background = Texture::random(&mut rng, self.texture_waves, 0.01, 0.25);
        let sprites = (0..self.sprites)
            .map(|_| {
                let appears_at = if length > 1 && rng.gen_bool(self.occlusion_probability.clamp(0.0, 1.0)) {
                    rng.gen_range(1..length)
                } else {
                    0
                };
                Sprite {
                    center: [rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)],
                    radius: rng.gen_range(0.1..0.3) * h.min(w) as f64,
                    velocity: vel(&mut rng, 1.0),
                    appears_at,
                    texture: Texture::random(&mut rng, self.texture_waves, 0.03, 0.35),
                }
            })
            .collect();
        let blur_start = (length > 1 && rng.gen_bool(self.blur_probability.clamp(0.0, 1.0))).then(|| rng.gen_range(1..length));
        Scene { background, camera, sprites, blur_start, blur_rate: rng.gen_range(0.4..1.0) }
    }

    pub fn generate_clip(&self, index: u64, length: usize, h: usize, w: usize) -> Result<Clip> {
        if length == 0 {
            return Err(Error::Usage("clip length must be positive".into()));
        }
        self.scene(index, length, h, w).clip(length, h, w)
    }

    /// `batch` random clips stacked per time step: `frames` tensors of
    /// shape `[batch, 3, crop, crop]`.
    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, frames: usize, crop: usize) -> Result<Vec<Tensor>> {
        let clips = (0..batch)
            .map(|_| self.generate_clip(rng.gen(), frames, crop, crop))
            .collect::<Result<Vec<_>>>()?;
        (0..frames)
            .map(|t| Tensor::stack(&clips.iter().map(|c| c.frames[t].clone()).collect::<Vec<_>>()))
            .collect()
    }
}

/// A 1/f-spectrum test image with sharp-edged shapes on top, as a stand-in
/// for natural image statistics.
pub fn natural_image(seed: u64, h: usize, w: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene {
        background: Texture::random(&mut rng, 48, 0.004, 0.45),
        camera: [0.0, 0.0],
        sprites: (0..4)
            .map(|_| Sprite {
                center: [rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)],
                radius: rng.gen_range(0.08..0.25) * h.min(w) as f64,
                velocity: [0.0, 0.0],
                appears_at: 0,
                texture: Texture::random(&mut rng, 16, 0.01, 0.4),
            })
            .collect(),
        blur_start: None,
        blur_rate: 0.0,
    };
    scene.render(0, h, w)
}

/// Sidecar of a raw planar RGB file, stored next to it as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDims {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_depth")]
    pub bit_depth: u8,
}

fn default_depth() -> u8 {
    8
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Load a clip from a directory of numbered PNG/PPM frames (ordered by the
/// number in the file name) or from a raw planar 8-bit RGB file with a
/// `<file>.json` sidecar giving its dimensions.
pub fn load_frames(path: &Path) -> Result<Clip> {
    if path.is_dir() {
        let mut entries: Vec<(u64, PathBuf)> = Vec::new();
        for e in fs::read_dir(path)? {
            let p = e?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("png") | Some("ppm")) {
                continue;
            }
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            let n = digits
                .parse::<u64>()
                .map_err(|_| Error::Ingestion(format!("{} has no frame number", p.display())))?;
            entries.push((n, p));
        }
        if entries.is_empty() {
            return Err(Error::Ingestion(format!("no PNG/PPM frames in {}", path.display())));
        }
        entries.sort();
        let frames = entries.iter().map(|(_, p)| read_image(p)).collect::<Result<Vec<_>>>()?;
        return Clip::new(frames);
    }
    let dims: RawDims = serde_json::from_slice(&fs::read(sidecar(path)).map_err(|e| {
        Error::Ingestion(format!("raw input {} needs a sidecar {}: {e}", path.display(), sidecar(path).display()))
    })?)?;
    if dims.bit_depth != 8 {
        return Err(Error::Ingestion(format!("unsupported raw bit depth {}", dims.bit_depth)));
    }
    let bytes = fs::read(path)?;
    let frame_len = 3 * dims.width * dims.height;
    if frame_len == 0 || bytes.is_empty() || bytes.len() % frame_len != 0 {
        return Err(Error::Ingestion(format!(
            "raw file of {} bytes is not a whole number of {}x{} RGB frames",
            bytes.len(),
            dims.width,
            dims.height
        )));
    }
    let frames = bytes
        .chunks_exact(frame_len)
        .map(|c| Tensor::new(&[3, dims.height, dims.width], c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => read_png(path),
        Some("ppm") => read_ppm(&fs::read(path)?),
        _ => Err(Error::Ingestion(format!("unsupported image {}", path.display()))),
    }
}

fn planar(h: usize, w: usize, channels: usize, pixels: &[u8]) -> Result<Tensor> {
    Tensor::new(
        &[3, h, w],
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                let c = if channels < 3 { 0 } else { c };
                pixels[p * channels + c] as f64 / 255.0
            })
            .collect(),
    )
}

fn read_png(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Ingestion(format!("{}: unsupported bit depth {:?}", path.display(), info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Ingestion(format!("{}: indexed PNG is not supported", path.display())))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    planar(h, w, channels, &buf[..info.buffer_size()])
}

/// Binary (P6) PPM with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Ingestion("PPM header truncated".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Ingestion(format!("unsupported PPM magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Ingestion(format!("bad PPM field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Ingestion(format!("unsupported PPM bit depth (maxval {maxval})")));
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() < 3 * w * h {
        return Err(Error::Ingestion("PPM pixel data truncated".into()));
    }
    planar(h, w, 3, &data[..3 * w * h])
}

fn to_u8(frame: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Usage(format!("frames must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut out = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok((h, w, out))
}

pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w, px) = to_u8(frame)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w, px) = to_u8(frame)?;
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    enc.write_header().map_err(io)?.write_image_data(&px).map_err(io)?;
    Ok(())
}

/// Write `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn write_frames(dir: &Path, clip: &Clip) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, f) in clip.frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{t:05}.png")), f)?;
    }
    Ok(())
}

/// Read a whole file; used for bitstreams and configs.
pub fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    fs::File::open(path)?.read_to_end(&mut v)?;
    Ok(v)
}
