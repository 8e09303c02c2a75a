//! Rate-distortion evaluation: PSNR, bits per pixel, sweeps and an
//! external reference codec driven through `ffmpeg`.

use crate::codec::{encode_video, verify_sync};
use crate::data::{read_image, write_frames, Clip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::Model;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

/// PSNR reported for bit-identical frames.
pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB of `b` against reference `a`, peak 1. Identical inputs give
/// infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("psnr of {:?} against {:?}", a.shape(), b.shape())));
    }
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean over frames of the per-frame PSNR, each capped at [`PSNR_CAP`].
pub fn mean_psnr(reference: &[Tensor], decoded: &[Tensor]) -> Result<f64> {
    if reference.is_empty() || reference.len() != decoded.len() {
        return Err(Error::Usage("psnr needs one decoded frame per reference frame".into()));
    }
    let mut total = 0.0;
    for (a, b) in reference.iter().zip(decoded) {
        total += psnr(a, b)?.min(PSNR_CAP);
    }
    Ok(total / reference.len() as f64)
}

pub fn bpp(bytes: usize, frames: usize, h: usize, w: usize) -> f64 {
    8.0 * bytes as f64 / (frames * h * w) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub variant: String,
    pub beta: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub frames: usize,
    /// Wall-clock encode plus decode time; zero when timing is off.
    pub seconds: f64,
}

/// Encode, decode and check encoder/decoder agreement, then score the
/// decoded frames (clamped to `[0, 1]`) against the originals.
pub fn evaluate(model: &Model, clip: &Clip, beta: f64, timing: bool) -> Result<RdPoint> {
    let start = Instant::now();
    let encoded = encode_video(model, &clip.frames, beta)?;
    let decoded = verify_sync(model, &encoded)?;
    let seconds = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let clamped: Vec<Tensor> = decoded.frames.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect();
    let (h, w) = clip.dims();
    Ok(RdPoint {
        variant: model.config.variant.name().to_string(),
        beta,
        bpp: bpp(encoded.bytes.len(), clip.len(), h, w),
        psnr: mean_psnr(&clip.frames, &clamped)?,
        frames: clip.len(),
        seconds,
    })
}

/// Evaluate each `(model, beta)` pair on `clip`, sorted by rate. Any
/// encoder/decoder mismatch aborts the sweep.
pub fn rd_sweep(models: &[(Model, f64)], clip: &Clip, timing: bool) -> Result<Vec<RdPoint>> {
    let mut points = models
        .iter()
        .map(|(m, beta)| evaluate(m, clip, *beta, timing))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    Ok(points)
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("variant,beta,bpp,psnr,frames,seconds\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.6},{:.4},{},{:.3}", p.variant, p.beta, p.bpp, p.psnr, p.frames, p.seconds);
    }
    s
}

/// Colour handling of the external codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExternalMode {
    /// Planar RGB, no chroma subsampling.
    Rgb,
    Yuv420,
}

impl ExternalMode {
    fn pix_fmt(self) -> &'static str {
        match self {
            Self::Rgb => "gbrp",
            Self::Yuv420 => "yuv420p",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Rgb => "x265-rgb",
            Self::Yuv420 => "x265-yuv420",
        }
    }
}

/// Result of the external-codec comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum ExternalReport {
    Points(Vec<RdPoint>),
    /// `ffmpeg` could not be found or run.
    Unavailable(String),
}

fn ffmpeg(args: &[&str]) -> std::io::Result<std::process::Output> {
    Command::new("ffmpeg").args(["-hide_banner", "-loglevel", "error"]).args(args).output()
}

pub fn ffmpeg_available() -> bool {
    ffmpeg(&["-version"]).map(|o| o.status.success()).unwrap_or(false)
}

/// Low-latency x265 (no B-frames) at each CRF in `qualities`, scored like
/// [`evaluate`]. `work` receives the intermediate files.
pub fn external_codec(clip: &Clip, qualities: &[u32], mode: ExternalMode, work: &Path) -> Result<ExternalReport> {
    if !ffmpeg_available() {
        return Ok(ExternalReport::Unavailable("ffmpeg not found on PATH".into()));
    }
    let src = work.join("src");
    write_frames(&src, clip)?;
    let (h, w) = clip.dims();
    let pattern = src.join("frame_%05d.png");
    let mut points = Vec::with_capacity(qualities.len());
    for &q in qualities {
        let video = work.join(format!("crf{q}.mkv"));
        let out_dir = work.join(format!("crf{q}"));
        std::fs::create_dir_all(&out_dir)?;
        let crf = q.to_string();
        let enc = ffmpeg(&[
            "-y", "-i", &path_str(&pattern)?, "-c:v", "libx265", "-pix_fmt", mode.pix_fmt(),
            "-x265-params", "bframes=0", "-crf", &crf, &path_str(&video)?,
        ])?;
        check(&enc, "encode")?;
        let dec = ffmpeg(&["-y", "-i", &path_str(&video)?, &path_str(&out_dir.join("frame_%05d.png"))?])?;
        check(&dec, "decode")?;
        let decoded = (0..clip.len())
            .map(|t| read_image(&out_dir.join(format!("frame_{t:05}.png"))).map(|f| f.map(|v| v.clamp(0.0, 1.0))))
            .collect::<Result<Vec<_>>>()?;
        points.push(RdPoint {
            variant: mode.label().to_string(),
            beta: q as f64,
            bpp: bpp(std::fs::metadata(&video)?.len() as usize, clip.len(), h, w),
            psnr: mean_psnr(&clip.frames, &decoded)?,
            frames: clip.len(),
            seconds: 0.0,
        });
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    Ok(ExternalReport::Points(points))
}

fn path_str(p: &PathBuf) -> Result<String> {
    p.to_str().map(str::to_string).ok_or_else(|| Error::Usage(format!("{} is not UTF-8", p.display())))
}

fn check(out: &std::process::Output, what: &str) -> Result<()> {
    if out.status.success() {
        Ok(())
    } else {
        Err(Error::Ingestion(format!("ffmpeg {what} failed: {}", String::from_utf8_lossy(&out.stderr).trim())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_uniform_error() {
        let a = Tensor::zeros(&[3, 4, 4]);
        let b = Tensor::full(&[3, 4, 4], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(mean_psnr(&[a.clone()], &[a]).unwrap(), PSNR_CAP);
    }

    #[test]
    fn bpp_counts_bits_per_pixel_per_frame() {
        assert_eq!(bpp(64, 2, 16, 16), 1.0);
    }
}
