//! End-to-end video coding into a self-delimiting bitstream.
//!
//! ```text
//! header:  "STAVC1" version:u16 variant:u8 structured:u8
//!          width:u32 height:u32 frames:u32 config_hash:u64 beta:f64
//! frame:   kind:u8 (0 = I, 1 = P), then one sub-chunk per coded tensor in
//!          decode order (I: hyper, latent; P: wʰ, w, vʰ, v; TAT: vʰ, v)
//! chunk:   len:u32 lo:i16 hi:i16 range_coder_bytes[len - 4]
//! trailer: crc32:u32 over everything before it
//! ```
//!
//! Every sub-chunk codes its symbols over the support `[lo, hi]`, the
//! observed range widened by one on each side; model tails beyond the
//! support are folded into the edge symbols. The encoder returns the
//! reconstruction the decoder will compute, so the two stay in sync.

use crate::entropy::{to_symbols, Quantizer};
use crate::error::{dim_err, Error, Result};
use crate::range_coder::{rc_decode, rc_encode, FreqTable};
use crate::tensor::{no_grad, Tensor, Var};
use crate::transforms::{FrameOutput, LatentKind, Model, Variant};

pub const MAGIC: &[u8; 6] = b"STAVC1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 6 + 2 + 1 + 1 + 4 + 4 + 4 + 8 + 8;
pub const TRAILER_LEN: usize = 4;

const FRAME_I: u8 = 0;
const FRAME_P: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub variant: Variant,
    pub structured_prior: bool,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub config_hash: u64,
    pub beta: f64,
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.variant.id());
        out.push(self.structured_prior as u8);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::CorruptStream("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::CorruptStream(format!("unsupported version {version}")));
        }
        let variant = Variant::from_id(r.u8()?)?;
        let structured_prior = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::CorruptStream(format!("bad prior flag {b}"))),
        };
        Ok(Self {
            variant,
            structured_prior,
            width: r.u32()?,
            height: r.u32()?,
            frame_count: r.u32()?,
            config_hash: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
            beta: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptStream("stream truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Size bookkeeping of one coded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkStat {
    pub frame: usize,
    pub kind: LatentKind,
    /// Rate estimate of the entropy model at the rounded latents.
    pub estimated_bits: f64,
    /// Sub-chunk payload (support bounds plus range-coder bytes), in bits.
    pub actual_bits: f64,
}

impl ChunkStat {
    /// Whether the actual size is within `1% + 128` bits of the estimate.
    pub fn within_tolerance(&self) -> bool {
        (self.actual_bits - self.estimated_bits).abs() <= 0.01 * self.estimated_bits + 128.0
    }
}

#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub bytes: Vec<u8>,
    /// Encoder-side reconstructions, `[3, H, W]` each.
    pub recons: Vec<Tensor>,
    pub chunks: Vec<ChunkStat>,
}

impl EncodedVideo {
    pub fn estimated_bits(&self) -> f64 {
        self.chunks.iter().map(|c| c.estimated_bits).sum()
    }
}

fn frame_dims(frames: &[Tensor]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or_else(|| Error::Usage("cannot encode an empty clip".into()))?;
    let s = first.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(dim_err!("frames must be [3, H, W], got {:?}", s));
    }
    if frames.iter().any(|f| f.shape() != s) {
        return Err(Error::Usage("all frames of a clip must share one size".into()));
    }
    Ok((s[1], s[2]))
}

fn batch1(t: &Tensor) -> Result<Var> {
    let s = t.shape();
    Ok(Var::constant(t.reshape(&[1, s[0], s[1], s[2]])?))
}

fn unbatch(v: &Var) -> Result<Tensor> {
    let s = v.shape();
    v.value().reshape(&s[1..])
}

/// Encode one frame's coded tensors, appending sub-chunks to `out`.
fn write_frame(model: &Model, frame: usize, fo: &FrameOutput, out: &mut Vec<u8>, stats: &mut Vec<ChunkStat>) -> Result<()> {
    for latent in &fo.latents {
        let hat = latent.hat.value();
        let symbols = to_symbols(hat).map_err(|e| Error::Coding(format!("frame {frame}, {}: {e}", latent.kind.name())))?;
        let lo = symbols.iter().copied().min().unwrap_or(0) - 1;
        let hi = symbols.iter().copied().max().unwrap_or(0) + 1;
        let tables = latent.model.tables(&model.params, hat.shape(), lo, hi)?;
        let refs: Vec<&FreqTable> = tables.iter().collect();
        let payload = rc_encode(&symbols, &refs)?;
        let len = 4 + payload.len();
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.extend_from_slice(&(lo as i16).to_le_bytes());
        out.extend_from_slice(&(hi as i16).to_le_bytes());
        out.extend_from_slice(&payload);
        stats.push(ChunkStat {
            frame,
            kind: latent.kind,
            estimated_bits: latent.bits.item()?,
            actual_bits: 8.0 * len as f64,
        });
    }
    Ok(())
}

/// Encode a clip: frame 0 as an I-frame, every later frame as a P-frame
/// conditioned on the previous reconstruction only.
pub fn encode_video(model: &Model, frames: &[Tensor], beta: f64) -> Result<EncodedVideo> {
    let (h, w) = frame_dims(frames)?;
    model.config.check_frame(h, w)?;
    no_grad(|| {
        let header = Header {
            variant: model.config.variant,
            structured_prior: model.config.structured_prior,
            width: w as u32,
            height: h as u32,
            frame_count: frames.len() as u32,
            config_hash: model.config.hash(),
            beta,
        };
        let mut out = Vec::new();
        header.write(&mut out);
        let mut recons = Vec::with_capacity(frames.len());
        let mut chunks = Vec::new();
        let mut prev: Option<Var> = None;
        for (t, frame) in frames.iter().enumerate() {
            let x = batch1(frame)?;
            let fo = match &prev {
                None => model.iframe(&x, &mut Quantizer::Round)?,
                Some(p) => model.pframe(&x, p, &mut Quantizer::Round)?,
            };
            out.push(if prev.is_none() { FRAME_I } else { FRAME_P });
            write_frame(model, t, &fo, &mut out, &mut chunks)?;
            recons.push(unbatch(&fo.recon)?);
            prev = Some(fo.recon.detach());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(EncodedVideo { bytes: out, recons, chunks })
    })
}

#[derive(Clone, Debug)]
pub struct DecodedVideo {
    pub header: Header,
    /// Reconstructions, `[3, H, W]` each.
    pub frames: Vec<Tensor>,
}

/// Decode a whole stream. The checksum, header and model must agree.
pub fn decode_video(model: &Model, bytes: &[u8]) -> Result<DecodedVideo> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(Error::CorruptStream("stream shorter than header and trailer".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptStream("checksum mismatch".into()));
    }
    let header = Header::parse(body)?;
    if header.variant != model.config.variant {
        return Err(Error::Usage(format!(
            "stream is {} but the checkpoint is {}",
            header.variant, model.config.variant
        )));
    }
    if header.config_hash != model.config.hash() || header.structured_prior != model.config.structured_prior {
        return Err(Error::Usage("stream was produced with a different model configuration".into()));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    model.config.check_frame(h, w)?;
    no_grad(|| {
        let mut r = Cursor { buf: body, pos: HEADER_LEN };
        let mut frames = Vec::with_capacity(header.frame_count as usize);
        let mut prev: Option<Var> = None;
        for t in 0..header.frame_count as usize {
            let kind = r.u8()?;
            let expected = if t == 0 { FRAME_I } else { FRAME_P };
            if kind != expected {
                return Err(Error::CorruptStream(format!("frame {t} has kind {kind}, expected {expected}")));
            }
            let mut dec = model.frame_decoder(prev.clone(), h, w)?;
            while let Some((kind, shape, latent_model)) = dec.next()? {
                let len = r.u32()? as usize;
                if len < 4 {
                    return Err(Error::CorruptStream(format!("frame {t} {} chunk too short", kind.name())));
                }
                let chunk = r.take(len)?;
                let lo = i16::from_le_bytes([chunk[0], chunk[1]]) as i32;
                let hi = i16::from_le_bytes([chunk[2], chunk[3]]) as i32;
                if lo >= hi {
                    return Err(Error::CorruptStream(format!("frame {t} {} has empty support", kind.name())));
                }
                let tables = latent_model.tables(&model.params, &shape, lo, hi)?;
                let refs: Vec<&FreqTable> = tables.iter().collect();
                let symbols = rc_decode(&chunk[4..], &refs)
                    .map_err(|e| Error::CorruptStream(format!("frame {t} {}: {e}", kind.name())))?;
                let hat = Tensor::new(&shape, symbols.into_iter().map(f64::from).collect())?;
                dec.push(hat)?;
            }
            let recon = dec.finish()?;
            frames.push(unbatch(&recon)?);
            prev = Some(recon);
        }
        if r.pos != body.len() {
            return Err(Error::CorruptStream(format!("{} unexpected bytes after the last frame", body.len() - r.pos)));
        }
        Ok(DecodedVideo { header, frames })
    })
}

/// Decode `encoded.bytes` and require every reconstruction to match the
/// encoder's bit for bit.
pub fn verify_sync(model: &Model, encoded: &EncodedVideo) -> Result<DecodedVideo> {
    let decoded = decode_video(model, &encoded.bytes)?;
    for (t, (a, b)) in encoded.recons.iter().zip(&decoded.frames).enumerate() {
        if let Some(i) = a.data().iter().zip(b.data()).position(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Error::Sync(format!(
                "frame {t} element {i}: encoder {} vs decoder {}",
                a.data()[i],
                b.data()[i]
            )));
        }
    }
    if encoded.recons.len() != decoded.frames.len() {
        return Err(Error::Sync("frame counts differ".into()));
    }
    Ok(decoded)
}
