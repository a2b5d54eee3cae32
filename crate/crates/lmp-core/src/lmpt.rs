//! Binary tensor container, plus the attention-map flavor used for dumps.
//!
//! Layout of a plain tensor file: magic `LMPT`, then `u8` version (1),
//! `u8` dtype (1 = little-endian f32), `u8` rank, one padding byte so the
//! header is 8 bytes, `rank` u64 little-endian dims, then the payload.
//! Readers reject unknown magic, version, or dtype, and any length
//! mismatch between dims and payload.
//!
//! Attention dumps carry extra geometry a plain tensor cannot express:
//! the prompt length, the video token grid, and the number of appended
//! reference columns. They use magic `LMPA` with the same 8-byte header
//! and `[rows, cols]` dims, followed by five u64 fields `m, f, h, w, r`,
//! then the payload. Plain-tensor readers reject them by magic, and vice
//! versa.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::math::Mat;

pub const MAGIC_TENSOR: [u8; 4] = *b"LMPT";
pub const MAGIC_ATTENTION: [u8; 4] = *b"LMPA";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

fn push_header(out: &mut Vec<u8>, magic: [u8; 4], rank: u8) {
    out.extend_from_slice(&magic);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(rank);
    out.push(0);
}

fn push_payload(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_tensor(dims: &[u64], data: &[f64]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", dims.len())));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dim product overflows".into()))?;
    if count as usize != data.len() {
        return Err(Error::Shape(format!(
            "dims {:?} describe {count} values, got {}",
            dims,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + dims.len() * 8 + data.len() * 4);
    push_header(&mut out, MAGIC_TENSOR, dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    push_payload(&mut out, data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("file truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_header(r: &mut Reader, magic: [u8; 4]) -> Result<u8> {
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            got,
            std::str::from_utf8(&magic).unwrap()
        )));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let rank = r.take(1)?[0];
    r.take(1)?;
    Ok(rank)
}

fn decode_payload(r: &mut Reader, count: u64) -> Result<Vec<f64>> {
    let count = usize::try_from(count).map_err(|_| Error::Format("tensor too large".into()))?;
    let raw = r.take(count * 4)?;
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            r.bytes.len() - r.pos
        )));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    let rank = decode_header(&mut r, MAGIC_TENSOR)?;
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r.u64()?);
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dim product overflows".into()))?;
    let data = decode_payload(&mut r, count)?;
    Ok((dims, data))
}

/// Geometry carried by an attention dump: prompt length, video token grid,
/// and appended reference column count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDumpMeta {
    pub m: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub r: usize,
}

impl AttnDumpMeta {
    pub fn video_tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.m + self.video_tokens()
    }

    pub fn cols(&self) -> usize {
        self.rows() + self.r
    }
}

pub fn encode_attention(map: &Mat, meta: &AttnDumpMeta) -> Result<Vec<u8>> {
    if map.rows() != meta.rows() || map.cols() != meta.cols() {
        return Err(Error::Shape(format!(
            "map {}x{} does not fit m={} grid {}x{}x{} r={}",
            map.rows(),
            map.cols(),
            meta.m,
            meta.frames,
            meta.height,
            meta.width,
            meta.r
        )));
    }
    let mut out = Vec::with_capacity(8 + 7 * 8 + map.rows() * map.cols() * 4);
    push_header(&mut out, MAGIC_ATTENTION, 2);
    for d in [
        map.rows() as u64,
        map.cols() as u64,
        meta.m as u64,
        meta.frames as u64,
        meta.height as u64,
        meta.width as u64,
        meta.r as u64,
    ] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    push_payload(&mut out, map.as_slice());
    Ok(out)
}

pub fn decode_attention(bytes: &[u8]) -> Result<(AttnDumpMeta, Mat)> {
    let mut r = Reader { bytes, pos: 0 };
    let rank = decode_header(&mut r, MAGIC_ATTENTION)?;
    if rank != 2 {
        return Err(Error::Format(format!("attention dump has rank {rank}")));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let meta = AttnDumpMeta {
        m: r.u64()? as usize,
        frames: r.u64()? as usize,
        height: r.u64()? as usize,
        width: r.u64()? as usize,
        r: r.u64()? as usize,
    };
    if rows != meta.rows() || cols != meta.cols() {
        return Err(Error::Format(format!(
            "dims {rows}x{cols} disagree with m={} grid {}x{}x{} r={}",
            meta.m, meta.frames, meta.height, meta.width, meta.r
        )));
    }
    let count = (rows as u64)
        .checked_mul(cols as u64)
        .ok_or_else(|| Error::Format("dim product overflows".into()))?;
    let data = decode_payload(&mut r, count)?;
    Ok((meta, Mat::from_vec(rows, cols, data)?))
}

/// Write via a temp file in the same directory plus rename, so a crash
/// never leaves a half-written artifact under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", stem.to_string_lossy(), std::process::id()));
    let write = fs::write(&tmp, bytes);
    if let Err(e) = write.and_then(|()| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    atomic_write(path, &encode_tensor(dims, data)?)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_latent(v: &LatentVideo) -> Result<Vec<u8>> {
    encode_tensor(
        &[
            v.frames() as u64,
            v.height() as u64,
            v.width() as u64,
            v.channels() as u64,
        ],
        v.data(),
    )
}

pub fn write_latent(path: &Path, v: &LatentVideo) -> Result<()> {
    atomic_write(path, &encode_latent(v)?)
}

pub fn read_latent(path: &Path) -> Result<LatentVideo> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 4 {
        return Err(Error::Format(format!(
            "latent video needs rank 4, got {:?}",
            dims
        )));
    }
    LatentVideo::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
        data,
    )
}

pub fn write_mat(path: &Path, m: &Mat) -> Result<()> {
    write_tensor(path, &[m.rows() as u64, m.cols() as u64], m.as_slice())
}

pub fn read_mat(path: &Path) -> Result<Mat> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!("matrix needs rank 2, got {:?}", dims)));
    }
    Mat::from_vec(dims[0] as usize, dims[1] as usize, data)
}

/// Token indices as a rank-1 tensor. Exact for indices below 2^24.
pub fn encode_indices(indices: &[usize]) -> Result<Vec<u8>> {
    let data: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
    encode_tensor(&[indices.len() as u64], &data)
}

pub fn decode_indices(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, data) = decode_tensor(bytes)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!(
            "index list needs rank 1, got {:?}",
            dims
        )));
    }
    data.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < (1u64 << 24) as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("bad token index {v}")))
            }
        })
        .collect()
}
