//! Minimal image containers: PFM for float maps, binary PPM/PGM for 8-bit
//! visualization and RGB input.
//!
//! PFM: magic "Pf" (grayscale) or "PF" (rgb), ascii width and height, a
//! scale float whose sign encodes endianness (negative = little endian),
//! one whitespace byte, then f32 rows stored bottom-up. We always write
//! scale -1.0; the reader accepts both endiannesses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Result};
use crate::tensor::Tensor;

struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    fn err(&self, detail: impl Into<String>) -> DataError {
        DataError::Parse {
            offset: self.offset,
            detail: detail.into(),
        }
    }

    fn byte(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| self.err("unexpected end of file"))?;
        self.offset += 1;
        Ok(b[0])
    }

    /// Next whitespace-delimited ascii token.
    fn token(&mut self) -> Result<String> {
        let mut b = self.byte()?;
        while b.is_ascii_whitespace() {
            b = self.byte()?;
        }
        let mut tok = Vec::new();
        while !b.is_ascii_whitespace() {
            tok.push(b);
            b = self.byte()?;
        }
        String::from_utf8(tok).map_err(|_| self.err("non-ascii header token"))
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            self.err(format!("truncated payload, wanted {} more bytes", buf.len()))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

fn parse_dim(tok: &str, r_offset: u64, what: &str) -> Result<usize> {
    let v: usize = tok.parse().map_err(|_| DataError::Parse {
        offset: r_offset,
        detail: format!("bad {what} {tok:?}"),
    })?;
    if v == 0 {
        return Err(DataError::Parse {
            offset: r_offset,
            detail: format!("{what} must be positive"),
        });
    }
    Ok(v)
}

/// Read a PFM file into a C x H x W tensor (C = 1 or 3).
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let magic = r.token()?;
    let channels = match magic.as_str() {
        "Pf" => 1usize,
        "PF" => 3usize,
        other => return Err(r.err(format!("bad magic {other:?}, expected Pf or PF"))),
    };
    let w = parse_dim(&r.token()?, r.offset, "width")?;
    let h = parse_dim(&r.token()?, r.offset, "height")?;
    let scale_tok = r.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| r.err(format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 {
        return Err(r.err("scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    // token() consumed exactly the single whitespace byte after the scale,
    // so the payload starts here: bottom-up rows, interleaved channels.
    let mut row = vec![0u8; w * channels * 4];
    let mut data = vec![0.0f64; channels * h * w];
    for y_up in 0..h {
        let y = h - 1 - y_up; // stored bottom-up
        r.exact(&mut row)?;
        for x in 0..w {
            for c in 0..channels {
                let i = (x * channels + c) * 4;
                let raw = [row[i], row[i + 1], row[i + 2], row[i + 3]];
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                data[(c * h + y) * w + x] = v as f64;
            }
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

/// Write a 1 x H x W or 3 x H x W tensor as PFM (little endian, scale -1).
pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(DataError::InvalidInput(format!(
            "pfm wants a 1xHxW or 3xHxW tensor, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut f = BufWriter::new(File::create(path)?);
    let magic = if c == 1 { "Pf" } else { "PF" };
    write!(f, "{magic}\n{w} {h}\n-1.0\n")?;
    for y_up in 0..h {
        let y = h - 1 - y_up;
        for x in 0..w {
            for ch in 0..c {
                let v = t.data()[(ch * h + y) * w + x] as f32;
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a binary P6 PPM (maxval 255) into a 3 x H x W tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let magic = r.token()?;
    if magic != "P6" {
        return Err(r.err(format!("bad magic {magic:?}, expected P6")));
    }
    let w = parse_dim(&r.token()?, r.offset, "width")?;
    let h = parse_dim(&r.token()?, r.offset, "height")?;
    let maxval = r.token()?;
    if maxval != "255" {
        return Err(r.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    let mut payload = vec![0u8; 3 * h * w];
    r.exact(&mut payload)?;
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a 3 x H x W tensor in [0, 1] as binary P6 PPM.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::InvalidInput(format!(
            "ppm wants a 3xHxW tensor, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut payload = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                payload[(y * w + x) * 3 + c] = quantize(t.data()[(c * h + y) * w + x]);
            }
        }
    }
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

/// Write a 1 x H x W tensor in [0, 1] as binary P5 PGM (linear grayscale).
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(DataError::InvalidInput(format!(
            "pgm wants a 1xHxW tensor, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let payload: Vec<u8> = t.data().iter().map(|v| quantize(*v)).collect();
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

/// Read a binary P5 PGM into a 1 x H x W tensor in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let magic = r.token()?;
    if magic != "P5" {
        return Err(r.err(format!("bad magic {magic:?}, expected P5")));
    }
    let w = parse_dim(&r.token()?, r.offset, "width")?;
    let h = parse_dim(&r.token()?, r.offset, "height")?;
    let maxval = r.token()?;
    if maxval != "255" {
        return Err(r.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    let mut payload = vec![0u8; h * w];
    r.exact(&mut payload)?;
    let data = payload.iter().map(|b| *b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}
