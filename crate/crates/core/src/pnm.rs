//! Binary PNM image I/O: P5 (grayscale) and P6 (RGB), maxval 255 only.
//! Headers may contain `#` comments. Dimensions are capped at 2^16.

use std::io::{BufRead, Write};
use std::path::Path;

/// 8-bit raster image, row-major with interleaved channels:
/// `data[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale (P5), 3 for RGB (P6).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, PnmError> {
        if width == 0 || height == 0 {
            return Err(PnmError::Header("image dimensions must be positive".into()));
        }
        if !(channels == 1 || channels == 3) {
            return Err(PnmError::Header(format!(
                "unsupported channel count {channels} (1 or 3)"
            )));
        }
        Ok(Image { width, height, channels, data: vec![0; width * height * channels] })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

pub const MAX_DIM: usize = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary PNM: expected magic 'P5' or 'P6', found '{found}'")]
    BadMagic { found: String },
    #[error("unsupported maxval {found}: only 8-bit images (maxval 255) are handled")]
    UnsupportedMaxval { found: usize },
    #[error("malformed PNM header: {0}")]
    Header(String),
    #[error("truncated raster: expected {expected} bytes, found {found}")]
    TruncatedRaster { expected: usize, found: usize },
    #[error("{0} trailing byte(s) after the raster")]
    TrailingBytes(usize),
}

/// Reads header tokens, skipping whitespace and `#`-to-end-of-line comments.
fn next_token<R: BufRead>(r: &mut R, what: &str) -> Result<String, PnmError> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read(&mut byte)? {
            0 => {
                if tok.is_empty() {
                    return Err(PnmError::Header(format!("file ends before {what}")));
                }
                return Ok(tok);
            }
            _ => {}
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' if tok.is_empty() => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(b as char),
        }
    }
}

fn parse_dim(tok: &str, what: &str) -> Result<usize, PnmError> {
    let v: usize = tok
        .parse()
        .map_err(|_| PnmError::Header(format!("{what} '{tok}' is not a number")))?;
    if v == 0 {
        return Err(PnmError::Header(format!("{what} must be positive")));
    }
    if v > MAX_DIM {
        return Err(PnmError::Header(format!("{what} {v} exceeds the maximum {MAX_DIM}")));
    }
    Ok(v)
}

pub fn read_pnm<R: BufRead>(r: &mut R) -> Result<Image, PnmError> {
    let magic = next_token(r, "the magic number")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(PnmError::BadMagic { found: magic }),
    };
    let width = parse_dim(&next_token(r, "the width")?, "width")?;
    let height = parse_dim(&next_token(r, "the height")?, "height")?;
    let maxval_tok = next_token(r, "the maxval")?;
    let maxval: usize = maxval_tok
        .parse()
        .map_err(|_| PnmError::Header(format!("maxval '{maxval_tok}' is not a number")))?;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval { found: maxval });
    }
    // next_token consumed exactly one whitespace byte after the maxval,
    // which is the single separator the format requires; the raster
    // follows immediately.
    let expected = width * height * channels;
    let mut data = vec![0u8; expected];
    let mut found = 0usize;
    while found < expected {
        let n = r.read(&mut data[found..])?;
        if n == 0 {
            return Err(PnmError::TruncatedRaster { expected, found });
        }
        found += n;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(PnmError::TrailingBytes(rest.len()));
    }
    Ok(Image { width, height, channels, data })
}

pub fn write_pnm<W: Write>(w: &mut W, img: &Image) -> Result<(), PnmError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(PnmError::Header(format!("cannot write {c}-channel image as PNM"))),
    };
    if img.width == 0 || img.height == 0 || img.width > MAX_DIM || img.height > MAX_DIM {
        return Err(PnmError::Header(format!(
            "refusing to write image with dimensions {}x{}",
            img.width, img.height
        )));
    }
    if img.data.len() != img.width * img.height * img.channels {
        return Err(PnmError::Header(format!(
            "raster length {} disagrees with {}x{}x{}",
            img.data.len(),
            img.width,
            img.height,
            img.channels
        )));
    }
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn read_pnm_file(path: &Path) -> Result<Image, PnmError> {
    let file = std::fs::File::open(path)?;
    read_pnm(&mut std::io::BufReader::new(file))
}

pub fn write_pnm_file(path: &Path, img: &Image) -> Result<(), PnmError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_pnm(&mut buf, img)?;
    buf.flush()?;
    Ok(())
}
