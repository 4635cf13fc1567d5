//! Minimal binary Netpbm I/O: PGM (P5) for grey images, PBM (P4) for binary
//! masks and PPM (P6) for colour overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &self.to_pgm())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, dims, maxval, body) = parse_header(&bytes, path, true)?;
        if magic != "P5" {
            return Err(bad(path, format!("expected P5, found {magic}")));
        }
        if maxval != 255 {
            return Err(bad(path, "only 8-bit PGM is supported"));
        }
        let n = dims.0 * dims.1;
        let pixels = body.get(..n).ok_or_else(|| bad(path, "pixel data truncated"))?;
        GrayImage::new(dims.0, dims.1, pixels.to_vec())
    }
}

/// Binary image, row-major, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BitImage {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BitImage { width, height, bits })
    }

    /// PBM stores 1 for black; foreground is written as 1.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn write_pbm(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &self.to_pbm())
    }

    pub fn read_pbm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, (w, h), _, body) = parse_header(&bytes, path, false)?;
        if magic != "P4" {
            return Err(bad(path, format!("expected P4, found {magic}")));
        }
        let row_bytes = w.div_ceil(8);
        if body.len() < row_bytes * h {
            return Err(bad(path, "bit data truncated"));
        }
        let bits = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| body[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0)
            .collect();
        BitImage::new(w, h, bits)
    }
}

/// Writes an RGB image as binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::InvalidArgument("PPM pixel count does not match dimensions".into()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    write(path.as_ref(), &out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("{}: {}", path.display(), detail.into()))
}

type Header<'a> = (String, (usize, usize), usize, &'a [u8]);

/// Splits a Netpbm header (magic, width, height and optionally maxval,
/// with `#` comments) from the raster that follows one whitespace byte.
fn parse_header<'a>(bytes: &'a [u8], path: &Path, has_maxval: bool) -> Result<Header<'a>> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    let wanted = if has_maxval { 4 } else { 3 };
    while tokens.len() < wanted {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(path, format!("bad header field `{s}`")));
    let w = num(&tokens[1])?;
    let h = num(&tokens[2])?;
    let maxval = if has_maxval { num(&tokens[3])? } else { 1 };
    Ok((tokens[0].clone(), (w, h), maxval, &bytes[(pos + 1).min(bytes.len())..]))
}
