//! Binary netpbm: P6 (RGB pixmap) and P5 (grayscale graymap), maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB) interleaved channels.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image8> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| format_err(path, "empty file"))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(format_err(
                path,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| format_err(path, format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "truncated header"));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos < need {
        return Err(format_err(
            path,
            format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    Ok(Image8 {
        width,
        height,
        channels,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn encode(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Image8) -> Result<()> {
    assert_eq!(img.pixels.len(), img.width * img.height * img.channels);
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}
