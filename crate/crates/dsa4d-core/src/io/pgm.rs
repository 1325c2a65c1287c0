//! 16-bit binary portable graymap (P5, maxval 65535) image files.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const MAXVAL: u64 = 65535;

/// Write an image as a 16-bit binary graymap. Values are clamped to
/// `[0, 1]` and quantized to `round(v * 65535)`, most significant byte
/// first per the graymap specification.
pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(32 + image.data.len() * 2);
    write!(bytes, "P5\n{} {}\n{}\n", image.cols, image.rows, MAXVAL).expect("vec write");
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    /// Advance past whitespace and `#` comment lines.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<u64> {
        let tok = self.token()?;
        std::str::from_utf8(tok).ok()?.parse().ok()
    }
}

/// Read a 16-bit binary graymap into an image in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: &str| Error::PgmMalformedHeader {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    let mut tokens = Tokens { bytes: &bytes, pos: 0 };
    match tokens.token() {
        Some(b"P5") => {}
        _ => return Err(malformed("expected magic number P5")),
    }
    let cols = tokens.number().ok_or_else(|| malformed("missing or invalid width"))? as usize;
    let rows = tokens.number().ok_or_else(|| malformed("missing or invalid height"))? as usize;
    if rows == 0 || cols == 0 {
        return Err(malformed("zero-sized image"));
    }
    let maxval = tokens.number().ok_or_else(|| malformed("missing or invalid maxval"))?;
    if maxval != MAXVAL {
        return Err(Error::PgmWrongMaxval {
            path: path.to_path_buf(),
            found: maxval,
        });
    }
    // Exactly one whitespace byte separates the header from the samples.
    if tokens.pos >= bytes.len() || !bytes[tokens.pos].is_ascii_whitespace() {
        return Err(malformed("missing separator before sample data"));
    }
    let data_start = tokens.pos + 1;

    let expected = rows * cols * 2;
    let found = bytes.len() - data_start;
    if found < expected {
        return Err(Error::PgmTruncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let data = bytes[data_start..data_start + expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / MAXVAL as f64)
        .collect();
    Ok(Image { rows, cols, data })
}
