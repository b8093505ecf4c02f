use super::{DataError, ImageBuffer, Result};

/// Decodes a binary PGM (`P5`) or PPM (`P6`) image with maxval 255.
pub fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(DataError::BadMagic(magic)),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::MaxVal(maxval as u32));
    }
    // Exactly one whitespace byte separates the header from the samples.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(DataError::Header("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    ImageBuffer::new(height, width, channels, payload[..expected].to_vec())
}

pub fn write_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) && self.pos - start < 16 {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DataError::Header("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        match tok.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(DataError::Header(format!("invalid {what} `{tok}`"))),
        }
    }
}
