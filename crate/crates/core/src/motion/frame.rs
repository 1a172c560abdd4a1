use std::path::Path;

use crate::error::{Error, Result};

/// Macroblock edge in pixels; frame extents must be multiples of it.
pub const MACROBLOCK: usize = 16;

/// One 8-bit observation image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Frame(format!("unsupported channel count {channels}")));
        }
        if width == 0 || height == 0 || !width.is_multiple_of(MACROBLOCK) || !height.is_multiple_of(MACROBLOCK) {
            return Err(Error::Frame(format!(
                "{width}x{height} is not a positive multiple of the {MACROBLOCK}-pixel macroblock"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Frame(format!(
                "buffer of {} bytes for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Macroblock grid extents `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / MACROBLOCK, self.width / MACROBLOCK)
    }

    pub fn same_geometry(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Luma plane: the pixels themselves for grayscale, `(2R + 5G + B) / 8`
    /// for RGB.
    pub fn luma(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(3)
            .map(|p| ((2 * p[0] as u32 + 5 * p[1] as u32 + p[2] as u32) / 8) as u8)
            .collect()
    }

    /// Parses binary PGM (`P5`) or PPM (`P6`) with maxval below 256.
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Frame(format!("unsupported PNM magic `{other}`"))),
        };
        let width = parse_number(bytes, &mut pos, "width")?;
        let height = parse_number(bytes, &mut pos, "height")?;
        let maxval = parse_number(bytes, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Frame(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Frame("malformed PNM header".into()));
        }
        pos += 1;
        let need = width * height * channels;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Frame(format!("raster truncated: need {need} bytes")))?;
        Self::new(width, height, channels, raster.to_vec())
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_pnm(&bytes).map_err(|e| Error::Frame(format!("{}: {e}", path.display())))
    }

    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pnm())?;
        Ok(())
    }

    /// Raw planar 8-bit input: each channel plane stored contiguously.
    pub fn from_raw_planar(bytes: &[u8], width: usize, height: usize, channels: usize) -> Result<Self> {
        let plane = width * height;
        if bytes.len() != plane * channels {
            return Err(Error::Frame(format!(
                "raw buffer of {} bytes for {width}x{height}x{channels}",
                bytes.len()
            )));
        }
        let mut pixels = vec![0u8; plane * channels];
        for c in 0..channels {
            for i in 0..plane {
                pixels[i * channels + c] = bytes[c * plane + i];
            }
        }
        Self::new(width, height, channels, pixels)
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Frame("unexpected end of PNM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Frame(format!("bad PNM {what} `{tok}`")))
}
