//! Images, binary masks, and binary PPM/PGM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major H×W×C image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!("empty image {height}×{width}×{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// `image ⊙ (1 − mask)`: pixels to be filled are zeroed.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        mask.check_dims(self.height, self.width, "masked")?;
        let mut out = self.clone();
        for (i, &m) in mask.bits.iter().enumerate() {
            if m {
                for v in &mut out.data[i * self.channels..(i + 1) * self.channels] {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize8(*v) as f64 / 255.0;
        }
    }
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary H×W mask; `true` marks a pixel to be filled.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Accepts only exact 0.0 / 1.0 values.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        let mut bits = Vec::with_capacity(values.len());
        for (index, &value) in values.iter().enumerate() {
            match value {
                v if v == 0.0 => bits.push(false),
                v if v == 1.0 => bits.push(true),
                _ => return Err(Error::NonBinaryMask { index, value }),
            }
        }
        Ok(Mask { height, width, bits })
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub(crate) fn check_dims(&self, height: usize, width: usize, op: &'static str) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::shape(op, &[self.height, self.width], &[height, width]));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        other.check_dims(self.height, self.width, "mask union")?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            offset: start as u64,
            msg: "truncated header".into(),
        });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let at = *pos as u64;
    let tok = header_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Format {
        offset: at,
        msg: format!("expected a number, found {tok:?}"),
    })
}

/// Decodes 8-bit binary PPM (P6, 3 channels) or PGM (P5, 1 channel).
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported magic {other:?}"),
            })
        }
    };
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("pixel data truncated: need {n} bytes after offset {pos}"),
        });
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, data)
}

pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("PNM output needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize8(v)));
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pnm(image)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a PGM mask: 0 is kept, 255 is filled; anything else is rejected.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(Error::invalid("mask must be a single-channel PGM"));
    }
    Mask::from_values(img.height, img.width, &img.data)
}

pub fn mask_image(mask: &Mask) -> Image {
    Image {
        height: mask.height,
        width: mask.width,
        channels: 1,
        data: mask.to_values(),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pnm(path, &mask_image(mask))
}
