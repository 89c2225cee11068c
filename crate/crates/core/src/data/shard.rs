//! Sample shard files.
//!
//! ```text
//! "LCGS"  u16 version  u64 count  u32 config_len  config (UTF-8)
//! per sample:
//!   u32 height  u32 width  u16 channels  u8 category  u8 mask_kind  u64 seed
//!   f64[h·w·c] pixels          little-endian
//!   u8[ceil(h·w/8)] mask bits  LSB first
//! u32 CRC32 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::data::ImageMaskSample;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::lcg::{Category, MaskKind};

pub const SHARD_MAGIC: &[u8; 4] = b"LCGS";
pub const SHARD_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    /// Resolved configuration that produced the samples.
    pub config: String,
    pub samples: Vec<ImageMaskSample>,
}

pub fn encode_shard(shard: &Shard) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(SHARD_MAGIC);
    w.u16(SHARD_VERSION);
    w.u64(shard.samples.len() as u64);
    w.string(&shard.config);
    for s in &shard.samples {
        w.u32(s.image.height as u32);
        w.u32(s.image.width as u32);
        w.u16(s.image.channels as u16);
        w.u8(s.category.code());
        w.u8(s.mask_kind.code());
        w.u64(s.seed);
        for &v in &s.image.data {
            w.f64(v);
        }
        for chunk in s.mask.bits.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &on)| b | ((on as u8) << i));
            w.u8(byte);
        }
    }
    w.finish()
}

pub fn decode_shard(bytes: &[u8]) -> Result<Shard> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != SHARD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a sample shard (bad magic)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != SHARD_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported shard version {version}"),
        });
    }
    let count = r.u64("sample count")?;
    let config = r.string("config")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.offset();
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let channels = r.u16("channels")? as usize;
        let category = Category::from_code(r.u8("category")?)
            .filter(|c| *c != Category::Null)
            .ok_or_else(|| Error::Format {
                offset: at + 10,
                msg: "invalid category".into(),
            })?;
        let mask_kind = MaskKind::from_code(r.u8("mask kind")?).ok_or_else(|| Error::Format {
            offset: at + 11,
            msg: "invalid mask kind".into(),
        })?;
        let seed = r.u64("seed")?;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Format {
                offset: at,
                msg: format!("empty sample dimensions {height}×{width}×{channels}"),
            });
        }
        let n = height * width * channels;
        let raw = r.take(n * 8, "pixels")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let packed = r.take((height * width).div_ceil(8), "mask")?;
        let bits = (0..height * width).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        samples.push(ImageMaskSample {
            image: Image::new(height, width, channels, data)?,
            mask: Mask { height, width, bits },
            category,
            mask_kind,
            seed,
        });
    }
    r.finish()?;
    Ok(Shard { config, samples })
}

pub fn write_shard(path: &Path, shard: &Shard) -> Result<()> {
    fs::write(path, encode_shard(shard))?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    decode_shard(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> ImageMaskSample {
        let mut mask = Mask::zeros(3, 5);
        mask.set(1, 2, true);
        mask.set(2, 4, true);
        ImageMaskSample {
            image: Image::new(3, 5, 3, (0..45).map(|i| i as f64 / 45.0).collect()).unwrap(),
            mask,
            category: Category::Background,
            mask_kind: MaskKind::RandomBrush,
            seed,
        }
    }

    #[test]
    fn empty_and_single_roundtrip() {
        for samples in [vec![], vec![sample(9)]] {
            let shard = Shard {
                config: "[run]\nseed = 1\n".into(),
                samples,
            };
            assert_eq!(decode_shard(&encode_shard(&shard)).unwrap(), shard);
        }
    }

    #[test]
    fn truncation_and_corruption() {
        let shard = Shard {
            config: String::new(),
            samples: vec![sample(1), sample(2)],
        };
        let bytes = encode_shard(&shard);
        let cut = &bytes[..bytes.len() - 40];
        match decode_shard(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_shard(&bad), Err(Error::Format { offset: 0, .. })));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_shard(&flipped), Err(Error::Checksum { .. })));
    }
}
