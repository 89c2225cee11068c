//! Exactly invertible space-to-depth latent codec.
//!
//! Each f×f pixel block becomes one latent cell with `c·f²` channels; channel
//! `(dy·f + dx)·c + ch` of cell (Y, X) holds channel `ch` of pixel
//! `(Y·f + dy, X·f + dx)`. The transform only moves values, so the
//! roundtrip is bit-exact.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::tensor::Tensor;

pub const DEFAULT_FACTOR: usize = 4;

/// H/f × W/f × C latent grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    /// One token per cell: (H·W) × C.
    pub fn to_tokens(&self) -> Tensor {
        Tensor::new([self.height * self.width, self.channels], self.data.clone())
            .expect("latent dims are consistent")
    }

    pub fn from_tokens(height: usize, width: usize, tokens: &Tensor) -> Result<Self> {
        let (n, c) = tokens.dims2("from_tokens")?;
        if n != height * width {
            return Err(Error::shape("from_tokens", tokens.shape(), &[height * width, c]));
        }
        Ok(LatentTensor {
            height,
            width,
            channels: c,
            data: tokens.data().to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        LatentTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Concatenates channel groups cell by cell.
    pub fn concat(parts: &[&LatentTensor]) -> Result<LatentTensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no latents"))?;
        let (h, w) = (first.height, first.width);
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape("latent concat", &[h, w], &[p.height, p.width]));
            }
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for cell in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[cell * p.channels..(cell + 1) * p.channels]);
            }
        }
        Ok(LatentTensor {
            height: h,
            width: w,
            channels,
            data,
        })
    }
}

fn check_factor(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::invalid(format!(
            "image {height}×{width} is not divisible by latent factor {factor}"
        )));
    }
    Ok(())
}

pub fn space_to_depth(image: &Image, factor: usize) -> Result<LatentTensor> {
    check_factor(image.height, image.width, factor)?;
    let c = image.channels;
    let (lh, lw) = (image.height / factor, image.width / factor);
    let lc = c * factor * factor;
    let mut data = vec![0.0; lh * lw * lc];
    for y in 0..image.height {
        for x in 0..image.width {
            let cell = (y / factor) * lw + x / factor;
            let sub = (y % factor) * factor + x % factor;
            let dst = cell * lc + sub * c;
            data[dst..dst + c].copy_from_slice(image.pixel(y, x));
        }
    }
    Ok(LatentTensor {
        height: lh,
        width: lw,
        channels: lc,
        data,
    })
}

/// Inverse of [`space_to_depth`] for an image group with `channels` channels.
pub fn decode_output(latent: &LatentTensor, factor: usize, channels: usize) -> Result<Image> {
    if factor == 0 || latent.channels != channels * factor * factor {
        return Err(Error::invalid(format!(
            "latent has {} channels, expected {channels}·{factor}² = {}",
            latent.channels,
            channels * factor * factor
        )));
    }
    let (h, w) = (latent.height * factor, latent.width * factor);
    let mut image = Image::filled(h, w, channels, 0.0);
    for y in 0..h {
        for x in 0..w {
            let cell = (y / factor) * latent.width + x / factor;
            let sub = (y % factor) * factor + x % factor;
            let src = cell * latent.channels + sub * channels;
            image.pixel_mut(y, x).copy_from_slice(&latent.data[src..src + channels]);
        }
    }
    Ok(image)
}

/// A latent cell is marked when any pixel it covers is.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<LatentTensor> {
    check_factor(mask.height, mask.width, factor)?;
    let (lh, lw) = (mask.height / factor, mask.width / factor);
    let mut data = vec![0.0; lh * lw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                data[(y / factor) * lw + x / factor] = 1.0;
            }
        }
    }
    Ok(LatentTensor {
        height: lh,
        width: lw,
        channels: 1,
        data,
    })
}

/// The three latent groups fed to the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInputs {
    pub image: LatentTensor,
    pub mask: LatentTensor,
    pub masked_image: LatentTensor,
}

impl EncodedInputs {
    /// `image ‖ mask ‖ masked_image` along channels.
    pub fn concatenated(&self) -> LatentTensor {
        LatentTensor::concat(&[&self.image, &self.mask, &self.masked_image]).expect("groups share a grid")
    }
}

/// Encodes an inpainting triple. `masked_image` must equal
/// `image ⊙ (1 − mask)` exactly.
pub fn encode_inputs(image: &Image, mask: &Mask, masked_image: &Image, factor: usize) -> Result<EncodedInputs> {
    if !image.same_dims(masked_image) {
        return Err(Error::shape(
            "encode_inputs",
            &[image.height, image.width, image.channels],
            &[masked_image.height, masked_image.width, masked_image.channels],
        ));
    }
    mask.check_dims(image.height, image.width, "encode_inputs")?;
    if image.masked(mask)? != *masked_image {
        return Err(Error::invalid("masked image is not image ⊙ (1 − mask)"));
    }
    Ok(EncodedInputs {
        image: space_to_depth(image, factor)?,
        mask: downsample_mask(mask, factor)?,
        masked_image: space_to_depth(masked_image, factor)?,
    })
}

/// `mask ⊙ generated + (1 − mask) ⊙ original`, selecting pixels so kept
/// values are copied bit for bit.
pub fn composite(original: &Image, generated: &Image, mask: &Mask) -> Result<Image> {
    if !original.same_dims(generated) {
        return Err(Error::shape(
            "composite",
            &[original.height, original.width, original.channels],
            &[generated.height, generated.width, generated.channels],
        ));
    }
    mask.check_dims(original.height, original.width, "composite")?;
    let mut out = original.clone();
    let c = original.channels;
    for (i, &m) in mask.bits.iter().enumerate() {
        if m {
            out.data[i * c..(i + 1) * c].copy_from_slice(&generated.data[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|i| i as f64 / (h * w * c) as f64).collect()).unwrap()
    }

    #[test]
    fn factor_one_is_plain_concatenation() {
        let img = ramp(2, 3, 3);
        let mut mask = Mask::zeros(2, 3);
        mask.set(1, 2, true);
        let masked = img.masked(&mask).unwrap();
        let enc = encode_inputs(&img, &mask, &masked, 1).unwrap();
        let cat = enc.concatenated();
        assert_eq!(cat.channels, 7);
        for p in 0..6 {
            let cell = &cat.data[p * 7..(p + 1) * 7];
            assert_eq!(&cell[..3], &img.data[p * 3..p * 3 + 3]);
            assert_eq!(cell[3], if p == 5 { 1.0 } else { 0.0 });
            assert_eq!(&cell[4..], &masked.data[p * 3..p * 3 + 3]);
        }
    }

    #[test]
    fn empty_mask_gives_identical_groups() {
        let img = ramp(8, 8, 3);
        let mask = Mask::zeros(8, 8);
        let enc = encode_inputs(&img, &mask, &img.clone(), 4).unwrap();
        assert_eq!(enc.image, enc.masked_image);
        assert!(enc.mask.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_and_constant_roundtrip() {
        for img in [ramp(8, 12, 3), Image::filled(4, 4, 3, 0.25)] {
            let lat = space_to_depth(&img, 4).unwrap();
            assert_eq!(decode_output(&lat, 4, 3).unwrap(), img);
        }
    }

    #[test]
    fn mask_max_pooling() {
        let mut mask = Mask::zeros(4, 4);
        mask.set(3, 0, true);
        let lat = downsample_mask(&mask, 2).unwrap();
        assert_eq!(lat.data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let img = ramp(6, 8, 3);
        let mask = Mask::zeros(6, 8);
        assert!(encode_inputs(&img, &mask, &img, 4).is_err());
        let img = ramp(8, 8, 3);
        let mut mask = Mask::zeros(8, 8);
        mask.set(0, 0, true);
        assert!(encode_inputs(&img, &mask, &img, 4).is_err());
        let lat = space_to_depth(&img, 4).unwrap();
        assert!(decode_output(&lat, 4, 1).is_err());
    }

    #[test]
    fn composite_extremes() {
        let a = ramp(4, 4, 3);
        let b = Image::filled(4, 4, 3, 0.9);
        assert_eq!(composite(&a, &b, &Mask::zeros(4, 4)).unwrap(), a);
        assert_eq!(composite(&a, &b, &Mask::ones(4, 4)).unwrap(), b);
    }
}
