use proptest::prelude::*;

use lcg_core::codec::{composite, decode_output, space_to_depth};
use lcg_core::data::shard::{decode_shard, encode_shard};
use lcg_core::data::{ImageMaskSample, Shard};
use lcg_core::diffusion::sampler::cfg_combine;
use lcg_core::image::{decode_pnm, encode_pnm, Image, Mask};
use lcg_core::lcg::{compose_background_mask, Category, MaskComposeConfig, MaskKind};
use lcg_core::seeds;
use lcg_core::tensor::Tensor;

fn image_strategy() -> impl Strategy<Value = (Image, usize)> {
    (prop::sample::select(vec![1usize, 2, 4]), 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(f, gh, gw, c)| {
            let (h, w) = (f * gh, f * gw);
            prop::collection::vec(0.0f64..=1.0, h * w * c)
                .prop_map(move |data| (Image::new(h, w, c, data).unwrap(), f))
        })
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Mask { height: h, width: w, bits })
}

proptest! {
    #[test]
    fn space_to_depth_roundtrips((image, f) in image_strategy()) {
        let latent = space_to_depth(&image, f).unwrap();
        prop_assert_eq!(latent.height * f, image.height);
        prop_assert_eq!(decode_output(&latent, f, image.channels).unwrap(), image);
    }

    #[test]
    fn composite_keeps_unmasked_pixels(
        (a, b, mask) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (
            prop::collection::vec(0.0f64..=1.0, h * w * 3),
            prop::collection::vec(0.0f64..=1.0, h * w * 3),
            mask_strategy(h, w),
        ).prop_map(move |(x, y, m)| (Image::new(h, w, 3, x).unwrap(), Image::new(h, w, 3, y).unwrap(), m)))
    ) {
        let out = composite(&a, &b, &mask).unwrap();
        for y in 0..a.height {
            for x in 0..a.width {
                let expect = if mask.get(y, x) { b.pixel(y, x) } else { a.pixel(y, x) };
                prop_assert_eq!(out.pixel(y, x), expect);
            }
        }
    }

    #[test]
    fn background_mask_bounds(
        (scene, brush, obj) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w), mask_strategy(h, w))),
        p_rand in 0.0f64..=1.0,
        p_obj in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = MaskComposeConfig { p_rand, p_obj };
        let out = compose_background_mask(&scene, &brush, &obj, &cfg, &mut seeds::rng(seed)).unwrap();
        let all = scene.union(&brush).unwrap().union(&obj).unwrap();
        for i in 0..scene.bits.len() {
            prop_assert!(!scene.bits[i] || out.mask.bits[i]);
            prop_assert!(!out.mask.bits[i] || all.bits[i]);
        }
    }

    #[test]
    fn guidance_is_affine_in_scale(
        values in prop::collection::vec(-3.0f64..3.0, 8),
        s in 1.0f64..8.0,
    ) {
        let c = Tensor::new([2, 2], values[..4].to_vec()).unwrap();
        let r = Tensor::new([2, 2], values[4..].to_vec()).unwrap();
        prop_assert_eq!(cfg_combine(&c, &r, 1.0).unwrap(), c.clone());
        let g = cfg_combine(&c, &r, s).unwrap();
        for i in 0..4 {
            let expect = r.data()[i] + s * (c.data()[i] - r.data()[i]);
            prop_assert!((g.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn shard_roundtrips(
        samples in prop::collection::vec((1usize..5, 1usize..5, any::<u64>(), 0u8..3), 0..4),
        config in "[a-z =\n]{0,40}",
    ) {
        let samples: Vec<ImageMaskSample> = samples
            .into_iter()
            .map(|(h, w, seed, kind)| {
                let mut rng = seeds::rng(seed);
                let data = (0..h * w * 3).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
                let mut mask = Mask::zeros(h, w);
                mask.set(0, 0, true);
                let mask_kind = [MaskKind::ObjectSemantic, MaskKind::SceneSemantic, MaskKind::RandomBrush][kind as usize];
                ImageMaskSample {
                    image: Image::new(h, w, 3, data).unwrap(),
                    mask,
                    category: if kind == 0 { Category::Foreground } else { Category::Background },
                    mask_kind,
                    seed,
                }
            })
            .collect();
        let shard = Shard { config, samples };
        prop_assert_eq!(decode_shard(&encode_shard(&shard)).unwrap(), shard);
    }

    #[test]
    fn pnm_roundtrip_is_quantized(
        (image, _) in image_strategy()
    ) {
        let decoded = decode_pnm(&encode_pnm(&image).unwrap()).unwrap();
        let again = decode_pnm(&encode_pnm(&decoded).unwrap()).unwrap();
        prop_assert_eq!(&decoded, &again);
        for (a, b) in image.data.iter().zip(&decoded.data) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
