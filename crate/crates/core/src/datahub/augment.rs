//! CNN input preparation: center crop, bilinear resize, optional horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Image, LabeledImage, Result};
use crate::seed;

/// Side of the center crop applied before resizing.
pub const CNN_CROP: usize = 32;
/// Side of the CNN input.
pub const CNN_INPUT: usize = 70;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    CnnTrain,
    CnnEval,
}

pub fn center_crop(image: &Image, side: usize) -> Result<Image> {
    if image.height() < side || image.width() < side {
        return Err(DataError::ImageTooSmall {
            height: image.height(),
            width: image.width(),
            crop: side,
        });
    }
    let top = (image.height() - side) / 2;
    let left = (image.width() - side) / 2;
    Ok(Image::from_fn(side, side, |r, c| {
        image.get(top + r, left + c)
    }))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(image: &Image, height: usize, width: usize) -> Image {
    let sy = image.height() as f64 / height as f64;
    let sx = image.width() as f64 / width as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    Image::from_fn(height, width, |r, c| {
        let (y0, y1, fy) = coord(r, sy, image.height());
        let (x0, x1, fx) = coord(c, sx, image.width());
        let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
        let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn augment(image: &LabeledImage, mode: AugmentMode, seed: u64) -> Result<LabeledImage> {
    let cropped = center_crop(&image.image, CNN_CROP)?;
    let mut out = bilinear_resize(&cropped, CNN_INPUT, CNN_INPUT);
    if mode == AugmentMode::CnnTrain && seed::rng(seed).random_bool(0.5) {
        out = out.flip_horizontal();
    }
    Ok(LabeledImage {
        image: out,
        label: image.label.clone(),
        split: image.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::Split;

    fn labeled(image: Image) -> LabeledImage {
        LabeledImage {
            image,
            label: "a".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn eval_output_is_70_square() {
        let img = labeled(Image::from_fn(128, 128, |r, c| {
            ((r * 3 + c) % 7) as f64 / 7.0
        }));
        let out = augment(&img, AugmentMode::CnnEval, 0).unwrap();
        assert_eq!((out.image.height(), out.image.width()), (70, 70));
    }

    #[test]
    fn symmetric_input_is_flip_invariant() {
        let img = labeled(Image::from_fn(128, 128, |r, c| {
            let d = (c as f64 - 63.5).abs();
            ((r as f64 * 0.1).sin() + d * 0.01).abs().min(1.0)
        }));
        let eval = augment(&img, AugmentMode::CnnEval, 0).unwrap();
        for seed in 0..8 {
            let train = augment(&img, AugmentMode::CnnTrain, seed).unwrap();
            for (a, b) in eval.image.pixels().iter().zip(train.image.pixels()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_flips_for_some_seeds() {
        let img = labeled(Image::from_fn(40, 40, |_, c| c as f64 / 39.0));
        let eval = augment(&img, AugmentMode::CnnEval, 0).unwrap();
        let flipped = (0..16)
            .filter(|&s| augment(&img, AugmentMode::CnnTrain, s).unwrap() != eval)
            .count();
        assert!(flipped > 0 && flipped < 16);
    }

    #[test]
    fn too_small_rejected() {
        let img = labeled(Image::zeros(16, 16));
        assert!(matches!(
            augment(&img, AugmentMode::CnnEval, 0),
            Err(DataError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn resize_preserves_constant() {
        let img = Image::from_fn(5, 7, |_, _| 0.25);
        let out = bilinear_resize(&img, 11, 3);
        assert!(out.pixels().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }
}
