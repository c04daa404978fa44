//! Full-resolution prediction on a single image pair.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rtcan_tensor::Scalar;

use crate::data::{collate, preprocess, ImagePair, PreprocessConfig, Scene};
use crate::error::{Error, Result};
use crate::model::{predict_mask, Model, SIZE_MULTIPLE};

pub const OVERLAY_COLOR: [u8; 3] = [0, 255, 0];
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Smallest multiple of `m` that is at least `len`.
pub fn padded_len(len: usize, m: usize) -> usize {
    len.div_ceil(m) * m
}

/// Mirror index into `[0, len)` without repeating the edge sample.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Extend bottom and right edges by reflection.
pub fn reflect_pad<P: image::Pixel>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, height: usize, width: usize) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    image::ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        *img.get_pixel(reflect(x as usize, w) as u32, reflect(y as usize, h) as u32)
    })
}

/// Gas mask ({0, 1}) at the input resolution. Inputs are reflect-padded to
/// a multiple of 32, run through the model in evaluation mode, and cropped.
pub fn predict_images<T: Scalar>(
    model: &Model<T>,
    pre: &PreprocessConfig,
    rgb: &RgbImage,
    thermal: &GrayImage,
) -> Result<GrayImage> {
    if rgb.dimensions() != thermal.dimensions() {
        return Err(Error::Alignment {
            id: "input".into(),
            detail: format!("rgb {:?} vs thermal {:?}", rgb.dimensions(), thermal.dimensions()),
        });
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Validation("empty input image".into()));
    }
    let (ph, pw) = (padded_len(h, SIZE_MULTIPLE), padded_len(w, SIZE_MULTIPLE));
    let pair = ImagePair {
        id: "input".into(),
        scene: Scene::Synthetic,
        rgb: reflect_pad(rgb, ph, pw),
        thermal: reflect_pad(thermal, ph, pw),
        mask: GrayImage::new(pw as u32, ph as u32),
    };
    let cfg = PreprocessConfig {
        target_size: [ph, pw],
        hflip_prob: 0.0,
        ..pre.clone()
    };
    let batch = collate(vec![preprocess::<T>(&pair, &cfg, false, 0)?])?;
    let pred = model.infer(&batch.rgb, &batch.thermal)?;
    let mask = predict_mask(pred.logits_final.value())?.remove(0);
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[y as usize * pw + x as usize]])))
}

/// Gas pixels blended toward [`OVERLAY_COLOR`]; all others unchanged.
pub fn overlay(rgb: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    if rgb.dimensions() != mask.dimensions() {
        return Err(Error::Shape(format!(
            "overlay: rgb {:?} vs mask {:?}",
            rgb.dimensions(),
            mask.dimensions()
        )));
    }
    let mut out = rgb.clone();
    for (px, m) in out.pixels_mut().zip(mask.pixels()) {
        if m.0[0] > 0 {
            *px = Rgb(std::array::from_fn(|c| {
                ((1.0 - OVERLAY_ALPHA) * px.0[c] as f64 + OVERLAY_ALPHA * OVERLAY_COLOR[c] as f64).round() as u8
            }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_arithmetic() {
        assert_eq!(padded_len(645, 32), 672);
        assert_eq!(padded_len(512, 32), 512);
        assert_eq!(padded_len(1, 32), 32);
    }

    #[test]
    fn reflection_mirrors_without_repeating_edges() {
        let img = GrayImage::from_fn(3, 1, |x, _| Luma([x as u8 * 10]));
        let p = reflect_pad(&img, 1, 7);
        let row: Vec<u8> = p.pixels().map(|p| p.0[0]).collect();
        assert_eq!(row, vec![0, 10, 20, 10, 0, 10, 20]);
    }

    #[test]
    fn overlay_blends_only_masked_pixels() {
        let rgb = RgbImage::from_pixel(2, 1, Rgb([100, 100, 100]));
        let mask = GrayImage::from_raw(2, 1, vec![0, 1]).unwrap();
        let o = overlay(&rgb, &mask).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(o.get_pixel(1, 0).0, [50, 178, 50]);
        let empty = overlay(&rgb, &GrayImage::new(2, 1)).unwrap();
        assert_eq!(empty, rgb);
    }

    #[test]
    fn predicts_at_input_size() {
        let model = Model::<f32>::new(&crate::model::ModelConfig {
            base_width: 4,
            decoder_channels: 8,
            ..Default::default()
        })
        .unwrap();
        let rgb = RgbImage::from_fn(45, 33, |x, y| Rgb([x as u8, y as u8, 7]));
        let th = GrayImage::from_fn(45, 33, |x, y| Luma([(x + y) as u8]));
        let m = predict_images(&model, &PreprocessConfig::default(), &rgb, &th).unwrap();
        assert_eq!(m.dimensions(), (45, 33));
        assert!(m.pixels().all(|p| p.0[0] <= 1));
    }
}
