//! Prediction overlays.
//!
//! Class colours come from the bit-interleaving colour map popularised by the
//! PASCAL VOC toolkit: class 0 is black and every id in 0..=255 gets a
//! distinct colour. Masks are alpha-blended onto the input at 0.5.

use image::{Rgb, RgbImage};

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const ROI_COLOUR: [u8; 3] = [255, 255, 255];

/// Colour of a class id. Defined for every `u8`.
pub fn palette(class: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut id = class;
    for shift in (0..8).rev() {
        for (c, channel) in rgb.iter_mut().enumerate() {
            *channel |= ((id >> c) & 1) << shift;
        }
        id >>= 3;
    }
    rgb
}

/// Region of interest in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl std::str::FromStr for Roi {
    type Err = String;

    /// Parses `x,y,width,height`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad ROI `{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [x, y, width, height] if width > 0 && height > 0 => Ok(Roi { x, y, width, height }),
            _ => Err(format!("ROI must be x,y,width,height with positive size, got `{s}`")),
        }
    }
}

/// Blends the colour-coded `labels` onto `image` and outlines each ROI.
///
/// Panics if `labels` does not hold one id per pixel.
pub fn overlay(image: &RgbImage, labels: &[u8], rois: &[Roi]) -> RgbImage {
    let (w, h) = image.dimensions();
    assert_eq!(labels.len(), (w * h) as usize, "one label per pixel");
    let mut out = RgbImage::new(w, h);
    for (i, (px, dst)) in image.pixels().zip(out.pixels_mut()).enumerate() {
        let col = palette(labels[i]);
        *dst = Rgb(std::array::from_fn(|c| {
            let v = (1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * col[c] as f64;
            v.round() as u8
        }));
    }
    for roi in rois {
        draw_rect(&mut out, roi);
    }
    out
}

fn draw_rect(img: &mut RgbImage, roi: &Roi) {
    let (w, h) = img.dimensions();
    if roi.x >= w || roi.y >= h {
        return;
    }
    let x1 = (roi.x + roi.width - 1).min(w - 1);
    let y1 = (roi.y + roi.height - 1).min(h - 1);
    for x in roi.x..=x1 {
        img.put_pixel(x, roi.y, Rgb(ROI_COLOUR));
        img.put_pixel(x, y1, Rgb(ROI_COLOUR));
    }
    for y in roi.y..=y1 {
        img.put_pixel(roi.x, y, Rgb(ROI_COLOUR));
        img.put_pixel(x1, y, Rgb(ROI_COLOUR));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn palette_is_injective_over_all_ids() {
        let colours: HashSet<[u8; 3]> = (0..=255u8).map(palette).collect();
        assert_eq!(colours.len(), 256);
        assert_eq!(palette(0), [0, 0, 0]);
        assert_eq!(palette(1), [128, 0, 0]);
        assert_eq!(palette(2), [0, 128, 0]);
    }

    #[test]
    fn overlay_keeps_dimensions_and_blends_half() {
        let img = RgbImage::from_pixel(4, 3, Rgb([100, 200, 0]));
        let out = overlay(&img, &[1; 12], &[]);
        assert_eq!(out.dimensions(), (4, 3));
        assert_eq!(out.get_pixel(0, 0).0, [114, 100, 0]);
    }

    #[test]
    fn roi_outline_is_clipped() {
        let img = RgbImage::new(4, 4);
        let out = overlay(&img, &[0; 16], &["2,2,10,10".parse().unwrap()]);
        assert_eq!(out.get_pixel(2, 2).0, ROI_COLOUR);
        assert_eq!(out.get_pixel(3, 3).0, ROI_COLOUR);
        assert_eq!(out.get_pixel(1, 1).0, [0, 0, 0]);
        assert!("1,2,3".parse::<Roi>().is_err());
    }
}
