//! Minimal line plots for loss curves.
//!
//! Curves are drawn without text: one panel per scale group, each series with
//! its own colour and stroke pattern. The legend lives in the CSV next to it.

use image::{Rgb, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stroke {
    Solid,
    Dashed,
    Dotted,
}

impl Stroke {
    fn on(self, travelled: f64) -> bool {
        match self {
            Stroke::Solid => true,
            Stroke::Dashed => travelled % 12.0 < 8.0,
            Stroke::Dotted => travelled % 5.0 < 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub values: Vec<Option<f64>>,
    pub colour: [u8; 3],
    pub stroke: Stroke,
}

const MARGIN: u32 = 24;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [225, 225, 225];

/// Draws `panels` stacked vertically; series in a panel share a y-range.
pub fn plot(panels: &[Vec<Series>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
    let n = panels.len().max(1) as u32;
    let panel_h = height / n;
    for (i, series) in panels.iter().enumerate() {
        let top = i as u32 * panel_h;
        draw_panel(&mut img, series, MARGIN, top + MARGIN / 2, width - 2 * MARGIN, panel_h - MARGIN);
    }
    img
}

fn draw_panel(img: &mut RgbImage, series: &[Series], x0: u32, y0: u32, w: u32, h: u32) {
    let (x0, y0, w, h) = (x0 as f64, y0 as f64, w as f64, h as f64);
    for k in 1..4 {
        let y = y0 + h * k as f64 / 4.0;
        line(img, (x0, y), (x0 + w, y), GRID, Stroke::Solid, &mut 0.0);
    }
    line(img, (x0, y0), (x0, y0 + h), AXIS, Stroke::Solid, &mut 0.0);
    line(img, (x0, y0 + h), (x0 + w, y0 + h), AXIS, Stroke::Solid, &mut 0.0);

    let finite = series.iter().flat_map(|s| s.values.iter().flatten().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let xs = |i: usize| x0 + if len > 1 { w * i as f64 / (len - 1) as f64 } else { w / 2.0 };
    let ys = |v: f64| y0 + h - h * (v - lo) / span;
    for s in series {
        let mut travelled = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for (i, v) in s.values.iter().enumerate() {
            let point = v.filter(|v| v.is_finite()).map(|v| (xs(i), ys(v)));
            match (prev, point) {
                (Some(a), Some(b)) => line(img, a, b, s.colour, s.stroke, &mut travelled),
                (None, Some(b)) => line(img, b, b, s.colour, Stroke::Solid, &mut 0.0),
                _ => {}
            }
            prev = point;
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: [u8; 3], stroke: Stroke, travelled: &mut f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let steps = dx.abs().max(dy.abs()).ceil().max(1.0) as usize;
    let step_len = (dx * dx + dy * dy).sqrt() / steps as f64;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        if stroke.on(*travelled) {
            let (x, y) = ((a.0 + t * dx).round(), (a.1 + t * dy).round());
            if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, Rgb(colour));
            }
        }
        if k < steps {
            *travelled += step_len;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(img: &RgbImage, colour: [u8; 3]) -> usize {
        img.pixels().filter(|p| p.0 == colour).count()
    }

    #[test]
    fn strokes_differ_in_ink() {
        let draw = |stroke| {
            let s = Series {
                values: vec![Some(0.0), Some(1.0), Some(0.5), Some(0.2)],
                colour: [200, 0, 0],
                stroke,
            };
            count(&plot(&[vec![s]], 320, 200), [200, 0, 0])
        };
        let (solid, dashed, dotted) = (draw(Stroke::Solid), draw(Stroke::Dashed), draw(Stroke::Dotted));
        assert!(solid > dashed && dashed > dotted && dotted > 0, "{solid} {dashed} {dotted}");
    }

    #[test]
    fn gaps_and_constant_series_are_handled() {
        let s = Series {
            values: vec![None, Some(2.0), Some(2.0), None],
            colour: [0, 0, 200],
            stroke: Stroke::Solid,
        };
        let img = plot(&[vec![s], vec![]], 200, 200);
        assert_eq!(img.dimensions(), (200, 200));
        assert!(count(&img, [0, 0, 200]) > 0);
    }
}
