//! Bar plots of intensity histograms as PNG images.
//!
//! Counts are drawn on a `ln(1 + count)` scale so the near-zero mode does
//! not flatten the tails. Several histograms over the same bins are
//! overlaid with additive colour.

use image::{Rgb, RgbImage};
use mr2pet::metrics::HistogramReport;

pub const REAL: Rgb<u8> = Rgb([40, 90, 200]);
pub const GENERATED: Rgb<u8> = Rgb([220, 110, 30]);

const HEIGHT: u32 = 240;
const MARGIN: u32 = 10;
const BAR: u32 = 5;

/// Overlaid histograms; all must share the bin count.
pub fn histograms(series: &[(&HistogramReport, Rgb<u8>)]) -> RgbImage {
    let bins = series.first().map_or(1, |(h, _)| h.counts.len()) as u32;
    let width = 2 * MARGIN + bins * BAR;
    let mut img = RgbImage::from_pixel(width, HEIGHT, Rgb([255, 255, 255]));
    let top = series
        .iter()
        .flat_map(|(h, _)| h.counts.iter())
        .map(|&c| (1.0 + c as f64).ln())
        .fold(0.0, f64::max)
        .max(1.0);
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    for (h, colour) in series {
        for (i, &c) in h.counts.iter().enumerate() {
            let bar = ((1.0 + c as f64).ln() / top * plot_h).round() as u32;
            let x0 = MARGIN + i as u32 * BAR;
            for x in x0..x0 + BAR - 1 {
                for y in HEIGHT - MARGIN - bar..HEIGHT - MARGIN {
                    let p = img.get_pixel_mut(x, y);
                    // white-subtractive mix so overlaps darken
                    for k in 0..3 {
                        p.0[k] = ((p.0[k] as u32 * colour.0[k] as u32) / 255) as u8;
                    }
                }
            }
        }
    }
    // zero line, if zero is inside the range
    if let Some((h, _)) = series.first() {
        let (lo, hi) = (h.edges[0], h.edges[h.edges.len() - 1]);
        if lo < 0.0 && hi > 0.0 {
            let x = MARGIN + ((-lo) / (hi - lo) * (bins * BAR) as f64) as u32;
            for y in MARGIN..HEIGHT - MARGIN {
                img.put_pixel(x.min(width - 1), y, Rgb([0, 0, 0]));
            }
        }
    }
    img
}
