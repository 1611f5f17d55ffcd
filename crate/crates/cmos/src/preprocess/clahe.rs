//! Contrast-limited adaptive histogram equalization.
//!
//! 8x8 tile grid, 256 bins, relative clip limit 2.0, bilinear blending of the
//! four surrounding tile mappings per pixel. Input intensities are min-max
//! normalized into the bin range first; output lands in `[0,1]`.

use super::GrayFrame;
use crate::error::{Error, Result};

const GRID: usize = 8;
const BINS: usize = 256;
const CLIP_LIMIT: f64 = 2.0;

pub fn clahe_normalize(frame: &GrayFrame) -> Result<GrayFrame> {
    let (h, w) = (frame.height, frame.width);
    if h % GRID != 0 || w % GRID != 0 {
        return Err(Error::InvalidArgument(format!(
            "CLAHE expects dimensions divisible by {GRID}, got {w}x{h}"
        )));
    }
    let lo = frame.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = frame.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("CLAHE input".into()));
    }
    if hi <= lo {
        // Constant image: nothing to equalize; rescaled to zero.
        return Ok(GrayFrame::zeros(h, w));
    }
    let scale = (BINS as f32 - 1e-3) / (hi - lo);
    let bin_of = |v: f32| -> usize { (((v - lo) * scale) as usize).min(BINS - 1) };

    let tile_h = h / GRID;
    let tile_w = w / GRID;
    let area = tile_h * tile_w;
    let clip = ((CLIP_LIMIT * area as f64 / BINS as f64).max(1.0)).floor() as usize;

    // Per-tile clipped-histogram CDF lookup tables mapping bin -> [0,1].
    let mut luts = vec![[0.0f32; BINS]; GRID * GRID];
    for ty in 0..GRID {
        for tx in 0..GRID {
            let mut hist = [0usize; BINS];
            for y in ty * tile_h..(ty + 1) * tile_h {
                for x in tx * tile_w..(tx + 1) * tile_w {
                    hist[bin_of(frame.get(y, x))] += 1;
                }
            }
            let mut clipped = 0usize;
            for b in hist.iter_mut() {
                if *b > clip {
                    clipped += *b - clip;
                    *b = clip;
                }
            }
            let batch = clipped / BINS;
            let mut residual = clipped % BINS;
            for b in hist.iter_mut() {
                *b += batch;
            }
            if residual > 0 {
                let step = (BINS / residual).max(1);
                let mut i = 0;
                while i < BINS && residual > 0 {
                    hist[i] += 1;
                    residual -= 1;
                    i += step;
                }
            }
            let lut = &mut luts[ty * GRID + tx];
            let mut cdf = 0usize;
            let inv_area = 1.0 / area as f32;
            for (b, l) in hist.iter().zip(lut.iter_mut()) {
                cdf += *b;
                *l = cdf as f32 * inv_area;
            }
        }
    }

    // Bilinear blend between the four neighboring tile mappings.
    let mut out = GrayFrame::zeros(h, w);
    let inv_th = 1.0 / tile_h as f64;
    let inv_tw = 1.0 / tile_w as f64;
    for y in 0..h {
        let tyf = (y as f64 + 0.5) * inv_th - 0.5;
        let ty0 = tyf.floor().max(0.0) as usize;
        let ty1 = (tyf.floor() as isize + 1).clamp(0, GRID as isize - 1) as usize;
        let fy = (tyf - tyf.floor()).clamp(0.0, 1.0) as f32;
        let fy = if tyf < 0.0 { 0.0 } else { fy };
        for x in 0..w {
            let txf = (x as f64 + 0.5) * inv_tw - 0.5;
            let tx0 = txf.floor().max(0.0) as usize;
            let tx1 = (txf.floor() as isize + 1).clamp(0, GRID as isize - 1) as usize;
            let fx = (txf - txf.floor()).clamp(0.0, 1.0) as f32;
            let fx = if txf < 0.0 { 0.0 } else { fx };
            let bin = bin_of(frame.get(y, x));
            let tl = luts[ty0 * GRID + tx0][bin];
            let tr = luts[ty0 * GRID + tx1][bin];
            let bl = luts[ty1 * GRID + tx0][bin];
            let br = luts[ty1 * GRID + tx1][bin];
            let top = tl * (1.0 - fx) + tr * fx;
            let bottom = bl * (1.0 - fx) + br * fx;
            out.set(y, x, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(data: &[f32]) -> f64 {
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        (data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let frame = GrayFrame::new(160, 160, vec![0.37; 160 * 160]);
        let out = clahe_normalize(&frame).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_stays_in_unit_range() {
        let mut frame = GrayFrame::zeros(160, 160);
        for y in 0..160 {
            for x in 0..160 {
                frame.set(y, x, ((x * 7 + y * 13) % 97) as f32 * 3.0 - 20.0);
            }
        }
        let out = clahe_normalize(&frame).unwrap();
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn low_contrast_gradient_gains_spread() {
        // A shallow gradient compressed into the middle of the intensity
        // range (the extremes exist but are rare, so min-max normalization
        // cannot stretch the bulk). CLAHE must spread it wider.
        let mut frame = GrayFrame::zeros(160, 160);
        for y in 0..160 {
            for x in 0..160 {
                frame.set(y, x, 0.45 + 0.08 * (x as f32 / 159.0) + 0.02 * (y as f32 / 159.0));
            }
        }
        frame.set(0, 0, 0.0);
        frame.set(159, 159, 1.0);
        let out = clahe_normalize(&frame).unwrap();
        let lo = frame.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = frame.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let minmax: Vec<f32> = frame.data.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        assert!(
            std_dev(&out.data) >= std_dev(&minmax),
            "clahe {} < minmax {}",
            std_dev(&out.data),
            std_dev(&minmax)
        );
    }
}
