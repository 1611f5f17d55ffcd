//! Polar resampling of aligned frames into AHA segment tensors.
//!
//! Radial rows sample radii 1..=80 px from the frame center. The circle is
//! divided from the anterior-junction reference ray (fixed at 120 degrees in
//! the aligned frame, i.e. one basal sector before the septal bisector at
//! 180): basal and mid levels into 6 sectors of 60 degrees, apical into 4 of
//! 90 degrees. Every sector is sampled at 60 cell-centered angles, so apical
//! sectors are sampled more densely and all segments come out 80x60xt.

use super::{GrayFrame, ALIGNED_SIZE};
use crate::data::{Level, SEGMENT_COLS, SEGMENT_ROWS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Angle of the anterior-junction reference ray in the aligned frame,
/// measured from +x toward +y (row direction).
pub const ANTERIOR_JUNCTION_ANGLE_DEG: f64 = 120.0;

/// Resamples an aligned 160x160 cine into the level's segment tensors
/// (`[80, 60, t]` each), ordered by ascending AHA index within the level.
pub fn polar_resample(frames: &[GrayFrame], level: Level) -> Result<Vec<Tensor<f32>>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "polar resampling needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    for f in frames {
        if f.height != ALIGNED_SIZE || f.width != ALIGNED_SIZE {
            return Err(Error::InvalidArgument(format!(
                "polar resampling expects {ALIGNED_SIZE}x{ALIGNED_SIZE} aligned frames, got {}x{}",
                f.width, f.height
            )));
        }
    }
    let sectors = level.sector_count();
    let arc = 360.0 / sectors as f64;
    let t = frames.len();
    let center = (ALIGNED_SIZE / 2) as f64;
    let mut out = Vec::with_capacity(sectors);
    for sector in 0..sectors {
        let start = ANTERIOR_JUNCTION_ANGLE_DEG + sector as f64 * arc;
        let mut data = vec![0.0f32; SEGMENT_ROWS * SEGMENT_COLS * t];
        for row in 0..SEGMENT_ROWS {
            let radius = (row + 1) as f64;
            for col in 0..SEGMENT_COLS {
                let theta = (start + (col as f64 + 0.5) * arc / SEGMENT_COLS as f64).to_radians();
                let x = center + radius * theta.cos();
                let y = center + radius * theta.sin();
                for (fi, frame) in frames.iter().enumerate() {
                    data[(row * SEGMENT_COLS + col) * t + fi] = frame.sample_bilinear(x, y);
                }
            }
        }
        out.push(Tensor::new(vec![SEGMENT_ROWS, SEGMENT_COLS, t], data)?);
    }
    Ok(out)
}
