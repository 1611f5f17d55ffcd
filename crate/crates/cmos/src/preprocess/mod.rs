//! Cartesian short-axis cines plus three landmarks in, 16 same-sized polar
//! segment sequences per subject out.
//!
//! The three landmarks (anterior and inferior LV/RV junctions, cavity
//! center) fix translation, rotation and scale. After alignment every
//! subject sits in a canonical 160x160 frame with the cavity center at
//! (80,80) and the mid-septal direction (the bisector of the two junction
//! rays) pointing left, so one fixed angular convention serves all subjects.

mod clahe;
mod polar;

pub use clahe::clahe_normalize;
pub use polar::{polar_resample, ANTERIOR_JUNCTION_ANGLE_DEG};

use crate::data::{Level, SegmentSequence, SubjectStudy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the canonical aligned frame.
pub const ALIGNED_SIZE: usize = 160;
/// Square crop side as a multiple of the larger center-to-junction distance.
pub const CROP_SCALE: f64 = 2.5;
/// Junction rays closer than this are considered degenerate.
pub const MIN_JUNCTION_SEPARATION_DEG: f64 = 5.0;

/// A single grayscale frame, row-major `f32` in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> GrayFrame {
        assert_eq!(data.len(), height * width, "frame data length");
        GrayFrame {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> GrayFrame {
        GrayFrame::new(height, width, vec![0.0; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates with edge clamping.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (xc - x0 as f64) as f32;
        let fy = (yc - y0 as f64) as f32;
        let v00 = self.get(y0, x0);
        let v01 = self.get(y0, x1);
        let v10 = self.get(y1, x0);
        let v11 = self.get(y1, x1);
        let top = v00 * (1.0 - fx) + v01 * fx;
        let bottom = v10 * (1.0 - fx) + v11 * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// The three manual landmarks on frame 0, in pixel coordinates (x=col, y=row).
#[derive(Debug, Clone, Copy)]
pub struct Landmarks {
    pub anterior_junction: (f64, f64),
    pub inferior_junction: (f64, f64),
    pub cavity_center: (f64, f64),
}

/// One short-axis cine with its landmarks.
#[derive(Debug, Clone)]
pub struct RawSlice {
    pub frames: Vec<GrayFrame>,
    pub level: Level,
    pub pixel_spacing_mm: f64,
    pub landmarks: Landmarks,
}

impl RawSlice {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cine needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        let (h, w) = (self.frames[0].height, self.frames[0].width);
        if self.frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::InvalidArgument(
                "all frames of a slice must share dimensions".into(),
            ));
        }
        Ok(())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Geometry derived from the landmarks: rotation that brings the septal
/// bisector to 180 degrees, and the crop scale.
struct AlignTransform {
    center: (f64, f64),
    /// Source pixels per output pixel.
    scale: f64,
    cos_r: f64,
    sin_r: f64,
}

impl AlignTransform {
    fn from_landmarks(lm: &Landmarks, h: usize, w: usize) -> Result<AlignTransform> {
        let inside = |p: (f64, f64)| {
            p.0 >= 0.0 && p.0 <= (w - 1) as f64 && p.1 >= 0.0 && p.1 <= (h - 1) as f64
        };
        for (name, p) in [
            ("anterior_junction", lm.anterior_junction),
            ("inferior_junction", lm.inferior_junction),
            ("cavity_center", lm.cavity_center),
        ] {
            if !inside(p) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {name} {p:?} lies outside the {w}x{h} image"
                )));
            }
        }
        let c = lm.cavity_center;
        let va = (lm.anterior_junction.0 - c.0, lm.anterior_junction.1 - c.1);
        let vb = (lm.inferior_junction.0 - c.0, lm.inferior_junction.1 - c.1);
        let da = (va.0 * va.0 + va.1 * va.1).sqrt();
        let db = (vb.0 * vb.0 + vb.1 * vb.1).sqrt();
        if da < 1.0 || db < 1.0 {
            return Err(Error::InvalidArgument(
                "junction landmark coincides with the cavity center".into(),
            ));
        }
        let ang_a = va.1.atan2(va.0);
        let ang_b = vb.1.atan2(vb.0);
        let delta = wrap_angle(ang_b - ang_a);
        if delta.abs() < MIN_JUNCTION_SEPARATION_DEG.to_radians() {
            return Err(Error::Degenerate(format!(
                "junction rays separated by only {:.2} degrees",
                delta.abs().to_degrees()
            )));
        }
        let bisector = ang_a + delta / 2.0;
        // Rotate image content by rho so the bisector lands on 180 degrees.
        let rho = std::f64::consts::PI - bisector;
        let side = CROP_SCALE * da.max(db);
        Ok(AlignTransform {
            center: c,
            scale: side / ALIGNED_SIZE as f64,
            cos_r: (-rho).cos(),
            sin_r: (-rho).sin(),
        })
    }

    /// Maps an output pixel (canonical frame) back to source coordinates.
    fn to_source(&self, xo: f64, yo: f64) -> (f64, f64) {
        let half = (ALIGNED_SIZE / 2) as f64;
        let dx = (xo - half) * self.scale;
        let dy = (yo - half) * self.scale;
        (
            self.center.0 + self.cos_r * dx - self.sin_r * dy,
            self.center.1 + self.sin_r * dx + self.cos_r * dy,
        )
    }
}

/// Aligns a cine to the canonical 160x160 frame: cavity center to (80,80),
/// septal bisector to 180 degrees, crop side `2.5 x` the larger
/// center-to-junction distance, bilinear resampling. The frame-0 landmarks
/// drive the transform for every frame.
pub fn crop_align(slice: &RawSlice) -> Result<Vec<GrayFrame>> {
    slice.validate()?;
    let (h, w) = (slice.frames[0].height, slice.frames[0].width);
    let tf = AlignTransform::from_landmarks(&slice.landmarks, h, w)?;
    let mut out = Vec::with_capacity(slice.frames.len());
    for frame in &slice.frames {
        let mut aligned = GrayFrame::zeros(ALIGNED_SIZE, ALIGNED_SIZE);
        for y in 0..ALIGNED_SIZE {
            for x in 0..ALIGNED_SIZE {
                let (sx, sy) = tf.to_source(x as f64, y as f64);
                aligned.set(y, x, frame.sample_bilinear(sx, sy));
            }
        }
        out.push(aligned);
    }
    Ok(out)
}

/// Builds a subject from its three processed slices. Input: per level, the
/// segment tensors produced by [`polar_resample`]. AHA indices 1-6 basal,
/// 7-12 mid, 13-16 apical; labels can be attached afterwards.
pub fn assemble_subject(
    subject_id: &str,
    slices: Vec<(Level, Vec<Tensor<f32>>)>,
) -> Result<SubjectStudy> {
    let mut basal = None;
    let mut mid = None;
    let mut apical = None;
    for (level, tensors) in slices {
        let slot = match level {
            Level::Basal => &mut basal,
            Level::Mid => &mut mid,
            Level::Apical => &mut apical,
        };
        if slot.is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate level {} for subject {subject_id}",
                level.as_str()
            )));
        }
        *slot = Some(tensors);
    }
    let (basal, mid, apical) = match (basal, mid, apical) {
        (Some(b), Some(m), Some(a)) => (b, m, a),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id} is missing a slice level"
            )))
        }
    };
    let t = basal
        .first()
        .map(|x| x.shape()[2])
        .ok_or_else(|| Error::InvalidArgument("empty basal slice".into()))?;
    let mut segments = Vec::with_capacity(16);
    let mut push = |tensors: Vec<Tensor<f32>>, first_index: u8| -> Result<()> {
        for (k, tensor) in tensors.into_iter().enumerate() {
            if tensor.shape()[2] != t {
                return Err(Error::InvalidArgument(format!(
                    "frame count mismatch across levels for subject {subject_id}"
                )));
            }
            segments.push(SegmentSequence::new(
                tensor,
                subject_id,
                first_index + k as u8,
                None,
            )?);
        }
        Ok(())
    };
    push(basal, 1)?;
    push(mid, 7)?;
    push(apical, 13)?;
    SubjectStudy::new(subject_id, segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth radial bump for interpolation-friendly phantoms.
    pub(crate) fn gaussian_blob(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> GrayFrame {
        let mut f = GrayFrame::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                f.set(y, x, (-d2 / (2.0 * sigma * sigma)).exp() as f32);
            }
        }
        f
    }

    fn centered_landmarks() -> Landmarks {
        // Bisector of the two junction rays already points left; distances 64
        // make the crop side exactly 160, so the transform is the identity.
        let c = (80.0, 80.0);
        let ang_a = 120f64.to_radians();
        let ang_b = 240f64.to_radians();
        Landmarks {
            anterior_junction: (c.0 + 64.0 * ang_a.cos(), c.1 + 64.0 * ang_a.sin()),
            inferior_junction: (c.0 + 64.0 * ang_b.cos(), c.1 + 64.0 * ang_b.sin()),
            cavity_center: c,
        }
    }

    #[test]
    fn identity_landmarks_reproduce_the_input() {
        let frame = gaussian_blob(160, 160, 70.0, 90.0, 25.0);
        let slice = RawSlice {
            frames: vec![frame.clone(), frame.clone()],
            level: Level::Mid,
            pixel_spacing_mm: 1.0,
            landmarks: centered_landmarks(),
        };
        let aligned = crop_align(&slice).unwrap();
        assert_eq!(aligned.len(), 2);
        for (a, b) in aligned[0].data.iter().zip(&frame.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn disk_at_cavity_center_lands_at_frame_center() {
        // Blob off-center in the source; its centroid must map to (80,80).
        let blob_at = (55.0, 97.0);
        let frame = gaussian_blob(200, 180, blob_at.0, blob_at.1, 12.0);
        let ang_a = 30f64.to_radians();
        let ang_b = 170f64.to_radians();
        let slice = RawSlice {
            frames: vec![frame.clone(), frame],
            level: Level::Basal,
            pixel_spacing_mm: 1.0,
            landmarks: Landmarks {
                anterior_junction: (blob_at.0 + 50.0 * ang_a.cos(), blob_at.1 + 50.0 * ang_a.sin()),
                inferior_junction: (blob_at.0 + 45.0 * ang_b.cos(), blob_at.1 + 45.0 * ang_b.sin()),
                cavity_center: blob_at,
            },
        };
        let aligned = crop_align(&slice).unwrap();
        let f = &aligned[0];
        let (mut sx, mut sy, mut mass) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..f.height {
            for x in 0..f.width {
                let v = f.get(y, x) as f64;
                sx += v * x as f64;
                sy += v * y as f64;
                mass += v;
            }
        }
        let centroid = (sx / mass, sy / mass);
        assert!(
            (centroid.0 - 80.0).abs() < 0.5 && (centroid.1 - 80.0).abs() < 0.5,
            "centroid {centroid:?}"
        );
    }

    #[test]
    fn joint_rotation_of_image_and_landmarks_is_invariant() {
        // Path A: align the original. Path B: rotate image+landmarks by 30
        // degrees about the image center first, then align. Outputs agree to
        // within interpolation error (2% of the intensity range).
        let base = gaussian_blob(200, 200, 90.0, 110.0, 30.0);
        let lm = Landmarks {
            anterior_junction: (60.0, 80.0),
            inferior_junction: (70.0, 150.0),
            cavity_center: (100.0, 105.0),
        };
        let theta = 30f64.to_radians();
        let (cx, cy) = (99.5, 99.5);
        let rot_point = |p: (f64, f64)| -> (f64, f64) {
            let (dx, dy) = (p.0 - cx, p.1 - cy);
            (
                cx + theta.cos() * dx - theta.sin() * dy,
                cy + theta.sin() * dx + theta.cos() * dy,
            )
        };
        // Rotate the image by resampling through the inverse map.
        let mut rotated = GrayFrame::zeros(200, 200);
        for y in 0..200 {
            for x in 0..200 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + (-theta).cos() * dx - (-theta).sin() * dy;
                let sy = cy + (-theta).sin() * dx + (-theta).cos() * dy;
                rotated.set(y, x, base.sample_bilinear(sx, sy));
            }
        }
        let slice_a = RawSlice {
            frames: vec![base.clone(), base],
            level: Level::Mid,
            pixel_spacing_mm: 1.0,
            landmarks: lm,
        };
        let slice_b = RawSlice {
            frames: vec![rotated.clone(), rotated],
            level: Level::Mid,
            pixel_spacing_mm: 1.0,
            landmarks: Landmarks {
                anterior_junction: rot_point(lm.anterior_junction),
                inferior_junction: rot_point(lm.inferior_junction),
                cavity_center: rot_point(lm.cavity_center),
            },
        };
        let a = crop_align(&slice_a).unwrap();
        let b = crop_align(&slice_b).unwrap();
        let max_diff = a[0]
            .data
            .iter()
            .zip(&b[0].data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 0.02, "max diff {max_diff}");
    }

    #[test]
    fn rejects_bad_landmarks() {
        let frame = GrayFrame::zeros(100, 100);
        let mk = |lm: Landmarks| RawSlice {
            frames: vec![frame.clone(), frame.clone()],
            level: Level::Basal,
            pixel_spacing_mm: 1.0,
            landmarks: lm,
        };
        // Outside the image.
        let err = crop_align(&mk(Landmarks {
            anterior_junction: (500.0, 10.0),
            inferior_junction: (10.0, 80.0),
            cavity_center: (50.0, 50.0),
        }))
        .unwrap_err();
        assert!(err.to_string().contains("outside"));
        // Nearly collinear junction rays.
        let err = crop_align(&mk(Landmarks {
            anterior_junction: (80.0, 50.0),
            inferior_junction: (79.0, 49.0),
            cavity_center: (20.0, 20.0),
        }))
        .unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn assemble_requires_exactly_one_slice_per_level() {
        let seg = |_k: usize| Tensor::<f32>::zeros(vec![80, 60, 3]);
        let six: Vec<_> = (0..6).map(seg).collect();
        let four: Vec<_> = (0..4).map(seg).collect();
        let ok = assemble_subject(
            "s1",
            vec![
                (Level::Basal, six.clone()),
                (Level::Mid, six.clone()),
                (Level::Apical, four.clone()),
            ],
        )
        .unwrap();
        assert_eq!(ok.segments.len(), 16);
        let indices: Vec<u8> = ok.segments.iter().map(|s| s.segment_index).collect();
        assert_eq!(indices, (1..=16).collect::<Vec<u8>>());

        let err = assemble_subject(
            "s1",
            vec![
                (Level::Basal, six.clone()),
                (Level::Basal, six.clone()),
                (Level::Apical, four.clone()),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate level"));

        let longer: Vec<_> = (0..4)
            .map(|_| Tensor::<f32>::zeros(vec![80, 60, 5]))
            .collect();
        let err = assemble_subject(
            "s1",
            vec![
                (Level::Basal, six.clone()),
                (Level::Mid, six),
                (Level::Apical, longer),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("frame count mismatch"));
    }
}
