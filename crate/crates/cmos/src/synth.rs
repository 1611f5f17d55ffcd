//! Labeled synthetic polar segment sequences with parametric wall motion.
//!
//! Segments are rendered directly in polar space (rows = radius). A bright
//! band plays the myocardium: over the cycle its inner edge moves inward by
//! the contraction amplitude `A` while the wall thickens by `B`, following
//! the phase waveform `w(t) = 0.5 (1 - cos(2 pi t / T))`. Class semantics:
//! normal contracts strongly, hypokinetic weakly, akinetic barely, and
//! dyskinetic moves outward (negative `A`). Amplitudes are chosen so classes
//! are learnable but adjacent ones overlap under noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    SegmentSequence, SubjectStudy, NUM_CLASSES, SEGMENTS_PER_SUBJECT, SEGMENT_COLS, SEGMENT_ROWS,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default inner radius of the band, in rows.
pub const DEFAULT_INNER_RADIUS: f64 = 38.0;
/// Default wall thickness, in rows.
pub const DEFAULT_WALL_THICKNESS: f64 = 12.0;
/// Band intensity before gain/modulation, over a 0.15 background.
const BAND_INTENSITY: f64 = 0.8;
const BACKGROUND: f64 = 0.15;
/// Sigmoid edge scale: the transition spans about 2 rows.
const EDGE_SCALE: f64 = 0.5;

/// Parametric motion of one rendered segment.
#[derive(Debug, Clone)]
pub struct MotionSpec {
    pub class: u8,
    /// Base inner radius R0, rows.
    pub inner_radius: f64,
    /// Wall thickness W0, rows.
    pub wall_thickness: f64,
    /// Contraction amplitude A, rows; negative moves outward.
    pub contraction: f64,
    /// Thickening amplitude B, rows.
    pub thickening: f64,
    pub noise_sigma: f64,
    pub gain: f64,
    /// Phase of the mild (+-10%) column-wise intensity modulation.
    pub column_phase: f64,
}

impl MotionSpec {
    /// Class-typical amplitudes; akinetic draws its residual amplitude from
    /// `[-0.5, 0.5]`.
    pub fn for_class<R: Rng>(
        class: u8,
        noise_sigma: f64,
        gain: f64,
        rng: &mut R,
    ) -> Result<MotionSpec> {
        let (contraction, thickening) = match class {
            0 => (8.0, 4.0),
            1 => (3.0, 1.5),
            2 => (rng.gen_range(-0.5..=0.5), 0.0),
            3 => (-5.0, 0.0),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "motion class must be 0..=3, got {other}"
                )))
            }
        };
        let spec = MotionSpec {
            class,
            inner_radius: DEFAULT_INNER_RADIUS,
            wall_thickness: DEFAULT_WALL_THICKNESS,
            contraction,
            thickening,
            noise_sigma,
            gain,
            column_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.contraction.abs();
        if self.inner_radius - a < 0.0
            || self.inner_radius + self.wall_thickness + a + self.thickening
                > SEGMENT_ROWS as f64
        {
            return Err(Error::InvalidArgument(format!(
                "band would leave [0,{SEGMENT_ROWS}): R0={} W0={} A={} B={}",
                self.inner_radius, self.wall_thickness, self.contraction, self.thickening
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Phase waveform at frame `f` of `t`: 0 at end-diastole, 1 at peak.
    pub fn phase(f: usize, t: usize) -> f64 {
        0.5 * (1.0 - (std::f64::consts::TAU * f as f64 / t as f64).cos())
    }

    /// Band interval `[inner, outer]` in rows at frame `f` of `t`.
    pub fn band_at(&self, f: usize, t: usize) -> (f64, f64) {
        let w = Self::phase(f, t);
        let inner = self.inner_radius - self.contraction * w;
        (inner, inner + self.wall_thickness + self.thickening * w)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One standard normal sample (Box-Muller, consuming two uniforms).
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders one segment cine `[80, 60, t]`.
pub fn render_segment<R: Rng>(spec: &MotionSpec, t: usize, rng: &mut R) -> Result<Tensor<f32>> {
    spec.validate()?;
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "segment needs at least 2 frames, got {t}"
        )));
    }
    let peak = BAND_INTENSITY * spec.gain;
    let col_mod: Vec<f64> = (0..SEGMENT_COLS)
        .map(|c| {
            1.0 + 0.1
                * (std::f64::consts::TAU * c as f64 / SEGMENT_COLS as f64 + spec.column_phase)
                    .sin()
        })
        .collect();
    let mut data = vec![0.0f32; SEGMENT_ROWS * SEGMENT_COLS * t];
    for f in 0..t {
        let (lo, hi) = spec.band_at(f, t);
        // Radial edge profile is shared by every column of this frame.
        let edge: Vec<f64> = (0..SEGMENT_ROWS)
            .map(|r| {
                let r = r as f64;
                sigmoid((r - lo) / EDGE_SCALE) * sigmoid((hi - r) / EDGE_SCALE)
            })
            .collect();
        for (r, &e) in edge.iter().enumerate() {
            for (c, &m) in col_mod.iter().enumerate() {
                let clean = BACKGROUND + (peak * m - BACKGROUND) * e;
                let v = if spec.noise_sigma > 0.0 {
                    clean + spec.noise_sigma * gauss(rng)
                } else {
                    clean
                };
                data[(r * SEGMENT_COLS + c) * t + f] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![SEGMENT_ROWS, SEGMENT_COLS, t], data)
}

/// Dataset-level knobs.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub subjects: usize,
    /// Probability that a subject is imaged at 20 frames (otherwise 25).
    pub frames_20_fraction: f64,
    /// Class prior over the four motion classes.
    pub class_prior: [f64; 4],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Priors follow the 794:348:207:91 study distribution; frame counts
        // the 65:25 ratio of 20- vs 25-frame subjects.
        SynthConfig {
            subjects: 90,
            frames_20_fraction: 65.0 / 90.0,
            class_prior: [794.0 / 1440.0, 348.0 / 1440.0, 207.0 / 1440.0, 91.0 / 1440.0],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::Config("subject count must be positive".into()));
        }
        let sum: f64 = self.class_prior.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.class_prior.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!(
                "class prior must be nonnegative and sum to 1, got {:?}",
                self.class_prior
            )));
        }
        if !(0.0..=1.0).contains(&self.frames_20_fraction) {
            return Err(Error::Config("frame mix fraction must be in [0,1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws a class from the prior.
pub fn sample_class<R: Rng>(prior: &[f64; 4], rng: &mut R) -> u8 {
    let x: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (c, &p) in prior.iter().enumerate() {
        acc += p;
        if x < acc {
            return c as u8;
        }
    }
    (NUM_CLASSES - 1) as u8
}

/// Generates one subject deterministically from the config seed and its index.
pub fn generate_subject(config: &SynthConfig, index: usize) -> Result<SubjectStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &format!("synth-subject-{index}"),
    ));
    let subject_id = format!("s{index:04}");
    let t = if rng.gen_range(0.0..1.0) < config.frames_20_fraction {
        20
    } else {
        25
    };
    let gain = rng.gen_range(0.9..1.1);
    let mut segments = Vec::with_capacity(SEGMENTS_PER_SUBJECT);
    for seg_index in 1..=SEGMENTS_PER_SUBJECT as u8 {
        let class = sample_class(&config.class_prior, &mut rng);
        let spec = MotionSpec::for_class(class, config.noise_sigma, gain, &mut rng)?;
        let tensor = render_segment(&spec, t, &mut rng)?;
        segments.push(SegmentSequence::new(
            tensor,
            &subject_id,
            seg_index,
            Some(class),
        )?);
    }
    SubjectStudy::new(subject_id, segments)
}

/// Generates the full dataset; deterministic given the seed.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<SubjectStudy>> {
    config.validate()?;
    (0..config.subjects)
        .map(|i| generate_subject(config, i))
        .collect()
}
