//! The scoring network: a conv-KI temporal layer, four 3x3 convolution
//! blocks with 2x2 ceil pooling, optional non-local blocks, and a two-layer
//! classification head over the 4 motion classes.
//!
//! Non-local blocks sit after a block's pooling stage. `*-NL-1` variants
//! place one block after Conv4; `*-NL-2` place blocks after Conv3 and Conv4.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SubjectStudy, NUM_CLASSES, SEGMENT_COLS, SEGMENT_ROWS};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::io::cmot;
use crate::layers::{
    conv_ki_forward, he_uniform, nl_block_forward, ConvKiKernel, NlBlockParams, NlBlockVars,
    NlScope,
};
use crate::tensor::{Graph, Padding, Scalar, Tensor, VarId};

/// Network variant: where (and at which scope) non-local blocks sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    SegNl1,
    SegNl2,
    SubNl1,
    SubNl2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::SegNl1,
        Variant::SegNl2,
        Variant::SubNl1,
        Variant::SubNl2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SegNl1 => "seg-NL-1",
            Variant::SegNl2 => "seg-NL-2",
            Variant::SubNl1 => "sub-NL-1",
            Variant::SubNl2 => "sub-NL-2",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "seg-NL-1" => Ok(Variant::SegNl1),
            "seg-NL-2" => Ok(Variant::SegNl2),
            "sub-NL-1" => Ok(Variant::SubNl1),
            "sub-NL-2" => Ok(Variant::SubNl2),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected baseline, seg-NL-1, seg-NL-2, sub-NL-1, sub-NL-2)"
            ))),
        }
    }

    /// `(block index 0..4, scope)` of each non-local block, in order.
    pub fn nl_placements(&self) -> Vec<(usize, NlScope)> {
        match self {
            Variant::Baseline => vec![],
            Variant::SegNl1 => vec![(3, NlScope::Segment)],
            Variant::SegNl2 => vec![(2, NlScope::Segment), (3, NlScope::Segment)],
            Variant::SubNl1 => vec![(3, NlScope::Subject)],
            Variant::SubNl2 => vec![(2, NlScope::Subject), (3, NlScope::Subject)],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// conv-KI filter count (n_o).
    pub conv_ki_filters: usize,
    pub block_channels: [usize; 4],
    pub fc_width: usize,
    /// Native temporal length N0 of the conv-KI kernel.
    pub native_frames: usize,
    /// Fixed at 4 motion classes.
    pub classes: usize,
    pub input_rows: usize,
    pub input_cols: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            conv_ki_filters: 16,
            block_channels: [16, 32, 64, 64],
            fc_width: 128,
            native_frames: 20,
            classes: NUM_CLASSES,
            input_rows: SEGMENT_ROWS,
            input_cols: SEGMENT_COLS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class count is fixed at {NUM_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.conv_ki_filters == 0
            || self.fc_width == 0
            || self.block_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument(
                "channel and width counts must be positive".into(),
            ));
        }
        if self.native_frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "native frame count must be >= 2, got {}",
                self.native_frames
            )));
        }
        if self.input_rows == 0 || self.input_cols == 0 {
            return Err(Error::InvalidArgument("input extents must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extents after the four ceil-mode poolings.
    pub fn pooled_spatial(&self) -> (usize, usize) {
        let mut r = self.input_rows;
        let mut c = self.input_cols;
        for _ in 0..4 {
            r = r.div_ceil(2);
            c = c.div_ceil(2);
        }
        (r, c)
    }

    fn flat_features(&self) -> usize {
        let (r, c) = self.pooled_spatial();
        r * c * self.block_channels[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable weights of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub conv_ki: ConvKiKernel<T>,
    pub blocks: Vec<ConvBlock<T>>,
    /// `(block index, params)` sorted by block index.
    pub nl_blocks: Vec<(usize, NlBlockParams<T>)>,
    pub fc1_weights: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weights: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// He-uniform conv/fc weights, zero biases, zero theta on non-local blocks;
/// deterministic for a given config seed.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "model-init"));
    let conv_ki = ConvKiKernel::new(config.native_frames, config.conv_ki_filters, &mut rng)?;
    let mut blocks = Vec::with_capacity(4);
    let mut cin = config.conv_ki_filters;
    for &cout in &config.block_channels {
        blocks.push(ConvBlock {
            kernel: he_uniform(vec![3, 3, cin, cout], 3 * 3 * cin, &mut rng),
            bias: Tensor::zeros(vec![cout]),
        });
        cin = cout;
    }
    let nl_blocks = config
        .variant
        .nl_placements()
        .into_iter()
        .map(|(idx, scope)| {
            let channels = config.block_channels[idx];
            (idx, NlBlockParams::new(channels, scope, &mut rng))
        })
        .collect();
    let flat = config.flat_features();
    let params = ModelParams {
        config: config.clone(),
        conv_ki,
        blocks,
        nl_blocks,
        fc1_weights: he_uniform(vec![flat, config.fc_width], flat, &mut rng),
        fc1_bias: Tensor::zeros(vec![config.fc_width]),
        fc2_weights: he_uniform(vec![config.fc_width, config.classes], config.fc_width, &mut rng),
        fc2_bias: Tensor::zeros(vec![config.classes]),
    };
    Ok(params)
}

/// Copies a baseline model and attaches the variant's non-local blocks with
/// zero theta (and seeded phi/psi/g), so the new model reproduces the
/// baseline's logits exactly until fine-tuning moves theta.
pub fn insert_nl_blocks<T: Scalar>(
    baseline: &ModelParams<T>,
    variant: Variant,
) -> Result<ModelParams<T>> {
    if baseline.config.variant != Variant::Baseline {
        return Err(Error::InvalidArgument(format!(
            "non-local insertion requires a baseline model, got `{}`",
            baseline.config.variant
        )));
    }
    if variant == Variant::Baseline {
        return Err(Error::InvalidArgument(
            "cannot insert non-local blocks for the baseline variant".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(baseline.config.seed, "nl-insert"));
    let mut params = baseline.clone();
    params.config.variant = variant;
    params.nl_blocks = variant
        .nl_placements()
        .into_iter()
        .map(|(idx, scope)| {
            let channels = params.config.block_channels[idx];
            (idx, NlBlockParams::new(channels, scope, &mut rng))
        })
        .collect();
    Ok(params)
}

impl<T: Scalar> ModelParams<T> {
    /// Canonical `(name, tensor)` listing; the optimizer and the checkpoint
    /// both follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> =
            vec![("conv_ki.k0".to_string(), self.conv_ki.tensor())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{}.kernel", i + 1), &b.kernel));
            out.push((format!("conv{}.bias", i + 1), &b.bias));
        }
        for (idx, nl) in &self.nl_blocks {
            let p = format!("nl_conv{}", idx + 1);
            out.push((format!("{p}.phi_w"), &nl.phi_w));
            out.push((format!("{p}.psi_w"), &nl.psi_w));
            out.push((format!("{p}.g_w"), &nl.g_w));
            out.push((format!("{p}.theta_w"), &nl.theta_w));
        }
        out.push(("fc1.weights".to_string(), &self.fc1_weights));
        out.push(("fc1.bias".to_string(), &self.fc1_bias));
        out.push(("fc2.weights".to_string(), &self.fc2_weights));
        out.push(("fc2.bias".to_string(), &self.fc2_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> =
            vec![("conv_ki.k0".to_string(), self.conv_ki.tensor_mut())];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("conv{}.kernel", i + 1), &mut b.kernel));
            out.push((format!("conv{}.bias", i + 1), &mut b.bias));
        }
        for (idx, nl) in &mut self.nl_blocks {
            let p = format!("nl_conv{}", *idx + 1);
            out.push((format!("{p}.phi_w"), &mut nl.phi_w));
            out.push((format!("{p}.psi_w"), &mut nl.psi_w));
            out.push((format!("{p}.g_w"), &mut nl.g_w));
            out.push((format!("{p}.theta_w"), &mut nl.theta_w));
        }
        out.push(("fc1.weights".to_string(), &mut self.fc1_weights));
        out.push(("fc1.bias".to_string(), &mut self.fc1_bias));
        out.push(("fc2.weights".to_string(), &mut self.fc2_weights));
        out.push(("fc2.bias".to_string(), &mut self.fc2_bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Tape handles of the registered model parameters.
pub struct ModelVars {
    pub conv_ki: VarId,
    pub blocks: Vec<(VarId, VarId)>,
    pub nl_blocks: Vec<(usize, NlBlockVars)>,
    pub fc1_weights: VarId,
    pub fc1_bias: VarId,
    pub fc2_weights: VarId,
    pub fc2_bias: VarId,
}

impl ModelVars {
    pub fn register<T: Scalar>(
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        trainable: bool,
    ) -> Result<ModelVars> {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        let conv_ki = reg(params.conv_ki.tensor())?;
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            blocks.push((reg(&b.kernel)?, reg(&b.bias)?));
        }
        drop(reg);
        let mut nl_blocks = Vec::with_capacity(params.nl_blocks.len());
        for (idx, nl) in &params.nl_blocks {
            nl_blocks.push((*idx, NlBlockVars::register(g, nl, trainable)?));
        }
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        Ok(ModelVars {
            conv_ki,
            blocks,
            nl_blocks,
            fc1_weights: reg(&params.fc1_weights)?,
            fc1_bias: reg(&params.fc1_bias)?,
            fc2_weights: reg(&params.fc2_weights)?,
            fc2_bias: reg(&params.fc2_bias)?,
        })
    }

    /// Variable handles in the same order as `ModelParams::named_tensors`.
    pub fn ordered_vars(&self) -> Vec<VarId> {
        let mut out = vec![self.conv_ki];
        for (k, b) in &self.blocks {
            out.push(*k);
            out.push(*b);
        }
        for (_, nl) in &self.nl_blocks {
            out.push(nl.phi_w);
            out.push(nl.psi_w);
            out.push(nl.g_w);
            out.push(nl.theta_w);
        }
        out.extend([self.fc1_weights, self.fc1_bias, self.fc2_weights, self.fc2_bias]);
        out
    }
}

/// Runs the network on a registered batch `[B, r, a, t]`, producing raw
/// logits `[B, classes]` (softmax is folded into the loss / prediction).
///
/// For `sub-NL` variants the training contract is one subject's 16 segments
/// per batch; other batch sizes are accepted and attend over whatever batch
/// is given.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    batch: VarId,
) -> Result<VarId> {
    let shape = g.value(batch).shape().to_vec();
    let [b, r, a, t] = match shape.as_slice() {
        [b, r, a, t] => [*b, *r, *a, *t],
        other => {
            return Err(Error::InvalidArgument(format!(
                "model input must be [B,r,a,t], got {other:?}"
            )))
        }
    };
    if r != config.input_rows || a != config.input_cols {
        return Err(Error::ShapeMismatch {
            op: "model input spatial extents",
            left: vec![r, a],
            right: vec![config.input_rows, config.input_cols],
        });
    }
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "model input needs at least 2 frames, got {t}"
        )));
    }
    let mut x = conv_ki_forward(g, batch, vars.conv_ki)?;
    x = g.relu(x)?;
    for (i, (kernel, bias)) in vars.blocks.iter().enumerate() {
        x = g.conv2d(x, *kernel, Padding::Same)?;
        x = g.bias_add(x, *bias)?;
        x = g.relu(x)?;
        x = g.maxpool2d(x)?;
        for (idx, nl) in &vars.nl_blocks {
            if *idx == i {
                x = nl_block_forward(g, x, nl)?;
            }
        }
    }
    let flat = config.flat_features();
    let x = g.reshape(x, vec![b, flat])?;
    let x = g.dense(x, vars.fc1_weights, vars.fc1_bias)?;
    let x = g.relu(x)?;
    g.dense(x, vars.fc2_weights, vars.fc2_bias)
}

/// Inference convenience: fresh untracked graph, returns the logits tensor.
pub fn logits<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = ModelVars::register(&mut g, params, false)?;
    let b = g.input(batch.clone())?;
    let out = forward(&mut g, &vars, &params.config, b)?;
    Ok(g.value(out).clone())
}

/// Per-segment class probabilities and argmax scores for one subject.
#[derive(Debug, Clone)]
pub struct SubjectPrediction {
    /// 16 scores in 0..=3, ordered by AHA index.
    pub scores: Vec<u8>,
    /// 16 rows of 4 class probabilities.
    pub probabilities: Vec<Vec<f64>>,
}

impl SubjectPrediction {
    pub fn msi(&self) -> f64 {
        crate::metrics::msi(&self.scores).expect("16 scores")
    }
}

/// Scores a subject's 16 segments as one batch (the training contract).
pub fn predict_scores<T: Scalar>(
    params: &ModelParams<T>,
    study: &SubjectStudy,
) -> Result<SubjectPrediction> {
    let batch: Tensor<T> = study.batch();
    let out = logits(params, &batch)?;
    let classes = params.config.classes;
    let mut scores = Vec::with_capacity(study.segments.len());
    let mut probabilities = Vec::with_capacity(study.segments.len());
    for row in out.data().chunks(classes) {
        let mx = row
            .iter()
            .cloned()
            .fold(T::from_f64(f64::NEG_INFINITY), |a, b| a.maximum(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp().to_f64()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as u8)
            .unwrap();
        scores.push(argmax);
        probabilities.push(probs);
    }
    Ok(SubjectPrediction {
        scores,
        probabilities,
    })
}

// ---- checkpoints ----------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 5] = b"CMCK1";

fn config_header(config: &ModelConfig) -> String {
    format!(
        "variant={}\nconv_ki_filters={}\nblock_channels={},{},{},{}\nfc_width={}\n\
         native_frames={}\nclasses={}\ninput_rows={}\ninput_cols={}\nseed={}\n",
        config.variant,
        config.conv_ki_filters,
        config.block_channels[0],
        config.block_channels[1],
        config.block_channels[2],
        config.block_channels[3],
        config.fc_width,
        config.native_frames,
        config.classes,
        config.input_rows,
        config.input_cols,
        config.seed
    )
}

fn parse_config_header(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("checkpoint header line `{line}` is not key=value"))
        })?;
        let bad = |what: &str| Error::Format(format!("checkpoint header: bad {what} `{value}`"));
        match key {
            "variant" => config.variant = Variant::parse(value)?,
            "conv_ki_filters" => {
                config.conv_ki_filters = value.parse().map_err(|_| bad("filter count"))?
            }
            "block_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("channel list"))?;
                if parts.len() != 4 {
                    return Err(bad("channel list"));
                }
                config.block_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "fc_width" => config.fc_width = value.parse().map_err(|_| bad("fc width"))?,
            "native_frames" => {
                config.native_frames = value.parse().map_err(|_| bad("native frames"))?
            }
            "classes" => config.classes = value.parse().map_err(|_| bad("class count"))?,
            "input_rows" => config.input_rows = value.parse().map_err(|_| bad("input rows"))?,
            "input_cols" => config.input_cols = value.parse().map_err(|_| bad("input cols"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            other => {
                return Err(Error::Format(format!(
                    "checkpoint header: unknown key `{other}`"
                )))
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Writes a checkpoint: magic, config header, then the named CMOT1 records.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let header = config_header(&params.config);
    let named = params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        cmot::write_record(&mut buf, tensor)?;
    }
    crate::io::write_atomic(path, &buf)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::UnexpectedEnd(what.to_string())
        } else {
            Error::Format(format!("checkpoint read failed: {e}"))
        }
    })
}

/// Loads a checkpoint; the config comes from the embedded header.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected CMCK1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact(&mut r, &mut len4, "checkpoint header length")?;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut r, &mut header, "checkpoint header")?;
    let config = parse_config_header(&String::from_utf8_lossy(&header))?;

    read_exact(&mut r, &mut len4, "checkpoint tensor count")?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut records: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        read_exact(&mut r, &mut len2, "tensor name length")?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let tensor = cmot::read_record(&mut r)?;
        records.push((String::from_utf8_lossy(&name).into_owned(), tensor));
    }

    // Materialize a skeleton with the right structure, then fill by name.
    let mut params = build_model::<T>(&config)?;
    if config.variant != Variant::Baseline {
        // build_model already placed the NL blocks for this variant.
    }
    let mut take = |name: &str, expect_shape: &[usize]| -> Result<Tensor<T>> {
        let pos = records
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let (_, tensor) = records.swap_remove(pos);
        if tensor.shape() != expect_shape {
            return Err(Error::ShapeMismatch {
                op: "checkpoint tensor",
                left: tensor.shape().to_vec(),
                right: expect_shape.to_vec(),
            });
        }
        Ok(tensor)
    };
    {
        let names: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in names {
            loaded.push(take(&name, &shape)?);
        }
        for ((_, slot), tensor) in params.named_tensors_mut().into_iter().zip(loaded) {
            *slot = tensor;
        }
    }
    Ok(params)
}

/// Loads a checkpoint and insists on a particular variant.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, expected: Variant) -> Result<ModelParams<T>> {
    let params = load_checkpoint::<T>(path)?;
    if params.config.variant != expected {
        return Err(Error::VariantMismatch {
            found: params.config.variant.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(params)
}
