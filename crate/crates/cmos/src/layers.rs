//! The two mechanisms specific to this model family.
//!
//! *Kernel-interpolated temporal convolution* (conv-KI): a `1x1xN0xn_o`
//! kernel `k0` is the sole learnable store; for a sequence of length `N` the
//! layer convolves with a linearly interpolated copy `f(k0)` of length `N`,
//! so one model serves cine sequences of different frame counts. Each filter
//! acts as a template matched against the temporal profile at every spatial
//! position.
//!
//! *Non-local block*: each position's response becomes a normalized weighted
//! sum of projected features at all positions in its scope (embedded-Gaussian
//! pairwise similarity, i.e. a softmax over `phi(x_i)^T psi(x_j)`), mapped
//! back through `theta` and added residually. `theta` starts at zero so an
//! inserted block leaves a pre-trained model's behavior unchanged.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Scalar, Tensor, VarId};

/// He-uniform initialization: uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub(crate) fn he_uniform<T: Scalar, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.fill_uniform(rng, limit);
    t
}

/// Learnable store of a conv-KI layer: the native-length kernel only.
/// Interpolated kernels are derived on the tape, never trained directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKiKernel<T: Scalar> {
    k0: Tensor<T>,
}

impl<T: Scalar> ConvKiKernel<T> {
    pub fn new<R: Rng>(n0: usize, n_out: usize, rng: &mut R) -> Result<ConvKiKernel<T>> {
        Self::from_tensor(he_uniform(vec![1, 1, n0, n_out], n0, rng))
    }

    pub fn from_tensor(k0: Tensor<T>) -> Result<ConvKiKernel<T>> {
        match k0.shape() {
            [1, 1, n0, n_out] if *n0 >= 2 && *n_out >= 1 => Ok(ConvKiKernel { k0 }),
            other => Err(Error::InvalidArgument(format!(
                "conv-KI kernel must be [1,1,N0>=2,n_o>=1], got {other:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.k0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.k0
    }

    pub fn native_len(&self) -> usize {
        self.k0.shape()[2]
    }

    pub fn filters(&self) -> usize {
        self.k0.shape()[3]
    }
}

/// Interpolates a registered `[1,1,N0,n_o]` kernel to temporal length `n`,
/// endpoint-aligned and differentiable w.r.t. `k0`. `n == N0` reproduces the
/// kernel bitwise.
pub fn interpolate_kernel<T: Scalar>(g: &mut Graph<T>, k0: VarId, n: usize) -> Result<VarId> {
    let shape = g.value(k0).shape().to_vec();
    let (n0, n_out) = match shape.as_slice() {
        [1, 1, n0, n_out] => (*n0, *n_out),
        other => {
            return Err(Error::InvalidArgument(format!(
                "conv-KI kernel must be [1,1,N0,n_o], got {other:?}"
            )))
        }
    };
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "conv-KI needs at least 2 frames, got {n}"
        )));
    }
    let rows = g.reshape(k0, vec![n0, n_out])?;
    let interp = g.interp_rows(rows, n)?;
    g.reshape(interp, vec![1, 1, n, n_out])
}

/// Temporal convolution consuming the whole time axis: input `[r,a,N]` (or
/// `[B,r,a,N]`) against the interpolated kernel gives `[.., r, a, n_o]`.
pub fn conv_ki_forward<T: Scalar>(g: &mut Graph<T>, x: VarId, k0: VarId) -> Result<VarId> {
    let xshape = g.value(x).shape().to_vec();
    let n = *xshape.last().ok_or_else(|| {
        Error::InvalidArgument("conv-KI input must have a temporal axis".into())
    })?;
    if xshape.len() != 3 && xshape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "conv-KI input must be [r,a,t] or [B,r,a,t], got {xshape:?}"
        )));
    }
    let kernel = interpolate_kernel(g, k0, n)?;
    g.conv2d(x, kernel, Padding::Same)
}

/// Attention scope of a non-local block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlScope {
    /// Positions traverse one segment's feature map; batch elements attend
    /// independently.
    Segment,
    /// Positions traverse all feature maps in the batch jointly.
    Subject,
}

impl NlScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            NlScope::Segment => "segment",
            NlScope::Subject => "subject",
        }
    }

    pub fn parse(s: &str) -> Result<NlScope> {
        match s {
            "segment" => Ok(NlScope::Segment),
            "subject" => Ok(NlScope::Subject),
            other => Err(Error::InvalidArgument(format!(
                "unknown non-local scope `{other}`"
            ))),
        }
    }
}

/// Embedding width used by the phi/psi/g projections.
pub fn embed_width(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// Parameters of one non-local block.
#[derive(Debug, Clone, PartialEq)]
pub struct NlBlockParams<T: Scalar> {
    pub phi_w: Tensor<T>,
    pub psi_w: Tensor<T>,
    pub g_w: Tensor<T>,
    /// Maps the attention output back to `C` channels; zero at insertion so
    /// the residual path initially dominates.
    pub theta_w: Tensor<T>,
    pub scope: NlScope,
}

impl<T: Scalar> NlBlockParams<T> {
    pub fn new<R: Rng>(channels: usize, scope: NlScope, rng: &mut R) -> NlBlockParams<T> {
        let ce = embed_width(channels);
        NlBlockParams {
            phi_w: he_uniform(vec![channels, ce], channels, rng),
            psi_w: he_uniform(vec![channels, ce], channels, rng),
            g_w: he_uniform(vec![channels, ce], channels, rng),
            theta_w: Tensor::zeros(vec![ce, channels]),
            scope,
        }
    }

    pub fn channels(&self) -> usize {
        self.phi_w.shape()[0]
    }
}

/// Tape handles of one registered non-local block.
#[derive(Debug, Clone, Copy)]
pub struct NlBlockVars {
    pub phi_w: VarId,
    pub psi_w: VarId,
    pub g_w: VarId,
    pub theta_w: VarId,
    pub scope: NlScope,
}

impl NlBlockVars {
    pub fn register<T: Scalar>(
        g: &mut Graph<T>,
        params: &NlBlockParams<T>,
        trainable: bool,
    ) -> Result<NlBlockVars> {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        Ok(NlBlockVars {
            phi_w: reg(&params.phi_w)?,
            psi_w: reg(&params.psi_w)?,
            g_w: reg(&params.g_w)?,
            theta_w: reg(&params.theta_w)?,
            scope: params.scope,
        })
    }
}

/// Row-normalized attention weights over the positions of `x` (`[P,C]` or
/// `[B,P,C]`): softmax over `phi(x_i)^T psi(x_j)` per row. Row-max
/// subtraction inside the softmax is exact under this normalization.
pub fn nl_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: VarId,
    phi_w: VarId,
    psi_w: VarId,
) -> Result<VarId> {
    let rank = g.value(x).rank();
    if rank != 2 && rank != 3 {
        return Err(Error::InvalidArgument(format!(
            "nl_attention input must be [P,C] or [B,P,C], got {:?}",
            g.value(x).shape()
        )));
    }
    let phi = g.matmul(x, phi_w)?;
    let psi = g.matmul(x, psi_w)?;
    let psi_t = g.transpose_last2(psi)?;
    let scores = g.matmul(phi, psi_t)?;
    let axis = g.value(scores).rank() - 1;
    g.softmax(scores, axis)
}

/// Full non-local block over feature maps `[B,H,W,C]`: attention-weighted sum
/// of `g` projections, mapped through `theta`, added residually.
pub fn nl_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: VarId,
    block: &NlBlockVars,
) -> Result<VarId> {
    let shape = g.value(x).shape().to_vec();
    let [b, h, w, c] = match shape.as_slice() {
        [b, h, w, c] => [*b, *h, *w, *c],
        other => {
            return Err(Error::InvalidArgument(format!(
                "non-local block input must be [B,H,W,C], got {other:?}"
            )))
        }
    };
    let positions = match block.scope {
        NlScope::Segment => g.reshape(x, vec![b, h * w, c])?,
        NlScope::Subject => g.reshape(x, vec![1, b * h * w, c])?,
    };
    let weights = nl_attention(g, positions, block.phi_w, block.psi_w)?;
    let g_proj = g.matmul(positions, block.g_w)?;
    let y = g.matmul(weights, g_proj)?;
    let mapped = g.matmul(y, block.theta_w)?;
    let z = g.add(mapped, positions)?;
    g.reshape(z, vec![b, h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct evaluation of the non-local response with scalar loops and
    /// explicit exponentials, independent of the graph path.
    fn nl_oracle(
        x: &[f64],
        p: usize,
        c: usize,
        ce: usize,
        phi_w: &[f64],
        psi_w: &[f64],
        g_w: &[f64],
        theta_w: &[f64],
    ) -> Vec<f64> {
        let project = |i: usize, w: &[f64]| -> Vec<f64> {
            (0..ce)
                .map(|e| (0..c).map(|ch| x[i * c + ch] * w[ch * ce + e]).sum())
                .collect()
        };
        let mut z = vec![0.0; p * c];
        for i in 0..p {
            let phi_i = project(i, phi_w);
            let mut weights = vec![0.0; p];
            let mut norm = 0.0;
            for j in 0..p {
                let psi_j = project(j, psi_w);
                let dot: f64 = phi_i.iter().zip(&psi_j).map(|(a, b)| a * b).sum();
                weights[j] = dot.exp();
                norm += weights[j];
            }
            let mut y_i = vec![0.0; ce];
            for j in 0..p {
                let g_j = project(j, g_w);
                for e in 0..ce {
                    y_i[e] += weights[j] / norm * g_j[e];
                }
            }
            for ch in 0..c {
                let mapped: f64 = (0..ce).map(|e| y_i[e] * theta_w[e * c + ch]).sum();
                z[i * c + ch] = mapped + x[i * c + ch];
            }
        }
        z
    }

    #[test]
    fn interpolate_identity_when_lengths_match() {
        let mut g = Graph::new();
        let k0 = t(&[1, 1, 3, 2], &[1.0, -1.0, 3.0, 0.5, 2.0, 0.25]);
        let k = g.input(k0.clone()).unwrap();
        let out = interpolate_kernel(&mut g, k, 3).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 3, 2]);
        for (a, b) in g.value(out).data().iter().zip(k0.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn interpolate_endpoint_aligned_ramp() {
        let mut g = Graph::new();
        let k = g.input(t(&[1, 1, 2, 1], &[0.0, 1.0])).unwrap();
        let out = interpolate_kernel(&mut g, k, 3).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn interpolate_piecewise_linear_profile() {
        // Positions 0, 0.5, 1, 1.5, 2 on the profile [1,3,2].
        let mut g = Graph::new();
        let k = g.input(t(&[1, 1, 3, 1], &[1.0, 3.0, 2.0])).unwrap();
        let out = interpolate_kernel(&mut g, k, 5).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 2.5, 2.0]);
    }

    #[test]
    fn interpolate_rejects_short_targets() {
        let mut g = Graph::new();
        let k = g.input(t(&[1, 1, 3, 1], &[1.0, 3.0, 2.0])).unwrap();
        assert!(interpolate_kernel(&mut g, k, 1).is_err());
    }

    #[test]
    fn interpolate_is_linear_in_the_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k_a = rand_t(&mut rng, &[1, 1, 4, 3]);
        let k_b = rand_t(&mut rng, &[1, 1, 4, 3]);
        let (alpha, beta) = (0.7, -1.3);
        let combo = Tensor::new(
            vec![1, 1, 4, 3],
            k_a.data()
                .iter()
                .zip(k_b.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        let interp = |k0: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let k = g.input(k0.clone()).unwrap();
            let out = interpolate_kernel(&mut g, k, 7).unwrap();
            g.value(out).data().to_vec()
        };
        let lhs = interp(&combo);
        let (fa, fb) = (interp(&k_a), interp(&k_b));
        for (l, (a, b)) in lhs.iter().zip(fa.iter().zip(&fb)) {
            assert!((l - (alpha * a + beta * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_ki_all_ones_filter_sums_temporal_axis() {
        let mut g = Graph::new();
        let x = g
            .input(t(&[1, 2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.5]))
            .unwrap();
        let k = g.input(Tensor::full(vec![1, 1, 3, 1], 1.0)).unwrap();
        let y = conv_ki_forward(&mut g, x, k).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 1]);
        assert_eq!(g.value(y).data(), &[6.0, 2.0]);
    }

    #[test]
    fn conv_ki_constant_input_sums_interpolated_taps() {
        // X constant 1 over t=5 against k0=[1,3,2] interpolated to [1,2,3,2.5,2].
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![2, 2, 5], 1.0)).unwrap();
        let k = g.input(t(&[1, 1, 3, 1], &[1.0, 3.0, 2.0])).unwrap();
        let y = conv_ki_forward(&mut g, x, k).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 10.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_ki_matches_temporal_dot_product() {
        // Profile [1,0,1] against filter [1,3,2] at one pixel: 1*1+0*3+1*2 = 3.
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3], &[1.0, 0.0, 1.0])).unwrap();
        let k = g.input(t(&[1, 1, 3, 1], &[1.0, 3.0, 2.0])).unwrap();
        let y = conv_ki_forward(&mut g, x, k).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn conv_ki_gradients_match_finite_differences() {
        use crate::tensor::grad_check_multi;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Both the native length (N == N0) and a resampled length (N != N0).
        for n in [4usize, 7] {
            let x0 = rand_t(&mut rng, &[3, 2, n]);
            let k0 = rand_t(&mut rng, &[1, 1, 4, 2]);
            let report = grad_check_multi(
                |g, vars| {
                    let y = conv_ki_forward(g, vars[0], vars[1])?;
                    g.sum(y)
                },
                &[x0.clone(), k0.clone()],
                1e-4,
            )
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "n={n}: err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn attention_uniform_when_phi_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.input(rand_t(&mut rng, &[5, 3])).unwrap();
        let phi = g.input(Tensor::zeros(vec![3, 1])).unwrap();
        let psi = g.input(rand_t(&mut rng, &[3, 1])).unwrap();
        let w = nl_attention(&mut g, x, phi, psi).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_position_is_one() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[0.3, -0.7])).unwrap();
        let phi = g.input(t(&[2, 1], &[1.0, 0.5])).unwrap();
        let psi = g.input(t(&[2, 1], &[-0.2, 0.9])).unwrap();
        let w = nl_attention(&mut g, x, phi, psi).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
    }

    #[test]
    fn attention_two_positions_match_scalar_exponentials() {
        // x=[1,2], identity projections: row 0 = softmax([1,2]).
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let ident = g.input(t(&[1, 1], &[1.0])).unwrap();
        let w = nl_attention(&mut g, x, ident, ident).unwrap();
        let e1 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        let row0 = [e1 / (e1 + e2), e2 / (e1 + e2)];
        assert!((row0[0] - 0.26894).abs() < 1e-5);
        assert!((g.value(w).data()[0] - row0[0]).abs() < 1e-12);
        assert!((g.value(w).data()[1] - row0[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_over_seeded_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let p = rng.gen_range(1..6);
            let c = rng.gen_range(1..4);
            let ce = embed_width(c);
            let mut g = Graph::<f64>::new();
            let x = g.input(rand_t(&mut rng, &[p, c])).unwrap();
            let phi = g.input(rand_t(&mut rng, &[c, ce])).unwrap();
            let psi = g.input(rand_t(&mut rng, &[c, ce])).unwrap();
            let w = nl_attention(&mut g, x, phi, psi).unwrap();
            for row in g.value(w).data().chunks(p) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_theta_block_is_bitwise_identity_in_both_scopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for scope in [NlScope::Segment, NlScope::Subject] {
            let params: NlBlockParams<f64> = NlBlockParams::new(4, scope, &mut rng);
            assert!(params.theta_w.data().iter().all(|&v| v == 0.0));
            let x0 = rand_t(&mut rng, &[3, 2, 2, 4]);
            let mut g = Graph::new();
            let x = g.input(x0.clone()).unwrap();
            let vars = NlBlockVars::register(&mut g, &params, false).unwrap();
            let z = nl_block_forward(&mut g, x, &vars).unwrap();
            for (a, b) in g.value(z).data().iter().zip(x0.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn scopes_coincide_for_single_element_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seg_params: NlBlockParams<f64> =
            NlBlockParams::new(4, NlScope::Segment, &mut rng);
        seg_params.theta_w = rand_t(&mut rng, &[2, 4]);
        let mut sub_params = seg_params.clone();
        sub_params.scope = NlScope::Subject;
        let x0 = rand_t(&mut rng, &[1, 3, 2, 4]);
        let run = |params: &NlBlockParams<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.input(x0.clone()).unwrap();
            let vars = NlBlockVars::register(&mut g, params, false).unwrap();
            let z = nl_block_forward(&mut g, x, &vars).unwrap();
            g.value(z).data().to_vec()
        };
        let seg = run(&seg_params);
        let sub = run(&sub_params);
        assert!(seg
            .iter()
            .zip(&sub)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn block_matches_brute_force_evaluation() {
        // Spec'd two-position case: x=[1,2], C=1, identity projections.
        let x0 = t(&[1, 1, 2, 1], &[1.0, 2.0]);
        let params = NlBlockParams {
            phi_w: t(&[1, 1], &[1.0]),
            psi_w: t(&[1, 1], &[1.0]),
            g_w: t(&[1, 1], &[1.0]),
            theta_w: t(&[1, 1], &[1.0]),
            scope: NlScope::Segment,
        };
        let expected = nl_oracle(
            x0.data(),
            2,
            1,
            1,
            params.phi_w.data(),
            params.psi_w.data(),
            params.g_w.data(),
            params.theta_w.data(),
        );
        // Hand check of the first position: weights softmax([1,2]), so
        // y_0 = 0.26894*1 + 0.73106*2 = 1.73106 and z_0 = 2.73106.
        assert!((expected[0] - 2.73106).abs() < 1e-4);
        let mut g = Graph::new();
        let x = g.input(x0).unwrap();
        let vars = NlBlockVars::register(&mut g, &params, false).unwrap();
        let z = nl_block_forward(&mut g, x, &vars).unwrap();
        for (a, b) in g.value(z).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn block_matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (p, c) = (rng.gen_range(2..6), rng.gen_range(1..5));
            let ce = embed_width(c);
            let x0 = rand_t(&mut rng, &[1, p, 1, c]);
            let params = NlBlockParams {
                phi_w: rand_t(&mut rng, &[c, ce]),
                psi_w: rand_t(&mut rng, &[c, ce]),
                g_w: rand_t(&mut rng, &[c, ce]),
                theta_w: rand_t(&mut rng, &[ce, c]),
                scope: NlScope::Segment,
            };
            let expected = nl_oracle(
                x0.data(),
                p,
                c,
                ce,
                params.phi_w.data(),
                params.psi_w.data(),
                params.g_w.data(),
                params.theta_w.data(),
            );
            let mut g = Graph::new();
            let x = g.input(x0).unwrap();
            let vars = NlBlockVars::register(&mut g, &params, false).unwrap();
            let z = nl_block_forward(&mut g, x, &vars).unwrap();
            for (a, b) in g.value(z).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn subject_scope_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = 16;
        let (h, w, c) = (2, 2, 4);
        let mut params: NlBlockParams<f64> = NlBlockParams::new(c, NlScope::Subject, &mut rng);
        params.theta_w = rand_t(&mut rng, &[embed_width(c), c]);
        let x0 = rand_t(&mut rng, &[b, h, w, c]);
        let run = |x: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let vars = NlBlockVars::register(&mut g, &params, false).unwrap();
            let z = nl_block_forward(&mut g, xv, &vars).unwrap();
            g.value(z).data().to_vec()
        };
        let base = run(&x0);

        // Reverse the batch order and compare the permuted outputs.
        let stride = h * w * c;
        let mut permuted = vec![0.0; x0.numel()];
        for i in 0..b {
            permuted[i * stride..(i + 1) * stride]
                .copy_from_slice(&x0.data()[(b - 1 - i) * stride..(b - i) * stride]);
        }
        let permuted = Tensor::new(vec![b, h, w, c], permuted).unwrap();
        let out = run(&permuted);
        for i in 0..b {
            for k in 0..stride {
                let a = base[(b - 1 - i) * stride + k];
                let o = out[i * stride + k];
                assert!((a - o).abs() < 1e-6, "{a} vs {o}");
            }
        }
    }

    #[test]
    fn nl_block_gradients_match_finite_differences() {
        use crate::tensor::grad_check_multi;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for scope in [NlScope::Segment, NlScope::Subject] {
            for b in [1usize, 3] {
                let c = 4;
                let ce = embed_width(c);
                let points = [
                    rand_t(&mut rng, &[b, 2, 2, c]),
                    rand_t(&mut rng, &[c, ce]),
                    rand_t(&mut rng, &[c, ce]),
                    rand_t(&mut rng, &[c, ce]),
                    rand_t(&mut rng, &[ce, c]),
                ];
                let report = grad_check_multi(
                    |g, vars| {
                        let vars_block = NlBlockVars {
                            phi_w: vars[1],
                            psi_w: vars[2],
                            g_w: vars[3],
                            theta_w: vars[4],
                            scope,
                        };
                        let z = nl_block_forward(g, vars[0], &vars_block)?;
                        let sq = g.mul(z, z)?;
                        g.sum(sq)
                    },
                    &points,
                    1e-4,
                )
                .unwrap();
                assert!(
                    report.max_rel_err <= 1e-4,
                    "{scope:?} b={b}: err {}",
                    report.max_rel_err
                );
            }
        }
    }
}
