//! Seeded gradient-check suites behind the `gradcheck` command.
//!
//! Every check runs in 64-bit mode against central finite differences at
//! seeded random points, and must stay within [`TOLERANCE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{conv_ki_forward, embed_width, nl_block_forward, NlBlockVars, NlScope};
use crate::model::{build_model, forward, ModelConfig, ModelVars, Variant};
use crate::tensor::{grad_check_multi, Graph, Padding, Tensor, VarId};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Human-readable pointer at the worst coordinate.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub const SCOPES: [&str; 5] = ["all", "conv-ki", "nl-seg", "nl-sub", "model"];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn check<F>(name: &str, points: &[Tensor<f64>], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let report = grad_check_multi(f, points, 1e-4)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        worst: format!(
            "input {} coordinate {}",
            report.worst_input, report.worst_coord
        ),
    })
}

fn basic_op_checks(results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for (i, padding) in [(0usize, Padding::Same), (1, Padding::Valid)] {
        let points = [rand_t(&mut rng, &[5, 4, 2]), rand_t(&mut rng, &[3, 3, 2, 3])];
        let name = format!("conv2d/{}", if i == 0 { "same" } else { "valid" });
        results.push(check(&name, &points, |g, v| {
            let y = g.conv2d(v[0], v[1], padding)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })?);
    }
    let points = [
        rand_t(&mut rng, &[3, 5]),
        rand_t(&mut rng, &[5, 4]),
        rand_t(&mut rng, &[4]),
    ];
    results.push(check("dense", &points, |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    })?);
    let points = [rand_t(&mut rng, &[2, 4])];
    results.push(check("softmax+cross_entropy", &points, |g, v| {
        let s = g.softmax(v[0], 1)?;
        let sq = g.mul(s, s)?;
        let a = g.sum(sq)?;
        let ce = g.cross_entropy(v[0], &[2, 0])?;
        g.add(a, ce)
    })?);
    let points = [rand_t(&mut rng, &[5, 5, 2])];
    results.push(check("maxpool+relu", &points, |g, v| {
        let r = g.relu(v[0])?;
        let p = g.maxpool2d(r)?;
        let sq = g.mul(p, p)?;
        g.sum(sq)
    })?);
    Ok(())
}

fn conv_ki_checks(results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    // Native length and two resampled lengths, through the interpolation.
    for n in [4usize, 6, 3] {
        let points = [rand_t(&mut rng, &[4, 3, n]), rand_t(&mut rng, &[1, 1, 4, 2])];
        let name = format!("conv-ki/N={n}{}", if n == 4 { " (native)" } else { "" });
        results.push(check(&name, &points, |g, v| {
            let y = conv_ki_forward(g, v[0], v[1])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })?);
    }
    Ok(())
}

fn nl_checks(scope: NlScope, results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(match scope {
        NlScope::Segment => 303,
        NlScope::Subject => 404,
    });
    for b in [1usize, 3] {
        let c = 4;
        let ce = embed_width(c);
        let points = [
            rand_t(&mut rng, &[b, 3, 2, c]),
            rand_t(&mut rng, &[c, ce]),
            rand_t(&mut rng, &[c, ce]),
            rand_t(&mut rng, &[c, ce]),
            rand_t(&mut rng, &[ce, c]),
        ];
        let name = format!("nl-{}/B={b}", scope.as_str());
        results.push(check(&name, &points, |g, v| {
            let block = NlBlockVars {
                phi_w: v[1],
                psi_w: v[2],
                g_w: v[3],
                theta_w: v[4],
                scope,
            };
            let z = nl_block_forward(g, v[0], &block)?;
            let sq = g.mul(z, z)?;
            g.sum(sq)
        })?);
    }
    Ok(())
}

fn model_checks(results: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for variant in [Variant::Baseline, Variant::SegNl1, Variant::SubNl1] {
        let config = ModelConfig {
            variant,
            conv_ki_filters: 2,
            block_channels: [2, 2, 2, 2],
            fc_width: 8,
            native_frames: 4,
            input_rows: 8,
            input_cols: 6,
            seed: 1,
            ..Default::default()
        };
        let mut params = build_model::<f64>(&config)?;
        // A generic point: random weights, positive biases so no ReLU
        // pre-activation sits on its kink or goes entirely dead.
        for (name, t) in params.named_tensors_mut() {
            if name.ends_with(".bias") {
                t.fill_uniform(&mut rng, 0.05);
                for v in t.data_mut() {
                    *v += 0.2;
                }
            } else {
                t.fill_uniform(&mut rng, 0.6);
            }
        }
        let mut points: Vec<Tensor<f64>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let mut batch = rand_t(&mut rng, &[2, 8, 6, 4]);
        for v in batch.data_mut() {
            *v = (*v + 1.0) / 2.0;
        }
        points.push(batch);
        let labels = [1usize, 3];
        let cfg = config.clone();
        results.push(check(
            &format!("model/{variant}"),
            &points,
            move |g, vars| {
                let (param_vars, batch_var) = vars.split_at(vars.len() - 1);
                let mut iter = param_vars.iter().copied();
                let mv = ModelVars {
                    conv_ki: iter.next().unwrap(),
                    blocks: (0..4)
                        .map(|_| (iter.next().unwrap(), iter.next().unwrap()))
                        .collect(),
                    nl_blocks: cfg
                        .variant
                        .nl_placements()
                        .into_iter()
                        .map(|(idx, scope)| {
                            (
                                idx,
                                NlBlockVars {
                                    phi_w: iter.next().unwrap(),
                                    psi_w: iter.next().unwrap(),
                                    g_w: iter.next().unwrap(),
                                    theta_w: iter.next().unwrap(),
                                    scope,
                                },
                            )
                        })
                        .collect(),
                    fc1_weights: iter.next().unwrap(),
                    fc1_bias: iter.next().unwrap(),
                    fc2_weights: iter.next().unwrap(),
                    fc2_bias: iter.next().unwrap(),
                };
                let out = forward(g, &mv, &cfg, batch_var[0])?;
                g.cross_entropy(out, &labels)
            },
        )?);
    }
    Ok(())
}

/// Runs the checks of one scope (`all`, `conv-ki`, `nl-seg`, `nl-sub`,
/// `model`).
pub fn run_scope(scope: &str) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    match scope {
        "all" => {
            basic_op_checks(&mut results)?;
            conv_ki_checks(&mut results)?;
            nl_checks(NlScope::Segment, &mut results)?;
            nl_checks(NlScope::Subject, &mut results)?;
            model_checks(&mut results)?;
        }
        "conv-ki" => conv_ki_checks(&mut results)?,
        "nl-seg" => nl_checks(NlScope::Segment, &mut results)?,
        "nl-sub" => nl_checks(NlScope::Subject, &mut results)?,
        "model" => model_checks(&mut results)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck scope `{other}` (expected one of {SCOPES:?})"
            )))
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes() {
        for scope in ["conv-ki", "nl-seg", "nl-sub", "model"] {
            for r in run_scope(scope).unwrap() {
                assert!(r.passed(), "{}: err {} at {}", r.name, r.max_rel_err, r.worst);
            }
        }
    }

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(run_scope("everything").is_err());
    }
}
