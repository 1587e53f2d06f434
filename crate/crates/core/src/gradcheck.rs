//! Named finite-difference checks over every differentiable op and the
//! composite transfer modules. The same registry backs the CLI's gradcheck
//! command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check, NodeId, Tape};
use crate::error::Result;
use crate::stats::{taped_aggregate, taped_channel_statistics, taped_dynamic_affine, DwConvNodes};
use crate::tensor::{ConvKind, Tensor};
use crate::transfer::{
    taped_attention, taped_compute_qkv, taped_cosine_lambda, taped_dual_fuse, taped_hsi_block,
    AttnWeights, HsiBlockNodes, HsiBlockWeights, HsiConfig, PwConvNodes,
};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

const STEP: f32 = 1e-3;

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; one draw per call keeps the stream simple
    let u1: f64 = rng.gen_range(1e-9..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| gauss(rng)).expect("valid shape")
}

/// Entries pushed away from the relu kink: |x| > 0.05.
fn normal_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = gauss(rng);
        if v.abs() < 0.05 {
            v + 0.1 * v.signum().max(0.0).mul_add(2.0, -1.0)
        } else {
            v
        }
    })
    .expect("valid shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.5..2.0)).expect("valid shape")
}

/// Values spaced so that max/argmax stay stable under the probe step.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut offsets: Vec<usize> = (0..numel).collect();
    // deterministic shuffle
    for i in (1..numel).rev() {
        let j = rng.gen_range(0..=i);
        offsets.swap(i, j);
    }
    Tensor::from_fn(shape, |i| offsets[i] as f32 * 0.05 + gauss(rng) * 0.01)
        .expect("valid shape")
}

/// Project a tensor node to a scalar with a fixed random direction, so the
/// check exercises a generic cotangent.
fn project(tape: &mut Tape, out: NodeId, direction: &Tensor) -> Result<NodeId> {
    let d = tape.constant(direction.clone());
    let prod = tape.mul(out, d)?;
    Ok(tape.sum_all(prod))
}

struct Check {
    name: String,
    input: Tensor,
    f: Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>,
}

fn unary_check(
    name: &str,
    input: Tensor,
    direction: Tensor,
    op: impl Fn(&mut Tape, NodeId) -> Result<NodeId> + 'static,
) -> Check {
    Check {
        name: name.to_string(),
        input,
        f: Box::new(move |tape, x| {
            let out = op(tape, x)?;
            project(tape, out, &direction)
        }),
    }
}

fn checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut list = Vec::new();

    // broadcast binary ops against a (N, C, 1, 1) constant
    {
        let shape = [1, 2, 3, 3];
        let dir = normal(&mut rng, &shape);
        let other = normal(&mut rng, &[1, 2, 1, 1]);
        let d2 = dir.clone();
        let o2 = other.clone();
        list.push(Check {
            name: "broadcast_add".into(),
            input: normal(&mut rng, &shape),
            f: Box::new(move |tape, x| {
                let b = tape.constant(o2.clone());
                let out = tape.add(x, b)?;
                project(tape, out, &d2)
            }),
        });
        let d2 = dir.clone();
        let o2 = other.clone();
        list.push(Check {
            name: "broadcast_sub".into(),
            input: normal(&mut rng, &shape),
            f: Box::new(move |tape, x| {
                let b = tape.constant(o2.clone());
                let out = tape.sub(x, b)?;
                project(tape, out, &d2)
            }),
        });
        let d2 = dir.clone();
        let o2 = other.clone();
        list.push(Check {
            name: "broadcast_mul".into(),
            input: normal(&mut rng, &shape),
            f: Box::new(move |tape, x| {
                let b = tape.constant(o2.clone());
                let out = tape.mul(x, b)?;
                project(tape, out, &d2)
            }),
        });
        let denom = Tensor::from_fn(&[1, 2, 1, 1], |_| {
            let v: f32 = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })?;
        let d2 = dir.clone();
        list.push(Check {
            name: "broadcast_div".into(),
            input: normal(&mut rng, &shape),
            f: Box::new(move |tape, x| {
                let b = tape.constant(denom.clone());
                let out = tape.div(x, b)?;
                project(tape, out, &d2)
            }),
        });
    }

    // matrix ops
    {
        let rhs = normal(&mut rng, &[4, 3]);
        let dir = normal(&mut rng, &[4, 3]);
        list.push(Check {
            name: "matmul".into(),
            input: normal(&mut rng, &[4, 4]),
            f: Box::new(move |tape, x| {
                let b = tape.constant(rhs.clone());
                let out = tape.matmul(x, b)?;
                project(tape, out, &dir)
            }),
        });
        let dir = normal(&mut rng, &[3, 3]);
        list.push(unary_check(
            "softmax_rows",
            normal(&mut rng, &[3, 3]),
            dir,
            |t, x| t.softmax_rows(x),
        ));
        let dir = normal(&mut rng, &[4, 3]);
        list.push(unary_check(
            "transpose2",
            normal(&mut rng, &[3, 4]),
            dir,
            |t, x| t.transpose2(x),
        ));
        let dir = normal(&mut rng, &[1, 2, 2, 3]);
        list.push(unary_check(
            "reshape",
            normal(&mut rng, &[1, 3, 2, 2]),
            dir,
            |t, x| t.reshape(x, &[1, 2, 2, 3]),
        ));
    }

    // elementwise maps
    {
        let shape = [1, 2, 3, 3];
        let dir = normal(&mut rng, &shape);
        list.push(unary_check(
            "softmax_channels",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| t.softmax_channels(x),
        ));
        list.push(unary_check(
            "channel_norm",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| t.channel_norm(x, 1e-5),
        ));
        list.push(unary_check(
            "relu",
            normal_off_kink(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.relu(x)),
        ));
        list.push(unary_check(
            "sqrt",
            positive(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.sqrt(x)),
        ));
        list.push(unary_check(
            "exp",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.exp(x)),
        ));
        list.push(unary_check(
            "ln",
            positive(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.ln(x)),
        ));
        list.push(unary_check(
            "sigmoid",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.sigmoid(x)),
        ));
        list.push(unary_check(
            "powi3",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.powi(x, 3)),
        ));
        list.push(unary_check(
            "add_scalar",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.add_scalar(x, 0.7)),
        ));
        list.push(unary_check(
            "mul_scalar",
            normal(&mut rng, &shape),
            dir.clone(),
            |t, x| Ok(t.mul_scalar(x, -1.3)),
        ));
        // interior of the clamp window, margin above the probe step
        let interior = Tensor::from_fn(&shape, |_| rng.gen_range(-0.7..0.7))?;
        list.push(unary_check("clamp", interior, dir.clone(), |t, x| {
            Ok(t.clamp(x, -0.9, 0.9))
        }));
        let off_threshold = Tensor::from_fn(&shape, |_| {
            let v = gauss(&mut rng);
            if (v - 0.1).abs() < 0.05 {
                v + 0.2
            } else {
                v
            }
        })?;
        list.push(unary_check("max_scalar", off_threshold, dir, |t, x| {
            Ok(t.max_scalar(x, 0.1))
        }));
    }

    // convolutions, each differentiated w.r.t. input, kernel, and bias
    {
        let x = normal(&mut rng, &[1, 3, 3, 3]);
        let kernel = normal(&mut rng, &[2, 3, 1, 1]);
        let bias = normal(&mut rng, &[2]);
        let dir = normal(&mut rng, &[1, 2, 3, 3]);
        let (k2, b2, d2) = (kernel.clone(), bias.clone(), dir.clone());
        list.push(Check {
            name: "conv1x1_input".into(),
            input: x.clone(),
            f: Box::new(move |tape, x| {
                let k = tape.constant(k2.clone());
                let b = tape.constant(b2.clone());
                let out = tape.conv1x1(x, k, b)?;
                project(tape, out, &d2)
            }),
        });
        let (x2, b2, d2) = (x.clone(), bias.clone(), dir.clone());
        list.push(Check {
            name: "conv1x1_kernel".into(),
            input: kernel.clone(),
            f: Box::new(move |tape, k| {
                let x = tape.constant(x2.clone());
                let b = tape.constant(b2.clone());
                let out = tape.conv1x1(x, k, b)?;
                project(tape, out, &d2)
            }),
        });
        let (x2, k2, d2) = (x, kernel, dir);
        list.push(Check {
            name: "conv1x1_bias".into(),
            input: bias,
            f: Box::new(move |tape, b| {
                let x = tape.constant(x2.clone());
                let k = tape.constant(k2.clone());
                let out = tape.conv1x1(x, k, b)?;
                project(tape, out, &d2)
            }),
        });
    }
    for stride in [1usize, 2] {
        let in_extent = if stride == 1 { 4 } else { 5 };
        let out_extent = (in_extent - 3) / stride + 1;
        let x = normal(&mut rng, &[1, 2, in_extent, in_extent]);
        let kernel = normal(&mut rng, &[2, 2, 3, 3]);
        let bias = normal(&mut rng, &[2]);
        let dir = normal(&mut rng, &[1, 2, out_extent, out_extent]);
        let (k2, b2, d2) = (kernel.clone(), bias.clone(), dir.clone());
        list.push(Check {
            name: format!("conv3x3_stride{stride}_input"),
            input: x.clone(),
            f: Box::new(move |tape, x| {
                let k = tape.constant(k2.clone());
                let b = tape.constant(b2.clone());
                let out = tape.conv3x3(x, k, b, stride)?;
                project(tape, out, &d2)
            }),
        });
        let (x2, b2, d2) = (x, bias, dir);
        list.push(Check {
            name: format!("conv3x3_stride{stride}_kernel"),
            input: kernel,
            f: Box::new(move |tape, k| {
                let x = tape.constant(x2.clone());
                let b = tape.constant(b2.clone());
                let out = tape.conv3x3(x, k, b, stride)?;
                project(tape, out, &d2)
            }),
        });
    }
    {
        let x = normal(&mut rng, &[1, 2, 4, 4]);
        let depth = normal(&mut rng, &[2, 1, 3, 3]);
        let dir = normal(&mut rng, &[1, 2, 2, 2]);
        let (d2, dir2) = (depth.clone(), dir.clone());
        list.push(Check {
            name: "dwconv3x3_input".into(),
            input: x.clone(),
            f: Box::new(move |tape, x| {
                let k = tape.constant(d2.clone());
                let out = tape.dwconv3x3(x, k)?;
                project(tape, out, &dir2)
            }),
        });
        let x2 = x;
        list.push(Check {
            name: "dwconv3x3_kernel".into(),
            input: depth,
            f: Box::new(move |tape, k| {
                let x = tape.constant(x2.clone());
                let out = tape.dwconv3x3(x, k)?;
                project(tape, out, &dir)
            }),
        });
    }
    // the composite depthwise-separable conv2d (reflection pad + depth + point)
    {
        let x = normal(&mut rng, &[1, 2, 3, 3]);
        let depth = normal(&mut rng, &[2, 1, 3, 3]);
        let point = normal(&mut rng, &[2, 2, 1, 1]);
        let bias = normal(&mut rng, &[2]);
        let dir = normal(&mut rng, &[1, 2, 3, 3]);
        let (dk, pk, bk, dd) = (depth.clone(), point.clone(), bias.clone(), dir.clone());
        list.push(Check {
            name: "conv2d_dw_separable_input".into(),
            input: x.clone(),
            f: Box::new(move |tape, x| {
                let conv = DwConvNodes {
                    depth: tape.constant(dk.clone()),
                    point: tape.constant(pk.clone()),
                    bias: tape.constant(bk.clone()),
                };
                let out = crate::stats::taped_dw_conv(tape, x, &conv)?;
                project(tape, out, &dd)
            }),
        });
        let (x2, pk, bk, dd) = (x.clone(), point.clone(), bias.clone(), dir.clone());
        list.push(Check {
            name: "conv2d_dw_separable_depth".into(),
            input: depth.clone(),
            f: Box::new(move |tape, d| {
                let x = tape.constant(x2.clone());
                let conv = DwConvNodes {
                    depth: d,
                    point: tape.constant(pk.clone()),
                    bias: tape.constant(bk.clone()),
                };
                let out = crate::stats::taped_dw_conv(tape, x, &conv)?;
                project(tape, out, &dd)
            }),
        });
        let (x2, dk, bk) = (x, depth, bias);
        list.push(Check {
            name: "conv2d_dw_separable_point".into(),
            input: point,
            f: Box::new(move |tape, p| {
                let x = tape.constant(x2.clone());
                let conv = DwConvNodes {
                    depth: tape.constant(dk.clone()),
                    point: p,
                    bias: tape.constant(bk.clone()),
                };
                let out = crate::stats::taped_dw_conv(tape, x, &conv)?;
                project(tape, out, &dd)
            }),
        });
    }

    // pooling, resampling, padding, reductions
    {
        let dir = normal(&mut rng, &[1, 2, 1, 1]);
        list.push(unary_check(
            "pool_avg",
            normal(&mut rng, &[1, 2, 3, 3]),
            dir.clone(),
            |t, x| t.pool_avg(x),
        ));
        list.push(unary_check(
            "pool_max",
            well_separated(&mut rng, &[1, 2, 3, 3]),
            dir,
            |t, x| t.pool_max(x),
        ));
        let dir = normal(&mut rng, &[1, 2, 2, 2]);
        list.push(unary_check(
            "avgpool2x2",
            normal(&mut rng, &[1, 2, 4, 4]),
            dir.clone(),
            |t, x| t.avgpool2x2(x),
        ));
        list.push(unary_check(
            "maxpool2x2",
            well_separated(&mut rng, &[1, 2, 4, 4]),
            dir,
            |t, x| t.maxpool2x2(x),
        ));
        let dir = normal(&mut rng, &[1, 2, 6, 6]);
        list.push(unary_check(
            "upsample2x",
            normal(&mut rng, &[1, 2, 3, 3]),
            dir,
            |t, x| t.upsample2x(x),
        ));
        let dir = normal(&mut rng, &[1, 2, 5, 5]);
        list.push(unary_check(
            "reflect_pad",
            normal(&mut rng, &[1, 2, 3, 3]),
            dir,
            |t, x| t.reflect_pad(x, 1),
        ));
        let dir = normal(&mut rng, &[2, 1, 1, 1]);
        list.push(unary_check(
            "sum_chw",
            normal(&mut rng, &[2, 2, 2, 2]),
            dir,
            |t, x| t.sum_chw(x),
        ));
        list.push(Check {
            name: "sum_all".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(|tape, x| Ok(tape.sum_all(x))),
        });
        let dir = normal(&mut rng, &[1, 2, 2, 2]);
        list.push(unary_check(
            "batch_slice",
            normal(&mut rng, &[3, 2, 2, 2]),
            dir,
            |t, x| t.batch_slice(x, 1),
        ));
        let other = normal(&mut rng, &[1, 2, 2, 2]);
        let dir = normal(&mut rng, &[2, 2, 2, 2]);
        list.push(Check {
            name: "batch_concat".into(),
            input: normal(&mut rng, &[1, 2, 2, 2]),
            f: Box::new(move |tape, x| {
                let o = tape.constant(other.clone());
                let out = tape.batch_concat(&[x, o])?;
                project(tape, out, &dir)
            }),
        });
    }

    // style statistics composites
    {
        let dirs: Vec<Tensor> = (0..4).map(|_| normal(&mut rng, &[1, 2, 1, 1])).collect();
        list.push(Check {
            name: "channel_statistics".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, x| {
                let st = taped_channel_statistics(tape, x, 1e-5)?;
                let mut acc = None;
                for (node, dir) in [st.mean, st.std, st.skew, st.kurt].into_iter().zip(&dirs) {
                    let p = project(tape, node, dir)?;
                    acc = Some(match acc {
                        None => p,
                        Some(prev) => tape.add(prev, p)?,
                    });
                }
                Ok(acc.expect("four stats"))
            }),
        });

        let conv_w = HsiBlockWeights::seeded(2, &mut rng).dynamic[0].clone();
        let dir_w = normal(&mut rng, &[1, 2, 1, 1]);
        let dir_b = normal(&mut rng, &[1, 2, 1, 1]);
        list.push(Check {
            name: "dynamic_affine".into(),
            input: normal(&mut rng, &[1, 2, 4, 4]),
            f: Box::new(move |tape, k| {
                let wn = DwConvNodes::constants(tape, &conv_w.weight_path)?;
                let bn = DwConvNodes::constants(tape, &conv_w.bias_path)?;
                let (w, b) = taped_dynamic_affine(tape, k, &wn, &bn)?;
                let pw = project(tape, w, &dir_w)?;
                let pb = project(tape, b, &dir_b)?;
                tape.add(pw, pb)
            }),
        });

        let weight = normal(&mut rng, &[1, 2, 1, 1]);
        let bias = normal(&mut rng, &[1, 2, 1, 1]);
        let dir = normal(&mut rng, &[1, 2, 1, 1]);
        list.push(Check {
            name: "aggregate_global_style".into(),
            input: normal(&mut rng, &[1, 2, 1, 1]),
            f: Box::new(move |tape, stat| {
                let w = tape.constant(weight.clone());
                let b = tape.constant(bias.clone());
                let out = taped_aggregate(tape, &[(stat, w, b)])?;
                project(tape, out, &dir)
            }),
        });
    }

    // transfer composites
    {
        let w = HsiBlockWeights::seeded(2, &mut rng);
        let f_s = normal(&mut rng, &[1, 2, 3, 3]);
        let dirs: Vec<Tensor> = (0..3).map(|_| normal(&mut rng, &[1, 2, 3, 3])).collect();
        let (w2, fs2) = (w.clone(), f_s.clone());
        list.push(Check {
            name: "compute_qkv".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, f_c| {
                let fs = tape.constant(fs2.clone());
                let qn = PwConvNodes::insert(tape, &w2.query, false)?;
                let kn = PwConvNodes::insert(tape, &w2.key, false)?;
                let vn = PwConvNodes::insert(tape, &w2.value, false)?;
                let (q, k, v) = taped_compute_qkv(tape, f_c, fs, &qn, &kn, &vn, 1e-5)?;
                let mut acc = None;
                for (node, dir) in [q, k, v].into_iter().zip(&dirs) {
                    let p = project(tape, node, dir)?;
                    acc = Some(match acc {
                        None => p,
                        Some(prev) => tape.add(prev, p)?,
                    });
                }
                Ok(acc.expect("three projections"))
            }),
        });

        let k_const = normal(&mut rng, &[1, 2, 4, 4]);
        list.push(Check {
            name: "cosine_lambda".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, q| {
                let k = tape.constant(k_const.clone());
                let lam = taped_cosine_lambda(tape, q, k)?;
                Ok(tape.sum_all(lam))
            }),
        });

        let k_s = normal(&mut rng, &[1, 2, 1, 1]);
        let dir = normal(&mut rng, &[1, 2, 3, 3]);
        list.push(Check {
            name: "dual_relation_fuse".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, q| {
                let ks = tape.constant(k_s.clone());
                let lam = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.37).expect("scalar"));
                let out = taped_dual_fuse(tape, q, ks, lam)?;
                project(tape, out, &dir)
            }),
        });

        let attn = AttnWeights::seeded(2, &mut rng);
        let f_s_attn = normal(&mut rng, &[1, 2, 2, 2]);
        let dir = normal(&mut rng, &[1, 2, 3, 3]);
        let (a2, fs2, d2) = (attn.clone(), f_s_attn.clone(), dir.clone());
        list.push(Check {
            name: "self_attention_content".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, f_c| {
                let fs = tape.constant(fs2.clone());
                let qn = PwConvNodes::insert(tape, &a2.query, false)?;
                let kn = PwConvNodes::insert(tape, &a2.key, false)?;
                let vn = PwConvNodes::insert(tape, &a2.value, false)?;
                let on = PwConvNodes::insert(tape, &a2.output, false)?;
                let out = taped_attention(tape, f_c, fs, &qn, &kn, &vn, &on, 1e-5)?;
                project(tape, out, &d2)
            }),
        });
        let f_c_attn = normal(&mut rng, &[1, 2, 3, 3]);
        list.push(Check {
            name: "self_attention_style".into(),
            input: f_s_attn,
            f: Box::new(move |tape, f_s| {
                let fc = tape.constant(f_c_attn.clone());
                let qn = PwConvNodes::insert(tape, &attn.query, false)?;
                let kn = PwConvNodes::insert(tape, &attn.key, false)?;
                let vn = PwConvNodes::insert(tape, &attn.value, false)?;
                let on = PwConvNodes::insert(tape, &attn.output, false)?;
                let out = taped_attention(tape, fc, f_s, &qn, &kn, &vn, &on, 1e-5)?;
                project(tape, out, &dir)
            }),
        });

        let f_s_hsi = normal(&mut rng, &[1, 2, 3, 3]);
        let dir = normal(&mut rng, &[1, 2, 3, 3]);
        let cfg = HsiConfig {
            block_count: 1,
            ..HsiConfig::default()
        };
        let (w2, fs2, d2) = (w.clone(), f_s_hsi.clone(), dir.clone());
        list.push(Check {
            name: "hsi_forward_content".into(),
            input: normal(&mut rng, &[1, 2, 3, 3]),
            f: Box::new(move |tape, f_c| {
                let fs = tape.constant(fs2.clone());
                let nodes = HsiBlockNodes::insert(tape, &w2, false)?;
                let out = taped_hsi_block(tape, f_c, fs, &nodes, &cfg)?;
                project(tape, out, &d2)
            }),
        });
        let f_c_hsi = normal(&mut rng, &[1, 2, 3, 3]);
        let (w2, d2) = (w.clone(), dir.clone());
        list.push(Check {
            name: "hsi_forward_style".into(),
            input: f_s_hsi.clone(),
            f: Box::new(move |tape, f_s| {
                let fc = tape.constant(f_c_hsi.clone());
                let nodes = HsiBlockNodes::insert(tape, &w2, false)?;
                let out = taped_hsi_block(tape, fc, f_s, &nodes, &cfg)?;
                project(tape, out, &d2)
            }),
        });

        // every weight tensor of the block, one check each
        let mut paths = Vec::new();
        w.visit(&mut |name, t| paths.push((name, t.clone())));
        let f_c_w = normal(&mut rng, &[1, 2, 3, 3]);
        let f_s_w = normal(&mut rng, &[1, 2, 3, 3]);
        for (idx, (path, tensor)) in paths.into_iter().enumerate() {
            let (w2, fc2, fs2, d2) = (w.clone(), f_c_w.clone(), f_s_w.clone(), dir.clone());
            list.push(Check {
                name: format!("hsi_weights.{path}"),
                input: tensor,
                f: Box::new(move |tape, param| {
                    let fc = tape.constant(fc2.clone());
                    let fs = tape.constant(fs2.clone());
                    let nodes = insert_block_with_param(tape, &w2, idx, param)?;
                    let out = taped_hsi_block(tape, fc, fs, &nodes, &cfg)?;
                    project(tape, out, &d2)
                }),
            });
        }
    }

    Ok(list)
}

/// Insert block weights as constants except the tensor at visit index
/// `target`, which is wired to the provided param node.
fn insert_block_with_param(
    tape: &mut Tape,
    w: &HsiBlockWeights,
    target: usize,
    param: NodeId,
) -> Result<HsiBlockNodes> {
    let mut counter = 0usize;
    let mut next = |tape: &mut Tape, t: &Tensor| {
        let id = if counter == target {
            param
        } else {
            tape.constant(t.clone())
        };
        counter += 1;
        id
    };
    let mut pw = |tape: &mut Tape, conv: &crate::tensor::ConvWeights| -> Result<PwConvNodes> {
        let kernel = match &conv.kind {
            ConvKind::Pointwise1x1 { kernel } => kernel,
            _ => unreachable!("block projections are pointwise"),
        };
        Ok(PwConvNodes {
            kernel: next(tape, kernel),
            bias: next(tape, &conv.bias),
        })
    };
    let query = pw(tape, &w.query)?;
    let key = pw(tape, &w.key)?;
    let value = pw(tape, &w.value)?;
    let output = pw(tape, &w.output)?;
    let mut dw = |tape: &mut Tape, conv: &crate::tensor::ConvWeights| -> DwConvNodes {
        let (depth, point) = match &conv.kind {
            ConvKind::DepthwiseSeparable3x3 { depth, point } => (depth, point),
            _ => unreachable!("dynamic convs are depthwise separable"),
        };
        DwConvNodes {
            depth: next(tape, depth),
            point: next(tape, point),
            bias: next(tape, &conv.bias),
        }
    };
    let dynamic = std::array::from_fn(|i| {
        (
            dw(tape, &w.dynamic[i].weight_path),
            dw(tape, &w.dynamic[i].bias_path),
        )
    });
    Ok(HsiBlockNodes {
        query,
        key,
        value,
        output,
        dynamic,
    })
}

/// Run every registered check at the given tolerance with central
/// differences of step 1e-3.
pub fn run_all(seed: u64, tol: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for check in checks(seed)? {
        let report = finite_diff_check(check.f.as_ref(), &check.input, STEP, tol)?;
        rows.push(CheckRow {
            name: check.name,
            max_rel_err: report.max_rel_err,
            pass: report.pass,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_at_1e3() {
        let rows = run_all(42, 1e-3).unwrap();
        assert!(rows.len() > 40, "registry has {} checks", rows.len());
        let failures: Vec<String> = rows
            .iter()
            .filter(|r| !r.pass)
            .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_err))
            .collect();
        assert!(failures.is_empty(), "failed checks: {failures:?}");
    }

    #[test]
    fn impossible_tolerance_fails_and_reports_error() {
        let rows = run_all(42, 1e-14).unwrap();
        assert!(rows.iter().any(|r| !r.pass));
        for r in rows.iter().filter(|r| !r.pass) {
            assert!(r.max_rel_err > 0.0);
        }
    }

    #[test]
    fn runs_are_deterministic_for_a_seed() {
        let a = run_all(7, 1e-3).unwrap();
        let b = run_all(7, 1e-3).unwrap();
        let fmt = |rows: &[CheckRow]| {
            rows.iter()
                .map(|r| format!("{}:{:.17e}", r.name, r.max_rel_err))
                .collect::<Vec<_>>()
        };
        assert_eq!(fmt(&a), fmt(&b));
    }
}
