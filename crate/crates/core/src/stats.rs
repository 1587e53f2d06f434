//! Global style extraction: four channel-wise statistics, the dynamic
//! affine network that turns a feature map into per-channel weights and
//! biases, and their weighted aggregation into a global style descriptor.

use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::{ConvWeights, Tensor};

/// Per-channel (mean, std, skewness, kurtosis), each shaped (N, C, 1, 1).
///
/// Skewness and kurtosis are standardized central moments with an
/// eps-guarded denominator, so a constant channel yields 0 for both.
/// Kurtosis is raw (non-excess): a normal channel gives ~3.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Tensor,
    pub std: Tensor,
    pub skew: Tensor,
    pub kurt: Tensor,
}

/// Channel-wise statistics from raw moments accumulated in f64.
///
/// Uses the one-pass raw-moment route (E[x], E[x^2], E[x^3], E[x^4]) with
/// algebraic standardization, which keeps it independent from the two-pass
/// centered route in [`stats_oracle`].
pub fn channel_statistics(x: &Tensor, eps: f32) -> Result<ChannelStats> {
    let (n, c, h, w) = x.dims4()?;
    let hw = (h * w) as f64;
    let xd = x.data();
    let mut mean = Vec::with_capacity(n * c);
    let mut std = Vec::with_capacity(n * c);
    let mut skew = Vec::with_capacity(n * c);
    let mut kurt = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let slice = &xd[nc * h * w..(nc + 1) * h * w];
        let (mut m1, mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for &v in slice {
            let v = f64::from(v);
            let v2 = v * v;
            m1 += v;
            m2 += v2;
            m3 += v2 * v;
            m4 += v2 * v2;
        }
        m1 /= hw;
        m2 /= hw;
        m3 /= hw;
        m4 /= hw;
        let var = (m2 - m1 * m1).max(0.0);
        let sigma = var.sqrt();
        let denom = sigma + f64::from(eps);
        // central moments from raw moments
        let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1 * m1 * m1;
        let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1 * m1 * m1 * m1;
        mean.push(m1 as f32);
        std.push(sigma as f32);
        skew.push((c3 / (denom * denom * denom)) as f32);
        kurt.push((c4 / (denom * denom * denom * denom)) as f32);
    }
    Ok(ChannelStats {
        mean: Tensor::new(&[n, c, 1, 1], mean)?,
        std: Tensor::new(&[n, c, 1, 1], std)?,
        skew: Tensor::new(&[n, c, 1, 1], skew)?,
        kurt: Tensor::new(&[n, c, 1, 1], kurt)?,
    })
}

/// Brute-force reference: naive two-pass centered moments in f64.
pub fn stats_oracle(x: &Tensor, eps: f64) -> Result<ChannelStats> {
    let (n, c, h, w) = x.dims4()?;
    let hw = (h * w) as f64;
    let xd = x.data();
    let mut mean = Vec::with_capacity(n * c);
    let mut std = Vec::with_capacity(n * c);
    let mut skew = Vec::with_capacity(n * c);
    let mut kurt = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let slice = &xd[nc * h * w..(nc + 1) * h * w];
        let mut mu = 0.0f64;
        for &v in slice {
            mu += f64::from(v);
        }
        mu /= hw;
        let mut var = 0.0f64;
        for &v in slice {
            let d = f64::from(v) - mu;
            var += d * d;
        }
        var /= hw;
        let sigma = var.sqrt();
        let denom = sigma + eps;
        let (mut g1, mut g2) = (0.0f64, 0.0f64);
        for &v in slice {
            let z = (f64::from(v) - mu) / denom;
            g1 += z * z * z;
            g2 += z * z * z * z;
        }
        mean.push(mu as f32);
        std.push(sigma as f32);
        skew.push((g1 / hw) as f32);
        kurt.push((g2 / hw) as f32);
    }
    Ok(ChannelStats {
        mean: Tensor::new(&[n, c, 1, 1], mean)?,
        std: Tensor::new(&[n, c, 1, 1], std)?,
        skew: Tensor::new(&[n, c, 1, 1], skew)?,
        kurt: Tensor::new(&[n, c, 1, 1], kurt)?,
    })
}

/// Per-channel weight and bias produced by the dynamic network, each
/// shaped (N, C, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAffine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// W = global-avg-pool(conv_w(K)), b = global-max-pool(conv_b(K)), with two
/// independent depthwise-separable convolution parameter sets.
pub fn dynamic_affine(
    k: &Tensor,
    conv_w: &ConvWeights,
    conv_b: &ConvWeights,
) -> Result<DynamicAffine> {
    let mut tape = Tape::new();
    let kid = tape.constant(k.clone());
    let w_nodes = DwConvNodes::constants(&mut tape, conv_w)?;
    let b_nodes = DwConvNodes::constants(&mut tape, conv_b)?;
    let (wid, bid) = taped_dynamic_affine(&mut tape, kid, &w_nodes, &b_nodes)?;
    Ok(DynamicAffine {
        weight: tape.value(wid).clone(),
        bias: tape.value(bid).clone(),
    })
}

/// K_s = sum over the four statistics, in (mean, std, skew, kurt) order,
/// of W_i (*) stat_i (+) b_i.
pub fn aggregate_global_style(
    stats: &ChannelStats,
    affines: &[DynamicAffine; 4],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pairs: Vec<(NodeId, NodeId, NodeId)> = [
        (&stats.mean, &affines[0]),
        (&stats.std, &affines[1]),
        (&stats.skew, &affines[2]),
        (&stats.kurt, &affines[3]),
    ]
    .into_iter()
    .map(|(s, a)| {
        (
            tape.constant(s.clone()),
            tape.constant(a.weight.clone()),
            tape.constant(a.bias.clone()),
        )
    })
    .collect();
    let terms: Vec<(NodeId, NodeId, NodeId)> = pairs;
    let out = taped_aggregate(&mut tape, &terms)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// taped composites (shared by the pure wrappers above and by the HSI module)
// ---------------------------------------------------------------------------

/// Node handles of one depthwise-separable convolution parameter set.
#[derive(Debug, Clone, Copy)]
pub struct DwConvNodes {
    pub depth: NodeId,
    pub point: NodeId,
    pub bias: NodeId,
}

impl DwConvNodes {
    /// Register the parameters as trainable leaves.
    pub fn params(tape: &mut Tape, w: &ConvWeights) -> Result<Self> {
        Self::insert(tape, w, true)
    }

    /// Register the parameters as constants.
    pub fn constants(tape: &mut Tape, w: &ConvWeights) -> Result<Self> {
        Self::insert(tape, w, false)
    }

    fn insert(tape: &mut Tape, w: &ConvWeights, trainable: bool) -> Result<Self> {
        let (depth, point) = match &w.kind {
            crate::tensor::ConvKind::DepthwiseSeparable3x3 { depth, point } => (depth, point),
            other => {
                return Err(crate::error::Error::InvalidConfig {
                    message: format!("expected depthwise-separable conv, got {other:?}"),
                })
            }
        };
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(DwConvNodes {
            depth: reg(depth),
            point: reg(point),
            bias: reg(&w.bias),
        })
    }

    pub fn node_ids(&self) -> [NodeId; 3] {
        [self.depth, self.point, self.bias]
    }
}

/// Reflection-padded depthwise 3x3 followed by pointwise 1x1 with bias.
pub fn taped_dw_conv(tape: &mut Tape, x: NodeId, conv: &DwConvNodes) -> Result<NodeId> {
    let padded = tape.reflect_pad(x, 1)?;
    let mid = tape.dwconv3x3(padded, conv.depth)?;
    tape.conv1x1(mid, conv.point, conv.bias)
}

/// Taped statistic nodes, each (N, C, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct StatNodes {
    pub mean: NodeId,
    pub std: NodeId,
    pub skew: NodeId,
    pub kurt: NodeId,
}

/// Differentiable channel statistics from the tape's primitive ops.
pub fn taped_channel_statistics(tape: &mut Tape, x: NodeId, eps: f32) -> Result<StatNodes> {
    let mean = tape.pool_avg(x)?;
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let var = tape.pool_avg(sq)?;
    let std = tape.sqrt(var);
    let denom = tape.add_scalar(std, eps);
    let z = tape.div(diff, denom)?;
    let z3 = tape.powi(z, 3);
    let skew = tape.pool_avg(z3)?;
    let z4 = tape.powi(z, 4);
    let kurt = tape.pool_avg(z4)?;
    Ok(StatNodes {
        mean,
        std,
        skew,
        kurt,
    })
}

/// W = avg-pool(conv_w(K)), b = max-pool(conv_b(K)).
pub fn taped_dynamic_affine(
    tape: &mut Tape,
    k: NodeId,
    conv_w: &DwConvNodes,
    conv_b: &DwConvNodes,
) -> Result<(NodeId, NodeId)> {
    let w_map = taped_dw_conv(tape, k, conv_w)?;
    let weight = tape.pool_avg(w_map)?;
    let b_map = taped_dw_conv(tape, k, conv_b)?;
    let bias = tape.pool_max(b_map)?;
    Ok((weight, bias))
}

/// Weighted summation of (stat, W, b) terms: sum of W (*) stat (+) b.
/// Terms must already be in (mean, std, skew, kurt) order, restricted to
/// the enabled subset.
pub fn taped_aggregate(tape: &mut Tape, terms: &[(NodeId, NodeId, NodeId)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(stat, weight, bias) in terms {
        let scaled = tape.mul(weight, stat)?;
        let term = tape.add(scaled, bias)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or(crate::error::Error::EmptyStatistics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvKind, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel(values: &[f32]) -> Tensor {
        Tensor::new(&[1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn four_point_channel_moments() {
        let x = channel(&[1.0, 2.0, 3.0, 4.0]);
        let stats = channel_statistics(&x, 1e-8).unwrap();
        assert!((stats.mean.data()[0] - 2.5).abs() < 1e-6);
        assert!((stats.std.data()[0] - 1.25f32.sqrt()).abs() < 1e-6);
        assert!(stats.skew.data()[0].abs() < 1e-6);
        assert!((stats.kurt.data()[0] - 1.64).abs() < 1e-6);
    }

    #[test]
    fn constant_channel_is_all_zero_moments() {
        let x = Tensor::full(&[1, 1, 2, 3], 5.0).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        assert_eq!(stats.mean.data()[0], 5.0);
        assert_eq!(stats.std.data()[0], 0.0);
        assert_eq!(stats.skew.data()[0], 0.0);
        assert_eq!(stats.kurt.data()[0], 0.0);
    }

    #[test]
    fn oracle_hand_case() {
        let x = channel(&[0.0, 0.0, 0.0, 1.0]);
        let stats = stats_oracle(&x, 1e-8).unwrap();
        assert!((stats.mean.data()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn normal_samples_have_zero_skew_and_kurtosis_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        // Box-Muller from uniform pairs
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as f32);
            if data.len() < n {
                data.push((r * theta.sin()) as f32);
            }
        }
        let x = Tensor::new(&[1, 1, 250, 400], data).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        assert!(stats.skew.data()[0].abs() < 0.1, "skew {}", stats.skew.data()[0]);
        assert!(
            (stats.kurt.data()[0] - 3.0).abs() < 0.3,
            "kurt {}",
            stats.kurt.data()[0]
        );
    }

    #[test]
    fn statistics_agree_with_oracle_on_random_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let c = rng.gen_range(1..=4);
            let h = rng.gen_range(1..=8);
            let w = rng.gen_range(1..=8);
            let x = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-3.0..3.0)).unwrap();
            let a = channel_statistics(&x, 1e-8).unwrap();
            let b = stats_oracle(&x, 1e-8).unwrap();
            for (av, bv) in [
                (&a.mean, &b.mean),
                (&a.std, &b.std),
                (&a.skew, &b.skew),
                (&a.kurt, &b.kurt),
            ] {
                for (&x1, &x2) in av.data().iter().zip(bv.data()) {
                    let denom = f64::from(x1.abs().max(x2.abs())).max(1.0);
                    assert!(
                        f64::from((x1 - x2).abs()) / denom <= 1e-5,
                        "{x1} vs {x2}"
                    );
                }
            }
        }
    }

    #[test]
    fn shift_scale_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let (alpha, beta) = (2.5f32, -0.75f32);
        let scaled = crate::tensor::add_scalar(&crate::tensor::mul_scalar(&x, alpha), beta);
        let s0 = channel_statistics(&x, 1e-8).unwrap();
        let s1 = channel_statistics(&scaled, 1e-8).unwrap();
        for i in 0..2 {
            assert!((s1.mean.data()[i] - (alpha * s0.mean.data()[i] + beta)).abs() < 1e-4);
            assert!((s1.std.data()[i] - alpha * s0.std.data()[i]).abs() < 1e-4);
            assert!((s1.skew.data()[i] - s0.skew.data()[i]).abs() < 1e-4);
            assert!((s1.kurt.data()[i] - s0.kurt.data()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn taped_statistics_match_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.gen_range(-2.0..2.0)).unwrap();
        let direct = channel_statistics(&x, 1e-5).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let nodes = taped_channel_statistics(&mut tape, xid, 1e-5).unwrap();
        for (node, want) in [
            (nodes.mean, &direct.mean),
            (nodes.std, &direct.std),
            (nodes.skew, &direct.skew),
            (nodes.kurt, &direct.kurt),
        ] {
            for (&a, &b) in tape.value(node).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    fn identity_dw_conv(c: usize) -> ConvWeights {
        // depth kernel passes the center tap, pointwise is identity
        let depth = Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }).unwrap();
        let point = Tensor::from_fn(&[c, c, 1, 1], |i| {
            if i / c == i % c {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        ConvWeights::depthwise_separable(depth, point, Tensor::zeros(&[c]).unwrap()).unwrap()
    }

    fn zero_dw_conv(c: usize, bias: f32) -> ConvWeights {
        ConvWeights::depthwise_separable(
            Tensor::zeros(&[c, 1, 3, 3]).unwrap(),
            Tensor::zeros(&[c, c, 1, 1]).unwrap(),
            Tensor::full(&[c], bias).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dynamic_affine_identity_conv_on_constant() {
        let k = Tensor::full(&[1, 2, 4, 4], 1.5).unwrap();
        let conv = identity_dw_conv(2);
        let affine = dynamic_affine(&k, &conv, &conv).unwrap();
        for &v in affine.weight.data() {
            assert!((v - 1.5).abs() < 1e-6);
        }
        for &v in affine.bias.data() {
            assert!((v - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn dynamic_affine_zero_conv_passes_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let conv = zero_dw_conv(3, 0.625);
        let affine = dynamic_affine(&k, &conv, &conv).unwrap();
        for &v in affine.weight.data() {
            assert_eq!(v, 0.625);
        }
        for &v in affine.bias.data() {
            assert_eq!(v, 0.625);
        }
    }

    #[test]
    fn dynamic_affine_weight_matches_pooling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let conv_w = identity_dw_conv(2);
        let conv_b = zero_dw_conv(2, 0.0);
        let affine = dynamic_affine(&k, &conv_w, &conv_b).unwrap();
        // identity conv means W is just the per-channel mean of K
        let conv_out = crate::tensor::conv2d(&k, &conv_w).unwrap();
        let (n, c, h, w) = conv_out.dims4().unwrap();
        for nc in 0..n * c {
            let mean: f64 = conv_out.data()[nc * h * w..(nc + 1) * h * w]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>()
                / (h * w) as f64;
            assert!((f64::from(affine.weight.data()[nc]) - mean).abs() < 1e-6);
        }
    }

    fn unit_affine(c: usize) -> DynamicAffine {
        DynamicAffine {
            weight: Tensor::ones(&[1, c, 1, 1]).unwrap(),
            bias: Tensor::zeros(&[1, c, 1, 1]).unwrap(),
        }
    }

    fn zero_affine(c: usize) -> DynamicAffine {
        DynamicAffine {
            weight: Tensor::zeros(&[1, c, 1, 1]).unwrap(),
            bias: Tensor::zeros(&[1, c, 1, 1]).unwrap(),
        }
    }

    #[test]
    fn aggregate_single_identity_term_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        let affines = [unit_affine(3), zero_affine(3), zero_affine(3), zero_affine(3)];
        let ks = aggregate_global_style(&stats, &affines).unwrap();
        assert_eq!(ks.data(), stats.mean.data());
    }

    #[test]
    fn aggregate_all_zero_is_zero() {
        let x = Tensor::ones(&[1, 2, 3, 3]).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        let affines = [zero_affine(2), zero_affine(2), zero_affine(2), zero_affine(2)];
        let ks = aggregate_global_style(&stats, &affines).unwrap();
        for &v in ks.data() {
            assert_eq!(v, 0.0);
        }
    }

    fn random_affine(rng: &mut ChaCha8Rng, c: usize) -> DynamicAffine {
        DynamicAffine {
            weight: Tensor::from_fn(&[1, c, 1, 1], |_| rng.gen_range(0.1..1.0)).unwrap(),
            bias: Tensor::from_fn(&[1, c, 1, 1], |_| rng.gen_range(0.1..1.0)).unwrap(),
        }
    }

    #[test]
    fn aggregate_is_affine_in_the_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        let doubled = ChannelStats {
            mean: crate::tensor::mul_scalar(&stats.mean, 2.0),
            std: crate::tensor::mul_scalar(&stats.std, 2.0),
            skew: crate::tensor::mul_scalar(&stats.skew, 2.0),
            kurt: crate::tensor::mul_scalar(&stats.kurt, 2.0),
        };
        let affines = [
            random_affine(&mut rng, 2),
            random_affine(&mut rng, 2),
            random_affine(&mut rng, 2),
            random_affine(&mut rng, 2),
        ];
        let ks = aggregate_global_style(&stats, &affines).unwrap();
        let ks2 = aggregate_global_style(&doubled, &affines).unwrap();
        // K_s(2 stats) = 2 K_s(stats) - sum of biases
        for i in 0..2 {
            let bias_sum: f32 = affines.iter().map(|a| a.bias.data()[i]).sum();
            let want = 2.0 * ks.data()[i] - bias_sum;
            assert!((ks2.data()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn masking_matches_zeroed_affines_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let stats = channel_statistics(&x, 1e-8).unwrap();
        let a0 = random_affine(&mut rng, 2);
        let a1 = random_affine(&mut rng, 2);
        let a3 = random_affine(&mut rng, 2);
        // skew slot zeroed out entirely
        let full = aggregate_global_style(
            &stats,
            &[a0.clone(), a1.clone(), zero_affine(2), a3.clone()],
        )
        .unwrap();

        // subset aggregation over the remaining three
        let mut tape = Tape::new();
        let terms: Vec<(NodeId, NodeId, NodeId)> = [
            (&stats.mean, &a0),
            (&stats.std, &a1),
            (&stats.kurt, &a3),
        ]
        .into_iter()
        .map(|(s, a)| {
            (
                tape.constant(s.clone()),
                tape.constant(a.weight.clone()),
                tape.constant(a.bias.clone()),
            )
        })
        .collect();
        let out = taped_aggregate(&mut tape, &terms).unwrap();
        assert_eq!(tape.value(out).data(), full.data());
    }

    #[test]
    fn empty_aggregate_rejected() {
        let mut tape = Tape::new();
        assert!(taped_aggregate(&mut tape, &[]).is_err());
    }
}
