//! Encoder-decoder frame: feature extraction with four named taps, the
//! injector chain at the deepest tap, and image reconstruction.
//!
//! Two encoder modes exist. `Mini` (channels 16/32/64/128) is seeded and
//! self-contained; its downsampling uses stride-2 convolutions. `Vgg19`
//! (channels 64/128/256/512) matches the VGG-19 ladder up to relu4_1 with
//! 2x2 max-pool downsampling, so externally converted weights can be loaded
//! through the weight file format. Every convolution is 3x3 with reflection
//! padding, and the decoder mirrors the encoder with nearest 2x upsampling
//! in place of each downsample.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Tensor;
use crate::transfer::{taped_hsi_chain, HsiBlockNodes, HsiConfig, HsiWeights};

/// BT.601 luma coefficients for the gray image operator.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Total spatial downsample factor at the deepest tap.
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Mini,
    Vgg19,
}

impl EncoderMode {
    pub fn parse(name: &str) -> Result<EncoderMode> {
        match name {
            "mini" => Ok(EncoderMode::Mini),
            "vgg19" => Ok(EncoderMode::Vgg19),
            other => Err(Error::InvalidConfig {
                message: format!("unknown encoder mode '{other}' (want mini|vgg19)"),
            }),
        }
    }

    /// Channel count of the transfer feature (relu4_1).
    pub fn feature_channels(self) -> usize {
        match self {
            EncoderMode::Mini => 128,
            EncoderMode::Vgg19 => 512,
        }
    }
}

/// One reflection-padded 3x3 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3Weights {
    /// shape (C_out, C_in, 3, 3)
    pub kernel: Tensor,
    /// shape (C_out)
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv3x3Weights {
    fn seeded(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        Conv3x3Weights {
            kernel: init::he_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
            bias: Tensor::zeros(&[c_out]).expect("valid shape"),
        stride,
        }
    }
}

/// Encoder stage: convolutions each followed by relu; the first relu output
/// is the stage's tap. `pool_after` inserts a 2x2 max pool between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub convs: Vec<Conv3x3Weights>,
    pub pool_after: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mode: EncoderMode,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn seeded(mode: EncoderMode, rng: &mut ChaCha8Rng) -> Self {
        let stages = match mode {
            EncoderMode::Mini => vec![
                EncoderStage {
                    convs: vec![Conv3x3Weights::seeded(rng, 3, 16, 1)],
                    pool_after: false,
                },
                EncoderStage {
                    convs: vec![Conv3x3Weights::seeded(rng, 16, 32, 2)],
                    pool_after: false,
                },
                EncoderStage {
                    convs: vec![Conv3x3Weights::seeded(rng, 32, 64, 2)],
                    pool_after: false,
                },
                EncoderStage {
                    convs: vec![Conv3x3Weights::seeded(rng, 64, 128, 2)],
                    pool_after: false,
                },
            ],
            EncoderMode::Vgg19 => vec![
                EncoderStage {
                    convs: vec![
                        Conv3x3Weights::seeded(rng, 3, 64, 1),
                        Conv3x3Weights::seeded(rng, 64, 64, 1),
                    ],
                    pool_after: true,
                },
                EncoderStage {
                    convs: vec![
                        Conv3x3Weights::seeded(rng, 64, 128, 1),
                        Conv3x3Weights::seeded(rng, 128, 128, 1),
                    ],
                    pool_after: true,
                },
                EncoderStage {
                    convs: vec![
                        Conv3x3Weights::seeded(rng, 128, 256, 1),
                        Conv3x3Weights::seeded(rng, 256, 256, 1),
                        Conv3x3Weights::seeded(rng, 256, 256, 1),
                        Conv3x3Weights::seeded(rng, 256, 256, 1),
                    ],
                    pool_after: true,
                },
                EncoderStage {
                    convs: vec![Conv3x3Weights::seeded(rng, 256, 512, 1)],
                    pool_after: false,
                },
            ],
        };
        Encoder { mode, stages }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        for (si, stage) in self.stages.iter().enumerate() {
            for (ci, conv) in stage.convs.iter().enumerate() {
                f(
                    format!("encoder.stage{}.conv{}.kernel", si + 1, ci + 1),
                    &conv.kernel,
                );
                f(
                    format!("encoder.stage{}.conv{}.bias", si + 1, ci + 1),
                    &conv.bias,
                );
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (ci, conv) in stage.convs.iter_mut().enumerate() {
                f(
                    format!("encoder.stage{}.conv{}.kernel", si + 1, ci + 1),
                    &mut conv.kernel,
                );
                f(
                    format!("encoder.stage{}.conv{}.bias", si + 1, ci + 1),
                    &mut conv.bias,
                );
            }
        }
    }
}

/// Decoder stage in execution order: optional upsample, then convolutions.
/// `relu` is false only on the final image-producing convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub upsample_before: bool,
    pub convs: Vec<(Conv3x3Weights, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    /// Mirror of the encoder from relu4_1 back to 3 image channels.
    pub fn seeded(mode: EncoderMode, rng: &mut ChaCha8Rng) -> Self {
        let stages = match mode {
            EncoderMode::Mini => vec![
                DecoderStage {
                    upsample_before: true,
                    convs: vec![(Conv3x3Weights::seeded(rng, 128, 64, 1), true)],
                },
                DecoderStage {
                    upsample_before: true,
                    convs: vec![(Conv3x3Weights::seeded(rng, 64, 32, 1), true)],
                },
                DecoderStage {
                    upsample_before: true,
                    convs: vec![(Conv3x3Weights::seeded(rng, 32, 16, 1), true)],
                },
                DecoderStage {
                    upsample_before: false,
                    convs: vec![(Conv3x3Weights::seeded(rng, 16, 3, 1), false)],
                },
            ],
            EncoderMode::Vgg19 => vec![
                DecoderStage {
                    upsample_before: false,
                    convs: vec![(Conv3x3Weights::seeded(rng, 512, 256, 1), true)],
                },
                DecoderStage {
                    upsample_before: true,
                    convs: vec![
                        (Conv3x3Weights::seeded(rng, 256, 256, 1), true),
                        (Conv3x3Weights::seeded(rng, 256, 256, 1), true),
                        (Conv3x3Weights::seeded(rng, 256, 256, 1), true),
                        (Conv3x3Weights::seeded(rng, 256, 128, 1), true),
                    ],
                },
                DecoderStage {
                    upsample_before: true,
                    convs: vec![
                        (Conv3x3Weights::seeded(rng, 128, 128, 1), true),
                        (Conv3x3Weights::seeded(rng, 128, 64, 1), true),
                    ],
                },
                DecoderStage {
                    upsample_before: true,
                    convs: vec![
                        (Conv3x3Weights::seeded(rng, 64, 64, 1), true),
                        (Conv3x3Weights::seeded(rng, 64, 3, 1), false),
                    ],
                },
            ],
        };
        Decoder { stages }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].convs[0].0.kernel.shape()[1]
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        for (si, stage) in self.stages.iter().enumerate() {
            for (ci, (conv, _)) in stage.convs.iter().enumerate() {
                f(
                    format!("decoder.stage{}.conv{}.kernel", si + 1, ci + 1),
                    &conv.kernel,
                );
                f(
                    format!("decoder.stage{}.conv{}.bias", si + 1, ci + 1),
                    &conv.bias,
                );
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (ci, (conv, _)) in stage.convs.iter_mut().enumerate() {
                f(
                    format!("decoder.stage{}.conv{}.kernel", si + 1, ci + 1),
                    &mut conv.kernel,
                );
                f(
                    format!("decoder.stage{}.conv{}.bias", si + 1, ci + 1),
                    &mut conv.bias,
                );
            }
        }
    }
}

/// Feature maps at the four named taps.
#[derive(Debug, Clone)]
pub struct Taps {
    pub relu1_1: Tensor,
    pub relu2_1: Tensor,
    pub relu3_1: Tensor,
    pub relu4_1: Tensor,
}

/// Tap node handles inside a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapNodes {
    pub relu1_1: NodeId,
    pub relu2_1: NodeId,
    pub relu3_1: NodeId,
    pub relu4_1: NodeId,
}

impl TapNodes {
    pub fn as_array(&self) -> [NodeId; 4] {
        [self.relu1_1, self.relu2_1, self.relu3_1, self.relu4_1]
    }
}

/// Encoder parameters registered on a tape (always constants: the encoder
/// is parameter-fixed, though gradients still flow through it to its input).
#[derive(Debug, Clone)]
pub struct EncoderNodes {
    stages: Vec<(Vec<(NodeId, NodeId, usize)>, bool)>,
}

impl EncoderNodes {
    pub fn insert(tape: &mut Tape, enc: &Encoder) -> Self {
        let stages = enc
            .stages
            .iter()
            .map(|stage| {
                let convs = stage
                    .convs
                    .iter()
                    .map(|c| {
                        (
                            tape.constant(c.kernel.clone()),
                            tape.constant(c.bias.clone()),
                            c.stride,
                        )
                    })
                    .collect();
                (convs, stage.pool_after)
            })
            .collect();
        EncoderNodes { stages }
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::ChannelMismatch {
            op: "encode",
            expected: 3,
            got: c,
        });
    }
    for extent in [h, w] {
        if extent % DOWNSAMPLE != 0 {
            return Err(Error::NotDivisible {
                extent,
                by: DOWNSAMPLE,
            });
        }
    }
    Ok(())
}

/// Run the encoder on a tape, returning the four tap nodes.
pub fn taped_encode(tape: &mut Tape, image: NodeId, enc: &EncoderNodes) -> Result<TapNodes> {
    check_image(tape.value(image))?;
    let mut x = image;
    let mut taps = Vec::with_capacity(4);
    for (convs, pool_after) in &enc.stages {
        for (ci, &(kernel, bias, stride)) in convs.iter().enumerate() {
            let padded = tape.reflect_pad(x, 1)?;
            let conv = tape.conv3x3(padded, kernel, bias, stride)?;
            x = tape.relu(conv);
            if ci == 0 {
                taps.push(x);
            }
        }
        if *pool_after {
            x = tape.maxpool2x2(x)?;
        }
    }
    Ok(TapNodes {
        relu1_1: taps[0],
        relu2_1: taps[1],
        relu3_1: taps[2],
        relu4_1: taps[3],
    })
}

/// Deterministic feature maps at all four taps.
pub fn encode(image: &Tensor, enc: &Encoder) -> Result<Taps> {
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let nodes = EncoderNodes::insert(&mut tape, enc);
    let taps = taped_encode(&mut tape, img, &nodes)?;
    Ok(Taps {
        relu1_1: tape.value(taps.relu1_1).clone(),
        relu2_1: tape.value(taps.relu2_1).clone(),
        relu3_1: tape.value(taps.relu3_1).clone(),
        relu4_1: tape.value(taps.relu4_1).clone(),
    })
}

/// Decoder parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct DecoderNodes {
    stages: Vec<(bool, Vec<(NodeId, NodeId, bool)>)>,
}

impl DecoderNodes {
    pub fn insert(tape: &mut Tape, dec: &Decoder, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let stages = dec
            .stages
            .iter()
            .map(|stage| {
                let convs = stage
                    .convs
                    .iter()
                    .map(|(c, relu)| (reg(&c.kernel), reg(&c.bias), *relu))
                    .collect();
                (stage.upsample_before, convs)
            })
            .collect();
        DecoderNodes { stages }
    }

    /// Parameter node ids in visit order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (_, convs) in &self.stages {
            for &(k, b, _) in convs {
                out.push(k);
                out.push(b);
            }
        }
        out
    }
}

/// Run the decoder on a tape; the result is clamped to [0, 1].
pub fn taped_decode(tape: &mut Tape, feature: NodeId, dec: &DecoderNodes) -> Result<NodeId> {
    let mut x = feature;
    for (upsample_before, convs) in &dec.stages {
        if *upsample_before {
            x = tape.upsample2x(x)?;
        }
        for &(kernel, bias, relu) in convs {
            let padded = tape.reflect_pad(x, 1)?;
            x = tape.conv3x3(padded, kernel, bias, 1)?;
            if relu {
                x = tape.relu(x);
            }
        }
    }
    Ok(tape.clamp(x, 0.0, 1.0))
}

/// Invert a transfer feature back to image space.
pub fn decode(feature: &Tensor, dec: &Decoder) -> Result<Tensor> {
    let (_, c, _, _) = feature.dims4()?;
    if c != dec.in_channels() {
        return Err(Error::ChannelMismatch {
            op: "decode",
            expected: dec.in_channels(),
            got: c,
        });
    }
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let nodes = DecoderNodes::insert(&mut tape, dec, false);
    let out = taped_decode(&mut tape, f, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Luma conversion replicated back to 3 channels, as a constant 1x1 conv so
/// the gray path stays differentiable.
pub fn taped_grayscale(tape: &mut Tape, image: NodeId) -> Result<NodeId> {
    let kernel = Tensor::from_fn(&[3, 3, 1, 1], |i| LUMA[i % 3])?;
    let k = tape.constant(kernel);
    let b = tape.constant(Tensor::zeros(&[3])?);
    tape.conv1x1(image, k, b)
}

/// BT.601 luma of an RGB image, replicated to 3 channels.
pub fn grayscale(image: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = image.dims4()?;
    if c != 3 {
        return Err(Error::ChannelMismatch {
            op: "grayscale",
            expected: 3,
            got: c,
        });
    }
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let out = taped_grayscale(&mut tape, img)?;
    Ok(tape.value(out).clone())
}

/// Everything stylization needs: fixed encoder, injector chain, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleModel {
    pub encoder: Encoder,
    pub hsi: HsiWeights,
    pub decoder: Decoder,
}

impl StyleModel {
    pub fn seeded(mode: EncoderMode, blocks: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::seeded(mode, &mut rng);
        let hsi = HsiWeights::seeded(mode.feature_channels(), blocks, &mut rng);
        let decoder = Decoder::seeded(mode, &mut rng);
        StyleModel {
            encoder,
            hsi,
            decoder,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.encoder.visit(f);
        self.hsi.visit(&mut |name, t| f(format!("hsi.{name}"), t));
        self.decoder.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.hsi.visit_mut(&mut |name, t| f(format!("hsi.{name}"), t));
        self.decoder.visit_mut(f);
    }

    /// Trainable parameters (injector chain and decoder; the encoder stays
    /// fixed), in the same order the trainer registers them on its tape.
    pub fn visit_trainable_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.hsi.visit_mut(&mut |name, t| f(format!("hsi.{name}"), t));
        self.decoder.visit_mut(f);
    }

    /// Stylize a content image with a style image.
    pub fn stylize(&self, content: &Tensor, style: &Tensor, cfg: &HsiConfig) -> Result<Tensor> {
        check_image(content)?;
        check_image(style)?;
        let mut tape = Tape::new();
        let c = tape.constant(content.clone());
        let s = tape.constant(style.clone());
        let enc = EncoderNodes::insert(&mut tape, &self.encoder);
        let c_taps = taped_encode(&mut tape, c, &enc)?;
        let s_taps = taped_encode(&mut tape, s, &enc)?;
        let blocks = self
            .hsi
            .blocks
            .iter()
            .map(|b| HsiBlockNodes::insert(&mut tape, b, false))
            .collect::<Result<Vec<_>>>()?;
        let fused = taped_hsi_chain(&mut tape, c_taps.relu4_1, s_taps.relu4_1, &blocks, cfg)?;
        let dec = DecoderNodes::insert(&mut tape, &self.decoder, false);
        let out = taped_decode(&mut tape, fused, &dec)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvWeights;
    use crate::transfer::HsiBlockWeights;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, 3, h, w], |_| r.gen_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn mini_encoder_shapes() {
        let enc = Encoder::seeded(EncoderMode::Mini, &mut rng(1));
        let img = random_image(&mut rng(2), 1, 64, 64);
        let taps = encode(&img, &enc).unwrap();
        assert_eq!(taps.relu1_1.shape(), &[1, 16, 64, 64]);
        assert_eq!(taps.relu2_1.shape(), &[1, 32, 32, 32]);
        assert_eq!(taps.relu3_1.shape(), &[1, 64, 16, 16]);
        assert_eq!(taps.relu4_1.shape(), &[1, 128, 8, 8]);
    }

    #[test]
    fn vgg19_encoder_shapes() {
        let enc = Encoder::seeded(EncoderMode::Vgg19, &mut rng(1));
        let img = random_image(&mut rng(2), 1, 32, 32);
        let taps = encode(&img, &enc).unwrap();
        assert_eq!(taps.relu1_1.shape(), &[1, 64, 32, 32]);
        assert_eq!(taps.relu2_1.shape(), &[1, 128, 16, 16]);
        assert_eq!(taps.relu3_1.shape(), &[1, 256, 8, 8]);
        assert_eq!(taps.relu4_1.shape(), &[1, 512, 4, 4]);
    }

    #[test]
    fn encoder_is_deterministic() {
        let enc = Encoder::seeded(EncoderMode::Mini, &mut rng(3));
        let img = random_image(&mut rng(4), 1, 32, 32);
        let a = encode(&img, &enc).unwrap();
        let b = encode(&img, &enc).unwrap();
        assert_eq!(a.relu4_1, b.relu4_1);
    }

    #[test]
    fn non_divisible_size_rejected() {
        let enc = Encoder::seeded(EncoderMode::Mini, &mut rng(5));
        let img = Tensor::ones(&[1, 3, 65, 64]).unwrap();
        assert!(matches!(
            encode(&img, &enc),
            Err(Error::NotDivisible { extent: 65, by: 8 })
        ));
        let wrong_ch = Tensor::ones(&[1, 4, 64, 64]).unwrap();
        assert!(matches!(
            encode(&wrong_ch, &enc),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn decode_shape_and_range() {
        let dec = Decoder::seeded(EncoderMode::Mini, &mut rng(6));
        let feat = Tensor::from_fn(&[1, 128, 8, 8], |i| ((i % 17) as f32 - 8.0) * 0.3).unwrap();
        let img = decode(&feat, &dec).unwrap();
        assert_eq!(img.shape(), &[1, 3, 64, 64]);
        for &v in img.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn decode_channel_mismatch() {
        let dec = Decoder::seeded(EncoderMode::Mini, &mut rng(7));
        let feat = Tensor::ones(&[1, 64, 8, 8]).unwrap();
        assert!(matches!(
            decode(&feat, &dec),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn zero_feature_zero_bias_decodes_to_constant_image() {
        let mut dec = Decoder::seeded(EncoderMode::Mini, &mut rng(8));
        dec.visit_mut(&mut |name, t| {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let feat = Tensor::zeros(&[1, 128, 8, 8]).unwrap();
        let img = decode(&feat, &dec).unwrap();
        for &v in img.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn constant_feature_yields_spatially_constant_image_without_relu_bias() {
        // linear-only check: reflection padding plus upsampling of a constant
        // field stays constant through every conv
        let dec = Decoder::seeded(EncoderMode::Mini, &mut rng(9));
        let feat = Tensor::full(&[1, 128, 8, 8], 0.37).unwrap();
        let img = decode(&feat, &dec).unwrap();
        let (_, _, h, w) = img.dims4().unwrap();
        for c in 0..3 {
            let first = img.get4(0, c, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(img.get4(0, c, y, x), first);
                }
            }
        }
    }

    #[test]
    fn grayscale_values() {
        let white = Tensor::ones(&[1, 3, 2, 2]).unwrap();
        let g = grayscale(&white).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        let red = Tensor::from_fn(&[1, 3, 1, 1], |i| if i == 0 { 1.0 } else { 0.0 }).unwrap();
        let g = grayscale(&red).unwrap();
        for &v in g.data() {
            assert!((v - 0.299).abs() < 1e-6);
        }

        let gray = Tensor::full(&[1, 3, 2, 2], 0.42).unwrap();
        let g = grayscale(&gray).unwrap();
        for &v in g.data() {
            assert!((v - 0.42).abs() < 1e-5);
        }
    }

    #[test]
    fn stylize_output_follows_content_size() {
        let model = StyleModel::seeded(EncoderMode::Mini, 2, 42);
        let content = random_image(&mut rng(10), 1, 64, 64);
        let style = random_image(&mut rng(11), 1, 96, 96);
        let out = model
            .stylize(&content, &style, &HsiConfig::default())
            .unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn stylize_is_deterministic() {
        let model = StyleModel::seeded(EncoderMode::Mini, 2, 42);
        let content = random_image(&mut rng(12), 1, 32, 32);
        let style = random_image(&mut rng(13), 1, 32, 32);
        let cfg = HsiConfig::default();
        let a = model.stylize(&content, &style, &cfg).unwrap();
        let b = model.stylize(&content, &style, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_projection_reduces_to_reconstruction() {
        let mut model = StyleModel::seeded(EncoderMode::Mini, 2, 42);
        let zero_pw = |c: usize| {
            ConvWeights::pointwise(
                Tensor::zeros(&[c, c, 1, 1]).unwrap(),
                Tensor::zeros(&[c]).unwrap(),
            )
            .unwrap()
        };
        for block in &mut model.hsi.blocks {
            block.output = zero_pw(128);
        }
        let img = random_image(&mut rng(14), 1, 32, 32);
        let stylized = model.stylize(&img, &img, &HsiConfig::default()).unwrap();
        // chain collapses to identity on the content feature
        let taps = encode(&img, &model.encoder).unwrap();
        let recon = decode(&taps.relu4_1, &model.decoder).unwrap();
        assert_eq!(stylized, recon);
    }

    #[test]
    fn model_visit_names_are_unique() {
        let model = StyleModel::seeded(EncoderMode::Mini, 2, 1);
        let mut names = std::collections::HashSet::new();
        let mut count = 0usize;
        model.visit(&mut |name, _| {
            assert!(names.insert(name.clone()), "duplicate {name}");
            count += 1;
        });
        assert!(count > 0);
    }

    use rand_chacha::ChaCha8Rng;
    use crate::transfer::HsiConfig as _HsiConfigUse;

    #[test]
    fn hsi_block_weights_visit_matches_node_ids_count() {
        let w = HsiBlockWeights::seeded(4, &mut rng(15));
        let mut count = 0;
        w.visit(&mut |_, _| count += 1);
        let mut tape = Tape::new();
        let nodes = HsiBlockNodes::insert(&mut tape, &w, true).unwrap();
        assert_eq!(nodes.ids().len(), count);
    }
}
