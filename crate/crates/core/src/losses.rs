//! Training objective: statistics-matching style loss, color+gray content
//! loss, a non-saturating patch adversarial loss over two scales, the
//! weighted total, Adam, and a toy trainer that wires one optimization step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::init;
use crate::network::{
    taped_decode, taped_encode, taped_grayscale, encode, Conv3x3Weights, DecoderNodes, Encoder,
    EncoderNodes, StyleModel, TapNodes,
};
use crate::tensor::Tensor;
use crate::transfer::{taped_hsi_chain, HsiBlockNodes, HsiConfig};

/// Discriminator logits are clamped to this magnitude before the BCE.
pub const LOGIT_CLAMP: f32 = 20.0;

/// Variance guard inside the style loss's standard deviation.
const STD_EPS: f32 = 1e-5;

/// Loss weighting factors (style 60, content 5, adversarial 50).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub style: f32,
    pub content: f32,
    pub adversarial: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            style: 60.0,
            content: 5.0,
            adversarial: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.style < 0.0 || self.content < 0.0 || self.adversarial < 0.0 {
            return Err(Error::InvalidConfig {
                message: "loss weights must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// lambda_s * L_s + lambda_c * L_c + lambda_adv * L_adv.
pub fn total_loss(style: f32, content: f32, adversarial: f32, w: &LossWeights) -> f32 {
    w.style * style + w.content * content + w.adversarial * adversarial
}

// ---------------------------------------------------------------------------
// feature-space losses
// ---------------------------------------------------------------------------

/// Per-sample Euclidean norm over everything but the batch axis, averaged
/// over the batch: mean_n ||x_n||_2.
fn taped_batch_l2(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let n = tape.shape(x)[0];
    let sq = tape.mul(x, x)?;
    let per_sample = tape.sum_chw(sq)?;
    let norms = tape.sqrt(per_sample);
    let total = tape.sum_all(norms);
    Ok(tape.mul_scalar(total, 1.0 / n as f32))
}

/// Per-channel mean and eps-guarded standard deviation, each (N, C, 1, 1).
fn taped_mean_std(tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
    let mean = tape.pool_avg(x)?;
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let var = tape.pool_avg(sq)?;
    let guarded = tape.add_scalar(var, STD_EPS);
    let std = tape.sqrt(guarded);
    Ok((mean, std))
}

/// Sum over tap layers of ||mu_i(cs) - mu_i(s)||_2 + ||sigma_i(cs) - sigma_i(s)||_2.
pub fn taped_style_loss(tape: &mut Tape, cs: &TapNodes, s: &TapNodes) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (a, b) in cs.as_array().into_iter().zip(s.as_array()) {
        let (mu_a, std_a) = taped_mean_std(tape, a)?;
        let (mu_b, std_b) = taped_mean_std(tape, b)?;
        let dmu = tape.sub(mu_a, mu_b)?;
        let mu_term = taped_batch_l2(tape, dmu)?;
        let dstd = tape.sub(std_a, std_b)?;
        let std_term = taped_batch_l2(tape, dstd)?;
        let layer = tape.add(mu_term, std_term)?;
        acc = Some(match acc {
            None => layer,
            Some(prev) => tape.add(prev, layer)?,
        });
    }
    Ok(acc.expect("four tap layers"))
}

/// Sum over tap layers of the color and gray feature distances.
pub fn taped_content_loss(
    tape: &mut Tape,
    cs: &TapNodes,
    c: &TapNodes,
    cs_gray: &TapNodes,
    c_gray: &TapNodes,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for ((a, b), (ga, gb)) in cs
        .as_array()
        .into_iter()
        .zip(c.as_array())
        .zip(cs_gray.as_array().into_iter().zip(c_gray.as_array()))
    {
        let d = tape.sub(a, b)?;
        let color = taped_batch_l2(tape, d)?;
        let dg = tape.sub(ga, gb)?;
        let gray = taped_batch_l2(tape, dg)?;
        let layer = tape.add(color, gray)?;
        acc = Some(match acc {
            None => layer,
            Some(prev) => tape.add(prev, layer)?,
        });
    }
    Ok(acc.expect("four tap layers"))
}

/// Style loss between two images under a fixed encoder.
pub fn style_loss(i_cs: &Tensor, i_s: &Tensor, enc: &Encoder) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(i_cs.clone());
    let b = tape.constant(i_s.clone());
    let nodes = EncoderNodes::insert(&mut tape, enc);
    let ta = taped_encode(&mut tape, a, &nodes)?;
    let tb = taped_encode(&mut tape, b, &nodes)?;
    let loss = taped_style_loss(&mut tape, &ta, &tb)?;
    tape.value(loss).item()
}

/// Content loss between two images (color and gray variants).
pub fn content_loss(i_cs: &Tensor, i_c: &Tensor, enc: &Encoder) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(i_cs.clone());
    let b = tape.constant(i_c.clone());
    let nodes = EncoderNodes::insert(&mut tape, enc);
    let ga = taped_grayscale(&mut tape, a)?;
    let gb = taped_grayscale(&mut tape, b)?;
    let ta = taped_encode(&mut tape, a, &nodes)?;
    let tb = taped_encode(&mut tape, b, &nodes)?;
    let tga = taped_encode(&mut tape, ga, &nodes)?;
    let tgb = taped_encode(&mut tape, gb, &nodes)?;
    let loss = taped_content_loss(&mut tape, &ta, &tb, &tga, &tgb)?;
    tape.value(loss).item()
}

// ---------------------------------------------------------------------------
// discriminator and adversarial loss
// ---------------------------------------------------------------------------

/// Patch discriminator over two scales (full input and a 2x-downsampled
/// copy); each scale is a 3-layer stride-2 conv stack ending in a 1-channel
/// logit map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub scales: [Vec<Conv3x3Weights>; 2],
}

impl Discriminator {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scale = |rng: &mut ChaCha8Rng| {
            vec![
                conv_seeded(rng, 3, 16),
                conv_seeded(rng, 16, 32),
                conv_seeded(rng, 32, 1),
            ]
        };
        Discriminator {
            scales: [scale(&mut rng), scale(&mut rng)],
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (si, convs) in self.scales.iter_mut().enumerate() {
            for (ci, conv) in convs.iter_mut().enumerate() {
                f(
                    format!("disc.scale{}.conv{}.kernel", si + 1, ci + 1),
                    &mut conv.kernel,
                );
                f(
                    format!("disc.scale{}.conv{}.bias", si + 1, ci + 1),
                    &mut conv.bias,
                );
            }
        }
    }
}

fn conv_seeded(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Conv3x3Weights {
    Conv3x3Weights {
        kernel: init::he_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
        bias: Tensor::zeros(&[c_out]).expect("valid shape"),
        stride: 2,
    }
}

/// Discriminator parameters registered on a tape, with one conv stack per
/// scale.
#[derive(Debug, Clone)]
pub struct DiscNodes {
    scales: [Vec<(NodeId, NodeId)>; 2],
}

impl DiscNodes {
    pub fn insert(tape: &mut Tape, d: &Discriminator, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let map = |convs: &Vec<Conv3x3Weights>, reg: &mut dyn FnMut(&Tensor) -> NodeId| {
            convs
                .iter()
                .map(|c| (reg(&c.kernel), reg(&c.bias)))
                .collect::<Vec<_>>()
        };
        DiscNodes {
            scales: [
                map(&d.scales[0], &mut reg),
                map(&d.scales[1], &mut reg),
            ],
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for scale in &self.scales {
            for &(k, b) in scale {
                out.push(k);
                out.push(b);
            }
        }
        out
    }
}

/// Clamped patch logits at both scales.
pub fn taped_disc_logits(tape: &mut Tape, image: NodeId, d: &DiscNodes) -> Result<[NodeId; 2]> {
    let half = tape.avgpool2x2(image)?;
    let mut outs = Vec::with_capacity(2);
    for (scale, input) in d.scales.iter().zip([image, half]) {
        let mut x = input;
        for (li, &(kernel, bias)) in scale.iter().enumerate() {
            let padded = tape.reflect_pad(x, 1)?;
            x = tape.conv3x3(padded, kernel, bias, 2)?;
            if li + 1 < scale.len() {
                x = tape.relu(x);
            }
        }
        outs.push(tape.clamp(x, -LOGIT_CLAMP, LOGIT_CLAMP));
    }
    Ok([outs[0], outs[1]])
}

/// Mean binary cross-entropy of logits against a constant target (1 = real,
/// 0 = fake), computed as softplus in logit space.
pub fn taped_bce_mean(tape: &mut Tape, logits: NodeId, target_real: bool) -> Result<NodeId> {
    let numel: usize = tape.shape(logits).iter().product();
    // softplus(z) = ln(1 + exp(z)); target 1 wants z = -logits
    let z = if target_real {
        tape.mul_scalar(logits, -1.0)
    } else {
        logits
    };
    let e = tape.exp(z);
    let shifted = tape.add_scalar(e, 1.0);
    let sp = tape.ln(shifted);
    let total = tape.sum_all(sp);
    Ok(tape.mul_scalar(total, 1.0 / numel as f32))
}

/// Generator-side adversarial term: mean over scales of BCE(D(fake) -> 1).
pub fn taped_gen_adversarial(tape: &mut Tape, fake: NodeId, d: &DiscNodes) -> Result<NodeId> {
    let logits = taped_disc_logits(tape, fake, d)?;
    let mut acc: Option<NodeId> = None;
    for l in logits {
        let term = taped_bce_mean(tape, l, true)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(tape.mul_scalar(acc.expect("two scales"), 0.5))
}

/// Discriminator-side loss: mean over scales of BCE(D(real) -> 1) +
/// BCE(D(fake) -> 0).
pub fn taped_disc_adversarial(
    tape: &mut Tape,
    real: NodeId,
    fake: NodeId,
    d: &DiscNodes,
) -> Result<NodeId> {
    let real_logits = taped_disc_logits(tape, real, d)?;
    let fake_logits = taped_disc_logits(tape, fake, d)?;
    let mut acc: Option<NodeId> = None;
    for (r, f) in real_logits.into_iter().zip(fake_logits) {
        let lr = taped_bce_mean(tape, r, true)?;
        let lf = taped_bce_mean(tape, f, false)?;
        let term = tape.add(lr, lf)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(tape.mul_scalar(acc.expect("two scales"), 0.5))
}

/// Adversarial losses of a stylized batch against a real style batch:
/// (generator scalar, discriminator scalar).
pub fn adversarial_loss(
    i_cs: &Tensor,
    i_s_batch: &Tensor,
    disc: &Discriminator,
) -> Result<(f32, f32)> {
    let mut tape = Tape::new();
    let fake = tape.constant(i_cs.clone());
    let real = tape.constant(i_s_batch.clone());
    let nodes = DiscNodes::insert(&mut tape, disc, false);
    let gen = taped_gen_adversarial(&mut tape, fake, &nodes)?;
    let d = taped_disc_adversarial(&mut tape, real, fake, &nodes)?;
    Ok((tape.value(gen).item()?, tape.value(d).item()?))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Result<Self> {
        Ok(AdamState {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Result<_>>()?,
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Result<_>>()?,
            t: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// Hyperparameters with the defaults used for toy training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a parameter list. A `None` gradient
/// leaves the parameter and its moments untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidConfig {
            message: format!(
                "adam: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let Some(grad) = grad else { continue };
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = param.data_mut();
        for i in 0..gd.len() {
            let g = gd[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// toy trainer
// ---------------------------------------------------------------------------

/// Loss component values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f32,
    pub style: f32,
    pub content: f32,
    pub adversarial: f32,
}

/// Owns the model, optional discriminator, and optimizer state for toy
/// training. The encoder stays fixed; the injector chain and decoder train.
pub struct Trainer {
    pub model: StyleModel,
    pub discriminator: Option<Discriminator>,
    cfg: HsiConfig,
    loss_weights: LossWeights,
    adam_cfg: AdamConfig,
    gen_state: AdamState,
    disc_state: Option<AdamState>,
}

impl Trainer {
    pub fn new(
        mut model: StyleModel,
        cfg: HsiConfig,
        loss_weights: LossWeights,
        adam_cfg: AdamConfig,
        discriminator: Option<Discriminator>,
    ) -> Result<Self> {
        cfg.validate()?;
        loss_weights.validate()?;
        let mut gen_params: Vec<*const Tensor> = Vec::new();
        model.visit_trainable_mut(&mut |_, t| gen_params.push(t as *const Tensor));
        let gen_refs: Vec<&Tensor> = gen_params
            .iter()
            .map(|&p| unsafe { &*p })
            .collect();
        let gen_state = AdamState::new(&gen_refs)?;
        let disc_state = match &discriminator {
            Some(d) => {
                let mut dd = d.clone();
                let mut refs: Vec<*const Tensor> = Vec::new();
                dd.visit_mut(&mut |_, t| refs.push(t as *const Tensor));
                let disc_refs: Vec<&Tensor> = refs.iter().map(|&p| unsafe { &*p }).collect();
                Some(AdamState::new(&disc_refs)?)
            }
            None => None,
        };
        Ok(Trainer {
            model,
            discriminator,
            cfg,
            loss_weights,
            adam_cfg,
            gen_state,
            disc_state,
        })
    }

    /// One generator step (and one discriminator step when adversarial
    /// training is enabled) on a (content batch, style batch) pair.
    pub fn step(&mut self, content: &Tensor, style: &Tensor) -> Result<LossParts> {
        // generator pass
        let mut tape = Tape::new();
        let c_img = tape.constant(content.clone());
        let s_img = tape.constant(style.clone());
        let enc = EncoderNodes::insert(&mut tape, &self.model.encoder);
        let c_taps = taped_encode(&mut tape, c_img, &enc)?;
        let s_taps = taped_encode(&mut tape, s_img, &enc)?;

        let blocks = self
            .model
            .hsi
            .blocks
            .iter()
            .map(|b| HsiBlockNodes::insert(&mut tape, b, true))
            .collect::<Result<Vec<_>>>()?;
        let dec = DecoderNodes::insert(&mut tape, &self.model.decoder, true);
        let mut param_ids: Vec<NodeId> = blocks.iter().flat_map(|b| b.ids()).collect();
        param_ids.extend(dec.ids());

        let fused = taped_hsi_chain(&mut tape, c_taps.relu4_1, s_taps.relu4_1, &blocks, &self.cfg)?;
        let i_cs = taped_decode(&mut tape, fused, &dec)?;

        let cs_taps = taped_encode(&mut tape, i_cs, &enc)?;
        let cs_gray = taped_grayscale(&mut tape, i_cs)?;
        let cs_gray_taps = taped_encode(&mut tape, cs_gray, &enc)?;
        let c_gray = taped_grayscale(&mut tape, c_img)?;
        let c_gray_taps = taped_encode(&mut tape, c_gray, &enc)?;

        let style_term = taped_style_loss(&mut tape, &cs_taps, &s_taps)?;
        let content_term =
            taped_content_loss(&mut tape, &cs_taps, &c_taps, &cs_gray_taps, &c_gray_taps)?;

        let weighted_style = tape.mul_scalar(style_term, self.loss_weights.style);
        let weighted_content = tape.mul_scalar(content_term, self.loss_weights.content);
        let mut total = tape.add(weighted_style, weighted_content)?;

        let mut adv_value = 0.0f32;
        if let Some(disc) = &self.discriminator {
            let disc_nodes = DiscNodes::insert(&mut tape, disc, false);
            let gen_adv = taped_gen_adversarial(&mut tape, i_cs, &disc_nodes)?;
            adv_value = tape.value(gen_adv).item()?;
            let weighted_adv = tape.mul_scalar(gen_adv, self.loss_weights.adversarial);
            total = tape.add(total, weighted_adv)?;
        }

        let parts = LossParts {
            total: tape.value(total).item()?,
            style: tape.value(style_term).item()?,
            content: tape.value(content_term).item()?,
            adversarial: adv_value,
        };

        let stylized = tape.value(i_cs).clone();
        let mut grads = tape.backward(total)?;
        let grad_list: Vec<Option<Tensor>> = param_ids.iter().map(|&id| grads.take(id)).collect();

        let mut param_ptrs: Vec<*mut Tensor> = Vec::new();
        self.model
            .visit_trainable_mut(&mut |_, t| param_ptrs.push(t as *mut Tensor));
        debug_assert_eq!(param_ptrs.len(), grad_list.len());
        let mut param_refs: Vec<&mut Tensor> =
            param_ptrs.iter().map(|&p| unsafe { &mut *p }).collect();
        adam_step(&mut param_refs, &grad_list, &mut self.gen_state, &self.adam_cfg)?;
        drop(tape);

        // discriminator pass on the detached stylized batch
        if let Some(disc) = &mut self.discriminator {
            let mut dtape = Tape::new();
            let real = dtape.constant(style.clone());
            let fake = dtape.constant(stylized);
            let nodes = DiscNodes::insert(&mut dtape, disc, true);
            let ids = nodes.ids();
            let loss = taped_disc_adversarial(&mut dtape, real, fake, &nodes)?;
            let mut grads = dtape.backward(loss)?;
            let grad_list: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.take(id)).collect();
            let mut ptrs: Vec<*mut Tensor> = Vec::new();
            disc.visit_mut(&mut |_, t| ptrs.push(t as *mut Tensor));
            let mut refs: Vec<&mut Tensor> = ptrs.iter().map(|&p| unsafe { &mut *p }).collect();
            let state = self.disc_state.as_mut().expect("state exists with disc");
            adam_step(&mut refs, &grad_list, state, &self.adam_cfg)?;
        }

        Ok(parts)
    }
}
