//! The dual network: an auto-encoder (teacher) whose encoder is a bank of
//! time convolutions and whose decoder is one width-expanding transposed
//! convolution, and an encoder-only student with the same encoder shape.
//!
//! Losses:
//! * reconstruction `L_r`: masked MSE between `X` and `X_hat` over the target
//!   positions (focus positions for local/G2L, all real positions for global);
//! * one-class `L_o`: mean squared distance of teacher representations to a
//!   fixed center;
//! * prediction `L_p`: MSE between teacher and student representations, with
//!   the teacher side treated as a constant target.
//!
//! Total: `alpha * L_r + L_p + L_o` (no `L_p` for single-network variants).

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedder::{build_batch, EmbeddingTable, SequenceBatch};
use crate::error::{Error, Result};
use crate::masking::{apply_focus_mask, FrequencyTable, MaskConfig, MaskPlan, MaskScheme};
use crate::sequencer::EventSequence;
use crate::tensor::{
    conv_time, conv_time_backward, masked_mean_pool, masked_mean_pool_backward, masked_mse, masked_mse_grad,
    relu_backward_inplace, relu_inplace, tconv_embed, tconv_embed_backward, ParamSet, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Single,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reconstruction {
    Global,
    Local,
    GlobalToLocal,
}

/// One cell of the ablation grid, written as a three-letter code:
/// network (`s`/`d`), masking (`n`/`r`/`f`), reconstruction (`g`/`l`/`f`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub network: NetworkKind,
    pub masking: MaskScheme,
    pub reconstruction: Reconstruction,
}

/// The ten variants of the ablation grid.
pub const ABLATION_CODES: [&str; 10] = ["sng", "srl", "sfl", "srf", "sff", "dng", "drl", "dfl", "drf", "dff"];

impl Variant {
    pub const FULL: Variant = Variant {
        network: NetworkKind::Dual,
        masking: MaskScheme::Frequency,
        reconstruction: Reconstruction::GlobalToLocal,
    };

    pub fn parse(code: &str) -> Result<Self> {
        let unknown = || {
            Error::config(format!(
                "unknown variant code {code:?}; expected one of {}",
                ABLATION_CODES.join(", ")
            ))
        };
        if !ABLATION_CODES.contains(&code) {
            return Err(unknown());
        }
        let b = code.as_bytes();
        let network = if b[0] == b's' { NetworkKind::Single } else { NetworkKind::Dual };
        let masking = match b[1] {
            b'n' => MaskScheme::None,
            b'r' => MaskScheme::Random,
            _ => MaskScheme::Frequency,
        };
        let reconstruction = match b[2] {
            b'g' => Reconstruction::Global,
            b'l' => Reconstruction::Local,
            _ => Reconstruction::GlobalToLocal,
        };
        Ok(Variant {
            network,
            masking,
            reconstruction,
        })
    }

    pub fn code(&self) -> String {
        let n = match self.network {
            NetworkKind::Single => 's',
            NetworkKind::Dual => 'd',
        };
        let r = match self.reconstruction {
            Reconstruction::Global => 'g',
            Reconstruction::Local => 'l',
            Reconstruction::GlobalToLocal => 'f',
        };
        format!("{n}{}{r}", self.masking.code())
    }

    pub fn validate(&self) -> Result<()> {
        if self.masking == MaskScheme::None && self.reconstruction != Reconstruction::Global {
            return Err(Error::config("masking=none requires global reconstruction"));
        }
        Variant::parse(&self.code()).map(|_| ())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Channels per kernel size.
    pub hidden: usize,
    pub kernels: Vec<usize>,
    pub alpha: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden: 128,
            kernels: vec![3, 4, 5],
            alpha: 50.0,
            variant: Variant::FULL,
        }
    }
}

impl ModelConfig {
    /// Width of the sequence representation `z`.
    pub fn repr_dim(&self) -> usize {
        self.hidden * self.kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.kernels.is_empty() {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.kernels.contains(&0) {
            return Err(Error::config("kernel sizes must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        self.variant.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSlot {
    kernel: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayout {
    convs: Vec<ConvSlot>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    ae: EncoderLayout,
    dec_weight: usize,
    dec_bias: usize,
    eo: Option<EncoderLayout>,
}

fn conv_name(prefix: &str, kernel: usize, part: &str) -> String {
    format!("{prefix}.conv{kernel}.{part}")
}

/// Encoder activations: post-ReLU feature maps and pooled representation.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// N x C_total x L
    pub features: Tensor,
    /// N x C_total
    pub z: Tensor,
}

#[derive(Debug, Clone)]
pub struct AeOutput {
    /// N x L x d
    pub reconstruction: Tensor,
    pub encoder: EncoderOutput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub oneclass: f64,
    pub prediction: f64,
    pub total: f64,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ae_input: Tensor,
    eo_input: Option<Tensor>,
    target: Vec<bool>,
    pad_mask: Vec<bool>,
    x: Tensor,
    ae: AeOutput,
    eo: Option<EncoderOutput>,
    center: Vec<f64>,
    teacher_target: Option<Tensor>,
    pub losses: LossBreakdown,
}

impl ForwardCache {
    pub fn z_a(&self) -> &Tensor {
        &self.ae.encoder.z
    }

    pub fn z_e(&self) -> Option<&Tensor> {
        self.eo.as_ref().map(|e| &e.z)
    }

    pub fn reconstruction(&self) -> &Tensor {
        &self.ae.reconstruction
    }
}

/// Parameters of both subnets plus the layout that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Network {
    /// Fresh network with uniform `±sqrt(1/fan_in)` initialisation.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamSet::new(init_seed);
        let d = config.embed_dim;
        let c = config.hidden;
        let mut encoder = |prefix: &str, params: &mut ParamSet| -> Result<EncoderLayout> {
            let mut convs = Vec::new();
            for &k in &config.kernels {
                let fan_in = k * d;
                let weight = params.push(conv_name(prefix, k, "weight"), Tensor::uniform_init(&[c, k, d], fan_in, &mut rng))?;
                let bias = params.push(conv_name(prefix, k, "bias"), Tensor::uniform_init(&[c], fan_in, &mut rng))?;
                convs.push(ConvSlot { kernel: k, weight, bias });
            }
            Ok(EncoderLayout { convs })
        };
        let ae = encoder("ae", &mut params)?;
        let eo = match config.variant.network {
            NetworkKind::Dual => Some(encoder("eo", &mut params)?),
            NetworkKind::Single => None,
        };
        let total = config.repr_dim();
        let dec_weight = params.push("decoder.weight", Tensor::uniform_init(&[total, 1, d], total, &mut rng))?;
        let dec_bias = params.push("decoder.bias", Tensor::uniform_init(&[d], total, &mut rng))?;
        Ok(Network {
            config,
            params,
            layout: Layout {
                ae,
                dec_weight,
                dec_bias,
                eo,
            },
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Network::new(config.clone(), params.init_seed())?;
        if template.params.len() != params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} parameter tensors, variant {} needs {}",
                params.len(),
                config.variant,
                template.params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let idx = params
                .index_of(name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {name}")))?;
            if params.get(idx).shape() != t.shape() {
                return Err(Error::data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(idx).shape(),
                    t.shape()
                )));
            }
        }
        let mut net = template;
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_owned()).collect();
        for (i, name) in names.iter().enumerate() {
            let src = params.index_of(name).expect("checked above");
            *net.params.get_mut(i) = params.get(src).clone();
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Overwrites the student encoder with the teacher encoder weights.
    pub fn copy_teacher_into_student(&mut self) -> Result<()> {
        let eo = self.layout.eo.clone().ok_or_else(|| Error::config("single-network variant has no student"))?;
        for (src, dst) in self.layout.ae.convs.iter().zip(&eo.convs) {
            *self.params.get_mut(dst.weight) = self.params.get(src.weight).clone();
            *self.params.get_mut(dst.bias) = self.params.get(src.bias).clone();
        }
        Ok(())
    }

    fn encode(&self, layout: &EncoderLayout, x: &Tensor, pad_mask: &[bool]) -> Result<EncoderOutput> {
        let (n, l) = (x.shape()[0], x.shape()[1]);
        let c = self.config.hidden;
        let total = self.config.repr_dim();
        let mut features = Tensor::zeros(&[n, total, l]);
        for (ki, slot) in layout.convs.iter().enumerate() {
            let out = conv_time(x, self.params.get(slot.weight), self.params.get(slot.bias))?;
            let fd = features.data_mut();
            for b in 0..n {
                let src = &out.data()[b * c * l..(b + 1) * c * l];
                let dst = (b * total + ki * c) * l;
                fd[dst..dst + c * l].copy_from_slice(src);
            }
        }
        relu_inplace(&mut features);
        let z = masked_mean_pool(&features, pad_mask)?;
        Ok(EncoderOutput { features, z })
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_backward(
        &self,
        layout: &EncoderLayout,
        x: &Tensor,
        out: &EncoderOutput,
        d_features: Option<Tensor>,
        d_z: &Tensor,
        pad_mask: &[bool],
        grads: &mut ParamSet,
    ) {
        let (n, l) = (x.shape()[0], x.shape()[1]);
        let c = self.config.hidden;
        let total = self.config.repr_dim();
        let mut d_f = d_features.unwrap_or_else(|| Tensor::zeros(out.features.shape()));
        masked_mean_pool_backward(d_z, pad_mask, &mut d_f);
        relu_backward_inplace(&out.features, &mut d_f);
        for (ki, slot) in layout.convs.iter().enumerate() {
            let mut d_out = Tensor::zeros(&[n, c, l]);
            let dd = d_out.data_mut();
            for b in 0..n {
                let src = (b * total + ki * c) * l;
                dd[b * c * l..(b + 1) * c * l].copy_from_slice(&d_f.data()[src..src + c * l]);
            }
            let (dw, db) = conv_time_backward(x, self.params.get(slot.weight).shape(), &d_out);
            grads.get_mut(slot.weight).add_assign(&dw);
            grads.get_mut(slot.bias).add_assign(&db);
        }
    }

    /// Teacher pass: reconstruction `N x L x d` and representation `N x l`.
    pub fn ae_forward(&self, x: &Tensor, pad_mask: &[bool]) -> Result<AeOutput> {
        let encoder = self.encode(&self.layout.ae, x, pad_mask)?;
        let reconstruction = tconv_embed(
            &encoder.features,
            self.params.get(self.layout.dec_weight),
            self.params.get(self.layout.dec_bias),
        )?;
        Ok(AeOutput {
            reconstruction,
            encoder,
        })
    }

    /// Student pass over the context view.
    pub fn eo_forward(&self, x_c: &Tensor, pad_mask: &[bool]) -> Result<EncoderOutput> {
        let eo = self
            .layout
            .eo
            .as_ref()
            .ok_or_else(|| Error::config("single-network variant has no student encoder"))?;
        self.encode(eo, x_c, pad_mask)
    }

    fn inputs(&self, batch: &SequenceBatch, plan: &MaskPlan) -> (Tensor, Option<Tensor>, Vec<bool>) {
        let variant = self.config.variant;
        let context = if variant.masking == MaskScheme::None {
            batch.x.clone()
        } else {
            apply_focus_mask(&batch.x, plan)
        };
        let ae_input = if variant.reconstruction == Reconstruction::Local {
            context.clone()
        } else {
            batch.x.clone()
        };
        let eo_input = (variant.network == NetworkKind::Dual).then_some(context);
        let target = match variant.reconstruction {
            Reconstruction::Global => batch.pad_mask.clone(),
            _ => plan.focus_positions.clone(),
        };
        (ae_input, eo_input, target)
    }

    /// Forward pass with all three losses. `teacher_target`, when given,
    /// replaces the teacher representation inside `L_p` (used to evaluate the
    /// loss with the stop-gradient made explicit).
    pub fn forward_losses(
        &self,
        batch: &SequenceBatch,
        plan: &MaskPlan,
        center: &[f64],
        teacher_target: Option<&Tensor>,
    ) -> Result<ForwardCache> {
        let (ae_input, eo_input, target) = self.inputs(batch, plan);
        let ae = self.ae_forward(&ae_input, &batch.pad_mask)?;
        let eo = match &eo_input {
            Some(x_c) => Some(self.eo_forward(x_c, &batch.pad_mask)?),
            None => None,
        };
        if center.len() != self.config.repr_dim() {
            return Err(Error::Numeric(format!(
                "center has {} entries, representation width is {}",
                center.len(),
                self.config.repr_dim()
            )));
        }
        let l_r = masked_mse(&batch.x, &ae.reconstruction, &target, batch.dim());
        let l_o = loss_oneclass(&ae.encoder.z, center);
        let teacher = teacher_target.cloned();
        let l_p = match &eo {
            Some(e) => loss_prediction(teacher.as_ref().unwrap_or(&ae.encoder.z), &e.z),
            None => 0.0,
        };
        let total = total_loss(l_r, l_p, l_o, self.config.alpha);
        Ok(ForwardCache {
            ae_input,
            eo_input,
            target,
            pad_mask: batch.pad_mask.clone(),
            x: batch.x.clone(),
            ae,
            eo,
            center: center.to_vec(),
            teacher_target: teacher,
            losses: LossBreakdown {
                reconstruction: l_r,
                oneclass: l_o,
                prediction: l_p,
                total,
            },
        })
    }

    /// Gradient of the total loss with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache) -> Result<ParamSet> {
        let mut grads = self.params.zeros_like();
        let d = self.config.embed_dim;
        let ae = &cache.ae;
        let n = ae.encoder.z.shape()[0];
        let width = self.config.repr_dim();

        let d_recon = masked_mse_grad(&ae.reconstruction, &cache.x, &cache.target, d, self.config.alpha);
        let (d_features, dw, db) = tconv_embed_backward(&ae.encoder.features, self.params.get(self.layout.dec_weight), &d_recon);
        grads.get_mut(self.layout.dec_weight).add_assign(&dw);
        grads.get_mut(self.layout.dec_bias).add_assign(&db);

        let mut d_za = Tensor::zeros(&[n, width]);
        for (i, (g, &z)) in d_za.data_mut().iter_mut().zip(ae.encoder.z.data()).enumerate() {
            *g = 2.0 * (z - cache.center[i % width]) / n as f64;
        }
        self.encode_backward(&self.layout.ae, &cache.ae_input, &ae.encoder, Some(d_features), &d_za, &cache.pad_mask, &mut grads);

        if let (Some(eo_layout), Some(eo), Some(eo_input)) = (&self.layout.eo, &cache.eo, &cache.eo_input) {
            let teacher = cache.teacher_target.as_ref().unwrap_or(&ae.encoder.z);
            let k = 2.0 / (n * width) as f64;
            let mut d_ze = Tensor::zeros(&[n, width]);
            for ((g, &ze), &za) in d_ze.data_mut().iter_mut().zip(eo.z.data()).zip(teacher.data()) {
                *g = k * (ze - za);
            }
            self.encode_backward(eo_layout, eo_input, eo, None, &d_ze, &cache.pad_mask, &mut grads);
        }
        grads.check_finite()?;
        Ok(grads)
    }

    /// Per-sequence anomaly scores for one batch under one plan.
    pub fn batch_scores(&self, batch: &SequenceBatch, plan: &MaskPlan) -> Result<Vec<f64>> {
        let (ae_input, eo_input, target) = self.inputs(batch, plan);
        let ae = self.ae_forward(&ae_input, &batch.pad_mask)?;
        match eo_input {
            Some(x_c) => {
                let eo = self.eo_forward(&x_c, &batch.pad_mask)?;
                Ok(prediction_scores(&ae.encoder.z, &eo.z))
            }
            None => Ok(reconstruction_scores(&batch.x, &ae.reconstruction, &target)),
        }
    }
}

/// `L_r`: masked MSE between `x` and `x_hat` over the paradigm's target positions.
pub fn loss_reconstruction(
    x: &Tensor,
    x_hat: &Tensor,
    plan: &MaskPlan,
    pad_mask: &[bool],
    paradigm: Reconstruction,
) -> f64 {
    let d = *x.shape().last().expect("rank 3");
    match paradigm {
        Reconstruction::Global => masked_mse(x, x_hat, pad_mask, d),
        _ => masked_mse(x, x_hat, &plan.focus_positions, d),
    }
}

/// `L_o = (1/N) sum_i |z_i - c|^2`.
pub fn loss_oneclass(z_a: &Tensor, center: &[f64]) -> f64 {
    let n = z_a.shape()[0];
    if n == 0 {
        return 0.0;
    }
    let width = center.len();
    let sum: f64 = z_a
        .data()
        .chunks(width)
        .map(|z| z.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>())
        .sum();
    sum / n as f64
}

/// `L_p = (1/(N l)) sum_i |z_i - z'_i|^2`.
pub fn loss_prediction(z_a: &Tensor, z_e: &Tensor) -> f64 {
    let scores = prediction_scores(z_a, z_e);
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// `alpha * L_r + L_p + L_o`; pass `l_p = 0` for single-network variants.
pub fn total_loss(l_r: f64, l_p: f64, l_o: f64, alpha: f64) -> f64 {
    alpha * l_r + l_p + l_o
}

/// `(1/l) |z_i - z'_i|^2` per row.
pub fn prediction_scores(z_a: &Tensor, z_e: &Tensor) -> Vec<f64> {
    let width = z_a.shape()[1];
    z_a.data()
        .chunks(width)
        .zip(z_e.data().chunks(width))
        .map(|(a, e)| a.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / width as f64)
        .collect()
}

/// Per-sequence masked MSE over the target positions (0 for rows with none).
pub fn reconstruction_scores(x: &Tensor, x_hat: &Tensor, target: &[bool]) -> Vec<f64> {
    let (n, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..n)
        .map(|b| {
            let mut sum = 0.0;
            let mut count = 0;
            for t in 0..l {
                if target[b * l + t] {
                    count += 1;
                    let off = (b * l + t) * d;
                    sum += x.data()[off..off + d]
                        .iter()
                        .zip(&x_hat.data()[off..off + d])
                        .map(|(a, h)| (a - h) * (a - h))
                        .sum::<f64>();
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / (count * d) as f64
            }
        })
        .collect()
}

/// A trained model together with everything needed to score new data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub network: Network,
    pub center: Vec<f64>,
    pub frequencies: FrequencyTable,
    pub embedding: EmbeddingTable,
    pub mask: MaskConfig,
    pub l_max: usize,
    pub epochs_trained: usize,
    /// Flattened configuration snapshot (`key = value`).
    pub snapshot: Vec<(String, String)>,
}

pub const SCORE_BATCH: usize = 256;

/// Anomaly score per sequence, averaged over the inference kappa set.
///
/// Dual variants score the teacher/student discrepancy; single variants
/// score the per-sequence reconstruction error over the target positions.
pub fn sequence_scores(state: &ModelState, sequences: &[EventSequence]) -> Result<Vec<f64>> {
    let kappas = state.mask.inference_kappas();
    let mut scores = Vec::with_capacity(sequences.len());
    let refs: Vec<&EventSequence> = sequences.iter().collect();
    for chunk in refs.chunks(SCORE_BATCH) {
        let batch = build_batch(chunk, &state.embedding, state.l_max)?;
        let mut acc = vec![0.0; chunk.len()];
        for &kappa in &kappas {
            let plan = MaskPlan::per_sequence(&batch, state.mask.scheme, kappa, &state.frequencies, state.mask.seed);
            for (a, s) in acc.iter_mut().zip(state.network.batch_scores(&batch, &plan)?) {
                *a += s;
            }
        }
        scores.extend(acc.into_iter().map(|a| a / kappas.len() as f64));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score for sequence {:?}", sequences[i].seq_id)));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::masking::MaskPlan;

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden: 3,
            kernels: vec![3, 4, 5],
            alpha: 50.0,
            variant,
        }
    }

    fn small_batch(rows: &[Vec<u32>]) -> SequenceBatch {
        let table = EmbeddingTable::from_templates((0..12).map(|i| format!("tok{}", (b'a' + i as u8) as char)), 4, 3, None);
        let seqs: Vec<EventSequence> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| EventSequence::new(format!("s{i}"), r.clone(), Label::Normal))
            .collect();
        let refs: Vec<&EventSequence> = seqs.iter().collect();
        build_batch(&refs, &table, 16).unwrap()
    }

    #[test]
    fn variant_codes_roundtrip() {
        for code in ABLATION_CODES {
            assert_eq!(Variant::parse(code).unwrap().code(), code);
        }
        assert!(Variant::parse("xyz").is_err());
        assert!(Variant::parse("snf").is_err());
        assert_eq!(Variant::parse("dff").unwrap(), Variant::FULL);
        let sng = Variant::parse("sng").unwrap();
        assert_eq!(sng.network, NetworkKind::Single);
        assert_eq!(sng.masking, MaskScheme::None);
        assert_eq!(sng.reconstruction, Reconstruction::Global);
    }

    #[test]
    fn default_shapes() {
        let net = Network::new(ModelConfig::default(), 0).unwrap();
        let x = Tensor::zeros(&[2, 10, 32]);
        let mask = vec![true; 20];
        let out = net.ae_forward(&x, &mask).unwrap();
        assert_eq!(out.reconstruction.shape(), &[2, 10, 32]);
        assert_eq!(out.encoder.z.shape(), &[2, 384]);
        let eo = net.eo_forward(&x, &mask).unwrap();
        assert_eq!(eo.z.shape(), &[2, 384]);
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let net = Network::new(small_config(Variant::FULL), 1).unwrap();
        let x = Tensor::zeros(&[1, 5, 4]);
        let out = net.ae_forward(&x, &[true; 5]).unwrap();
        let mut expected = Vec::new();
        for k in [3, 4, 5] {
            let b = net.params().get(net.params().index_of(&format!("ae.conv{k}.bias")).unwrap());
            expected.extend(b.data().iter().map(|v| v.max(0.0)));
        }
        for (a, e) in out.encoder.z.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_sequences_identical_outputs() {
        let net = Network::new(small_config(Variant::FULL), 2).unwrap();
        let b = small_batch(&[vec![1, 2, 3], vec![1, 2, 3]]);
        let out = net.ae_forward(&b.x, &b.pad_mask).unwrap();
        let z = out.encoder.z.data();
        assert_eq!(&z[..9], &z[9..]);
    }

    #[test]
    fn cloned_student_matches_teacher() {
        let mut net = Network::new(small_config(Variant::FULL), 3).unwrap();
        let b = small_batch(&[vec![1, 2, 3, 4], vec![5, 6]]);
        let za = net.ae_forward(&b.x, &b.pad_mask).unwrap().encoder.z;
        let ze = net.eo_forward(&b.x, &b.pad_mask).unwrap().z;
        assert_ne!(za, ze);
        net.copy_teacher_into_student().unwrap();
        let ze = net.eo_forward(&b.x, &b.pad_mask).unwrap().z;
        assert_eq!(za, ze);
    }

    #[test]
    fn loss_examples() {
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(loss_oneclass(&z, &[0.0, 0.0]), 2.0);
        assert_eq!(loss_oneclass(&z, &[1.0, 1.0]), 0.0);
        let shifted = Tensor::from_vec(&[1, 2], vec![4.0, -2.0]).unwrap();
        assert_eq!(loss_oneclass(&shifted, &[3.0, -3.0]), 2.0);

        let mut za = Tensor::zeros(&[1, 384]);
        let ze = Tensor::zeros(&[1, 384]);
        assert_eq!(loss_prediction(&za, &ze), 0.0);
        za.data_mut()[0] = 1.0;
        assert_eq!(loss_prediction(&za, &ze), 1.0 / 384.0);
        assert_eq!(loss_prediction(&ze, &za), 1.0 / 384.0);

        assert_eq!(total_loss(0.0, 0.0, 0.0, 50.0), 0.0);
        assert!((total_loss(0.01, 0.1, 0.2, 50.0) - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(0.01, 0.1, 0.2, 0.0), 0.1 + 0.2);
    }

    #[test]
    fn reconstruction_loss_single_focus() {
        let b = small_batch(&[vec![1, 2, 3]]);
        let x = Tensor::zeros(&[1, 3, 32]);
        let mut x_hat = Tensor::zeros(&[1, 3, 32]);
        x_hat.data_mut()[32] = 1.0;
        let plan = MaskPlan::for_batch(&b, [2].into_iter().collect(), MaskScheme::Frequency, 0.3);
        let lr = loss_reconstruction(&x, &x_hat, &plan, &b.pad_mask, Reconstruction::GlobalToLocal);
        assert_eq!(lr, 1.0 / 32.0);
        assert_eq!(loss_reconstruction(&x, &x, &plan, &b.pad_mask, Reconstruction::Global), 0.0);
    }

    #[test]
    fn cloned_student_without_masking_scores_zero() {
        let mut net = Network::new(small_config(Variant::parse("dng").unwrap()), 4).unwrap();
        net.copy_teacher_into_student().unwrap();
        let b = small_batch(&[vec![1, 2, 3, 4], vec![5, 6], vec![7, 8, 9]]);
        let plan = MaskPlan::per_sequence(&b, MaskScheme::None, 0.1, &FrequencyTable::default(), 0);
        let scores = net.batch_scores(&b, &plan).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0), "{scores:?}");
    }

    #[test]
    fn single_network_has_no_student() {
        let net = Network::new(small_config(Variant::parse("sff").unwrap()), 0).unwrap();
        assert!(net.params().index_of("eo.conv3.weight").is_none());
        assert!(net.eo_forward(&Tensor::zeros(&[1, 3, 4]), &[true; 3]).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = Network::new(small_config(Variant::FULL), 0).unwrap();
        let rebuilt = Network::from_params(net.config().clone(), net.params().clone()).unwrap();
        assert_eq!(rebuilt, net);
        let other = Network::new(small_config(Variant::parse("sng").unwrap()), 0).unwrap();
        assert!(Network::from_params(net.config().clone(), other.params().clone()).is_err());
    }

    fn random_batch(seed: u64, rows: &[usize]) -> SequenceBatch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<u32>> = rows.iter().map(|&n| (0..n).map(|_| rng.random_range(1..12)).collect()).collect();
        small_batch(&seqs)
    }

    fn plan_for(batch: &SequenceBatch, kappa: f64) -> MaskPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        MaskPlan::from_batch_frequencies(batch, MaskScheme::Frequency, kappa, &mut rng)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for code in ["dff", "drl", "sfl", "sng"] {
            let mut net = Network::new(small_config(Variant::parse(code).unwrap()), 11).unwrap();
            let batch = random_batch(5, &[6, 4, 5]);
            let plan = plan_for(&batch, 0.5);
            let center: Vec<f64> = (0..9).map(|i| 0.05 * i as f64).collect();
            let cache = net.forward_losses(&batch, &plan, &center, None).unwrap();
            let analytic = net.backward(&cache).unwrap();
            let teacher = cache.z_a().clone();
            let h = 1e-5;
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for p in 0..net.params().len() {
                for j in 0..net.params().get(p).len() {
                    let orig = net.params().get(p).data()[j];
                    net.params_mut().get_mut(p).data_mut()[j] = orig + h;
                    let up = net.forward_losses(&batch, &plan, &center, Some(&teacher)).unwrap().losses.total;
                    net.params_mut().get_mut(p).data_mut()[j] = orig - h;
                    let down = net.forward_losses(&batch, &plan, &center, Some(&teacher)).unwrap().losses.total;
                    net.params_mut().get_mut(p).data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic.get(p).data()[j];
                    diff2 += (a - numeric) * (a - numeric);
                    a2 += a * a;
                    n2 += numeric * numeric;
                }
            }
            let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt());
            assert!(rel < 1e-6, "{code}: relative gradient error {rel:e}");
        }
    }

    #[test]
    fn teacher_gradient_ignores_student() {
        let mut net = Network::new(small_config(Variant::FULL), 12).unwrap();
        let batch = random_batch(6, &[5, 5, 3]);
        let plan = plan_for(&batch, 0.4);
        let center = vec![0.1; 9];
        let before = net.backward(&net.forward_losses(&batch, &plan, &center, None).unwrap()).unwrap();
        let idx = net.params().index_of("eo.conv4.weight").unwrap();
        net.params_mut().get_mut(idx).scale(3.0);
        let after = net.backward(&net.forward_losses(&batch, &plan, &center, None).unwrap()).unwrap();
        let mut student_changed = false;
        for (i, (name, g)) in before.iter().enumerate() {
            if name.starts_with("eo.") {
                student_changed |= g != after.get(i);
            } else {
                assert_eq!(g, after.get(i), "{name}");
            }
        }
        assert!(student_changed);
    }

    #[test]
    fn g2l_ignores_context_perturbation() {
        let batch = random_batch(7, &[6, 3]);
        let plan = plan_for(&batch, 0.3);
        let mut x_hat = Tensor::zeros(batch.x.shape());
        let base = loss_reconstruction(&batch.x, &x_hat, &plan, &batch.pad_mask, Reconstruction::GlobalToLocal);
        let d = batch.dim();
        for (row, &focus) in plan.focus_positions.iter().enumerate() {
            if !focus {
                for v in &mut x_hat.data_mut()[row * d..(row + 1) * d] {
                    *v += 7.0;
                }
            }
        }
        let after = loss_reconstruction(&batch.x, &x_hat, &plan, &batch.pad_mask, Reconstruction::GlobalToLocal);
        assert_eq!(base, after);
        let grad = masked_mse_grad(&x_hat, &batch.x, &plan.focus_positions, d, 50.0);
        for (row, &focus) in plan.focus_positions.iter().enumerate() {
            if !focus {
                assert!(grad.data()[row * d..(row + 1) * d].iter().all(|&g| g == 0.0));
            }
        }
    }
}
