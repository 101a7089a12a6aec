//! Multi-scale restoration network.
//!
//! Convolutional encoders turn the global strip and one beat into token
//! sequences, a self-attention block mixes them, and upsampling decoders
//! emit reconstructions with per-sample uncertainty. A trend autoencoder,
//! an attribute head and a classifier head share the pooled global and trend
//! tokens.

use cardio_autodiff::layers::{Conv1d, LayerNorm, Linear, MultiHeadAttention};
use cardio_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const SIGMA_EPS: f64 = 1e-6;

/// Optional parts of the network, toggled for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Masked training inputs and the uncertainty head.
    pub masking: bool,
    /// Local beat branch and attention fusion.
    pub multiscale: bool,
    /// Trend autoencoder.
    pub trend: bool,
    /// Attribute prediction head.
    pub attributes: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::full()
    }
}

impl Components {
    pub fn full() -> Self {
        Self {
            masking: true,
            multiscale: true,
            trend: true,
            attributes: true,
        }
    }

    pub fn none() -> Self {
        Self {
            masking: false,
            multiscale: false,
            trend: false,
            attributes: false,
        }
    }

    /// Parse a comma list drawn from `mr`, `mc`, `tar`, `apm`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut c = Self::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "mr" => c.masking = true,
                "mc" => c.multiscale = true,
                "tar" => c.trend = true,
                "apm" => c.attributes = true,
                other => return Err(CoreError::Config(format!("unknown component {other:?}"))),
            }
        }
        Ok(c)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.masking {
            parts.push("MR");
        }
        if self.multiscale {
            parts.push("MC");
        }
        if self.trend {
            parts.push("TAR");
        }
        if self.attributes {
            parts.push("APM");
        }
        if parts.is_empty() {
            "None".into()
        } else {
            parts.join("+")
        }
    }

    /// The cumulative ablation ladder, starting from a plain autoencoder.
    pub fn ladder() -> [Components; 5] {
        let mut out = [Self::none(); 5];
        out[1].masking = true;
        out[2] = Components {
            multiscale: true,
            ..out[1]
        };
        out[3] = Components { trend: true, ..out[2] };
        out[4] = Self::full();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub global_len: usize,
    pub beat_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Channel counts of the strided encoder convolutions.
    pub encoder_widths: Vec<usize>,
    /// Channel counts of the decoder stages, one per encoder stage.
    pub decoder_widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub attr_hidden: usize,
    pub n_attributes: usize,
    pub cls_hidden: usize,
    pub cls_depth: usize,
    pub n_classes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            global_len: 5000,
            beat_len: 500,
            embed_dim: 32,
            heads: 4,
            encoder_widths: vec![8, 16, 32, 32],
            decoder_widths: vec![32, 16, 8, 4],
            kernel: 7,
            stride: 4,
            attr_hidden: 32,
            n_attributes: 7,
            cls_hidden: 32,
            cls_depth: 4,
            n_classes: 6,
            alpha: 1.0,
            beta: 1.0,
            components: Components::full(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("model: {m}")));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be at least 1");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads must divide embed_dim");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.decoder_widths.len() {
            return bad("encoder and decoder need the same, non-zero number of stages");
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|w| *w == 0) {
            return bad("zero channel width");
        }
        if self.kernel % 2 == 0 || self.stride == 0 {
            return bad("kernel must be odd and stride positive");
        }
        if self.n_attributes == 0 || self.attr_hidden == 0 || self.cls_hidden == 0 {
            return bad("head sizes must be positive");
        }
        for len in [self.global_len, self.beat_len] {
            if *self.stage_lengths(len).last().unwrap_or(&0) == 0 {
                return bad("input too short for the encoder");
            }
        }
        Ok(())
    }

    /// Sequence length before each encoder stage and after the last one.
    pub fn stage_lengths(&self, len: usize) -> Vec<usize> {
        let pad = self.kernel / 2;
        let mut out = vec![len];
        for _ in &self.encoder_widths {
            let l = *out.last().unwrap();
            if l + 2 * pad < self.kernel {
                out.push(0);
                break;
            }
            out.push((l + 2 * pad - self.kernel) / self.stride + 1);
        }
        out
    }

    pub fn global_tokens(&self) -> usize {
        *self.stage_lengths(self.global_len).last().unwrap()
    }

    pub fn local_tokens(&self) -> usize {
        *self.stage_lengths(self.beat_len).last().unwrap()
    }

    /// Width of the pooled feature vector fed to the heads.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim * if self.components.trend { 2 } else { 1 }
    }
}

/// Strided convolution stack producing `[tokens, embed_dim]`.
#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Conv1d>,
    proj: Linear,
    pos: ParamId,
    len: usize,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, len: usize, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                c_in,
                w,
                cfg.kernel,
                cfg.stride,
                cfg.kernel / 2,
                rng,
            )?);
            c_in = w;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), c_in, cfg.embed_dim, rng)?;
        let tokens = *cfg.stage_lengths(len).last().unwrap();
        let pos = store.add(format!("{name}.pos"), Tensor::uniform([tokens, cfg.embed_dim], 0.02, rng))?;
        Ok(Self { convs, proj, pos, len })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: &[f64]) -> Result<Var> {
        if x.len() != self.len {
            return Err(CoreError::Contract(format!(
                "encoder expects {} samples, got {}",
                self.len,
                x.len()
            )));
        }
        let mut h = g.constant(Tensor::new([1, x.len()], x.to_vec())?);
        for c in &self.convs {
            h = c.forward(g, store, h)?;
            h = g.gelu(h);
        }
        let t = g.transpose(h)?;
        let t = self.proj.forward(g, store, t)?;
        let pos = g.param(store, self.pos);
        Ok(g.add(t, pos)?)
    }
}

/// Upsample-and-convolve stack from `[tokens, embed_dim]` back to
/// `[out_channels, len]`.
#[derive(Debug, Clone)]
struct Decoder {
    convs: Vec<Conv1d>,
    head: Conv1d,
    lengths: Vec<usize>,
    stride: usize,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        len: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = cfg.embed_dim;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            convs.push(Conv1d::new(store, &format!("{name}.conv{i}"), c_in, w, cfg.kernel, 1, cfg.kernel / 2, rng)?);
            c_in = w;
        }
        let head = Conv1d::new(store, &format!("{name}.head"), c_in, out_channels, cfg.kernel, 1, cfg.kernel / 2, rng)?;
        let mut lengths = cfg.stage_lengths(len);
        lengths.pop();
        lengths.reverse();
        Ok(Self {
            convs,
            head,
            lengths,
            stride: cfg.stride,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut h = g.transpose(tokens)?;
        for (c, &target) in self.convs.iter().zip(&self.lengths) {
            h = g.upsample(h, self.stride)?;
            if g.shape(h)[1] != target {
                h = g.slice(h, 1, 0, target)?;
            }
            h = c.forward(g, store, h)?;
            h = g.gelu(h);
        }
        Ok(self.head.forward(g, store, h)?)
    }
}

/// Pre-norm transformer block over the concatenated tokens.
#[derive(Debug, Clone)]
struct FusionBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl FusionBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, 2 * dim, rng)?,
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), 2 * dim, dim, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n)?;
        let h = g.add(x, a)?;
        let n = self.norm2.forward(g, store, h)?;
        let m = self.mlp_in.forward(g, store, n)?;
        let m = g.gelu(m);
        let m = self.mlp_out.forward(g, store, m)?;
        Ok(g.add(h, m)?)
    }
}

#[derive(Debug, Clone)]
struct ResidualMlp {
    input: Linear,
    blocks: Vec<(LayerNorm, Linear, Linear)>,
    norm: LayerNorm,
    output: Linear,
}

impl ResidualMlp {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, hidden, rng)?;
        let mut blocks = Vec::new();
        for i in 0..depth {
            blocks.push((
                LayerNorm::new(store, &format!("{name}.block{i}.norm"), hidden)?,
                Linear::new(store, &format!("{name}.block{i}.fc1"), hidden, hidden, rng)?,
                Linear::new(store, &format!("{name}.block{i}.fc2"), hidden, hidden, rng)?,
            ));
        }
        Ok(Self {
            input,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden)?,
            output: Linear::new(store, &format!("{name}.output"), hidden, out_dim, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, store, x)?;
        for (norm, fc1, fc2) in &self.blocks {
            let n = norm.forward(g, store, h)?;
            let a = fc1.forward(g, store, n)?;
            let a = g.gelu(a);
            let a = fc2.forward(g, store, a)?;
            h = g.add(h, a)?;
        }
        let n = self.norm.forward(g, store, h)?;
        Ok(self.output.forward(g, store, n)?)
    }
}

/// Parameter-name prefix of the classifier head; everything else is the
/// backbone.
pub const CLASSIFIER_PREFIX: &str = "cls.";

/// Prefix of the fixed standardisation applied to pooled features before the
/// classifier. These values are set by [`RestorationModel::fit_feature_norm`]
/// and never receive gradients.
pub const FEATURE_NORM_PREFIX: &str = "featnorm.";

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[global_len]`.
    pub global_recon: Var,
    pub global_sigma: Option<Var>,
    /// `[beat_len]`.
    pub local_recon: Option<Var>,
    pub local_sigma: Option<Var>,
    pub trend_recon: Option<Var>,
    pub attr_pred: Option<Var>,
    /// Pooled features, `[feature_dim]`.
    pub features: Var,
}

/// What a forward pass should compute.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub global: &'a [f64],
    pub local: Option<&'a [f64]>,
    pub trend: Option<&'a [f64]>,
}

/// Materialised outputs of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationOutput {
    pub global_recon: Vec<f64>,
    /// All ones when the uncertainty head is disabled.
    pub sigma_g: Vec<f64>,
    pub local_recon: Option<Vec<f64>>,
    pub sigma_l: Option<Vec<f64>>,
    pub trend_recon: Option<Vec<f64>>,
    pub attr_pred: Option<Vec<f64>>,
    pub class_probs: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RestorationModel {
    pub config: ModelConfig,
    enc_global: Encoder,
    enc_local: Option<Encoder>,
    type_global: ParamId,
    type_local: Option<ParamId>,
    fusion: Option<FusionBlock>,
    dec_global: Decoder,
    dec_local: Option<Decoder>,
    trend_enc: Option<Encoder>,
    trend_mix: Option<Linear>,
    trend_dec: Option<Decoder>,
    attr_head: Option<(Linear, Linear)>,
    feature_shift: ParamId,
    feature_scale: ParamId,
    classifier: ResidualMlp,
}

impl RestorationModel {
    /// Register all parameters in `store`, drawing initial values from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.components;
        let out_ch = if c.masking { 2 } else { 1 };
        let e = config.embed_dim;
        let enc_global = Encoder::new(store, "enc_g", &config, config.global_len, rng)?;
        let type_global = store.add("enc_g.type", Tensor::uniform([e], 0.02, rng))?;
        let (enc_local, type_local, fusion, dec_local) = if c.multiscale {
            (
                Some(Encoder::new(store, "enc_l", &config, config.beat_len, rng)?),
                Some(store.add("enc_l.type", Tensor::uniform([e], 0.02, rng))?),
                Some(FusionBlock::new(store, "fuse", e, config.heads, rng)?),
                Some(Decoder::new(store, "dec_l", &config, config.beat_len, out_ch, rng)?),
            )
        } else {
            (None, None, None, None)
        };
        let dec_global = Decoder::new(store, "dec_g", &config, config.global_len, out_ch, rng)?;
        let (trend_enc, trend_mix, trend_dec) = if c.trend {
            (
                Some(Encoder::new(store, "trend.enc", &config, config.global_len, rng)?),
                Some(Linear::new(store, "trend.mix", 2 * e, e, rng)?),
                Some(Decoder::new(store, "trend.dec", &config, config.global_len, 1, rng)?),
            )
        } else {
            (None, None, None)
        };
        let feat = config.feature_dim();
        let attr_head = if c.attributes {
            Some((
                Linear::new(store, "attr.fc1", feat, config.attr_hidden, rng)?,
                Linear::new(store, "attr.fc2", config.attr_hidden, config.n_attributes, rng)?,
            ))
        } else {
            None
        };
        let feature_shift = store.add(format!("{FEATURE_NORM_PREFIX}shift"), Tensor::zeros([feat]))?;
        let feature_scale = store.add(format!("{FEATURE_NORM_PREFIX}scale"), Tensor::new([feat], vec![1.0; feat])?)?;
        store.set_trainable(FEATURE_NORM_PREFIX, false);
        let classifier = ResidualMlp::new(
            store,
            "cls",
            feat,
            config.cls_hidden,
            config.cls_depth,
            config.n_classes,
            rng,
        )?;
        Ok(Self {
            config,
            enc_global,
            enc_local,
            type_global,
            type_local,
            fusion,
            dec_global,
            dec_local,
            trend_enc,
            trend_mix,
            trend_dec,
            attr_head,
            feature_shift,
            feature_scale,
            classifier,
        })
    }

    pub fn encode_global(&self, g: &mut Graph, store: &ParamStore, x: &[f64]) -> Result<Var> {
        self.enc_global.forward(g, store, x)
    }

    pub fn encode_local(&self, g: &mut Graph, store: &ParamStore, x: &[f64]) -> Result<Var> {
        let enc = self
            .enc_local
            .as_ref()
            .ok_or_else(|| CoreError::Contract("local branch disabled".into()))?;
        enc.forward(g, store, x)
    }

    /// Self-attention over the concatenated token sequences; returns
    /// `[global_tokens + local_tokens, embed_dim]`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, global: Var, local: Var) -> Result<Var> {
        let (Some(fusion), Some(tl)) = (&self.fusion, self.type_local) else {
            return Err(CoreError::Contract("local branch disabled".into()));
        };
        let tg = g.param(store, self.type_global);
        let tl = g.param(store, tl);
        let gt = g.add(global, tg)?;
        let lt = g.add(local, tl)?;
        let all = g.concat(&[gt, lt], 0)?;
        fusion.forward(g, store, all)
    }

    fn split_output(&self, g: &mut Graph, out: Var) -> Result<(Var, Option<Var>)> {
        let len = g.shape(out)[1];
        let recon = g.slice(out, 0, 0, 1)?;
        let recon = g.reshape(recon, &[len])?;
        if !self.config.components.masking {
            return Ok((recon, None));
        }
        let s = g.slice(out, 0, 1, 2)?;
        let s = g.reshape(s, &[len])?;
        let s = g.softplus(s);
        Ok((recon, Some(g.add_scalar(s, SIGMA_EPS))))
    }

    /// Decode the global part of a token sequence (the first
    /// `global_tokens` rows).
    pub fn decode_global(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<(Var, Option<Var>)> {
        let tg = self.config.global_tokens();
        let part = if g.shape(tokens)[0] == tg {
            tokens
        } else {
            g.slice(tokens, 0, 0, tg)?
        };
        let out = self.dec_global.forward(g, store, part)?;
        self.split_output(g, out)
    }

    /// Decode the local part of a fused sequence (the rows after the global
    /// tokens).
    pub fn decode_local(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<(Var, Option<Var>)> {
        let dec = self
            .dec_local
            .as_ref()
            .ok_or_else(|| CoreError::Contract("local branch disabled".into()))?;
        let tg = self.config.global_tokens();
        let n = g.shape(fused)[0];
        let part = g.slice(fused, 0, tg, n)?;
        let out = dec.forward(g, store, part)?;
        self.split_output(g, out)
    }

    /// Trend tokens, `[global_tokens, embed_dim]`.
    pub fn encode_trend(&self, g: &mut Graph, store: &ParamStore, trend: &[f64]) -> Result<Var> {
        let enc = self
            .trend_enc
            .as_ref()
            .ok_or_else(|| CoreError::Contract("trend branch disabled".into()))?;
        enc.forward(g, store, trend)
    }

    /// Reconstruct the global signal from trend tokens and (pre-fusion)
    /// global tokens. `global = None` decodes from the trend alone.
    pub fn trend_autoencode(&self, g: &mut Graph, store: &ParamStore, trend_tokens: Var, global: Option<Var>) -> Result<Var> {
        let (Some(mix), Some(dec)) = (&self.trend_mix, &self.trend_dec) else {
            return Err(CoreError::Contract("trend branch disabled".into()));
        };
        let other = match global {
            Some(v) => v,
            None => {
                let shape = g.shape(trend_tokens).to_vec();
                g.constant(Tensor::zeros(shape))
            }
        };
        let both = g.concat(&[trend_tokens, other], 1)?;
        let h = mix.forward(g, store, both)?;
        let h = g.gelu(h);
        let out = dec.forward(g, store, h)?;
        Ok(g.reshape(out, &[self.config.global_len])?)
    }

    /// Mean-pooled global tokens, followed by the mean-pooled trend tokens
    /// when the trend branch is enabled.
    pub fn pooled_features(&self, g: &mut Graph, global: Var, trend: Option<Var>) -> Result<Var> {
        let mut parts = vec![g.mean_axis(global, 0)?];
        if let Some(t) = trend.filter(|_| self.config.components.trend) {
            parts.push(g.mean_axis(t, 0)?);
        }
        Ok(g.concat(&parts, 0)?)
    }

    pub fn predict_attributes(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let (fc1, fc2) = self
            .attr_head
            .as_ref()
            .ok_or_else(|| CoreError::Contract("attribute head disabled".into()))?;
        let h = fc1.forward(g, store, features)?;
        let h = g.gelu(h);
        let out = fc2.forward(g, store, h)?;
        Ok(g.reshape(out, &[self.config.n_attributes])?)
    }

    /// Per-class probabilities `[n_classes]`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let shift = g.constant(store.get(self.feature_shift).value.clone());
        let scale = g.constant(store.get(self.feature_scale).value.clone());
        let x = g.sub(features, shift)?;
        let x = g.mul(x, scale)?;
        let logits = self.classifier.forward(g, store, x)?;
        let logits = g.reshape(logits, &[self.config.n_classes])?;
        Ok(g.sigmoid(logits))
    }

    /// Full restoration pass. The local branch runs only when a beat is given
    /// and the branch is enabled; the trend branch needs `input.trend`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: ModelInput<'_>) -> Result<ForwardVars> {
        let c = self.config.components;
        let global = self.encode_global(g, store, input.global)?;
        let (global_recon, global_sigma, local_recon, local_sigma) = match input.local {
            Some(beat) if c.multiscale => {
                let local = self.encode_local(g, store, beat)?;
                let fused = self.fuse(g, store, global, local)?;
                let (gr, gs) = self.decode_global(g, store, fused)?;
                let (lr, ls) = self.decode_local(g, store, fused)?;
                (gr, gs, Some(lr), ls)
            }
            _ => {
                let (gr, gs) = self.decode_global(g, store, global)?;
                (gr, gs, None, None)
            }
        };
        let (trend_tokens, trend_recon) = match input.trend {
            Some(t) if c.trend => {
                let tt = self.encode_trend(g, store, t)?;
                let rec = self.trend_autoencode(g, store, tt, Some(global))?;
                (Some(tt), Some(rec))
            }
            _ => (None, None),
        };
        if c.trend && trend_tokens.is_none() {
            return Err(CoreError::Contract("trend branch enabled but no trend signal given".into()));
        }
        let features = self.pooled_features(g, global, trend_tokens)?;
        let attr_pred = if c.attributes {
            Some(self.predict_attributes(g, store, features)?)
        } else {
            None
        };
        Ok(ForwardVars {
            global_recon,
            global_sigma,
            local_recon,
            local_sigma,
            trend_recon,
            attr_pred,
            features,
        })
    }

    /// Forward pass with classification, materialised to plain vectors.
    pub fn infer(&self, store: &ParamStore, input: ModelInput<'_>) -> Result<RestorationOutput> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, input)?;
        let probs = self.classify(&mut g, store, f.features)?;
        let get = |v: Option<Var>| v.map(|v| g.data(v).to_vec());
        Ok(RestorationOutput {
            global_recon: g.data(f.global_recon).to_vec(),
            sigma_g: get(f.global_sigma).unwrap_or_else(|| vec![1.0; self.config.global_len]),
            local_recon: get(f.local_recon),
            sigma_l: match (f.local_recon, f.local_sigma) {
                (Some(_), None) => Some(vec![1.0; self.config.beat_len]),
                (_, s) => get(s),
            },
            trend_recon: get(f.trend_recon),
            attr_pred: get(f.attr_pred),
            class_probs: g.data(probs).to_vec(),
            features: g.data(f.features).to_vec(),
        })
    }

    /// Local reconstructions for several beats against one global strip,
    /// reusing the global tokens. Returns `(recon, sigma)` per beat.
    pub fn infer_beats(&self, store: &ParamStore, global: &[f64], beats: &[&[f64]]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if !self.config.components.multiscale || beats.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let gt = self.encode_global(&mut g, store, global)?;
        let mut out = Vec::with_capacity(beats.len());
        for beat in beats {
            let lt = self.encode_local(&mut g, store, beat)?;
            let fused = self.fuse(&mut g, store, gt, lt)?;
            let (r, s) = self.decode_local(&mut g, store, fused)?;
            let sigma = s.map_or_else(|| vec![1.0; self.config.beat_len], |s| g.data(s).to_vec());
            out.push((g.data(r).to_vec(), sigma));
        }
        Ok(out)
    }

    /// Standardise each pooled feature to zero mean and unit variance over
    /// `features`. Near-constant features keep unit scale.
    pub fn fit_feature_norm(&self, store: &mut ParamStore, features: &[Vec<f64>]) -> Result<()> {
        let dim = self.config.feature_dim();
        if features.is_empty() {
            return Ok(());
        }
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(CoreError::Contract(format!("expected {dim} features, got {}", f.len())));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-20 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        store.get_mut(self.feature_shift).value = Tensor::vector(mean);
        store.get_mut(self.feature_scale).value = Tensor::vector(scale);
        Ok(())
    }

    /// Parameter-name prefixes of everything except the classifier head.
    pub fn backbone_prefixes() -> &'static [&'static str] {
        &["enc_g.", "enc_l.", "fuse.", "dec_g.", "dec_l.", "trend.", "attr."]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn token_counts_at_defaults() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stage_lengths(5000), vec![5000, 1250, 313, 79, 20]);
        assert_eq!(cfg.stage_lengths(500), vec![500, 125, 32, 8, 2]);
    }

    #[test]
    fn ladder_labels() {
        let names: Vec<String> = Components::ladder().iter().map(Components::label).collect();
        assert_eq!(names, ["None", "MR", "MR+MC", "MR+MC+TAR", "MR+MC+TAR+APM"]);
        assert_eq!(Components::parse("mr, mc,tar,apm").unwrap(), Components::full());
        assert!(Components::parse("xyz").is_err());
    }

    #[test]
    fn output_shapes_at_defaults() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = RestorationModel::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let x = vec![0.0; 5000];
        let b = vec![0.0; 500];
        let out = model
            .infer(
                &store,
                ModelInput {
                    global: &x,
                    local: Some(&b),
                    trend: Some(&x),
                },
            )
            .unwrap();
        assert_eq!(out.global_recon.len(), 5000);
        assert_eq!(out.sigma_g.len(), 5000);
        assert_eq!(out.local_recon.as_ref().unwrap().len(), 500);
        assert_eq!(out.trend_recon.as_ref().unwrap().len(), 5000);
        assert_eq!(out.attr_pred.as_ref().unwrap().len(), 7);
        assert_eq!(out.class_probs.len(), 6);
        assert!(out.sigma_g.iter().all(|s| *s > 0.0));
        assert!(out.global_recon.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_length_rejected() {
        let mut store = ParamStore::new();
        let model = RestorationModel::new(ModelConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        assert!(matches!(model.encode_global(&mut g, &store, &[0.0; 10]), Err(CoreError::Contract(_))));
    }
}
