//! Model variants assembled from the encoder, CAGAM, and MHMA building
//! blocks: a naive CNN triplet classifier, a multi-task baseline, the
//! CAGAM-only variant, and the full encoder-decoder model (with a self-only
//! decoder ablation).

use crate::cagam::{AttentionKind, CagamBranch, CagamOut};
use crate::encoder::{Backbone, Bottleneck, ModelConfig, WslHead};
use crate::error::{CoreError, Result};
use crate::layers::{Conv2dLayer, ParamReg};
use crate::mhma::{Classifier, Decoder, HeadMode};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, NodeId, Padding, PoolMode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Model variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Backbone plus a direct triplet head; no component supervision.
    NaiveCnn,
    /// Multi-task baseline: component heads without attention guidance.
    Mtl,
    /// Component heads with CAGAM guidance, no decoder.
    CagamTripnet,
    /// Full model with a self-attention-only decoder (4 self heads).
    RdvSelfOnly,
    /// Full model: CAGAM encoder + mixed-attention decoder.
    Rdv,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive-cnn" => Ok(Variant::NaiveCnn),
            "mtl" => Ok(Variant::Mtl),
            "cagam-tripnet" => Ok(Variant::CagamTripnet),
            "rdv-self-only" => Ok(Variant::RdvSelfOnly),
            "rdv" => Ok(Variant::Rdv),
            other => Err(CoreError::contract(format!("unknown variant {:?}", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NaiveCnn => "naive-cnn",
            Variant::Mtl => "mtl",
            Variant::CagamTripnet => "cagam-tripnet",
            Variant::RdvSelfOnly => "rdv-self-only",
            Variant::Rdv => "rdv",
        }
    }

    fn has_cagam(&self) -> bool {
        matches!(self, Variant::CagamTripnet | Variant::RdvSelfOnly | Variant::Rdv)
    }

    fn decoder_mode(&self) -> Option<HeadMode> {
        match self {
            Variant::RdvSelfOnly => Some(HeadMode::MultiSelf),
            Variant::Rdv => Some(HeadMode::Mixed),
            _ => None,
        }
    }
}

/// Unguided 1×1 conv head with global average pooled logits (MTL baseline).
#[derive(Debug, Clone)]
struct PlainHead {
    conv: Conv2dLayer,
}

impl PlainHead {
    fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        PlainHead {
            conv: Conv2dLayer::new(1, 1, cin, cout, 1, Padding::Same, rng),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit(&format!("{}.conv", prefix), f);
    }

    /// Returns (class maps, GAP logits).
    fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<(NodeId, NodeId)> {
        let conv = self.conv.bind(g, train, reg, &format!("{}.conv", prefix));
        let maps = conv.forward(g, x)?;
        let logits = g.global_pool(maps, PoolMode::Avg)?;
        Ok((maps, logits))
    }
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits_i: Option<NodeId>,
    pub logits_v: Option<NodeId>,
    pub logits_t: Option<NodeId>,
    pub logits_ivt: NodeId,
    /// Instrument class activation maps (H×W×C_I), when the variant has them.
    pub cam_i: Option<NodeId>,
    /// CAGAM branch outputs, when the variant uses guidance.
    pub cagam_verb: Option<CagamOut>,
    pub cagam_target: Option<CagamOut>,
}

/// A complete model: owns all parameters, builds a fresh graph per pass.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub cfg: ModelConfig,
    backbone: Backbone,
    naive_head: Option<PlainHead>,
    wsl: Option<WslHead>,
    verb_plain: Option<PlainHead>,
    target_plain: Option<PlainHead>,
    verb_cagam: Option<CagamBranch>,
    target_cagam: Option<CagamBranch>,
    bottleneck: Option<Bottleneck>,
    decoder: Option<Decoder>,
    classifier: Option<Classifier>,
    triplet_plain: Option<PlainHead>,
}

impl Model {
    pub fn new<R: Rng>(variant: Variant, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Self::with_head_mode(variant, cfg, variant.decoder_mode(), rng)
    }

    /// Builds with an explicit decoder head mode (ablation hook); `mode` is
    /// ignored for variants without a decoder.
    pub fn with_head_mode<R: Rng>(
        variant: Variant,
        cfg: &ModelConfig,
        mode: Option<HeadMode>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let x0_channels = (cfg.depth / 4).max(4);
        let backbone = Backbone::new(cfg, rng);
        let has_decoder = variant.decoder_mode().is_some();
        let mut m = Model {
            variant,
            cfg: cfg.clone(),
            backbone,
            naive_head: None,
            wsl: None,
            verb_plain: None,
            target_plain: None,
            verb_cagam: None,
            target_cagam: None,
            bottleneck: None,
            decoder: None,
            classifier: None,
            triplet_plain: None,
        };
        if variant == Variant::NaiveCnn {
            m.naive_head = Some(PlainHead::new(cfg.depth, cfg.c, rng));
            return Ok(m);
        }
        m.wsl = Some(WslHead::new(cfg, rng));
        if variant.has_cagam() {
            m.verb_cagam = Some(CagamBranch::new(
                AttentionKind::Channel,
                cfg.depth,
                cfg.c_i,
                cfg.c_v,
                rng,
            ));
            m.target_cagam = Some(CagamBranch::new(
                AttentionKind::Position,
                cfg.depth,
                cfg.c_i,
                cfg.c_t,
                rng,
            ));
        } else {
            m.verb_plain = Some(PlainHead::new(cfg.depth, cfg.c_v, rng));
            m.target_plain = Some(PlainHead::new(cfg.depth, cfg.c_t, rng));
        }
        m.bottleneck = Some(Bottleneck::new(cfg, x0_channels, rng));
        if has_decoder {
            let mode = mode.unwrap_or(HeadMode::Mixed);
            m.decoder = Some(Decoder::new(
                mode,
                cfg.decoder_layers,
                cfg.c,
                cfg.c_i,
                cfg.c_v,
                cfg.c_t,
                rng,
            )?);
            m.classifier = Some(Classifier::new(cfg.c, rng));
        } else {
            m.triplet_plain = Some(PlainHead::new(cfg.c, cfg.c, rng));
        }
        Ok(m)
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit("backbone", f);
        if let Some(h) = &mut self.naive_head {
            h.visit("naive_head", f);
        }
        if let Some(w) = &mut self.wsl {
            w.visit("wsl", f);
        }
        if let Some(h) = &mut self.verb_plain {
            h.visit("verb_plain", f);
        }
        if let Some(h) = &mut self.target_plain {
            h.visit("target_plain", f);
        }
        if let Some(b) = &mut self.verb_cagam {
            b.visit("verb_cagam", f);
        }
        if let Some(b) = &mut self.target_cagam {
            b.visit("target_cagam", f);
        }
        if let Some(b) = &mut self.bottleneck {
            b.visit("bottleneck", f);
        }
        if let Some(d) = &mut self.decoder {
            d.visit("decoder", f);
        }
        if let Some(c) = &mut self.classifier {
            c.visit("classifier", f);
        }
        if let Some(h) = &mut self.triplet_plain {
            h.visit("triplet_plain", f);
        }
    }

    /// Total scalar parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameter names reaching only the triplet classifier path (the decoder
    /// and final classifier); these feed only the association loss.
    pub fn association_only_prefixes(&self) -> Vec<&'static str> {
        match self.variant {
            Variant::NaiveCnn => vec![],
            Variant::Mtl | Variant::CagamTripnet => vec!["bottleneck", "triplet_plain"],
            Variant::RdvSelfOnly | Variant::Rdv => {
                vec!["bottleneck", "decoder", "classifier"]
            }
        }
    }

    /// Forward pass on one image (H_img×W_img×3).
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        image: NodeId,
        train: bool,
        rng: &mut R,
        reg: &mut ParamReg,
    ) -> Result<ModelOutput> {
        let feats = self
            .backbone
            .extract_features(g, image, &self.cfg, train, reg, "backbone")?;

        if let Some(head) = &self.naive_head {
            let (_, logits) = head.forward(g, feats.x_i, train, reg, "naive_head")?;
            return Ok(ModelOutput {
                logits_i: None,
                logits_v: None,
                logits_t: None,
                logits_ivt: logits,
                cam_i: None,
                cagam_verb: None,
                cagam_target: None,
            });
        }

        let wsl = self.wsl.as_ref().expect("component variants have a WSL head");
        let (cam_i, logits_i) = wsl.forward(g, feats.x_i, train, reg, "wsl")?;

        let (logits_v, logits_t, cagam_verb, cagam_target, h_v, h_t);
        if let (Some(vb), Some(tb)) = (&self.verb_cagam, &self.target_cagam) {
            let vout = vb.forward(g, feats.x_v, cam_i, train, reg, "verb_cagam")?;
            let tout = tb.forward(g, feats.x_t, cam_i, train, reg, "target_cagam")?;
            logits_v = vout.logits;
            logits_t = tout.logits;
            h_v = vout.class_maps;
            h_t = tout.class_maps;
            cagam_verb = Some(vout);
            cagam_target = Some(tout);
        } else {
            let (mv, lv) = self
                .verb_plain
                .as_ref()
                .unwrap()
                .forward(g, feats.x_v, train, reg, "verb_plain")?;
            let (mt, lt) = self
                .target_plain
                .as_ref()
                .unwrap()
                .forward(g, feats.x_t, train, reg, "target_plain")?;
            logits_v = lv;
            logits_t = lt;
            h_v = mv;
            h_t = mt;
            cagam_verb = None;
            cagam_target = None;
        }

        let bottleneck = self.bottleneck.as_ref().expect("component variants have a bottleneck");
        let h_ivt = bottleneck.forward(g, feats.x_0, train, reg, "bottleneck")?;

        let logits_ivt = if let Some(decoder) = &self.decoder {
            let refined = decoder.decode(
                g,
                h_ivt,
                cam_i,
                h_v,
                h_t,
                self.cfg.q_dropout,
                train,
                rng,
                reg,
                "decoder",
            )?;
            self.classifier
                .as_ref()
                .expect("decoder variants have a classifier")
                .forward(g, refined, train, reg, "classifier")?
        } else {
            let (_, logits) = self
                .triplet_plain
                .as_ref()
                .expect("non-decoder variants have a plain triplet head")
                .forward(g, h_ivt, train, reg, "triplet_plain")?;
            logits
        };

        Ok(ModelOutput {
            logits_i: Some(logits_i),
            logits_v: Some(logits_v),
            logits_t: Some(logits_t),
            logits_ivt,
            cam_i: Some(cam_i),
            cagam_verb,
            cagam_target,
        })
    }

    /// Saves all parameters into a checkpoint with the given manifest.
    pub fn save_checkpoint(&mut self, manifest: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::new(manifest);
        self.visit(&mut |name, t| ckpt.insert(&name, t));
        ckpt
    }

    /// Restores all parameters from a checkpoint; every parameter must be
    /// present with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut err = None;
        self.visit(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match ckpt.tensor(&name) {
                Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Ok(loaded) => {
                    err = Some(CoreError::format(format!(
                        "checkpoint: {} has shape {:?}, model expects {:?}",
                        name,
                        loaded.shape(),
                        t.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
