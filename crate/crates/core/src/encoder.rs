//! Feature extraction, weakly-supervised instrument localization, and the
//! bottleneck producing the global triplet feature.

use crate::error::{CoreError, Result};
use crate::layers::{Conv2dLayer, ParamReg};
use crate::tensor::{Graph, NodeId, Padding, PoolMode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Model geometry and class sizes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Backbone output depth D.
    pub depth: usize,
    pub c_i: usize,
    pub c_v: usize,
    pub c_t: usize,
    pub c: usize,
    /// Decoder stack depth L.
    pub decoder_layers: usize,
    /// Attention head count; the standard model uses 4 (1 self + 3 cross).
    pub heads: usize,
    /// Dropout rate on the decoder query path, active in training only.
    pub q_dropout: f64,
    pub wsl_hidden: usize,
    pub bottleneck_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_h: 32,
            img_w: 56,
            feat_h: 8,
            feat_w: 14,
            depth: 32,
            c_i: 6,
            c_v: 10,
            c_t: 15,
            c: 100,
            decoder_layers: 8,
            heads: 4,
            q_dropout: 0.3,
            wsl_hidden: 64,
            bottleneck_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.img_h,
            self.img_w,
            self.feat_h,
            self.feat_w,
            self.depth,
            self.c_i,
            self.c_v,
            self.c_t,
            self.c,
            self.decoder_layers,
            self.wsl_hidden,
            self.bottleneck_hidden,
        ];
        if extents.iter().any(|&e| e == 0) {
            return Err(CoreError::contract("config: all extents must be >= 1"));
        }
        if self.heads != 4 {
            return Err(CoreError::contract("config: the standard model uses 4 heads"));
        }
        // The backbone downsamples by 4 (strides 2,2,1,1).
        if self.img_h != self.feat_h * 4 || self.img_w != self.feat_w * 4 {
            return Err(CoreError::contract(
                "config: image extents must be 4x the feature extents",
            ));
        }
        if !(0.0..1.0).contains(&self.q_dropout) {
            return Err(CoreError::contract("config: q_dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Backbone outputs: triplicated high-level features plus a low-level tap.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub x_i: NodeId,
    pub x_v: NodeId,
    pub x_t: NodeId,
    pub x_0: NodeId,
}

/// Small strided CNN standing in for a ResNet backbone. Four blocks with
/// strides 2,2,1,1 so the last two preserve resolution.
#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Conv2dLayer>,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c1 = (cfg.depth / 4).max(4);
        let c2 = (cfg.depth / 2).max(8);
        let chans = [3, c1, c2, cfg.depth, cfg.depth];
        let strides = [2, 2, 1, 1];
        let blocks = (0..4)
            .map(|i| {
                Conv2dLayer::new(3, 3, chans[i], chans[i + 1], strides[i], Padding::Same, rng)
            })
            .collect();
        Backbone { blocks }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{}.block{}", prefix, i), f);
        }
    }

    /// Forward pass producing the triplicated high-level feature and the
    /// low-level tap (block-1 output, resampled to feature resolution).
    pub fn extract_features(
        &self,
        g: &mut Graph,
        image: NodeId,
        cfg: &ModelConfig,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<FeatureBundle> {
        let s = g.value(image).shape();
        if s != [cfg.img_h, cfg.img_w, 3] {
            return Err(CoreError::dim(format!(
                "extract_features: image shape {:?}, expected [{}, {}, 3]",
                s, cfg.img_h, cfg.img_w
            )));
        }
        let mut x = image;
        let mut x0 = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let bound = block.bind(g, train, reg, &format!("{}.block{}", prefix, i));
            x = bound.forward(g, x)?;
            x = g.relu(x);
            if i == 0 {
                x0 = Some(x);
            }
        }
        let x0 = g.resize_nearest(x0.unwrap(), cfg.feat_h, cfg.feat_w)?;
        Ok(FeatureBundle {
            x_i: x,
            x_v: x,
            x_t: x,
            x_0: x0,
        })
    }
}

/// Weakly-supervised localization head: 3×3 conv to a hidden width, then a
/// 1×1 conv to C_I class activation maps whose GMP values are the logits.
#[derive(Debug, Clone)]
pub struct WslHead {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl WslHead {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        WslHead {
            conv1: Conv2dLayer::new(3, 3, cfg.depth, cfg.wsl_hidden, 1, Padding::Same, rng),
            conv2: Conv2dLayer::new(1, 1, cfg.wsl_hidden, cfg.c_i, 1, Padding::Same, rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit(&format!("{}.conv1", prefix), f);
        self.conv2.visit(&format!("{}.conv2", prefix), f);
    }

    /// Returns (H_I, Y_I) with Y_I == global max pool of H_I.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_i: NodeId,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<(NodeId, NodeId)> {
        let c1 = self.conv1.bind(g, train, reg, &format!("{}.conv1", prefix));
        let c2 = self.conv2.bind(g, train, reg, &format!("{}.conv2", prefix));
        let h = c1.forward(g, x_i)?;
        let h = g.relu(h);
        let cam = c2.forward(g, h)?;
        let logits = g.global_pool(cam, PoolMode::Max)?;
        Ok((cam, logits))
    }
}

/// Bottleneck: 3×3 conv to a hidden width then 1×1 conv to C channels,
/// turning the low-level tap into the global triplet feature H_IVT.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl Bottleneck {
    pub fn new<R: Rng>(cfg: &ModelConfig, x0_channels: usize, rng: &mut R) -> Self {
        Bottleneck {
            conv1: Conv2dLayer::new(3, 3, x0_channels, cfg.bottleneck_hidden, 1, Padding::Same, rng),
            conv2: Conv2dLayer::new(1, 1, cfg.bottleneck_hidden, cfg.c, 1, Padding::Same, rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit(&format!("{}.conv1", prefix), f);
        self.conv2.visit(&format!("{}.conv2", prefix), f);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x_0: NodeId,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<NodeId> {
        let c1 = self.conv1.bind(g, train, reg, &format!("{}.conv1", prefix));
        let c2 = self.conv2.bind(g, train, reg, &format!("{}.conv2", prefix));
        let h = c1.forward(g, x_0)?;
        let h = g.relu(h);
        c2.forward(g, h)
    }
}

/// One weakly-supervised detection: class id, tight box in image coordinates,
/// and the component's peak sigmoid score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub class_id: usize,
    /// (x0, y0, x1, y1) inclusive box in image pixels.
    pub bbox: (usize, usize, usize, usize),
    pub score: f64,
}

/// Boxes from a class activation map: per channel, sigmoid-normalize,
/// binarize at `threshold`, take 4-connected components, and emit tight
/// axis-aligned boxes scaled to image coordinates.
pub fn extract_boxes(
    h_i: &Tensor,
    threshold: f64,
    img_h: usize,
    img_w: usize,
) -> Result<Vec<Detection>> {
    let s = h_i.shape();
    if s.len() != 3 {
        return Err(CoreError::dim("extract_boxes: map must be HxWxC"));
    }
    if !h_i.is_finite() {
        return Err(CoreError::Numeric("extract_boxes: non-finite map".to_string()));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(CoreError::contract("extract_boxes: threshold must be in (0,1)"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let sy = img_h as f64 / h as f64;
    let sx = img_w as f64 / w as f64;
    let mut out = Vec::new();
    for ch in 0..c {
        let prob: Vec<f64> = (0..h * w)
            .map(|p| 1.0 / (1.0 + (-h_i.data()[p * c + ch]).exp()))
            .collect();
        let mask: Vec<bool> = prob.iter().map(|&p| p >= threshold).collect();
        let mut visited = vec![false; h * w];
        for start in 0..h * w {
            if !mask[start] || visited[start] {
                continue;
            }
            // flood fill one 4-connected component
            let mut stack = vec![start];
            visited[start] = true;
            let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
            let mut score = f64::NEG_INFINITY;
            while let Some(p) = stack.pop() {
                let (py, px) = (p / w, p % w);
                y0 = y0.min(py);
                x0 = x0.min(px);
                y1 = y1.max(py);
                x1 = x1.max(px);
                score = score.max(prob[p]);
                let mut try_push = |q: usize| {
                    if mask[q] && !visited[q] {
                        visited[q] = true;
                        stack.push(q);
                    }
                };
                if py > 0 {
                    try_push(p - w);
                }
                if py + 1 < h {
                    try_push(p + w);
                }
                if px > 0 {
                    try_push(p - 1);
                }
                if px + 1 < w {
                    try_push(p + 1);
                }
            }
            out.push(Detection {
                class_id: ch,
                bbox: (
                    (x0 as f64 * sx).floor() as usize,
                    (y0 as f64 * sy).floor() as usize,
                    ((x1 + 1) as f64 * sx).ceil() as usize - 1,
                    ((y1 + 1) as f64 * sy).ceil() as usize - 1,
                ),
                score,
            });
        }
    }
    Ok(out)
}
