//! Small pose estimator: strided convolutional backbone, coordinate
//! classification head, and the 1x1 projection used for feature matching.
//!
//! The backbone is a stack of 3x3 stride-2 convolutions followed by a 1x1
//! convolution to `feature_dim` channels, all with SiLU. The head maps the
//! feature map to one spatial map per keypoint (1x1 conv), flattens each map,
//! runs a shared hidden layer, and emits x and y logits with two shared
//! linear classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, ConvGeom, Tensor};
use crate::simcc::SimCCConfig;
use crate::tensor::{FeatureMap, PoseLogits};

const BACKBONE_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
const PROJECTION_STREAM: u64 = 3;

/// Single-channel image, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the stride-2 3x3 stages.
    pub backbone_channels: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub num_keypoints: usize,
    pub simcc: SimCCConfig,
    #[serde(default)]
    pub init_seed: u64,
    /// Backbone stage whose output is matched during feature distillation;
    /// `None` is the final stage.
    #[serde(default)]
    pub distill_tap: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.simcc.validate()?;
        let widths_ok = !self.backbone_channels.is_empty()
            && self.backbone_channels.iter().all(|c| *c >= 1)
            && self.feature_dim >= 1
            && self.head_hidden >= 1
            && self.num_keypoints >= 1;
        if !widths_ok {
            return Err(Error::Config("all model widths must be >= 1".into()));
        }
        let (h, w) = self.feature_hw();
        if h == 0 || w == 0 {
            return Err(Error::Config("input too small for the stride schedule".into()));
        }
        if let Some(tap) = self.distill_tap {
            if tap > self.backbone_channels.len() {
                return Err(Error::Config(format!(
                    "distill_tap {tap} exceeds the {} backbone stages",
                    self.backbone_channels.len() + 1
                )));
            }
        }
        Ok(())
    }

    fn stage_geoms(&self) -> Vec<ConvGeom> {
        let (mut h, mut w, mut cin) = (self.simcc.input_height, self.simcc.input_width, 1);
        let mut geoms = Vec::new();
        for &c in &self.backbone_channels {
            let g = ConvGeom {
                cin,
                h,
                w,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            (h, w) = g.out_hw();
            cin = c;
            geoms.push(g);
        }
        geoms.push(ConvGeom {
            cin,
            h,
            w,
            kernel: 1,
            stride: 1,
            pad: 0,
        });
        geoms
    }

    fn stage_widths(&self) -> Vec<usize> {
        let mut widths = self.backbone_channels.clone();
        widths.push(self.feature_dim);
        widths
    }

    /// Spatial size of the final feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let g = self.stage_geoms();
        g.last().map_or((0, 0), |g| g.out_hw())
    }

    /// `(C, H, W)` of the final feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.feature_hw();
        (self.feature_dim, h, w)
    }

    pub fn tap_index(&self) -> usize {
        self.distill_tap.unwrap_or(self.backbone_channels.len())
    }

    /// `(C, H, W)` of the stage used for feature distillation.
    pub fn tap_shape(&self) -> (usize, usize, usize) {
        let tap = self.tap_index();
        let (h, w) = self.stage_geoms()[tap].out_hw();
        (self.stage_widths()[tap], h, w)
    }
}

/// One convolution + SiLU stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<ConvLayer>,
    geoms: Vec<ConvGeom>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `K x C`
    pub keypoint_weight: Tensor,
    pub keypoint_bias: Tensor,
    /// `(H*W) x hidden`
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    /// `hidden x L_x`
    pub x_weight: Tensor,
    pub x_bias: Tensor,
    /// `hidden x L_y`
    pub y_weight: Tensor,
    pub y_bias: Tensor,
}

/// Model parameters, partitioned so either side can be frozen or replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
}

/// Learnable 1x1 convolution mapping student channels to teacher channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `C_t x C_s`
    pub weight: Tensor,
    pub bias: Tensor,
}

pub trait NamedTensors {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.data.fill(0.0);
        }
    }

    /// All values concatenated in [`NamedTensors::named`] order.
    fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

impl NamedTensors for Backbone {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                [
                    (format!("backbone.stage{i}.weight"), &s.weight),
                    (format!("backbone.stage{i}.bias"), &s.bias),
                ]
            })
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| {
                [
                    (format!("backbone.stage{i}.weight"), &mut s.weight),
                    (format!("backbone.stage{i}.bias"), &mut s.bias),
                ]
            })
            .collect()
    }
}

impl NamedTensors for Head {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.keypoint.weight".into(), &self.keypoint_weight),
            ("head.keypoint.bias".into(), &self.keypoint_bias),
            ("head.hidden.weight".into(), &self.hidden_weight),
            ("head.hidden.bias".into(), &self.hidden_bias),
            ("head.cls_x.weight".into(), &self.x_weight),
            ("head.cls_x.bias".into(), &self.x_bias),
            ("head.cls_y.weight".into(), &self.y_weight),
            ("head.cls_y.bias".into(), &self.y_bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.keypoint.weight".into(), &mut self.keypoint_weight),
            ("head.keypoint.bias".into(), &mut self.keypoint_bias),
            ("head.hidden.weight".into(), &mut self.hidden_weight),
            ("head.hidden.bias".into(), &mut self.hidden_bias),
            ("head.cls_x.weight".into(), &mut self.x_weight),
            ("head.cls_x.bias".into(), &mut self.x_bias),
            ("head.cls_y.weight".into(), &mut self.y_weight),
            ("head.cls_y.bias".into(), &mut self.y_bias),
        ]
    }
}

impl NamedTensors for ModelParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named();
        v.extend(self.head.named());
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.backbone.named_mut();
        v.extend(self.head.named_mut());
        v
    }
}

impl NamedTensors for Projection {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("projection.weight".into(), &self.weight),
            ("projection.bias".into(), &self.bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("projection.weight".into(), &mut self.weight),
            ("projection.bias".into(), &mut self.bias),
        ]
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn init_backbone(cfg: &ModelConfig, seed: u64) -> Backbone {
    let mut rng = rng_for(seed, BACKBONE_STREAM);
    let geoms = cfg.stage_geoms();
    let stages = geoms
        .iter()
        .zip(cfg.stage_widths())
        .map(|(g, cout)| {
            let fan_in = g.col_rows();
            ConvLayer {
                weight: Tensor::uniform(&[cout, fan_in], (6.0 / fan_in as f64).sqrt(), &mut rng),
                bias: Tensor::zeros(&[cout]),
            }
        })
        .collect();
    Backbone { stages, geoms }
}

fn init_head(cfg: &ModelConfig, seed: u64) -> Head {
    let mut rng = rng_for(seed, HEAD_STREAM);
    let (k, c, hd) = (cfg.num_keypoints, cfg.feature_dim, cfg.head_hidden);
    let (fh, fw) = cfg.feature_hw();
    let s = fh * fw;
    let (lx, ly) = (cfg.simcc.bins_x(), cfg.simcc.bins_y());
    let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    Head {
        keypoint_weight: Tensor::uniform(&[k, c], (6.0 / c as f64).sqrt(), &mut rng),
        keypoint_bias: Tensor::zeros(&[k]),
        hidden_weight: Tensor::uniform(&[s, hd], (6.0 / s as f64).sqrt(), &mut rng),
        hidden_bias: Tensor::zeros(&[hd]),
        x_weight: Tensor::uniform(&[hd, lx], xavier(hd, lx), &mut rng),
        x_bias: Tensor::zeros(&[lx]),
        y_weight: Tensor::uniform(&[hd, ly], xavier(hd, ly), &mut rng),
        y_bias: Tensor::zeros(&[ly]),
    }
}

/// Deterministic in `(cfg, seed)`. Backbone and head draw from separate
/// random streams.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    Ok(ModelParams {
        config: cfg.clone(),
        backbone: init_backbone(cfg, seed),
        head: init_head(cfg, seed),
    })
}

/// Replaces the head with a freshly initialized one; the backbone is untouched.
pub fn reinit_head(params: &ModelParams, seed: u64) -> ModelParams {
    ModelParams {
        config: params.config.clone(),
        backbone: params.backbone.clone(),
        head: init_head(&params.config, seed),
    }
}

/// Projection from the student's tap channels to the teacher's. Identity
/// when the channel counts match, seeded uniform otherwise.
pub fn init_projection(student: &ModelConfig, teacher: &ModelConfig, seed: u64) -> Result<Projection> {
    let (cs, hs, ws) = student.tap_shape();
    let (ct, ht, wt) = teacher.tap_shape();
    ensure!(
        (hs, ws) == (ht, wt),
        "teacher feature is {ht}x{wt} but student feature is {hs}x{ws}; spatial sizes must match"
    );
    let weight = if cs == ct {
        let mut t = Tensor::zeros(&[ct, cs]);
        for i in 0..cs {
            t.data[i * cs + i] = 1.0;
        }
        t
    } else {
        let mut rng = rng_for(seed, PROJECTION_STREAM);
        Tensor::uniform(&[ct, cs], (6.0 / (cs + ct) as f64).sqrt(), &mut rng)
    };
    Ok(Projection {
        weight,
        bias: Tensor::zeros(&[ct]),
    })
}

impl Backbone {
    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self
                .stages
                .iter()
                .map(|s| ConvLayer {
                    weight: s.weight.zeros_like(),
                    bias: s.bias.zeros_like(),
                })
                .collect(),
            geoms: self.geoms.clone(),
        }
    }
}

impl Head {
    pub fn zeros_like(&self) -> Self {
        Self {
            keypoint_weight: self.keypoint_weight.zeros_like(),
            keypoint_bias: self.keypoint_bias.zeros_like(),
            hidden_weight: self.hidden_weight.zeros_like(),
            hidden_bias: self.hidden_bias.zeros_like(),
            x_weight: self.x_weight.zeros_like(),
            x_bias: self.x_bias.zeros_like(),
            y_weight: self.y_weight.zeros_like(),
            y_bias: self.y_bias.zeros_like(),
        }
    }
}

impl Projection {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

impl ModelParams {
    /// Gradient buffer with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Rebuilds parameters from named tensors (checkpoint loading).
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = init_model(config, 0)?;
        for (name, slot) in params.named_mut() {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Contract(format!("missing tensor {name}")))?;
            let (_, t) = tensors.swap_remove(pos);
            ensure!(
                t.shape == slot.shape,
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape,
                slot.shape
            );
            *slot = t;
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Contract(format!("unexpected tensor {name}")));
        }
        Ok(params)
    }
}

/// Per-stage activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// Stage outputs; the last one is the feature map.
    pub outputs: Vec<FeatureMap>,
}

impl BackboneCache {
    pub fn feature(&self) -> &FeatureMap {
        self.outputs.last().expect("backbone has at least one stage")
    }

    pub fn stage(&self, i: usize) -> &FeatureMap {
        &self.outputs[i]
    }

    pub fn into_feature(mut self) -> FeatureMap {
        self.outputs.pop().expect("backbone has at least one stage")
    }
}

impl Backbone {
    fn check_input(&self, image: &Image) -> Result<()> {
        let g = &self.geoms[0];
        ensure!(
            image.width == g.w && image.height == g.h && image.data.len() == g.h * g.w,
            "image is {}x{}, backbone expects {}x{}",
            image.width,
            image.height,
            g.w,
            g.h
        );
        Ok(())
    }

    pub fn forward_cached(&self, image: &Image) -> Result<BackboneCache> {
        self.check_input(image)?;
        let mut cols = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(self.stages.len());
        for (stage, g) in self.stages.iter().zip(&self.geoms) {
            let input = outputs.last().map_or(&image.data, |f| &f.data);
            let col = if g.kernel == 1 {
                input.clone()
            } else {
                nn::im2col(input, *g)
            };
            let (ho, wo) = g.out_hw();
            let cout = stage.bias.len();
            let z = nn::left_affine(&stage.weight.data, &stage.bias.data, &col, cout, g.col_rows(), ho * wo);
            let y = nn::silu(&z);
            cols.push(col);
            pre.push(z);
            outputs.push(FeatureMap {
                channels: cout,
                height: ho,
                width: wo,
                data: y,
            });
        }
        Ok(BackboneCache { cols, pre, outputs })
    }

    /// `seeds[i]` is the gradient flowing into stage `i`'s output (if any).
    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `want_input_grad`.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        seeds: &[Option<&[f64]>],
        grads: &mut Backbone,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let n = self.stages.len();
        let mut upstream: Option<Vec<f64>> = None;
        for i in (0..n).rev() {
            let mut dy = match (upstream.take(), seeds.get(i).copied().flatten()) {
                (Some(mut u), Some(s)) => {
                    nn::axpy(1.0, s, &mut u);
                    u
                }
                (Some(u), None) => u,
                (None, Some(s)) => s.to_vec(),
                (None, None) => continue,
            };
            nn::silu_backward(&cache.pre[i], &mut dy);
            let g = self.geoms[i];
            let (ho, wo) = g.out_hw();
            let cout = self.stages[i].bias.len();
            let want_dx = i > 0 || want_input_grad;
            let gs = &mut grads.stages[i];
            let dcol = nn::left_affine_backward(
                &self.stages[i].weight.data,
                &cache.cols[i],
                &dy,
                cout,
                g.col_rows(),
                ho * wo,
                &mut gs.weight.data,
                &mut gs.bias.data,
                want_dx,
            );
            upstream = dcol.map(|d| if g.kernel == 1 { d } else { nn::col2im(&d, g) });
        }
        upstream
    }
}

/// Final feature map of `image`.
pub fn backbone_forward(params: &ModelParams, image: &Image) -> Result<FeatureMap> {
    Ok(params.backbone.forward_cached(image)?.into_feature())
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    keypoint_maps: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl Head {
    fn dims(&self) -> (usize, usize, usize, usize, usize, usize) {
        let k = self.keypoint_weight.shape[0];
        let c = self.keypoint_weight.shape[1];
        let s = self.hidden_weight.shape[0];
        let hd = self.hidden_weight.shape[1];
        (k, c, s, hd, self.x_weight.shape[1], self.y_weight.shape[1])
    }

    pub fn forward_cached(&self, feat: &FeatureMap) -> Result<(PoseLogits, HeadCache)> {
        let (k, c, s, hd, lx, ly) = self.dims();
        ensure!(
            feat.channels == c && feat.spatial() == s,
            "head expects a {c}-channel feature with {s} positions, got {}x{}x{}",
            feat.channels,
            feat.height,
            feat.width
        );
        let maps = nn::left_affine(
            &self.keypoint_weight.data,
            &self.keypoint_bias.data,
            &feat.data,
            k,
            c,
            s,
        );
        let hidden_pre = nn::right_affine(&maps, &self.hidden_weight.data, &self.hidden_bias.data, k, s, hd);
        let hidden = nn::silu(&hidden_pre);
        let x = nn::right_affine(&hidden, &self.x_weight.data, &self.x_bias.data, k, hd, lx);
        let y = nn::right_affine(&hidden, &self.y_weight.data, &self.y_bias.data, k, hd, ly);
        Ok((
            PoseLogits {
                num_keypoints: k,
                bins_x: lx,
                bins_y: ly,
                x,
                y,
            },
            HeadCache {
                keypoint_maps: maps,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Accumulates head gradients for upstream `dlogits`; returns the
    /// feature gradient when `want_feature_grad`.
    pub fn backward(
        &self,
        feat: &FeatureMap,
        cache: &HeadCache,
        dlogits: &PoseLogits,
        grads: &mut Head,
        want_feature_grad: bool,
    ) -> Option<Vec<f64>> {
        let (k, c, s, hd, lx, ly) = self.dims();
        let mut dh = nn::right_affine_backward(
            &cache.hidden,
            &self.x_weight.data,
            &dlogits.x,
            k,
            hd,
            lx,
            &mut grads.x_weight.data,
            &mut grads.x_bias.data,
            true,
        )
        .expect("requested");
        let dhy = nn::right_affine_backward(
            &cache.hidden,
            &self.y_weight.data,
            &dlogits.y,
            k,
            hd,
            ly,
            &mut grads.y_weight.data,
            &mut grads.y_bias.data,
            true,
        )
        .expect("requested");
        nn::axpy(1.0, &dhy, &mut dh);
        nn::silu_backward(&cache.hidden_pre, &mut dh);
        let dmaps = nn::right_affine_backward(
            &cache.keypoint_maps,
            &self.hidden_weight.data,
            &dh,
            k,
            s,
            hd,
            &mut grads.hidden_weight.data,
            &mut grads.hidden_bias.data,
            true,
        )
        .expect("requested");
        nn::left_affine_backward(
            &self.keypoint_weight.data,
            &feat.data,
            &dmaps,
            k,
            c,
            s,
            &mut grads.keypoint_weight.data,
            &mut grads.keypoint_bias.data,
            want_feature_grad,
        )
    }
}

pub fn head_forward(params: &ModelParams, feat: &FeatureMap) -> Result<PoseLogits> {
    Ok(params.head.forward_cached(feat)?.0)
}

/// Full inference path: image to logits.
pub fn predict(params: &ModelParams, image: &Image) -> Result<PoseLogits> {
    head_forward(params, &backbone_forward(params, image)?)
}

impl Projection {
    pub fn forward(&self, feat: &FeatureMap) -> Result<FeatureMap> {
        let (ct, cs) = (self.weight.shape[0], self.weight.shape[1]);
        ensure!(
            feat.channels == cs,
            "projection expects {cs} channels, got {}",
            feat.channels
        );
        let data = nn::left_affine(&self.weight.data, &self.bias.data, &feat.data, ct, cs, feat.spatial());
        Ok(FeatureMap {
            channels: ct,
            height: feat.height,
            width: feat.width,
            data,
        })
    }

    pub fn backward(
        &self,
        feat: &FeatureMap,
        dout: &[f64],
        grads: &mut Projection,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (ct, cs) = (self.weight.shape[0], self.weight.shape[1]);
        nn::left_affine_backward(
            &self.weight.data,
            &feat.data,
            dout,
            ct,
            cs,
            feat.spatial(),
            &mut grads.weight.data,
            &mut grads.bias.data,
            want_input_grad,
        )
    }
}

pub fn project_features(proj: &Projection, student_feature: &FeatureMap) -> Result<FeatureMap> {
    proj.forward(student_feature)
}
