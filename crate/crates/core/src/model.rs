//! The multi-headed segmentation network: feature extractor `f`, segmentation
//! head `g` and adversarial colour head `h`, joined at a fork with a
//! gradient-reversal edge into `h`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGrad, Gradients, Layer, LayerKind, Trace};
use crate::tensor::{Scalar, Tensor};

/// Identity on the way forward, `-scale` times the gradient on the way back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReversal {
    scale: f64,
}

impl GradientReversal {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(GradientReversal { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        *self = Self::new(scale)?;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, x: Tensor<T>) -> Tensor<T> {
        x
    }

    pub fn backward<T: Scalar>(&self, upstream: Tensor<T>) -> Tensor<T> {
        let k = T::from_f64(-self.scale);
        upstream.map(|g| k * g)
    }
}

pub fn grl_forward<T: Scalar>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    Ok(GradientReversal::new(scale)?.forward(x.clone()))
}

pub fn grl_backward<T: Scalar>(upstream: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    Ok(GradientReversal::new(scale)?.backward(upstream.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneName {
    MiniSeg,
    Pluggable,
}

/// Architecture of `f` followed by `g`, as a flat layer list ending in the
/// classifier convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerKind>,
}

impl BackboneSpec {
    /// Symmetric encoder-decoder: `depth` max-pool downsamplings starting at
    /// `width` channels (doubling per stage), nearest-neighbour upsampling with
    /// concatenated skips, a full-resolution `width`-channel convolution and a
    /// 3x3 classifier convolution.
    pub fn mini_seg(width: usize, depth: usize, num_classes: usize) -> Result<Self> {
        if width == 0 || num_classes < 2 {
            return Err(Error::Model(format!(
                "mini_seg needs width >= 1 and >= 2 classes (width {width}, classes {num_classes})"
            )));
        }
        let conv = |i, o| LayerKind::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
        };
        let mut layers = Vec::new();
        let mut ch = 3;
        let mut skips = Vec::new();
        for d in 0..depth {
            let out = width << d;
            layers.extend([conv(ch, out), LayerKind::Relu, conv(out, out), LayerKind::Relu]);
            layers.push(LayerKind::MaxPool);
            skips.push(out);
            ch = out;
        }
        let bottom = width << depth.saturating_sub(1);
        layers.extend([conv(ch, bottom), LayerKind::Relu]);
        ch = bottom;
        for d in (0..depth).rev() {
            let skip = skips.pop().expect("one skip per stage");
            let out = if d == 0 { width } else { width << (d - 1) };
            layers.extend([LayerKind::UpConcat, conv(ch + skip, out), LayerKind::Relu]);
            ch = out;
        }
        if depth == 0 {
            layers.extend([conv(ch, width), LayerKind::Relu]);
            ch = width;
        }
        layers.push(conv(ch, num_classes));
        let spec = BackboneSpec {
            name: BackboneName::MiniSeg,
            width,
            depth,
            in_channels: 3,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A caller-supplied layer list. The last layer must be a convolution
    /// emitting `num_classes` channels.
    pub fn pluggable(in_channels: usize, num_classes: usize, layers: Vec<LayerKind>) -> Result<Self> {
        let width = layers
            .iter()
            .find_map(|l| match l {
                LayerKind::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .unwrap_or(0);
        let depth = layers.iter().filter(|l| **l == LayerKind::MaxPool).count();
        let spec = BackboneSpec {
            name: BackboneName::Pluggable,
            width,
            depth,
            in_channels,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (ch, open) = nn::channels_at(&self.layers, self.in_channels, self.layers.len())?;
        if open != 0 {
            return Err(Error::Model(format!("{open} skip connection(s) never closed")));
        }
        match self.layers.last() {
            Some(LayerKind::Conv { .. }) if ch == self.num_classes => Ok(()),
            _ => Err(Error::Model(format!(
                "backbone must end in a convolution emitting {} class logits",
                self.num_classes
            ))),
        }
    }

    /// Default fork: directly before the final (classifier) convolution, so
    /// `g` keeps exactly one learnable convolution.
    pub fn default_fork(&self) -> usize {
        self.layers.len() - 1
    }

    /// Number of feature maps crossing the boundary before `layers[fork_index]`.
    pub fn fork_feature_count(&self, fork_index: usize) -> Result<usize> {
        self.check_fork(fork_index)?;
        Ok(nn::channels_at(&self.layers, self.in_channels, fork_index)?.0)
    }

    pub fn check_fork(&self, fork_index: usize) -> Result<()> {
        let len = self.layers.len();
        if fork_index == 0 || fork_index > len {
            return Err(Error::Model(format!(
                "fork index {fork_index} out of range 1..={len}"
            )));
        }
        if !self.layers[fork_index..].iter().any(LayerKind::is_learnable) {
            return Err(Error::Model(format!(
                "fork index {fork_index} leaves the segmentation head without a learnable layer"
            )));
        }
        let (_, open) = nn::channels_at(&self.layers, self.in_channels, fork_index)?;
        if open != 0 {
            return Err(Error::Model(format!(
                "fork index {fork_index} cuts through {open} open skip connection(s)"
            )));
        }
        Ok(())
    }

    /// Builds the full `f` then `g` layer stack with deterministic weights.
    pub fn build<T: Scalar>(&self, seed: u64) -> Vec<Layer<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layers.iter().map(|&k| Layer::init(k, &mut rng)).collect()
    }
}

/// Two 1x1 convolutions with a tanh between them. The bounded hidden layer
/// keeps the reversed gradient from rewarding unbounded feature growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasHeadSpec {
    pub hidden: usize,
    pub bias_classes: usize,
}

impl BiasHeadSpec {
    fn layers(&self, in_channels: usize) -> [LayerKind; 3] {
        [
            LayerKind::Conv {
                in_channels,
                out_channels: self.hidden,
                kernel: 1,
            },
            LayerKind::Tanh,
            LayerKind::Conv {
                in_channels: self.hidden,
                out_channels: self.bias_classes,
                kernel: 1,
            },
        ]
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    FeatureExtractor,
    SegmentationHead,
    BiasHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel<T = f32> {
    backbone: BackboneSpec,
    head_spec: BiasHeadSpec,
    fork_index: usize,
    layers: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
    grl: GradientReversal,
}

/// Splits `backbone` at `fork_index` into `f` and `g` and attaches a freshly
/// initialised bias head behind a gradient-reversal edge.
///
/// Backbone weights depend only on `seed`, so forks at different indices of
/// the same backbone compute the same `g(f(x))` at initialisation. The head is
/// drawn from a separate stream of the same seed.
pub fn fork_at<T: Scalar>(
    backbone: &BackboneSpec,
    fork_index: usize,
    head: BiasHeadSpec,
    grl_scale: f64,
    seed: u64,
) -> Result<SegmentationModel<T>> {
    backbone.validate()?;
    backbone.check_fork(fork_index)?;
    if head.hidden == 0 || head.bias_classes < 2 {
        return Err(Error::Model("bias head needs hidden >= 1 and >= 2 classes".into()));
    }
    let features = backbone.fork_feature_count(fork_index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let head_layers = head.layers(features).iter().map(|&k| Layer::init(k, &mut rng)).collect();
    Ok(SegmentationModel {
        backbone: backbone.clone(),
        head_spec: head,
        fork_index,
        layers: backbone.build(seed),
        head: head_layers,
        grl: GradientReversal::new(grl_scale)?,
    })
}

/// Everything a joint forward pass keeps for the backward pass.
#[derive(Debug)]
pub struct JointPass<T = f32> {
    pub seg_logits: Tensor<T>,
    pub bias_logits: Option<Tensor<T>>,
    f_trace: Trace<T>,
    g_trace: Trace<T>,
    h_trace: Option<Trace<T>>,
}

/// Gradients for every parameter, split by owner.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T = f32> {
    /// Aligned with the backbone layers (`f` then `g`).
    pub backbone: Gradients<T>,
    pub head: Gradients<T>,
    fork_index: usize,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn feature_extractor(&self) -> &[Option<ConvGrad<T>>] {
        &self.backbone[..self.fork_index]
    }

    pub fn segmentation_head(&self) -> &[Option<ConvGrad<T>>] {
        &self.backbone[self.fork_index..]
    }

    pub fn bias_head(&self) -> &[Option<ConvGrad<T>>] {
        &self.head
    }

    /// Flattened view of one part's gradients, in layer order.
    pub fn flat(&self, part: Part) -> Vec<T> {
        let grads = match part {
            Part::FeatureExtractor => self.feature_extractor(),
            Part::SegmentationHead => self.segmentation_head(),
            Part::BiasHead => self.bias_head(),
        };
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn head_spec(&self) -> BiasHeadSpec {
        self.head_spec
    }

    pub fn fork_index(&self) -> usize {
        self.fork_index
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }

    pub fn bias_classes(&self) -> usize {
        self.head_spec.bias_classes
    }

    pub fn fork_feature_count(&self) -> usize {
        self.backbone
            .fork_feature_count(self.fork_index)
            .expect("fork validated at construction")
    }

    pub fn grl(&self) -> GradientReversal {
        self.grl
    }

    pub fn set_grl_scale(&mut self, scale: f64) -> Result<()> {
        self.grl.set_scale(scale)
    }

    pub fn feature_extractor(&self) -> &[Layer<T>] {
        &self.layers[..self.fork_index]
    }

    pub fn segmentation_head(&self) -> &[Layer<T>] {
        &self.layers[self.fork_index..]
    }

    pub fn bias_head(&self) -> &[Layer<T>] {
        &self.head
    }

    pub fn backbone_layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn backbone_layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn head_layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.head
    }

    pub fn param_count(&self, part: Part) -> usize {
        match part {
            Part::FeatureExtractor => nn::param_count(self.feature_extractor()),
            Part::SegmentationHead => nn::param_count(self.segmentation_head()),
            Part::BiasHead => nn::param_count(self.bias_head()),
        }
    }

    pub fn total_param_count(&self) -> usize {
        nn::param_count(&self.layers) + nn::param_count(&self.head)
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = batch.shape();
        let stride = 1usize << self.backbone.depth;
        if n == 0 || c != self.backbone.in_channels || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "expected a non-empty (n, {}, H, W) batch with H and W divisible by {stride}, got {:?}",
                self.backbone.in_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// `g(f(x))` only.
    pub fn segment(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        Ok(nn::forward(&self.layers, batch.clone(), false)?.0)
    }

    /// `(g(f(x)), h(grl(f(x))))` without keeping activations.
    pub fn forward_joint(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(batch)?;
        let (features, _) = nn::forward(self.feature_extractor(), batch.clone(), false)?;
        let (seg, _) = nn::forward(self.segmentation_head(), features.clone(), false)?;
        let (bias, _) = nn::forward(&self.head, self.grl.forward(features), false)?;
        Ok((seg, bias))
    }

    /// Forward pass that keeps activations; the bias head only runs when `with_head`.
    pub fn forward_train(&self, batch: &Tensor<T>, with_head: bool) -> Result<JointPass<T>> {
        self.check_input(batch)?;
        let (features, f_trace) = nn::forward(self.feature_extractor(), batch.clone(), true)?;
        let (bias_logits, h_trace) = if with_head {
            let (b, t) = nn::forward(&self.head, self.grl.forward(features.clone()), true)?;
            (Some(b), t)
        } else {
            (None, None)
        };
        let (seg_logits, g_trace) = nn::forward(self.segmentation_head(), features, true)?;
        Ok(JointPass {
            seg_logits,
            bias_logits,
            f_trace: f_trace.expect("trace requested"),
            g_trace: g_trace.expect("trace requested"),
            h_trace,
        })
    }

    /// Back-propagates `seg_grad` (dL/d seg logits) and optionally `bias_grad`
    /// (dL/d bias logits, already weighted).
    ///
    /// `h` receives the true bias gradient; `f` receives the segmentation
    /// gradient plus the bias gradient reversed by the GRL; `g` only sees the
    /// segmentation gradient.
    pub fn backward(
        &self,
        pass: JointPass<T>,
        seg_grad: Tensor<T>,
        bias_grad: Option<Tensor<T>>,
    ) -> Result<ModelGrads<T>> {
        if seg_grad.shape() != pass.seg_logits.shape() {
            return Err(Error::Shape("segmentation gradient does not match logits".into()));
        }
        let mut backbone = nn::zero_grads(&self.layers);
        let mut head = nn::zero_grads(&self.head);
        let (f_grads, g_grads) = backbone.split_at_mut(self.fork_index);
        let mut d_features = nn::backward(self.segmentation_head(), pass.g_trace, seg_grad, g_grads, true)?
            .expect("input gradient requested");
        if let Some(bias_grad) = bias_grad {
            let (Some(trace), Some(logits)) = (pass.h_trace, pass.bias_logits.as_ref()) else {
                return Err(Error::Model("bias gradient given but the bias head did not run".into()));
            };
            if bias_grad.shape() != logits.shape() {
                return Err(Error::Shape("bias gradient does not match logits".into()));
            }
            let d_head_in = nn::backward(&self.head, trace, bias_grad, &mut head, true)?
                .expect("input gradient requested");
            let reversed = self.grl.backward(d_head_in);
            for (a, b) in d_features.data_mut().iter_mut().zip(reversed.data()) {
                *a += *b;
            }
        }
        nn::backward(self.feature_extractor(), pass.f_trace, d_features, f_grads, false)?;
        Ok(ModelGrads {
            backbone,
            head,
            fork_index: self.fork_index,
        })
    }

    /// Flattened parameters in checkpoint order: backbone layers then head layers.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .chain(&self.head)
            .filter_map(Layer::conv)
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn load_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.total_param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.total_param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for conv in self.layers.iter_mut().chain(self.head.iter_mut()).filter_map(Layer::conv_mut) {
            let wl = conv.weight.len();
            conv.weight.copy_from_slice(&params[offset..offset + wl]);
            offset += wl;
            let bl = conv.bias.len();
            conv.bias.copy_from_slice(&params[offset..offset + bl]);
            offset += bl;
        }
        Ok(())
    }
}
