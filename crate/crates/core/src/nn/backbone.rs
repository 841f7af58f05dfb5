use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, Buffer,
    Conv2d, ConvCache, MaxPool2, Param, Parameters, PoolCache,
};

const WRN_SLOPE: f32 = 0.1;
const WRN_BN_MOMENTUM: f32 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Four 3×3 conv layers with ReLU (the first with stride 2), 2×2 max-pools
    /// after the second and third, global average pool.
    #[serde(rename = "small-cnn")]
    SmallCnn,
    /// Wide-ResNet-28-2 (pre-activation wide basic blocks, leaky ReLU 0.1).
    #[serde(rename = "wrn-28-2")]
    Wrn28x2,
}

impl BackboneKind {
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::SmallCnn => SMALL_CNN_CHANNELS[3],
            BackboneKind::Wrn28x2 => 128,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::SmallCnn => "small-cnn",
            BackboneKind::Wrn28x2 => "wrn-28-2",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small-cnn" => Ok(BackboneKind::SmallCnn),
            "wrn-28-2" => Ok(BackboneKind::Wrn28x2),
            other => Err(format!("unknown backbone {other:?} (expected small-cnn|wrn-28-2)")),
        }
    }
}

pub const SMALL_CNN_CHANNELS: [usize; 4] = [16, 32, 64, 64];

#[derive(Clone, Debug)]
struct WideBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

#[derive(Debug)]
struct BlockCache {
    bn1: BnCache,
    act1: Array4<f32>,
    conv1: ConvCache,
    bn2: BnCache,
    act2: Array4<f32>,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
}

impl WideBlock {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let gain = (2.0 / (1.0 + WRN_SLOPE * WRN_SLOPE)).sqrt();
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, stride, 0, false, gain, rng));
        Self {
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cin, WRN_BN_MOMENTUM),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false, gain, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout, WRN_BN_MOMENTUM),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, gain, rng),
            shortcut,
        }
    }

    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let a1 = leaky_relu(&self.bn1.forward(x), WRN_SLOPE);
        let h = self.conv1.forward(&a1);
        let a2 = leaky_relu(&self.bn2.forward(&h), WRN_SLOPE);
        let out = self.conv2.forward(&a2);
        match &self.shortcut {
            Some(sc) => out + sc.forward(&a1),
            None => out + x,
        }
    }

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let (b1, bn1) = self.bn1.forward_train(x);
        let act1 = leaky_relu(&b1, WRN_SLOPE);
        let (h, conv1) = self.conv1.forward_train(&act1);
        let (b2, bn2) = self.bn2.forward_train(&h);
        let act2 = leaky_relu(&b2, WRN_SLOPE);
        let (out, conv2) = self.conv2.forward_train(&act2);
        let (y, shortcut) = match &self.shortcut {
            Some(sc) => {
                let (s, cache) = sc.forward_train(&act1);
                (out + s, Some(cache))
            }
            None => (out + x, None),
        };
        (
            y,
            BlockCache {
                bn1,
                act1,
                conv1,
                bn2,
                act2,
                conv2,
                shortcut,
            },
        )
    }

    fn backward(&mut self, cache: BlockCache, grad: &Array4<f32>) -> Array4<f32> {
        let g = self.conv2.backward(cache.conv2, grad);
        let g = leaky_relu_backward(&cache.act2, &g, WRN_SLOPE);
        let g = self.bn2.backward(cache.bn2, &g);
        let mut g_act1 = self.conv1.backward(cache.conv1, &g);
        if let (Some(sc), Some(sc_cache)) = (self.shortcut.as_mut(), cache.shortcut) {
            g_act1 += &sc.backward(sc_cache, grad);
        }
        let g = leaky_relu_backward(&cache.act1, &g_act1, WRN_SLOPE);
        let mut gx = self.bn1.backward(cache.bn1, &g);
        if self.shortcut.is_none() {
            gx += grad;
        }
        gx
    }

    fn parts(&self) -> (Vec<&BatchNorm2d>, Vec<&Conv2d>) {
        let mut convs = vec![&self.conv1, &self.conv2];
        convs.extend(self.shortcut.as_ref());
        (vec![&self.bn1, &self.bn2], convs)
    }

    fn parts_mut(&mut self) -> (Vec<&mut BatchNorm2d>, Vec<&mut Conv2d>) {
        let mut convs = vec![&mut self.conv1, &mut self.conv2];
        convs.extend(self.shortcut.as_mut());
        (vec![&mut self.bn1, &mut self.bn2], convs)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(f32),
    MaxPool(MaxPool2),
    Block(Box<WideBlock>),
}

#[derive(Debug)]
enum LayerCache {
    Conv(ConvCache),
    BatchNorm(BnCache),
    Act(Array4<f32>),
    Pool(PoolCache),
    Block(Box<BlockCache>),
}

/// Feature encoder: a stack of conv layers followed by global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone {
    kind: BackboneKind,
    layers: Vec<Layer>,
    feature_dim: usize,
}

#[derive(Debug)]
pub struct BackboneCache {
    layers: Vec<LayerCache>,
    pooled_hw: (usize, usize),
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(kind: BackboneKind, prefix: &str, in_channels: usize, rng: &mut R) -> Self {
        let layers = match kind {
            BackboneKind::SmallCnn => small_cnn(prefix, in_channels, rng),
            BackboneKind::Wrn28x2 => wide_resnet(prefix, in_channels, 28, 2, rng),
        };
        Self {
            kind,
            layers,
            feature_dim: kind.feature_dim(),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h),
                Layer::BatchNorm(bn) => bn.forward(&h),
                Layer::LeakyRelu(slope) => leaky_relu(&h, *slope),
                Layer::MaxPool(p) => p.forward(&h),
                Layer::Block(b) => b.forward(&h),
            };
        }
        global_avg_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, BackboneCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward_train(&h);
                    (y, LayerCache::Conv(cache))
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward_train(&h);
                    (y, LayerCache::BatchNorm(cache))
                }
                Layer::LeakyRelu(slope) => {
                    let y = leaky_relu(&h, *slope);
                    (y.clone(), LayerCache::Act(y))
                }
                Layer::MaxPool(p) => {
                    let (y, cache) = p.forward_train(&h);
                    (y, LayerCache::Pool(cache))
                }
                Layer::Block(b) => {
                    let (y, cache) = b.forward_train(&h);
                    (y, LayerCache::Block(Box::new(cache)))
                }
            };
            caches.push(cache);
            h = next;
        }
        let (_, ph, pw, _) = h.dim();
        (
            global_avg_pool(&h),
            BackboneCache {
                layers: caches,
                pooled_hw: (ph, pw),
            },
        )
    }

    /// Backpropagates `grad` (w.r.t. the pooled features) into the parameter
    /// gradients. The gradient w.r.t. the input images is not formed.
    pub fn backward(&mut self, cache: BackboneCache, grad: &Array2<f32>) {
        let mut g = global_avg_pool_backward(grad, cache.pooled_hw);
        for (i, (layer, cache)) in self.layers.iter_mut().zip(cache.layers).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cache)) if i == 0 => {
                    c.backward_params(cache, &g);
                    return;
                }
                (Layer::Conv(c), LayerCache::Conv(cache)) => c.backward(cache, &g),
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(cache)) => bn.backward(cache, &g),
                (Layer::LeakyRelu(slope), LayerCache::Act(y)) => leaky_relu_backward(&y, &g, *slope),
                (Layer::MaxPool(p), LayerCache::Pool(cache)) => p.backward(cache, &g),
                (Layer::Block(b), LayerCache::Block(cache)) => b.backward(*cache, &g),
                _ => unreachable!("cache layout follows layer layout"),
            };
        }
    }
}

impl Parameters for Backbone {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend(c.params()),
                Layer::BatchNorm(bn) => out.extend(bn.params()),
                Layer::Block(b) => {
                    let (bns, convs) = b.parts();
                    bns.into_iter().for_each(|bn| out.extend(bn.params()));
                    convs.into_iter().for_each(|c| out.extend(c.params()));
                }
                Layer::LeakyRelu(_) | Layer::MaxPool(_) => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend(c.params_mut()),
                Layer::BatchNorm(bn) => out.extend(bn.params_mut()),
                Layer::Block(b) => {
                    let (bns, convs) = b.parts_mut();
                    bns.into_iter().for_each(|bn| out.extend(bn.params_mut()));
                    convs.into_iter().for_each(|c| out.extend(c.params_mut()));
                }
                Layer::LeakyRelu(_) | Layer::MaxPool(_) => {}
            }
        }
        out
    }

    fn buffers(&self) -> Vec<&Buffer> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::BatchNorm(bn) => out.extend(bn.buffers()),
                Layer::Block(b) => b.parts().0.into_iter().for_each(|bn| out.extend(bn.buffers())),
                _ => {}
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(bn) => out.extend(bn.buffers_mut()),
                Layer::Block(b) => b
                    .parts_mut()
                    .0
                    .into_iter()
                    .for_each(|bn| out.extend(bn.buffers_mut())),
                _ => {}
            }
        }
        out
    }
}

fn small_cnn<R: Rng + ?Sized>(prefix: &str, in_channels: usize, rng: &mut R) -> Vec<Layer> {
    let gain = 2f32.sqrt();
    let mut layers = Vec::new();
    let mut cin = in_channels;
    for (i, &cout) in SMALL_CNN_CHANNELS.iter().enumerate() {
        let name = format!("{prefix}.conv{}", i + 1);
        let stride = if i == 0 { 2 } else { 1 };
        layers.push(Layer::Conv(Conv2d::new(&name, cin, cout, 3, stride, 1, true, gain, rng)));
        layers.push(Layer::LeakyRelu(0.0));
        if i == 1 || i == 2 {
            layers.push(Layer::MaxPool(MaxPool2));
        }
        cin = cout;
    }
    layers
}

fn wide_resnet<R: Rng + ?Sized>(prefix: &str, in_channels: usize, depth: usize, widen: usize, rng: &mut R) -> Vec<Layer> {
    assert_eq!((depth - 4) % 6, 0, "wide-resnet depth must be 6n+4");
    let blocks_per_group = (depth - 4) / 6;
    let widths = [16, 16 * widen, 32 * widen, 64 * widen];
    let gain = (2.0 / (1.0 + WRN_SLOPE * WRN_SLOPE)).sqrt();
    let mut layers = vec![Layer::Conv(Conv2d::new(
        &format!("{prefix}.conv1"),
        in_channels,
        widths[0],
        3,
        1,
        1,
        false,
        gain,
        rng,
    ))];
    let mut cin = widths[0];
    for group in 0..3 {
        let cout = widths[group + 1];
        for block in 0..blocks_per_group {
            let stride = if block == 0 && group > 0 { 2 } else { 1 };
            let name = format!("{prefix}.group{}.block{}", group + 1, block + 1);
            layers.push(Layer::Block(Box::new(WideBlock::new(&name, cin, cout, stride, rng))));
            cin = cout;
        }
    }
    layers.push(Layer::BatchNorm(BatchNorm2d::new(&format!("{prefix}.bn_final"), cin, WRN_BN_MOMENTUM)));
    layers.push(Layer::LeakyRelu(WRN_SLOPE));
    layers
}
