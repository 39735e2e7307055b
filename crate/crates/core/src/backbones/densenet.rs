//! Desk-scale densely connected network.
//!
//! Layout: a 3×3 stride-1 stem to `2 · growth` channels, four dense blocks
//! with layer counts `ceil([6, 12, 24, 16] · depth_scale)`, bottleneck layers
//! (1×1 to `bn_size · growth`, then 3×3 to `growth`, each appended by channel
//! concatenation), and transitions between blocks that halve both channel
//! count (1×1 conv, floor division) and spatial extent (2×2 average pool).

use rand::Rng;

use crate::cbam::CbamBlock;
use crate::engine::{self, Parameter, Tape, Tensor};
use crate::error::Result;

use super::layers::{BnLayer, ConvLayer};

/// Bottleneck width multiplier: the 1×1 conv expands to `BN_SIZE · growth`.
const BN_SIZE: usize = 4;

/// Reference layer counts of the full-scale network, scaled by `ceil`.
pub(crate) fn block_lengths(depth_scale: f64) -> [usize; 4] {
    let scale = |n: f64| ((n * depth_scale).ceil() as usize).max(1);
    [scale(6.0), scale(12.0), scale(24.0), scale(16.0)]
}

/// Dense blocks are the unit the in-block CBAM mask indexes.
pub(crate) fn block_count() -> usize {
    4
}

/// Channel count of the final feature map (after the last dense block).
/// A closed-form anchor for tests; the layers track channels themselves.
#[cfg(test)]
pub(crate) fn final_channels(growth: usize, depth_scale: f64) -> usize {
    let mut channels = 2 * growth;
    for (i, &len) in block_lengths(depth_scale).iter().enumerate() {
        channels += len * growth;
        if i < 3 {
            channels /= 2;
        }
    }
    channels
}

/// One bottleneck layer: BN → ReLU → 1×1 conv → BN → ReLU → 3×3 conv.
struct DenseLayerUnit {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
}

impl DenseLayerUnit {
    fn new<R: Rng>(name: &str, c_in: usize, growth: usize, rng: &mut R) -> DenseLayerUnit {
        let mid = BN_SIZE * growth;
        DenseLayerUnit {
            bn1: BnLayer::new(&format!("{name}.bn1"), c_in),
            conv1: ConvLayer::new(&format!("{name}.conv1"), c_in, mid, 1, 1, 0, false, rng),
            bn2: BnLayer::new(&format!("{name}.bn2"), mid),
            conv2: ConvLayer::new(&format!("{name}.conv2"), mid, growth, 3, 1, 1, false, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = self.bn1.forward(tape, x, training)?;
        h = engine::relu(tape, &h)?;
        h = self.conv1.forward(tape, &h)?;
        h = self.bn2.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        self.conv2.forward(tape, &h)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.bn1.collect(out);
        self.conv1.collect(out);
        self.bn2.collect(out);
        self.conv2.collect(out);
    }
}

pub(crate) struct DenseBlock {
    layers: Vec<DenseLayerUnit>,
    cbam: Option<CbamBlock>,
    out_channels: usize,
}

impl DenseBlock {
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        growth: usize,
        n_layers: usize,
        cbam: Option<usize>,
        rng: &mut R,
    ) -> Result<DenseBlock> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(DenseLayerUnit::new(
                &format!("{name}.layer{i}"),
                c_in + i * growth,
                growth,
                rng,
            ));
        }
        let out_channels = c_in + n_layers * growth;
        Ok(DenseBlock {
            layers,
            cbam: cbam
                .map(|r| CbamBlock::new(&format!("{name}.cbam"), out_channels, r, rng))
                .transpose()?,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut features = x.clone();
        for layer in &self.layers {
            let new = layer.forward(tape, &features, training)?;
            features = engine::concat_channels(tape, &features, &new)?;
        }
        match &self.cbam {
            Some(cbam) => cbam.forward(tape, &features),
            None => Ok(features),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        for layer in &self.layers {
            layer.collect(out);
        }
        if let Some(cbam) = &self.cbam {
            out.extend(cbam.parameters());
        }
    }
}

/// Transition: BN → ReLU → 1×1 conv (half channels) → 2×2 average pool.
struct Transition {
    bn: BnLayer,
    conv: ConvLayer,
}

impl Transition {
    fn new<R: Rng>(name: &str, c_in: usize, rng: &mut R) -> Transition {
        Transition {
            bn: BnLayer::new(&format!("{name}.bn"), c_in),
            conv: ConvLayer::new(&format!("{name}.conv"), c_in, c_in / 2, 1, 1, 0, false, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = self.bn.forward(tape, x, training)?;
        let h = engine::relu(tape, &h)?;
        let h = self.conv.forward(tape, &h)?;
        engine::avg_pool2d(tape, &h, 2, 2)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.bn.collect(out);
        self.conv.collect(out);
    }
}

pub(crate) struct DenseNet {
    stem: ConvLayer,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BnLayer,
    out_channels: usize,
}

impl DenseNet {
    pub fn new<R: Rng>(
        factors: usize,
        growth: usize,
        depth_scale: f64,
        in_cbam: Option<(&[bool], usize)>,
        rng: &mut R,
    ) -> Result<DenseNet> {
        let lengths = block_lengths(depth_scale);
        let stem = ConvLayer::new("features.stem", factors, 2 * growth, 3, 1, 1, false, rng);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut channels = 2 * growth;
        for (i, &len) in lengths.iter().enumerate() {
            let cbam = match in_cbam {
                Some((mask, reduction)) if mask[i] => Some(reduction),
                _ => None,
            };
            let block = DenseBlock::new(
                &format!("features.block{i}"),
                channels,
                growth,
                len,
                cbam,
                rng,
            )?;
            channels = block.out_channels();
            blocks.push(block);
            if i < 3 {
                transitions.push(Transition::new(&format!("features.transition{i}"), channels, rng));
                channels /= 2;
            }
        }
        Ok(DenseNet {
            stem,
            blocks,
            transitions,
            final_bn: BnLayer::new("features.final_bn", channels),
            out_channels: channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(tape, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, &h, training)?;
            if i < self.transitions.len() {
                h = self.transitions[i].forward(tape, &h, training)?;
            }
        }
        h = self.final_bn.forward(tape, &h, training)?;
        engine::relu(tape, &h)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.stem.collect(out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(out);
            if i < self.transitions.len() {
                self.transitions[i].collect(out);
            }
        }
        self.final_bn.collect(out);
    }
}
