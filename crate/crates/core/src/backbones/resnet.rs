//! Desk-scale residual network with pre-activation blocks.
//!
//! Layout: a 3×3 stride-1 stem, four stages whose widths double per stage,
//! `max(1, round(2 · depth_scale))` blocks per stage, stride-2 downsampling at
//! the entry of stages 1–3, and a final batch-norm + ReLU. Blocks are
//! pre-activation (`y = x + conv(relu(bn(conv(relu(bn(x))))))`), so a block
//! whose branch weights are zero is an exact identity on every input.

use rand::Rng;

use crate::cbam::CbamBlock;
use crate::engine::{self, Parameter, Tape, Tensor};
use crate::error::Result;

use super::layers::{BnLayer, ConvLayer};

/// Number of residual blocks per stage for a given depth scale.
pub(crate) fn blocks_per_stage(depth_scale: f64) -> usize {
    ((2.0 * depth_scale).round() as usize).max(1)
}

/// Total residual blocks (the unit the in-block CBAM mask indexes).
pub(crate) fn block_count(depth_scale: f64) -> usize {
    4 * blocks_per_stage(depth_scale)
}

/// Stage widths for a given base width.
pub(crate) fn stage_widths(base_width: usize) -> [usize; 4] {
    [base_width, base_width * 2, base_width * 4, base_width * 8]
}

pub(crate) struct ResidualBlock {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
    proj: Option<ConvLayer>,
    cbam: Option<CbamBlock>,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        cbam: Option<usize>,
        rng: &mut R,
    ) -> Result<ResidualBlock> {
        let proj = (c_in != c_out || stride != 1).then(|| {
            ConvLayer::new(&format!("{name}.proj"), c_in, c_out, 1, stride, 0, false, rng)
        });
        Ok(ResidualBlock {
            bn1: BnLayer::new(&format!("{name}.bn1"), c_in),
            conv1: ConvLayer::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng),
            bn2: BnLayer::new(&format!("{name}.bn2"), c_out),
            conv2: ConvLayer::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng),
            proj,
            cbam: cbam
                .map(|r| CbamBlock::new(&format!("{name}.cbam"), c_out, r, rng))
                .transpose()?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let pre = self.bn1.forward(tape, x, training)?;
        let pre = engine::relu(tape, &pre)?;
        let shortcut = match &self.proj {
            Some(proj) => proj.forward(tape, &pre)?,
            None => x.clone(),
        };
        let mut h = self.conv1.forward(tape, &pre)?;
        h = self.bn2.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        h = self.conv2.forward(tape, &h)?;
        let mut out = engine::add(tape, &h, &shortcut)?;
        if let Some(cbam) = &self.cbam {
            out = cbam.forward(tape, &out)?;
        }
        Ok(out)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.bn1.collect(out);
        self.conv1.collect(out);
        self.bn2.collect(out);
        self.conv2.collect(out);
        if let Some(proj) = &self.proj {
            proj.collect(out);
        }
        if let Some(cbam) = &self.cbam {
            out.extend(cbam.parameters());
        }
    }
}

pub(crate) struct ResNet {
    stem: ConvLayer,
    blocks: Vec<ResidualBlock>,
    final_bn: BnLayer,
    out_channels: usize,
}

impl ResNet {
    /// `in_cbam[i]` marks residual block `i` (construction order) as carrying
    /// an in-block CBAM with the given reduction; `None` disables them all.
    pub fn new<R: Rng>(
        factors: usize,
        base_width: usize,
        depth_scale: f64,
        in_cbam: Option<(&[bool], usize)>,
        rng: &mut R,
    ) -> Result<ResNet> {
        let widths = stage_widths(base_width);
        let per_stage = blocks_per_stage(depth_scale);
        let stem = ConvLayer::new("features.stem", factors, widths[0], 3, 1, 1, false, rng);
        let mut blocks = Vec::new();
        let mut c_in = widths[0];
        let mut index = 0;
        for (stage, &width) in widths.iter().enumerate() {
            for block in 0..per_stage {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let cbam = match in_cbam {
                    Some((mask, reduction)) if mask[index] => Some(reduction),
                    _ => None,
                };
                blocks.push(ResidualBlock::new(
                    &format!("features.stage{stage}.block{block}"),
                    c_in,
                    width,
                    stride,
                    cbam,
                    rng,
                )?);
                c_in = width;
                index += 1;
            }
        }
        Ok(ResNet {
            stem,
            blocks,
            final_bn: BnLayer::new("features.final_bn", widths[3]),
            out_channels: widths[3],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(tape, x)?;
        for block in &self.blocks {
            h = block.forward(tape, &h, training)?;
        }
        h = self.final_bn.forward(tape, &h, training)?;
        engine::relu(tape, &h)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.stem.collect(out);
        for block in &self.blocks {
            block.collect(out);
        }
        self.final_bn.collect(out);
    }
}
