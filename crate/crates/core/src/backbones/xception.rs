//! Desk-scale network built from depthwise-separable convolutions.
//!
//! Layout mirrors the entry/middle/exit flow of the full-scale original at a
//! fraction of the width: a two-conv stem (`w`, then `2w` channels), three
//! entry blocks of two separable convs each with max-pool downsampling and
//! 1×1 projection skips (widths `4w`, `8w`, `12w`), `max(1, round(8 ·
//! depth_scale))` middle blocks of three separable convs with identity skips
//! at `12w`, one exit block to `16w`, and two trailing separable convs at
//! `16w`. At depth scale 1 that is 36 convolutions, matching the conv count
//! of the full-scale network.

use rand::Rng;

use crate::cbam::CbamBlock;
use crate::engine::{self, Parameter, Tape, Tensor};
use crate::error::Result;

use super::layers::{BnLayer, ConvLayer, SeparableConv};

pub(crate) fn middle_blocks(depth_scale: f64) -> usize {
    ((8.0 * depth_scale).round() as usize).max(1)
}

/// Skip-connected blocks (3 entry + middle + 1 exit) — the unit the in-block
/// CBAM mask indexes.
pub(crate) fn block_count(depth_scale: f64) -> usize {
    4 + middle_blocks(depth_scale)
}

/// Channel count after the exit tail. A closed-form anchor for tests; the
/// layers track channels themselves.
#[cfg(test)]
pub(crate) fn final_channels(base_width: usize) -> usize {
    16 * base_width
}

/// Entry/exit block: two separable convs, 2×2 max-pool downsampling, and a
/// stride-2 1×1 projection skip. Blocks after the stem open with a ReLU;
/// `first` suppresses it because the stem already ends in one.
struct PoolBlock {
    sep1: SeparableConv,
    bn1: BnLayer,
    sep2: SeparableConv,
    bn2: BnLayer,
    proj: ConvLayer,
    proj_bn: BnLayer,
    first: bool,
    cbam: Option<CbamBlock>,
}

impl PoolBlock {
    fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        first: bool,
        cbam: Option<usize>,
        rng: &mut R,
    ) -> Result<PoolBlock> {
        Ok(PoolBlock {
            sep1: SeparableConv::new(&format!("{name}.sep1"), c_in, c_out, rng),
            bn1: BnLayer::new(&format!("{name}.bn1"), c_out),
            sep2: SeparableConv::new(&format!("{name}.sep2"), c_out, c_out, rng),
            bn2: BnLayer::new(&format!("{name}.bn2"), c_out),
            proj: ConvLayer::new(&format!("{name}.proj"), c_in, c_out, 1, 2, 0, false, rng),
            proj_bn: BnLayer::new(&format!("{name}.proj_bn"), c_out),
            first,
            cbam: cbam
                .map(|r| CbamBlock::new(&format!("{name}.cbam"), c_out, r, rng))
                .transpose()?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = if self.first { x.clone() } else { engine::relu(tape, x)? };
        h = self.sep1.forward(tape, &h)?;
        h = self.bn1.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        h = self.sep2.forward(tape, &h)?;
        h = self.bn2.forward(tape, &h, training)?;
        h = engine::max_pool2d(tape, &h, 2, 2)?;
        let skip = self.proj.forward(tape, x)?;
        let skip = self.proj_bn.forward(tape, &skip, training)?;
        let mut out = engine::add(tape, &h, &skip)?;
        if let Some(cbam) = &self.cbam {
            out = cbam.forward(tape, &out)?;
        }
        Ok(out)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.sep1.collect(out);
        self.bn1.collect(out);
        self.sep2.collect(out);
        self.bn2.collect(out);
        self.proj.collect(out);
        self.proj_bn.collect(out);
        if let Some(cbam) = &self.cbam {
            out.extend(cbam.parameters());
        }
    }
}

/// Middle block: three separable convs with an identity skip.
struct MiddleBlock {
    seps: Vec<(SeparableConv, BnLayer)>,
    cbam: Option<CbamBlock>,
}

impl MiddleBlock {
    fn new<R: Rng>(
        name: &str,
        channels: usize,
        cbam: Option<usize>,
        rng: &mut R,
    ) -> Result<MiddleBlock> {
        let seps = (0..3)
            .map(|i| {
                (
                    SeparableConv::new(&format!("{name}.sep{i}"), channels, channels, rng),
                    BnLayer::new(&format!("{name}.bn{i}"), channels),
                )
            })
            .collect();
        Ok(MiddleBlock {
            seps,
            cbam: cbam
                .map(|r| CbamBlock::new(&format!("{name}.cbam"), channels, r, rng))
                .transpose()?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (sep, bn) in &self.seps {
            h = engine::relu(tape, &h)?;
            h = sep.forward(tape, &h)?;
            h = bn.forward(tape, &h, training)?;
        }
        let mut out = engine::add(tape, &h, x)?;
        if let Some(cbam) = &self.cbam {
            out = cbam.forward(tape, &out)?;
        }
        Ok(out)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        for (sep, bn) in &self.seps {
            sep.collect(out);
            bn.collect(out);
        }
        if let Some(cbam) = &self.cbam {
            out.extend(cbam.parameters());
        }
    }
}

pub(crate) struct Xception {
    stem1: ConvLayer,
    stem_bn1: BnLayer,
    stem2: ConvLayer,
    stem_bn2: BnLayer,
    entry: Vec<PoolBlock>,
    middle: Vec<MiddleBlock>,
    exit: PoolBlock,
    tail1: SeparableConv,
    tail_bn1: BnLayer,
    tail2: SeparableConv,
    tail_bn2: BnLayer,
    out_channels: usize,
}

impl Xception {
    pub fn new<R: Rng>(
        factors: usize,
        base_width: usize,
        depth_scale: f64,
        in_cbam: Option<(&[bool], usize)>,
        rng: &mut R,
    ) -> Result<Xception> {
        let w = base_width;
        let cbam_at = |index: usize| match in_cbam {
            Some((mask, reduction)) if mask[index] => Some(reduction),
            _ => None,
        };
        let stem1 = ConvLayer::new("features.stem1", factors, w, 3, 1, 1, false, rng);
        let stem_bn1 = BnLayer::new("features.stem_bn1", w);
        let stem2 = ConvLayer::new("features.stem2", w, 2 * w, 3, 1, 1, false, rng);
        let stem_bn2 = BnLayer::new("features.stem_bn2", 2 * w);
        let entry_widths = [4 * w, 8 * w, 12 * w];
        let mut entry = Vec::new();
        let mut c_in = 2 * w;
        for (i, &width) in entry_widths.iter().enumerate() {
            entry.push(PoolBlock::new(
                &format!("features.entry{i}"),
                c_in,
                width,
                i == 0,
                cbam_at(i),
                rng,
            )?);
            c_in = width;
        }
        let middle = (0..middle_blocks(depth_scale))
            .map(|i| {
                MiddleBlock::new(&format!("features.middle{i}"), 12 * w, cbam_at(3 + i), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let exit = PoolBlock::new(
            "features.exit",
            12 * w,
            16 * w,
            false,
            cbam_at(3 + middle.len()),
            rng,
        )?;
        Ok(Xception {
            stem1,
            stem_bn1,
            stem2,
            stem_bn2,
            entry,
            middle,
            exit,
            tail1: SeparableConv::new("features.tail1", 16 * w, 16 * w, rng),
            tail_bn1: BnLayer::new("features.tail_bn1", 16 * w),
            tail2: SeparableConv::new("features.tail2", 16 * w, 16 * w, rng),
            tail_bn2: BnLayer::new("features.tail_bn2", 16 * w),
            out_channels: 16 * w,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = self.stem1.forward(tape, x)?;
        h = self.stem_bn1.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        h = self.stem2.forward(tape, &h)?;
        h = self.stem_bn2.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        for block in &self.entry {
            h = block.forward(tape, &h, training)?;
        }
        for block in &self.middle {
            h = block.forward(tape, &h, training)?;
        }
        h = self.exit.forward(tape, &h, training)?;
        h = self.tail1.forward(tape, &h)?;
        h = self.tail_bn1.forward(tape, &h, training)?;
        h = engine::relu(tape, &h)?;
        h = self.tail2.forward(tape, &h)?;
        h = self.tail_bn2.forward(tape, &h, training)?;
        engine::relu(tape, &h)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.stem1.collect(out);
        self.stem_bn1.collect(out);
        self.stem2.collect(out);
        self.stem_bn2.collect(out);
        for block in &self.entry {
            block.collect(out);
        }
        for block in &self.middle {
            block.collect(out);
        }
        self.exit.collect(out);
        self.tail1.collect(out);
        self.tail_bn1.collect(out);
        self.tail2.collect(out);
        self.tail_bn2.collect(out);
    }
}
