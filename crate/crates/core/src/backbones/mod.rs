//! Desk-scale CNN backbones with configurable attention placement.
//!
//! Three families are provided — residual ([`resnet`]), densely connected
//! ([`densenet`]), and depthwise-separable ([`xception`]) — each shrunk from
//! its full-scale namesake by a width parameter and a depth scale while
//! keeping the structural signature (stage layout, growth/transition rules,
//! entry/middle/exit flow). Every model ends in the same classifier: global
//! average pooling, a hidden dense layer with ReLU, and a single sigmoid
//! output giving the susceptibility probability.
//!
//! Attention placement is uniform across families:
//!
//! * [`Placement::None`] — plain backbone.
//! * [`Placement::Head`] — one [`CbamBlock`] on the raw input stack.
//! * [`Placement::Tail`] — one [`CbamBlock`] on the final feature map.
//! * [`Placement::In`] — a [`CbamBlock`] at the end of each structural block
//!   (residual block / dense block / skip-connected separable block),
//!   optionally restricted by [`BackboneSpec::in_block_mask`].
//!
//! [`Model::save`] writes a self-describing binary container (magic,
//! format version, the JSON spec, then all parameters and running-stat
//! buffers as name-sorted little-endian `f32` arrays), and [`Model::load`]
//! restores it exactly: save → load → save is byte-identical.

mod densenet;
mod layers;
mod resnet;
mod xception;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::CbamBlock;
use crate::engine::{self, Parameter, Tape, Tensor};
use crate::error::{Error, Result};

use densenet::DenseNet;
use layers::DenseLayer;
use resnet::ResNet;
use xception::Xception;

/// Magic bytes opening a serialized model file.
pub const MODEL_MAGIC: &[u8; 11] = b"FFSM-MODEL\0";
/// Current model file format version.
pub const MODEL_VERSION: u16 = 1;

/// Backbone family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet18,
    Densenet121,
    Xception,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::Densenet121 => "densenet121",
            BackboneKind::Xception => "xception",
        };
        f.write_str(name)
    }
}

/// Where attention blocks sit relative to the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    None,
    Head,
    Tail,
    In,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Placement::None => "none",
            Placement::Head => "head",
            Placement::Tail => "tail",
            Placement::In => "in",
        };
        f.write_str(name)
    }
}

fn default_reduction() -> usize {
    16
}

fn default_classifier_hidden() -> usize {
    64
}

/// Complete architectural description of a model. Serialized into saved
/// model files, so two processes that share a spec and a seed build
/// identical networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    #[serde(default)]
    pub placement: Placement,
    /// Input channels: the number of conditioning factors in the stack.
    pub factors: usize,
    /// Input spatial size: patches are `patch × patch` pixels.
    pub patch: usize,
    /// Width knob: stage-0 width for the residual and separable families,
    /// growth rate for the densely connected family.
    pub base_width: usize,
    /// Depth knob in `(0, 1]`: 1 keeps the full-scale block counts.
    pub depth_scale: f64,
    /// Channel-attention bottleneck reduction ratio.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Width of the hidden dense layer in the classifier head.
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: usize,
    /// For [`Placement::In`]: which structural blocks carry attention, in
    /// construction order. `None` means every block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_block_mask: Option<Vec<bool>>,
}

impl BackboneSpec {
    /// Desk-scale defaults for each family.
    pub fn desk_default(kind: BackboneKind, factors: usize, patch: usize) -> BackboneSpec {
        let (base_width, depth_scale) = match kind {
            BackboneKind::Resnet18 => (32, 1.0),
            BackboneKind::Densenet121 => (12, 0.25),
            BackboneKind::Xception => (32, 0.25),
        };
        BackboneSpec {
            kind,
            placement: Placement::None,
            factors,
            patch,
            base_width,
            depth_scale,
            reduction: default_reduction(),
            classifier_hidden: default_classifier_hidden(),
            in_block_mask: None,
        }
    }

    /// Smallest admissible patch size: the spatial extent must survive every
    /// downsampling step in the chosen family.
    pub fn min_patch(kind: BackboneKind) -> usize {
        match kind {
            BackboneKind::Resnet18 | BackboneKind::Densenet121 => 8,
            BackboneKind::Xception => 16,
        }
    }

    /// Number of structural blocks an in-block attention mask indexes.
    pub fn block_count(&self) -> usize {
        match self.kind {
            BackboneKind::Resnet18 => resnet::block_count(self.depth_scale),
            BackboneKind::Densenet121 => densenet::block_count(),
            BackboneKind::Xception => xception::block_count(self.depth_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Config("spec: factors must be at least 1".into()));
        }
        let min_patch = Self::min_patch(self.kind);
        if self.patch < min_patch {
            return Err(Error::Config(format!(
                "spec: patch {} is below the minimum {} for {}",
                self.patch, min_patch, self.kind
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("spec: base_width must be at least 1".into()));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale <= 1.0) {
            return Err(Error::Config(format!(
                "spec: depth_scale must lie in (0, 1], got {}",
                self.depth_scale
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("spec: reduction must be at least 1".into()));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::Config(
                "spec: classifier_hidden must be at least 1".into(),
            ));
        }
        match &self.in_block_mask {
            Some(_) if self.placement != Placement::In => {
                return Err(Error::Config(format!(
                    "spec: in_block_mask requires placement \"in\", got \"{}\"",
                    self.placement
                )));
            }
            Some(mask) if mask.len() != self.block_count() => {
                return Err(Error::Config(format!(
                    "spec: in_block_mask has {} entries but {} with depth_scale {} has {} blocks",
                    mask.len(),
                    self.kind,
                    self.depth_scale,
                    self.block_count()
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

enum Net {
    Resnet(Box<ResNet>),
    Densenet(Box<DenseNet>),
    Xception(Box<Xception>),
}

impl Net {
    fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Net::Resnet(n) => n.forward(tape, x, training),
            Net::Densenet(n) => n.forward(tape, x, training),
            Net::Xception(n) => n.forward(tape, x, training),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Net::Resnet(n) => n.out_channels(),
            Net::Densenet(n) => n.out_channels(),
            Net::Xception(n) => n.out_channels(),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        match self {
            Net::Resnet(n) => n.collect(out),
            Net::Densenet(n) => n.collect(out),
            Net::Xception(n) => n.collect(out),
        }
    }
}

/// A built network: backbone, attention blocks per the spec's placement, and
/// the sigmoid classifier head.
pub struct Model {
    spec: BackboneSpec,
    head_cbam: Option<CbamBlock>,
    net: Net,
    tail_cbam: Option<CbamBlock>,
    fc1: DenseLayer,
    fc2: DenseLayer,
}

impl Model {
    /// Build a freshly initialized model. Construction order is fixed, so a
    /// given `(spec, seed)` pair always produces identical parameters.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_cbam = (spec.placement == Placement::Head)
            .then(|| CbamBlock::new("cbam_head", spec.factors, spec.reduction, &mut rng))
            .transpose()?;
        let in_mask = (spec.placement == Placement::In).then(|| {
            spec.in_block_mask
                .clone()
                .unwrap_or_else(|| vec![true; spec.block_count()])
        });
        let in_cbam = in_mask
            .as_ref()
            .map(|mask| (mask.as_slice(), spec.reduction));
        let net = match spec.kind {
            BackboneKind::Resnet18 => Net::Resnet(Box::new(ResNet::new(
                spec.factors,
                spec.base_width,
                spec.depth_scale,
                in_cbam,
                &mut rng,
            )?)),
            BackboneKind::Densenet121 => Net::Densenet(Box::new(DenseNet::new(
                spec.factors,
                spec.base_width,
                spec.depth_scale,
                in_cbam,
                &mut rng,
            )?)),
            BackboneKind::Xception => Net::Xception(Box::new(Xception::new(
                spec.factors,
                spec.base_width,
                spec.depth_scale,
                in_cbam,
                &mut rng,
            )?)),
        };
        let tail_cbam = (spec.placement == Placement::Tail)
            .then(|| CbamBlock::new("cbam_tail", net.out_channels(), spec.reduction, &mut rng))
            .transpose()?;
        let fc1 = DenseLayer::new(
            "classifier.fc1",
            net.out_channels(),
            spec.classifier_hidden,
            &mut rng,
        );
        let fc2 = DenseLayer::new("classifier.fc2", spec.classifier_hidden, 1, &mut rng);
        Ok(Model {
            spec: spec.clone(),
            head_cbam,
            net,
            tail_cbam,
            fc1,
            fc2,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Forward pass producing susceptibility probabilities of shape
    /// `(N, 1, 1, 1)`. Input must be `(N, factors, patch, patch)`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let s = x.shape();
        if s.c != self.spec.factors || s.h != self.spec.patch || s.w != self.spec.patch {
            return Err(Error::Dimension(format!(
                "model expects (N, {}, {}, {}) input, got {}",
                self.spec.factors, self.spec.patch, self.spec.patch, s
            )));
        }
        let mut h = match &self.head_cbam {
            Some(cbam) => cbam.forward(tape, x)?,
            None => x.clone(),
        };
        h = self.net.forward(tape, &h, training)?;
        if let Some(cbam) = &self.tail_cbam {
            h = cbam.forward(tape, &h)?;
        }
        h = engine::global_avg_pool(tape, &h)?;
        h = self.fc1.forward(tape, &h)?;
        h = engine::relu(tape, &h)?;
        h = self.fc2.forward(tape, &h)?;
        engine::sigmoid(tape, &h)
    }

    /// All parameters in construction order, running-stat buffers included.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(cbam) = &self.head_cbam {
            out.extend(cbam.parameters());
        }
        self.net.collect(&mut out);
        if let Some(cbam) = &self.tail_cbam {
            out.extend(cbam.parameters());
        }
        self.fc1.collect(&mut out);
        self.fc2.collect(&mut out);
        out
    }

    /// Number of trainable scalars (running-stat buffers excluded).
    pub fn param_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.len())
            .sum()
    }

    /// Write the model to `path` in the versioned binary container format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(MODEL_MAGIC)?;
        file.write_all(&MODEL_VERSION.to_le_bytes())?;
        let spec_json = serde_json::to_vec(&self.spec)
            .map_err(|e| Error::Format(format!("model save: spec serialization failed: {e}")))?;
        file.write_all(&(spec_json.len() as u32).to_le_bytes())?;
        file.write_all(&spec_json)?;
        let params: BTreeMap<&str, &Parameter> = self
            .parameters()
            .into_iter()
            .map(|p| (p.name(), p))
            .collect();
        file.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, param) in params {
            let name_bytes = name.as_bytes();
            file.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            file.write_all(name_bytes)?;
            let values = param.tensor().values();
            file.write_all(&(values.len() as u32).to_le_bytes())?;
            for v in values.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Read a model saved by [`Model::save`], restoring every parameter and
    /// buffer exactly.
    pub fn load(path: &Path) -> Result<Model> {
        let mut file = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 11];
        read_exact(&mut file, &mut magic, "magic")?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(
                "model load: not a model file (bad magic)".into(),
            ));
        }
        let version = read_u16(&mut file, "version")?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model load: unsupported format version {version} (expected {MODEL_VERSION})"
            )));
        }
        let spec_len = read_u32(&mut file, "spec length")? as usize;
        let mut spec_json = vec![0u8; spec_len];
        read_exact(&mut file, &mut spec_json, "spec")?;
        let spec: BackboneSpec = serde_json::from_slice(&spec_json)
            .map_err(|e| Error::Format(format!("model load: invalid spec JSON: {e}")))?;
        let model = Model::build(&spec, 0)?;

        let params: BTreeMap<&str, &Parameter> = model
            .parameters()
            .into_iter()
            .map(|p| (p.name(), p))
            .collect();
        let n_arrays = read_u32(&mut file, "array count")? as usize;
        if n_arrays != params.len() {
            return Err(Error::Format(format!(
                "model load: file holds {} arrays but the spec builds {}",
                n_arrays,
                params.len()
            )));
        }
        let mut filled = std::collections::HashSet::new();
        for _ in 0..n_arrays {
            let name_len = read_u16(&mut file, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut file, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("model load: non-UTF-8 parameter name".into()))?;
            let param = params.get(name.as_str()).ok_or_else(|| {
                Error::Format(format!("model load: unknown parameter \"{name}\""))
            })?;
            if !filled.insert(name.clone()) {
                return Err(Error::Format(format!(
                    "model load: duplicate parameter \"{name}\""
                )));
            }
            let count = read_u32(&mut file, "value count")? as usize;
            if count != param.len() {
                return Err(Error::Format(format!(
                    "model load: parameter \"{name}\" holds {} values but the spec expects {}",
                    count,
                    param.len()
                )));
            }
            let mut bytes = vec![0u8; count * 4];
            read_exact(&mut file, &mut bytes, "values")?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            param.tensor().set_values(&values)?;
        }
        drop(params);
        Ok(model)
    }
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("model load: truncated file (reading {what})")))
}

fn read_u16<R: Read>(reader: &mut R, what: &str) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(reader, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(reader: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
