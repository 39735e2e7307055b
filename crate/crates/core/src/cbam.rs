//! Convolutional block attention: channel attention followed by spatial
//! attention, each producing a sigmoid-gated reweighting of the feature map.
//!
//! Channel attention squeezes the map with global average *and* max pooling,
//! pushes both through one shared two-layer MLP (`C → C/r → C`, ReLU in the
//! middle, biases on both layers), sums the two branch outputs, and applies a
//! sigmoid. Spatial attention pools over the channel axis (mean and max),
//! concatenates the two single-channel maps, and convolves them with a 7×7
//! kernel (padding 3, no bias) into one sigmoid-gated map.

use rand::Rng;

use crate::engine::{
    self, fan_in_uniform, Parameter, Shape, Tape, Tensor,
};
use crate::error::{Error, Result};

/// Reduced hidden width of the channel-attention MLP: `max(1, ⌊C/r⌋)`.
pub fn reduced_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

/// Closed-form parameter count of one CBAM block:
/// `2·C·h + h + C + 98` with `h = max(1, ⌊C/r⌋)`; the 98 is the 7×7×2
/// spatial kernel.
pub fn cbam_param_count(channels: usize, reduction: usize) -> usize {
    let h = reduced_width(channels, reduction);
    2 * channels * h + h + channels + 98
}

/// Channel-attention submodule: shared MLP over pooled descriptors.
pub struct ChannelAttention {
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
    channels: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng>(
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<ChannelAttention> {
        if channels == 0 {
            return Err(Error::Value("channel attention needs channels >= 1".into()));
        }
        if reduction == 0 {
            return Err(Error::Value("channel attention needs reduction >= 1".into()));
        }
        let h = reduced_width(channels, reduction);
        Ok(ChannelAttention {
            w1: Parameter::new(
                format!("{prefix}.mlp.fc1.weight"),
                fan_in_uniform(Shape::new(h, channels, 1, 1), channels, rng),
            ),
            b1: Parameter::new(format!("{prefix}.mlp.fc1.bias"), Tensor::vector(vec![0.0; h])),
            w2: Parameter::new(
                format!("{prefix}.mlp.fc2.weight"),
                fan_in_uniform(Shape::new(channels, h, 1, 1), h, rng),
            ),
            b2: Parameter::new(
                format!("{prefix}.mlp.fc2.bias"),
                Tensor::vector(vec![0.0; channels]),
            ),
            channels,
        })
    }

    /// The attention vector `M_c(F)`: shape `(N, C, 1, 1)`, values in (0, 1).
    pub fn attention(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        if input.shape().c != self.channels {
            return Err(Error::Dimension(format!(
                "channel attention built for C={}, input has C={}",
                self.channels,
                input.shape().c
            )));
        }
        let avg = engine::global_avg_pool(tape, input)?;
        let max = engine::global_max_pool(tape, input)?;
        let shared = |tape: &mut Tape, pooled: &Tensor| -> Result<Tensor> {
            let h = engine::dense(tape, pooled, self.w1.tensor(), Some(self.b1.tensor()))?;
            let h = engine::relu(tape, &h)?;
            engine::dense(tape, &h, self.w2.tensor(), Some(self.b2.tensor()))
        };
        let a = shared(tape, &avg)?;
        let b = shared(tape, &max)?;
        let sum = engine::add(tape, &a, &b)?;
        engine::sigmoid(tape, &sum)
    }

    /// `F' = M_c(F) ⊗ F`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        let att = self.attention(tape, input)?;
        engine::mul_broadcast(tape, &att, input)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Spatial-attention submodule: 7×7 convolution over [mean-over-C; max-over-C].
pub struct SpatialAttention {
    conv: Parameter,
}

pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_PADDING: usize = 3;

impl SpatialAttention {
    pub fn new<R: Rng>(prefix: &str, rng: &mut R) -> SpatialAttention {
        SpatialAttention {
            conv: Parameter::new(
                format!("{prefix}.conv.weight"),
                fan_in_uniform(
                    Shape::new(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
                    2 * SPATIAL_KERNEL * SPATIAL_KERNEL,
                    rng,
                ),
            ),
        }
    }

    /// The attention map `M_s(F)`: shape `(N, 1, H, W)`, values in (0, 1).
    pub fn attention(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        let mean = engine::channel_mean(tape, input)?;
        let max = engine::channel_max(tape, input)?;
        let stacked = engine::concat_channels(tape, &mean, &max)?;
        let conv = engine::conv2d(tape, &stacked, self.conv.tensor(), None, 1, SPATIAL_PADDING)?;
        engine::sigmoid(tape, &conv)
    }

    /// `F'' = M_s(F') ⊗ F'`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        let att = self.attention(tape, input)?;
        engine::mul_broadcast(tape, &att, input)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.conv]
    }
}

/// Full CBAM block: channel attention then spatial attention, preserving the
/// input shape.
pub struct CbamBlock {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    channels: usize,
    reduction: usize,
}

impl CbamBlock {
    pub fn new<R: Rng>(
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<CbamBlock> {
        Ok(CbamBlock {
            channel: ChannelAttention::new(&format!("{prefix}.channel"), channels, reduction, rng)?,
            spatial: SpatialAttention::new(&format!("{prefix}.spatial"), rng),
            channels,
            reduction,
        })
    }

    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<Tensor> {
        if input.shape().h < SPATIAL_KERNEL && input.shape().h + 2 * SPATIAL_PADDING < SPATIAL_KERNEL
        {
            return Err(Error::Geometry(format!(
                "cbam: spatial extent {} too small for the 7x7 kernel",
                input.shape().h
            )));
        }
        let refined = self.channel.forward(tape, input)?;
        self.spatial.forward(tape, &refined)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.channel.parameters();
        p.extend(self.spatial.parameters());
        p
    }

    /// Instantiated parameter count; equals [`cbam_param_count`].
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::engine::{grad_check, he_uniform, sum_all, GradCheckConfig};

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: Shape, seed: u64) -> Tensor {
        he_uniform(shape, 2, &mut rng(seed))
    }

    #[test]
    fn constant_map_gives_uniform_channel_attention() {
        // All channels identical ⇒ pooled descriptors identical ⇒ the MLP sees
        // the same vector for avg and max, and every channel gets one weight.
        let mut t = Tape::inference();
        let ca = ChannelAttention::new("t", 4, 2, &mut rng(1)).unwrap();
        let x = Tensor::full(Shape::new(1, 4, 3, 3), 2.0);
        let att = ca.attention(&mut t, &x).unwrap();
        assert_eq!(att.shape(), Shape::new(1, 4, 1, 1));
        for &v in att.values().iter() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn channel_attention_orders_distinct_channels() {
        // The attention vector depends on the pooled per-channel statistics:
        // scaling one channel changes its weight but leaves the map bounded.
        let mut t = Tape::inference();
        let ca = ChannelAttention::new("t", 3, 2, &mut rng(2)).unwrap();
        let a = random(Shape::new(2, 3, 4, 4), 3);
        let att = ca.attention(&mut t, &a).unwrap();
        assert_eq!(att.shape(), Shape::new(2, 3, 1, 1));
        assert!(att.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_attention_rejects_wrong_width() {
        let mut t = Tape::inference();
        let ca = ChannelAttention::new("t", 3, 2, &mut rng(4)).unwrap();
        let x = Tensor::zeros(Shape::new(1, 5, 2, 2));
        assert!(ca.attention(&mut t, &x).is_err());
    }

    #[test]
    fn spatial_attention_shape_and_range() {
        let mut t = Tape::inference();
        let sa = SpatialAttention::new("t", &mut rng(5));
        let x = random(Shape::new(2, 6, 8, 8), 6);
        let att = sa.attention(&mut t, &x).unwrap();
        assert_eq!(att.shape(), Shape::new(2, 1, 8, 8));
        assert!(att.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn spatial_attention_is_channel_permutation_invariant() {
        // Mean and max over channels ignore channel order, so permuting the
        // channels must give the identical attention map.
        let mut t = Tape::inference();
        let sa = SpatialAttention::new("t", &mut rng(7));
        let x = random(Shape::new(1, 3, 5, 5), 8);
        let hw = 25;
        let v = x.values().clone();
        let mut permuted = vec![0.0f32; v.len()];
        // channel order 2,0,1
        permuted[..hw].copy_from_slice(&v[2 * hw..3 * hw]);
        permuted[hw..2 * hw].copy_from_slice(&v[..hw]);
        permuted[2 * hw..].copy_from_slice(&v[hw..2 * hw]);
        let xp = Tensor::from_vec(x.shape(), permuted).unwrap();
        let a1 = sa.attention(&mut t, &x).unwrap();
        let a2 = sa.attention(&mut t, &xp).unwrap();
        assert_eq!(*a1.values(), *a2.values());
    }

    #[test]
    fn cbam_preserves_shape_and_bounds_output() {
        let mut t = Tape::inference();
        let block = CbamBlock::new("cbam", 8, 16, &mut rng(9)).unwrap();
        let x = random(Shape::new(2, 8, 6, 6), 10);
        let y = block.forward(&mut t, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Attention gates shrink magnitudes; they never flip signs.
        for (&yi, &xi) in y.values().iter().zip(x.values().iter()) {
            assert!(yi.abs() <= xi.abs() + 1e-6);
            assert!(yi * xi >= 0.0 || yi == 0.0);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (c, r) in [(16usize, 16usize), (256, 16), (1, 16), (32, 16), (7, 3)] {
            let block = CbamBlock::new("t", c, r, &mut rng(11)).unwrap();
            assert_eq!(block.param_count(), cbam_param_count(c, r), "C={c}, r={r}");
        }
        // Anchored values used across the model family.
        assert_eq!(cbam_param_count(16, 16), 147);
        assert_eq!(cbam_param_count(256, 16), 8562);
        assert_eq!(cbam_param_count(1, 16), 102);
    }

    #[test]
    fn closed_form_walks_the_parameter_list() {
        // 2·C·h weights + h + C biases + 7·7·2 spatial kernel, h = max(1, C/r).
        for c in [1usize, 2, 16, 32, 64, 128, 256] {
            let h = reduced_width(c, 16);
            let by_hand = c * h + h + h * c + c + 2 * 7 * 7;
            assert_eq!(cbam_param_count(c, 16), by_hand);
        }
    }

    #[test]
    fn cbam_gradients_match_finite_differences() {
        let block = CbamBlock::new("cbam", 4, 2, &mut rng(12)).unwrap();
        let input = random(Shape::new(2, 4, 7, 7), 13);
        let params = block.parameters();
        let report = grad_check(
            |tape, x| {
                let y = block.forward(tape, x)?;
                sum_all(tape, &y)
            },
            &params,
            &input,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst);
    }
}
