use serde::{Deserialize, Serialize};

use super::{Ctx, Network, NetworkSpec};
use crate::conv::conv_out_len;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

pub const DISC_PADDING: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Five-layer patch discriminator.
///
/// Depth inputs are mapped from `depth_range` to [-1, 1] before the first
/// convolution so that they share the scale of normalized images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub leaky_slope: f64,
    pub depth_range: (f64, f64),
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self::pair()
    }
}

const DEFAULT_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const DEFAULT_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1];

impl DiscriminatorSpec {
    fn with_inputs(in_channels: usize) -> Self {
        Self {
            in_channels,
            layers: DEFAULT_STRIDES
                .iter()
                .zip(DEFAULT_WIDTHS)
                .map(|(&stride, out_channels)| ConvLayerSpec {
                    kernel: 4,
                    stride,
                    out_channels,
                })
                .collect(),
            leaky_slope: 0.2,
            depth_range: (0.0, 10.0),
        }
    }

    /// RGB image stacked with a depth map.
    pub fn pair() -> Self {
        Self::with_inputs(4)
    }

    pub fn depth() -> Self {
        Self::with_inputs(1)
    }

    /// Replaces the widths of layers 1-4; the last layer keeps one channel.
    pub fn with_widths(mut self, widths: [usize; 4]) -> Self {
        for (l, w) in self.layers.iter_mut().zip(widths) {
            l.out_channels = w;
        }
        self
    }

    pub fn with_depth_range(mut self, min_m: f64, max_m: f64) -> Self {
        self.depth_range = (min_m, max_m);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 5 {
            return Err(Error::Config(format!(
                "discriminator needs 5 layers, got {}",
                self.layers.len()
            )));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.out_channels == 0) {
            return Err(Error::Config("discriminator layers need positive kernel, stride and width".into()));
        }
        if self.layers[4].out_channels != 1 {
            return Err(Error::Config("last discriminator layer must have one channel".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid depth range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Smallest square input that still yields a non-empty output grid.
    pub fn min_input(&self) -> usize {
        (1..).find(|&n| discriminator_output_size(self, (n, n)).is_ok()).unwrap()
    }
}

/// Spatial size of the probability grid for an `(h, w)` input.
pub fn discriminator_output_size(spec: &DiscriminatorSpec, (h, w): (usize, usize)) -> Result<(usize, usize)> {
    spec.layers.iter().try_fold((h, w), |(h, w), l| {
        match (
            conv_out_len(h, l.kernel, l.stride, DISC_PADDING),
            conv_out_len(w, l.kernel, l.stride, DISC_PADDING),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Shape(format!("input {h}x{w} too small for the discriminator"))),
        }
    })
}

fn build(spec: &DiscriminatorSpec, role: NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let n = spec.min_input().max(32);
    let mut dummy = vec![];
    if spec.in_channels == 4 {
        dummy.push(Tensor::zeros(&[1, 3, n, n]));
    }
    dummy.push(Tensor::zeros(&[1, 1, n, n]));
    let s = spec.clone();
    Network::declare(role, dummy, move |ctx, ins| forward(&s, ctx, ins))
}

pub fn build_pair_discriminator(spec: &DiscriminatorSpec) -> Result<Network> {
    if spec.in_channels != 4 {
        return Err(Error::Config(format!(
            "pair discriminator takes 4 input channels, spec has {}",
            spec.in_channels
        )));
    }
    build(spec, NetworkSpec::PairDiscriminator(spec.clone()))
}

pub fn build_depth_discriminator(spec: &DiscriminatorSpec) -> Result<Network> {
    if spec.in_channels != 1 {
        return Err(Error::Config(format!(
            "depth discriminator takes 1 input channel, spec has {}",
            spec.in_channels
        )));
    }
    build(spec, NetworkSpec::DepthDiscriminator(spec.clone()))
}

/// Inputs are `[image, depth]` for the pair discriminator and `[depth]`
/// for the depth discriminator. Returns N×1×h×w patch probabilities.
pub(super) fn forward(spec: &DiscriminatorSpec, ctx: &mut Ctx<'_>, inputs: &[Var]) -> Result<Var> {
    let (lo, hi) = spec.depth_range;
    let half = (hi - lo) / 2.0;
    let mut x = match (spec.in_channels, inputs) {
        (4, [image, depth]) => {
            let d = ctx.g.affine(*depth, 1.0 / half, -(lo + half) / half);
            ctx.g.concat_channels(&[*image, d])?
        }
        (1, [depth]) => ctx.g.affine(*depth, 1.0 / half, -(lo + half) / half),
        _ => {
            return Err(Error::Shape(format!(
                "discriminator with {} channels got {} inputs",
                spec.in_channels,
                inputs.len()
            )))
        }
    };
    let (_, c, _, _) = ctx.g.value(x).dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "discriminator expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    let last = spec.layers.len() - 1;
    for (i, l) in spec.layers.iter().enumerate() {
        let name = format!("layer{}", i + 1);
        if i < last {
            x = ctx.conv(&name, x, l.out_channels, l.kernel, l.stride, DISC_PADDING, false)?;
            x = ctx.bn(&format!("{name}.bn"), x)?;
            x = ctx.g.leaky_relu(x, spec.leaky_slope);
        } else {
            x = ctx.conv(&name, x, l.out_channels, l.kernel, l.stride, DISC_PADDING, true)?;
        }
    }
    Ok(ctx.g.sigmoid(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InitScheme;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn narrow_pair() -> DiscriminatorSpec {
        DiscriminatorSpec::pair().with_widths([4, 8, 8, 8])
    }

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn output_grid_matches_conv_arithmetic() {
        let mut d = build_pair_discriminator(&narrow_pair()).unwrap();
        d.init_params(&InitScheme::Normal002 { seed: 0 }).unwrap();
        for (h, w) in [(228, 304), (64, 64), (40, 72)] {
            // oracle: floor((n + 2 - 4) / s) + 1 per layer
            let mut want = (h, w);
            for s in [2, 2, 2, 1, 1] {
                want = ((want.0 + 2 - 4) / s + 1, (want.1 + 2 - 4) / s + 1);
            }
            let img = rand_tensor(&[1, 3, h, w], -2.0, 2.0, 1);
            let dep = rand_tensor(&[1, 1, h, w], 0.5, 9.0, 2);
            let out = d.infer(&[&img, &dep]).unwrap();
            assert_eq!(out.shape(), &[1, 1, want.0, want.1]);
            assert_eq!(discriminator_output_size(d_spec(&d), (h, w)).unwrap(), want);
        }
    }

    fn d_spec(n: &Network) -> &DiscriminatorSpec {
        match n.spec() {
            NetworkSpec::PairDiscriminator(s) | NetworkSpec::DepthDiscriminator(s) => s,
            _ => unreachable!(),
        }
    }

    #[test]
    fn nyu_sized_pair_input_with_default_widths() {
        let mut d = build_pair_discriminator(&DiscriminatorSpec::pair()).unwrap();
        d.init_params(&InitScheme::Normal002 { seed: 4 }).unwrap();
        let img = rand_tensor(&[1, 3, 228, 304], -2.0, 2.0, 3);
        let dep = rand_tensor(&[1, 1, 228, 304], 0.5, 9.0, 4);
        let out = d.infer(&[&img, &dep]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 26, 36]);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut d = build_depth_discriminator(&DiscriminatorSpec::depth().with_widths([4, 4, 4, 4])).unwrap();
        d.zero_params();
        let out = d.infer(&[&rand_tensor(&[2, 1, 48, 48], 0.1, 9.0, 5)]).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn channel_checks() {
        assert!(build_pair_discriminator(&DiscriminatorSpec::depth()).is_err());
        assert!(build_depth_discriminator(&DiscriminatorSpec::pair()).is_err());
        let mut bad = DiscriminatorSpec::pair();
        bad.layers.pop();
        assert!(build_pair_discriminator(&bad).is_err());
        let d = build_pair_discriminator(&narrow_pair()).unwrap();
        let dep = Tensor::zeros(&[1, 1, 64, 64]);
        assert!(d.infer(&[&dep]).is_err());
        let wrong = Tensor::zeros(&[1, 2, 64, 64]);
        assert!(d.infer(&[&wrong, &dep]).is_err());
    }

    #[test]
    fn parameter_count() {
        let spec = narrow_pair();
        let d = build_pair_discriminator(&spec).unwrap();
        let widths = [4usize, 8, 8, 8];
        let mut cin = 4;
        let mut want = 0;
        for w in widths {
            want += cin * w * 16 + 2 * w;
            cin = w;
        }
        want += cin * 16 + 1;
        assert_eq!(d.param_count(), want);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn probabilities_in_open_unit_interval(seed in 0u64..1000, h in 24usize..48, w in 24usize..48) {
            let mut d = build_pair_discriminator(&narrow_pair()).unwrap();
            d.init_params(&InitScheme::Normal002 { seed }).unwrap();
            let img = rand_tensor(&[1, 3, h, w], -3.0, 3.0, seed);
            let dep = rand_tensor(&[1, 1, h, w], 0.0, 10.0, seed + 1);
            let out = d.infer(&[&img, &dep]).unwrap();
            prop_assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}
