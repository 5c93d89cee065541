use rand::Rng;

use crate::tensor::{Graph, Padding, Tensor, Var};
use crate::Result;

/// Fully connected layer, `weights [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weights: Tensor::glorot([outputs, inputs], inputs, outputs, rng),
            bias: Tensor::zeros([outputs]).with_grad(),
        }
    }
}

/// Stride-1 "same" convolution with one bias per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        Conv2d {
            kernels: Tensor::glorot(
                [filters, in_channels, kernel, kernel],
                in_channels * area,
                filters * area,
                rng,
            ),
            bias: Tensor::zeros([filters]).with_grad(),
        }
    }

    pub fn forward(g: &mut Graph<'_>, kernels: Var, bias: Var, x: Var) -> Result<Var> {
        let y = g.conv2d(x, kernels, 1, Padding::Same)?;
        g.bias_add(y, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Dense::new(10, 5, &mut rng);
        assert_eq!(d.weights.len() + d.bias.len(), 55);
        let c = Conv2d::new(1, 256, 3, &mut rng);
        assert_eq!(c.kernels.len() + c.bias.len(), 2_560);
    }
}
