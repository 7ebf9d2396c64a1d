//! Residual and dense stages used as like-for-like baselines.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNormConfig, Builder, CompositeFunction, Dropout};
use crate::params::Forward;

/// `relu(bn(conv(cf(x))) + x)`: two 3x3 composite functions with an
/// identity skip; the second skips its ReLU until after the addition.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetBlock {
    pub first: CompositeFunction,
    pub second: CompositeFunction,
}

impl ResNetBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, bias: bool, bn: BatchNormConfig) -> Result<Self> {
        Ok(ResNetBlock {
            first: CompositeFunction::new(b, &format!("{name}.cf1"), channels, channels, 3, bias, bn)?,
            second: CompositeFunction::new(b, &format!("{name}.cf2"), channels, channels, 3, bias, bn)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(f, x)?;
        let r = self.second.pre_activation(f, h)?;
        let y = f.tape.add(r, x)?;
        f.tape.relu(y)
    }

    pub fn param_count(channels: usize, bias: bool) -> usize {
        2 * CompositeFunction::param_count(channels, channels, 3, bias)
    }
}

/// Layer `l` consumes the concatenation of the block input and every
/// earlier layer output; the block emits all of them concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub layers: Vec<CompositeFunction>,
    pub in_channels: usize,
    pub growth: usize,
    pub dropout: Dropout,
}

impl DenseBlock {
    pub fn layer_input_channels(in_channels: usize, growth: usize, layers: usize) -> Vec<usize> {
        (0..layers).map(|l| in_channels + l * growth).collect()
    }

    pub fn new(
        b: &mut Builder,
        name: &str,
        in_channels: usize,
        growth: usize,
        layers: usize,
        bias: bool,
        bn: BatchNormConfig,
        dropout: Dropout,
    ) -> Result<Self> {
        if layers == 0 || growth == 0 {
            return Err(Error::Config("dense block needs at least one layer and growth >= 1".into()));
        }
        let layers = Self::layer_input_channels(in_channels, growth, layers)
            .into_iter()
            .enumerate()
            .map(|(l, in_c)| CompositeFunction::new(b, &format!("{name}.layer{}", l + 1), in_c, growth, 3, bias, bn))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseBlock { layers, in_channels, growth, dropout })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut stream = vec![x];
        for layer in &self.layers {
            let input = if stream.len() == 1 { x } else { f.tape.concat_channels(&stream)? };
            let y = layer.forward(f, input)?;
            stream.push(self.dropout.forward(f, y)?);
        }
        f.tape.concat_channels(&stream)
    }

    pub fn param_count(in_channels: usize, growth: usize, layers: usize, bias: bool) -> usize {
        Self::layer_input_channels(in_channels, growth, layers)
            .into_iter()
            .map(|in_c| CompositeFunction::param_count(in_c, growth, 3, bias))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_is_relu_of_input() {
        let mut b = Builder::new(0);
        let block = ResNetBlock::new(&mut b, "r", 3, false, BatchNormConfig::default()).unwrap();
        let (mut p, buf) = b.finish();
        p.get_mut(block.second.conv.weight).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng).unwrap();
        let mut f = Forward::new(&p, &buf, Mode::Eval, 0);
        let x = f.input(input.clone());
        let y = block.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.value(y), &input.map(|v| v.max(0.0)));
    }

    #[test]
    fn dense_widths() {
        assert_eq!(DenseBlock::layer_input_channels(8, 4, 3), vec![8, 12, 16]);
        let mut b = Builder::new(0);
        let d = DenseBlock::new(&mut b, "d", 8, 4, 3, false, BatchNormConfig::default(), Dropout::new(0.0).unwrap())
            .unwrap();
        let (p, buf) = b.finish();
        assert_eq!(DenseBlock::param_count(8, 4, 3, false), p.numel());
        let mut f = Forward::new(&p, &buf, Mode::Train, 0);
        let x = f.input(Tensor::full(vec![1, 8, 4, 4], 1.0).unwrap());
        let y = d.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.value(y).dims(), &[1, 20, 4, 4]);
        assert_eq!(d.out_channels(), 20);
    }
}
