//! Learnable parameter bundles and their tape registration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Fully connected layer, input x weight + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor, // in x out
    pub bias: Tensor,   // out
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::new(vec![input, output], xavier(rng, input, output, input * output))
                .unwrap()
                .with_grad(true),
            bias: Tensor::zeros(vec![output]).with_grad(true),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> LinearVals {
        LinearVals {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVals {
    pub weight: Val,
    pub bias: Val,
}

impl LinearVals {
    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val> {
        let h = tape.matmul(x, self.weight)?;
        tape.add(h, self.bias)
    }
}

/// Stack of fully connected layers with relu between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary: input, hidden..., output.
    pub fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.dims()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.dims()[1]
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVals {
        MlpVals {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.{i}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpVals {
    pub layers: Vec<LinearVals>,
}

impl MlpVals {
    /// Rebuilds layer handles from a flat weight/bias val list (the same
    /// order `register` produces them in).
    pub fn from_ordered(vals: &[Val]) -> Self {
        MlpVals {
            layers: vals
                .chunks_exact(2)
                .map(|pair| LinearVals {
                    weight: pair[0],
                    bias: pair[1],
                })
                .collect(),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// 3x3 same-size convolution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor, // 3 x 3 x cin x cout
    pub bias: Tensor,    // cout
}

impl ConvLayer {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        let fan_in = 9 * cin;
        ConvLayer {
            kernels: Tensor::new(
                vec![3, 3, cin, cout],
                xavier(rng, fan_in, cout, 9 * cin * cout),
            )
            .unwrap()
            .with_grad(true),
            bias: Tensor::zeros(vec![cout]).with_grad(true),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ConvVals {
        ConvVals {
            kernels: tape.leaf(&self.kernels),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.kernels"), &self.kernels));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.kernels"), &mut self.kernels));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVals {
    pub kernels: Val,
    pub bias: Val,
}

impl ConvVals {
    pub fn apply(&self, tape: &mut Tape, image: Val) -> Result<Val> {
        tape.conv2d_same(image, self.kernels, self.bias)
    }
}
