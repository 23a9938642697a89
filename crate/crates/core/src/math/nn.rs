//! Small network building blocks: fully-connected stacks and residual conv blocks.
//!
//! Parameters live in plain tensors on the module. A forward pass first binds
//! them to a tape (`Module::bind`) and then threads the resulting vars
//! through `forward`, so gradients come back in `params()` order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::real::Real;
use crate::math::tape::{Tape, Var};
use crate::math::tensor::Tensor;

/// Anything that owns an ordered list of learnable tensors.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Register every parameter as a differentiable leaf.
    fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    /// Register every parameter as a constant (inference, frozen groups).
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Hidden-layer nonlinearity of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Invalid(format!("unknown activation '{other}'"))),
        }
    }

    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Softplus => tape.softplus(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

fn uniform<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Fully-connected network; weights stored `[in, out]`, linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Real> Mlp<T> {
    /// Uniform fan-in initialisation, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(uniform(&[w[0], w[1]], bound, rng));
            biases.push(uniform(&[w[1]], bound, rng));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        Self::check_widths(widths)?;
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            weights: widths.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect(),
            biases: widths.windows(2).map(|w| Tensor::zeros(&[w[1]])).collect(),
        })
    }

    /// Build from explicit per-layer tensors.
    pub fn from_layers(
        activation: Activation,
        weights: Vec<Tensor<T>>,
        biases: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("mlp needs matching weight/bias lists".into()));
        }
        let mut widths = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ndim() != 2 || w.rows() != *widths.last().unwrap() || b.len() != w.cols() {
                return Err(Error::Shape(format!(
                    "inconsistent layer: weight {:?}, bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            widths.push(w.cols());
        }
        Ok(Mlp {
            widths,
            activation,
            weights,
            biases,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!("bad mlp widths {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Zero the output layer so the network emits exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].data_mut().iter_mut().for_each(|x| *x = T::zero());
        self.biases[last].data_mut().iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn output_bias_mut(&mut self) -> &mut Tensor<T> {
        self.biases.last_mut().unwrap()
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.widths[0] {
            return Err(Error::Shape(format!(
                "mlp expects [N, {}] input, got {:?}",
                self.widths[0], s
            )));
        }
        Ok(s[0])
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let z = tape.matmul(h, bound[2 * l]);
            let z = tape.add_row(z, bound[2 * l + 1]);
            h = if l < last { self.activation.apply(tape, z) } else { z };
        }
        Ok(h)
    }

    /// Forward pass of a scalar-output network plus its input gradient,
    /// both recorded as ordinary tape ops so that losses on the gradient
    /// (e.g. an Eikonal penalty) differentiate with a first-order backward.
    pub fn forward_with_input_grad(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        x: Var,
    ) -> Result<(Var, Var)> {
        let n = self.check_input(tape, x)?;
        if self.output_dim() != 1 {
            return Err(Error::Contract("input gradient needs a scalar-output mlp".into()));
        }
        if self.activation == Activation::Relu {
            return Err(Error::Contract("relu has no usable second derivative".into()));
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        let mut pre = Vec::with_capacity(last);
        for l in 0..last {
            let z = tape.matmul(h, bound[2 * l]);
            let z = tape.add_row(z, bound[2 * l + 1]);
            pre.push(z);
            h = self.activation.apply(tape, z);
        }
        let y = tape.matmul(h, bound[2 * last]);
        let y = tape.add_row(y, bound[2 * last + 1]);

        let ones = tape.constant(Tensor::ones(&[n, 1]));
        let mut g = tape.matmul_bt(ones, bound[2 * last]);
        for l in (0..last).rev() {
            let d = match self.activation {
                Activation::Softplus => tape.sigmoid(pre[l]),
                Activation::Tanh => {
                    let t = tape.tanh(pre[l]);
                    let t2 = tape.square(t);
                    let nt2 = tape.neg(t2);
                    tape.add_scalar(nt2, T::one())
                }
                Activation::Relu => unreachable!(),
            };
            g = tape.mul(g, d);
            g = tape.matmul_bt(g, bound[2 * l]);
        }
        Ok((y, g))
    }

    /// Plain evaluation without recording gradients.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{l}.weight"), w));
            out.push((format!("layer{l}.bias"), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// 2D convolution layer, weights `[Co, Ci, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    /// He-uniform initialisation for relu stacks.
    pub fn new<R: Rng>(ci: usize, co: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (ci * k * k) as f64;
        Conv {
            weight: uniform(&[co, ci, k, k], (6.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[co]),
            stride,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Var {
        tape.conv2d(x, bound[0], bound[1], self.stride, self.pad)
    }
}

/// Residual bottleneck block: 1x1 reduce, 3x3 (strided), 1x1 expand, plus a
/// projection shortcut when the shape changes. Optional 2x nearest upsampling
/// is applied to the block input.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    pub upsample: bool,
    pub reduce: Conv<T>,
    pub spatial: Conv<T>,
    pub expand: Conv<T>,
    pub shortcut: Option<Conv<T>>,
}

impl<T: Real> Bottleneck<T> {
    pub fn new<R: Rng>(ci: usize, co: usize, stride: usize, upsample: bool, rng: &mut R) -> Self {
        let mid = (co / 4).max(1);
        let shortcut = (ci != co || stride != 1).then(|| Conv::new(ci, co, 1, stride, rng));
        Bottleneck {
            upsample,
            reduce: Conv::new(ci, mid, 1, 1, rng),
            spatial: Conv::new(mid, mid, 3, stride, rng),
            expand: Conv::new(mid, co, 1, 1, rng),
            shortcut,
        }
    }

    /// Zero the residual branch output so the block starts as its shortcut.
    pub fn zero_residual(&mut self) {
        self.expand.weight.data_mut().iter_mut().for_each(|x| *x = T::zero());
        self.expand.bias.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn out_channels(&self) -> usize {
        self.expand.out_channels()
    }

    fn convs(&self) -> Vec<&Conv<T>> {
        let mut v = vec![&self.reduce, &self.spatial, &self.expand];
        if let Some(s) = &self.shortcut {
            v.push(s);
        }
        v
    }

    /// Number of bound vars this block consumes.
    pub fn arity(&self) -> usize {
        2 * self.convs().len()
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Var {
        let x = if self.upsample { tape.upsample2x(x) } else { x };
        let h = self.reduce.forward(tape, &bound[0..2], x);
        let h = tape.relu(h);
        let h = self.spatial.forward(tape, &bound[2..4], h);
        let h = tape.relu(h);
        let h = self.expand.forward(tape, &bound[4..6], h);
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, &bound[6..8], x),
            None => x,
        };
        tape.add(h, s)
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let names = ["reduce", "spatial", "expand", "shortcut"];
        let mut out = Vec::new();
        for (c, n) in self.convs().into_iter().zip(names) {
            out.push((format!("{n}.weight"), &c.weight));
            out.push((format!("{n}.bias"), &c.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.reduce.weight,
            &mut self.reduce.bias,
            &mut self.spatial.weight,
            &mut self.spatial.bias,
            &mut self.expand.weight,
            &mut self.expand.bias,
        ];
        if let Some(s) = &mut self.shortcut {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::math::gradcheck::check_gradients;

    #[test]
    fn zero_mlp_gives_zero_output() {
        let mlp = Mlp::<f64>::zeros(&[3, 8, 8, 2], Activation::Softplus).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.1, 7.0]).unwrap();
        let y = mlp.eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_layer_passes_input_through() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let mlp = Mlp::from_layers(Activation::Softplus, vec![w], vec![b]).unwrap();
        let x = Tensor::from_f64(&[1, 2], &[0.3, -4.0]).unwrap();
        assert_eq!(mlp.eval(&x).unwrap().data(), x.data());
    }

    #[test]
    fn mlp_matches_hand_rolled_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::<f64>::new(&[3, 5, 2], Activation::Softplus, &mut rng).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[0.2, -0.4, 0.9, 1.5, 0.0, -0.3]).unwrap();
        let y = mlp.eval(&x).unwrap();
        let p = mlp.params();
        let (w0, b0, w1, b1) = (p[0].1, p[1].1, p[2].1, p[3].1);
        for r in 0..2 {
            let mut h = [0.0; 5];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut z = b0.data()[j];
                for i in 0..3 {
                    z += x.data()[r * 3 + i] * w0.data()[i * 5 + j];
                }
                *hj = (1.0 + z.exp()).ln();
            }
            for k in 0..2 {
                let mut z = b1.data()[k];
                for j in 0..5 {
                    z += h[j] * w1.data()[j * 2 + k];
                }
                assert!((z - y.data()[r * 2 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mlp = Mlp::<f64>::zeros(&[3, 4, 1], Activation::Softplus).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(mlp.eval(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_count_matches_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let widths = [3, 256, 256, 256, 256, 1];
        let mlp = Mlp::<f32>::new(&widths, Activation::Softplus, &mut rng).unwrap();
        let want: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(mlp.param_count(), want);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f64>::new(&[3, 6, 6, 1], Activation::Softplus, &mut rng).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[0.1, 0.5, -0.2, -0.7, 0.3, 0.9]).unwrap();
        let mut tape = Tape::new();
        let b = mlp.bind_frozen(&mut tape);
        let xv = tape.param(x.clone());
        let (_, g) = mlp.forward_with_input_grad(&mut tape, &b, xv).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp.data_mut()[r * 3 + c] += h;
                let mut xm = x.clone();
                xm.data_mut()[r * 3 + c] -= h;
                let fd = (mlp.eval(&xp).unwrap().data()[r] - mlp.eval(&xm).unwrap().data()[r]) / (2.0 * h);
                assert!((fd - tape.value(g).data()[r * 3 + c]).abs() < 1e-7, "{fd}");
            }
        }
    }

    #[test]
    fn eikonal_style_second_order_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::<f64>::new(&[3, 4, 1], Activation::Softplus, &mut rng).unwrap();
        let params: Vec<Tensor<f64>> = mlp.params().into_iter().map(|(_, t)| t.clone()).collect();
        let x = Tensor::from_f64(&[3, 3], &[0.1, 0.2, 0.3, -0.5, 0.4, 0.0, 0.9, -0.9, 0.2]).unwrap();
        let err = check_gradients(
            &|tape, vars| {
                let xv = tape.constant(x.clone());
                let (_, g) = mlp.forward_with_input_grad(tape, vars, xv).unwrap();
                let n = tape.norm_rows(g);
                let d = tape.add_scalar(n, -1.0);
                let sq = tape.square(d);
                tape.mean(sq)
            },
            &params,
            1e-5,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = Bottleneck::<f64>::new(4, 4, 1, false, &mut rng);
        blk.zero_residual();
        let mut tape = Tape::new();
        let b = blk.bind(&mut tape);
        let x = Tensor::from_f64(&[4, 3, 3], &(0..36).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let xv = tape.constant(x.clone());
        let y = blk.forward(&mut tape, &b, xv);
        assert_eq!(tape.value(y), &x);
    }
}
