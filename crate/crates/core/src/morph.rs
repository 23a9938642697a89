//! Instance deformation, vertex feature field, image feature adapter, latent
//! encoder and background feature.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Activation, Bottleneck, Mlp, Module, Real, Tape, Tensor, Var};

/// Bound on `alpha - 1`.
pub const SCALE_RANGE: f64 = 0.5;
/// Bound on `delta`.
pub const SHIFT_RANGE: f64 = 0.5;

fn mlp_widths(input: usize, layers: usize, hidden: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat(hidden).take(layers.saturating_sub(1)));
    w.push(output);
    w
}

/// `v * alpha + delta`, row-wise over `[N, 3]`.
pub fn affine_apply<T: Real>(tape: &mut Tape<T>, v: Var, alpha: Var, delta: Var) -> Var {
    let s = tape.mul(v, alpha);
    tape.add(s, delta)
}

/// Latent-conditioned per-vertex affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> DeformationField<T> {
    /// Output layer starts at zero, so the initial field is the identity.
    pub fn new<R: Rng>(layers: usize, hidden: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::new(&mlp_widths(3 + latent_dim, layers, hidden, 6), Activation::Softplus, rng)?;
        mlp.zero_output_layer();
        Ok(DeformationField { mlp })
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.input_dim() - 3
    }

    /// Bounded scale and shift `([N, 3], [N, 3])` for vertices `[N, 3]`.
    pub fn scale_shift(&self, tape: &mut Tape<T>, bound: &[Var], v: Var, latent: Var) -> Result<(Var, Var)> {
        let n = tape.shape(v)[0];
        if tape.value(latent).len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has {} entries, field expects {}",
                tape.value(latent).len(),
                self.latent_dim()
            )));
        }
        let l = tape.broadcast_rows(latent, n);
        let x = tape.concat_cols(&[v, l]);
        let raw = self.mlp.forward(tape, bound, x)?;
        let a = tape.slice_cols(raw, 0, 3);
        let a = tape.tanh(a);
        let a = tape.scale(a, T::c(SCALE_RANGE));
        let alpha = tape.add_scalar(a, T::one());
        let d = tape.slice_cols(raw, 3, 6);
        let d = tape.tanh(d);
        let delta = tape.scale(d, T::c(SHIFT_RANGE));
        Ok((alpha, delta))
    }

    /// Deformed vertex positions.
    pub fn deform(&self, tape: &mut Tape<T>, bound: &[Var], v: Var, latent: Var) -> Result<Var> {
        let (alpha, delta) = self.scale_shift(tape, bound, v, latent)?;
        Ok(affine_apply(tape, v, alpha, delta))
    }
}

impl<T: Real> Module<T> for DeformationField<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.mlp.params_mut()
    }
}

/// Canonical position to unit-norm semantic descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> FeatureField<T> {
    pub fn new<R: Rng>(layers: usize, hidden: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(FeatureField {
            mlp: Mlp::new(&mlp_widths(3, layers, hidden, dim), Activation::Softplus, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Unit rows `[N, D]` for positions `[N, 3]`.
    pub fn vertex_features(&self, tape: &mut Tape<T>, bound: &[Var], v: Var) -> Result<Var> {
        let raw = self.mlp.forward(tape, bound, v)?;
        let tiny = T::c(1e-12);
        let d = self.dim();
        if tape.value(raw).data().chunks(d).any(|r| r.iter().all(|x| x.abs() < tiny)) {
            return Err(Error::Numeric("feature field produced a zero-norm feature".into()));
        }
        Ok(tape.normalize_rows(raw))
    }

    pub fn eval(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(v.clone());
        let f = self.vertex_features(&mut tape, &b, x)?;
        Ok(tape.value(f).clone())
    }
}

impl<T: Real> Module<T> for FeatureField<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.mlp.params_mut()
    }
}

fn padded(list: &[usize], n: usize, fill: Option<usize>) -> Result<Vec<usize>> {
    if list.is_empty() {
        return Err(Error::Config("block list must not be empty".into()));
    }
    if list.len() > n {
        return Err(Error::Config(format!("{} entries for {} blocks", list.len(), n)));
    }
    let pad = fill.unwrap_or(*list.last().unwrap());
    let mut out = list.to_vec();
    out.resize(n, pad);
    Ok(out)
}

/// Layout of a stack of bottleneck blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub blocks: usize,
    pub out_dims: Vec<usize>,
    pub strides: Vec<usize>,
    pub upsampling: Vec<usize>,
}

impl StackSpec {
    /// Expand per-block lists to `blocks` entries. Dims repeat the last
    /// value, strides and upsampling factors pad with 1.
    pub fn resolve(&self) -> Result<Vec<(usize, usize, bool)>> {
        let dims = padded(&self.out_dims, self.blocks, None)?;
        let strides = padded(&self.strides, self.blocks, Some(1))?;
        let ups = padded(&self.upsampling, self.blocks, Some(1))?;
        dims.iter()
            .zip(&strides)
            .zip(&ups)
            .map(|((&d, &s), &u)| {
                if d == 0 || s == 0 || !(u == 1 || u == 2) {
                    return Err(Error::Config(format!("bad block (dim {d}, stride {s}, upsampling {u})")));
                }
                Ok((d, s, u == 2))
            })
            .collect()
    }
}

fn build_stack<T: Real, R: Rng>(input: usize, spec: &StackSpec, rng: &mut R) -> Result<Vec<Bottleneck<T>>> {
    let mut ci = input;
    let mut out = Vec::new();
    for (co, s, up) in spec.resolve()? {
        out.push(Bottleneck::new(ci, co, s, up, rng));
        ci = co;
    }
    Ok(out)
}

fn stack_forward<T: Real>(blocks: &[Bottleneck<T>], tape: &mut Tape<T>, bound: &[Var], x: Var) -> Var {
    let mut h = x;
    let mut off = 0;
    for b in blocks {
        let n = b.arity();
        h = b.forward(tape, &bound[off..off + n], h);
        off += n;
    }
    h
}

fn stack_params<'a, T: Real>(prefix: &str, blocks: &'a [Bottleneck<T>]) -> Vec<(String, &'a Tensor<T>)> {
    blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.params().into_iter().map(move |(n, t)| (format!("{prefix}{i}.{n}"), t)))
        .collect()
}

/// `[C, H, W]` pixels as `[H*W, C]` rows.
pub fn pixel_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let m = tape.reshape(x, &[s[0], s[1] * s[2]]);
    tape.transpose(m)
}

/// Convolutional head turning backbone maps into per-pixel unit descriptors
/// at twice the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    pub blocks: Vec<Bottleneck<T>>,
}

impl<T: Real> Adapter<T> {
    /// A block whose input and output shapes agree starts as the identity.
    pub fn new<R: Rng>(in_channels: usize, spec: &StackSpec, rng: &mut R) -> Result<Self> {
        let mut blocks = build_stack(in_channels, spec, rng)?;
        if let Some(last) = blocks.last_mut() {
            if last.shortcut.is_none() && !last.upsample {
                last.zero_residual();
            }
        }
        Ok(Adapter { blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels()).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].reduce.in_channels()
    }

    /// Unit descriptors `[H'*W', D]` for a `[C, H, W]` map; also returns `(H', W')`.
    pub fn adapt(&self, tape: &mut Tape<T>, bound: &[Var], raw: Var) -> Result<(Var, (usize, usize))> {
        let s = tape.shape(raw).to_vec();
        if s.len() != 3 || s[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "adapter expects [{}, H, W], got {:?}",
                self.in_channels(),
                s
            )));
        }
        if s[1] < 2 || s[2] < 2 {
            return Err(Error::Invalid(format!("feature map {}x{} is too small", s[1], s[2])));
        }
        let y = stack_forward(&self.blocks, tape, bound, raw);
        let ys = tape.shape(y).to_vec();
        let rows = pixel_rows(tape, y);
        Ok((tape.normalize_rows(rows), (ys[1], ys[2])))
    }

    pub fn eval(&self, raw: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(raw.clone());
        let (y, hw) = self.adapt(&mut tape, &b, x)?;
        Ok((tape.value(y).clone(), hw))
    }
}

impl<T: Real> Module<T> for Adapter<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        stack_params("block", &self.blocks)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Strided conv stack plus spatial mean, backbone map to latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEncoder<T> {
    pub blocks: Vec<Bottleneck<T>>,
}

/// Smallest accepted input side.
pub const ENCODER_MIN_SIDE: usize = 16;

impl<T: Real> LatentEncoder<T> {
    pub fn new<R: Rng>(in_channels: usize, spec: &StackSpec, rng: &mut R) -> Result<Self> {
        Ok(LatentEncoder {
            blocks: build_stack(in_channels, spec, rng)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels()).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].reduce.in_channels()
    }

    pub fn encode(&self, tape: &mut Tape<T>, bound: &[Var], raw: Var) -> Result<Var> {
        let s = tape.shape(raw).to_vec();
        if s.len() != 3 || s[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "encoder expects [{}, H, W], got {:?}",
                self.in_channels(),
                s
            )));
        }
        if s[1] < ENCODER_MIN_SIDE || s[2] < ENCODER_MIN_SIDE {
            return Err(Error::Invalid(format!(
                "encoder input {}x{} is below {ENCODER_MIN_SIDE}x{ENCODER_MIN_SIDE}",
                s[1], s[2]
            )));
        }
        let y = stack_forward(&self.blocks, tape, bound, raw);
        Ok(tape.spatial_mean(y))
    }

    pub fn eval(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(raw.clone());
        let l = self.encode(&mut tape, &b, x)?;
        Ok(tape.value(l).clone())
    }
}

impl<T: Real> Module<T> for LatentEncoder<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        stack_params("block", &self.blocks)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Learnable descriptor for non-object pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Background<T> {
    pub beta: Tensor<T>,
}

impl<T: Real> Background<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let data = (0..dim).map(|_| T::c(rng.gen_range(-1.0..1.0))).collect();
        Background {
            beta: Tensor::vector(data),
        }
    }

    /// Unit-norm `[1, D]` row.
    pub fn unit(&self, tape: &mut Tape<T>, bound: &[Var]) -> Var {
        let d = self.beta.len();
        let r = tape.reshape(bound[0], &[1, d]);
        tape.normalize_rows(r)
    }
}

impl<T: Real> Module<T> for Background<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.beta]
    }
}

/// Rows of `x` selected by `ids`.
pub fn select_rows<T: Real>(tape: &mut Tape<T>, x: Var, ids: &[usize]) -> Var {
    tape.gather_rows(x, Arc::new(ids.to_vec()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::math::gradcheck::{numeric_gradient, relative_error};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn verts() -> Tensor<f64> {
        Tensor::from_f64(&[3, 3], &[0.1, -0.4, 0.7, 0.9, 0.2, -0.3, -0.5, 0.5, 0.0]).unwrap()
    }

    #[test]
    fn fresh_field_is_identity() {
        let f = DeformationField::<f64>::new(5, 16, 4, &mut rng()).unwrap();
        let mut t = Tape::new();
        let b = f.bind(&mut t);
        let v = t.constant(verts());
        let l = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]));
        let d = f.deform(&mut t, &b, v, l).unwrap();
        assert_eq!(t.value(d), &verts());
    }

    #[test]
    fn affine_doubles_x() {
        let mut t = Tape::new();
        let v = t.constant(verts());
        let a = t.constant(Tensor::from_f64(&[3, 3], &[2.0, 1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0]).unwrap());
        let d = t.constant(Tensor::zeros(&[3, 3]));
        let out = affine_apply(&mut t, v, a, d);
        for i in 0..3 {
            assert_eq!(t.value(out).row(i)[0], 2.0 * verts().row(i)[0]);
            assert_eq!(t.value(out).row(i)[1..], verts().row(i)[1..]);
        }
    }

    #[test]
    fn deformation_gradient_wrt_latent() {
        let mut f = DeformationField::<f64>::new(3, 8, 2, &mut rng()).unwrap();
        // give the output layer some weight so the latent matters
        let mut r = rng();
        for p in f.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.3..0.3));
        }
        let latent = Tensor::vector(vec![0.4, -0.2]);
        let c = Tensor::from_f64(&[3, 3], &[1.0, -2.0, 0.5, 0.3, 0.7, -1.1, 0.2, 0.9, 0.4]).unwrap();
        let build = |l: &Tensor<f64>, tape: &mut Tape<f64>| {
            let b = f.bind_frozen(tape);
            let v = tape.constant(verts());
            let lv = tape.param(l.clone());
            let d = f.deform(tape, &b, v, lv).unwrap();
            let cv = tape.constant(c.clone());
            let m = tape.mul(d, cv);
            (tape.sum(m), lv)
        };
        let mut tape = Tape::new();
        let (loss, lv) = build(&latent, &mut tape);
        let g = tape.backward(loss).unwrap().wrt(lv);
        let num = numeric_gradient(
            &|xs| {
                let mut t = Tape::new();
                let (l, _) = build(&xs[0], &mut t);
                t.value(l).item()
            },
            &[latent.clone()],
            0,
            1e-5,
        );
        assert!(relative_error(&g, &num) < 1e-4);
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn features_are_unit_and_positional() {
        let f = FeatureField::<f64>::new(3, 16, 8, &mut rng()).unwrap();
        let v = Tensor::from_f64(&[3, 3], &[0.1, 0.2, 0.3, 0.5, -0.5, 0.0, 0.1, 0.2, 0.3]).unwrap();
        let out = f.eval(&v).unwrap();
        for i in 0..3 {
            let n: f64 = out.row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn zero_feature_is_an_error() {
        let mut f = FeatureField::<f64>::new(2, 4, 3, &mut rng()).unwrap();
        f.mlp.zero_output_layer();
        assert!(f.eval(&verts()).is_err());
    }

    #[test]
    fn adapter_doubles_resolution_with_unit_pixels() {
        let spec = StackSpec {
            blocks: 4,
            out_dims: vec![16, 16, 8],
            strides: vec![1, 1, 1],
            upsampling: vec![1, 1, 2],
        };
        let a = Adapter::<f64>::new(6, &spec, &mut rng()).unwrap();
        assert_eq!(a.blocks.len(), 4);
        let mut r = rng();
        let raw = Tensor::new(vec![6, 4, 5], (0..120).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let (s, hw) = a.eval(&raw).unwrap();
        assert_eq!(hw, (8, 10));
        assert_eq!(s.shape(), &[80, 8]);
        for i in 0..80 {
            let n: f64 = s.row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(a.eval(&Tensor::zeros(&[6, 1, 5])).is_err());
    }

    #[test]
    fn identity_final_block_passes_through() {
        let spec = StackSpec {
            blocks: 2,
            out_dims: vec![8],
            strides: vec![1],
            upsampling: vec![1],
        };
        let a = Adapter::<f64>::new(8, &spec, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let b = a.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![8, 3, 3], (0..72).map(|i| (i as f64).sin()).collect()).unwrap());
        let n0 = a.blocks[0].arity();
        let h = a.blocks[0].forward(&mut tape, &b[..n0], x);
        let y = a.blocks[1].forward(&mut tape, &b[n0..], h);
        assert_eq!(tape.value(y), tape.value(h));
    }

    #[test]
    fn encoder_behaviour() {
        let spec = StackSpec {
            blocks: 4,
            out_dims: vec![8],
            strides: vec![2, 2, 2, 2],
            upsampling: vec![1, 1, 1],
        };
        let mut e = LatentEncoder::<f64>::new(4, &spec, &mut rng()).unwrap();
        assert_eq!(e.latent_dim(), 8);
        let zeros = Tensor::zeros(&[4, 16, 16]);
        assert!(e.eval(&zeros).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(e.eval(&Tensor::zeros(&[4, 8, 16])).is_err());
        let mut r = rng();
        for p in e.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
        }
        let x = Tensor::new(vec![4, 16, 16], (0..1024).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = x.map(|v| v + 0.5);
        assert_ne!(e.eval(&x).unwrap(), e.eval(&y).unwrap());
        assert_eq!(e.eval(&x).unwrap(), e.eval(&x).unwrap());
    }

    #[test]
    fn stack_lists_are_padded() {
        let spec = StackSpec {
            blocks: 4,
            out_dims: vec![512, 512, 128],
            strides: vec![1, 1, 1],
            upsampling: vec![1, 1, 2],
        };
        let r = spec.resolve().unwrap();
        assert_eq!(r, vec![(512, 1, false), (512, 1, false), (128, 1, true), (128, 1, false)]);
    }
}
