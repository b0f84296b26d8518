//! Small classifiers split into an encoder and a linear head, `z = C(F(x))`.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "BAKECKPT"
//! version      u32       1
//! input_dim    u32
//! num_classes  u32
//! activation   u8        0 = relu, 1 = tanh
//! has_stem     u8        0 | 1
//! stem         5 × u32   in_channels, height, width, channels[0], channels[1]   (only if has_stem)
//! n_hidden     u32
//! hidden       n_hidden × u32
//! n_values     u64       total parameter scalars
//! values       n_values × f32, parameters in declaration order, row-major
//! ```
//!
//! Declaration order is: for each conv block weight `[c_out, c_in·9]` then
//! bias `[c_out]`; for each hidden layer weight `[in, out]` then bias `[out]`;
//! finally the head weight `[D, K]` and bias `[K]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::numerics::{ConvGeometry, Graph, NodeId, PoolGeometry, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAKECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Two `conv3×3 → ReLU → maxpool2×2` blocks in front of the dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStem {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 2],
}

impl ConvStem {
    fn blocks(&self) -> [(ConvGeometry, PoolGeometry); 2] {
        let first = ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.channels[0],
            height: self.height,
            width: self.width,
            kernel: 3,
        };
        let second = ConvGeometry {
            in_channels: self.channels[0],
            out_channels: self.channels[1],
            height: self.height / 2,
            width: self.width / 2,
            kernel: 3,
        };
        let pool = |g: &ConvGeometry| PoolGeometry {
            channels: g.out_channels,
            height: g.height,
            width: g.width,
        };
        [(first, pool(&first)), (second, pool(&second))]
    }

    pub fn output_len(&self) -> usize {
        self.channels[1] * (self.height / 4) * (self.width / 4)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub stem: Option<ConvStem>,
    /// Dense encoder widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
}

impl Architecture {
    /// The reference MLP: `input → 256 → 128` with ReLU, then a linear head.
    pub fn mlp(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            stem: None,
            hidden: vec![256, 128],
            activation: Activation::Relu,
            num_classes,
        }
    }

    /// Small conv stem for `channels×height×width` images, then one dense
    /// layer of width 128.
    pub fn small_conv(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim: in_channels * height * width,
            stem: Some(ConvStem {
                in_channels,
                height,
                width,
                channels: [16, 32],
            }),
            hidden: vec![128],
            activation: Activation::Relu,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("invalid architecture: {msg}")));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if let Some(s) = &self.stem {
            if s.in_channels * s.height * s.width != self.input_dim {
                return bad("conv stem geometry does not match input_dim");
            }
            if s.height % 4 != 0 || s.width % 4 != 0 || s.height == 0 || s.width == 0 {
                return bad("conv stem needs height and width divisible by 4");
            }
            if s.channels.contains(&0) {
                return bad("conv stem channels must be positive");
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match (self.hidden.last(), &self.stem) {
            (Some(&d), _) => d,
            (None, Some(s)) => s.output_len(),
            (None, None) => self.input_dim,
        }
    }

    /// Parameter shapes in declaration order, paired with their fan-in
    /// (zero for biases).
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        let mut shapes = Vec::new();
        let mut width = self.input_dim;
        if let Some(stem) = &self.stem {
            for (conv, _) in stem.blocks() {
                shapes.push((vec![conv.out_channels, conv.patch_len()], conv.patch_len()));
                shapes.push((vec![conv.out_channels], 0));
            }
            width = stem.output_len();
        }
        for &h in &self.hidden {
            shapes.push((vec![width, h], width));
            shapes.push((vec![h], 0));
            width = h;
        }
        shapes.push((vec![width, self.num_classes], width));
        shapes.push((vec![self.num_classes], 0));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Encoder and head parameters. Weights are stored `[in, out]` so a layer is
/// `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl Model {
    /// Fan-in scaled uniform initialization, `U(−√(6/fan_in), √(6/fan_in))`
    /// for weights and zeros for biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(shape, fan_in)| {
                let mut t = Tensor::zeros(&shape);
                if fan_in > 0 {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        Ok(Model { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape("Model::from_params", &[shapes.len()], &[params.len()]));
        }
        for ((shape, _), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("Model::from_params", shape, p.shape()));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf, in declaration order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// One pass producing `(features, logits)`; the features are the encoder
    /// output the head consumes.
    pub fn forward_graph(&self, g: &mut Graph, input: NodeId, params: &[NodeId]) -> Result<(NodeId, NodeId)> {
        let x = g.value(input);
        if !x.is_matrix() || x.cols() != self.arch.input_dim {
            return Err(Error::shape("forward", x.shape(), &[x.rows(), self.arch.input_dim]));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches architecture");
        let mut h = input;
        if let Some(stem) = &self.arch.stem {
            for (conv, pool) in stem.blocks() {
                let (w, b) = (next(), next());
                h = g.conv2d(h, w, b, conv)?;
                h = g.relu(h);
                h = g.max_pool2(h, pool)?;
            }
        }
        for _ in &self.arch.hidden {
            let (w, b) = (next(), next());
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            h = match self.arch.activation {
                Activation::Relu => g.relu(h),
                Activation::Tanh => g.tanh(h),
            };
        }
        let features = h;
        let (w, b) = (next(), next());
        let z = g.matmul(features, w)?;
        let logits = g.add_bias(z, b)?;
        Ok((features, logits))
    }

    /// Tape-free forward pass.
    pub fn forward(&self, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(inputs.clone());
        let (f, z) = self.forward_graph(&mut g, x, &params)?;
        Ok((g.value(f).clone(), g.value(z).clone()))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, CHECKPOINT_VERSION as usize);
        u32le(&mut out, a.input_dim);
        u32le(&mut out, a.num_classes);
        out.push(match a.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.push(a.stem.is_some() as u8);
        if let Some(s) = &a.stem {
            for v in [s.in_channels, s.height, s.width, s.channels[0], s.channels[1]] {
                u32le(&mut out, v);
            }
        }
        u32le(&mut out, a.hidden.len());
        for &h in &a.hidden {
            u32le(&mut out, h);
        }
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for v in self.params.iter().flat_map(|p| p.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint. `source` names the origin in error messages.
    pub fn from_checkpoint_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.format("not a bake-kit checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.format(&format!("unsupported checkpoint version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let activation = match r.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(r.format(&format!("unknown activation code {other}"))),
        };
        let stem = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut v = [0usize; 5];
                for slot in &mut v {
                    *slot = r.u32()? as usize;
                }
                Some(ConvStem {
                    in_channels: v[0],
                    height: v[1],
                    width: v[2],
                    channels: [v[3], v[4]],
                })
            }
            other => return Err(r.format(&format!("bad stem flag {other}"))),
        };
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            input_dim,
            stem,
            hidden,
            activation,
            num_classes,
        };
        arch.validate()?;
        let n_values = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        if n_values != arch.param_count() {
            return Err(r.format(&format!(
                "value count {n_values} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let payload = r.take(4 * n_values)?;
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(shape, _)| {
                let n = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.source.to_path_buf(),
                expected: end,
                actual: self.bytes.len(),
            }
            .into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn format(&self, msg: &str) -> Error {
        DataError::Format {
            path: self.source.to_path_buf(),
            msg: msg.to_string(),
        }
        .into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = Model::init(Architecture::mlp(6, 4), 1).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 2] = Tensor::zeros(&[128, 4]);
        let x = Tensor::matrix(3, 6, (0..18).map(|i| i as f64 - 7.0).collect()).unwrap();
        let (f, z) = m.forward(&x).unwrap();
        assert_eq!(f.shape(), &[3, 128]);
        assert_eq!(z, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn one_layer_encoder_matches_hand_product() {
        let arch = Architecture {
            input_dim: 2,
            stem: None,
            hidden: vec![3],
            activation: Activation::Relu,
            num_classes: 2,
        };
        let w = Tensor::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, 0.5]]);
        let params = vec![
            w,
            Tensor::zeros(&[3]),
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        ];
        let m = Model::from_params(arch, params).unwrap();
        let (f, z) = m.forward(&Tensor::from_rows(&[[1.0, 1.0]])).unwrap();
        // [1,1]·W = [1, 1, 2.5]
        assert_eq!(f.data(), &[1.0, 1.0, 2.5]);
        assert_eq!(z.data(), &[1.0 + 2.5 + 0.5, 1.0 + 2.5 - 0.5]);
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let m = Model::init(Architecture::mlp(5, 3), 9).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3, 0.9, -1.0], [0.1, -0.2, 0.3, 0.9, -1.0]]);
        let (f, z) = m.forward(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let m = Model::init(Architecture::mlp(5, 3), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 4])), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(Architecture::mlp(8, 3), 42).unwrap();
        let b = Model::init(Architecture::mlp(8, 3), 42).unwrap();
        let c = Model::init(Architecture::mlp(8, 3), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fan_in_scaling_statistics() {
        let arch = Architecture {
            input_dim: 100,
            stem: None,
            hidden: vec![100],
            activation: Activation::Relu,
            num_classes: 2,
        };
        let m = Model::init(arch, 3).unwrap();
        let w = m.params()[0].data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // U(-b, b) has std b/√3 = √(2/fan_in)
        let theory = (2.0f64 / 100.0).sqrt();
        assert!((std / theory - 1.0).abs() < 0.2, "std {std} vs {theory}");
    }

    #[test]
    fn invalid_descriptors() {
        assert!(Model::init(Architecture::mlp(0, 3), 0).is_err());
        let mut a = Architecture::small_conv(3, 6, 6, 10);
        assert!(a.validate().is_err());
        a = Architecture::small_conv(3, 8, 8, 10);
        a.input_dim = 100;
        assert!(Model::init(a, 0).is_err());
    }

    #[test]
    fn param_count_is_a_function_of_the_descriptor() {
        let a = Architecture::mlp(32, 10);
        assert_eq!(a.param_count(), 32 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10);
        let m = Model::init(a.clone(), 5).unwrap();
        assert_eq!(m.param_count(), a.param_count());
        let c = Architecture::small_conv(3, 8, 8, 10);
        assert_eq!(c.feature_dim(), 128);
        assert_eq!(c.param_count(), 16 * 27 + 16 + 32 * 144 + 32 + 32 * 4 * 128 + 128 + 128 * 10 + 10);
    }

    #[test]
    fn conv_model_forward_shapes() {
        let m = Model::init(Architecture::small_conv(3, 8, 8, 5), 2).unwrap();
        let x = Tensor::full(&[2, 192], 0.5);
        let (f, z) = m.forward(&x).unwrap();
        assert_eq!(f.shape(), &[2, 128]);
        assert_eq!(z.shape(), &[2, 5]);
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let path = Path::new("mem");
        for arch in [Architecture::mlp(7, 3), Architecture::small_conv(1, 4, 4, 2)] {
            let m = Model::init(arch, 11).unwrap();
            let bytes = m.to_checkpoint_bytes();
            assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
            let back = Model::from_checkpoint_bytes(&bytes, path).unwrap();
            assert_eq!(back.architecture(), m.architecture());
            for (a, b) in back.params().iter().zip(m.params()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(*x, *y as f32 as f64);
                }
            }
            assert_eq!(back.to_checkpoint_bytes(), bytes);
        }
    }

    #[test]
    fn checkpoint_errors() {
        let path = Path::new("mem");
        let bytes = Model::init(Architecture::mlp(4, 2), 0).unwrap().to_checkpoint_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Model::from_checkpoint_bytes(&bad, path),
            Err(Error::Data(DataError::Format { .. }))
        ));
        assert!(matches!(
            Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3], path),
            Err(Error::Data(DataError::Truncated { .. }))
        ));
    }
}
