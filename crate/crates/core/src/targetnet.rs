//! The target network: a declarative ConvNet description plus a functional
//! forward pass over externally supplied kernel tensors.
//!
//! The network owns no parameters. Its only learned tensors are the conv
//! kernels handed in per call, so a predicted `ParamSet` fully determines
//! its behavior. Normalization is parameter-free per-channel
//! standardization and classification happens outside via the metric head,
//! so no biases or affine norm parameters exist anywhere.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub normalize: bool,
    pub activate: bool,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TargetSpec {
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("target spec needs at least one conv layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in == 0 || l.c_out == 0 {
                return Err(Error::Config(format!("layer {i}: zero channel count")));
            }
            if l.k % 2 == 0 {
                return Err(Error::Config(format!("layer {i}: kernel {} must be odd", l.k)));
            }
            if l.stride == 0 {
                return Err(Error::Config(format!("layer {i}: stride must be >= 1")));
            }
            if i > 0 && self.layers[i - 1].c_out != l.c_in {
                return Err(Error::Config(format!(
                    "layer {i}: c_in {} does not chain from previous c_out {}",
                    l.c_in,
                    self.layers[i - 1].c_out
                )));
            }
        }
        if self.embedding_dim != self.layers.last().unwrap().c_out {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal last layer c_out {}",
                self.embedding_dim,
                self.layers.last().unwrap().c_out
            )));
        }
        Ok(())
    }

    /// Kernel tensor shape of each layer: [c_out, c_in, k, k].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| vec![l.c_out, l.c_in, l.k, l.k]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.c_out * l.c_in * l.k * l.k).sum()
    }
}

/// The 3-layer ConvNet used throughout: 3x3 convs (stride 1, pad 1), each
/// followed by standardization, leaky relu, and 2x2 average pooling, with a
/// global average pool producing the embedding.
pub fn convnet3_spec(in_channels: usize, width: usize, embedding_dim: usize) -> Result<TargetSpec> {
    if width == 0 {
        return Err(Error::Config("convnet3 width must be positive".into()));
    }
    if in_channels == 0 {
        return Err(Error::Config("convnet3 in_channels must be positive".into()));
    }
    if embedding_dim != width {
        return Err(Error::Config(format!(
            "convnet3 embedding_dim {embedding_dim} must equal width {width} (set by global average pooling)"
        )));
    }
    let mut layers = Vec::with_capacity(3);
    let mut c_in = in_channels;
    for _ in 0..3 {
        layers.push(LayerSpec {
            c_in,
            c_out: width,
            k: 3,
            stride: 1,
            pad: 1,
            normalize: true,
            activate: true,
            pool: true,
        });
        c_in = width;
    }
    let spec = TargetSpec { layers, embedding_dim };
    spec.validate()?;
    Ok(spec)
}

/// The ordered kernel tensors predicted for a `TargetSpec`.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn validate_against(&self, spec: &TargetSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if self.tensors.len() != shapes.len() {
            return Err(Error::Dim(format!(
                "param set has {} tensors, spec expects {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for (i, (t, s)) in self.tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Dim(format!(
                    "layer {i}: param shape {:?} does not match spec {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Random kernels, uniform in +/- 1/sqrt(fan_in); the from-scratch
    /// baseline's initialization.
    pub fn random_init(spec: &TargetSpec, seed: u64) -> Self {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, "init/target");
        let tensors = spec
            .layers
            .iter()
            .map(|l| {
                let fan_in = l.c_in * l.k * l.k;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<T> = (0..l.c_out * fan_in)
                    .map(|_| T::from_f64_lit(r.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(vec![l.c_out, l.c_in, l.k, l.k], data).unwrap().with_grad()
            })
            .collect();
        ParamSet { tensors }
    }
}

/// Embedding forward pass. `params` are tape handles so gradients flow into
/// whatever produced them (predicted parameters or baseline leaves).
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &TargetSpec,
    params: &[Var],
    x: Var,
) -> Result<Var> {
    if params.len() != spec.layers.len() {
        return Err(Error::Dim(format!(
            "{} param tensors for {} layers",
            params.len(),
            spec.layers.len()
        )));
    }
    let eps = T::from_f64_lit(NORM_EPS);
    let slope = T::from_f64_lit(LEAKY_SLOPE);
    let mut h = x;
    for (i, (layer, &w)) in spec.layers.iter().zip(params).enumerate() {
        let expect = [layer.c_out, layer.c_in, layer.k, layer.k];
        if tape.shape(w) != expect {
            return Err(Error::Dim(format!(
                "layer {i}: param shape {:?}, expected {expect:?}",
                tape.shape(w)
            )));
        }
        h = tape
            .conv2d(h, w, layer.stride, layer.pad)
            .map_err(|e| Error::Dim(format!("layer {i}: {e}")))?;
        if layer.normalize {
            h = tape.standardize_channels(h, eps)?;
        }
        if layer.activate {
            h = tape.leaky_relu(h, slope);
        }
        if layer.pool {
            h = tape.avg_pool2x2(h).map_err(|e| Error::Dim(format!("layer {i}: {e}")))?;
        }
    }
    tape.global_avg_pool(h)
}

/// A spec bound to concrete parameter handles on one tape.
#[derive(Debug)]
pub struct BoundNetwork<'s> {
    spec: &'s TargetSpec,
    params: Vec<Var>,
}

impl<'s> BoundNetwork<'s> {
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        forward(tape, self.spec, &self.params, x)
    }

    pub fn spec(&self) -> &TargetSpec {
        self.spec
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

/// Bind already-on-tape parameter handles (e.g. predicted ones) to a spec.
pub fn bind<'s, T: Scalar>(
    tape: &Tape<T>,
    spec: &'s TargetSpec,
    params: Vec<Var>,
) -> Result<BoundNetwork<'s>> {
    let shapes = spec.param_shapes();
    if params.len() != shapes.len() {
        return Err(Error::Dim(format!(
            "{} params for {} layers",
            params.len(),
            shapes.len()
        )));
    }
    for (i, (&p, s)) in params.iter().zip(&shapes).enumerate() {
        if tape.shape(p) != s.as_slice() {
            return Err(Error::Dim(format!(
                "layer {i}: param shape {:?}, expected {s:?}",
                tape.shape(p)
            )));
        }
    }
    Ok(BoundNetwork { spec, params })
}

/// Register a concrete `ParamSet` on the tape and bind it: the evaluator
/// whose calls equal `forward(spec, params, .)`.
pub fn inject<'s, T: Scalar>(
    tape: &mut Tape<T>,
    spec: &'s TargetSpec,
    params: &ParamSet<T>,
) -> Result<BoundNetwork<'s>> {
    params.validate_against(spec)?;
    let vars = params.tensors.iter().map(|t| tape.leaf(t)).collect();
    bind(tape, spec, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Var;

    fn tiny_input(b: usize) -> Tensor<f32> {
        let n = b * 2 * 8 * 8;
        let data: Vec<f32> = (0..n).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        Tensor::new(vec![b, 2, 8, 8], data).unwrap()
    }

    #[test]
    fn convnet3_construction() {
        let spec = convnet3_spec(1, 32, 32).unwrap();
        let chans: Vec<(usize, usize)> = spec.layers.iter().map(|l| (l.c_in, l.c_out)).collect();
        assert_eq!(chans, vec![(1, 32), (32, 32), (32, 32)]);
        assert_eq!(spec.param_count(), 18_720);
        assert!(convnet3_spec(1, 0, 0).is_err());
    }

    #[test]
    fn zero_params_zero_embedding() {
        let spec = convnet3_spec(2, 4, 4).unwrap();
        let params = ParamSet::<f32> {
            tensors: spec.param_shapes().into_iter().map(Tensor::zeros).collect(),
        };
        let mut tape = Tape::no_grad();
        let net = inject(&mut tape, &spec, &params).unwrap();
        let x = tape.constant(tiny_input(2));
        let y = net.embed(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_item_matches_batched_row() {
        let spec = convnet3_spec(2, 4, 4).unwrap();
        let params = ParamSet::<f32>::random_init(&spec, 3);
        let batch = tiny_input(4);
        let mut tape = Tape::no_grad();
        let net = inject(&mut tape, &spec, &params).unwrap();
        let xb = tape.constant(batch.clone());
        let yb = net.embed(&mut tape, xb).unwrap();
        let row0 = tape.value(yb).data()[..4].to_vec();

        let first = Tensor::new(vec![1, 2, 8, 8], batch.data()[..2 * 64].to_vec()).unwrap();
        let x1 = tape.constant(first);
        let y1 = net.embed(&mut tape, x1).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(&row0) {
            assert!((a - b).abs() < 1e-6, "batch consistency: {a} vs {b}");
        }
    }

    #[test]
    fn forward_is_pure_and_inject_equals_forward() {
        let spec = convnet3_spec(2, 4, 4).unwrap();
        let params = ParamSet::<f32>::random_init(&spec, 7);
        let x = tiny_input(3);
        let run = || -> Vec<f32> {
            let mut tape = Tape::no_grad();
            let net = inject(&mut tape, &spec, &params).unwrap();
            let xv = tape.constant(x.clone());
            let y = net.embed(&mut tape, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // direct forward equals inject+call bitwise
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t)).collect();
        let xv = tape.constant(x.clone());
        let y = forward(&mut tape, &spec, &vars, xv).unwrap();
        for (u, v) in tape.value(y).data().iter().zip(&a) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn wrong_shape_params_rejected_with_layer_index() {
        let spec = convnet3_spec(2, 4, 4).unwrap();
        let mut params = ParamSet::<f32>::random_init(&spec, 3);
        params.tensors[1] = Tensor::zeros(vec![4, 4, 5, 5]);
        let mut tape = Tape::<f32>::no_grad();
        let err = inject(&mut tape, &spec, &params).unwrap_err();
        assert!(format!("{err}").contains("layer 1"), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let spec = convnet3_spec(2, 4, 4).unwrap();
        let params = ParamSet::<f32>::random_init(&spec, 9);
        let named: Vec<(String, &Tensor<f32>)> = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("target/layer{i}"), t))
            .collect();
        let mut buf = Vec::new();
        crate::tensor::write_named_tensors(&mut buf, &named).unwrap();
        let back: Vec<(String, Tensor<f32>)> =
            crate::tensor::read_named_tensors(&mut buf.as_slice()).unwrap();
        let restored = ParamSet { tensors: back.into_iter().map(|(_, t)| t).collect() };

        let x = tiny_input(2);
        let run = |p: &ParamSet<f32>| -> Vec<f32> {
            let mut tape = Tape::no_grad();
            let net = inject(&mut tape, &spec, p).unwrap();
            let xv = tape.constant(x.clone());
            let y = net.embed(&mut tape, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(&params), run(&restored));
    }

    #[test]
    fn param_count_matches_sum() {
        let spec = convnet3_spec(3, 8, 8).unwrap();
        let total: usize =
            spec.layers.iter().map(|l| l.c_out * l.c_in * l.k * l.k).sum();
        assert_eq!(spec.param_count(), total);
        let params = ParamSet::<f32>::random_init(&spec, 1);
        assert_eq!(params.total_len(), total);
    }
}
