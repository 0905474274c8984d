//! Model configuration, the sequential network, and the training loss.

use ndarray::{Array2, Array4};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layer::{conv_out_extent, Conv2d, Dense, Feat, Flatten, Layer, LayerSpec, MaxPool2d, ParamMut, ParamRef, Relu, TanhLayer};
use super::Scalar;
use crate::error::{Error, Result};
use crate::rng;

/// Affine map between world coordinates (meters) and the normalized
/// coordinates the network regresses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordScaler {
    pub center: [f64; 2],
    pub scale: f64,
}

impl CoordScaler {
    pub fn identity() -> Self {
        CoordScaler { center: [0.0, 0.0], scale: 1.0 }
    }

    pub fn to_model(&self, xy: [f64; 2]) -> [f64; 2] {
        [(xy[0] - self.center[0]) / self.scale, (xy[1] - self.center[1]) / self.scale]
    }

    pub fn to_world(&self, xy: [f64; 2]) -> [f64; 2] {
        [xy[0] * self.scale + self.center[0], xy[1] * self.scale + self.center[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// [channels, height, width] of one input sample.
    pub input_dims: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub init_seed: u64,
}

/// Shape of the value after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Conv([usize; 3]),
    Flat(usize),
}

impl ModelConfig {
    /// Infer the shape after every layer, verifying the stack composes.
    pub fn infer_shapes(&self) -> Result<Vec<ShapeKind>> {
        let mut cur = ShapeKind::Conv(self.input_dims);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::config(format!("layer {i} ({}): {msg}", spec.kind_name()));
            cur = match (spec, cur) {
                (LayerSpec::Conv2d { out_channels, kernel, stride, padding }, ShapeKind::Conv([_, h, w])) => {
                    let oh = conv_out_extent(h, *kernel, *stride, *padding)
                        .ok_or_else(|| fail(format!("kernel {kernel} cannot cover height {h}")))?;
                    let ow = conv_out_extent(w, *kernel, *stride, *padding)
                        .ok_or_else(|| fail(format!("kernel {kernel} cannot cover width {w}")))?;
                    ShapeKind::Conv([*out_channels, oh, ow])
                }
                (LayerSpec::MaxPool2d { size }, ShapeKind::Conv([c, h, w])) => {
                    if h / size == 0 || w / size == 0 {
                        return Err(fail(format!("pool window {size} larger than {h}x{w}")));
                    }
                    ShapeKind::Conv([c, h / size, w / size])
                }
                (LayerSpec::Relu | LayerSpec::Tanh, shape) => shape,
                (LayerSpec::Flatten, ShapeKind::Conv([c, h, w])) => ShapeKind::Flat(c * h * w),
                (LayerSpec::Dense { out_features }, ShapeKind::Flat(_)) => ShapeKind::Flat(*out_features),
                (LayerSpec::Dense { .. }, ShapeKind::Conv(d)) => {
                    return Err(fail(format!("dense needs flattened input, got {d:?}")));
                }
                (_, ShapeKind::Flat(n)) => {
                    return Err(fail(format!("spatial layer after flatten (features = {n})")));
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Flattened output width; the network must end in dense features.
    pub fn output_dim(&self) -> Result<usize> {
        match self.infer_shapes()?.last() {
            Some(ShapeKind::Flat(n)) => Ok(*n),
            _ => Err(Error::config("model must end in a flattened/dense output")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("model input dims must be positive"));
        }
        self.infer_shapes().map(|_| ())
    }
}

/// Architecture tag stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchConfig {
    Sequential(ModelConfig),
    Decoupled(DecoupledConfig),
}

/// Shared backbone plus per-sector mapping heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupledConfig {
    /// Backbone ending in a feature vector (not coordinates).
    pub backbone: ModelConfig,
    pub n_heads: usize,
}

impl ArchConfig {
    pub fn hash_hex(&self) -> String {
        let text = toml::to_string(self).expect("arch config serializes");
        crate::hashes::sha256_hex(text.as_bytes())
    }
}

/// Default position-regression backbone: three conv blocks with stride-2
/// pooling followed by two dense layers emitting 2D coordinates.
pub fn default_backbone(input_dims: [usize; 3], init_seed: u64) -> ModelConfig {
    ModelConfig {
        input_dims,
        layers: vec![
            LayerSpec::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: 2 },
        ],
        init_seed,
    }
}

/// A feed-forward stack built from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Sequential<F> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Sequential<F> {
    /// Build with Kaiming-style seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.infer_shapes()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut cur_in = ShapeKind::Conv(config.input_dims);
        for (i, spec) in config.layers.iter().enumerate() {
            let layer = match (spec, cur_in) {
                (LayerSpec::Conv2d { out_channels, kernel, stride, padding }, ShapeKind::Conv([c, _, _])) => {
                    let mut l = Conv2d::new(c, *out_channels, *kernel, *stride, *padding);
                    init_kaiming(&mut l.weight, c * kernel * kernel, config.init_seed, i);
                    Layer::Conv2d(l)
                }
                (LayerSpec::MaxPool2d { size }, _) => Layer::MaxPool2d(MaxPool2d::new(*size)),
                (LayerSpec::Relu, _) => Layer::Relu(Relu::default()),
                (LayerSpec::Tanh, _) => Layer::Tanh(TanhLayer::default()),
                (LayerSpec::Flatten, _) => Layer::Flatten(Flatten::default()),
                (LayerSpec::Dense { out_features }, ShapeKind::Flat(n)) => {
                    let mut l = Dense::new(n, *out_features);
                    init_kaiming(&mut l.weight, n, config.init_seed, i);
                    Layer::Dense(l)
                }
                _ => unreachable!("validated by infer_shapes"),
            };
            layers.push(layer);
            cur_in = shapes[i];
        }
        Ok(Sequential { config, layers })
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array2<F>> {
        let got = x.shape();
        let want = self.config.input_dims;
        if got[1..] != want {
            return Err(Error::ShapeMismatch {
                context: "model input".into(),
                expected: want.to_vec(),
                actual: got[1..].to_vec(),
            });
        }
        let mut feat = Feat::Conv(x.clone());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            feat = layer.forward(feat, train).map_err(|e| match e {
                Error::ShapeMismatch { context, expected, actual } => Error::ShapeMismatch {
                    context: format!("layer {i}: {context}"),
                    expected,
                    actual,
                },
                other => other,
            })?;
        }
        match feat {
            Feat::Flat(out) => Ok(out),
            Feat::Conv(a) => Err(Error::ShapeMismatch {
                context: "model output".into(),
                expected: vec![got[0], 2],
                actual: a.shape().to_vec(),
            }),
        }
    }

    /// Propagate output gradients back through the stack, accumulating
    /// parameter gradients.
    pub fn backward(&mut self, grad_out: &Array2<F>) -> Result<()> {
        let mut grad = Feat::Flat(grad_out.clone());
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.zero_grad();
        }
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut(&format!("layer{i}")))
            .collect()
    }

    pub fn params_ref(&self) -> Vec<ParamRef<'_, F>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params_ref(&format!("layer{i}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params_ref().iter().map(|p| p.value.len()).sum()
    }

    /// L2 norm of each parameter tensor, for divergence diagnostics.
    pub fn weight_norms(&self) -> Vec<(String, f64)> {
        self.params_ref()
            .iter()
            .map(|p| {
                let n = p.value.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                (p.name.clone(), n)
            })
            .collect()
    }
}

/// Seeded Kaiming init for a standalone dense layer (used by head stacks).
pub fn init_dense<F: Scalar>(d: &mut super::layer::Dense<F>, seed: u64, stream_idx: u64) {
    let fan_in = d.in_features;
    init_kaiming(&mut d.weight, fan_in, seed, stream_idx as usize);
    d.bias.fill(F::zero());
}

pub(crate) fn init_kaiming<F: Scalar>(w: &mut Array2<F>, fan_in: usize, seed: u64, layer_idx: usize) {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut r = rng::stream(seed, "init", &[layer_idx as u64]);
    for v in w.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut r);
        *v = F::from_f64(g * std);
    }
}

/// Mean squared Euclidean loss over a batch and its gradient w.r.t. the
/// predictions.
pub fn mse_loss_grad<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
) -> Result<(f64, Array2<F>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "loss".into(),
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let bsz = pred.shape()[0];
    if bsz == 0 {
        return Err(Error::Empty("loss over empty batch".into()));
    }
    let diff = pred - target;
    let loss = diff.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / bsz as f64;
    let scale = F::from_f64(2.0 / bsz as f64);
    Ok((loss, diff * scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_conv_config(act: LayerSpec) -> ModelConfig {
        ModelConfig {
            input_dims: [2, 6, 8],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                act.clone(),
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 4 },
                act,
                LayerSpec::Dense { out_features: 2 },
            ],
            init_seed: 3,
        }
    }

    fn random_input<F: Scalar>(dims: [usize; 4], seed: u64) -> Array4<F> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((dims[0], dims[1], dims[2], dims[3]), |_| {
            F::from_f64(r.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn zero_weights_predict_origin() {
        let cfg = ModelConfig {
            input_dims: [1, 1, 4],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            init_seed: 0,
        };
        let mut m: Sequential<f64> = Sequential::new(cfg).unwrap();
        for p in m.params_mut() {
            let mut v = p.value;
            v.fill(0.0);
        }
        let x = random_input([3, 1, 1, 4], 1);
        let y = m.forward(&x, false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let cfg = ModelConfig {
            input_dims: [1, 1, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            init_seed: 0,
        };
        let mut m: Sequential<f64> = Sequential::new(cfg).unwrap();
        if let Layer::Dense(d) = &mut m.layers[1] {
            d.weight = Array2::eye(2);
            d.bias.fill(0.0);
        }
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![3.0, 4.0]).unwrap();
        let y = m.forward(&x, false).unwrap();
        assert_eq!(y[[0, 0]], 3.0);
        assert_eq!(y[[0, 1]], 4.0);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut m: Sequential<f32> = Sequential::new(tiny_conv_config(LayerSpec::Relu)).unwrap();
        let x = random_input([4, 2, 6, 8], 7);
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let cfg = ModelConfig {
            input_dims: [1, 4, 4],
            layers: vec![LayerSpec::Dense { out_features: 2 }],
            init_seed: 0,
        };
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("layer 0"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn loss_zero_at_target_with_zero_grads() {
        let pred = Array2::from_shape_vec((2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (loss, grad) = mse_loss_grad(&pred, &pred).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_weight_sgd_step_matches_hand_calculation() {
        // y = w * x with x = 1, w = 2, target 0: loss 4, dL/dw = 4, w -> 1.6
        let cfg = ModelConfig {
            input_dims: [1, 1, 1],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 1 }],
            init_seed: 0,
        };
        let mut m: Sequential<f64> = Sequential::new(cfg).unwrap();
        if let Layer::Dense(d) = &mut m.layers[1] {
            d.weight[[0, 0]] = 2.0;
        }
        let x = Array4::from_elem((1, 1, 1, 1), 1.0);
        let t = Array2::zeros((1, 1));
        let pred = m.forward(&x, true).unwrap();
        let (loss, grad) = mse_loss_grad(&pred, &t).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
        m.backward(&grad).unwrap();
        let mut opt = super::super::Optimizer::new(super::super::OptimSpec::Sgd {
            lr: 0.1,
            momentum: 0.0,
        });
        opt.step(m.params_mut()).unwrap();
        if let Layer::Dense(d) = &m.layers[1] {
            assert!((d.weight[[0, 0]] - 1.6).abs() < 1e-12);
        }
    }

    /// Central finite differences over every parameter of a model.
    fn finite_difference_check(cfg: ModelConfig, input_seed: u64) {
        let h = 1e-4;
        let mut m: Sequential<f64> = Sequential::new(cfg).unwrap();
        let x = random_input::<f64>([3, m.config.input_dims[0], m.config.input_dims[1], m.config.input_dims[2]], input_seed);
        let out_dim = m.config.output_dim().unwrap();
        let mut tr = rand_chacha::ChaCha8Rng::seed_from_u64(input_seed ^ 0xABCD);
        let t = Array2::from_shape_fn((3, out_dim), |_| tr.random_range(-1.0..1.0));

        // analytic gradients
        m.zero_grad();
        let pred = m.forward(&x, true).unwrap();
        let (_, grad) = mse_loss_grad(&pred, &t).unwrap();
        m.backward(&grad).unwrap();
        let analytic: Vec<Vec<f64>> =
            m.params_mut().iter().map(|p| p.grad.iter().cloned().collect()).collect();

        // numeric gradients
        let n_params = analytic.len();
        for pi in 0..n_params {
            let n = analytic[pi].len();
            for ei in 0..n {
                let mut loss_at = |delta: f64, model: &mut Sequential<f64>| -> f64 {
                    {
                        let mut params = model.params_mut();
                        let v = params[pi].value.iter_mut().nth(ei).unwrap();
                        *v += delta;
                    }
                    let pred = model.forward(&x, false).unwrap();
                    let (loss, _) = mse_loss_grad(&pred, &t).unwrap();
                    {
                        let mut params = model.params_mut();
                        let v = params[pi].value.iter_mut().nth(ei).unwrap();
                        *v -= delta;
                    }
                    loss
                };
                let lp = loss_at(h, &mut m);
                let lm = loss_at(-h, &mut m);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[pi][ei];
                let rel = (an - fd).abs() / (fd.abs() + 1e-8);
                assert!(
                    rel < 1e-4,
                    "param {pi} elem {ei}: analytic {an} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_relu_stack() {
        finite_difference_check(tiny_conv_config(LayerSpec::Relu), 11);
    }

    #[test]
    fn gradients_match_finite_differences_tanh_stack() {
        finite_difference_check(tiny_conv_config(LayerSpec::Tanh), 13);
    }

    #[test]
    fn gradients_match_finite_differences_strided_conv() {
        let cfg = ModelConfig {
            input_dims: [1, 7, 9],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 2, padding: 0 },
                LayerSpec::Tanh,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 2 },
            ],
            init_seed: 5,
        };
        finite_difference_check(cfg, 17);
    }

    #[test]
    fn default_backbone_composes_at_reference_dims() {
        let cfg = default_backbone([2, 32, 408], 1);
        let count: usize = Sequential::<f32>::new(cfg.clone()).unwrap().param_count();
        // roughly 100k parameters at the reference input size
        assert!((50_000..200_000).contains(&count), "param count {count}");
        assert_eq!(cfg.output_dim().unwrap(), 2);
    }

    #[test]
    fn training_reduces_loss_on_linear_toy() {
        // 100-sample linearly solvable problem: 200 SGD steps cut MSE below 1%
        let cfg = ModelConfig {
            input_dims: [1, 1, 4],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            init_seed: 9,
        };
        let mut m: Sequential<f64> = Sequential::new(cfg).unwrap();
        let x = random_input::<f64>([100, 1, 1, 4], 21);
        let w_true =
            Array2::from_shape_vec((4, 2), vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0])
                .unwrap();
        let x2 = x.clone().into_shape_with_order((100, 4)).unwrap();
        let t = x2.dot(&w_true);
        let mut opt = super::super::Optimizer::new(super::super::OptimSpec::Sgd {
            lr: 0.05,
            momentum: 0.0,
        });
        let mut initial = None;
        let mut last = 0.0;
        for _ in 0..200 {
            m.zero_grad();
            let pred = m.forward(&x, true).unwrap();
            let (loss, grad) = mse_loss_grad(&pred, &t).unwrap();
            m.backward(&grad).unwrap();
            opt.step(m.params_mut()).unwrap();
            initial.get_or_insert(loss);
            last = loss;
        }
        let initial = initial.unwrap();
        assert!(last < 0.01 * initial, "loss {last} vs initial {initial}");
    }
}
