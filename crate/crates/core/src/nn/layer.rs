//! Layer kinds and their forward / backward passes.
//!
//! Convolution runs as im2col plus one matrix product per batch, so both
//! passes reduce to GEMMs; pooling and activations are straight loops.
//! Every layer caches what its backward pass needs only when the forward
//! pass runs in training mode.

use ndarray::{Array1, Array2, Array4, ArrayViewMutD, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

fn default_stride() -> usize {
    1
}

/// Declarative layer description used in model configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Relu,
    Tanh,
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Value flowing between layers: spatial maps or flattened features,
/// batch-first either way.
#[derive(Debug, Clone)]
pub enum Feat<F> {
    Conv(Array4<F>),
    Flat(Array2<F>),
}

impl<F: Scalar> Feat<F> {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Feat::Conv(a) => a.shape().to_vec(),
            Feat::Flat(a) => a.shape().to_vec(),
        }
    }

    fn into_conv(self, context: &str) -> Result<Array4<F>> {
        match self {
            Feat::Conv(a) => Ok(a),
            Feat::Flat(a) => Err(Error::ShapeMismatch {
                context: format!("{context}: expected spatial input"),
                expected: vec![0, 0, 0, 0],
                actual: a.shape().to_vec(),
            }),
        }
    }

    fn into_flat(self, context: &str) -> Result<Array2<F>> {
        match self {
            Feat::Flat(a) => Ok(a),
            Feat::Conv(a) => Err(Error::ShapeMismatch {
                context: format!("{context}: expected flattened input"),
                expected: vec![0, 0],
                actual: a.shape().to_vec(),
            }),
        }
    }

    /// Matrix products can hand back column-major arrays; layer internals
    /// assume standard layout.
    fn into_standard(self) -> Feat<F> {
        match self {
            Feat::Conv(a) => Feat::Conv(if a.is_standard_layout() {
                a
            } else {
                a.as_standard_layout().to_owned()
            }),
            Feat::Flat(a) => Feat::Flat(if a.is_standard_layout() {
                a
            } else {
                a.as_standard_layout().to_owned()
            }),
        }
    }
}

/// Mutable view over one parameter tensor and its gradient.
pub struct ParamMut<'a, F> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Read-only view over one parameter tensor.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub value: ndarray::ArrayViewD<'a, F>,
}

pub(super) fn conv_out_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// [in_channels * kernel * kernel, out_channels]
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub wgrad: Array2<F>,
    pub bgrad: Array1<F>,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let ckk = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((ckk, out_channels)),
            bias: Array1::zeros(out_channels),
            wgrad: Array2::zeros((ckk, out_channels)),
            bgrad: Array1::zeros(out_channels),
            cache: None,
        }
    }

    fn forward(&mut self, x: Array4<F>, train: bool) -> Result<Array4<F>> {
        let (bsz, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "conv2d channels".into(),
                expected: vec![self.in_channels],
                actual: vec![c],
            });
        }
        let oh = conv_out_extent(h, self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::config("conv2d output collapsed to zero height"))?;
        let ow = conv_out_extent(w, self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::config("conv2d output collapsed to zero width"))?;

        let cols = im2col(&x, self.kernel, self.stride, self.padding, oh, ow);
        let mut out2 = cols.dot(&self.weight);
        for mut row in out2.rows_mut() {
            row += &self.bias;
        }
        let out = out2
            .into_shape_with_order((bsz, oh, ow, self.out_channels))
            .expect("conv reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        if train {
            self.cache = Some(ConvCache { cols, input_dim: (bsz, c, h, w) });
        }
        Ok(out)
    }

    fn backward(&mut self, grad: Array4<F>) -> Result<Array4<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::config("conv2d backward without forward"))?;
        let (bsz, oc, oh, ow) = grad.dim();
        let g2 = grad
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((bsz * oh * ow, oc))
            .expect("conv grad reshape");
        self.wgrad = &self.wgrad + &cache.cols.t().dot(&g2);
        self.bgrad = &self.bgrad + &g2.sum_axis(Axis(0));
        let dcols = g2.dot(&self.weight.t());
        Ok(col2im(
            &dcols,
            cache.input_dim,
            self.kernel,
            self.stride,
            self.padding,
            oh,
            ow,
        ))
    }
}

fn im2col<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (bsz, c, h, w) = x.dim();
    let ckk = c * k * k;
    let xs = x.as_slice().expect("standard layout input");
    let mut data = vec![F::zero(); bsz * oh * ow * ckk];
    data.par_chunks_mut(oh * ow * ckk).enumerate().for_each(|(b, chunk)| {
        let xb = &xs[b * c * h * w..(b + 1) * c * h * w];
        let mut idx = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let plane = &xb[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            idx += k;
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                chunk[idx] = row[ix as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((bsz * oh * ow, ckk), data).expect("im2col shape")
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<F> {
    let (bsz, c, h, w) = input_dim;
    let ckk = c * k * k;
    let ds = dcols.as_slice().expect("standard layout dcols");
    let mut data = vec![F::zero(); bsz * c * h * w];
    data.par_chunks_mut(c * h * w).enumerate().for_each(|(b, chunk)| {
        let db = &ds[b * oh * ow * ckk..(b + 1) * oh * ow * ckk];
        let mut idx = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            idx += k;
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let at = ci * h * w + iy as usize * w + ix as usize;
                                chunk[at] = chunk[at] + db[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((bsz, c, h, w), data).expect("col2im shape")
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaxPool2d<F> {
    pub size: usize,
    cache: Option<PoolCache>,
    _marker: std::marker::PhantomData<F>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat input index of the max element for every output element.
    argmax: Vec<usize>,
}

impl<F: Scalar> MaxPool2d<F> {
    pub fn new(size: usize) -> Self {
        MaxPool2d { size, cache: None, _marker: std::marker::PhantomData }
    }

    fn forward(&mut self, x: Array4<F>, train: bool) -> Result<Array4<F>> {
        let (bsz, c, h, w) = x.dim();
        let m = self.size;
        let (oh, ow) = (h / m, w / m);
        if oh == 0 || ow == 0 {
            return Err(Error::config(format!(
                "max_pool2d window {m} larger than input {h}x{w}"
            )));
        }
        let xs = x.as_slice().expect("standard layout input");
        let mut out = vec![F::zero(); bsz * c * oh * ow];
        let mut argmax = vec![0usize; bsz * c * oh * ow];
        for b in 0..bsz {
            for ci in 0..c {
                let plane_off = (b * c + ci) * h * w;
                let out_off = (b * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_at = plane_off + oy * m * w + ox * m;
                        for ky in 0..m {
                            let row = plane_off + (oy * m + ky) * w + ox * m;
                            for kx in 0..m {
                                let v = xs[row + kx];
                                if v > best {
                                    best = v;
                                    best_at = row + kx;
                                }
                            }
                        }
                        out[out_off + oy * ow + ox] = best;
                        argmax[out_off + oy * ow + ox] = best_at;
                    }
                }
            }
        }
        if train {
            self.cache = Some(PoolCache { input_dim: (bsz, c, h, w), argmax });
        }
        Ok(Array4::from_shape_vec((bsz, c, oh, ow), out).expect("pool shape"))
    }

    fn backward(&mut self, grad: Array4<F>) -> Result<Array4<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::config("max_pool2d backward without forward"))?;
        let (bsz, c, h, w) = cache.input_dim;
        let gs = grad.as_slice().expect("standard layout grad");
        let mut dx = vec![F::zero(); bsz * c * h * w];
        for (i, &at) in cache.argmax.iter().enumerate() {
            dx[at] = dx[at] + gs[i];
        }
        Ok(Array4::from_shape_vec((bsz, c, h, w), dx).expect("pool grad shape"))
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Relu<F> {
    cache: Option<Feat<F>>,
}

impl<F> Default for Relu<F> {
    fn default() -> Self {
        Relu { cache: None }
    }
}

impl<F: Scalar> Relu<F> {
    fn apply(x: &mut [F]) {
        for v in x.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
    }

    fn forward(&mut self, x: Feat<F>, train: bool) -> Result<Feat<F>> {
        let out = match x {
            Feat::Conv(mut a) => {
                Self::apply(a.as_slice_mut().expect("standard layout"));
                Feat::Conv(a)
            }
            Feat::Flat(mut a) => {
                Self::apply(a.as_slice_mut().expect("standard layout"));
                Feat::Flat(a)
            }
        };
        if train {
            self.cache = Some(out.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: Feat<F>) -> Result<Feat<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::config("relu backward without forward"))?;
        let mask = |g: &mut [F], y: &[F]| {
            for (gv, yv) in g.iter_mut().zip(y) {
                if *yv <= F::zero() {
                    *gv = F::zero();
                }
            }
        };
        Ok(match (grad, cache) {
            (Feat::Conv(mut g), Feat::Conv(y)) => {
                mask(g.as_slice_mut().unwrap(), y.as_slice().unwrap());
                Feat::Conv(g)
            }
            (Feat::Flat(mut g), Feat::Flat(y)) => {
                mask(g.as_slice_mut().unwrap(), y.as_slice().unwrap());
                Feat::Flat(g)
            }
            _ => return Err(Error::config("relu grad kind mismatch")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TanhLayer<F> {
    cache: Option<Feat<F>>,
}

impl<F> Default for TanhLayer<F> {
    fn default() -> Self {
        TanhLayer { cache: None }
    }
}

impl<F: Scalar> TanhLayer<F> {
    fn forward(&mut self, x: Feat<F>, train: bool) -> Result<Feat<F>> {
        let out = match x {
            Feat::Conv(a) => Feat::Conv(a.mapv(|v| v.tanh())),
            Feat::Flat(a) => Feat::Flat(a.mapv(|v| v.tanh())),
        };
        if train {
            self.cache = Some(out.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: Feat<F>) -> Result<Feat<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::config("tanh backward without forward"))?;
        let mask = |g: &mut [F], y: &[F]| {
            for (gv, yv) in g.iter_mut().zip(y) {
                *gv = *gv * (F::one() - *yv * *yv);
            }
        };
        Ok(match (grad, cache) {
            (Feat::Conv(mut g), Feat::Conv(y)) => {
                mask(g.as_slice_mut().unwrap(), y.as_slice().unwrap());
                Feat::Conv(g)
            }
            (Feat::Flat(mut g), Feat::Flat(y)) => {
                mask(g.as_slice_mut().unwrap(), y.as_slice().unwrap());
                Feat::Flat(g)
            }
            _ => return Err(Error::config("tanh grad kind mismatch")),
        })
    }
}

// ---------------------------------------------------------------------------
// Flatten / Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    fn forward<F: Scalar>(&mut self, x: Array4<F>, train: bool) -> Result<Array2<F>> {
        let dim = x.dim();
        if train {
            self.input_dim = Some(dim);
        }
        let (b, c, h, w) = dim;
        Ok(x.into_shape_with_order((b, c * h * w)).expect("flatten reshape"))
    }

    fn backward<F: Scalar>(&mut self, grad: Array2<F>) -> Result<Array4<F>> {
        let (b, c, h, w) = self
            .input_dim
            .take()
            .ok_or_else(|| Error::config("flatten backward without forward"))?;
        Ok(grad.into_shape_with_order((b, c, h, w)).expect("flatten grad reshape"))
    }
}

#[derive(Debug, Clone)]
pub struct Dense<F> {
    pub in_features: usize,
    pub out_features: usize,
    /// [in_features, out_features]
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub wgrad: Array2<F>,
    pub bgrad: Array1<F>,
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Array2::zeros((in_features, out_features)),
            bias: Array1::zeros(out_features),
            wgrad: Array2::zeros((in_features, out_features)),
            bgrad: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array2<F>, train: bool) -> Result<Array2<F>> {
        if x.shape()[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                context: "dense features".into(),
                expected: vec![self.in_features],
                actual: vec![x.shape()[1]],
            });
        }
        let mut out = x.dot(&self.weight);
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        if train {
            self.cache = Some(x);
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array2<F>) -> Result<Array2<F>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::config("dense backward without forward"))?;
        self.wgrad = &self.wgrad + &x.t().dot(grad);
        self.bgrad = &self.bgrad + &grad.sum_axis(Axis(0));
        Ok(grad.dot(&self.weight.t()))
    }
}

// ---------------------------------------------------------------------------
// Layer dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv2d(Conv2d<F>),
    MaxPool2d(MaxPool2d<F>),
    Relu(Relu<F>),
    Tanh(TanhLayer<F>),
    Flatten(Flatten),
    Dense(Dense<F>),
}

impl<F: Scalar> Layer<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d(_) => "max_pool2d",
            Layer::Relu(_) => "relu",
            Layer::Tanh(_) => "tanh",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn forward(&mut self, x: Feat<F>, train: bool) -> Result<Feat<F>> {
        let x = x.into_standard();
        let kind = self.kind_name();
        match self {
            Layer::Conv2d(l) => Ok(Feat::Conv(l.forward(x.into_conv(kind)?, train)?)),
            Layer::MaxPool2d(l) => Ok(Feat::Conv(l.forward(x.into_conv(kind)?, train)?)),
            Layer::Relu(l) => l.forward(x, train),
            Layer::Tanh(l) => l.forward(x, train),
            Layer::Flatten(l) => Ok(Feat::Flat(l.forward(x.into_conv(kind)?, train)?)),
            Layer::Dense(l) => Ok(Feat::Flat(l.forward(x.into_flat(kind)?, train)?)),
        }
    }

    pub fn backward(&mut self, grad: Feat<F>) -> Result<Feat<F>> {
        let grad = grad.into_standard();
        let kind = self.kind_name();
        match self {
            Layer::Conv2d(l) => Ok(Feat::Conv(l.backward(grad.into_conv(kind)?)?)),
            Layer::MaxPool2d(l) => Ok(Feat::Conv(l.backward(grad.into_conv(kind)?)?)),
            Layer::Relu(l) => l.backward(grad),
            Layer::Tanh(l) => l.backward(grad),
            Layer::Flatten(l) => Ok(Feat::Conv(l.backward(grad.into_flat(kind)?)?)),
            Layer::Dense(l) => Ok(Feat::Flat(l.backward(&grad.into_flat(kind)?)?)),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Layer::Conv2d(l) => {
                l.wgrad.fill(F::zero());
                l.bgrad.fill(F::zero());
            }
            Layer::Dense(l) => {
                l.wgrad.fill(F::zero());
                l.bgrad.fill(F::zero());
            }
            _ => {}
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::MaxPool2d(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::Tanh(l) => l.cache = None,
            Layer::Flatten(l) => l.input_dim = None,
            Layer::Dense(l) => l.cache = None,
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>> {
        match self {
            Layer::Conv2d(l) => vec![
                ParamMut {
                    name: format!("{prefix}.weight"),
                    value: l.weight.view_mut().into_dyn(),
                    grad: l.wgrad.view_mut().into_dyn(),
                },
                ParamMut {
                    name: format!("{prefix}.bias"),
                    value: l.bias.view_mut().into_dyn(),
                    grad: l.bgrad.view_mut().into_dyn(),
                },
            ],
            Layer::Dense(l) => vec![
                ParamMut {
                    name: format!("{prefix}.weight"),
                    value: l.weight.view_mut().into_dyn(),
                    grad: l.wgrad.view_mut().into_dyn(),
                },
                ParamMut {
                    name: format!("{prefix}.bias"),
                    value: l.bias.view_mut().into_dyn(),
                    grad: l.bgrad.view_mut().into_dyn(),
                },
            ],
            _ => Vec::new(),
        }
    }

    pub fn params_ref(&self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        match self {
            Layer::Conv2d(l) => vec![
                ParamRef { name: format!("{prefix}.weight"), value: l.weight.view().into_dyn() },
                ParamRef { name: format!("{prefix}.bias"), value: l.bias.view().into_dyn() },
            ],
            Layer::Dense(l) => vec![
                ParamRef { name: format!("{prefix}.weight"), value: l.weight.view().into_dyn() },
                ParamRef { name: format!("{prefix}.bias"), value: l.bias.view().into_dyn() },
            ],
            _ => Vec::new(),
        }
    }
}
