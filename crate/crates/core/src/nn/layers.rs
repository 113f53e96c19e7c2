//! Layers with explicit forward and backward passes.
//!
//! Parameters live in the layers; gradients live outside in flat slices
//! ordered like [`Layer::params`], so the forward and backward passes only
//! need `&self`.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;

pub type Tensor = ArrayD<f64>;

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Saved {
    None,
    Tensor(Tensor),
    Conv {
        cols: Array2<f64>,
        input_dim: [usize; 4],
        out_hw: (usize, usize),
    },
    Shape(Vec<usize>),
    ArgMax {
        index: Vec<usize>,
        input_dim: Vec<usize>,
    },
    Residual {
        branch: Vec<Saved>,
        shortcut: Option<Vec<Saved>>,
    },
}

/// Weight initialization schemes, both fan-in scaled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, zero bias. For layers followed
    /// by a rectifier.
    He,
    /// Uniform with bound `1 / sqrt(fan_in)` for weights and bias.
    LeCun,
    /// He bound scaled down, zero bias. Used on the last layer of residual
    /// branches so deep stacks start close to the identity.
    Scaled(f64),
}

fn init_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

fn init_pair<R: Rng + ?Sized>(rng: &mut R, w_shape: &[usize], out: usize, fan_in: usize, init: Init) -> (Tensor, Tensor) {
    let fan_in = fan_in as f64;
    let (w_bound, b_bound) = match init {
        Init::He => ((6.0 / fan_in).sqrt(), 0.0),
        Init::LeCun => (1.0 / fan_in.sqrt(), 1.0 / fan_in.sqrt()),
        Init::Scaled(s) => (s * (6.0 / fan_in).sqrt(), 0.0),
    };
    (init_tensor(rng, w_shape, w_bound), init_tensor(rng, &[out], b_bound))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Tensor,
    /// `(out,)`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Self {
        let (weight, bias) = init_pair(rng, &[out_ch, in_ch, kernel, kernel], out_ch, in_ch * kernel * kernel, init);
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.dims().2;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, c, k) = self.dims();
        self.weight
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous conv weight")
    }

    fn im2col(&self, x: &Tensor) -> (Array2<f64>, [usize; 4], (usize, usize)) {
        let (_, c, k) = self.dims();
        let d = x.shape();
        let (n, h, w) = (d[0], d[2], d[3]);
        assert_eq!(d[1], c, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let cols_per_row = n * ho * wo;
        let mut cols = vec![0.0; c * k * k * cols_per_row];
        let pad = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                    for ni in 0..n {
                        let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * ho + oy) * wo;
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let cols = Array2::from_shape_vec((c * k * k, cols_per_row), cols).expect("im2col shape");
        (cols, [n, c, h, w], (ho, wo))
    }

    fn col2im(&self, dcols: &Array2<f64>, [n, c, h, w]: [usize; 4], (ho, wo): (usize, usize)) -> Tensor {
        let k = self.dims().2;
        let mut dx = vec![0.0; n * c * h * w];
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let cols_per_row = n * ho * wo;
        let pad = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[row * cols_per_row..(row + 1) * cols_per_row];
                    for ni in 0..n {
                        let plane = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += col[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).expect("col2im shape")
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Saved) {
        let (o, _, _) = self.dims();
        let (cols, input_dim, (ho, wo)) = self.im2col(x);
        let n = input_dim[0];
        let prod = self.weight_matrix().dot(&cols); // (o, n*ho*wo)
        let plane = ho * wo;
        let mut out = vec![0.0; n * o * plane];
        let prod = prod.as_standard_layout();
        let p = prod.as_slice().expect("standard layout");
        for oc in 0..o {
            let b = self.bias[oc];
            for ni in 0..n {
                let src = &p[oc * n * plane + ni * plane..oc * n * plane + (ni + 1) * plane];
                let dst = &mut out[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, o, ho, wo]), out).expect("conv output shape");
        (
            out,
            Saved::Conv {
                cols,
                input_dim,
                out_hw: (ho, wo),
            },
        )
    }

    fn backward(&self, saved: &Saved, grad: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let Saved::Conv { cols, input_dim, out_hw } = saved else {
            unreachable!("conv backward without conv cache")
        };
        let (o, c, k) = self.dims();
        let n = input_dim[0];
        let plane = out_hw.0 * out_hw.1;
        let g = grad.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let mut g2 = vec![0.0; o * n * plane];
        for ni in 0..n {
            for oc in 0..o {
                let src = &gs[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
                g2[oc * n * plane + ni * plane..oc * n * plane + (ni + 1) * plane].copy_from_slice(src);
            }
        }
        let g2 = Array2::from_shape_vec((o, n * plane), g2).expect("grad shape");
        let dw = g2.dot(&cols.t());
        let dw = dw.into_shape_with_order(IxDyn(&[o, c, k, k])).expect("weight grad shape");
        grads[0] += &dw;
        grads[1] += &g2.sum_axis(Axis(1)).into_dyn();
        let dcols = self.weight_matrix().t().dot(&g2);
        self.col2im(&dcols, *input_dim, *out_hw)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    /// `(out,)`
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, init: Init) -> Self {
        let (weight, bias) = init_pair(rng, &[outputs, inputs], outputs, inputs, init);
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.view().into_dimensionality::<Ix2>().expect("2d weight")
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Saved) {
        let x2 = x.view().into_dimensionality::<Ix2>().expect("linear input is 2d");
        let b = self.bias.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        let out = x2.dot(&self.w().t()) + &b;
        (out.into_dyn(), Saved::Tensor(x.clone()))
    }

    fn backward(&self, saved: &Saved, grad: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let Saved::Tensor(x) = saved else {
            unreachable!("linear backward without input")
        };
        let x2 = x.view().into_dimensionality::<Ix2>().expect("2d");
        let g2 = grad.view().into_dimensionality::<Ix2>().expect("2d");
        grads[0] += &g2.t().dot(&x2).into_dyn();
        grads[1] += &g2.sum_axis(Axis(0)).into_dyn();
        g2.dot(&self.w()).into_dyn()
    }
}

/// One residual unit: `branch(x) + shortcut(x)`, identity shortcut when
/// `shortcut` is `None`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub branch: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    Sigmoid,
    /// `(n, c, h, w) -> (n, c)`
    GlobalAvgPool,
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    /// Nearest-neighbour 2x upsampling.
    Upsample2x,
    /// Reshapes each sample to the given shape.
    Reshape(Vec<usize>),
    Residual(Box<Residual>),
}

impl Layer {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(r) => {
                let mut p = r.branch.params();
                if let Some(s) = &r.shortcut {
                    p.extend(s.params());
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(r) => {
                let mut p = r.branch.params_mut();
                if let Some(s) = &mut r.shortcut {
                    p.extend(s.params_mut());
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(_) | Layer::Linear(_) => 2,
            Layer::Residual(r) => r.branch.param_count() + r.shortcut.as_ref().map_or(0, Sequential::param_count),
            _ => 0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Saved) {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu => {
                let out = x.mapv(|v| v.max(0.0));
                (out.clone(), Saved::Tensor(out))
            }
            Layer::Sigmoid => {
                let out = x.mapv(sigmoid);
                (out.clone(), Saved::Tensor(out))
            }
            Layer::GlobalAvgPool => {
                let d = x.shape().to_vec();
                let out = x
                    .view()
                    .into_shape_with_order((d[0], d[1], d[2] * d[3]))
                    .expect("4d input")
                    .mean_axis(Axis(2))
                    .expect("non-empty spatial dims");
                (out.into_dyn(), Saved::Shape(d))
            }
            Layer::MaxPool2d { kernel, stride, padding } => max_pool(x, *kernel, *stride, *padding),
            Layer::Upsample2x => {
                let d = x.shape();
                let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
                let out = ArrayD::from_shape_fn(IxDyn(&[n, c, 2 * h, 2 * w]), |i| x[[i[0], i[1], i[2] / 2, i[3] / 2]]);
                (out, Saved::None)
            }
            Layer::Reshape(shape) => {
                let mut full = vec![x.shape()[0]];
                full.extend(shape);
                let out = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&full))
                    .expect("reshape preserves size");
                (out, Saved::Shape(x.shape().to_vec()))
            }
            Layer::Residual(r) => {
                let (b, branch) = r.branch.forward(x);
                let (s, shortcut) = match &r.shortcut {
                    Some(seq) => {
                        let (s, saved) = seq.forward(x);
                        (s, Some(saved))
                    }
                    None => (x.clone(), None),
                };
                (b + s, Saved::Residual { branch, shortcut })
            }
        }
    }

    pub fn backward(&self, saved: &Saved, grad: &Tensor, grads: &mut [Tensor]) -> Tensor {
        match (self, saved) {
            (Layer::Conv2d(c), _) => c.backward(saved, grad, grads),
            (Layer::Linear(l), _) => l.backward(saved, grad, grads),
            (Layer::Relu, Saved::Tensor(out)) => {
                let mut g = grad.clone();
                ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            (Layer::Sigmoid, Saved::Tensor(out)) => {
                let mut g = grad.clone();
                ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| *g *= o * (1.0 - o));
                g
            }
            (Layer::GlobalAvgPool, Saved::Shape(d)) => {
                let area = (d[2] * d[3]) as f64;
                ArrayD::from_shape_fn(IxDyn(d), |i| grad[[i[0], i[1]]] / area)
            }
            (Layer::MaxPool2d { .. }, Saved::ArgMax { index, input_dim }) => {
                let mut dx = vec![0.0; input_dim.iter().product()];
                let g = grad.as_standard_layout();
                for (&src, &gv) in index.iter().zip(g.iter()) {
                    dx[src] += gv;
                }
                ArrayD::from_shape_vec(IxDyn(input_dim), dx).expect("pool grad shape")
            }
            (Layer::Upsample2x, _) => {
                let d = grad.shape();
                let (n, c, h, w) = (d[0], d[1], d[2] / 2, d[3] / 2);
                ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |i| {
                    let (y, x) = (2 * i[2], 2 * i[3]);
                    grad[[i[0], i[1], y, x]]
                        + grad[[i[0], i[1], y + 1, x]]
                        + grad[[i[0], i[1], y, x + 1]]
                        + grad[[i[0], i[1], y + 1, x + 1]]
                })
            }
            (Layer::Reshape(_), Saved::Shape(d)) => grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(d))
                .expect("reshape preserves size"),
            (Layer::Residual(r), Saved::Residual { branch, shortcut }) => {
                let nb = r.branch.param_count();
                let (gb, gs) = grads.split_at_mut(nb);
                let mut dx = r.branch.backward(branch, grad, gb);
                match (&r.shortcut, shortcut) {
                    (Some(seq), Some(saved)) => dx += &seq.backward(saved, grad, gs),
                    _ => dx += grad,
                }
                dx
            }
            _ => unreachable!("backward called with a cache from another layer"),
        }
    }
}

fn max_pool(x: &Tensor, k: usize, stride: usize, padding: usize) -> (Tensor, Saved) {
    let d = x.shape().to_vec();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                index.push(best_i);
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).expect("pool shape"),
        Saved::ArgMax { index, input_dim: d },
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Saved values of every layer in a [`Sequential`], in order.
pub type Trace = Vec<Saved>;

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.raw_dim())).collect()
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Trace) {
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, saved) = layer.forward(&cur);
            trace.push(saved);
            cur = out;
        }
        (cur, trace)
    }

    /// Forward pass without keeping anything for backward.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.layers.iter().fold(x.clone(), |cur, layer| layer.forward(&cur).0)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, grads: &mut [Tensor]) -> Tensor {
        assert_eq!(grads.len(), self.param_count(), "gradient slots");
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += layer.param_count();
        }
        let mut g = grad_out.clone();
        for ((layer, saved), &offset) in self.layers.iter().zip(trace).zip(&offsets).rev() {
            let slots = &mut grads[offset..offset + layer.param_count()];
            g = layer.backward(saved, &g, slots);
        }
        g
    }
}

/// Row-wise helper used by heads that emit one scalar per sample.
pub fn column(t: &Tensor) -> Array1<f64> {
    t.iter().copied().collect()
}
