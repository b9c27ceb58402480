//! Layer types and the sequential network container.
//!
//! Parameters live in the layer structs as plain arrays. Each training
//! step binds them onto a fresh tape (in a fixed traversal order) via
//! [`ParamBind`]; the same order is used by `params_mut`, so optimizer
//! state lines up by index.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::tape::{Id, Tape};
use super::Scalar;

/// Records the tape ids of bound parameters, in traversal order.
///
/// Binding is deduplicated by the parameter's data pointer: when the
/// same network runs forward several times on one tape (fakes, reals
/// and interpolates in a critic step), every pass reuses the same leaf,
/// so the tape accumulates one gradient per physical parameter.
#[derive(Default)]
pub struct ParamBind {
    pub ids: Vec<Id>,
    seen: std::collections::HashMap<usize, Id>,
}

impl ParamBind {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<F: Scalar>(&mut self, t: &mut Tape<F>, p: &ArrayD<F>) -> Id {
        let key = p.as_ptr() as usize;
        if let Some(&id) = self.seen.get(&key) {
            return id;
        }
        let id = t.var(p.clone());
        self.ids.push(id);
        self.seen.insert(key, id);
        id
    }
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)): the stack's standard init,
/// recorded in run manifests as "fan_in_uniform".
pub fn fan_in_uniform<F: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub struct Linear<F: Scalar> {
    /// (in, out)
    pub w: ArrayD<F>,
    /// (out,)
    pub b: ArrayD<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            w: fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
            b: fan_in_uniform(&[out_dim], in_dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
        let w = bind.bind(t, &self.w);
        let b = bind.bind(t, &self.b);
        let out_dim = self.b.len();
        let y = t.matmul(x, w);
        let b2 = t.reshape(b, &[1, out_dim]);
        t.add(y, b2)
    }

    fn forward_frozen(&self, t: &mut Tape<F>, x: Id) -> Id {
        let w = t.constant(self.w.clone());
        let b = t.constant(self.b.clone());
        let out_dim = self.b.len();
        let y = t.matmul(x, w);
        let b2 = t.reshape(b, &[1, out_dim]);
        t.add(y, b2)
    }
}

pub struct Conv2d<F: Scalar> {
    /// (out_ch, in_ch, kh, kw)
    pub w: ArrayD<F>,
    /// (out_ch,)
    pub b: ArrayD<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            w: fan_in_uniform(&[out_ch, in_ch, k, k], fan_in, rng),
            b: fan_in_uniform(&[out_ch], fan_in, rng),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
        let w = bind.bind(t, &self.w);
        let b = bind.bind(t, &self.b);
        let out_ch = self.b.len();
        let y = t.conv2d(x, w, self.stride, self.pad);
        let b4 = t.reshape(b, &[1, out_ch, 1, 1]);
        t.add(y, b4)
    }

    fn forward_frozen(&self, t: &mut Tape<F>, x: Id) -> Id {
        let w = t.constant(self.w.clone());
        let b = t.constant(self.b.clone());
        let out_ch = self.b.len();
        let y = t.conv2d(x, w, self.stride, self.pad);
        let b4 = t.reshape(b, &[1, out_ch, 1, 1]);
        t.add(y, b4)
    }
}

pub struct BatchNorm2d<F: Scalar> {
    pub gamma: ArrayD<F>,
    pub beta: ArrayD<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Train-mode forward: normalises with batch statistics (biased
    /// variance) and updates the running estimates.
    pub fn forward_train(&mut self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
        let c = self.gamma.len();
        let shape = t.shape(x).to_vec();
        let n = (shape[0] * shape[2] * shape[3]) as f64;
        let inv_n = F::from_f64(1.0 / n);

        let sum = t.sum_axes(x, &[0, 2, 3]);
        let mean = t.scale(sum, inv_n); // (1,C,1,1)
        let centered = t.sub(x, mean);
        let sq = t.square(centered);
        let var_sum = t.sum_axes(sq, &[0, 2, 3]);
        let var = t.scale(var_sum, inv_n); // (1,C,1,1)

        // Running stats are bookkeeping outside the graph.
        let m = self.momentum;
        let mean_v = t.value(mean).iter().cloned().collect::<Vec<F>>();
        let var_v = t.value(var).iter().cloned().collect::<Vec<F>>();
        for i in 0..c {
            let rm = self.running_mean[i].as_f64() * (1.0 - m) + mean_v[i].as_f64() * m;
            let rv = self.running_var[i].as_f64() * (1.0 - m) + var_v[i].as_f64() * m;
            self.running_mean[i] = F::from_f64(rm);
            self.running_var[i] = F::from_f64(rv);
        }

        let var_eps = t.add_scalar(var, F::from_f64(self.eps));
        let std = t.sqrt(var_eps);
        let norm = t.div(centered, std);
        self.affine(t, norm, bind, c)
    }

    /// Eval-mode forward using frozen running statistics.
    pub fn forward_eval(&self, t: &mut Tape<F>, x: Id) -> Id {
        let c = self.gamma.len();
        let mean = t.constant(self.running_mean.clone().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let var = t.constant(self.running_var.clone().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let centered = t.sub(x, mean);
        let var_eps = t.add_scalar(var, F::from_f64(self.eps));
        let std = t.sqrt(var_eps);
        let norm = t.div(centered, std);
        let g = t.constant(self.gamma.clone().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let b = t.constant(self.beta.clone().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let scaled = t.mul(norm, g);
        t.add(scaled, b)
    }

    fn affine(&self, t: &mut Tape<F>, norm: Id, bind: &mut ParamBind, c: usize) -> Id {
        let g = bind.bind(t, &self.gamma);
        let b = bind.bind(t, &self.beta);
        let g4 = t.reshape(g, &[1, c, 1, 1]);
        let b4 = t.reshape(b, &[1, c, 1, 1]);
        let scaled = t.mul(norm, g4);
        t.add(scaled, b4)
    }
}

/// One step of a sequential network.
pub enum Layer<F: Scalar> {
    Conv(Conv2d<F>),
    Bn(BatchNorm2d<F>),
    LeakyRelu(f64),
    Relu,
    MaxPool2,
    UpsampleNearest2,
    Flatten,
    /// Per-sample reshape; the leading batch dim is preserved.
    Reshape(Vec<usize>),
    Linear(Linear<F>),
    Sigmoid,
    /// Residual connection: out = main(x) + shortcut(x). An empty
    /// shortcut is the identity.
    Residual(Vec<Layer<F>>, Vec<Layer<F>>),
}

/// Ordered stack of layers; the network type used for classifiers,
/// generators and discriminators alike.
pub struct Sequential<F: Scalar> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Sequential { layers }
    }

    pub fn forward_train(&mut self, t: &mut Tape<F>, x: Id, bind: &mut ParamBind) -> Id {
        forward_layers_train(&mut self.layers, t, x, bind)
    }

    /// Inference pass: parameters enter as constants, batch-norm uses
    /// running statistics, no state is touched.
    pub fn forward_eval(&self, t: &mut Tape<F>, x: Id) -> Id {
        forward_layers_eval(&self.layers, t, x)
    }

    pub fn params(&self) -> Vec<&ArrayD<F>> {
        let mut out = Vec::new();
        collect_params(&self.layers, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<F>> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    /// All persistent arrays (parameters and running statistics) with
    /// stable names, for (de)serialization.
    pub fn named_arrays(&self) -> Vec<(String, &ArrayD<F>)> {
        let mut out = Vec::new();
        collect_named(&self.layers, "", &mut out);
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut ArrayD<F>)> {
        let mut out = Vec::new();
        collect_named_mut(&mut self.layers, "", &mut out);
        out
    }
}

fn forward_layers_train<F: Scalar>(
    layers: &mut [Layer<F>],
    t: &mut Tape<F>,
    mut x: Id,
    bind: &mut ParamBind,
) -> Id {
    for layer in layers.iter_mut() {
        x = match layer {
            Layer::Conv(c) => c.forward(t, x, bind),
            Layer::Bn(bn) => bn.forward_train(t, x, bind),
            Layer::LeakyRelu(s) => t.leaky_relu(x, F::from_f64(*s)),
            Layer::Relu => t.leaky_relu(x, F::zero()),
            Layer::MaxPool2 => t.max_pool2(x),
            Layer::UpsampleNearest2 => t.upsample_nearest2(x),
            Layer::Flatten => {
                let shape = t.shape(x).to_vec();
                let n: usize = shape[1..].iter().product();
                t.reshape(x, &[shape[0], n])
            }
            Layer::Reshape(dims) => {
                let b = t.shape(x)[0];
                let mut s = vec![b];
                s.extend_from_slice(dims);
                t.reshape(x, &s)
            }
            Layer::Linear(l) => l.forward(t, x, bind),
            Layer::Sigmoid => t.sigmoid(x),
            Layer::Residual(main, short) => {
                let m = forward_layers_train(main, t, x, bind);
                let s = if short.is_empty() {
                    x
                } else {
                    forward_layers_train(short, t, x, bind)
                };
                t.add(m, s)
            }
        };
    }
    x
}

fn forward_layers_eval<F: Scalar>(layers: &[Layer<F>], t: &mut Tape<F>, mut x: Id) -> Id {
    for layer in layers.iter() {
        x = match layer {
            Layer::Conv(c) => c.forward_frozen(t, x),
            Layer::Bn(bn) => bn.forward_eval(t, x),
            Layer::LeakyRelu(s) => t.leaky_relu(x, F::from_f64(*s)),
            Layer::Relu => t.leaky_relu(x, F::zero()),
            Layer::MaxPool2 => t.max_pool2(x),
            Layer::UpsampleNearest2 => t.upsample_nearest2(x),
            Layer::Flatten => {
                let shape = t.shape(x).to_vec();
                let n: usize = shape[1..].iter().product();
                t.reshape(x, &[shape[0], n])
            }
            Layer::Reshape(dims) => {
                let b = t.shape(x)[0];
                let mut s = vec![b];
                s.extend_from_slice(dims);
                t.reshape(x, &s)
            }
            Layer::Linear(l) => l.forward_frozen(t, x),
            Layer::Sigmoid => t.sigmoid(x),
            Layer::Residual(main, short) => {
                let m = forward_layers_eval(main, t, x);
                let s = if short.is_empty() {
                    x
                } else {
                    forward_layers_eval(short, t, x)
                };
                t.add(m, s)
            }
        };
    }
    x
}

fn collect_params<'a, F: Scalar>(layers: &'a [Layer<F>], out: &mut Vec<&'a ArrayD<F>>) {
    for l in layers {
        match l {
            Layer::Conv(c) => {
                out.push(&c.w);
                out.push(&c.b);
            }
            Layer::Bn(bn) => {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
            Layer::Linear(l) => {
                out.push(&l.w);
                out.push(&l.b);
            }
            Layer::Residual(main, short) => {
                collect_params(main, out);
                collect_params(short, out);
            }
            _ => {}
        }
    }
}

fn collect_params_mut<'a, F: Scalar>(layers: &'a mut [Layer<F>], out: &mut Vec<&'a mut ArrayD<F>>) {
    for l in layers.iter_mut() {
        match l {
            Layer::Conv(c) => {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
            Layer::Bn(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::Linear(l) => {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
            Layer::Residual(main, short) => {
                collect_params_mut(main, out);
                collect_params_mut(short, out);
            }
            _ => {}
        }
    }
}

fn collect_named<'a, F: Scalar>(
    layers: &'a [Layer<F>],
    prefix: &str,
    out: &mut Vec<(String, &'a ArrayD<F>)>,
) {
    for (i, l) in layers.iter().enumerate() {
        let p = format!("{prefix}l{i}");
        match l {
            Layer::Conv(c) => {
                out.push((format!("{p}.conv.w"), &c.w));
                out.push((format!("{p}.conv.b"), &c.b));
            }
            Layer::Bn(bn) => {
                out.push((format!("{p}.bn.gamma"), &bn.gamma));
                out.push((format!("{p}.bn.beta"), &bn.beta));
                out.push((format!("{p}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{p}.bn.running_var"), &bn.running_var));
            }
            Layer::Linear(l) => {
                out.push((format!("{p}.linear.w"), &l.w));
                out.push((format!("{p}.linear.b"), &l.b));
            }
            Layer::Residual(main, short) => {
                collect_named(main, &format!("{p}.main."), out);
                collect_named(short, &format!("{p}.short."), out);
            }
            _ => {}
        }
    }
}

fn collect_named_mut<'a, F: Scalar>(
    layers: &'a mut [Layer<F>],
    prefix: &str,
    out: &mut Vec<(String, &'a mut ArrayD<F>)>,
) {
    for (i, l) in layers.iter_mut().enumerate() {
        let p = format!("{prefix}l{i}");
        match l {
            Layer::Conv(c) => {
                out.push((format!("{p}.conv.w"), &mut c.w));
                out.push((format!("{p}.conv.b"), &mut c.b));
            }
            Layer::Bn(bn) => {
                out.push((format!("{p}.bn.gamma"), &mut bn.gamma));
                out.push((format!("{p}.bn.beta"), &mut bn.beta));
                out.push((format!("{p}.bn.running_mean"), &mut bn.running_mean));
                out.push((format!("{p}.bn.running_var"), &mut bn.running_var));
            }
            Layer::Linear(l) => {
                out.push((format!("{p}.linear.w"), &mut l.w));
                out.push((format!("{p}.linear.b"), &mut l.b));
            }
            Layer::Residual(main, short) => {
                collect_named_mut(main, &format!("{p}.main."), out);
                collect_named_mut(short, &format!("{p}.short."), out);
            }
            _ => {}
        }
    }
}
