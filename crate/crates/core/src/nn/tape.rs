//! Eager reverse-mode autodiff on a flat tape.
//!
//! Every operation computes its value immediately and records how it was
//! produced. `Tape::grad` walks the recording backwards and emits the
//! vector-Jacobian products *as new tape operations*, so gradients are
//! themselves differentiable. That property is what makes the WGAN
//! gradient penalty work: the penalty is a function of an input gradient,
//! and its parameter gradient requires differentiating through the first
//! backward pass.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Zip};

use super::conv::{self, ConvGeom};
use super::Scalar;

/// Index of a node on the tape.
pub type Id = usize;

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Scale(Id, F),
    AddScalar(Id, F),
    Square(Id),
    Sqrt(Id),
    Ln(Id),
    Exp(Id),
    /// max(x, c) elementwise; gradient is passed where x >= c.
    ClampMin(Id, F),
    /// (B,I) x (I,O) matrix product.
    Matmul(Id, Id),
    Transpose2(Id),
    Reshape(Id),
    BroadcastTo(Id),
    /// Sum over axes that were (or could have been) broadcast to reach
    /// the node's shape from the stored target shape.
    SumToShape(Id),
    SumAll(Id),
    /// Sum over some axes, keeping them as size-1 dims.
    SumAxes(Id),
    /// Row max along an axis, kept dim, treated as a constant
    /// (used to stabilise log-sum-exp; the detachment does not change
    /// the mathematical gradient of the surrounding expression).
    DetachedMaxAxis(Id),
    Conv {
        x: Id,
        w: Id,
        geom: ConvGeom,
    },
    ConvInputGrad {
        dy: Id,
        w: Id,
        geom: ConvGeom,
    },
    ConvWeightGrad {
        x: Id,
        dy: Id,
        geom: ConvGeom,
    },
    UpsampleNearest2(Id),
    /// 2x2 non-overlapping window sum; adjoint of UpsampleNearest2.
    PoolSum2(Id),
    MaxPool2(Id),
    /// Scatter `dy` into the positions selected by the MaxPool2 node `pool`.
    MaxUnpool2 {
        dy: Id,
        pool: Id,
    },
    /// Gather values of `x` at the positions selected by `pool`.
    GatherPool2 {
        x: Id,
        pool: Id,
    },
    LeakyRelu(Id, F),
    /// d/dx of LeakyRelu: 1 where x > 0, slope elsewhere. Piecewise
    /// constant, so it contributes no second-order term.
    LreluMask(Id, F),
    Sigmoid(Id),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
    /// Argmax positions for MaxPool2 nodes (flat input offsets per sample).
    pool_idx: Option<Vec<u32>>,
}

/// Flat recording of an eager computation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Value of a scalar (single-element) node as `F`.
    pub fn scalar(&self, id: Id) -> F {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1, "node {} is not scalar", id);
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Id {
        self.nodes.push(Node { value, op, requires_grad, pool_idx: None });
        self.nodes.len() - 1
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Id {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameter or probe point).
    pub fn var(&mut self, value: ArrayD<F>) -> Id {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, v: F) -> Id {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise / arithmetic ----

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = bin_broadcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = bin_broadcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = bin_broadcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        let v = bin_broadcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Id, c: F) -> Id {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Id, c: F) -> Id {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    pub fn square(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x.sqrt());
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn ln(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn clamp_min(&mut self, a: Id, c: F) -> Id {
        let v = self.nodes[a].value.mapv(|x| if x < c { c } else { x });
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: Id, slope: F) -> Id {
        let v = self.nodes[a].value.mapv(|x| if x > F::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    fn lrelu_mask(&mut self, a: Id, slope: F) -> Id {
        let v = self.nodes[a].value.mapv(|x| if x > F::zero() { F::one() } else { slope });
        self.push(v, Op::LreluMask(a, slope), false)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| F::one() / (F::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let src = &self.nodes[a].value;
        let v = match src.view().into_shape_with_order(IxDyn(shape)) {
            Ok(view) => view.to_owned(),
            // Non-contiguous source: copy to standard layout first.
            Err(_) => {
                let flat: Vec<F> = src.iter().cloned().collect();
                ArrayD::from_shape_vec(IxDyn(shape), flat)
                    .expect("reshape: incompatible element count")
            }
        };
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn transpose2(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose2(a), rg)
    }

    pub fn broadcast_to(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.nodes[a]
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shapes")
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::BroadcastTo(a), rg)
    }

    pub fn sum_to_shape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = sum_to_shape(&self.nodes[a].value, shape);
        let rg = self.rg(a);
        self.push(v, Op::SumToShape(a), rg)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s = self.nodes[a].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from(n).unwrap())
    }

    pub fn sum_axes(&mut self, a: Id, axes: &[usize]) -> Id {
        let mut v = self.nodes[a].value.clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        let rg = self.rg(a);
        self.push(v, Op::SumAxes(a), rg)
    }

    pub fn detached_max_axis(&mut self, a: Id, axis: usize) -> Id {
        let src = &self.nodes[a].value;
        let v = src.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(F::neg_infinity(), F::max)
        });
        let v = v.insert_axis(Axis(axis));
        self.push(v, Op::DetachedMaxAxis(a), false)
    }

    // ---- linear algebra / conv ----

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        let v = conv::par_matmul(&av, &bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, stride: usize, pad: usize) -> Id {
        let geom = ConvGeom::infer(self.shape(x), self.shape(w), stride, pad);
        let v = conv::conv2d(&self.nodes[x].value, &self.nodes[w].value, &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv { x, w, geom }, rg)
    }

    fn conv2d_input_grad(&mut self, dy: Id, w: Id, geom: ConvGeom) -> Id {
        let v = conv::conv2d_input_grad(&self.nodes[dy].value, &self.nodes[w].value, &geom);
        let rg = self.rg(dy) || self.rg(w);
        self.push(v, Op::ConvInputGrad { dy, w, geom }, rg)
    }

    fn conv2d_weight_grad(&mut self, x: Id, dy: Id, geom: ConvGeom) -> Id {
        let v = conv::conv2d_weight_grad(&self.nodes[x].value, &self.nodes[dy].value, &geom);
        let rg = self.rg(x) || self.rg(dy);
        self.push(v, Op::ConvWeightGrad { x, dy, geom }, rg)
    }

    pub fn upsample_nearest2(&mut self, a: Id) -> Id {
        let v = conv::upsample_nearest2(&self.nodes[a].value);
        let rg = self.rg(a);
        self.push(v, Op::UpsampleNearest2(a), rg)
    }

    pub fn pool_sum2(&mut self, a: Id) -> Id {
        let v = conv::pool_sum2(&self.nodes[a].value);
        let rg = self.rg(a);
        self.push(v, Op::PoolSum2(a), rg)
    }

    pub fn max_pool2(&mut self, a: Id) -> Id {
        let (v, idx) = conv::max_pool2(&self.nodes[a].value);
        let rg = self.rg(a);
        let id = self.push(v, Op::MaxPool2(a), rg);
        self.nodes[id].pool_idx = Some(idx);
        id
    }

    fn max_unpool2(&mut self, dy: Id, pool: Id) -> Id {
        let src_shape = self.nodes[input_of_pool(&self.nodes[pool].op)].value.shape().to_vec();
        let idx = self.nodes[pool].pool_idx.as_ref().expect("pool node lacks indices");
        let v = conv::max_unpool2(&self.nodes[dy].value, idx, &src_shape);
        let rg = self.rg(dy);
        self.push(v, Op::MaxUnpool2 { dy, pool }, rg)
    }

    fn gather_pool2(&mut self, x: Id, pool: Id) -> Id {
        let idx = self.nodes[pool].pool_idx.as_ref().expect("pool node lacks indices");
        let out_shape = self.nodes[pool].value.shape().to_vec();
        let v = conv::gather_pool2(&self.nodes[x].value, idx, &out_shape);
        let rg = self.rg(x);
        self.push(v, Op::GatherPool2 { x, pool }, rg)
    }

    // ---- gradient ----

    /// Reverse-mode gradient of scalar node `y` with respect to `wrt`.
    ///
    /// Returns one node id per entry of `wrt` (None when `y` does not
    /// depend on it). The returned nodes live on this tape and are
    /// differentiable in turn.
    pub fn grad(&mut self, y: Id, wrt: &[Id]) -> Vec<Option<Id>> {
        assert_eq!(self.nodes[y].value.len(), 1, "grad: objective must be scalar");
        let n = y + 1;

        // Nodes that (transitively) feed from some wrt entry...
        let mut depends = vec![false; n];
        for &w in wrt {
            assert!(w < n, "grad: wrt node created after objective");
            depends[w] = true;
        }
        for i in 0..n {
            if depends[i] {
                continue;
            }
            let mut any = false;
            for_inputs(&self.nodes[i].op, |j| any |= depends[j]);
            if any {
                depends[i] = true;
            }
        }
        // ...intersected with ancestors of y.
        let mut anc = vec![false; n];
        anc[y] = true;
        for i in (0..n).rev() {
            if !anc[i] {
                continue;
            }
            for_inputs(&self.nodes[i].op, |j| anc[j] = true);
        }

        let live = |i: usize, s: &Self| anc[i] && depends[i] && s.nodes[i].requires_grad;

        let mut gmap: Vec<Option<Id>> = vec![None; n];
        let one = ArrayD::from_elem(self.nodes[y].value.raw_dim(), F::one());
        gmap[y] = Some(self.constant(one));

        for i in (0..n).rev() {
            let Some(g) = gmap[i] else { continue };
            if !live(i, self) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop_one(i, g, op, &mut gmap, &|j, s: &Self| live(j, s));
        }

        wrt.iter().map(|&w| gmap[w]).collect()
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_one(
        &mut self,
        node: Id,
        g: Id,
        op: Op<F>,
        gmap: &mut [Option<Id>],
        live: &dyn Fn(Id, &Self) -> bool,
    ) {
        let acc = |s: &mut Self, target: Id, contrib: Id, gmap: &mut [Option<Id>]| {
            gmap[target] = Some(match gmap[target] {
                Some(prev) => s.add(prev, contrib),
                None => contrib,
            });
        };
        match op {
            Op::Leaf
            | Op::LreluMask(..)
            | Op::DetachedMaxAxis(..) => {}
            Op::Add(a, b) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.sum_to_shape(g, &sa);
                    acc(self, a, c, gmap);
                }
                if live(b, self) {
                    let sb = self.shape(b).to_vec();
                    let c = self.sum_to_shape(g, &sb);
                    acc(self, b, c, gmap);
                }
            }
            Op::Sub(a, b) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.sum_to_shape(g, &sa);
                    acc(self, a, c, gmap);
                }
                if live(b, self) {
                    let sb = self.shape(b).to_vec();
                    let ng = self.neg(g);
                    let c = self.sum_to_shape(ng, &sb);
                    acc(self, b, c, gmap);
                }
            }
            Op::Mul(a, b) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let gb = self.mul(g, b);
                    let c = self.sum_to_shape(gb, &sa);
                    acc(self, a, c, gmap);
                }
                if live(b, self) {
                    let sb = self.shape(b).to_vec();
                    let ga = self.mul(g, a);
                    let c = self.sum_to_shape(ga, &sb);
                    acc(self, b, c, gmap);
                }
            }
            Op::Div(a, b) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let gb = self.div(g, b);
                    let c = self.sum_to_shape(gb, &sa);
                    acc(self, a, c, gmap);
                }
                if live(b, self) {
                    let sb = self.shape(b).to_vec();
                    let bb = self.mul(b, b);
                    let ga = self.mul(g, a);
                    let q = self.div(ga, bb);
                    let nq = self.neg(q);
                    let c = self.sum_to_shape(nq, &sb);
                    acc(self, b, c, gmap);
                }
            }
            Op::Neg(a) => {
                if live(a, self) {
                    let c = self.neg(g);
                    acc(self, a, c, gmap);
                }
            }
            Op::Scale(a, k) => {
                if live(a, self) {
                    let c = self.scale(g, k);
                    acc(self, a, c, gmap);
                }
            }
            Op::AddScalar(a, _) => {
                if live(a, self) {
                    acc(self, a, g, gmap);
                }
            }
            Op::Square(a) => {
                if live(a, self) {
                    let two_a = self.scale(a, F::from(2.0).unwrap());
                    let c = self.mul(g, two_a);
                    acc(self, a, c, gmap);
                }
            }
            Op::Sqrt(a) => {
                if live(a, self) {
                    // d sqrt = g / (2 sqrt(a)); reuse this node's value.
                    let half_g = self.scale(g, F::from(0.5).unwrap());
                    let c = self.div(half_g, node);
                    acc(self, a, c, gmap);
                }
            }
            Op::Ln(a) => {
                if live(a, self) {
                    let c = self.div(g, a);
                    acc(self, a, c, gmap);
                }
            }
            Op::Exp(a) => {
                if live(a, self) {
                    let c = self.mul(g, node);
                    acc(self, a, c, gmap);
                }
            }
            Op::ClampMin(a, k) => {
                if live(a, self) {
                    let mask = {
                        let v = self.nodes[a].value.mapv(|x| if x >= k { F::one() } else { F::zero() });
                        self.constant(v)
                    };
                    let c = self.mul(g, mask);
                    acc(self, a, c, gmap);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if live(a, self) {
                    let mask = self.lrelu_mask(a, slope);
                    let c = self.mul(g, mask);
                    acc(self, a, c, gmap);
                }
            }
            Op::Sigmoid(a) => {
                if live(a, self) {
                    // g * s * (1 - s), s being this node's output.
                    let neg_s = self.neg(node);
                    let one_minus = self.add_scalar(neg_s, F::one());
                    let deriv = self.mul(node, one_minus);
                    let c = self.mul(g, deriv);
                    acc(self, a, c, gmap);
                }
            }
            Op::Matmul(a, b) => {
                if live(a, self) {
                    let bt = self.transpose2(b);
                    let c = self.matmul(g, bt);
                    acc(self, a, c, gmap);
                }
                if live(b, self) {
                    let at = self.transpose2(a);
                    let c = self.matmul(at, g);
                    acc(self, b, c, gmap);
                }
            }
            Op::Transpose2(a) => {
                if live(a, self) {
                    let c = self.transpose2(g);
                    acc(self, a, c, gmap);
                }
            }
            Op::Reshape(a) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.reshape(g, &sa);
                    acc(self, a, c, gmap);
                }
            }
            Op::BroadcastTo(a) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.sum_to_shape(g, &sa);
                    acc(self, a, c, gmap);
                }
            }
            Op::SumToShape(a) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.broadcast_to(g, &sa);
                    acc(self, a, c, gmap);
                }
            }
            Op::SumAll(a) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.broadcast_to(g, &sa);
                    acc(self, a, c, gmap);
                }
            }
            Op::SumAxes(a) => {
                if live(a, self) {
                    let sa = self.shape(a).to_vec();
                    let c = self.broadcast_to(g, &sa);
                    acc(self, a, c, gmap);
                }
            }
            Op::Conv { x, w, geom } => {
                if live(x, self) {
                    let c = self.conv2d_input_grad(g, w, geom.clone());
                    acc(self, x, c, gmap);
                }
                if live(w, self) {
                    let c = self.conv2d_weight_grad(x, g, geom);
                    acc(self, w, c, gmap);
                }
            }
            Op::ConvInputGrad { dy, w, geom } => {
                // s = <v, T(dy, w)>:  d/d(dy) = conv(v, w), d/dw = Wg(v, dy).
                if live(dy, self) {
                    let c = {
                        let geom = geom.clone();
                        let v = conv::conv2d(&self.nodes[g].value, &self.nodes[w].value, &geom);
                        let rg = self.rg(g) || self.rg(w);
                        self.push(v, Op::Conv { x: g, w, geom }, rg)
                    };
                    acc(self, dy, c, gmap);
                }
                if live(w, self) {
                    let c = self.conv2d_weight_grad(g, dy, geom);
                    acc(self, w, c, gmap);
                }
            }
            Op::ConvWeightGrad { x, dy, geom } => {
                // s = <v, Wg(x, dy)>:  d/dx = T(dy, v), d/d(dy) = conv(x, v).
                if live(x, self) {
                    let c = self.conv2d_input_grad(dy, g, geom.clone());
                    acc(self, x, c, gmap);
                }
                if live(dy, self) {
                    let c = {
                        let geom = geom.clone();
                        let v = conv::conv2d(&self.nodes[x].value, &self.nodes[g].value, &geom);
                        let rg = self.rg(x) || self.rg(g);
                        self.push(v, Op::Conv { x, w: g, geom }, rg)
                    };
                    acc(self, dy, c, gmap);
                }
            }
            Op::UpsampleNearest2(a) => {
                if live(a, self) {
                    let c = self.pool_sum2(g);
                    acc(self, a, c, gmap);
                }
            }
            Op::PoolSum2(a) => {
                if live(a, self) {
                    let c = self.upsample_nearest2(g);
                    acc(self, a, c, gmap);
                }
            }
            Op::MaxPool2(a) => {
                if live(a, self) {
                    let c = self.max_unpool2(g, node);
                    acc(self, a, c, gmap);
                }
            }
            Op::MaxUnpool2 { dy, pool } => {
                if live(dy, self) {
                    let c = self.gather_pool2(g, pool);
                    acc(self, dy, c, gmap);
                }
            }
            Op::GatherPool2 { x, pool } => {
                if live(x, self) {
                    let c = self.max_unpool2(g, pool);
                    acc(self, x, c, gmap);
                }
            }
        }
    }
}

fn input_of_pool<F: Scalar>(op: &Op<F>) -> Id {
    match op {
        Op::MaxPool2(a) => *a,
        _ => panic!("expected MaxPool2 node"),
    }
}

fn for_inputs<F: Scalar>(op: &Op<F>, mut f: impl FnMut(Id)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Ln(a)
        | Op::Exp(a)
        | Op::ClampMin(a, _)
        | Op::Transpose2(a)
        | Op::Reshape(a)
        | Op::BroadcastTo(a)
        | Op::SumToShape(a)
        | Op::SumAll(a)
        | Op::SumAxes(a)
        | Op::DetachedMaxAxis(a)
        | Op::UpsampleNearest2(a)
        | Op::PoolSum2(a)
        | Op::MaxPool2(a)
        | Op::LeakyRelu(a, _)
        | Op::LreluMask(a, _)
        | Op::Sigmoid(a) => f(*a),
        Op::Conv { x, w, .. } => {
            f(*x);
            f(*w);
        }
        Op::ConvInputGrad { dy, w, .. } => {
            f(*dy);
            f(*w);
        }
        Op::ConvWeightGrad { x, dy, .. } => {
            f(*x);
            f(*dy);
        }
        Op::MaxUnpool2 { dy, .. } => f(*dy),
        Op::GatherPool2 { x, .. } => f(*x),
    }
}

fn as2<F: Scalar>(v: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    v.view().into_dimensionality::<ndarray::Ix2>().expect("expected rank-2 array")
}

fn bin_broadcast<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F + Sync + Send,
) -> ArrayD<F> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|o, &y| *o = f(*o, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs not broadcastable");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs not broadcastable");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("incompatible broadcast shapes {:?} vs {:?}", a, b),
        };
    }
    out
}

fn sum_to_shape<F: Scalar>(x: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let mut v = x.clone();
    while v.ndim() > target.len() {
        v = v.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && v.shape()[ax] != 1 {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(v.shape(), target, "sum_to_shape mismatch");
    v
}

/// Convenience: flattened view of a gradient as ArrayViewD.
pub fn flat<F: Scalar>(v: &ArrayD<F>) -> ArrayViewD<'_, F> {
    v.view()
}
