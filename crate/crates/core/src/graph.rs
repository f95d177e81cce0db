//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep over the tape visits nodes in topological order.
//! Constants (leaves created with [`Graph::constant`]) never receive
//! gradients and do not trigger gradient work in their consumers.

use crate::error::{dim_err, AmdError, Result};
use crate::ops::{self, ConvGeometry};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    ChannelBias { x: Var, bias: Var },
    Relu(Var),
    Pepu { x: Var, kappa: T, tau: T },
    Gmp { x: Var, p: T },
    Mask { features: Var, mask: Var },
    Channel { x: Var, index: usize },
    NormalizedDistance { u: Var, v: Var },
    EuclideanDistance { u: Var, v: Var },
    Sum(Var),
    SumList(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Abs(Var),
    Scale(Var, T),
    AddConst(Var, T),
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
            Op::Relu(x)
            | Op::Pepu { x, .. }
            | Op::Gmp { x, .. }
            | Op::Channel { x, .. }
            | Op::Sum(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::AddConst(x, _) => vec![*x],
            Op::Mask { features, mask } => vec![*features, *mask],
            Op::NormalizedDistance { u, v } | Op::EuclideanDistance { u, v } => vec![*u, *v],
            Op::SumList(xs) => xs.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A dynamically recorded computation graph.
///
/// Confined to one thread; distinct graphs are independent.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that receives a gradient during [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf whose gradient tracking follows `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.leaf(t, rg)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated at `v` by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(shape, data).expect("kernel output matches shape")
    }

    // ---- operations -------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = ops::conv2d_forward(&geom, self.data(input), self.data(kernel));
        let value = Self::make(&[geom.c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(bias) != [shape[0]] {
            return Err(dim_err!(
                "bias {:?} does not match channels of {:?}",
                self.shape(bias),
                shape
            ));
        }
        let plane = self.value(x).len() / shape[0];
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let value = Self::make(&shape, out);
        Ok(self.push(value, Op::ChannelBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Self::make(self.shape(x), out);
        self.push(value, Op::Relu(x))
    }

    pub fn pepu(&mut self, x: Var, kappa: T, tau: T) -> Result<Var> {
        ops::check_pepu_params(kappa, tau)?;
        let out = self
            .data(x)
            .iter()
            .map(|&v| ops::pepu(v, kappa, tau))
            .collect();
        let value = Self::make(self.shape(x), out);
        Ok(self.push(value, Op::Pepu { x, kappa, tau }))
    }

    /// Generalized mean pooling of a `C×h×w` map to a length-`C` vector.
    pub fn gmp(&mut self, x: Var, p: T) -> Result<Var> {
        if !(p >= T::one()) {
            return Err(AmdError::Config(format!("pooling power {} must be >= 1", p)));
        }
        let shape = self.shape(x);
        if shape.len() != 3 {
            return Err(dim_err!("pooling expects C×h×w, got {:?}", shape));
        }
        let c = shape[0];
        let out = ops::gmp_forward(self.data(x), c, p);
        let value = Self::make(&[c], out);
        Ok(self.push(value, Op::Gmp { x, p }))
    }

    /// Multiplies every channel of a `C×h×w` map pointwise by an `h×w` mask.
    pub fn mask(&mut self, features: Var, mask: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let ms = self.shape(mask);
        if fs.len() != 3 || ms.len() != 2 || fs[1] != ms[0] || fs[2] != ms[1] {
            return Err(dim_err!("mask {:?} does not match feature map {:?}", ms, fs));
        }
        let m = self.data(mask);
        let plane = m.len();
        let out = self
            .data(features)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % plane])
            .collect();
        let value = Self::make(&fs, out);
        Ok(self.push(value, Op::Mask { features, mask }))
    }

    /// Channel `index` of a `C×h×w` map as an `h×w` map.
    pub fn channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index >= shape[0] {
            return Err(dim_err!("channel {} out of range for {:?}", index, shape));
        }
        let data = self.value(x).outer(index).to_vec();
        let value = Self::make(&shape[1..], data);
        Ok(self.push(value, Op::Channel { x, index }))
    }

    /// `‖u/‖u‖ − v/‖v‖‖₂`.
    pub fn normalized_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u) != self.shape(v) {
            return Err(dim_err!("{:?} vs {:?}", self.shape(u), self.shape(v)));
        }
        let d = ops::normalized_distance(self.data(u), self.data(v))?;
        Ok(self.push(Tensor::scalar(d), Op::NormalizedDistance { u, v }))
    }

    pub fn euclidean_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u) != self.shape(v) {
            return Err(dim_err!("{:?} vs {:?}", self.shape(u), self.shape(v)));
        }
        let d = ops::euclidean(self.data(u), self.data(v));
        Ok(self.push(Tensor::scalar(d), Op::EuclideanDistance { u, v }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Elementwise sum of same-shaped nodes. An empty list yields scalar zero.
    pub fn sum_list(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Ok(self.scalar(T::zero()));
        };
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(dim_err!("sum of {:?} and {:?}", shape, self.shape(x)));
            }
            acc.iter_mut()
                .zip(self.data(x))
                .for_each(|(a, &b)| *a = *a + b);
        }
        let value = Self::make(&shape, acc);
        Ok(self.push(value, Op::SumList(xs.to_vec())))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Self::make(self.shape(a), out);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `|x|`, with subgradient 0 at the kink.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let value = Self::make(self.shape(x), out);
        self.push(value, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let value = Self::make(self.shape(x), out);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        let value = Self::make(self.shape(x), out);
        self.push(value, Op::AddConst(x, c))
    }

    /// Mean of same-shaped nodes.
    pub fn mean_list(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(AmdError::Usage("mean of an empty list".into()));
        }
        let s = self.sum_list(xs)?;
        Ok(self.scale(s, T::one() / crate::scalar::count(xs.len())))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates `∂loss/∂node` into every node that requires a gradient.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AmdError::Usage(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, &[T::one()])])
    }

    /// Reverse sweep from several outputs at once, each seeded with an
    /// upstream gradient of its own shape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[T])]) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut adj: Vec<Option<Vec<T>>> = vec![None; top + 1];
        for &(v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                return Err(AmdError::Usage(format!(
                    "seed of length {} for node of shape {:?}",
                    g.len(),
                    self.shape(v)
                )));
            }
            if self.nodes[v.0].requires_grad {
                add_into(adj[v.0].get_or_insert_with(|| vec![T::zero(); g.len()]), g);
            }
        }
        // Local adjoints for this sweep; merged into stored grads at the end.
        for i in (0..=top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let parents = self.nodes[i].op.parents();
            if parents.iter().any(|p| p.0 >= i) {
                return Err(AmdError::Internal(format!("cycle at node {}", i)));
            }
            self.propagate(i, &g, &mut adj)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let zero = T::zero();

        // Returns the adjoint buffer of `v`, allocating it on first touch.
        fn slot<'a, T: Real>(adj: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut [T] {
            adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (xi, xk) = (self.data(*input), self.data(*kernel));
                let mut gi = needs(*input).then(|| vec![zero; xi.len()]);
                let mut gk = needs(*kernel).then(|| vec![zero; xk.len()]);
                ops::conv2d_backward(geom, xi, xk, g, gi.as_deref_mut(), gk.as_deref_mut());
                if let Some(gi) = gi {
                    add_into(slot(adj, *input, xi.len()), &gi);
                }
                if let Some(gk) = gk {
                    add_into(slot(adj, *kernel, xk.len()), &gk);
                }
            }
            Op::ChannelBias { x, bias } => {
                if needs(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
                if needs(*bias) {
                    let c = self.value(*bias).len();
                    let plane = g.len() / c;
                    let gb = slot(adj, *bias, c);
                    for (ch, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = self.data(*x);
                    let gx = slot(adj, *x, g.len());
                    for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > zero {
                            *a = *a + gv;
                        }
                    }
                }
            }
            Op::Pepu { x, kappa, tau } => {
                if needs(*x) {
                    let xv = self.data(*x);
                    let gx = slot(adj, *x, g.len());
                    for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a = *a + gv * ops::pepu_slope(v, *kappa, *tau);
                    }
                }
            }
            Op::Gmp { x, p } => {
                if needs(*x) {
                    let xv = self.data(*x);
                    let c = node.value.len();
                    let gx = slot(adj, *x, xv.len());
                    ops::gmp_backward(xv, node.value.data(), c, *p, g, gx);
                }
            }
            Op::Mask { features, mask } => {
                let (fv, mv) = (self.data(*features), self.data(*mask));
                let plane = mv.len();
                if needs(*features) {
                    let gf = slot(adj, *features, fv.len());
                    for (idx, a) in gf.iter_mut().enumerate() {
                        *a = *a + g[idx] * mv[idx % plane];
                    }
                }
                if needs(*mask) {
                    let gm = slot(adj, *mask, plane);
                    for (idx, (&gv, &f)) in g.iter().zip(fv).enumerate() {
                        let k = idx % plane;
                        gm[k] = gm[k] + gv * f;
                    }
                }
            }
            Op::Channel { x, index } => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    let plane = g.len();
                    let gx = slot(adj, *x, n);
                    add_into(&mut gx[index * plane..(index + 1) * plane], g);
                }
            }
            Op::NormalizedDistance { u, v } => {
                let d = node.value.item();
                let (uv, vv) = (self.data(*u), self.data(*v));
                if needs(*u) {
                    ops::normalized_distance_grad(uv, vv, d, g[0], slot(adj, *u, uv.len()));
                }
                if needs(*v) {
                    ops::normalized_distance_grad(vv, uv, d, g[0], slot(adj, *v, vv.len()));
                }
            }
            Op::EuclideanDistance { u, v } => {
                let d = node.value.item();
                if d > zero {
                    let (uv, vv) = (self.data(*u), self.data(*v));
                    let s = g[0] / d;
                    if needs(*u) {
                        let gu = slot(adj, *u, uv.len());
                        for ((a, &x), &y) in gu.iter_mut().zip(uv).zip(vv) {
                            *a = *a + s * (x - y);
                        }
                    }
                    if needs(*v) {
                        let gv = slot(adj, *v, vv.len());
                        for ((a, &x), &y) in gv.iter_mut().zip(uv).zip(vv) {
                            *a = *a - s * (x - y);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    slot(adj, *x, n).iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::SumList(xs) => {
                for &x in xs {
                    if needs(x) {
                        add_into(slot(adj, x, g.len()), g);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
                if needs(*b) {
                    let gb = slot(adj, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
                if needs(*b) {
                    let gb = slot(adj, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    let ga = slot(adj, *a, g.len());
                    for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gv * y;
                    }
                }
                if needs(*b) {
                    let gb = slot(adj, *b, g.len());
                    for ((x, &gv), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + gv * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    let ga = slot(adj, *a, g.len());
                    for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gv / y;
                    }
                }
                if needs(*b) {
                    let gb = slot(adj, *b, g.len());
                    for (((x, &gv), &n), &d) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *x = *x - gv * n / (d * d);
                    }
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let xv = self.data(*x);
                    let gx = slot(adj, *x, g.len());
                    for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > zero {
                            *a = *a + gv;
                        } else if v < zero {
                            *a = *a - gv;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let gx = slot(adj, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &gv)| *a = *a + gv * *c);
                }
            }
            Op::AddConst(x, _) => {
                if needs(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
}
