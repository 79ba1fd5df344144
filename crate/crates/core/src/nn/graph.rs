//! Composite layers: chains, residual sums and channel concatenation.

use super::layers::{Census, Layer, LayerKind, Param};
use super::tensor::{Scalar, Tensor};

pub struct Sequential<T> {
    name: String,
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Sequential
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter();
        let Some(first) = it.next() else {
            return x.clone();
        };
        it.fold(first.eval(x), |h, l| l.eval(&h))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter_mut();
        let Some(first) = it.next() else {
            return x.clone();
        };
        it.fold(first.forward(x), |h, l| l.forward(&h))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter_mut().rev();
        let Some(last) = it.next() else {
            return grad.clone();
        };
        it.fold(last.backward(grad), |g, l| l.backward(&g))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.layers.iter().for_each(|l| l.visit_state(f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.layers.iter_mut().for_each(|l| l.visit_state_mut(f));
    }

    fn census(&self, c: &mut Census) {
        self.layers.iter().for_each(|l| l.census(c));
    }
}

/// Shortcut path of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Parameter-free projection: spatial subsampling by `stride` and
    /// zero-filled extra channels up to `out_channels`.
    Subsample { stride: usize, out_channels: usize },
}

impl Shortcut {
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match *self {
            Shortcut::Identity => x.clone(),
            Shortcut::Subsample { stride, out_channels } => {
                let (n, c, h, w) = x.dims4();
                let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
                let mut y = Tensor::zeros(&[n, out_channels, oh, ow]);
                for b in 0..n {
                    for k in 0..c.min(out_channels) {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                y.data[((b * out_channels + k) * oh + oy) * ow + ox] =
                                    x.data[((b * c + k) * h + oy * stride) * w + ox * stride];
                            }
                        }
                    }
                }
                y
            }
        }
    }

    fn backward<T: Scalar>(&self, grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
        match *self {
            Shortcut::Identity => grad.clone(),
            Shortcut::Subsample { stride, out_channels } => {
                let mut dx = Tensor::zeros(in_shape);
                let (n, c, h, w) = dx.dims4();
                let (_, _, oh, ow) = grad.dims4();
                for b in 0..n {
                    for k in 0..c.min(out_channels) {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dx.data[((b * c + k) * h + oy * stride) * w + ox * stride] +=
                                    grad.data[((b * out_channels + k) * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

/// `branch(x) + shortcut(x)`. Any activation after the sum is a separate
/// node.
pub struct Residual<T> {
    name: String,
    pub branch: Sequential<T>,
    pub shortcut: Shortcut,
    in_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Residual<T> {
    pub fn new(name: impl Into<String>, branch: Sequential<T>, shortcut: Shortcut) -> Self {
        Self {
            name: name.into(),
            branch,
            shortcut,
            in_shape: None,
        }
    }
}

fn add_into<T: Scalar>(mut a: Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape, b.shape, "residual shape mismatch");
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
    a
}

impl<T: Scalar> Layer<T> for Residual<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Residual
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        add_into(self.branch.eval(x), &self.shortcut.apply(x))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.in_shape = Some(x.shape.clone());
        add_into(self.branch.forward(x), &self.shortcut.apply(x))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.in_shape.take().expect("backward without forward");
        let db = self.branch.backward(grad);
        add_into(db, &self.shortcut.backward(grad, &shape))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.branch.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.branch.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.branch.visit_state_mut(f);
    }

    fn census(&self, c: &mut Census) {
        c.count(LayerKind::Residual);
        self.branch.census(c);
    }
}

/// Parallel branches over the same input, concatenated along channels.
pub struct Concat<T> {
    name: String,
    pub branches: Vec<Sequential<T>>,
    widths: Vec<usize>,
}

impl<T: Scalar> Concat<T> {
    pub fn new(name: impl Into<String>, branches: Vec<Sequential<T>>) -> Self {
        Self {
            name: name.into(),
            branches,
            widths: Vec::new(),
        }
    }

    fn join(outs: &[Tensor<T>]) -> (Tensor<T>, Vec<usize>) {
        let (n, _, h, w) = outs[0].dims4();
        let widths: Vec<usize> = outs.iter().map(|o| o.shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut y = Tensor::zeros(&[n, total, h, w]);
        let hw = h * w;
        for b in 0..n {
            let mut at = b * total * hw;
            for o in outs {
                let (on, oc, oh, ow) = o.dims4();
                assert_eq!((on, oh, ow), (n, h, w), "concat branch shape mismatch");
                let len = oc * hw;
                y.data[at..at + len].copy_from_slice(&o.data[b * len..(b + 1) * len]);
                at += len;
            }
        }
        (y, widths)
    }
}

impl<T: Scalar> Layer<T> for Concat<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Concat
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let outs: Vec<Tensor<T>> = self.branches.iter().map(|b| b.eval(x)).collect();
        Self::join(&outs).0
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let outs: Vec<Tensor<T>> = self.branches.iter_mut().map(|b| b.forward(x)).collect();
        let (y, widths) = Self::join(&outs);
        self.widths = widths;
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (n, total, h, w) = grad.dims4();
        let hw = h * w;
        let mut dx: Option<Tensor<T>> = None;
        let mut offset = 0;
        for (branch, &c) in self.branches.iter_mut().zip(&self.widths) {
            let mut g = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let src = (b * total + offset) * hw;
                g.data[b * c * hw..(b + 1) * c * hw].copy_from_slice(&grad.data[src..src + c * hw]);
            }
            offset += c;
            let d = branch.backward(&g);
            dx = Some(match dx {
                None => d,
                Some(acc) => add_into(acc, &d),
            });
        }
        dx.expect("concat without branches")
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.branches.iter_mut().for_each(|b| b.visit_params(f));
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.branches.iter().for_each(|b| b.visit_state(f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.branches.iter_mut().for_each(|b| b.visit_state_mut(f));
    }

    fn census(&self, c: &mut Census) {
        c.count(LayerKind::Concat);
        self.branches.iter().for_each(|b| b.census(c));
    }
}
