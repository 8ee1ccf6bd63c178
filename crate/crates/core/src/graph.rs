//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each recorded
//! operation carries a backward closure mapping the output gradient to one
//! gradient per input; [`Graph::backward`] replays the tape in reverse.

use crate::error::{DialError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Values of the node's inputs, in recording order.
    pub inputs: Vec<&'a Tensor<T>>,
    /// This node's forward value.
    pub output: &'a Tensor<T>,
    /// Whether each input needs a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The closure must return one entry per parent, with a tensor of the
    /// parent's shape wherever `needs` is set.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(DialError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|p| self.value(*p)).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.requires_grad(*p)).collect(),
            };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.requires_grad(*p) {
                    continue;
                }
                if !g.all_finite() {
                    return Err(DialError::NumericFailure(format!(
                        "non-finite gradient flowing into node {}",
                        p.0
                    )));
                }
                debug_assert_eq!(g.shape(), self.shape(*p));
                match &mut grads[p.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        // Leaves keep their accumulated gradients; interior ones were consumed.
        Ok(Gradients { grads })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.custom(&[a], value, move |args| {
            let x = args.inputs[0].data();
            let y = args.output.data();
            let data = args
                .grad
                .data()
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, |args| {
            vec![Some(args.grad.clone()), Some(args.grad.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, |args| {
            vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, |args| {
            let ga = args.needs[0].then(|| zip_map(args.grad, args.inputs[1], |g, y| g * y));
            let gb = args.needs[1].then(|| zip_map(args.grad, args.inputs[0], |g, x| g * x));
            vec![ga, gb]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.custom(&[a, b], value, |args| {
            let ga = args.needs[0].then(|| zip_map(args.grad, args.inputs[1], |g, y| g / y));
            let gb = args.needs[1].then(|| {
                let num = zip_map(args.grad, args.output, |g, q| g * q);
                zip_map(&num, args.inputs[1], |n, y| -n / y)
            });
            vec![ga, gb]
        })
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x + c, |_, _| T::one())
    }

    pub fn mul_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_const(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| x.recip())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.custom(&[a], value, move |args| {
            vec![Some(Tensor::full(&shape, args.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.mul_const(s, n.recip())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape must preserve the element count");
        let orig = self.shape(a).to_vec();
        self.custom(&[a], value, move |args| {
            vec![Some(Tensor::from_parts(orig.clone(), args.grad.data().to_vec()))]
        })
    }

    /// Multiplies every element of sample `n` of `x` (leading axis) by `s[n]`.
    pub fn scale_samples(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.shape()[0];
        assert_eq!(sv.len(), n, "scale_samples: one scale per sample");
        let per = xv.len() / n;
        let data = xv
            .data()
            .chunks(per)
            .zip(sv.data())
            .flat_map(|(chunk, &k)| chunk.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.custom(&[x, s], value, move |args| {
            let (xv, sv) = (args.inputs[0], args.inputs[1]);
            let gx = args.needs[0].then(|| {
                let data = args
                    .grad
                    .data()
                    .chunks(per)
                    .zip(sv.data())
                    .flat_map(|(chunk, &k)| chunk.iter().map(move |&g| g * k))
                    .collect();
                Tensor::from_parts(xv.shape().to_vec(), data)
            });
            let gs = args.needs[1].then(|| {
                let data = args
                    .grad
                    .data()
                    .chunks(per)
                    .zip(xv.data().chunks(per))
                    .map(|(g, x)| g.iter().zip(x).map(|(&g, &x)| g * x).sum())
                    .collect();
                Tensor::from_parts(sv.shape().to_vec(), data)
            });
            vec![gx, gs]
        })
    }

    /// Picks column `col` of an `[N, K]` matrix as an `[N]` vector.
    pub fn column(&mut self, m: Var, col: usize) -> Var {
        let shape = self.shape(m).to_vec();
        let (n, k) = match shape[..] {
            [n, k] => (n, k),
            _ => panic!("column: expected a matrix, got {shape:?}"),
        };
        let data = (0..n).map(|i| self.value(m).data()[i * k + col]).collect();
        self.custom(&[m], Tensor::from_parts(vec![n], data), move |args| {
            let mut g = Tensor::zeros(&shape);
            for i in 0..n {
                g.data_mut()[i * k + col] = args.grad.data()[i];
            }
            vec![Some(g)]
        })
    }

    /// Channels `channels` of an `[N, C, H, W]` tensor, in the given order.
    pub fn select_channels(&mut self, x: Var, channels: &[usize]) -> Var {
        let (n, c, h, w) = self.value(x).nchw().expect("select_channels on 4-d input");
        let plane = h * w;
        let chans = channels.to_vec();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * chans.len() * plane);
        for s in 0..n {
            for &ch in &chans {
                assert!(ch < c, "channel {ch} out of range");
                let off = (s * c + ch) * plane;
                data.extend_from_slice(&src[off..off + plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, chans.len(), h, w], data);
        self.custom(&[x], value, move |args| {
            let mut g = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                for (j, &ch) in chans.iter().enumerate() {
                    let src = &args.grad.data()[(s * chans.len() + j) * plane..][..plane];
                    let dst = &mut g.data_mut()[(s * c + ch) * plane..][..plane];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
            vec![Some(g)]
        })
    }

    /// Softmax across the channel axis of `[N, C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw().expect("softmax on 4-d input");
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(src[base + ch * plane + p]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * plane + p] - m).exp();
                    out[base + ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= z;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.custom(&[x], value, move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = vec![T::zero(); y.len()];
            for s in 0..n {
                let base = s * c * plane;
                for p in 0..plane {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        dot += g[i] * y[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        })
    }
}

pub(crate) fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
