//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! keeps its value and a closure mapping the output gradient (plus the parent
//! values) to parent gradients. Nodes whose ancestry contains no trainable
//! leaf carry no closure, so constant sub-graphs (targets, masks, frozen
//! feature extractors on targets) cost nothing at backward time.

use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures (inference only).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        let backward: Option<BackwardFn<T>> = if self.grad_enabled {
            Some(Box::new(|_, _, _| Vec::new()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward,
        });
        Var(id)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Free an intermediate value on an inference tape. No-op when gradients
    /// are recorded, since backward closures need the parent values.
    pub fn discard(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = Tensor::zeros(&[0]);
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].backward.is_some()
    }

    /// Record an operation. `backward` is only kept when some parent requires
    /// a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let needs = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs { Some(Box::new(backward)) } else { None },
        });
        Var(id)
    }

    /// Run reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar");
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(bw) = &node.backward else { continue };
            if node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(&g, &parent_vals, &node.value);
            assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if self.nodes[p].backward.is_none() {
                    continue;
                }
                assert_eq!(gp.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp),
                }
            }
            // keep leaf grads, drop intermediate ones
            grads[id] = None;
        }
        Gradients { grads }
    }

    // ---- elementwise ops -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        self.push(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        self.push(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.push(out, &[a, b], |g, p, _| {
            vec![
                Some(g.zip_map(p[1], |gv, y| gv * y).unwrap()),
                Some(g.zip_map(p[0], |gv, x| gv * x).unwrap()),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], move |g, _, _| vec![Some(g.map(|v| v * k))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, &[a], |g, p, _| {
            vec![Some(
                g.zip_map(p[0], |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, &[a], move |g, p, _| {
            vec![Some(
                g.zip_map(p[0], |gv, x| if x > T::zero() { gv } else { gv * slope })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, &[a], |g, _, y| {
            vec![Some(g.zip_map(y, |gv, s| gv * s * (T::one() - s)).unwrap())]
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.len()).unwrap();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum() / n);
        self.push(out, &[a], move |g, _, _| vec![Some(Tensor::full(&shape, g.item() / n))])
    }

    /// Sum of scalar vars.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Var {
        let total = items.iter().fold(T::zero(), |acc, v| acc + self.value(*v).item());
        let n = items.len();
        self.push(Tensor::scalar(total), items, move |g, _, _| {
            (0..n).map(|_| Some(g.clone())).collect()
        })
    }

    /// Concatenate `N×C_i×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, items: &[Var]) -> Var {
        let shapes: Vec<Vec<usize>> = items.iter().map(|v| self.value(*v).shape().to_vec()).collect();
        let (n, h, w) = (shapes[0][0], shapes[0][2], shapes[0][3]);
        for s in &shapes {
            assert!(
                s.len() == 4 && s[0] == n && s[2] == h && s[3] == w,
                "concat: {shapes:?}"
            );
        }
        let cs: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let ctot: usize = cs.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ctot, h, w]);
        {
            let od = out.data_mut();
            let mut c0 = 0;
            for (v, &c) in items.iter().zip(&cs) {
                let src = self.nodes[v.0].value.data();
                for b in 0..n {
                    od[(b * ctot + c0) * hw..(b * ctot + c0 + c) * hw]
                        .copy_from_slice(&src[b * c * hw..(b + 1) * c * hw]);
                }
                c0 += c;
            }
        }
        self.push(out, items, move |g, _, _| {
            let gd = g.data();
            let mut res = Vec::with_capacity(cs.len());
            let mut c0 = 0;
            for &c in &cs {
                let mut t = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    t.data_mut()[b * c * hw..(b + 1) * c * hw]
                        .copy_from_slice(&gd[(b * ctot + c0) * hw..(b * ctot + c0 + c) * hw]);
                }
                res.push(Some(t));
                c0 += c;
            }
            res
        })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
