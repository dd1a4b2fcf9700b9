//! Reverse-mode gradient tape.
//!
//! Every primitive executed through a [`Tape`] appends a node holding its
//! output value and (when gradients are enabled and some input requires
//! them) whatever the backward pass needs. [`Tape::backward`] replays the
//! nodes in reverse, accumulating gradients additively into every input.
//! A tape is single-use: a second backward is rejected.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::kernel::{self, RecurrenceCache, RecurrenceParams};
use crate::profile::{OpCategory, OpTimings};
use crate::tensor::{self, gemm, Element, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

enum Op<E> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: E,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    PassThrough {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<E>,
        targets: Vec<usize>,
        weights: Vec<E>,
    },
    Sum {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    Swap01 {
        x: usize,
    },
    Concat1 {
        a: usize,
        b: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<E>,
    },
    Sru {
        u: usize,
        x: usize,
        params: [usize; 4],
        c0: Tensor<E>,
        cache: RecurrenceCache<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s.
pub struct Gradients<E> {
    tape: u64,
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Shape>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a leaf; `None` if it does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<E> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

/// Records primitive operations for reverse-mode differentiation.
pub struct Tape<E: Element> {
    id: u64,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
    profiler: Option<RefCell<OpTimings>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self::build(true)
    }

    /// A tape that only evaluates values.
    pub fn no_grad() -> Self {
        Self::build(false)
    }

    fn build(grad_enabled: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            profiler: None,
        }
    }

    /// Enables per-category wall-time accounting for every primitive.
    pub fn with_profiler(mut self) -> Self {
        self.profiler = Some(RefCell::new(OpTimings::default()));
        self
    }

    pub fn timings(&self) -> Option<OpTimings> {
        self.profiler.as_ref().map(|p| p.borrow().clone())
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn timed<T>(&self, cat: OpCategory, f: impl FnOnce() -> T) -> T {
        match &self.profiler {
            None => f(),
            Some(p) => {
                let start = Instant::now();
                let out = f();
                p.borrow_mut().record(cat, start.elapsed());
                out
            }
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.borrow().len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.id)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        self.grad_enabled && ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Registers a trainable leaf.
    pub fn param(&self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, self.grad_enabled)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.val(v.id)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let out = self.timed(OpCategory::MatMul, || tensor::matmul(&ta, &tb))?;
        Ok(self.push(out, Op::MatMul { a: ia, b: ib }, self.needs(&[ia, ib])))
    }

    /// `x W^T (+ bias)` over the last axis of `x`; `w` is `out x in`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (tx, tw) = (self.val(ix), self.val(iw));
        let (n_out, n_in) = tw.dims2()?;
        if tx.rank() == 0 || tx.shape_obj().last() != n_in {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let tb = ib.map(|i| self.val(i));
        if let Some(b) = &tb {
            if b.shape() != [n_out] {
                return Err(Error::shape("linear bias", tw.shape(), b.shape()));
            }
        }
        let rows = tx.len() / n_in.max(1);
        let out = self.timed(OpCategory::MatMul, || {
            let mut out = vec![E::zero(); rows * n_out];
            gemm(
                rows,
                n_in,
                n_out,
                tx.data(),
                false,
                tw.data(),
                true,
                &mut out,
                false,
            );
            if let Some(b) = &tb {
                for row in out.chunks_mut(n_out.max(1)) {
                    row.iter_mut()
                        .zip(b.data())
                        .for_each(|(o, &bv)| *o = *o + bv);
                }
            }
            out
        });
        let mut dims = tx.shape().to_vec();
        *dims.last_mut().expect("rank >= 1") = n_out;
        let mut ids = vec![ix, iw];
        ids.extend(ib);
        Ok(self.push(
            Tensor::from_parts(Shape::new(dims)?, out),
            Op::Linear {
                x: ix,
                w: iw,
                bias: ib,
            },
            self.needs(&ids),
        ))
    }

    /// Batched product of rank-3 tensors: `a[i] * b[i]`, or `a[i] * b[i]^T`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (nb, m, k) = ta.dims3()?;
        let (nb2, p, q) = tb.dims3()?;
        let (k2, n) = if trans_b { (q, p) } else { (p, q) };
        if nb != nb2 || k != k2 {
            return Err(Error::shape("bmm", ta.shape(), tb.shape()));
        }
        let out = self.timed(OpCategory::MatMul, || {
            let mut out = vec![E::zero(); nb * m * n];
            for i in 0..nb {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            out
        });
        Ok(self.push(
            Tensor::from_parts(Shape::new(vec![nb, m, n])?, out),
            Op::Bmm {
                a: ia,
                b: ib,
                trans_b,
            },
            self.needs(&[ia, ib]),
        ))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
    ) -> Result<(usize, usize, Tensor<E>, Tensor<E>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        Ok((ia, ib, ta, tb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, ta, tb) = self.binary(a, b, "add")?;
        let out = self.timed(OpCategory::Other, || ta.add(&tb))?;
        Ok(self.push(out, Op::Add { a: ia, b: ib }, self.needs(&[ia, ib])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, ta, tb) = self.binary(a, b, "sub")?;
        let out = self.timed(OpCategory::Other, || ta.sub(&tb))?;
        Ok(self.push(out, Op::Sub { a: ia, b: ib }, self.needs(&[ia, ib])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, ta, tb) = self.binary(a, b, "mul")?;
        let out = self.timed(OpCategory::Other, || ta.mul(&tb))?;
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, self.needs(&[ia, ib])))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let c = E::of(c);
        let out = self.timed(OpCategory::Other, || self.val(ix).scale(c));
        Ok(self.push(out, Op::Scale { x: ix, c }, self.needs(&[ix])))
    }

    /// Multiplies by a single-element variable.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let ts = self.val(is);
        if ts.len() != 1 {
            return Err(Error::shape("scale_by", self.val(ix).shape(), ts.shape()));
        }
        let out = self.timed(OpCategory::Other, || self.val(ix).scale(ts.item()));
        Ok(self.push(out, Op::ScaleBy { x: ix, s: is }, self.needs(&[ix, is])))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.timed(OpCategory::Other, || self.val(ix).sigmoid());
        Ok(self.push(out, Op::Sigmoid { x: ix }, self.needs(&[ix])))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        let out = self.timed(OpCategory::Attention, || tensor::softmax_rows(&tx))?;
        Ok(self.push(out, Op::Softmax { x: ix }, self.needs(&[ix])))
    }

    /// Adds the masking constant to every score `(.., i, j)` with
    /// `j > offset + i`: query `i` sees all `offset` leading keys and the
    /// current keys up to and including its own position.
    pub fn causal_mask(&self, scores: Var, offset: usize) -> Result<Var> {
        let ix = self.check(scores)?;
        let tx = self.val(ix);
        let dims = tx.shape().to_vec();
        if dims.len() < 2 {
            return Err(Error::shape("causal_mask", &dims, &[]));
        }
        let (lq, lk) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        if lk < offset + lq {
            return Err(Error::shape("causal_mask", &dims, &[offset + lq]));
        }
        let out = self.timed(OpCategory::Attention, || {
            let mut out = tx.into_vec();
            let fill = E::of(MASK_VALUE);
            for block in out.chunks_mut(lq * lk) {
                for i in 0..lq {
                    for v in &mut block[i * lk + offset + i + 1..(i + 1) * lk] {
                        *v = *v + fill;
                    }
                }
            }
            out
        });
        Ok(self.push(
            Tensor::from_parts(Shape::new(dims)?, out),
            Op::PassThrough { x: ix },
            self.needs(&[ix]),
        ))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (tx, tg, tb) = (self.val(ix), self.val(ig), self.val(ib));
        let n = tx.shape_obj().last();
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let res = self.timed(OpCategory::LayerNorm, || {
            tensor::layer_norm_forward(tx.data(), n, tg.data(), tb.data(), E::of(eps))
        });
        let value = Tensor::from_parts(tx.shape_obj().clone(), res.out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat: res.xhat,
                rstd: res.rstd,
            },
            self.needs(&[ix, ig, ib]),
        ))
    }

    /// Mean cross-entropy (nats) of `logits` (`N x V`) against `targets`;
    /// rows with a `false` mask entry are excluded from the mean.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let il = self.check(logits)?;
        let tl = self.val(il);
        let (rows, vocab) = tl.dims2()?;
        if targets.len() != rows || mask.is_some_and(|m| m.len() != rows) {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        tensor::check_targets(targets, vocab)?;
        let active = mask.map_or(rows, |m| m.iter().filter(|&&b| b).count());
        let inv = if active == 0 {
            E::zero()
        } else {
            E::one() / E::of(active as f64)
        };
        let weights: Vec<E> = (0..rows)
            .map(|r| {
                if mask.is_none_or(|m| m[r]) {
                    inv
                } else {
                    E::zero()
                }
            })
            .collect();
        let (loss, probs) = self.timed(OpCategory::Other, || {
            let mut probs = tl.data().to_vec();
            let mut loss = E::zero();
            for (r, row) in probs.chunks_mut(vocab).enumerate() {
                let lse = tensor::log_sum_exp(row);
                if weights[r] != E::zero() {
                    loss = loss + (lse - row[targets[r]]) * weights[r];
                }
                row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            (loss, probs)
        });
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                probs,
                targets: targets.to_vec(),
                weights,
            },
            self.needs(&[il]),
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.timed(OpCategory::Other, || Tensor::scalar(self.val(ix).sum()));
        Ok(self.push(out, Op::Sum { x: ix }, self.needs(&[ix])))
    }

    /// Row lookup: `table` is `V x d`; output shape is `lead ++ [d]`.
    pub fn embedding(&self, table: Var, ids: &[u32], lead: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tt = self.val(it);
        let (vocab, d) = tt.dims2()?;
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", lead, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad as usize,
                bound: vocab,
            });
        }
        let out = self.timed(OpCategory::Other, || {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                let i = i as usize;
                out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
            }
            out
        });
        let mut dims = lead.to_vec();
        dims.push(d);
        Ok(self.push(
            Tensor::from_parts(Shape::new(dims)?, out),
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            self.needs(&[it]),
        ))
    }

    /// Swaps the first two axes of a rank-3 value.
    pub fn swap01(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = self.val(ix);
        let out = self.timed(OpCategory::Transpose, || tx.swap01())?;
        Ok(self.push(out, Op::Swap01 { x: ix }, self.needs(&[ix])))
    }

    /// Concatenation along axis 1 of two rank-3 values.
    pub fn concat1(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let out = self.timed(OpCategory::Transpose, || ta.concat1(&tb))?;
        Ok(self.push(out, Op::Concat1 { a: ia, b: ib }, self.needs(&[ia, ib])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.timed(OpCategory::Transpose, || {
            self.val(ix).reshape(shape.to_vec())
        })?;
        Ok(self.push(out, Op::PassThrough { x: ix }, self.needs(&[ix])))
    }

    /// Inverted dropout; the identity when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        let ix = self.check(x)?;
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Usage(format!("dropout probability {p} must be < 1")));
        }
        let tx = self.val(ix);
        let keep = E::of(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..tx.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self.timed(OpCategory::Other, || {
            tx.data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect::<Vec<_>>()
        });
        Ok(self.push(
            Tensor::from_parts(tx.shape_obj().clone(), out),
            Op::Dropout { x: ix, mask },
            self.needs(&[ix]),
        ))
    }

    /// Fused elementwise recurrence. `u` is `L x B x 3d`, `x` is `L x B x d`,
    /// `params` are `[v_f, v_r, b_f, b_r]` and `c0` is the carried state
    /// (`B x d`, never differentiated). Returns `h` and the detached final
    /// state.
    pub fn sru(
        &self,
        u: Var,
        x: Var,
        params: [Var; 4],
        c0: &Tensor<E>,
    ) -> Result<(Var, Tensor<E>)> {
        let (iu, ix) = (self.check(u)?, self.check(x)?);
        let mut ip = [0usize; 4];
        for (slot, p) in ip.iter_mut().zip(params) {
            *slot = self.check(p)?;
        }
        let rp = RecurrenceParams {
            v_f: self.val(ip[0]),
            v_r: self.val(ip[1]),
            b_f: self.val(ip[2]),
            b_r: self.val(ip[3]),
        };
        let (tu, tx) = (self.val(iu), self.val(ix));
        let needs = self.needs(&[iu, ix, ip[0], ip[1], ip[2], ip[3]]);
        let out = self.timed(OpCategory::Recurrence, || {
            kernel::sru_forward_fused(&tu, &tx, &rp, c0, needs)
        })?;
        let op = match out.cache {
            Some(cache) => Op::Sru {
                u: iu,
                x: ix,
                params: ip,
                c0: c0.clone(),
                cache,
            },
            None => Op::Leaf,
        };
        Ok((self.push(out.h, op, needs), out.c_last))
    }

    /// Reverse replay from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let il = self.check(loss)?;
        if !self.grad_enabled {
            return Err(Error::Usage(
                "backward on a tape recorded without gradients".into(),
            ));
        }
        if self.consumed.replace(true) {
            return Err(Error::Usage(
                "tape already consumed by a previous backward".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![E::one()]);

        for id in (0..=il).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.timed(OpCategory::Other, || {
                backward_node(&nodes, node, &g, &mut grads)
            });
        }

        let shapes = nodes.iter().map(|n| n.value.shape_obj().clone()).collect();
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::from_parts(n.value.shape_obj().clone(), g))
                }
                (Op::Leaf, None) if n.requires_grad => {
                    Some(Tensor::zeros(n.value.shape_obj().clone()))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Logit offset applied to masked attention positions.
pub const MASK_VALUE: f64 = -1e30;

fn acc<'a, E: Element>(
    grads: &'a mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    id: usize,
) -> Option<&'a mut Vec<E>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![E::zero(); len]))
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn backward_node<E: Element>(
    nodes: &[Node<E>],
    node: &Node<E>,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) {
    let v = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = nodes[*a].value.dims2().expect("rank 2");
            let n = nodes[*b].value.shape()[1];
            if let Some(da) = acc(grads, nodes, *a) {
                gemm(m, n, k, g, false, v(*b), true, da, true);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                gemm(k, m, n, v(*a), true, g, false, db, true);
            }
        }
        Op::Linear { x, w, bias } => {
            let (n_out, n_in) = nodes[*w].value.dims2().expect("rank 2");
            let rows = nodes[*x].value.len() / n_in.max(1);
            if let Some(dx) = acc(grads, nodes, *x) {
                gemm(rows, n_out, n_in, g, false, v(*w), false, dx, true);
            }
            if let Some(dw) = acc(grads, nodes, *w) {
                gemm(n_out, rows, n_in, g, true, v(*x), false, dw, true);
            }
            if let Some(b) = bias {
                if let Some(db) = acc(grads, nodes, *b) {
                    for row in g.chunks(n_out.max(1)) {
                        add_into(db, row);
                    }
                }
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (nb, m, k) = nodes[*a].value.dims3().expect("rank 3");
            let n = node.value.shape()[2];
            let (sa, sb, sg) = (m * k, k * n, m * n);
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..nb {
                    let gi = &g[i * sg..(i + 1) * sg];
                    let bi = &v(*b)[i * sb..(i + 1) * sb];
                    // dA = G B^T (B stored k x n) or G B (B stored n x k)
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        bi,
                        !*trans_b,
                        &mut da[i * sa..(i + 1) * sa],
                        true,
                    );
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for i in 0..nb {
                    let gi = &g[i * sg..(i + 1) * sg];
                    let ai = &v(*a)[i * sa..(i + 1) * sa];
                    let dbi = &mut db[i * sb..(i + 1) * sb];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, dbi, true);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dbi, true);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
            }
        }
        Op::Mul { a, b } => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, &gi), &bv) in da.iter_mut().zip(g).zip(v(*b)) {
                    *d = *d + gi * bv;
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for ((d, &gi), &av) in db.iter_mut().zip(g).zip(v(*a)) {
                    *d = *d + gi * av;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *c);
            }
        }
        Op::ScaleBy { x, s } => {
            let sv = v(*s)[0];
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * sv);
            }
            if let Some(ds) = acc(grads, nodes, *s) {
                let dot: E = g.iter().zip(v(*x)).map(|(&gi, &xv)| gi * xv).sum();
                ds[0] = ds[0] + dot;
            }
        }
        Op::Sigmoid { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d = *d + gi * y * (E::one() - y);
                }
            }
        }
        Op::Softmax { x } => {
            let n = node.value.shape_obj().last();
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((drow, grow), yrow) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(node.value.data().chunks(n))
                {
                    let dot: E = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + y * (gi - dot);
                    }
                }
            }
        }
        Op::PassThrough { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = node.value.shape_obj().last();
            let gv = v(*gain);
            if let Some(dg) = acc(grads, nodes, *gain) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((d, &gi), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d = *d + gi * h;
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for grow in g.chunks(n) {
                    add_into(db, grow);
                }
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                let nf = E::of(n as f64);
                for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<E> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let sum_dh: E = dh.iter().copied().sum();
                    let sum_dh_h: E = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                    let scale = rstd[r] / nf;
                    for i in 0..n {
                        drow[i] = drow[i] + scale * (nf * dh[i] - sum_dh - hrow[i] * sum_dh_h);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
        } => {
            let vocab = nodes[*logits].value.shape()[1];
            let gs = g[0];
            if let Some(dl) = acc(grads, nodes, *logits) {
                for (r, (drow, prow)) in dl.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate() {
                    let w = weights[r] * gs;
                    if w == E::zero() {
                        continue;
                    }
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = *d + p * w;
                    }
                    drow[targets[r]] = drow[targets[r]] - w;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(dt) = acc(grads, nodes, *table) {
                for (row, &i) in g.chunks(d).zip(ids) {
                    let i = i as usize;
                    add_into(&mut dt[i * d..(i + 1) * d], row);
                }
            }
        }
        Op::Swap01 { x } => {
            let (a, b, c) = nodes[*x].value.dims3().expect("rank 3");
            if let Some(dx) = acc(grads, nodes, *x) {
                let mut back = vec![E::zero(); g.len()];
                tensor::swap01_into(g, b, a, c, &mut back);
                add_into(dx, &back);
            }
        }
        Op::Concat1 { a, b } => {
            let (n0, la, c) = nodes[*a].value.dims3().expect("rank 3");
            let lb = nodes[*b].value.shape()[1];
            let total = la + lb;
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..n0 {
                    add_into(
                        &mut da[i * la * c..(i + 1) * la * c],
                        &g[i * total * c..(i * total + la) * c],
                    );
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for i in 0..n0 {
                    add_into(
                        &mut db[i * lb * c..(i + 1) * lb * c],
                        &g[(i * total + la) * c..(i + 1) * total * c],
                    );
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d = *d + gi * m;
                }
            }
        }
        Op::Sru {
            u,
            x,
            params,
            c0,
            cache,
        } => {
            let rp = RecurrenceParams {
                v_f: nodes[params[0]].value.clone(),
                v_r: nodes[params[1]].value.clone(),
                b_f: nodes[params[2]].value.clone(),
                b_r: nodes[params[3]].value.clone(),
            };
            let dh = Tensor::from_parts(node.value.shape_obj().clone(), g.to_vec());
            let out = kernel::sru_backward_fused(
                Some(cache),
                &nodes[*u].value,
                &nodes[*x].value,
                &rp,
                c0,
                &dh,
                None,
            )
            .expect("recurrence backward on recorded shapes");
            let pairs: [(usize, &Tensor<E>); 6] = [
                (*u, &out.du),
                (*x, &out.dx),
                (params[0], &out.dv_f),
                (params[1], &out.dv_r),
                (params[2], &out.db_f),
                (params[3], &out.db_r),
            ];
            for (id, t) in pairs {
                if let Some(d) = acc(grads, nodes, id) {
                    add_into(d, t.data());
                }
            }
        }
    }
}
