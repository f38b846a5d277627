//! Reverse-mode differentiation over a linear record of tensor ops.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! record from the loss back to index 0, so gradients are produced in exact
//! reverse recording order. Each op also adds its analytical flop cost to a
//! running tally (`2·m·k·n` per matmul, one flop per output element for
//! elementwise ops, normalizations and nonlinearities, nothing for pure data
//! movement).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor. `grad` is present iff `requires_grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Some(Tensor::zeros(value.shape()));
        Self {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        self.grad = if flag {
            Some(Tensor::zeros(self.value.shape()))
        } else {
            None
        };
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Adds this parameter's gradient from `grads`, if the tape saw it.
    pub fn accumulate_grad(&mut self, grads: &Gradients<S>) {
        if let (Some(g), Some(src)) = (self.grad.as_mut(), grads.param(&self.name)) {
            for (a, b) in g.data_mut().iter_mut().zip(src) {
                *a += *b;
            }
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBcast {
        x: Var,
        y: Var,
    },
    Sub {
        x: Var,
        y: Var,
    },
    Mul {
        x: Var,
        y: Var,
    },
    Scale {
        x: Var,
        s: S,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Permute0213 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    NarrowRows {
        x: Var,
        start: usize,
    },
    MaskedMeanPool {
        x: Var,
        weights: Vec<S>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Dot {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[S]> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Names of parameters that received a gradient.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, v)| self.get(**v).is_some())
            .map(|(k, _)| k.as_str())
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .values()
            .filter_map(|&v| self.get(v))
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum();
        Float::sqrt(sq)
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    flops: u64,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let g = slot.get_or_insert_with(|| vec![S::zero(); len]);
    f(g);
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Flops tallied by every op recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Repeated calls with the same name
    /// return the same node, so a parameter used twice is one leaf.
    pub fn param(&mut self, p: &Param<S>) -> Var {
        if let Some(&v) = self.params.get(p.name()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.requires_grad());
        self.params.insert(p.name().into(), v);
        v
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product over all leading axes: `[.., m, k] · [.., k, n]`, or
    /// with `trans_b` `[.., m, k] · [.., n, k]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                let a_t = &av[t * m * k..(t + 1) * m * k];
                let b_t = &bv[t * k * n..(t + 1) * k * n];
                let c_t = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(a_t, b_t, c_t, m, k, n);
                } else {
                    gemm_acc(a_t, b_t, c_t, m, k, n);
                }
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias rows,
    /// positional tables, or equal shapes).
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add", sx, sy));
        }
        let inner = self.value(y).numel();
        let yv = self.value(y).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + yv[i % inner])
            .collect();
        let shape = sx.to_vec();
        self.flops += out.len() as u64;
        let rg = self.rg(&[x, y]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddBcast { x, y }))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("add", self.shape(x), self.shape(y))?;
        self.add_bcast(x, y)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("sub", self.shape(x), self.shape(y))?;
        let out = self.zip_values(x, y, |a, b| a - b);
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, rg, Op::Sub { x, y }))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("mul", self.shape(x), self.shape(y))?;
        let out = self.zip_values(x, y, |a, b| a * b);
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, rg, Op::Mul { x, y }))
    }

    fn zip_values(&mut self, x: Var, y: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (xv, yv) = (self.value(x), self.value(y));
        let data = xv.data().iter().zip(yv.data()).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.flops += t.numel() as u64;
        t
    }

    fn map_value(&mut self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.flops += t.numel() as u64;
        t
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.map_value(x, |a| a * s);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale { x, s })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map_value(x, gelu);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map_value(x, |a| if a > S::zero() { a } else { S::zero() });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gain)));
        }
        let eps = S::from_f64(eps);
        let dn = S::from_f64(d as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) / dn;
            let var = row.iter().fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.flops += out.len() as u64;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the trailing axis. With `key_mask` (`[B, T]`, `true` =
    /// attendable) the input must be `[B, .., T]`; masked entries get
    /// probability exactly zero.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let t = *sx.last().unwrap();
        let total = self.value(x).numel();
        let rows = total / t;
        let rows_per_batch = match key_mask {
            Some(m) => {
                let b = sx[0];
                if m.len() != b * t {
                    return Err(Error::shape("softmax mask", &sx, &[m.len()]));
                }
                rows / b
            }
            None => rows,
        };
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); total];
        for r in 0..rows {
            let row = &xv[r * t..(r + 1) * t];
            let live = |j: usize| key_mask.is_none_or(|m| m[(r / rows_per_batch) * t + j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if live(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::data("softmax row with every key masked"));
            }
            let o = &mut out[r * t..(r + 1) * t];
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if live(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        self.flops += total as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, rg, Op::Softmax { x }))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &sl, &[labels.len()]));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); b * c];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp());
            let lse = max + sum.ln();
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss = loss / S::from_f64(b as f64);
        self.flops += (b * c) as u64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of zero parts"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != *lead {
                return Err(Error::shape("concat_last", self.shape(first), sp));
            }
            widths.push(*sp.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// Trailing-axis columns `start..start + len`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let w = *sx.last().unwrap();
        if len == 0 || start + len > w {
            return Err(Error::Index {
                op: "slice_last",
                index: start + len,
                bound: w,
            });
        }
        let rows = self.value(x).numel() / w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * w + start..r * w + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SliceLast { x, start }))
    }

    /// Splits the trailing axis into `parts` equal pieces.
    pub fn split_last(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let w = self.value(x).last_dim();
        if parts == 0 || !w.is_multiple_of(parts) {
            return Err(Error::shape("split_last", self.shape(x), &[parts]));
        }
        let piece = w / parts;
        (0..parts).map(|k| self.slice_last(x, k * piece, piece)).collect()
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("permute_0213", &sx, &[4]));
        }
        let out = permute_0213(self.value(x).data(), [sx[0], sx[1], sx[2], sx[3]]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![sx[0], sx[2], sx[1], sx[3]], out)?,
            rg,
            Op::Permute0213 { x },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    /// Row lookup: `table[V, d]` indexed by `ids` shaped `id_shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &st, id_shape));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow0(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::NarrowRows { x, start }))
    }

    /// Masked mean over axis 1 of `[B, T, d]`; `mask` is `[B, T]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || mask.len() != sx[0] * sx[1] {
            return Err(Error::shape("masked_mean_pool", &sx, &[mask.len()]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mut weights = vec![S::zero(); b * t];
        for r in 0..b {
            let count = mask[r * t..(r + 1) * t].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::data("pooling over a row with no unmasked position"));
            }
            let w = S::one() / S::from_f64(count as f64);
            for j in 0..t {
                if mask[r * t + j] {
                    weights[r * t + j] = w;
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); b * d];
        for r in 0..b {
            for j in 0..t {
                let w = weights[r * t + j];
                if w == S::zero() {
                    continue;
                }
                let src = &xv[(r * t + j) * d..(r * t + j + 1) * d];
                for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        self.flops += (b * t * d) as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, rg, Op::MaskedMeanPool { x, weights }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Index {
                op: "mean_axis",
                index: axis,
                bound: sx.len(),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let scale = S::one() / S::from_f64(len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape: Vec<usize> = sx[..axis].iter().chain(&sx[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.flops += xv.len() as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MeanAxis { x, outer, len, inner }))
    }

    /// Row-wise dot product over the trailing axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", self.shape(a), self.shape(b))?;
        let sa = self.shape(a).to_vec();
        let d = *sa.last().unwrap();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<S> = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| x.iter().zip(y).fold(S::zero(), |acc, (&p, &q)| acc + p * q))
            .collect();
        let mut shape = sa[..sa.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.flops += 2 * av.len() as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Dot { a, b }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let s = xv.iter().fold(S::zero(), |acc, &v| acc + v);
        self.flops += xv.len() as u64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { x })
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(i, g, lo);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[S], lo: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    accumulate(&mut lo[a.0], m * k, |da| gemm_nt_acc(g, val(b), da, m, n, k));
                }
                if wants(b) {
                    accumulate(&mut lo[b.0], k * n, |db| gemm_tn_acc(val(a), g, db, k, m, n));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if wants(a) {
                    accumulate(&mut lo[a.0], batch * m * k, |da| {
                        for t in 0..batch {
                            let g_t = &g[t * m * n..(t + 1) * m * n];
                            let b_t = &val(b)[t * k * n..(t + 1) * k * n];
                            let da_t = &mut da[t * m * k..(t + 1) * m * k];
                            if trans_b {
                                gemm_acc(g_t, b_t, da_t, m, n, k);
                            } else {
                                gemm_nt_acc(g_t, b_t, da_t, m, n, k);
                            }
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut lo[b.0], batch * k * n, |db| {
                        for t in 0..batch {
                            let g_t = &g[t * m * n..(t + 1) * m * n];
                            let a_t = &val(a)[t * m * k..(t + 1) * m * k];
                            let db_t = &mut db[t * k * n..(t + 1) * k * n];
                            if trans_b {
                                gemm_tn_acc(g_t, a_t, db_t, n, m, k);
                            } else {
                                gemm_tn_acc(a_t, g_t, db_t, k, m, n);
                            }
                        }
                    });
                }
            }
            &Op::AddBcast { x, y } => {
                if wants(x) {
                    accumulate(&mut lo[x.0], g.len(), |dx| add_into(dx, g));
                }
                if wants(y) {
                    let inner = numel(y);
                    accumulate(&mut lo[y.0], inner, |dy| {
                        for (j, &gv) in g.iter().enumerate() {
                            dy[j % inner] += gv;
                        }
                    });
                }
            }
            &Op::Sub { x, y } => {
                if wants(x) {
                    accumulate(&mut lo[x.0], g.len(), |dx| add_into(dx, g));
                }
                if wants(y) {
                    accumulate(&mut lo[y.0], g.len(), |dy| {
                        dy.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv)
                    });
                }
            }
            &Op::Mul { x, y } => {
                if wants(x) {
                    accumulate(&mut lo[x.0], g.len(), |dx| {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(val(y)) {
                            *d += gv * yv;
                        }
                    });
                }
                if wants(y) {
                    accumulate(&mut lo[y.0], g.len(), |dy| {
                        for ((d, &gv), &xv) in dy.iter_mut().zip(g).zip(val(x)) {
                            *d += gv * xv;
                        }
                    });
                }
            }
            &Op::Scale { x, s } => {
                accumulate(&mut lo[x.0], g.len(), |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * s)
                });
            }
            &Op::Gelu { x } => {
                accumulate(&mut lo[x.0], g.len(), |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                        *d += gv * gelu_grad(xv);
                    }
                });
            }
            &Op::Relu { x } => {
                accumulate(&mut lo[x.0], g.len(), |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                        if xv > S::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain.0].value.numel();
                let gv = val(gain);
                if wants(x) {
                    let dn = S::from_f64(d as f64);
                    accumulate(&mut lo[x.0], g.len(), |dx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = S::zero();
                            let mut mean_dh_h = S::zero();
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh = mean_dh / dn;
                            mean_dh_h = mean_dh_h / dn;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                dx[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if wants(gain) {
                    accumulate(&mut lo[gain.0], d, |dg| {
                        for (j, (&gr, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                            dg[j % d] += gr * h;
                        }
                    });
                }
                if wants(bias) {
                    accumulate(&mut lo[bias.0], d, |db| {
                        for (j, &gr) in g.iter().enumerate() {
                            db[j % d] += gr;
                        }
                    });
                }
            }
            Op::Softmax { x, .. } => {
                let y = node.value.data();
                let t = node.value.last_dim();
                accumulate(&mut lo[x.0], g.len(), |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(t).zip(g.chunks(t)).zip(y.chunks(t)) {
                        let s = gr.iter().zip(yr).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                        for j in 0..t {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / S::from_f64(labels.len() as f64);
                accumulate(&mut lo[logits.0], probs.len(), |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { S::one() } else { S::zero() };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if wants(p) {
                        accumulate(&mut lo[p.0], rows * w, |dp| {
                            for r in 0..rows {
                                add_into(
                                    &mut dp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let w = nodes[x.0].value.last_dim();
                let rows = g.len() / len;
                accumulate(&mut lo[x.0], rows * w, |dx| {
                    for r in 0..rows {
                        add_into(&mut dx[r * w + start..r * w + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            &Op::Permute0213 { x } => {
                let s = node.value.shape();
                let back = permute_0213(g, [s[0], s[1], s[2], s[3]]);
                accumulate(&mut lo[x.0], g.len(), |dx| add_into(dx, &back));
            }
            &Op::Reshape { x } => {
                accumulate(&mut lo[x.0], g.len(), |dx| add_into(dx, g));
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                accumulate(&mut lo[table.0], numel(*table), |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            &Op::NarrowRows { x, start } => {
                let inner = g.len() / node.value.shape()[0];
                accumulate(&mut lo[x.0], numel(x), |dx| {
                    add_into(&mut dx[start * inner..start * inner + g.len()], g)
                });
            }
            Op::MaskedMeanPool { x, weights } => {
                let d = node.value.last_dim();
                let t = weights.len() / node.value.shape()[0];
                accumulate(&mut lo[x.0], numel(*x), |dx| {
                    for (bt, &w) in weights.iter().enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let b = bt / t;
                        for (o, &gv) in dx[bt * d..(bt + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d]) {
                            *o += w * gv;
                        }
                    }
                });
            }
            &Op::MeanAxis { x, outer, len, inner } => {
                let scale = S::one() / S::from_f64(len as f64);
                accumulate(&mut lo[x.0], outer * len * inner, |dx| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            &Op::Dot { a, b } => {
                let d = nodes[a.0].value.last_dim();
                for (src, other) in [(a, b), (b, a)] {
                    if wants(src) {
                        accumulate(&mut lo[src.0], numel(src), |ds| {
                            for (r, &gv) in g.iter().enumerate() {
                                for j in 0..d {
                                    ds[r * d + j] += gv * val(other)[r * d + j];
                                }
                            }
                        });
                    }
                }
            }
            &Op::SumAll { x } => {
                accumulate(&mut lo[x.0], numel(x), |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn permute_0213<S: Scalar>(x: &[S], [a, b, c, d]: [usize; 4]) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn layernorm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layernorm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let g3 = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let b3 = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let c = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = tape.layernorm(c, g3, b3, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(t(&[3, 2], &[0.3; 6]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 1, 1]).unwrap();
        assert!((tape.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);

        let peaked = tape.constant(t(&[2, 3], &[25.0, 0.0, 0.0, 0.0, 0.0, 30.0]));
        let l = tape.softmax_cross_entropy(peaked, &[0, 2]).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-8);

        assert!(matches!(
            tape.softmax_cross_entropy(peaked, &[0, 3]),
            Err(Error::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn split_inverts_concat_exactly() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f32 * 0.37 - 1.0));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f32).sin()));
        let c = tape.concat_last(&[a, b]).unwrap();
        let parts = tape.split_last(c, 2).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        let again = tape.concat_last(&parts).unwrap();
        assert_eq!(tape.value(again), tape.value(c));
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[5], |i| -(i as f32) - 0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.7).cos()));
        let mask = [true, true, false, true, false, false];
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y).data();
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v[2], 0.0);
        assert_eq!(&v[6..], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_param_is_one_leaf_and_grads_zero_after_reset() {
        let mut p = Param::new("w", Tensor::<f64>::from_fn(&[2], |i| i as f64 + 1.0));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.param("w").unwrap(), &[2.0, 4.0]);
        p.accumulate_grad(&grads);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        p.zero_grad();
        assert!(p.grad.as_ref().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flops_tally_matches_convention() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5);
        tape.gelu(c);
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5 + 15);
        tape.slice_last(c, 0, 2).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5 + 15);
    }
}
