use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        mul: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    AddConst {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    ScatterAdd {
        x: Var,
        index: Rc<[usize]>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<'p, T: Clone> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (if cols == 0 { 0 } else { numel / cols }, cols)
}

fn acc_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph over a parameter set, gradients enabled, dropout disabled.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    /// Graph without parameters, for free-standing computations.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    /// Graph for inference: no gradient bookkeeping, dropout disabled.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    /// Enables dropout with masks drawn from a seeded stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a node with {} elements", val.len());
        val[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    fn push(&mut self, value: Cow<'p, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(Cow::Owned(data), shape, Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Free leaf; tracked when the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(Cow::Owned(data), shape, Op::Leaf, rg)
    }

    /// Node for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let params = self.params.expect("graph has no parameter set");
        let t = params.get(id);
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        self.param_vars.insert(id, v);
        v
    }

    /// `a @ b` where `a` is `[.., k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` where `a` is `[.., k]` and `b` is `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.is_empty() || sb.len() != 2 {
            return shape_err(op, format!("{sa:?} x {sb:?}"));
        }
        let (m, k) = rows_of(&sa);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(op, format!("{sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let am = MatRef::new(self.value(a), m, k);
            let bm = MatRef::new(self.value(b), sb[0], sb[1]);
            gemm(am, if trans_b { bm.t() } else { bm }, T::zero(), &mut out);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), shape, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Element-wise sum. `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", format!("{sa:?} + {sb:?}"));
        }
        let shape = sa.to_vec();
        let bv = self.value(b);
        let out: Vec<T> = if bv.is_empty() {
            self.value(a).to_vec()
        } else {
            self.value(a)
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Add { a, b }, ng))
    }

    /// Element-wise product of equally shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Mul { a, b }, ng))
    }

    /// `mul * x + add`, element-wise with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let out = self.value(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Affine { x, mul }, ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by", format!("scale has shape {:?}", self.shape(s)));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(Cow::Owned(out), shape, Op::ScaleBy { x, s }, ng))
    }

    /// Adds a constant (e.g. an attention mask of `0` / `-inf`).
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return shape_err(
                "add_const",
                format!("{:?} + constant of {} values", self.shape(x), c.len()),
            );
        }
        let out = self
            .value(x)
            .iter()
            .zip(c)
            .map(|(&v, &b)| v + b)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::AddConst { x }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Cow::Owned(vec![s]), vec![], Op::Sum { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape { x }, ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return shape_err("concat", format!("{base:?} vs {s:?} along axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
                outer,
                inner,
            },
            ng,
        ))
    }

    /// Row lookup: `table[ids[i]]` for each id, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return shape_err("embedding", format!("table shape {st:?}"));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("embedding", format!("id {bad} out of range for {v} rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` become zeros.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(x));
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x }, ng))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = rows_of(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            );
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Relu { x }, ng)
    }

    /// Logistic sigmoid. Outputs are kept one machine epsilon inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let s = if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                };
                s.max(lo).min(hi)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Sigmoid { x }, ng)
    }

    /// Mean of the rows of `x` (`[n, d]`) whose mask entry is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != mask.len() {
            return shape_err("masked_mean", format!("{s:?} with mask of {}", mask.len()));
        }
        let d = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Validation(
                "masked_mean over a fully masked input".into(),
            ));
        }
        let cn = T::from_usize(count).unwrap();
        let mut out = vec![T::zero(); d];
        for (row, _) in self.value(x).chunks(d).zip(mask).filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= cn);
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(out),
            vec![d],
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    ///
    /// `logits` is `[.., vocab]` with one target per row. Rows whose target
    /// equals `ignore_id` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: Option<usize>,
    ) -> Result<Var> {
        let (rows, v) = rows_of(self.shape(logits));
        if rows != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", self.shape(logits), targets.len()),
            );
        }
        let mut tg = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == ignore_id {
                tg.push(None);
            } else if t >= v {
                return Err(TensorError::Validation(format!(
                    "target {t} outside vocabulary of {v}"
                )));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Validation(
                "cross_entropy: every position is ignored".into(),
            ));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, t) in probs.chunks_mut(v).zip(&tg) {
            let Some(t) = *t else { continue };
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += (lse - row[t]).as_f64();
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = T::from_f64_lossy(total / count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Columns `start..end` of a `[m, n]` node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start > end || end > s[1] {
            return shape_err("slice_cols", format!("{s:?} columns {start}..{end}"));
        }
        let (m, n) = (s[0], s[1]);
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![m, w], Op::SliceCols { x, start }, ng))
    }

    /// `out[k] = x[index[k]]` over flattened storage.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= n) {
            return shape_err(
                "gather",
                format!("{} indices into {:?} for shape {shape:?}", index.len(), self.shape(x)),
            );
        }
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Gather { x, index }, ng))
    }

    /// `out[index[k]] += x[k]` over flattened storage; the adjoint of [`Self::gather`].
    pub fn scatter_add(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if index.len() != self.value(x).len() || index.iter().any(|&i| i >= n) {
            return shape_err(
                "scatter_add",
                format!("{} indices from {:?} into {shape:?}", index.len(), self.shape(x)),
            );
        }
        let mut out = vec![T::zero(); n];
        for (&i, &v) in index.iter().zip(self.value(x)) {
            out[i] += v;
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::ScatterAdd { x, index }, ng))
    }

    /// Inverted dropout. Identity unless the graph was built with a dropout seed.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Dropout { x, mask }, ng)
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_params = self.params.map_or(0, ParamSet::len);
        let mut out = Gradients {
            params: vec![None; n_params],
            leaves: HashMap::new(),
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    out.params[id.0] = Some(g);
                }
                op => self.backprop(op, node, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op<T>, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let len = |v: Var| self.nodes[v.0].value.len();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k) = rows_of(sa);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let gm = MatRef::new(g, m, n);
                let bm = MatRef::new(val(*b), sb[0], sb[1]);
                let am = MatRef::new(val(*a), m, k);
                if self.ng(*a) {
                    let ga = acc_into(&mut grads[a.0], m * k);
                    // dA = dC Bᵀ, or dC B when the forward used Bᵀ
                    gemm(gm, if *trans_b { bm } else { bm.t() }, T::one(), ga);
                }
                if self.ng(*b) {
                    let gb = acc_into(&mut grads[b.0], sb[0] * sb[1]);
                    if *trans_b {
                        gemm(gm.t(), am, T::one(), gb);
                    } else {
                        gemm(am.t(), gm, T::one(), gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if self.ng(*b) {
                    let nb = len(*b);
                    let gb = acc_into(&mut grads[b.0], nb);
                    if nb > 0 {
                        for row in g.chunks(nb) {
                            gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let bv = val(*b);
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if self.ng(*b) {
                    let av = val(*a);
                    let gb = acc_into(&mut grads[b.0], g.len());
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Affine { x, mul } => {
                let gx = acc_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += *mul * b);
            }
            Op::ScaleBy { x, s } => {
                let c = val(*s)[0];
                if self.ng(*x) {
                    let gx = acc_into(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += c * b);
                }
                if self.ng(*s) {
                    let dot: T = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                    acc_into(&mut grads[s.0], 1)[0] += dot;
                }
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                let gx = acc_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Sum { x } => {
                let gx = acc_into(&mut grads[x.0], len(*x));
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Concat {
                parts,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if self.ng(p) {
                        let chunk = sz * inner;
                        let gp = acc_into(&mut grads[p.0], outer * chunk);
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset..][..chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += sz * inner;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let gt = acc_into(&mut grads[table.0], len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::Softmax { x } => {
                let (_, cols) = rows_of(&node.shape);
                let y = &node.value;
                let gx = acc_into(&mut grads[x.0], g.len());
                for ((gr, yr), gxr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let gv = val(*gain);
                if self.ng(*gain) {
                    let gg = acc_into(&mut grads[gain.0], d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = acc_into(&mut grads[bias.0], d);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.ng(*x) {
                    let gx = acc_into(&mut grads[x.0], g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let is = inv_std[r];
                        for c in 0..d {
                            gx[r * d + c] += is * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let gx = acc_into(&mut grads[x.0], g.len());
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *a += gi;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let gx = acc_into(&mut grads[x.0], g.len());
                for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y.iter()) {
                    *a += gi * yi * (T::one() - yi);
                }
            }
            Op::MaskedMean { x, mask, count } => {
                let d = g.len();
                let cn = T::from_usize(*count).unwrap();
                let gx = acc_into(&mut grads[x.0], len(*x));
                for (row, _) in gx.chunks_mut(d).zip(mask).filter(|(_, &m)| m) {
                    row.iter_mut().zip(g).for_each(|(a, &b)| *a += b / cn);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, v) = rows_of(&self.nodes[logits.0].shape);
                let scale = g[0] / T::from_usize(*count).unwrap();
                let gl = acc_into(&mut grads[logits.0], probs.len());
                for ((gr, pr), t) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                    let Some(t) = *t else { continue };
                    for (a, &p) in gr.iter_mut().zip(pr) {
                        *a += scale * p;
                    }
                    gr[t] -= scale;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[x.0].shape[1];
                let w = node.shape[1];
                let gx = acc_into(&mut grads[x.0], len(*x));
                for (r, gr) in g.chunks(w.max(1)).enumerate().take(node.shape[0]) {
                    if w == 0 {
                        break;
                    }
                    gx[r * n + start..r * n + start + w]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::Gather { x, index } => {
                let gx = acc_into(&mut grads[x.0], len(*x));
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
            }
            Op::ScatterAdd { x, index } => {
                let gx = acc_into(&mut grads[x.0], len(*x));
                for (a, &i) in gx.iter_mut().zip(index.iter()) {
                    *a += g[i];
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc_into(&mut grads[x.0], g.len());
                for ((a, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gi * m;
                }
            }
        }
    }
}

/// Numerically stable softmax of one row; an all `-inf` row becomes zeros.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
