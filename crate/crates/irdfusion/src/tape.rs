//! Tape-based reverse-mode differentiation over whole-tensor primitives.
//!
//! A `Tape` records one forward pass as an ordered list of primitive
//! operations; `backward` replays the adjoints in exact reverse order and
//! accumulates gradients into the bound parameters. The model here is a
//! short chain of large ops, so recording whole tensors (rather than
//! per-scalar nodes) keeps the tape small and the replay cheap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, layer_norm_with_stats, softmax_rows, Tensor};
use crate::tensor::{gelu_grad_scalar, gelu_scalar};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward/eval switch for stochastic ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor with its accumulated gradient.
///
/// `grad` always has the shape of `value`; it is all-zeros right after
/// construction or `zero_grads`, and `backward` adds into it.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    /// Group label used in gradient reports and checkpoint manifests.
    pub role: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of all parameters of one model instance.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, role: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            role: role.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Plain gradient-descent step: `value -= lr * grad` for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

/// Per-forward call counters, used by the harness to assert variant gating.
#[derive(Debug, Clone, Copy, Default)]
pub struct CallCounters {
    pub attention_map: u64,
    pub mfrm_forward: u64,
    pub dffm_step: u64,
}

enum Record {
    Leaf,
    Matmul { a: Var, b: Var },
    /// `a · bᵀ`
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { t: Var, bias: Var },
    ScaleConst { t: Var, c: f64 },
    AddConst { t: Var },
    ScaleByScalar { t: Var, s: Var },
    SoftmaxRows { t: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Dropout { t: Var, mask: Tensor },
    Gelu { t: Var },
    Exp { t: Var },
    Dot { a: Var, b: Var },
    Sum { t: Var },
    ConcatCols { a: Var, b: Var },
    BceWithLogitsMean { logits: Var, target: Tensor },
}

/// Recorded forward pass. Record `i` produced value `i`, so replaying the
/// records back-to-front visits operations in exact reverse recording order.
pub struct Tape {
    vals: Vec<Tensor>,
    recs: Vec<Record>,
    bindings: Vec<(Var, ParamId)>,
    adjoints: Vec<Option<Tensor>>,
    pub counters: CallCounters,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            recs: Vec::new(),
            bindings: Vec::new(),
            adjoints: Vec::new(),
            counters: CallCounters::default(),
        }
    }

    /// Drops every recorded operation and binding. A cleared tape
    /// contributes zero gradient to any parameter.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.recs.clear();
        self.bindings.clear();
        self.adjoints.clear();
        self.counters = CallCounters::default();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Adjoint of a value after `backward`; `None` when no gradient flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn num_ops(&self) -> usize {
        self.recs.len()
    }

    fn push(&mut self, rec: Record, val: Tensor) -> Var {
        self.vals.push(val);
        self.recs.push(rec);
        Var(self.vals.len() - 1)
    }

    /// Records a constant input. Gradients may flow into it but are only
    /// retrievable via `grad`, never accumulated into a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Record::Leaf, t)
    }

    /// Records a parameter value and binds the node, so `backward`
    /// accumulates into `Parameter::grad`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Record::Leaf, store.value(id).clone());
        self.bindings.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push(Record::Matmul { a, b }, out))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul_nt(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push(Record::MatmulNt { a, b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Record::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Record::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Record::Mul { a, b }, out))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    /// Adds a length-n bias vector to every row of an m×n tensor.
    pub fn add_bias(&mut self, t: Var, bias: Var) -> Result<Var> {
        let (tt, tb) = (&self.vals[t.0], &self.vals[bias.0]);
        if tt.ndim() != 2 || tb.len() != tt.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: tt.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, n) = (tt.rows(), tt.cols());
        let mut out = tt.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += tb.data()[j];
            }
        }
        Ok(self.push(Record::AddBias { t, bias }, out))
    }

    pub fn scale_const(&mut self, t: Var, c: f64) -> Var {
        let out = self.vals[t.0].map(|x| x * c);
        self.push(Record::ScaleConst { t, c }, out)
    }

    pub fn add_const(&mut self, t: Var, c: f64) -> Var {
        let out = self.vals[t.0].map(|x| x + c);
        self.push(Record::AddConst { t }, out)
    }

    /// Scales a tensor by a 1-element node; gradients flow into both.
    pub fn scale_by_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let sv = self.vals[s.0].scalar_value()?;
        let out = self.vals[t.0].map(|x| x * sv);
        Ok(self.push(Record::ScaleByScalar { t, s }, out))
    }

    pub fn softmax_rows(&mut self, t: Var) -> Result<Var> {
        let out = softmax_rows(&self.vals[t.0])?;
        Ok(self.push(Record::SoftmaxRows { t }, out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_with_stats(&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0], eps)?;
        Ok(self.push(Record::LayerNorm { x, gamma, beta, xhat, inv_std }, out))
    }

    /// Inverted dropout: zeros each element with probability `p` and scales
    /// survivors by 1/(1-p). Eval mode and p = 0 are exact identities.
    pub fn dropout(&mut self, t: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout_p", format!("must be in [0,1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(t);
        }
        let keep = 1.0 / (1.0 - p);
        let src = &self.vals[t.0];
        let mask_data: Vec<f64> = (0..src.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(src.shape().to_vec(), mask_data)?;
        let out_data = src.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(src.shape().to_vec(), out_data)?;
        Ok(self.push(Record::Dropout { t, mask }, out))
    }

    pub fn gelu(&mut self, t: Var) -> Var {
        let out = self.vals[t.0].map(gelu_scalar);
        self.push(Record::Gelu { t }, out)
    }

    /// Elementwise exponential. Overflow to a non-finite value is an error,
    /// so extreme inputs surface instead of propagating infinities.
    pub fn exp(&mut self, t: Var) -> Result<Var> {
        let out = self.vals[t.0].map(f64::exp);
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "exp" });
        }
        Ok(self.push(Record::Exp { t }, out))
    }

    /// Dot product of two equal-length tensors, yielding a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.len() != tb.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let v: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        Ok(self.push(Record::Dot { a, b }, Tensor::scalar(v)))
    }

    pub fn sum(&mut self, t: Var) -> Var {
        let v: f64 = self.vals[t.0].data().iter().sum();
        self.push(Record::Sum { t }, Tensor::scalar(v))
    }

    /// Column-wise concatenation of two m×n tensors.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, na, nb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::from_vec(vec![m, na + nb], data)?;
        Ok(self.push(Record::ConcatCols { a, b }, out))
    }

    /// Numerically stable mean binary cross-entropy between logits and a
    /// constant 0/1 target of the same shape. Returns a scalar node.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let z = &self.vals[logits.0];
        if z.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_mean",
                left: z.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = z.len() as f64;
        let mut acc = 0.0;
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(acc / n);
        Ok(self.push(Record::BceWithLogitsMean { logits, target }, out))
    }

    /// Replays adjoints in reverse recording order and accumulates
    /// `d(loss)/d(param)` into every bound parameter's grad. Repeated calls
    /// keep accumulating.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.vals[loss.0].shape().to_vec(),
            });
        }
        self.adjoints = vec![None; self.vals.len()];
        self.adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.recs.len()).rev() {
            let g = match self.adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(i, &g);
            self.adjoints[i] = Some(g);
        }

        for &(var, pid) in &self.bindings {
            if let Some(g) = &self.adjoints[var.0] {
                store.get_mut(pid).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: &Tensor) {
        match &mut self.adjoints[v.0] {
            Some(g) => {
                g.add_assign(delta).expect("adjoint shape drift");
            }
            slot => *slot = Some(delta.clone()),
        }
    }

    fn acc_with(&mut self, v: Var, shape: &[usize], fill: impl FnOnce(&mut Tensor)) {
        if self.adjoints[v.0].is_none() {
            self.adjoints[v.0] = Some(Tensor::zeros(shape));
        }
        fill(self.adjoints[v.0].as_mut().unwrap());
    }

    fn apply_vjp(&mut self, i: usize, g: &Tensor) {
        // Records are moved out one at a time so the adjoint buffers can be
        // mutated; the record is put back unchanged afterwards.
        let rec = std::mem::replace(&mut self.recs[i], Record::Leaf);
        match &rec {
            Record::Leaf => {}
            Record::Matmul { a, b } => {
                let (m, k) = (self.vals[a.0].rows(), self.vals[a.0].cols());
                let n = self.vals[b.0].cols();
                let bv = self.vals[b.0].clone();
                self.acc_with(*a, &[m, k], |da| {
                    // dA += G · Bᵀ
                    gemm_acc(m, n, k, 1.0, g.data(), [n as isize, 1], bv.data(), [1, n as isize], 1.0, da.data_mut());
                });
                let av = self.vals[a.0].clone();
                self.acc_with(*b, &[k, n], |db| {
                    // dB += Aᵀ · G
                    gemm_acc(k, m, n, 1.0, av.data(), [1, k as isize], g.data(), [n as isize, 1], 1.0, db.data_mut());
                });
            }
            Record::MatmulNt { a, b } => {
                let (m, k) = (self.vals[a.0].rows(), self.vals[a.0].cols());
                let n = self.vals[b.0].rows();
                let bv = self.vals[b.0].clone();
                self.acc_with(*a, &[m, k], |da| {
                    // dA += G · B
                    gemm_acc(m, n, k, 1.0, g.data(), [n as isize, 1], bv.data(), [k as isize, 1], 1.0, da.data_mut());
                });
                let av = self.vals[a.0].clone();
                self.acc_with(*b, &[n, k], |db| {
                    // dB += Gᵀ · A
                    gemm_acc(n, m, k, 1.0, g.data(), [1, n as isize], av.data(), [k as isize, 1], 1.0, db.data_mut());
                });
            }
            Record::Add { a, b } => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Record::Sub { a, b } => {
                self.acc(*a, g);
                let neg = g.map(|x| -x);
                self.acc(*b, &neg);
            }
            Record::Mul { a, b } => {
                let da = hadamard(g, &self.vals[b.0]);
                let db = hadamard(g, &self.vals[a.0]);
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Record::AddBias { t, bias } => {
                self.acc(*t, g);
                let n = self.vals[bias.0].len();
                let mut db = Tensor::zeros(self.vals[bias.0].shape());
                for (idx, &gv) in g.data().iter().enumerate() {
                    db.data_mut()[idx % n] += gv;
                }
                self.acc(*bias, &db);
            }
            Record::ScaleConst { t, c } => {
                let dt = g.map(|x| x * c);
                self.acc(*t, &dt);
            }
            Record::AddConst { t } => {
                self.acc(*t, g);
            }
            Record::ScaleByScalar { t, s } => {
                let sv = self.vals[s.0].data()[0];
                let dt = g.map(|x| x * sv);
                self.acc(*t, &dt);
                let ds: f64 = g.data().iter().zip(self.vals[t.0].data()).map(|(&gv, &tv)| gv * tv).sum();
                self.acc(*s, &Tensor::scalar(ds));
            }
            Record::SoftmaxRows { t } => {
                let s = &self.vals[i];
                let (m, n) = (s.rows(), s.cols());
                let mut dt = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let srow = s.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let inner: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for c in 0..n {
                        dt.data_mut()[r * n + c] = srow[c] * (grow[c] - inner);
                    }
                }
                self.acc(*t, &dt);
            }
            Record::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let gam = self.vals[gamma.0].clone();
                let mut dgamma = Tensor::zeros(&[n]);
                let mut dbeta = Tensor::zeros(&[n]);
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xh = xhat.row(r);
                    let mut gg = vec![0.0; n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..n {
                        dgamma.data_mut()[c] += gr[c] * xh[c];
                        dbeta.data_mut()[c] += gr[c];
                        gg[c] = gr[c] * gam.data()[c];
                        m1 += gg[c];
                        m2 += gg[c] * xh[c];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for c in 0..n {
                        dx.data_mut()[r * n + c] = inv_std[r] * (gg[c] - m1 - xh[c] * m2);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*gamma, &dgamma);
                self.acc(*beta, &dbeta);
            }
            Record::Dropout { t, mask } => {
                let dt = hadamard(g, mask);
                self.acc(*t, &dt);
            }
            Record::Gelu { t } => {
                let x = &self.vals[t.0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                let dt = Tensor::from_vec(x.shape().to_vec(), data).unwrap();
                self.acc(*t, &dt);
            }
            Record::Exp { t } => {
                let dt = hadamard(g, &self.vals[i]);
                self.acc(*t, &dt);
            }
            Record::Dot { a, b } => {
                let gs = g.data()[0];
                let da = self.vals[b.0].map(|x| x * gs);
                let db = self.vals[a.0].map(|x| x * gs);
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Record::Sum { t } => {
                let gs = g.data()[0];
                let dt = Tensor::full(self.vals[t.0].shape(), gs);
                self.acc(*t, &dt);
            }
            Record::ConcatCols { a, b } => {
                let (m, na) = (self.vals[a.0].rows(), self.vals[a.0].cols());
                let nb = self.vals[b.0].cols();
                let mut da = Tensor::zeros(&[m, na]);
                let mut db = Tensor::zeros(&[m, nb]);
                for r in 0..m {
                    let grow = &g.data()[r * (na + nb)..(r + 1) * (na + nb)];
                    da.data_mut()[r * na..(r + 1) * na].copy_from_slice(&grow[..na]);
                    db.data_mut()[r * nb..(r + 1) * nb].copy_from_slice(&grow[na..]);
                }
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Record::BceWithLogitsMean { logits, target } => {
                let gs = g.data()[0];
                let z = &self.vals[logits.0];
                let n = z.len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&zi, &yi)| gs * (sigmoid(zi) - yi) / n)
                    .collect();
                let dz = Tensor::from_vec(z.shape().to_vec(), data).unwrap();
                self.acc(*logits, &dz);
            }
        }
        self.recs[i] = rec;
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
