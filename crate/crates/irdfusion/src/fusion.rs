//! The fusion mechanism: mutual feature refinement between two modality
//! streams, differential feature feedback, and the K-step iteration loop.
//!
//! All forward functions here record onto a `Tape`, so one backward call
//! differentiates the whole composition. The module exposes its
//! intermediates (attention maps, value projections, gate scalars,
//! pre-norm refinements) because the relation oracle recomputes the same
//! quantities along an algebraically rearranged path and the two must agree.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pe::{flatten_pe, reshape_map, PeKind};
use crate::tape::{Mode, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// How the two refined streams recombine after the final iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Sum,
    ConcatProject,
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeMode::Sum => write!(f, "sum"),
            MergeMode::ConcatProject => write!(f, "concat_project"),
        }
    }
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<MergeMode> {
        match s {
            "sum" => Ok(MergeMode::Sum),
            "concat_project" => Ok(MergeMode::ConcatProject),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Hyper-parameters of one fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Model width; token sequences are N×d.
    pub d: usize,
    /// Hidden width of the feedback MLP.
    pub d_h: usize,
    /// Length of the gate vectors.
    #[serde(rename = "d_λ")]
    pub d_lambda: usize,
    /// Number of refinement iterations.
    #[serde(rename = "K")]
    pub k: usize,
    pub merge_mode: MergeMode,
    pub dropout_p: f64,
    pub pe: PeKind,
    /// Additive offset of the gate reparameterization.
    #[serde(rename = "λ_init")]
    pub lambda_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d: 8,
            d_h: 32,
            d_lambda: 8,
            k: 4,
            merge_mode: MergeMode::Sum,
            dropout_p: 0.1,
            pe: PeKind::Sinusoidal2d,
            lambda_init: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("K", "must be ≥ 1"));
        }
        if self.d < 1 {
            return Err(Error::invalid("d", "must be ≥ 1"));
        }
        if self.d_h < 1 {
            return Err(Error::invalid("d_h", "must be ≥ 1"));
        }
        if self.d_lambda < 1 {
            return Err(Error::invalid("d_λ", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", "must be in [0,1)"));
        }
        if self.pe == PeKind::Sinusoidal2d && self.d % 4 != 0 {
            return Err(Error::invalid("d", "sinusoidal 2-D encoding needs d divisible by 4"));
        }
        Ok(())
    }
}

/// Parameter handles of the mutual refinement module. Projections and gate
/// vectors exist per modality; `lambda_init` is a fixed offset, not learned.
#[derive(Debug, Clone)]
pub struct MfrmParams {
    pub wq_v: ParamId,
    pub wk_v: ParamId,
    pub wv_v: ParamId,
    pub wq_t: ParamId,
    pub wk_t: ParamId,
    pub wv_t: ParamId,
    pub lq1_v: ParamId,
    pub lk1_v: ParamId,
    pub lq2_v: ParamId,
    pub lk2_v: ParamId,
    pub lq1_t: ParamId,
    pub lk1_t: ParamId,
    pub lq2_t: ParamId,
    pub lk2_t: ParamId,
    pub lambda_init: f64,
}

/// Parameter handles of one differential-feedback module. Each stream owns
/// an independent copy.
#[derive(Debug, Clone)]
pub struct DffmParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub mu: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// All parameter handles of one fusion model.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub mfrm: MfrmParams,
    pub dffm_v: DffmParams,
    pub dffm_t: DffmParams,
    /// Present only in `concat_project` merge mode: (weight 2d×d, bias d).
    pub merge: Option<(ParamId, ParamId)>,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, bound: f64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

fn normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

impl MfrmParams {
    /// Registers and initializes the refinement module's parameters.
    /// Projections draw from U(−1/√d, 1/√d); gate vectors from N(0, 0.1²).
    pub fn init(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> MfrmParams {
        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        let proj = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            store.register(name, "attention_projection", uniform(rng, bound, &[d, d]))
        };
        let wq_v = proj(store, "wq_v", rng);
        let wk_v = proj(store, "wk_v", rng);
        let wv_v = proj(store, "wv_v", rng);
        let wq_t = proj(store, "wq_t", rng);
        let wk_t = proj(store, "wk_t", rng);
        let wv_t = proj(store, "wv_t", rng);

        let gate = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            store.register(name, "lambda_vectors", normal(rng, 0.1, &[cfg.d_lambda]))
        };
        let lq1_v = gate(store, "lambda_q1_v", rng);
        let lk1_v = gate(store, "lambda_k1_v", rng);
        let lq2_v = gate(store, "lambda_q2_v", rng);
        let lk2_v = gate(store, "lambda_k2_v", rng);
        let lq1_t = gate(store, "lambda_q1_t", rng);
        let lk1_t = gate(store, "lambda_k1_t", rng);
        let lq2_t = gate(store, "lambda_q2_t", rng);
        let lk2_t = gate(store, "lambda_k2_t", rng);

        MfrmParams {
            wq_v, wk_v, wv_v, wq_t, wk_t, wv_t,
            lq1_v, lk1_v, lq2_v, lk2_v, lq1_t, lk1_t, lq2_t, lk2_t,
            lambda_init: cfg.lambda_init,
        }
    }
}

impl DffmParams {
    /// Registers and initializes one feedback module's parameters.
    /// α, β, μ start at 1; the MLP output layer and every bias start at
    /// zero, so the first feedback step is exactly μ-scaling.
    pub fn init(store: &mut ParamStore, cfg: &FusionConfig, suffix: &str, rng: &mut ChaCha8Rng) -> DffmParams {
        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        DffmParams {
            alpha: store.register(format!("alpha_{suffix}"), "alpha", Tensor::scalar(1.0)),
            beta: store.register(format!("beta_{suffix}"), "beta", Tensor::scalar(1.0)),
            mu: store.register(format!("mu_{suffix}"), "mu", Tensor::scalar(1.0)),
            w1: store.register(format!("mlp_w1_{suffix}"), "mlp", uniform(rng, bound, &[d, cfg.d_h])),
            b1: store.register(format!("mlp_b1_{suffix}"), "mlp", Tensor::zeros(&[cfg.d_h])),
            w2: store.register(format!("mlp_w2_{suffix}"), "mlp", Tensor::zeros(&[cfg.d_h, d])),
            b2: store.register(format!("mlp_b2_{suffix}"), "mlp", Tensor::zeros(&[d])),
            ln_gamma: store.register(format!("ln_gamma_{suffix}"), "layer_norm", Tensor::full(&[d], 1.0)),
            ln_beta: store.register(format!("ln_beta_{suffix}"), "layer_norm", Tensor::zeros(&[d])),
        }
    }
}

/// Registers the merge projection when the mode needs one: (weight 2d×d,
/// bias d) for `concat_project`, nothing for `sum`.
pub fn init_merge(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Option<(ParamId, ParamId)> {
    match cfg.merge_mode {
        MergeMode::Sum => None,
        MergeMode::ConcatProject => {
            let mb = 1.0 / (2.0 * cfg.d as f64).sqrt();
            let w = store.register("merge_w", "merge_projection", uniform(rng, mb, &[2 * cfg.d, cfg.d]));
            let b = store.register("merge_b", "merge_projection", Tensor::zeros(&[cfg.d]));
            Some((w, b))
        }
    }
}

impl FusionParams {
    /// Registers and initializes every parameter of one fusion model:
    /// the shared refinement module, one feedback module per stream, and
    /// the merge projection when the merge mode calls for one.
    pub fn init(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<FusionParams> {
        cfg.validate()?;
        let mfrm = MfrmParams::init(store, cfg, rng);
        let dffm_v = DffmParams::init(store, cfg, "v", rng);
        let dffm_t = DffmParams::init(store, cfg, "t", rng);
        let merge = init_merge(store, cfg, rng);
        Ok(FusionParams { mfrm, dffm_v, dffm_t, merge })
    }
}

/// Per-call switches of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When set, both gate scalars are pinned to this constant and the gate
    /// vectors are never read, so no gradient reaches them.
    pub lambda_override: Option<f64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, lambda_override: None }
    }

    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, lambda_override: None }
    }
}

/// Q/K/V projection of one modality: three matmuls against the modality's
/// square weight matrices.
pub fn project_qkv(tape: &mut Tape, f: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(f, wq)?;
    let k = tape.matmul(f, wk)?;
    let v = tape.matmul(f, wv)?;
    Ok((q, k, v))
}

/// Single-head scaled dot-product attention map: softmax_rows(Q·Kᵀ/√d).
pub fn attention_map(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    tape.counters.attention_map += 1;
    let d = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale_const(scores, 1.0 / (d as f64).sqrt());
    tape.softmax_rows(scaled)
}

/// Gate scalar: exp(⟨λq1,λk1⟩) − exp(⟨λq2,λk2⟩) + λ_init. The difference of
/// exponentials keeps the gate unconstrained in sign while anchored at
/// λ_init whenever the two dot products agree.
pub fn compute_lambda(
    tape: &mut Tape,
    lq1: Var,
    lk1: Var,
    lq2: Var,
    lk2: Var,
    lambda_init: f64,
) -> Result<Var> {
    let d1 = tape.dot(lq1, lk1)?;
    let d2 = tape.dot(lq2, lk2)?;
    let e1 = tape.exp(d1)?;
    let e2 = tape.exp(d2)?;
    let diff = tape.sub(e1, e2)?;
    Ok(tape.add_const(diff, lambda_init))
}

/// Cross-modal value fusion: V_self + λ·V_other.
pub fn fuse_values(tape: &mut Tape, v_self: Var, v_other: Var, lambda: Var) -> Result<Var> {
    let injected = tape.scale_by_scalar(v_other, lambda)?;
    tape.add(v_self, injected)
}

/// Everything one mutual-refinement pass computes, kept on-tape so both the
/// iteration loop and the oracle cross-checks can reach the intermediates.
#[derive(Debug, Clone, Copy)]
pub struct MfrmOutputs {
    /// Refined features after the norm/dropout block and residual.
    pub fp_v: Var,
    pub fp_t: Var,
    /// Pre-norm refinements A_i · (V_i + λ_i·V_other).
    pub raw_v: Var,
    pub raw_t: Var,
    pub a_v: Var,
    pub a_t: Var,
    pub v_v: Var,
    pub v_t: Var,
    pub lambda_v: Var,
    pub lambda_t: Var,
}

/// Post-attention norm-and-dropout block with a residual from the module
/// input. The norm here is fixed (γ=1, β=0); the learnable norm lives in
/// the feedback module.
fn ln_d_residual(
    tape: &mut Tape,
    block_input: Var,
    raw: Var,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let d = tape.value(raw).cols();
    let gamma = tape.leaf(Tensor::full(&[d], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[d]));
    let normed = tape.layer_norm(raw, gamma, beta, LN_EPS)?;
    let dropped = tape.dropout(normed, dropout_p, mode, rng)?;
    tape.add(block_input, dropped)
}

/// One mutual-refinement pass over a pair of token sequences. Both
/// modalities attend over themselves and exchange value content through the
/// λ gates; each refined output ends with LayerNorm, dropout, and a residual
/// from that modality's input.
#[allow(clippy::too_many_arguments)]
pub fn mfrm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MfrmParams,
    f_v: Var,
    f_t: Var,
    dropout_p: f64,
    opts: ForwardOptions,
    rng: &mut ChaCha8Rng,
) -> Result<MfrmOutputs> {
    tape.counters.mfrm_forward += 1;
    let wq_v = tape.param(store, p.wq_v);
    let wk_v = tape.param(store, p.wk_v);
    let wv_v = tape.param(store, p.wv_v);
    let wq_t = tape.param(store, p.wq_t);
    let wk_t = tape.param(store, p.wk_t);
    let wv_t = tape.param(store, p.wv_t);

    let (q_v, k_v, v_v) = project_qkv(tape, f_v, wq_v, wk_v, wv_v)?;
    let (q_t, k_t, v_t) = project_qkv(tape, f_t, wq_t, wk_t, wv_t)?;
    let a_v = attention_map(tape, q_v, k_v)?;
    let a_t = attention_map(tape, q_t, k_t)?;

    let (lambda_v, lambda_t) = match opts.lambda_override {
        Some(c) => (tape.leaf(Tensor::scalar(c)), tape.leaf(Tensor::scalar(c))),
        None => {
            let lq1_v = tape.param(store, p.lq1_v);
            let lk1_v = tape.param(store, p.lk1_v);
            let lq2_v = tape.param(store, p.lq2_v);
            let lk2_v = tape.param(store, p.lk2_v);
            let lq1_t = tape.param(store, p.lq1_t);
            let lk1_t = tape.param(store, p.lk1_t);
            let lq2_t = tape.param(store, p.lq2_t);
            let lk2_t = tape.param(store, p.lk2_t);
            (
                compute_lambda(tape, lq1_v, lk1_v, lq2_v, lk2_v, p.lambda_init)?,
                compute_lambda(tape, lq1_t, lk1_t, lq2_t, lk2_t, p.lambda_init)?,
            )
        }
    };

    let vf_v = fuse_values(tape, v_v, v_t, lambda_v)?;
    let vf_t = fuse_values(tape, v_t, v_v, lambda_t)?;
    let raw_v = tape.matmul(a_v, vf_v)?;
    let raw_t = tape.matmul(a_t, vf_t)?;
    let fp_v = ln_d_residual(tape, f_v, raw_v, dropout_p, opts.mode, rng)?;
    let fp_t = ln_d_residual(tape, f_t, raw_t, dropout_p, opts.mode, rng)?;

    Ok(MfrmOutputs { fp_v, fp_t, raw_v, raw_t, a_v, a_t, v_v, v_t, lambda_v, lambda_t })
}

/// One differential-feedback step for a single stream:
/// F_dif = F'_other − β·F'_self, then F_next = μ·F_k + α·MLP(LN(F_dif)).
/// Returns (F_next, F_dif).
pub fn dffm_step(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DffmParams,
    fp_self: Var,
    fp_other: Var,
    f_self_k: Var,
) -> Result<(Var, Var)> {
    tape.counters.dffm_step += 1;
    let beta = tape.param(store, p.beta);
    let damped = tape.scale_by_scalar(fp_self, beta)?;
    let f_dif = tape.sub(fp_other, damped)?;

    let gamma = tape.param(store, p.ln_gamma);
    let ln_beta = tape.param(store, p.ln_beta);
    let normed = tape.layer_norm(f_dif, gamma, ln_beta, LN_EPS)?;

    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let h_lin = tape.matmul(normed, w1)?;
    let h_aff = tape.add_bias(h_lin, b1)?;
    let h_act = tape.gelu(h_aff);
    let out_lin = tape.matmul(h_act, w2)?;
    let mlp_out = tape.add_bias(out_lin, b2)?;

    let alpha = tape.param(store, p.alpha);
    let fed = tape.scale_by_scalar(mlp_out, alpha)?;
    let mu = tape.param(store, p.mu);
    let kept = tape.scale_by_scalar(f_self_k, mu)?;
    let f_next = tape.add(kept, fed)?;
    Ok((f_next, f_dif))
}

/// Input pair of spatial feature maps, one per modality.
#[derive(Debug, Clone)]
pub struct FeatureMapPair {
    pub map_v: Tensor,
    pub map_t: Tensor,
}

impl FeatureMapPair {
    pub fn new(map_v: Tensor, map_t: Tensor) -> Result<FeatureMapPair> {
        if map_v.ndim() != 3 || map_v.shape() != map_t.shape() {
            return Err(Error::ShapeMismatch {
                op: "feature_map_pair",
                left: map_v.shape().to_vec(),
                right: map_t.shape().to_vec(),
            });
        }
        Ok(FeatureMapPair { map_v, map_t })
    }

    pub fn swapped(&self) -> FeatureMapPair {
        FeatureMapPair { map_v: self.map_t.clone(), map_t: self.map_v.clone() }
    }
}

/// Record of one stream's state across one iteration. `f_other` is the held
/// counter-modality input of that stream's refinement pass, kept verbatim so
/// the hold-fixed contract is checkable bit for bit.
#[derive(Debug, Clone)]
pub struct StreamIteration {
    /// State entering the iteration.
    pub f_self: Tensor,
    /// Held counter-modality tokens fed to the refinement pass.
    pub f_other: Tensor,
    /// Refined output of this stream's modality from its own pass.
    pub fp_self: Tensor,
    /// Refined counter-modality output of the same pass.
    pub fp_other: Tensor,
    /// Differential fp_other − β·fp_self.
    pub f_dif: Tensor,
    /// State after the feedback update.
    pub f_next: Tensor,
    pub lambda_self: f64,
    pub lambda_other: f64,
}

/// Complete per-iteration trace of both streams.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    pub v_stream: Vec<StreamIteration>,
    pub t_stream: Vec<StreamIteration>,
}

impl IterationTrace {
    pub fn is_finite(&self) -> bool {
        self.v_stream.iter().chain(&self.t_stream).all(|s| {
            s.f_self.is_finite()
                && s.f_other.is_finite()
                && s.fp_self.is_finite()
                && s.fp_other.is_finite()
                && s.f_dif.is_finite()
                && s.f_next.is_finite()
                && s.lambda_self.is_finite()
                && s.lambda_other.is_finite()
        })
    }
}

/// Output of a full fused forward pass.
pub struct FusedOutput {
    /// Fused features back in spatial C×H×W layout.
    pub map: Tensor,
    /// The same fused features as the on-tape N×d token node, so callers
    /// can keep differentiating through downstream heads.
    pub tokens: Var,
    pub trace: IterationTrace,
}

/// Full fused forward pass: flatten both maps (with positional encoding),
/// run the two refinement streams for K iterations — each stream iterates
/// its own modality while holding the other modality's tokens fixed at their
/// initial value — then merge the final refined pair and restore the spatial
/// layout.
pub fn irdfusion_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    cfg: &FusionConfig,
    pair: &FeatureMapPair,
    opts: ForwardOptions,
    rng: &mut ChaCha8Rng,
) -> Result<FusedOutput> {
    cfg.validate()?;
    let (h, w) = (pair.map_v.shape()[1], pair.map_v.shape()[2]);
    let f_v0 = flatten_pe(&pair.map_v, cfg.pe, cfg.d)?;
    let f_t0 = flatten_pe(&pair.map_t, cfg.pe, cfg.d)?;
    let fv0 = tape.leaf(f_v0);
    let ft0 = tape.leaf(f_t0);

    let mut trace = IterationTrace::default();
    let mut fv_k = fv0;
    let mut ft_k = ft0;
    let mut final_fp_v = None;
    let mut final_fp_t = None;

    for _ in 0..cfg.k {
        let pass_v = mfrm_forward(tape, store, &params.mfrm, fv_k, ft0, cfg.dropout_p, opts, rng)?;
        let (fv_next, fdif_v) = dffm_step(tape, store, &params.dffm_v, pass_v.fp_v, pass_v.fp_t, fv_k)?;

        let pass_t = mfrm_forward(tape, store, &params.mfrm, fv0, ft_k, cfg.dropout_p, opts, rng)?;
        let (ft_next, fdif_t) = dffm_step(tape, store, &params.dffm_t, pass_t.fp_t, pass_t.fp_v, ft_k)?;

        trace.v_stream.push(StreamIteration {
            f_self: tape.value(fv_k).clone(),
            f_other: tape.value(ft0).clone(),
            fp_self: tape.value(pass_v.fp_v).clone(),
            fp_other: tape.value(pass_v.fp_t).clone(),
            f_dif: tape.value(fdif_v).clone(),
            f_next: tape.value(fv_next).clone(),
            lambda_self: tape.value(pass_v.lambda_v).scalar_value()?,
            lambda_other: tape.value(pass_v.lambda_t).scalar_value()?,
        });
        trace.t_stream.push(StreamIteration {
            f_self: tape.value(ft_k).clone(),
            f_other: tape.value(fv0).clone(),
            fp_self: tape.value(pass_t.fp_t).clone(),
            fp_other: tape.value(pass_t.fp_v).clone(),
            f_dif: tape.value(fdif_t).clone(),
            f_next: tape.value(ft_next).clone(),
            lambda_self: tape.value(pass_t.lambda_t).scalar_value()?,
            lambda_other: tape.value(pass_t.lambda_v).scalar_value()?,
        });

        final_fp_v = Some(pass_v.fp_v);
        final_fp_t = Some(pass_t.fp_t);
        fv_k = fv_next;
        ft_k = ft_next;
    }

    let fp_v = final_fp_v.expect("K ≥ 1 guarantees at least one pass");
    let fp_t = final_fp_t.expect("K ≥ 1 guarantees at least one pass");
    let tokens = match (cfg.merge_mode, &params.merge) {
        (MergeMode::Sum, _) => tape.add(fp_v, fp_t)?,
        (MergeMode::ConcatProject, Some((wm, bm))) => {
            let cat = tape.concat_cols(fp_v, fp_t)?;
            let wv = tape.param(store, *wm);
            let bv = tape.param(store, *bm);
            let lin = tape.matmul(cat, wv)?;
            tape.add_bias(lin, bv)?
        }
        (MergeMode::ConcatProject, None) => {
            return Err(Error::Config(
                "merge_mode is concat_project but the model was built without merge parameters".into(),
            ))
        }
    };

    let map = reshape_map(tape.value(tokens), h, w)?;
    Ok(FusedOutput { map, tokens, trace })
}
