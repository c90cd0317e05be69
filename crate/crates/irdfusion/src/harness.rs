//! Toy end-to-end task: dense object-presence prediction from fused
//! features. A small family of model variants switches individual fusion
//! stages off so their contributions can be measured in isolation, plus a
//! plain-SGD trainer, metrics, checkpointing, and the two grid runners
//! (variant ablation and iteration sweep) that produce JSON reports.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    init_merge, irdfusion_forward, mfrm_forward, uniform, FeatureMapPair, ForwardOptions,
    FusionConfig, FusionParams, MergeMode, MfrmParams,
};
use crate::irdt;
use crate::pe::{flatten_pe, PeKind};
use crate::synth::{gen_samples, SceneConfig, SceneSample};
use crate::tape::{sigmoid, Mode, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

// The scene generator's RNG streams are sample indices, so one seed value
// can serve both a dataset and a training run; the trainer keeps its draws
// out of the generator's range by offsetting its stream ids.
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_DROPOUT: u64 = (1 << 32) + 1;
const STREAM_INIT: u64 = (1 << 32) + 2;

/// Which stages of the fusion pipeline a model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Channel concat of the raw maps plus a learned affine merge — no
    /// attention, no feedback, no positional encoding. The floor to beat.
    BaselineConcat,
    /// One mutual-refinement pass, merged directly; no feedback iterations.
    MfrmOnly,
    /// Full iterated pipeline with the cross-value gates pinned to zero, so
    /// only the differential feedback distinguishes it from self-attention.
    DffmOnly,
    /// The complete pipeline.
    Full,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::BaselineConcat,
        ModelVariant::MfrmOnly,
        ModelVariant::DffmOnly,
        ModelVariant::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::BaselineConcat => "baseline_concat",
            ModelVariant::MfrmOnly => "mfrm_only",
            ModelVariant::DffmOnly => "dffm_only",
            ModelVariant::Full => "full",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelVariant> {
        match s {
            "baseline_concat" => Ok(ModelVariant::BaselineConcat),
            "mfrm_only" => Ok(ModelVariant::MfrmOnly),
            "dffm_only" => Ok(ModelVariant::DffmOnly),
            "full" => Ok(ModelVariant::Full),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Variant-specific parameter handles.
enum ModelKind {
    Baseline { merge_w: ParamId, merge_b: ParamId },
    MfrmOnly { mfrm: MfrmParams, merge: Option<(ParamId, ParamId)> },
    Iterated { params: FusionParams },
}

/// One trainable model: a variant-specific fusion stage followed by a
/// per-cell affine head producing presence logits.
pub struct Model {
    pub variant: ModelVariant,
    pub cfg: FusionConfig,
    pub store: ParamStore,
    kind: ModelKind,
    head_w: ParamId,
    head_b: ParamId,
}

/// Builds a model with deterministic initialization: the fusion stage draws
/// from the per-module schemes, the head from U(−1/√d, 1/√d). Same
/// (variant, cfg, seed) always yields bit-identical parameters.
pub fn build_model(variant: ModelVariant, cfg: &FusionConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    let mut store = ParamStore::new();
    let d = cfg.d;

    let kind = match variant {
        ModelVariant::BaselineConcat => {
            let bound = 1.0 / (2.0 * d as f64).sqrt();
            let merge_w = store.register("merge_w", "merge_projection", uniform(&mut rng, bound, &[2 * d, d]));
            let merge_b = store.register("merge_b", "merge_projection", Tensor::zeros(&[d]));
            ModelKind::Baseline { merge_w, merge_b }
        }
        ModelVariant::MfrmOnly => {
            let mfrm = MfrmParams::init(&mut store, cfg, &mut rng);
            let merge = init_merge(&mut store, cfg, &mut rng);
            ModelKind::MfrmOnly { mfrm, merge }
        }
        ModelVariant::DffmOnly | ModelVariant::Full => {
            let params = FusionParams::init(&mut store, cfg, &mut rng)?;
            ModelKind::Iterated { params }
        }
    };

    let bound = 1.0 / (d as f64).sqrt();
    let head_w = store.register("head_w", "head", uniform(&mut rng, bound, &[d, 1]));
    let head_b = store.register("head_b", "head", Tensor::zeros(&[1]));

    Ok(Model { variant, cfg: cfg.clone(), store, kind, head_w, head_b })
}

impl Model {
    /// The gate pinning the variant implies: `dffm_only` runs with both
    /// cross-value gates forced to zero, every other variant learns them.
    pub fn lambda_override(&self) -> Option<f64> {
        match self.variant {
            ModelVariant::DffmOnly => Some(0.0),
            _ => None,
        }
    }

    /// Parameter handles of the iterated fusion stage, when the variant has
    /// one (`dffm_only` and `full`).
    pub fn fusion_params(&self) -> Option<&FusionParams> {
        match &self.kind {
            ModelKind::Iterated { params } => Some(params),
            _ => None,
        }
    }

    /// Runs the variant's fusion stage and the head, returning N×1 presence
    /// logits for the H·W cells in raster order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pair: &FeatureMapPair,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let tokens = match &self.kind {
            ModelKind::Baseline { merge_w, merge_b } => {
                let f_v = tape.leaf(flatten_pe(&pair.map_v, PeKind::None, cfg.d)?);
                let f_t = tape.leaf(flatten_pe(&pair.map_t, PeKind::None, cfg.d)?);
                let cat = tape.concat_cols(f_v, f_t)?;
                let w = tape.param(&self.store, *merge_w);
                let b = tape.param(&self.store, *merge_b);
                let lin = tape.matmul(cat, w)?;
                tape.add_bias(lin, b)?
            }
            ModelKind::MfrmOnly { mfrm, merge } => {
                let f_v = tape.leaf(flatten_pe(&pair.map_v, cfg.pe, cfg.d)?);
                let f_t = tape.leaf(flatten_pe(&pair.map_t, cfg.pe, cfg.d)?);
                let opts = ForwardOptions { mode, lambda_override: None };
                let out = mfrm_forward(tape, &self.store, mfrm, f_v, f_t, cfg.dropout_p, opts, rng)?;
                match (cfg.merge_mode, merge) {
                    (MergeMode::Sum, _) => tape.add(out.fp_v, out.fp_t)?,
                    (MergeMode::ConcatProject, Some((wm, bm))) => {
                        let cat = tape.concat_cols(out.fp_v, out.fp_t)?;
                        let w = tape.param(&self.store, *wm);
                        let b = tape.param(&self.store, *bm);
                        let lin = tape.matmul(cat, w)?;
                        tape.add_bias(lin, b)?
                    }
                    (MergeMode::ConcatProject, None) => {
                        return Err(Error::Config(
                            "merge_mode is concat_project but the model was built without merge parameters".into(),
                        ))
                    }
                }
            }
            ModelKind::Iterated { params } => {
                let opts = ForwardOptions { mode, lambda_override: self.lambda_override() };
                irdfusion_forward(tape, &self.store, params, cfg, pair, opts, rng)?.tokens
            }
        };
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        let lin = tape.matmul(tokens, w)?;
        tape.add_bias(lin, b)
    }

    /// Per-cell presence probabilities as an H×W map, computed without
    /// dropout and off the tape.
    pub fn predict(&self, pair: &FeatureMapPair) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(&mut tape, pair, Mode::Eval, &mut rng)?;
        let (h, w) = (pair.map_v.shape()[1], pair.map_v.shape()[2]);
        let probs: Vec<f64> = tape.value(logits).data().iter().map(|&z| sigmoid(z)).collect();
        Tensor::from_vec(vec![h, w], probs)
    }
}

/// Training hyperparameters, including the dataset sizes the grid runners
/// generate for themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 60, lr: 0.05, batch: 4, n_train: 24, n_test: 12 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs", "must be ≥ 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be ≥ 0"));
        }
        if self.batch < 1 {
            return Err(Error::invalid("batch", "must be ≥ 1"));
        }
        if self.n_train < 1 {
            return Err(Error::invalid("n_train", "must be ≥ 1"));
        }
        if self.n_test < 1 {
            return Err(Error::invalid("n_test", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Everything one training run produces. Wall time is measured but kept out
/// of the serialized form so reports stay byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Mean per-sample training loss, one entry per epoch.
    pub train_loss: Vec<f64>,
    pub final_test_bce: f64,
    pub test_soft_iou: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Evaluation metrics: mean per-cell binary cross-entropy and the soft
/// intersection-over-union Σmin(p,y)/Σmax(p,y), pooled over every cell of
/// the dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub bce: f64,
    pub soft_iou: f64,
}

/// Σmin(p,y)/Σmax(p,y) over all cells; two empty masks count as a perfect
/// match.
pub fn soft_iou(p: &Tensor, y: &Tensor) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_iou",
            left: p.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let mut min_sum = 0.0;
    let mut max_sum = 0.0;
    for (&pi, &yi) in p.data().iter().zip(y.data()) {
        min_sum += pi.min(yi);
        max_sum += pi.max(yi);
    }
    Ok(if max_sum == 0.0 { 1.0 } else { min_sum / max_sum })
}

fn flat_target(t: &Tensor) -> Result<Tensor> {
    t.reshaped(&[t.len(), 1])
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Plain SGD on per-cell binary cross-entropy. Batch order and dropout each
/// draw from their own stream of the seed, so runs are bit-reproducible.
/// A non-finite loss aborts with the offending epoch.
pub fn train(
    model: &mut Model,
    train_set: &[SceneSample],
    test_set: &[SceneSample],
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::invalid("train_set", "dataset is empty"));
    }
    tc.validate()?;
    let start = Instant::now();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(STREAM_DROPOUT);

    let mut tape = Tape::new();
    let mut train_loss = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let order = shuffled(train_set.len(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch) {
            model.store.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let sample = &train_set[i];
                tape.clear();
                // A non-finite value anywhere mid-fit — inside an op or in
                // the loss itself — is numerical blowup, not a contract
                // violation: inputs were validated before the loop started.
                let step = (|| {
                    let logits =
                        model.forward(&mut tape, &sample.pair, Mode::Train, &mut dropout_rng)?;
                    let loss = tape.bce_with_logits_mean(logits, flat_target(&sample.target)?)?;
                    let loss_value = tape.value(loss).scalar_value()?;
                    if !loss_value.is_finite() {
                        return Err(Error::NonFinite { op: "loss" });
                    }
                    let scaled = tape.scale_const(loss, inv);
                    tape.backward(scaled, &mut model.store)?;
                    Ok(loss_value)
                })();
                match step {
                    Ok(loss_value) => epoch_loss += loss_value,
                    Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                    Err(e) => return Err(e),
                }
            }
            model.store.sgd_step(tc.lr);
        }
        train_loss.push(epoch_loss / train_set.len() as f64);
    }

    let metrics = evaluate(model, test_set)?;
    Ok(TrainReport {
        variant: model.variant.tag().to_string(),
        seed,
        k: model.cfg.k,
        epochs: tc.epochs,
        lr: tc.lr,
        batch: tc.batch,
        train_loss,
        final_test_bce: metrics.bce,
        test_soft_iou: metrics.soft_iou,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Dropout-free metrics over a dataset, pooled per cell.
pub fn evaluate(model: &Model, dataset: &[SceneSample]) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "dataset is empty"));
    }
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bce_sum = 0.0;
    let mut min_sum = 0.0;
    let mut max_sum = 0.0;
    let mut cells = 0usize;
    for sample in dataset {
        tape.clear();
        let logits = model.forward(&mut tape, &sample.pair, Mode::Eval, &mut rng)?;
        for (&z, &y) in tape.value(logits).data().iter().zip(sample.target.data()) {
            bce_sum += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let p = sigmoid(z);
            min_sum += p.min(y);
            max_sum += p.max(y);
            cells += 1;
        }
    }
    Ok(Metrics {
        bce: bce_sum / cells as f64,
        soft_iou: if max_sum == 0.0 { 1.0 } else { min_sum / max_sum },
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: one IRDT file per parameter plus a JSON manifest.

const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: String,
    variant: ModelVariant,
    fusion: FusionConfig,
    params: Vec<ParamEntry>,
}

/// Writes every parameter as `p{index}.irdt` plus a manifest recording
/// names, roles, shapes, the config, and the tool version.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (i, p) in model.store.iter().enumerate() {
        let file = format!("p{i:04}.irdt");
        irdt::write_tensor(&dir.join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            role: p.role.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        variant: model.variant,
        fusion: model.cfg.clone(),
        params,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model named by a checkpoint directory and loads every
/// parameter value back, verifying names and shapes against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut model = build_model(manifest.variant, &manifest.fusion, 0)?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::format(
            &path,
            format!(
                "manifest lists {} parameters but the {} variant has {}",
                manifest.params.len(),
                manifest.variant,
                model.store.len()
            ),
        ));
    }
    for (param, entry) in model.store.iter_mut().zip(&manifest.params) {
        if param.name != entry.name {
            return Err(Error::format(
                &path,
                format!("parameter order mismatch: expected {}, manifest has {}", param.name, entry.name),
            ));
        }
        let value = irdt::read_tensor(&dir.join(&entry.file))?;
        if value.shape() != entry.shape.as_slice() || value.shape() != param.value.shape() {
            return Err(Error::format(
                &path,
                format!("shape mismatch for {}: file {:?}, expected {:?}", entry.name, value.shape(), param.value.shape()),
            ));
        }
        param.value = value;
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Grid runners.

/// Number of worker threads the grid runners may use, from
/// `IRDFUSION_THREADS` (default 1).
fn thread_budget() -> usize {
    std::env::var("IRDFUSION_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f(0..n)` on up to `thread_budget()` workers. Every item writes its
/// own slot, so the result order is independent of scheduling.
fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = thread_budget().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot poisoned").expect("worker filled every slot"))
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One (variant, seed) cell of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub test_bce: f64,
    pub test_soft_iou: f64,
}

/// Per-variant medians over seeds, with the mAP50 the corresponding variant
/// reaches in the full-scale detector as documentation-only context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_test_bce: f64,
    pub median_test_soft_iou: f64,
    pub full_scale_map50_reference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub fusion: FusionConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub variants: Vec<VariantSummary>,
    pub ordering_full_gt_baseline: bool,
    pub ordering_full_ge_mfrm_only: bool,
}

fn full_scale_map50(variant: ModelVariant) -> f64 {
    match variant {
        ModelVariant::BaselineConcat => 84.8,
        ModelVariant::MfrmOnly => 86.3,
        ModelVariant::DffmOnly => 87.5,
        ModelVariant::Full => 88.3,
    }
}

/// Trains all four variants per seed on one shared dataset and reports
/// per-variant medians plus the two headline orderings. Cells appear in
/// deterministic (variant, seed) order regardless of the thread budget.
pub fn ablation_run(
    fusion: &FusionConfig,
    scene: &SceneConfig,
    tc: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::invalid("seeds", format!("need at least 3, got {}", seeds.len())));
    }
    fusion.validate()?;
    tc.validate()?;
    let train_set = gen_samples(scene, 0, tc.n_train)?;
    let test_set = gen_samples(scene, tc.n_train as u64, tc.n_test)?;

    let n = ModelVariant::ALL.len() * seeds.len();
    let results = run_indexed(n, |i| -> Result<AblationCell> {
        let variant = ModelVariant::ALL[i / seeds.len()];
        let seed = seeds[i % seeds.len()];
        let mut model = build_model(variant, fusion, seed)?;
        let report = train(&mut model, &train_set, &test_set, tc, seed)?;
        Ok(AblationCell {
            variant: variant.tag().to_string(),
            seed,
            initial_train_loss: report.train_loss[0],
            final_train_loss: *report.train_loss.last().expect("epochs ≥ 1"),
            test_bce: report.final_test_bce,
            test_soft_iou: report.test_soft_iou,
        })
    });
    let cells: Vec<AblationCell> = results.into_iter().collect::<Result<_>>()?;

    let mut variants = Vec::with_capacity(ModelVariant::ALL.len());
    for (vi, variant) in ModelVariant::ALL.iter().enumerate() {
        let rows = &cells[vi * seeds.len()..(vi + 1) * seeds.len()];
        variants.push(VariantSummary {
            variant: variant.tag().to_string(),
            median_test_bce: median(&rows.iter().map(|c| c.test_bce).collect::<Vec<_>>()),
            median_test_soft_iou: median(&rows.iter().map(|c| c.test_soft_iou).collect::<Vec<_>>()),
            full_scale_map50_reference: full_scale_map50(*variant),
        });
    }
    let iou_of = |v: ModelVariant| {
        variants[ModelVariant::ALL.iter().position(|x| *x == v).expect("known variant")].median_test_soft_iou
    };
    Ok(AblationReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        fusion: fusion.clone(),
        scene: scene.clone(),
        train: tc.clone(),
        seeds: seeds.to_vec(),
        cells,
        ordering_full_gt_baseline: iou_of(ModelVariant::Full) > iou_of(ModelVariant::BaselineConcat),
        ordering_full_ge_mfrm_only: iou_of(ModelVariant::Full) >= iou_of(ModelVariant::MfrmOnly),
        variants,
    })
}

/// One iteration-count row of the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub per_seed_soft_iou: Vec<f64>,
    pub median_test_bce: f64,
    pub median_test_soft_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub fusion: FusionConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    pub rows: Vec<SweepRow>,
    /// Iteration count with the best median soft-IoU on this toy task
    /// (smallest K wins ties).
    pub toy_optimum_k: usize,
    /// Iteration count the full-scale detector peaks at, recorded for
    /// context only — the toy optimum is not asserted to match.
    pub paper_reference_optimum: usize,
}

/// Trains the full variant at each iteration count and reports the
/// metric-vs-K table plus the argmax row.
pub fn iteration_sweep(
    fusion: &FusionConfig,
    scene: &SceneConfig,
    tc: &TrainConfig,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<SweepReport> {
    if k_values.is_empty() {
        return Err(Error::invalid("k_values", "must not be empty"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "must not be empty"));
    }
    tc.validate()?;
    let train_set = gen_samples(scene, 0, tc.n_train)?;
    let test_set = gen_samples(scene, tc.n_train as u64, tc.n_test)?;

    let n = k_values.len() * seeds.len();
    let results = run_indexed(n, |i| -> Result<(f64, f64)> {
        let mut cfg = fusion.clone();
        cfg.k = k_values[i / seeds.len()];
        let seed = seeds[i % seeds.len()];
        let mut model = build_model(ModelVariant::Full, &cfg, seed)?;
        let report = train(&mut model, &train_set, &test_set, tc, seed)?;
        Ok((report.final_test_bce, report.test_soft_iou))
    });
    let flat: Vec<(f64, f64)> = results.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(k_values.len());
    for (ki, &k) in k_values.iter().enumerate() {
        let cells = &flat[ki * seeds.len()..(ki + 1) * seeds.len()];
        let bces: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let ious: Vec<f64> = cells.iter().map(|c| c.1).collect();
        rows.push(SweepRow {
            k,
            median_test_bce: median(&bces),
            median_test_soft_iou: median(&ious),
            per_seed_soft_iou: ious,
        });
    }
    let mut toy_optimum_k = rows[0].k;
    let mut best = rows[0].median_test_soft_iou;
    for row in &rows[1..] {
        if row.median_test_soft_iou > best {
            best = row.median_test_soft_iou;
            toy_optimum_k = row.k;
        }
    }
    Ok(SweepReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        fusion: fusion.clone(),
        scene: scene.clone(),
        train: tc.clone(),
        seeds: seeds.to_vec(),
        k_values: k_values.to_vec(),
        rows,
        toy_optimum_k,
        paper_reference_optimum: 4,
    })
}
