//! Command-line entry point: one binary, subcommand per workflow, stable
//! exit codes (0 success, 1 usage or contract violation, 2 verification
//! failure). Every artifact written embeds the resolved configuration and
//! the tool version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::CliConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    irdfusion_forward, FeatureMapPair, ForwardOptions, FusionConfig, FusionParams, MergeMode,
};
use crate::gradcheck::finite_diff_check;
use crate::harness::{
    ablation_run, build_model, evaluate, iteration_sweep, load_checkpoint, save_checkpoint, train,
    ModelVariant, TrainReport,
};
use crate::oracle::{
    assert_equivalence, differential_via_relation, feedback_update_relation, relation_coeffs,
    refined_prenorm_reference,
};
use crate::pe::{reshape_map, PeKind};
use crate::pgm::emit_heatmap;
use crate::synth::{gen_dataset, load_split, read_manifest};
use crate::tensor::{softmax_rows, Tensor};
use crate::{irdt, Tape};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "irdfusion",
    version,
    about = "Cross-modal feature fusion: synthetic data, training, and verification",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset on disk.
    GenData(GenDataArgs),
    /// Train one model variant and write a report plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a generated dataset.
    Eval(EvalArgs),
    /// Train all variants over several seeds and report medians.
    Ablate(AblateArgs),
    /// Train the full variant at several iteration counts.
    SweepIters(SweepArgs),
    /// Fuse two feature maps from IRDT files and write heatmaps.
    Fuse(FuseArgs),
    /// Verify the relation-map identities against the closed forms.
    CheckIdentity(CheckIdentityArgs),
    /// Verify tape gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

/// `--config` plus one override flag per config field; flags win.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON config file (same keys as the config echoed into reports).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long = "d-lambda")]
    d_lambda: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    merge_mode: Option<MergeMode>,
    #[arg(long, allow_negative_numbers = true)]
    dropout_p: Option<f64>,
    #[arg(long)]
    pe: Option<PeKind>,
    #[arg(long = "lambda-init", allow_negative_numbers = true)]
    lambda_init: Option<f64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    n_objects_min: Option<usize>,
    #[arg(long)]
    n_objects_max: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    a_obj: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    a_bg: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_cm: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_ind: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    variant: Option<ModelVariant>,
}

impl ConfigArgs {
    /// defaults ← file ← flags, then full validation.
    fn resolve(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(path) => CliConfig::from_file(path)?,
            None => CliConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(
            d, d_h, d_lambda, k, merge_mode, dropout_p, pe, lambda_init, h, w, c, n_objects_min,
            n_objects_max, a_obj, a_bg, sigma_cm, sigma_ind, rho, seed, epochs, lr, batch, n_train,
            n_test, variant,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for report.json and checkpoint/.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Pre-generated dataset directory; omitted means generate in memory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Optional metrics file; stdout always gets the report.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for ablation.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of seeds, counting up from the resolved base seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for sweep.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Iteration counts to train at.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    k_values: Vec<usize>,
    /// Number of seeds, counting up from the resolved base seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Visible-modality feature map (IRDT, C×H×W).
    #[arg(long, value_name = "FILE")]
    map_v: PathBuf,
    /// Thermal-modality feature map (IRDT, C×H×W).
    #[arg(long, value_name = "FILE")]
    map_t: PathBuf,
    /// Output directory for the fused map and heatmaps.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Fuse with a trained checkpoint instead of fresh parameters.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CheckIdentityArgs {
    /// Number of random instances to verify.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Token count (attention maps are n×n).
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Value feature width.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Maximum allowed relative deviation.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Base seed of the instance stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional report file; stdout always gets the report.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Refinement iterations of the probed model.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Map height and width of the probe input.
    #[arg(long, default_value_t = 2)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    width: usize,
    /// Model width.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Merge mode of the probed model (concat_project covers every group).
    #[arg(long, default_value = "concat_project")]
    merge_mode: MergeMode,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h_step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional report file; stdout always gets the report.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SweepIters(args) => cmd_sweep(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::CheckIdentity(args) => cmd_check_identity(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format("<stdout>", e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn seed_list(base: u64, count: u64) -> Vec<u64> {
    (base..base + count).collect()
}

/// U(−scale, scale) tensor for verification probes.
fn probe_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("probe shape")
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let manifest = gen_dataset(&cfg.scene(), cfg.n_train, cfg.n_test, &args.out)?;
    println!(
        "wrote {} train + {} test samples to {}",
        manifest.train.len(),
        manifest.test.len(),
        args.out.display()
    );
    Ok(0)
}

/// Train report artifact: resolved config, then the run's numbers.
#[derive(Serialize)]
struct TrainArtifact {
    version: String,
    config: CliConfig,
    report: TrainReport,
}

fn load_dataset(dir: &Path, cfg: &CliConfig) -> Result<(Vec<crate::synth::SceneSample>, Vec<crate::synth::SceneSample>)> {
    let manifest = read_manifest(dir)?;
    if manifest.config.c != cfg.d {
        return Err(Error::Config(format!(
            "dataset at {} has c = {} but the model needs d = {}",
            dir.display(),
            manifest.config.c,
            cfg.d
        )));
    }
    Ok((
        load_split(dir, &manifest.train)?,
        load_split(dir, &manifest.test)?,
    ))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let (train_set, test_set) = match &args.data {
        Some(dir) => load_dataset(dir, &cfg)?,
        None => {
            let scene = cfg.scene();
            (
                crate::synth::gen_samples(&scene, 0, cfg.n_train)?,
                crate::synth::gen_samples(&scene, cfg.n_train as u64, cfg.n_test)?,
            )
        }
    };
    let mut model = build_model(cfg.variant, &cfg.fusion(), cfg.seed)?;
    let report = train(&mut model, &train_set, &test_set, &cfg.train(), cfg.seed)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_checkpoint(&model, &args.out.join("checkpoint"))?;
    let artifact = TrainArtifact { version: VERSION.to_string(), config: cfg, report };
    write_json_file(&args.out.join("report.json"), &artifact)?;
    println!(
        "{} seed {}: final train loss {:.4}, test bce {:.4}, test soft-iou {:.4} ({:.1}s)",
        artifact.report.variant,
        artifact.report.seed,
        artifact.report.train_loss.last().expect("epochs ≥ 1"),
        artifact.report.final_test_bce,
        artifact.report.test_soft_iou,
        artifact.report.wall_time_s
    );
    Ok(0)
}

#[derive(Serialize)]
struct EvalArtifact {
    version: String,
    fusion: FusionConfig,
    variant: String,
    data: crate::synth::SceneConfig,
    metrics: crate::harness::Metrics,
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let model = load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.data)?;
    if manifest.config.c != model.cfg.d {
        return Err(Error::Config(format!(
            "dataset at {} has c = {} but the checkpoint needs d = {}",
            args.data.display(),
            manifest.config.c,
            model.cfg.d
        )));
    }
    if manifest.test.is_empty() {
        return Err(Error::invalid("data", "dataset has no test split"));
    }
    let test_set = load_split(&args.data, &manifest.test)?;
    let metrics = evaluate(&model, &test_set)?;
    let artifact = EvalArtifact {
        version: VERSION.to_string(),
        fusion: model.cfg.clone(),
        variant: model.variant.tag().to_string(),
        data: manifest.config,
        metrics,
    };
    print_json(&artifact)?;
    if let Some(path) = &args.out {
        write_json_file(path, &artifact)?;
    }
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let seeds = seed_list(cfg.seed, args.seeds);
    let report = ablation_run(&cfg.fusion(), &cfg.scene(), &cfg.train(), &seeds)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_json_file(&args.out.join("ablation.json"), &report)?;
    for v in &report.variants {
        println!(
            "{:16} median test soft-iou {:.4}  median test bce {:.4}",
            v.variant, v.median_test_soft_iou, v.median_test_bce
        );
    }
    println!(
        "full > baseline_concat: {}; full >= mfrm_only: {}",
        report.ordering_full_gt_baseline, report.ordering_full_ge_mfrm_only
    );
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let seeds = seed_list(cfg.seed, args.seeds);
    let report = iteration_sweep(&cfg.fusion(), &cfg.scene(), &cfg.train(), &args.k_values, &seeds)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_json_file(&args.out.join("sweep.json"), &report)?;
    for row in &report.rows {
        println!("K = {}: median test soft-iou {:.4}", row.k, row.median_test_soft_iou);
    }
    println!(
        "toy optimum K = {} (full-scale reference optimum: {})",
        report.toy_optimum_k, report.paper_reference_optimum
    );
    Ok(0)
}

#[derive(Serialize)]
struct FuseArtifact {
    version: String,
    fusion: FusionConfig,
    seed: Option<u64>,
    checkpoint: Option<String>,
    input_shape: Vec<usize>,
    /// Per-iteration gate values, one (v, t) pair per iteration.
    lambdas_v: Vec<(f64, f64)>,
    lambdas_t: Vec<(f64, f64)>,
    files: Vec<String>,
}

fn cmd_fuse(args: FuseArgs) -> Result<i32> {
    let map_v = irdt::read_tensor(&args.map_v)?;
    let map_t = irdt::read_tensor(&args.map_t)?;
    let pair = FeatureMapPair::new(map_v, map_t)?;

    // Either a trained checkpoint supplies the model, or flags/config seed
    // a fresh one.
    let (store, params, fusion, lambda_override, seed, checkpoint);
    match &args.checkpoint {
        Some(dir) => {
            let model = load_checkpoint(dir)?;
            params = match model.fusion_params() {
                Some(p) => p.clone(),
                None => {
                    return Err(Error::Config(format!(
                        "checkpoint variant {} has no iterated fusion stage to run",
                        model.variant
                    )))
                }
            };
            lambda_override = model.lambda_override();
            fusion = model.cfg.clone();
            store = model.store;
            seed = None;
            checkpoint = Some(dir.display().to_string());
        }
        None => {
            let cfg = args.config.resolve()?;
            fusion = cfg.fusion();
            let mut fresh = crate::tape::ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            params = FusionParams::init(&mut fresh, &fusion, &mut rng)?;
            lambda_override = None;
            store = fresh;
            seed = Some(cfg.seed);
            checkpoint = None;
        }
    }
    if pair.map_v.shape()[0] != fusion.d {
        return Err(Error::Config(format!(
            "input maps have {} channels but the model width is {}",
            pair.map_v.shape()[0],
            fusion.d
        )));
    }

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions { mode: crate::tape::Mode::Eval, lambda_override };
    let out = irdfusion_forward(&mut tape, &store, &params, &fusion, &pair, opts, &mut rng)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let note = serde_json::to_string(&fusion).map_err(|e| Error::format(&args.out, e.to_string()))?;
    let (h, w) = (pair.map_v.shape()[1], pair.map_v.shape()[2]);
    let mut files = Vec::new();

    irdt::write_tensor(&args.out.join("fused.irdt"), &out.map)?;
    files.push("fused.irdt".to_string());
    emit_heatmap(&out.map, &args.out.join("fused.pgm"), &note)?;
    files.push("fused.pgm".to_string());
    for (i, (it_v, it_t)) in out.trace.v_stream.iter().zip(&out.trace.t_stream).enumerate() {
        let name_v = format!("iter{}_v.pgm", i + 1);
        emit_heatmap(&reshape_map(&it_v.f_next, h, w)?, &args.out.join(&name_v), &note)?;
        files.push(name_v);
        let name_t = format!("iter{}_t.pgm", i + 1);
        emit_heatmap(&reshape_map(&it_t.f_next, h, w)?, &args.out.join(&name_t), &note)?;
        files.push(name_t);
    }

    let artifact = FuseArtifact {
        version: VERSION.to_string(),
        fusion,
        seed,
        checkpoint,
        input_shape: pair.map_v.shape().to_vec(),
        lambdas_v: out.trace.v_stream.iter().map(|s| (s.lambda_self, s.lambda_other)).collect(),
        lambdas_t: out.trace.t_stream.iter().map(|s| (s.lambda_self, s.lambda_other)).collect(),
        files,
    };
    write_json_file(&args.out.join("fuse.json"), &artifact)?;
    println!("fused {}×{}×{} pair into {}", artifact.fusion.d, h, w, args.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct IdentityArtifact {
    version: String,
    seeds: u64,
    n: usize,
    d: usize,
    tol: f64,
    max_deviation_differential: f64,
    max_deviation_feedback: f64,
    max_deviation: f64,
    pass: bool,
}

/// Folds an equivalence probe into (worst deviation, still passing).
fn fold_deviation(probe: Result<f64>, worst: &mut f64, pass: &mut bool) -> Result<()> {
    match probe {
        Ok(dev) => {
            *worst = worst.max(dev);
            Ok(())
        }
        Err(Error::Exceedance { deviation, .. }) => {
            *worst = worst.max(deviation);
            *pass = false;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn cmd_check_identity(args: CheckIdentityArgs) -> Result<i32> {
    let (n, d) = (args.n, args.d);
    let mut max_dif = 0.0f64;
    let mut max_fb = 0.0f64;
    let mut pass = true;

    for i in 0..args.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(i);
        let a_v = softmax_rows(&probe_tensor(&mut rng, &[n, n], 2.0))?;
        let a_t = softmax_rows(&probe_tensor(&mut rng, &[n, n], 2.0))?;
        let v_v = probe_tensor(&mut rng, &[n, d], 1.0);
        let v_t = probe_tensor(&mut rng, &[n, d], 1.0);
        let lambda_v = rng.gen::<f64>() * 3.0 - 1.5;
        let lambda_t = rng.gen::<f64>() * 3.0 - 1.5;
        let beta = 0.25 + rng.gen::<f64>() * 1.75;

        // Direct reading: refine each modality, then difference.
        let fp_v = refined_prenorm_reference(&a_v, &v_v, &v_t, lambda_v)?;
        let fp_t = refined_prenorm_reference(&a_t, &v_t, &v_v, lambda_t)?;
        let mut direct = fp_v.clone();
        for (x, y) in direct.data_mut().iter_mut().zip(fp_t.data()) {
            *x -= beta * y;
        }

        // Relation reading: signed coefficient maps applied to raw values.
        let coeffs = relation_coeffs(&a_v, &a_t, lambda_v, lambda_t, beta)?;
        let via_relation = differential_via_relation(&coeffs, &v_v, &v_t)?;
        fold_deviation(
            assert_equivalence(&direct, &via_relation, args.tol),
            &mut max_dif,
            &mut pass,
        )?;

        // Feedback reading: adding β·F'_t back must reconstruct F'_v.
        let recon = feedback_update_relation(&via_relation, &fp_t, beta)?;
        fold_deviation(assert_equivalence(&fp_v, &recon, args.tol), &mut max_fb, &mut pass)?;
    }

    let artifact = IdentityArtifact {
        version: VERSION.to_string(),
        seeds: args.seeds,
        n,
        d,
        tol: args.tol,
        max_deviation_differential: max_dif,
        max_deviation_feedback: max_fb,
        max_deviation: max_dif.max(max_fb),
        pass,
    };
    print_json(&artifact)?;
    if let Some(path) = &args.out {
        write_json_file(path, &artifact)?;
    }
    Ok(if pass { 0 } else { 2 })
}

#[derive(Serialize)]
struct GradCheckArtifact {
    version: String,
    k: usize,
    d: usize,
    height: usize,
    width: usize,
    merge_mode: MergeMode,
    h_step: f64,
    tol: f64,
    elements: usize,
    per_role: BTreeMap<String, f64>,
    max_rel_err: f64,
    worst_param: String,
    pass: bool,
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32> {
    let fusion = FusionConfig {
        d: args.d,
        k: args.k,
        merge_mode: args.merge_mode,
        ..FusionConfig::default()
    };
    fusion.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let shape = [args.d, args.height, args.width];
    let pair = FeatureMapPair::new(
        probe_tensor(&mut rng, &shape, 1.0),
        probe_tensor(&mut rng, &shape, 1.0),
    )?;

    let mut store = crate::tape::ParamStore::new();
    let params = FusionParams::init(&mut store, &fusion, &mut rng)?;
    // The initialization zeroes the feedback MLP's output layer, which
    // leaves several groups with exactly zero gradient — a vacuous check.
    // Kicking every element off its starting point puts real gradient
    // through all of them.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).value.data_mut() {
            *x += rng.gen::<f64>() * 0.1 - 0.05;
        }
    }
    let report = finite_diff_check(&mut store, args.h_step, |store, tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode draws nothing
        let out = irdfusion_forward(tape, store, &params, &fusion, &pair, ForwardOptions::eval(), &mut rng)?;
        Ok(tape.sum(out.tokens))
    })?;

    let pass = report.passes(args.tol);
    let artifact = GradCheckArtifact {
        version: VERSION.to_string(),
        k: args.k,
        d: args.d,
        height: args.height,
        width: args.width,
        merge_mode: args.merge_mode,
        h_step: args.h_step,
        tol: args.tol,
        elements: report.elements,
        per_role: report.per_role.clone(),
        max_rel_err: report.max_rel_err,
        worst_param: report.worst_param.clone(),
        pass,
    };
    print_json(&artifact)?;
    if let Some(path) = &args.out {
        write_json_file(path, &artifact)?;
    }
    Ok(if pass { 0 } else { 2 })
}
