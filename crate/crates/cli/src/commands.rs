use std::path::{Path, PathBuf};

use camfusion::baselines::FusionStrategy;
use camfusion::data::{gen_synthetic, split_holdout, ClassVocabulary, Dataset, SynthConfig};
use camfusion::evaluate::{
    evaluate_fused, fuse_dataset, read_fused, scoring_for, write_fused, EvalOptions, EvalTask,
};
use camfusion::gradcheck::{all_ops, run as run_gradcheck, GradcheckConfig};
use camfusion::metrics::{ApIntegration, InstanceMetrics, MetricsReport};
use camfusion::model::Parameters;
use camfusion::trainer::{self, AblationMode, TrainConfig, TrainOutputs};
use clap::Args;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::Common;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] camfusion::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        use camfusion::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::GradcheckFailed(_) | CliError::Core(E::Numerical { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Defaults, then the JSON file, then flags (applied by the caller). A run
/// manifest is accepted too; its `config` object is used.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    if value.get("subcommand").is_some() {
        if let Some(inner) = value.get("config") {
            value = inner.clone();
        }
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn prepare_out_dir(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out_dir).map_err(camfusion::Error::from)?;
    Ok(())
}

fn say(common: &Common, line: impl AsRef<str>) {
    if !common.quiet {
        println!("{}", line.as_ref());
    }
}

macro_rules! set {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag {
            $target = v;
        }
    };
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractor: Option<f64>,
    #[arg(long)]
    imbalance: Option<f64>,
    /// Also write a per-class held-out split (train.ndjson, test.ndjson).
    #[arg(long)]
    test_fraction: Option<f64>,
}

pub fn gen_synth(common: &Common, a: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(common.config.as_deref())?;
    set!(cfg.num_classes, a.classes);
    set!(cfg.instances_per_class, a.per_class);
    set!(cfg.views_per_instance, a.views);
    set!(cfg.descriptor_dim, a.dim);
    set!(cfg.parts_per_class, a.parts);
    set!(cfg.noise_std, a.noise);
    set!(cfg.distractor_strength, a.distractor);
    set!(cfg.imbalance, a.imbalance);
    set!(cfg.seed, common.seed);
    cfg.validate()?;
    prepare_out_dir(common)?;
    let out = &common.out_dir;
    let mut manifest = RunManifest::new(
        "gen-synth",
        Some(cfg.seed),
        &cfg,
        json!({ "test_fraction": a.test_fraction }),
    )?;
    let files: Vec<PathBuf> = match a.test_fraction {
        Some(_) => vec![out.join("train.ndjson"), out.join("test.ndjson"), out.join("vocab.ndjson")],
        None => vec![out.join("dataset.ndjson"), out.join("vocab.ndjson")],
    };
    files.iter().for_each(|f| manifest.artifact(f));
    manifest.write(out)?;

    let (ds, vocab) = gen_synthetic(&cfg)?;
    match a.test_fraction {
        Some(fraction) => {
            let (train, test, vocab) = split_holdout(&ds, &vocab, fraction, cfg.seed)?;
            train.write(&files[0])?;
            test.write(&files[1])?;
            vocab.write(&files[2])?;
            say(common, format!("wrote {} train and {} test instances", train.len(), test.len()));
        }
        None => {
            ds.write(&files[0])?;
            vocab.write(&files[1])?;
            say(common, format!("wrote {} instances", ds.len()));
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    views_in: Option<usize>,
    #[arg(long)]
    views_target: Option<usize>,
    /// class-only | resampling | multiview | final
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    period: Option<u64>,
    #[arg(long)]
    cycle_decay: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
}

fn load_data(data: &Path, vocab: &Path) -> Result<(Dataset, ClassVocabulary)> {
    let ds = Dataset::read(data)?;
    let vocab = ClassVocabulary::read(vocab)?;
    ds.check_vocabulary(&vocab)?;
    Ok((ds, vocab))
}

pub fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    set!(cfg.epochs, a.epochs);
    set!(cfg.sampler.batch_size, a.batch_size);
    set!(cfg.sampler.views_in, a.views_in);
    set!(cfg.sampler.views_target, a.views_target);
    set!(cfg.mode, a.mode);
    set!(cfg.schedule.lr_max, a.lr_max);
    set!(cfg.schedule.lr_min, a.lr_min);
    set!(cfg.schedule.period, a.period);
    set!(cfg.schedule.cycle_decay, a.cycle_decay);
    set!(cfg.optimizer.weight_decay, a.weight_decay);
    set!(cfg.checkpoint_every, a.checkpoint_every);
    set!(cfg.model.model_dim, a.model_dim);
    set!(cfg.model.num_blocks, a.blocks);
    set!(cfg.model.num_heads, a.heads);
    set!(cfg.model.mlp_hidden, a.mlp_hidden);
    set!(cfg.seed, common.seed);
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    let (ds, vocab) = load_data(&a.data, &a.vocab)?;
    // the descriptor dimension is a property of the data
    cfg.model.descriptor_dim = ds.descriptor_dim();
    cfg.validate()?;
    prepare_out_dir(common)?;
    let out = &common.out_dir;
    let checkpoint = out.join("model.json");
    let log_path = out.join("train_log.ndjson");
    let mut manifest = RunManifest::new(
        "train",
        Some(cfg.seed),
        &cfg,
        json!({ "data": a.data, "vocab": a.vocab }),
    )?;
    manifest.input(&a.data)?;
    manifest.input(&a.vocab)?;
    manifest.artifact(&checkpoint);
    manifest.artifact(&trainer::blob_path(&checkpoint));
    manifest.artifact(&log_path);
    manifest.write(out)?;

    let spe = cfg.steps_per_epoch(ds.len());
    let mut epoch_sum = 0.0;
    let outputs = TrainOutputs {
        checkpoint: Some(checkpoint.clone()),
    };
    let outcome = trainer::train(&ds, &vocab, &cfg, &outputs, |r| {
        epoch_sum += r.loss_total;
        if (r.step as usize + 1) % spe == 0 {
            say(
                common,
                format!(
                    "epoch {:>4}  mean loss {:.6}  lr {:.3e}",
                    r.epoch,
                    epoch_sum / spe as f64,
                    r.lr
                ),
            );
            epoch_sum = 0.0;
        }
    })?;
    trainer::write_log(&log_path, &outcome.log)?;
    say(common, format!("checkpoint {}", checkpoint.display()));
    Ok(())
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// avg | l1med | cosmed | learned
    #[arg(long, default_value = "avg")]
    fusion: FusionStrategy,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Best-visibility views per instance.
    #[arg(long)]
    views: Option<usize>,
}

fn load_params(strategy: FusionStrategy, checkpoint: Option<&Path>) -> Result<Option<Parameters>> {
    match (strategy, checkpoint) {
        (FusionStrategy::Learned, None) => Err(CliError::Usage(
            "--fusion learned needs --checkpoint".into(),
        )),
        (_, Some(path)) => Ok(Some(trainer::load_checkpoint(path)?.0)),
        (_, None) => Ok(None),
    }
}

pub fn fuse(common: &Common, a: FuseArgs) -> Result<()> {
    let mut opts: EvalOptions = load_config(common.config.as_deref())?;
    set!(opts.views, a.views);
    let params = load_params(a.fusion, a.checkpoint.as_deref())?;
    prepare_out_dir(common)?;
    let out_path = common.out_dir.join("fused.ndjson");
    let mut manifest = RunManifest::new(
        "fuse",
        common.seed,
        &opts,
        json!({ "data": a.data, "fusion": a.fusion, "checkpoint": a.checkpoint }),
    )?;
    manifest.input(&a.data)?;
    if let Some(c) = &a.checkpoint {
        manifest.input(c)?;
        manifest.input(&trainer::blob_path(c))?;
    }
    manifest.artifact(&out_path);
    manifest.write(&common.out_dir)?;

    let ds = Dataset::read(&a.data)?;
    let fused = fuse_dataset(&ds, a.fusion, params.as_ref(), opts.views)?;
    write_fused(&out_path, &fused)?;
    say(common, format!("fused {} instances with {}", fused.len(), a.fusion));
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Fused descriptors from `fuse`; fused on the fly when absent.
    #[arg(long)]
    fused: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionStrategy>,
    /// Supplies the learned model and its sigmoid scoring.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    /// semantic | instance | both
    #[arg(long)]
    task: Option<EvalTask>,
    #[arg(long)]
    topk: Option<usize>,
    /// raw | interpolated
    #[arg(long, value_parser = parse_ap)]
    ap_integration: Option<ApIntegration>,
}

fn parse_ap(s: &str) -> std::result::Result<ApIntegration, String> {
    match s {
        "raw" => Ok(ApIntegration::Raw),
        "interpolated" => Ok(ApIntegration::Interpolated),
        other => Err(format!("unknown AP integration {other:?}")),
    }
}

pub fn eval(common: &Common, a: EvalArgs) -> Result<()> {
    let mut opts: EvalOptions = load_config(common.config.as_deref())?;
    set!(opts.views, a.views);
    set!(opts.task, a.task);
    set!(opts.topk, a.topk);
    set!(opts.ap_integration, a.ap_integration);
    let strategy = a.fusion.unwrap_or(if a.checkpoint.is_some() {
        FusionStrategy::Learned
    } else {
        FusionStrategy::AvgPool
    });
    let params = load_params(strategy, a.checkpoint.as_deref())?;
    prepare_out_dir(common)?;
    let out_path = common.out_dir.join("metrics.json");
    let mut manifest = RunManifest::new(
        "eval",
        common.seed,
        &opts,
        json!({
            "data": a.data, "vocab": a.vocab, "fused": a.fused,
            "fusion": strategy, "checkpoint": a.checkpoint,
        }),
    )?;
    manifest.input(&a.data)?;
    manifest.input(&a.vocab)?;
    for p in a.fused.iter().chain(&a.checkpoint) {
        manifest.input(p)?;
    }
    manifest.artifact(&out_path);
    manifest.write(&common.out_dir)?;

    let (ds, vocab) = load_data(&a.data, &a.vocab)?;
    let fused = match &a.fused {
        Some(path) => read_fused(path)?,
        None => fuse_dataset(&ds, strategy, params.as_ref(), opts.views)?,
    };
    let scoring = scoring_for(strategy, params.as_ref());
    let report = evaluate_fused(&ds, &fused, &vocab, scoring, strategy.as_str(), &opts)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(camfusion::Error::from)?;
    text.push('\n');
    std::fs::write(&out_path, text).map_err(camfusion::Error::from)?;
    if !common.quiet {
        print_table(&report);
    }
    Ok(())
}

fn print_table(r: &MetricsReport) {
    println!("{:<22} {}", "fusion", r.fusion);
    println!("{:<22} {}", "instances", r.instances);
    println!("{:<22} {:.4}", "top1_accuracy", r.top1_accuracy);
    if let Some(s) = &r.semantic {
        for (k, v) in [("mIoU", s.miou), ("mAcc", s.macc), ("f-IoU", s.f_iou), ("f-Acc", s.f_acc)] {
            println!("{k:<22} {v:.4}");
        }
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let rows = |label: &str, m: &InstanceMetrics| {
        println!("{:<22} {:.4}", format!("{label} mAP"), m.map);
        println!("{:<22} {:.4}", format!("{label} mAP50"), m.map50);
        println!("{:<22} {:.4}", format!("{label} mAP25"), m.map25);
        println!("{:<22} {}", format!("{label} mAP head"), opt(m.map_head));
        println!("{:<22} {}", format!("{label} mAP common"), opt(m.map_common));
        println!("{:<22} {}", format!("{label} mAP tail"), opt(m.map_tail));
    };
    if let Some(m) = &r.instance_top1 {
        rows("top1", m);
    }
    if let Some(m) = &r.instance_topk {
        rows("topk", m);
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Restrict to one or more ops; all when absent.
    #[arg(long)]
    op: Vec<String>,
    #[arg(long)]
    cases: Option<usize>,
    /// Run this many consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seed_sweep: u64,
}

pub fn gradcheck(common: &Common, a: GradcheckArgs) -> Result<()> {
    let mut cfg: GradcheckConfig = load_config(common.config.as_deref())?;
    set!(cfg.cases, a.cases);
    set!(cfg.seed, common.seed);
    let known = all_ops();
    for op in &a.op {
        if !known.contains(&op.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown op {op:?}; expected one of {}",
                known.join(", ")
            )));
        }
    }
    let ops: Vec<&str> = if a.op.is_empty() {
        known
    } else {
        a.op.iter().map(String::as_str).collect()
    };
    prepare_out_dir(common)?;
    let out_path = common.out_dir.join("gradcheck.json");
    let mut manifest = RunManifest::new(
        "gradcheck",
        Some(cfg.seed),
        &cfg,
        json!({ "op": a.op, "seed_sweep": a.seed_sweep }),
    )?;
    manifest.artifact(&out_path);
    manifest.write(&common.out_dir)?;

    let mut failed = Vec::new();
    let mut all = Vec::new();
    for s in 0..a.seed_sweep.max(1) {
        let seed_cfg = GradcheckConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        say(common, format!("seed {}", seed_cfg.seed));
        let reports = run_gradcheck(&ops, &seed_cfg)?;
        for r in &reports {
            say(
                common,
                format!(
                    "  {:<18} {:>4} cases  worst rel err {:.3e}  {}",
                    r.op,
                    r.cases,
                    r.worst_rel_err,
                    if r.passed { "PASS" } else { "FAIL" }
                ),
            );
            if !r.passed {
                failed.push(format!("{} (seed {})", r.op, seed_cfg.seed));
            }
        }
        all.push(json!({ "seed": seed_cfg.seed, "reports": reports }));
    }
    let mut text = serde_json::to_string_pretty(&all).map_err(camfusion::Error::from)?;
    text.push('\n');
    std::fs::write(&out_path, text).map_err(camfusion::Error::from)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}
