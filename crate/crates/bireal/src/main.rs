//! Command-line surface: train, eval, analyze, capability.

use bireal::analysis::{compare, cost_report, CostReport};
use bireal::data::DatasetSource;
use bireal::io::{load_model, save_model};
use bireal::model::{capability_report, NetworkSpec, Variant};
use bireal::net::WeightUpdate;
use bireal::ops::{ScaleScope, SurrogateKind};
use bireal::trainer::{evaluate, train_full, InitKind, TrainConfig};
use bireal::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bireal",
    version,
    about = "Train, evaluate, and cost-analyze binary convolutional networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full training pipeline and write an inference-ready model.
    Train(TrainArgs),
    /// Evaluate a model file over the packed binary trunk.
    Eval(EvalArgs),
    /// Per-layer storage bits and multiplication counts for a network.
    Analyze(AnalyzeArgs),
    /// Per-layer representational capability counts.
    Capability(CapabilityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Clip,
    Relu,
    Random,
}

impl From<InitArg> for InitKind {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Clip => InitKind::Clip,
            InitArg::Relu => InitKind::Relu,
            InitArg::Random => InitKind::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightUpdateArg {
    /// Plain sign binarization with the gated pass-through update.
    Original,
    /// Mean-magnitude scaled sign with the distance-aware update.
    MagnitudeAware,
}

impl From<WeightUpdateArg> for WeightUpdate {
    fn from(v: WeightUpdateArg) -> Self {
        match v {
            WeightUpdateArg::Original => WeightUpdate::OriginalSte,
            WeightUpdateArg::MagnitudeAware => WeightUpdate::MagnitudeAware,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ActBackwardArg {
    /// Pass-through gate on |x| < 1.
    Clip,
    /// Derivative of the piecewise-polynomial relaxation.
    Poly,
}

impl From<ActBackwardArg> for SurrogateKind {
    fn from(v: ActBackwardArg) -> Self {
        match v {
            ActBackwardArg::Clip => SurrogateKind::ClipSte,
            ActBackwardArg::Poly => SurrogateKind::PiecewisePoly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerKernel,
    PerLayer,
}

impl From<ScopeArg> for ScaleScope {
    fn from(v: ScopeArg) -> Self {
        match v {
            ScopeArg::PerKernel => ScaleScope::PerKernel,
            ScopeArg::PerLayer => ScaleScope::PerLayer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Bireal,
    Resnet,
    Plain,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Bireal => Variant::BiReal,
            VariantArg::Resnet => Variant::ResNetStyle,
            VariantArg::Plain => Variant::Plain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    /// The same topology with every parameter and multiplication at 32 bits.
    FullPrecision,
    /// The network against itself; all ratios come out 1.0.
    #[value(name = "self")]
    Itself,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name (bireal18, bireal34, tiny, micro, demo32) or path to a
    /// spec JSON file.
    #[arg(long)]
    spec: String,
    /// Block style override: bireal, resnet, or plain.
    #[arg(long)]
    variant: Option<VariantArg>,
    /// synthetic[:train=N,test=N,spread=X] or idx:<4 comma-separated paths>.
    /// Synthetic data is generated from --seed, so a later eval with the
    /// same source string and seed sees the same samples.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, value_enum, default_value_t = InitArg::Clip)]
    init: InitArg,
    #[arg(long, value_enum, default_value_t = WeightUpdateArg::MagnitudeAware)]
    weight_update: WeightUpdateArg,
    #[arg(long, value_enum, default_value_t = ActBackwardArg::Poly)]
    act_backward: ActBackwardArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::PerKernel)]
    scale_scope: ScopeArg,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Comma-separated epochs at which the learning rate divides by 10;
    /// defaults to 50% and 75% of the epoch budget.
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Run report JSON; defaults to the model path with extension
    /// `report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Same forms as for train; synthetic data regenerates from --seed.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    spec: String,
    /// Override the spec's input size, e.g. 224x224.
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long, value_enum, default_value_t = BaselineArg::FullPrecision)]
    baseline: BaselineArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CapabilityArgs {
    #[arg(long)]
    spec: String,
    #[arg(long)]
    variant: Option<VariantArg>,
    #[arg(long)]
    json: bool,
}

fn resolve_spec(s: &str) -> Result<NetworkSpec> {
    let path = Path::new(s);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let spec: NetworkSpec =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{s}: {e}")))?;
        spec.validate()?;
        Ok(spec)
    } else {
        NetworkSpec::preset(s)
    }
}

fn parse_input_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidConfig(format!("input size `{s}` is not HxW")))?;
    let h = h
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad input height `{h}`")))?;
    let w = w
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad input width `{w}`")))?;
    Ok((h, w))
}

fn parse_milestones(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad milestone `{p}`")))
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut spec = resolve_spec(&args.spec)?;
    if let Some(v) = args.variant {
        spec = spec.with_variant(v.into());
        spec.validate()?;
    }
    let mut cfg = TrainConfig::desk_default(args.epochs);
    cfg.init = args.init.into();
    cfg.weight_update = args.weight_update.into();
    cfg.act_backward = args.act_backward.into();
    cfg.scale_scope = args.scale_scope.into();
    cfg.pretrain_epochs = args.pretrain_epochs;
    cfg.batch_size = args.batch;
    cfg.lr = args.lr;
    cfg.seed = args.seed;
    if let Some(m) = &args.milestones {
        cfg.milestones = parse_milestones(m)?;
    }
    cfg.validate()?;

    let source = DatasetSource::parse(&args.data)?;
    let data = source.load(&spec, cfg.seed)?;
    println!(
        "training {} ({:?}) on {} train / {} test samples",
        spec.name,
        spec.variant,
        data.train.len(),
        data.test.len()
    );

    let (params, report) = train_full(&spec, &data, &cfg)?;

    println!("{:<10} {:>5} {:>9} {:>9} {:>10} {:>8}", "phase", "epoch", "lr", "loss", "train acc", "val acc");
    for r in &report.epochs {
        println!(
            "{:<10} {:>5} {:>9.5} {:>9.4} {:>10.4} {:>8.4}",
            r.phase, r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
        );
    }
    println!("final val acc (float binary path): {:.4}", report.final_val_acc);
    if let Some(t5) = report.final_val_top5 {
        println!("final val top-5:                   {t5:.4}");
    }
    println!("post-collapse val acc (packed):    {:.4}", report.post_absorb_val_acc);
    println!("prediction agreement:              {:.4}", report.infer_vs_train_agreement);

    save_model(&args.out, &spec, &params)?;
    let model_bytes = std::fs::metadata(&args.out)?.len();
    println!("model written to {} ({model_bytes} bytes)", args.out.display());

    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    std::fs::write(&report_path, json)?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (spec, params) = load_model(&args.model)?;
    let source = DatasetSource::parse(&args.data)?;
    let data = source.load(&spec, args.seed)?;
    let r = evaluate(&params, &spec, &data.test, bireal::net::Mode::BinaryInfer)?;
    if args.json {
        let payload = serde_json::json!({
            "network": spec.name,
            "samples": data.test.len(),
            "top1": r.top1,
            "top5": r.top5,
            "inference_ready": params.inference_ready,
        });
        println!("{payload}");
    } else {
        println!(
            "{}: top-1 {:.4} over {} samples{}",
            spec.name,
            r.top1,
            data.test.len(),
            if params.inference_ready { "" } else { " (model not collapsed; packed trunk uses raw weight signs)" }
        );
        if let Some(t5) = r.top5 {
            println!("{}: top-5 {:.4}", spec.name, t5);
        }
    }
    Ok(())
}

fn print_cost_table(r: &CostReport) {
    println!(
        "network {} ({:?}), input {}x{}",
        r.network, r.variant, r.input_height, r.input_width
    );
    println!(
        "{:<22} {:>12} {:>14} {:>14} {:>14}",
        "layer", "real params", "binary params", "real mults", "binary mults"
    );
    for row in &r.rows {
        println!(
            "{:<22} {:>12} {:>14} {:>14} {:>14}",
            row.name, row.real_params, row.binary_params, row.real_mults, row.binary_mults
        );
    }
    println!(
        "{:<22} {:>12} {:>14} {:>14} {:>14}",
        "totals", r.total_real_params, r.total_binary_params, r.total_real_mults, r.total_binary_mults
    );
    println!(
        "memory: {} bits ({:.2} Mbit), full-precision twin {} bits ({:.2} Mbit), {:.2}x smaller",
        r.memory_bits,
        r.memory_bits as f64 / 1e6,
        r.twin_memory_bits,
        r.twin_memory_bits as f64 / 1e6,
        r.memory_saving_ratio
    );
    println!(
        "flops: {:.4e} (binary mults at 1/64), full-precision twin {:.4e}, {:.2}x cheaper",
        r.flops, r.twin_flops as f64, r.speedup_ratio
    );
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let spec = resolve_spec(&args.spec)?;
    let input_hw = args.input_size.as_deref().map(parse_input_size).transpose()?;
    let report = cost_report(&spec, input_hw)?;
    let (baseline_name, memory_ratio, flops_ratio) = match args.baseline {
        BaselineArg::FullPrecision => (
            "full-precision",
            report.memory_saving_ratio,
            report.speedup_ratio,
        ),
        BaselineArg::Itself => {
            let c = compare(&report, &report);
            ("self", c.memory_ratio, c.flops_ratio)
        }
    };
    if args.json {
        let payload = serde_json::json!({
            "report": report,
            "baseline": baseline_name,
            "memory_ratio": memory_ratio,
            "flops_ratio": flops_ratio,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&payload)
                .map_err(|e| Error::Format(format!("report encode: {e}")))?
        );
    } else {
        print_cost_table(&report);
        println!(
            "baseline {baseline_name}: memory ratio {memory_ratio:.4}, flops ratio {flops_ratio:.4}"
        );
    }
    Ok(())
}

fn cmd_capability(args: CapabilityArgs) -> Result<()> {
    let mut spec = resolve_spec(&args.spec)?;
    if let Some(v) = args.variant {
        spec = spec.with_variant(v.into());
        spec.validate()?;
    }
    let report = capability_report(&spec)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("report encode: {e}")))?
        );
    } else {
        println!("network {} ({:?})", report.network, report.variant);
        println!(
            "{:<26} {:>14} {:>12} {:>16}",
            "layer", "values/entry", "entries", "log2 capability"
        );
        for row in &report.rows {
            println!(
                "{:<26} {:>14} {:>12} {:>16.2}",
                row.name, row.values_per_entry, row.num_entries, row.log2_total
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Capability(a) => cmd_capability(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
