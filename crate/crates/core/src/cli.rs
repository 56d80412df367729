//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::attack::{attack_batch, format_trace, AttackConfig, AttackResult, StepSchedule, Variant, WhiteBoxModel};
use crate::blackbox::{blackbox_attack, BlackboxConfig};
use crate::classifier::{train, ClassifierParams, TrainConfig, DEFAULT_HIDDEN};
use crate::defense::{
    DefendedClassifier, Purifier, DEFAULT_EOT_SAMPLES, DEFAULT_SOR_ALPHA, DEFAULT_SOR_K, DEFAULT_SRS_DROP,
};
use crate::error::{Error, Result};
use crate::eval::{
    default_grid, format_curve, format_summary, operating_characteristic, read_records, summarize,
    summary_header, write_records, EvalRecord, DEFAULT_GRID_POINTS,
};
use crate::geometry::{sample_shape, ShapeKind, DEFAULT_K};
use crate::io::{load_dataset, write_manifest, write_points, ManifestEntry, Sample};
use crate::metrics::{parse_regularizers, MetricId};
use crate::seed;

#[derive(Parser, Debug)]
#[command(name = "pcadv", version, about = "Adversarial point clouds: data, training, attacks, defenses, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a labelled synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train the point-cloud classifier.
    Train(TrainArgs),
    /// White-box attack on a trained classifier.
    Attack(AttackArgs),
    /// White-box attack through an input-purification defense.
    DefendAttack(DefendArgs),
    /// Label-only attack guided by a surrogate model.
    Blackbox(BlackboxArgs),
    /// Summarize a results table and emit its operating characteristic.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated shapes; label = position in the list.
    #[arg(long, default_value = "sphere,cube,cylinder,torus")]
    classes: String,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 1024)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    /// One regularizer, projected step.
    Base,
    /// Orthonormalized steps over all regularizers.
    Full,
}

#[derive(Args, Debug)]
struct RunOpts {
    #[arg(long)]
    data: PathBuf,
    /// Results CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated regularizers from l2, cd, hd, curv.
    #[arg(long = "reg", default_value = "l2")]
    reg: String,
    /// Neighborhood size for normals and curvature.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Leave the time_s column empty so reruns are byte-identical.
    #[arg(long)]
    no_time: bool,
    /// Method tag written to the results.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct WhiteBoxOpts {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long, default_value_t = 0.06)]
    step: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Fixed)]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = crate::attack::DEFAULT_DECAY)]
    decay: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for per-sample iteration traces.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    opts: WhiteBoxOpts,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DefenseArg {
    Sor,
    Srs,
}

#[derive(Args, Debug)]
struct DefendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    defense: DefenseArg,
    /// SOR neighborhood size.
    #[arg(long, default_value_t = DEFAULT_SOR_K)]
    sor_k: usize,
    #[arg(long, default_value_t = DEFAULT_SOR_ALPHA)]
    alpha: f64,
    /// Points removed by SRS.
    #[arg(long, default_value_t = DEFAULT_SRS_DROP)]
    drop: usize,
    /// Purifier draws averaged per gradient.
    #[arg(long, default_value_t = DEFAULT_EOT_SAMPLES)]
    eot: usize,
    #[command(flatten)]
    opts: WhiteBoxOpts,
}

#[derive(Args, Debug)]
struct BlackboxArgs {
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 0.32)]
    eps1: f64,
    #[arg(long, default_value_t = 0.16)]
    eps2: f64,
    /// Target queries per sample.
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    /// Recompute the surrogate gradient after every accepted probe.
    #[arg(long)]
    refresh_gradient: bool,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "l2")]
    oc_metric: String,
    #[arg(long)]
    oc_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for everything else. Failures print one line
/// `error[<kind>]: <message>` to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("usage error");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            match e {
                Error::UnsupportedMetric(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Attack(a) => attack_cmd(&a),
        Command::DefendAttack(a) => defend_cmd(&a),
        Command::Blackbox(a) => blackbox_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kinds = a
        .classes
        .split(',')
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<Result<Vec<_>>>()?;
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(Error::invalid(format!("class {k} listed twice")));
        }
    }
    if a.per_class == 0 {
        return Err(Error::invalid("per-class count must be positive"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut entries = Vec::new();
    for (label, &kind) in kinds.iter().enumerate() {
        for i in 0..a.per_class {
            let cloud = sample_shape(kind, a.points, seed::mix(a.seed, (label * a.per_class + i) as u64))?;
            let name = format!("{}_{i:04}.xyz", kind.name());
            write_points(&a.out.join(&name), &cloud)?;
            entries.push(ManifestEntry { path: name, label });
        }
    }
    write_manifest(&a.out, &entries)?;
    println!("wrote {} clouds in {} classes to {}", entries.len(), kinds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data: Vec<_> = load_dataset(&a.data)?.into_iter().map(|s| (s.cloud, s.label)).collect();
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        hidden: DEFAULT_HIDDEN,
        seed: a.seed,
    };
    let report = train(&data, &cfg)?;
    report.params.save(&a.out)?;
    println!("final training accuracy: {}", report.final_accuracy);
    Ok(())
}

fn sample_id(s: &Sample) -> String {
    s.path
        .file_stem()
        .map(|x| x.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn attack_config(o: &WhiteBoxOpts) -> Result<(AttackConfig, Variant)> {
    let cfg = AttackConfig {
        regularizers: parse_regularizers(&o.run.reg)?,
        step: o.step,
        schedule: match o.schedule {
            ScheduleArg::Fixed => StepSchedule::Fixed,
            ScheduleArg::Adaptive => StepSchedule::Adaptive { decay: o.decay },
        },
        max_iters: o.max_iters,
        k: o.run.k,
        seed: o.seed,
    };
    cfg.validate()?;
    let variant = match o.variant {
        VariantArg::Base => Variant::Base,
        VariantArg::Full => Variant::Full,
    };
    if variant == Variant::Base && cfg.regularizers.len() != 1 {
        return Err(Error::invalid("the base variant takes exactly one regularizer"));
    }
    Ok((cfg, variant))
}

fn method_tag(explicit: &Option<String>, default: &str, regs: &[MetricId]) -> String {
    explicit.clone().unwrap_or_else(|| {
        let names: Vec<&str> = regs.iter().map(|m| m.name()).collect();
        format!("{default}[{}]", names.join("+"))
    })
}

fn record(id: String, method: &str, res: &AttackResult, no_time: bool, queries: Option<usize>) -> EvalRecord {
    EvalRecord {
        sample_id: id,
        method: method.to_string(),
        success: res.success,
        distances: res.distances,
        time_s: (!no_time).then(|| res.wall_time.as_secs_f64()),
        queries,
    }
}

fn write_trace(dir: &Path, id: &str, res: &AttackResult) -> Result<()> {
    let path = dir.join(format!("{id}.tsv"));
    fs::write(&path, format_trace(&res.trace)).map_err(|e| Error::io(&path, e))
}

/// Splits a dataset into the samples `model` classifies correctly and the
/// count of skipped ones.
fn correctly_classified(
    samples: Vec<Sample>,
    predict: impl Fn(&Sample) -> Result<usize>,
) -> Result<(Vec<Sample>, usize)> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for s in samples {
        if predict(&s)? == s.label {
            kept.push(s);
        } else {
            skipped += 1;
        }
    }
    Ok((kept, skipped))
}

fn white_box_run<M: WhiteBoxModel + ?Sized>(
    model: &M,
    samples: Vec<Sample>,
    skipped: usize,
    o: &WhiteBoxOpts,
    default_method: &str,
) -> Result<()> {
    let (cfg, variant) = attack_config(o)?;
    let method = method_tag(&o.run.method, default_method, &cfg.regularizers);
    if let Some(dir) = &o.trace {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pairs: Vec<_> = samples.iter().map(|s| (s.cloud.clone(), s.label)).collect();
    let results = attack_batch(model, &pairs, &cfg, variant, o.run.jobs)?;
    let mut records = Vec::new();
    for (s, res) in samples.iter().zip(results) {
        let res = res?;
        let id = sample_id(s);
        if let Some(dir) = &o.trace {
            write_trace(dir, &id, &res)?;
        }
        records.push(record(id, &method, &res, o.run.no_time, None));
    }
    finish(&o.run.out, &records, skipped)
}

fn finish(out: &Path, records: &[EvalRecord], skipped: usize) -> Result<()> {
    write_records(out, records)?;
    let successes = records.iter().filter(|r| r.success).count();
    println!(
        "attacked {} samples, skipped {skipped} misclassified, {successes} succeeded",
        records.len()
    );
    Ok(())
}

fn attack_cmd(a: &AttackArgs) -> Result<()> {
    attack_config(&a.opts)?;
    let params = ClassifierParams::load(&a.model)?;
    let (samples, skipped) =
        correctly_classified(load_dataset(&a.opts.run.data)?, |s| Ok(params.predict(&s.cloud)))?;
    white_box_run(&params, samples, skipped, &a.opts, "eidos")
}

fn defend_cmd(a: &DefendArgs) -> Result<()> {
    attack_config(&a.opts)?;
    let purifier = match a.defense {
        DefenseArg::Sor => Purifier::Sor {
            k: a.sor_k,
            alpha: a.alpha,
        },
        DefenseArg::Srs => Purifier::Srs { drop: a.drop },
    };
    if a.eot == 0 {
        return Err(Error::invalid("EOT needs at least one sample"));
    }
    let model = DefendedClassifier {
        params: ClassifierParams::load(&a.model)?,
        purifier,
        eot_samples: a.eot,
        seed: a.opts.seed,
    };
    let (samples, skipped) =
        correctly_classified(load_dataset(&a.opts.run.data)?, |s| model.try_predict(&s.cloud))?;
    let tag = match a.defense {
        DefenseArg::Sor => "eidos-vs-sor",
        DefenseArg::Srs => "eidos-vs-srs",
    };
    white_box_run(&model, samples, skipped, &a.opts, tag)
}

fn blackbox_cmd(a: &BlackboxArgs) -> Result<()> {
    let cfg = BlackboxConfig {
        step_probe: a.eps1,
        step_refine: a.eps2,
        regularizers: parse_regularizers(&a.run.reg)?,
        budget: a.budget,
        k: a.run.k,
        refresh_gradient: a.refresh_gradient,
    };
    cfg.validate()?;
    let surrogate = ClassifierParams::load(&a.surrogate)?;
    let target = ClassifierParams::load(&a.target)?;
    let method = method_tag(&a.run.method, "eidos-blackbox", &cfg.regularizers);
    let (samples, skipped) =
        correctly_classified(load_dataset(&a.run.data)?, |s| Ok(target.predict(&s.cloud)))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.run.jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| blackbox_attack(&surrogate, &target, &s.cloud, s.label, &cfg))
            .collect()
    });
    let mut records = Vec::new();
    for (s, res) in samples.iter().zip(results) {
        let res = res?;
        records.push(record(
            sample_id(s),
            &method,
            &res.attack,
            a.run.no_time,
            Some(res.queries.total()),
        ));
    }
    finish(&a.run.out, &records, skipped)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let metric: MetricId = a.oc_metric.parse()?;
    let records = read_records(&a.results)?;
    let summary = summarize(&records)?;
    println!("{}", summary_header());
    println!("{}", format_summary(&summary));
    if let Some(out) = &a.oc_out {
        let grid = default_grid(&records, metric, a.grid_points);
        let curve = operating_characteristic(&records, metric, &grid)?;
        fs::write(out, format_curve(&curve)).map_err(|e| Error::io(out, e))?;
        if curve.empty {
            println!("no successful attacks; operating characteristic is identically zero");
        }
    }
    Ok(())
}
