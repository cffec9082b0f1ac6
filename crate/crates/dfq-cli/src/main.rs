//! Command-line driver: pretrain a teacher, run data-free quantization,
//! audit mode consistency, evaluate archives, export synthetic samples,
//! and run sweep/ablation grids.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dfq::archive;
use dfq::attention::{attention_matrix, export_heatmap, position_index};
use dfq::data::load_data_spec;
use dfq::error::Result;
use dfq::graph::Mode;
use dfq::imageio::{chw_to_rgb8, write_ppm};
use dfq::metrics::{
    ablation_harness, mode_consistency, sweep_harness, Component, SampleSet,
};
use dfq::pretrain::{accuracy, pretrain_teacher, PretrainConfig};
use dfq::quant::parse_bits;
use dfq::rng::SeedStream;
use dfq::train::{run, RunReport, TrainConfig};

#[derive(Parser)]
#[command(name = "dfq", version, about = "Data-free network quantization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a full-precision teacher on a dataset
    Pretrain(PretrainArgs),
    /// Train a generator against a teacher and quantization-aware-train a
    /// low-bit student on the synthetic samples
    Quantize(QuantizeArgs),
    /// Dual-mode consistency audit of a sample source against a teacher
    Audit(AuditArgs),
    /// Accuracy of a model archive on a dataset
    Eval(EvalArgs),
    /// Export synthetic samples (PPM) and their attention maps (PGM)
    GenSamples(GenSamplesArgs),
    /// Student accuracy across one hyperparameter's values
    Sweep(SweepArgs),
    /// Component ablation grid
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Architecture name (tiny-resnet, tiny-plain)
    #[arg(long)]
    spec: String,
    /// Dataset: `shapes:train=5000,test=1000,classes=10,seed=7` or a
    /// CIFAR-10 binary directory
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    /// Output archive directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Pretrained teacher archive
    #[arg(long)]
    model: PathBuf,
    /// Bit widths, e.g. `4w4a`
    #[arg(long, default_value = "4w4a")]
    bits: String,
    /// Training config JSON (flags below override its fields)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (student/ and generator/ archives)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-iteration JSON-lines log file
    #[arg(long)]
    iter_log: Option<PathBuf>,
    /// Dataset for the final accuracy numbers
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Disable components: comma list of cacm, ad, penalty
    #[arg(long)]
    disable: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Teacher archive
    #[arg(long)]
    model: PathBuf,
    /// Sample source: a generator archive directory or a dataset spec
    /// (the test split is used)
    #[arg(long)]
    samples: String,
    #[arg(long, default_value_t = 960)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Model archive (teacher or student)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    /// Forward mode: eval or train
    #[arg(long, default_value = "eval")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenSamplesArgs {
    /// Generator archive
    #[arg(long)]
    generator: PathBuf,
    /// Teacher archive; enables attention-map export
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Pretrained teacher archive
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    /// Loss weight to sweep (gamma, alpha, beta, pen-ce, pen-bns,
    /// pen-cacm, tau, relax-cacm)
    #[arg(long)]
    param: String,
    /// Comma-separated values
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Runs per value (seeds seed..seed+runs)
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Pretrained teacher archive
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    /// Components under study, comma list (default all three)
    #[arg(long, default_value = "cacm,ad,penalty")]
    components: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Runs per row (seeds seed..seed+runs)
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Audit(a) => cmd_audit(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::GenSamples(a) => cmd_gen_samples(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn emit_report<T: Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, &text)?;
            eprintln!("report written to {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let (train, test) = load_data_spec(&a.data)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (teacher, report) = pretrain_teacher(&train, &test, &a.spec, &cfg)?;
    archive::save_graph(&teacher, &a.out)?;
    eprintln!(
        "teacher saved to {} ({} parameters, eval accuracy {:.4})",
        a.out.display(),
        teacher.param_count(),
        report.test_accuracy_eval
    );
    emit_report(&report, a.report.as_deref())
}

#[derive(Serialize)]
struct QuantizeReport {
    run: RunReport,
    fp_accuracy: Option<f32>,
    student_accuracy: Option<f32>,
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let teacher = archive::load_graph(&a.model)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    let (bw, ba) = parse_bits(&a.bits)?;
    cfg.bits_w = bw;
    cfg.bits_a = ba;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.iters_per_epoch {
        cfg.iters_per_epoch = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(list) = &a.disable {
        for part in list.split(',').filter(|s| !s.is_empty()) {
            match part.parse::<Component>()? {
                Component::Cacm => cfg.enable_cacm = false,
                Component::Ad => cfg.enable_ad = false,
                Component::Penalty => cfg.enable_penalty = false,
            }
        }
    }

    let mut log_file = match &a.iter_log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            Some(fs::File::create(p)?)
        }
        None => None,
    };
    let started = std::time::Instant::now();
    let outcome = run(
        &cfg,
        &teacher,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    )?;
    eprintln!(
        "{} iterations in {:.1}s",
        outcome.report.iterations,
        started.elapsed().as_secs_f64()
    );

    archive::save_graph(&outcome.student, &a.out.join("student"))?;
    archive::save_generator(&outcome.generator, &a.out.join("generator"))?;

    let (fp_accuracy, student_accuracy) = match &a.data {
        Some(spec) => {
            let (_, test) = load_data_spec(spec)?;
            (
                Some(accuracy(&teacher, &test, Mode::Eval, 100)?),
                Some(accuracy(&outcome.student, &test, Mode::Eval, 100)?),
            )
        }
        None => (None, None),
    };
    let report = QuantizeReport { run: outcome.report, fp_accuracy, student_accuracy };
    emit_report(&report, a.report.as_deref())
}

fn cmd_audit(a: AuditArgs) -> Result<()> {
    let teacher = archive::load_graph(&a.model)?;
    let source = Path::new(&a.samples);
    let raw = if source.join("model.json").is_file() {
        let gen = archive::load_generator(source)?;
        SampleSet::synthesize(&gen, a.count, a.batch_size.max(2), a.seed)?
    } else {
        let (_, test) = load_data_spec(&a.samples)?;
        SampleSet::from_dataset(&test, a.count)
    };
    let correct = raw.filter_eval_correct(&teacher, 100)?;
    eprintln!(
        "{} of {} samples are eval-mode-correct",
        correct.len(),
        raw.len()
    );
    let report = mode_consistency(&teacher, &correct, a.batch_size)?;
    emit_report(&report, a.report.as_deref())
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f32,
    samples: usize,
    mode: String,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = archive::load_graph(&a.model)?;
    let (_, test) = load_data_spec(&a.data)?;
    let mode = match a.mode.as_str() {
        "eval" => Mode::Eval,
        "train" => Mode::Train,
        other => {
            return Err(dfq::Error::invalid("eval", format!("mode `{other}` (eval or train)")))
        }
    };
    let acc = accuracy(&model, &test, mode, if mode == Mode::Train { 16 } else { 100 })?;
    emit_report(&EvalReport { accuracy: acc, samples: test.len(), mode: a.mode }, None)
}

#[derive(Serialize)]
struct SampleIndexEntry {
    file: String,
    class: usize,
    position: usize,
    attention_file: Option<String>,
    attention_center: Option<(usize, usize)>,
    attention_center_index: Option<usize>,
}

fn cmd_gen_samples(a: GenSamplesArgs) -> Result<()> {
    let gen = archive::load_generator(&a.generator)?;
    let teacher = a.model.as_deref().map(archive::load_graph).transpose()?;
    fs::create_dir_all(&a.out_dir)?;
    let mut rng = SeedStream::new(a.seed);
    let classes = gen.config.num_classes;
    let grid = gen.config.grid_h * gen.config.grid_w;
    let (oh, ow) = gen.output_hw();
    let mut index = Vec::with_capacity(a.count);

    let mut done = 0;
    while done < a.count {
        let n = 16.min(a.count - done).max(2);
        let y: Vec<usize> = (0..n).map(|_| rng.uniform_int(classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.uniform_int(grid)).collect();
        let z = rng.normal_tensor(&[n, gen.config.z_dim]);
        let x = gen.generate(&z, &y, &p)?;
        let maps = match &teacher {
            Some(t) => {
                let backbone = t.forward(&x, Mode::Eval, false)?.backbone;
                Some(attention_matrix(&backbone, Mode::Eval)?)
            }
            None => None,
        };
        for i in 0..n {
            if done + i >= a.count {
                break;
            }
            let idx = done + i;
            let file = format!("sample_{idx:04}_y{}_p{}.ppm", y[i], p[i]);
            let rgb = chw_to_rgb8(&x.data()[i * 3 * oh * ow..(i + 1) * 3 * oh * ow], oh, ow);
            write_ppm(&a.out_dir.join(&file), ow, oh, &rgb)?;
            let (attention_file, attention_center, attention_center_index) = match &maps {
                Some(maps) => {
                    let name = format!("attn_{idx:04}.pgm");
                    export_heatmap(&maps[i], oh, ow, &a.out_dir.join(&name))?;
                    (
                        Some(name),
                        Some(maps[i].center),
                        Some(position_index(maps[i].center, maps[i].w)),
                    )
                }
                None => (None, None, None),
            };
            index.push(SampleIndexEntry {
                file,
                class: y[i],
                position: p[i],
                attention_file,
                attention_center,
                attention_center_index,
            });
        }
        done += n;
    }
    fs::write(a.out_dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    eprintln!("{} samples written to {}", a.count, a.out_dir.display());
    Ok(())
}

fn base_config(config: &Option<PathBuf>, seed: u64) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let teacher = archive::load_graph(&a.model)?;
    let (_, test) = load_data_spec(&a.data)?;
    let cfg = base_config(&a.config, a.seed)?;
    let values: Vec<f32> = a
        .values
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| dfq::Error::invalid("sweep", format!("bad value `{s}`")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(dfq::Error::invalid("sweep", "no values given"));
    }
    let seeds: Vec<u64> = (0..a.runs.max(1) as u64).map(|i| a.seed + i).collect();
    let report = sweep_harness(&cfg, &teacher, &test, &a.param, &values, &seeds)?;
    for row in &report.rows {
        println!("{}={:0.4}  accuracy {:.4} ± {:.4}", report.param, row.value, row.mean, row.std);
    }
    emit_report(&report, a.report.as_deref())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let teacher = archive::load_graph(&a.model)?;
    let (_, test) = load_data_spec(&a.data)?;
    let cfg = base_config(&a.config, a.seed)?;
    let components: Vec<Component> = a
        .components
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..a.runs.max(1) as u64).map(|i| a.seed + i).collect();
    let report = ablation_harness(&cfg, &teacher, &test, &components, &seeds)?;
    for row in &report.rows {
        let flag = |b: bool| if b { "on " } else { "off" };
        println!(
            "matching {}  adversarial {}  penalty {}  accuracy {:.4} ± {:.4}",
            flag(row.cacm),
            flag(row.ad),
            flag(row.penalty),
            row.mean,
            row.std
        );
    }
    emit_report(&report, a.report.as_deref())
}
