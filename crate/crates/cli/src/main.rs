use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use udfc::harness::evaluate;
use udfc::io::{load_dataset, load_model, save_codes, save_model};
use udfc::pipeline::{compress, CompressionConfig, DEFAULT_ALPHA1, DEFAULT_ALPHA2};
use udfc::quant::{quantize_layer, Granularity};
use udfc::topology::{parse_shape, random_network};
use udfc::{Criterion, Error, Layer};

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_IO: u8 = 4;
const THREADS_ENV: &str = "UDFC_THREADS";

#[derive(Parser)]
#[command(name = "udfc", version, about = "Data-free channel pruning and weight quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerChannel,
    PerTensor,
}

#[derive(Subcommand)]
enum Command {
    /// Prune and quantize a model, writing the result and a report.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0, value_parser = parse_ratio)]
        prune_ratio: f64,
        /// Per-block override, `BLOCK=RATIO`; repeatable.
        #[arg(long = "layer-ratio", value_parser = parse_layer_ratio)]
        layer_ratios: Vec<(usize, f64)>,
        /// Conv block indices to leave unpruned.
        #[arg(long, value_delimiter = ',')]
        skip_layers: Vec<usize>,
        #[arg(long, value_enum, default_value = "l2")]
        criterion: CriterionArg,
        /// 2 to 8, or 32 for no quantization.
        #[arg(long, default_value_t = 32, value_parser = parse_wbits)]
        wbits: u32,
        #[arg(long, value_enum, default_value = "per-channel")]
        granularity: GranularityArg,
        #[arg(long, default_value_t = DEFAULT_ALPHA1, value_parser = parse_nonneg)]
        alpha1: f64,
        #[arg(long, default_value_t = DEFAULT_ALPHA2, value_parser = parse_nonneg)]
        alpha2: f64,
        /// Absolute ridge for the pruning systems (default: scaled to each system).
        #[arg(long, value_parser = parse_nonneg)]
        ridge: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the integer codes of every quantized layer.
        #[arg(long)]
        emit_codes: bool,
    },
    /// Measure a model, optionally against a baseline and a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random BN network from a topology string such as `c16-c32-mp-c64-gap-fc10`.
    GenRandom {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Input shape as CxHxW.
        #[arg(long, default_value = "3x32x32")]
        input: String,
    },
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn parse_layer_ratio(s: &str) -> Result<(usize, f64), String> {
    let (b, r) = s.split_once('=').ok_or("expected BLOCK=RATIO")?;
    Ok((b.parse().map_err(|e| format!("{e}"))?, parse_ratio(r)?))
}

fn parse_wbits(s: &str) -> Result<u32, String> {
    match s.parse::<u32>() {
        Ok(v @ (2..=8 | 32)) => Ok(v),
        _ => Err(format!("{s} is not 2..8 or 32")),
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and nonnegative"))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> udfc::Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_compress(model: &Path, out: &Path, cfg: &CompressionConfig, emit_codes: bool) -> udfc::Result<()> {
    let start = Instant::now();
    let net = load_model(model)?;
    let (compressed, report) = compress(&net, cfg)?;
    save_model(&compressed, out)?;
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("report.csv"), report.to_csv()?)?;
    if emit_codes && cfg.quantizes() {
        for (i, layer) in compressed.layers.iter().enumerate() {
            let weight = match layer {
                Layer::Conv(c) => &c.weight,
                Layer::Linear(l) => &l.weight,
                _ => continue,
            };
            let q = quantize_layer(weight, cfg.wbits, cfg.granularity)?;
            save_codes(&q.codes(), out.join(format!("codes_{i}.bin")))?;
        }
    }
    eprintln!(
        "compressed {} layers in {:.3}s: {:.3} MB -> {:.3} MB, {} -> {} MACs",
        report.layers.len(),
        start.elapsed().as_secs_f64(),
        report.totals.before.size_mb,
        report.totals.after.size_mb,
        report.totals.before.macs,
        report.totals.after.macs,
    );
    Ok(())
}

fn run_eval(
    model: &Path,
    baseline: Option<&Path>,
    data: Option<&Path>,
    trials: usize,
    seed: u64,
) -> udfc::Result<()> {
    let net = load_model(model)?;
    let reference = baseline.map(load_model).transpose()?;
    let dataset = data.map(load_dataset).transpose()?;
    let result = evaluate(&net, reference.as_ref(), dataset.as_ref(), trials, seed)?;
    let value = serde_json::to_value(&result).expect("eval result serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("value serializes"));

    let report_path = model.join("report.json");
    if report_path.is_file() {
        let text = std::fs::read_to_string(&report_path).map_err(|source| Error::Io {
            path: report_path.clone(),
            source,
        })?;
        let mut report: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| Error::Manifest {
                path: report_path.clone(),
                source,
            })?;
        if let Some(obj) = report.as_object_mut() {
            obj.insert("eval".into(), value);
        }
        let mut text = serde_json::to_string_pretty(&report).expect("value serializes");
        text.push('\n');
        write(&report_path, text)?;
    }
    Ok(())
}

fn run_gen_random(spec: &str, seed: u64, out: &Path, input: &str) -> udfc::Result<()> {
    let net = random_network(spec, parse_shape(input)?, seed)?;
    udfc::forward(&net, &udfc::harness::gaussian_inputs(net.input_shape, 1, seed), &[])?;
    save_model(&net, out)
}

fn usage_for(subcommand: Option<String>) -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand.and_then(|name| cmd.find_subcommand_mut(&name).cloned()) {
        Some(mut sub) => sub.render_usage(),
        None => cmd.render_usage(),
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring {THREADS_ENV}={v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            // Value errors omit the usage line by default.
            let _ = e.print();
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for(std::env::args().nth(1)));
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    configure_threads();
    let result = match cli.command {
        Command::Compress {
            model,
            out,
            prune_ratio,
            layer_ratios,
            skip_layers,
            criterion,
            wbits,
            granularity,
            alpha1,
            alpha2,
            ridge,
            seed,
            emit_codes,
        } => {
            let cfg = CompressionConfig {
                prune_ratio,
                layer_ratios: layer_ratios.into_iter().collect::<BTreeMap<_, _>>(),
                criterion: match criterion {
                    CriterionArg::L1 => Criterion::L1,
                    CriterionArg::L2 => Criterion::L2,
                },
                wbits,
                granularity: match granularity {
                    GranularityArg::PerChannel => Granularity::PerChannel,
                    GranularityArg::PerTensor => Granularity::PerTensor,
                },
                alpha1,
                alpha2,
                skip_layers: skip_layers.into_iter().collect::<BTreeSet<_>>(),
                ridge,
                seed,
            };
            run_compress(&model, &out, &cfg, emit_codes)
        }
        Command::Eval {
            model,
            baseline,
            data,
            trials,
            seed,
        } => run_eval(&model, baseline.as_deref(), data.as_deref(), trials, seed),
        Command::GenRandom {
            spec,
            seed,
            out,
            input,
        } => run_gen_random(&spec, seed, &out, &input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}
