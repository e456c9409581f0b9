mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};

use ptqcal_core::calibrators::calibrate;
use ptqcal_core::dataio::{
    dump_stats, list_dumps, profile_dumps, read_cache, write_cache, write_json, CacheEntry,
    CalibrationCache,
};
use ptqcal_core::histogram::DEFAULT_BINS;
use ptqcal_core::pipeline::compare;
use ptqcal_core::refnet::{build_refnet, DevSet, RefNet};
use ptqcal_core::search::{collect_profiles, run_stablequant, LayerEntry};
use ptqcal_core::{ActivationHistogram, CalibMethod, Error, QuantParams, SearchConfig};

use config::RunConfig;

/// Post-training quantization calibration.
#[derive(Debug, Parser)]
#[command(name = "ptqcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate every activation site with one method and write a cache.
    Calibrate(CalibrateArgs),
    /// Run the layer-adaptive clipping search on the reference network.
    Stablequant(StablequantArgs),
    /// Compare the single-method baselines against the adaptive search.
    Compare(CompareArgs),
    /// Apply cached scales to dumped activations and report their error.
    EvalDump(EvalDumpArgs),
}

#[derive(Debug, Args)]
struct RefnetArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "CFG")]
    refnet: PathBuf,
    /// Overrides the network seed; data split seeds follow it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["dumps", "refnet"])))]
struct CalibrateArgs {
    /// Dump directory laid out as `<layer>/<batch>.aqd`.
    #[arg(long, value_name = "DIR")]
    dumps: Option<PathBuf>,
    /// Run configuration (TOML) for the reference network.
    #[arg(long, value_name = "CFG")]
    refnet: Option<PathBuf>,
    /// Overrides the network seed (with --refnet).
    #[arg(long, requires = "refnet")]
    seed: Option<u64>,
    /// One of max, percentile, entropy, mse, clipped-mse.
    #[arg(long)]
    method: String,
    /// Cut-off percentile for percentile and clipped-mse, in [0, 0.5].
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    #[arg(long, default_value_t = 8)]
    bits: u32,
    /// Output calibration cache.
    #[arg(long, value_name = "CACHE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StablequantArgs {
    #[command(flatten)]
    run: RefnetArgs,
    /// Stage 1 selection threshold (error points).
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Spacing of the cut-off percentile grid.
    #[arg(long, allow_negative_numbers = true)]
    grid_step: Option<f64>,
    /// Weight and activation bit-width.
    #[arg(long)]
    bits: Option<u32>,
    /// JSON report output.
    #[arg(long, value_name = "OUT")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RefnetArgs,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long, value_name = "OUT")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalDumpArgs {
    #[arg(long, value_name = "DIR")]
    dumps: PathBuf,
    #[arg(long, value_name = "CACHE")]
    cache: PathBuf,
    #[arg(long)]
    bits: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Stablequant(a) => cmd_stablequant(a),
        Command::Compare(a) => cmd_compare(a),
        Command::EvalDump(a) => cmd_eval_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration errors, 4 for invariant violations, 3 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_invariant() => 4,
        Some(err) if err.is_config() => 2,
        _ => 3,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.refnet.seed = seed;
    }
    Ok(config)
}

fn with_bits(mut config: SearchConfig, bits: Option<u32>) -> Result<SearchConfig> {
    if let Some(b) = bits {
        config.weight_bits = b;
        config.act_bits = b;
    }
    config.validate()?;
    Ok(config)
}

struct Prepared {
    net: RefNet,
    calib: Vec<ptqcal_core::TensorView>,
}

fn prepare(config: &RunConfig) -> Result<Prepared> {
    let net = build_refnet(&config.refnet)?;
    let calib = DevSet::waveforms(&net, config.calib_seed(), config.data.calib);
    Ok(Prepared { net, calib })
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let method = CalibMethod::from_parts(&a.method, a.p)?;
    ptqcal_core::quant::check_bits(a.bits)?;
    let layers: Vec<(String, ActivationHistogram)> = match (&a.dumps, &a.refnet) {
        (Some(dir), _) => profile_dumps(dir, DEFAULT_BINS)?,
        (None, Some(cfg)) => {
            let config = load_config(cfg, a.seed)?;
            let search = config.search_config()?;
            let p = prepare(&config)?;
            let profiles = collect_profiles(&p.net, &p.calib, search.bins, search.parallel)?;
            profiles.layers.into_iter().map(|l| l.id).zip(profiles.histograms).collect()
        }
        (None, None) => unreachable!("clap requires a source"),
    };

    let mut cache = CalibrationCache::new();
    for (layer, hist) in &layers {
        let calib = calibrate(hist, method, a.bits).with_context(|| format!("layer `{layer}`"))?;
        cache.push(CacheEntry::new(layer.clone(), &calib))?;
    }
    write_cache(&a.out, &cache)?;
    println!("{:<24} {:>14} {:>4}  method", "layer", "scale", "bits");
    for e in cache.entries() {
        println!("{:<24} {:>14.6e} {:>4}  {}", e.name, e.scale, e.bits, e.method);
    }
    println!("wrote {} entries to {}", cache.len(), a.out.display());
    Ok(())
}

fn format_set(set: &[String]) -> String {
    format!("{{{}}}", set.join(", "))
}

fn print_layers(entries: &[LayerEntry]) {
    println!("{:<10} {:<10} {:>14}  method", "layer", "kind", "scale");
    for e in entries {
        let method = match e.p {
            Some(p) => format!("{}({p})", e.method),
            None => e.method.clone(),
        };
        println!("{:<10} {:<10} {:>14.6e}  {method}", e.layer, e.kind.to_string(), e.scale);
    }
}

fn cmd_stablequant(a: StablequantArgs) -> Result<()> {
    let mut config = load_config(&a.run.refnet, a.run.seed)?;
    if let Some(g) = a.gamma {
        config.search.gamma = g;
    }
    if let Some(step) = a.grid_step {
        config.search.grid_step = step;
    }
    let search = with_bits(config.search_config()?, a.bits)?;
    let p = prepare(&config)?;
    let dev = DevSet::generate(&p.net, config.dev_seed(), config.data.dev)?;
    let (report, _) = run_stablequant(&p.net, &dev.evaluator(search.parallel), &p.calib, &search)?;

    println!("W{}A{}, gamma = {}", search.weight_bits, search.act_bits, report.gamma);
    println!("S = {}", format_set(&report.clip_set));
    println!("grid points = {}", report.grid.len());
    println!("p_opt = {}", report.p_opt);
    println!("baseline error = {:.4}", report.baseline_error);
    println!("final error = {:.4}", report.final_error);
    println!();
    print_layers(&report.per_layer);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let config = load_config(&a.run.refnet, a.run.seed)?;
    let search = with_bits(config.search_config()?, a.bits)?;
    let p = prepare(&config)?;
    let dev = DevSet::generate(&p.net, config.dev_seed(), config.data.dev)?;
    let test = DevSet::generate(&p.net, config.test_seed(), config.data.test)?;
    let report = compare(
        &p.net,
        &p.calib,
        &dev.evaluator(search.parallel),
        &test.evaluator(search.parallel),
        &search,
    )?;

    println!("W{}A{}", search.weight_bits, search.act_bits);
    println!("{:<12} {:>10} {:>10}", "method", "dev", "test");
    for m in &report.methods {
        println!("{:<12} {:>10.4} {:>10.4}", m.method, m.dev_error, m.test_error);
    }
    println!("S = {}", format_set(&report.stablequant.clip_set));
    println!("p_opt = {}", report.stablequant.p_opt);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_eval_dump(a: EvalDumpArgs) -> Result<()> {
    ptqcal_core::quant::check_bits(a.bits)?;
    let cache = read_cache(&a.cache).with_context(|| a.cache.display().to_string())?;
    let files = list_dumps(&a.dumps)?;
    let profiles = profile_dumps(&a.dumps, DEFAULT_BINS)?;

    println!(
        "{:<24} {:>24} {:>4} {:>24} {:>24} {:>10}",
        "layer", "scale", "bits", "hist_mse", "elem_mse", "saturated"
    );
    for (layer, hist) in &profiles {
        let entry = cache
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.clone()))
            .context("layer missing from the calibration cache")?;
        if entry.bits != a.bits {
            return Err(Error::Config(format!(
                "layer `{layer}`: cache holds {}-bit scales but --bits is {}",
                entry.bits, a.bits
            ))
            .into());
        }
        let params = QuantParams::new(entry.scale, entry.bits)?;
        let s = dump_stats(layer, &files[layer], hist, &params)?;
        println!(
            "{:<24} {:>24e} {:>4} {:>24e} {:>24e} {:>10.6}",
            s.layer, s.scale, s.bits, s.histogram_mse, s.element_mse, s.saturation
        );
    }
    Ok(())
}
