//! `sepconv`: profile network configs, run the oracle catalog, apply layers
//! to SV3D volumes and time kernels.
//!
//! Exit codes: 0 on success, 1 on validation errors or failed checks, 2 on
//! unreadable or malformed files.

use std::fs;
use std::io::{self, Cursor, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sepconv3d::bench::{bench_compare, to_csv, to_json, BenchCase};
use sepconv3d::config::{parse_config, LayerSpec};
use sepconv3d::conv::{forward, read_bundle, write_bundle, BankSpec, Kernel3, KernelBank, VariantKind};
use sepconv3d::cost::{count_layer, count_network, CostBreakdown};
use sepconv3d::report::{Format, ProfileReport};
use sepconv3d::tensor::{AnyVolume, Element, Shape4, Volume4};
use sepconv3d::verify::{run_catalog, CheckOptions};
use sepconv3d::{with_threads, Error, Result};

const SEED_VAR: &str = "SEPCONV_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "sepconv", version, about = "Full and separable 3D convolution profiler and verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count parameters and MACs of a network config.
    Profile(ProfileArgs),
    /// Run the oracle catalog (composition identities, cost oracle, gradients).
    Check(CheckArgs),
    /// Apply one layer from a weight bundle to an SV3D volume.
    Apply(ApplyArgs),
    /// Time single-layer forward passes.
    Bench(BenchArgs),
    /// Write a seeded SV3D volume.
    GenVolume(GenVolumeArgs),
    /// Write a seeded weight bundle.
    GenWeights(GenWeightsArgs),
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the variant of every conv3d layer.
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Also report reduction factors against this variant (only `full`).
    #[arg(long)]
    baseline: Option<VariantKind>,
    /// Override the network input as CxDxHxW.
    #[arg(long)]
    input_size: Option<Shape4>,
    #[arg(long, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct CheckArgs {
    /// Run only cases whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// Test fixture: checks against a closed form that is off by one MAC.
    #[arg(long, hide = true)]
    corrupt_closed_form: bool,
}

#[derive(Args)]
struct ApplyArgs {
    /// full, fwsc, dwsc or fdwsc; must match the bundle.
    #[arg(long)]
    op: VariantKind,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("ops").required(true).args(["op", "compare"]))]
struct BenchArgs {
    #[arg(long)]
    op: Option<VariantKind>,
    /// Comma-separated variants; speedups are relative to the first.
    #[arg(long, value_delimiter = ',')]
    compare: Option<Vec<VariantKind>>,
    /// Input as CxDxHxW.
    #[arg(long)]
    size: Shape4,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Defaults to the input channel count.
    #[arg(long)]
    out_channels: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct GenVolumeArgs {
    /// CxDxHxW.
    #[arg(long)]
    size: Shape4,
    #[arg(long, default_value = "f32")]
    dtype: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long)]
    op: VariantKind,
    #[arg(long)]
    in_channels: usize,
    #[arg(long)]
    out_channels: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// DwSC: input disparity extent.
    #[arg(long, default_value_t = 1)]
    d_in: usize,
    /// DwSC: output disparity extent (defaults to `d_in`).
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    bias: bool,
    #[arg(long)]
    bn: bool,
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Sidecar path; the payload goes next to it with extension `sv3d`.
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Profile(a) => profile(a),
        Command::Check(a) => check(a),
        Command::Apply(a) => apply(a),
        Command::Bench(a) => bench(a),
        Command::GenVolume(a) => gen_volume(a),
        Command::GenWeights(a) => gen_weights(a),
    }
}

fn seed() -> Result<u64> {
    match std::env::var(SEED_VAR) {
        Err(_) => Ok(DEFAULT_SEED),
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("{SEED_VAR} must be an unsigned integer, got `{s}`"))),
    }
}

fn io_context(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_context(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_context(path, e))
}

fn emit(text: &str) -> Result<()> {
    io::stdout().lock().write_all(text.as_bytes())?;
    Ok(())
}

fn read_volume(path: &Path) -> Result<AnyVolume> {
    let bytes = fs::read(path).map_err(|e| io_context(path, e))?;
    let mut cur = Cursor::new(bytes.as_slice());
    let v = AnyVolume::read_sv3d(&mut cur).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let rest = bytes.len() - cur.position() as usize;
    if rest != 0 {
        return Err(Error::format(format!("{}: {rest} trailing bytes after the payload", path.display())));
    }
    Ok(v)
}

fn profile(a: ProfileArgs) -> Result<ExitCode> {
    let mut cfg = parse_config(&read_text(&a.config)?)
        .map_err(|e| Error::validation(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = a.input_size {
        cfg = cfg.with_input(s)?;
    }
    let base_cfg = cfg.clone();
    if let Some(v) = a.variant {
        cfg = cfg.substitute_variant(v)?;
    }
    let cost = count_network(&cfg)?;
    let baseline = match a.baseline {
        None => None,
        Some(VariantKind::Full) => Some(count_network(&base_cfg.substitute_variant(VariantKind::Full)?)?),
        Some(v) => return Err(Error::validation(format!("--baseline supports only `full`, got `{v}`"))),
    };
    let report = ProfileReport::new(&cost, baseline.as_ref())?;
    emit(&report.render(a.format))?;
    Ok(ExitCode::SUCCESS)
}

fn corrupted(spec: &LayerSpec, input: Shape4) -> Result<CostBreakdown> {
    let mut c = count_layer(spec, input)?;
    c.macs_pointwise += 1;
    Ok(c)
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        filter: a.filter,
        seed: seed()?,
        closed_form: if a.corrupt_closed_form { corrupted } else { count_layer },
    };
    let reports = run_catalog(&opts)?;
    let width = reports.iter().map(|r| r.case.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>6}  {:>11}  {:>9}  result\n", "case", "trials", "max rel err", "tolerance");
    for r in &reports {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>11.3e}  {:>9}  {}\n",
            r.case,
            r.trials,
            r.max_rel_err,
            if r.tolerance == 0.0 { "exact".to_string() } else { format!("{:.0e}", r.tolerance) },
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    emit(&out)?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for r in &failed {
        eprintln!("FAIL {}: expected {}, got {} ({} of {} trials failed)", r.case, r.expected, r.actual, r.failures, r.trials);
    }
    Ok(ExitCode::from(1))
}

fn apply_typed<T: Element>(a: &ApplyArgs, x: &Volume4<T>) -> Result<Vec<u8>> {
    let bank = read_bundle::<T>(&a.weights)?;
    if bank.variant() != a.op {
        return Err(Error::validation(format!(
            "--op {} does not match the {} weights in {}",
            a.op,
            bank.variant(),
            a.weights.display()
        )));
    }
    Ok(forward(x, &bank, a.stride)?.to_sv3d_bytes())
}

fn apply(a: ApplyArgs) -> Result<ExitCode> {
    let bytes = match read_volume(&a.input)? {
        AnyVolume::F32(x) => apply_typed(&a, &x)?,
        AnyVolume::F64(x) => apply_typed(&a, &x)?,
    };
    write_bytes(&a.output, &bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    if a.iters < 3 {
        return Err(Error::validation(format!("--iters must be >= 3, got {}", a.iters)));
    }
    if a.warmup < 1 {
        return Err(Error::validation("--warmup must be >= 1"));
    }
    if a.format != "csv" && a.format != "json" {
        return Err(Error::validation(format!("unknown format `{}` (expected csv or json)", a.format)));
    }
    let ops = match (a.op, a.compare) {
        (Some(op), None) => vec![op],
        (None, Some(list)) if !list.is_empty() => list,
        _ => return Err(Error::validation("give exactly one of --op and --compare")),
    };
    let cases: Vec<BenchCase> = ops
        .into_iter()
        .map(|op| BenchCase { op, input: a.size, k: a.k, out_channels: a.out_channels.unwrap_or(a.size.c), stride: a.stride })
        .collect();
    let seed = seed()?;
    let results = with_threads(a.threads, || bench_compare(&cases, a.iters, a.warmup, seed))??;
    emit(&if a.format == "json" { to_json(&results) } else { to_csv(&results) })?;
    Ok(ExitCode::SUCCESS)
}

fn gen_volume(a: GenVolumeArgs) -> Result<ExitCode> {
    let seed = seed()?;
    let bytes = match a.dtype.as_str() {
        "f32" => Volume4::<f32>::seeded(a.size, seed)?.to_sv3d_bytes(),
        "f64" => Volume4::<f64>::seeded(a.size, seed)?.to_sv3d_bytes(),
        d => return Err(Error::validation(format!("unknown dtype `{d}` (expected f32 or f64)"))),
    };
    write_bytes(&a.output, &bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn gen_weights(a: GenWeightsArgs) -> Result<ExitCode> {
    let spec = BankSpec::new(a.op, a.in_channels, a.out_channels, Kernel3::cube(a.k)?)
        .with_disparity(a.d_in, a.d_out.unwrap_or(a.d_in))
        .with_bias(a.bias)
        .with_bn(a.bn);
    let seed = seed()?;
    match a.dtype.as_str() {
        "f32" => write_bundle(&KernelBank::<f32>::seeded(spec, seed)?, &a.output)?,
        "f64" => write_bundle(&KernelBank::<f64>::seeded(spec, seed)?, &a.output)?,
        d => return Err(Error::validation(format!("unknown dtype `{d}` (expected f32 or f64)"))),
    }
    Ok(ExitCode::SUCCESS)
}
