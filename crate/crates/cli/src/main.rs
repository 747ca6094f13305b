use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use inferline::benchmark::{run_bench, BenchConfig, DEFAULT_LOADS};
use inferline::flowtable::FlowTableConfig;
use inferline::model::DEFAULT_K;
use inferline::prefixlab::{typology_report, Corpus, Weighting, DEFAULT_BETA};
use inferline::scenario::Scenario;
use inferline::sim::live::LiveOptions;
use inferline::traffic::{Catalog, CatalogConfig, RateSegment, TraceFormat, TraceGenerator, TraceStats, TraceWriter};

#[derive(Parser)]
#[command(name = "inferline", version, about = "Flow classification pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a packet trace and print its statistics.
    GenTrace(GenTraceArgs),
    /// Write a synthetic flow-shape catalog.
    GenCatalog(GenCatalogArgs),
    /// Run a scenario file and write report.json and windows.csv.
    Simulate(SimulateArgs),
    /// Classify series prefixes of a labeled corpus.
    AnalyzePrefixes(AnalyzeArgs),
    /// Flow-table throughput at several load factors.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CatalogArgs {
    /// Shape catalog CSV; a synthetic catalog is built when absent.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Shapes in the synthetic catalog.
    #[arg(long, default_value_t = CatalogConfig::default().size)]
    catalog_size: usize,
}

impl CatalogArgs {
    fn load(&self, seed: u64) -> Result<Catalog> {
        match &self.catalog {
            Some(p) => {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                Catalog::read_csv(f).with_context(|| format!("reading {}", p.display()))
            }
            None => {
                let cfg = CatalogConfig {
                    size: self.catalog_size,
                    ..CatalogConfig::default()
                };
                Ok(Catalog::synthetic(&cfg, seed)?)
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Flow arrivals per second.
    #[arg(long, requires = "duration", conflicts_with = "schedule")]
    lambda: Option<f64>,
    /// Trace length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Comma-separated `rate:seconds` segments, e.g. 10000:120,70000:120.
    #[arg(long, required_unless_present = "lambda")]
    schedule: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short, default_value = "trace.csv")]
    out: PathBuf,
    /// Output format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Link speed used to scale the reported rates.
    #[arg(long)]
    link_gbps: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    catalog: CatalogArgs,
}

#[derive(Args)]
struct GenCatalogArgs {
    #[arg(long, short, default_value = "catalog.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = CatalogConfig::default().size)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    /// Run the threaded pipeline instead of the event simulator.
    #[arg(long)]
    live: bool,
    /// Wall-clock limit for live runs, in seconds.
    #[arg(long, requires = "live")]
    max_seconds: Option<f64>,
    /// Do not sleep for modeled inference latency in live runs.
    #[arg(long, requires = "live")]
    no_sleep: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Corpus CSV: feature_1..feature_K,label,flow_count.
    #[arg(required_unless_present = "catalog")]
    corpus: Option<PathBuf>,
    /// Build the corpus from a shape catalog instead.
    #[arg(long, conflicts_with = "corpus")]
    catalog: Option<PathBuf>,
    /// Prefix lengths: a range `1..9` or a list `2,4,6`.
    #[arg(long, default_value = "1..9")]
    deltas: String,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value = "byFlows")]
    weighting: Weighting,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = FlowTableConfig::micro_benchmark().records)]
    records: usize,
    #[arg(long, default_value_t = FlowTableConfig::micro_benchmark().buckets)]
    buckets: usize,
    /// Comma-separated load factors.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LOADS)]
    loads: Vec<f64>,
    /// Measured packets per load factor.
    #[arg(long, default_value_t = 5_000_000)]
    packets: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_schedule(s: &str) -> Result<Vec<RateSegment>> {
    s.split(',')
        .map(|seg| {
            let (rate, secs) = seg
                .split_once(':')
                .with_context(|| format!("segment {seg:?} is not rate:seconds"))?;
            Ok(RateSegment::new(rate.trim().parse()?, secs.trim().parse()?))
        })
        .collect()
}

fn parse_deltas(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a == 0 || a > b {
            bail!("empty delta range {s:?}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|d| Ok(d.trim().parse()?)).collect()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn gen_trace(a: GenTraceArgs) -> Result<()> {
    let segments = match (&a.schedule, a.lambda, a.duration) {
        (Some(s), _, _) => parse_schedule(s)?,
        (None, Some(l), Some(d)) => vec![RateSegment::new(l, d)],
        _ => bail!("either --schedule or --lambda with --duration is required"),
    };
    let catalog = a.catalog.load(a.seed)?;
    let gen = TraceGenerator::piecewise(&catalog, &segments, a.seed ^ 0x5DEE_CE66_D1CE_4E5B)?;
    let format = match a.format {
        Some(FormatArg::Csv) => TraceFormat::Csv,
        Some(FormatArg::Bin) => TraceFormat::Binary,
        None => TraceFormat::from_path(&a.out),
    };
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut writer = TraceWriter::new(BufWriter::new(file), format)?;
    let mut failed = None;
    let stats = TraceStats::from_packets(
        gen.inspect(|p| {
            if failed.is_none() {
                if let Err(e) = writer.write(p) {
                    failed = Some(e);
                }
            }
        }),
        a.k,
        a.link_gbps.map(|g| g * 1e9),
    );
    if let Some(e) = failed {
        return Err(e).context("writing trace");
    }
    writer.finish()?.flush()?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn gen_catalog(a: GenCatalogArgs) -> Result<()> {
    let cfg = CatalogConfig {
        size: a.size,
        ..CatalogConfig::default()
    };
    let catalog = Catalog::synthetic(&cfg, a.seed)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    catalog.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scenario = Scenario::load(&a.scenario).with_context(|| format!("loading {}", a.scenario.display()))?;
    fs::create_dir_all(&a.out_dir)?;
    let report_path = a.out_dir.join("report.json");
    if a.live {
        let opts = LiveOptions {
            max_wall: a.max_seconds.map(Duration::from_secs_f64),
            sleep_latency: !a.no_sleep,
            ..LiveOptions::default()
        };
        let report = scenario.simulate_live(opts)?;
        fs::write(&report_path, scenario.report_json(&report))?;
        if !report.conserved() {
            bail!("live run lost series; see {}", report_path.display());
        }
    } else {
        let report = scenario.simulate()?;
        fs::write(&report_path, scenario.report_json(&report))?;
        fs::write(a.out_dir.join("windows.csv"), report.windows_csv())?;
    }
    eprintln!("wrote {}", report_path.display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let deltas = parse_deltas(&a.deltas)?;
    if let Some(&d) = deltas.iter().find(|&&d| d == 0 || d > a.k) {
        bail!("prefix length {d} outside 1..={}", a.k);
    }
    let corpus = match (&a.corpus, &a.catalog) {
        (Some(p), _) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Corpus::read_csv(f).with_context(|| format!("reading {}", p.display()))?
        }
        (None, Some(p)) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Corpus::from_catalog(&Catalog::read_csv(f)?, a.k)?
        }
        (None, None) => bail!("a corpus or --catalog is required"),
    };
    if corpus.k() < deltas.iter().copied().max().unwrap_or(0) {
        bail!("corpus series have only {} features", corpus.k());
    }
    let rows: Vec<_> = typology_report(&corpus, deltas, a.beta, a.weighting)
        .into_iter()
        .map(|c| serde_json::json!({ "counts": c, "fractions": c.fractions() }))
        .collect();
    let report = serde_json::json!({
        "series": corpus.len(),
        "flows": corpus.total_flows(),
        "beta": a.beta,
        "weighting": a.weighting,
        "rows": rows,
    });
    write_output(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        table: FlowTableConfig {
            records: a.records,
            buckets: a.buckets,
            ..FlowTableConfig::micro_benchmark()
        },
        loads: a.loads,
        packets: a.packets,
        seed: a.seed,
    };
    let report = run_bench(&cfg)?;
    for p in &report.points {
        eprintln!("load {:.2}: {:.2} Mops/s", p.target_load, p.ops_per_s / 1e6);
    }
    write_output(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTrace(a) => gen_trace(a),
        Command::GenCatalog(a) => gen_catalog(a),
        Command::Simulate(a) => simulate(a),
        Command::AnalyzePrefixes(a) => analyze(a),
        Command::Bench(a) => bench(a),
    }
}
