use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use famsync::crashharness::{self, HarnessConfig, RandomTraceSpec, TraceKind};
use famsync::heap::walk_image;
use famsync::layout::{Layout, Superblock, SUPERBLOCK_SIZE};
use famsync::msync::inspect_slots;
use famsync::workload::{self, BenchConfig, BenchReport, KeyDist, Mix, WorkloadSpec};
use famsync::{
    BaselineMode, CopySource, FenceMode, Heap, KvStore, Media, MediaConfig, Region, RegionConfig, SyncOptions,
};

#[derive(Parser)]
#[command(
    name = "famsync",
    version,
    about = "Failure-atomic msync: inspection, benchmarks and crash testing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trace on simulated media and write the durable image.
    Dump {
        #[arg(long)]
        media: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Print the superblock, and optionally the logs and heap, of a media file.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        logs: bool,
        #[arg(long)]
        heap: bool,
        #[arg(long, default_value_t = 64)]
        line_size: u64,
    },
    /// Run recovery on a media file.
    Recover {
        file: PathBuf,
        #[arg(long, default_value_t = 64)]
        line_size: u64,
    },
    /// Per-sync counters of a trace, as CSV.
    SyncStats {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// KV-store workload benchmark.
    Bench(BenchArgs),
    /// Crash-inject a trace (or random traces) and check every recovery.
    Crashtest(CrashArgs),
    /// Run mixed KV operations on a real file, printing an ACK line after
    /// every durable operation.
    #[command(hide = true)]
    KvRun {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct Geometry {
    /// Data-area size; defaults depend on the trace.
    #[arg(long)]
    region_size: Option<u64>,
    #[arg(long)]
    line_size: Option<u64>,
    #[arg(long, value_parser = ["2", "3"], default_value = "3")]
    fences: String,
    /// Copy from the sealed logs instead of the dirty lists.
    #[arg(long)]
    sync_from_log: bool,
}

impl Geometry {
    fn config(&self, ops: &[crashharness::TraceOp], kind: Option<TraceKind>) -> HarnessConfig {
        let mut config = match kind {
            Some(TraceKind::Raw) => HarnessConfig::raw(),
            Some(_) => HarnessConfig::structured(),
            None => HarnessConfig::for_trace(ops),
        };
        if let Some(size) = self.region_size {
            config.region_size = size;
        }
        if let Some(line) = self.line_size {
            config.line_size = line;
        }
        config.options.fence_mode = if self.fences == "2" {
            FenceMode::TwoCompat
        } else {
            FenceMode::Three
        };
        if self.sync_from_log {
            config.options.copy_source = CopySource::Log;
        }
        config
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Famsync,
    Page4k,
    Wal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Zipfian,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "A")]
    mix: String,
    #[arg(long, value_enum, default_value = "famsync")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100_000)]
    records: u64,
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: u64,
    #[arg(long, value_enum, default_value = "zipfian")]
    dist: DistArg,
    #[arg(long, default_value_t = 8)]
    value_size: u64,
    #[arg(long, default_value_t = 64 << 20)]
    region_size: u64,
    #[arg(long, default_value_t = 0)]
    latency_ns: u64,
    /// Append the result row to this CSV file (header written if new).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CrashArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Check every boundary (otherwise only the final state).
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sweep this many random traces instead of a file.
    #[arg(long)]
    random_traces: Option<u64>,
    #[arg(long, value_enum, default_value = "raw")]
    kind: KindArg,
    #[command(flatten)]
    geometry: Geometry,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Raw,
    Heap,
    Kv,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> famsync::Result<ExitCode> {
    match cli.command {
        Command::Dump { media, trace, geometry } => {
            let ops = crashharness::load_trace(&trace)?;
            let config = geometry.config(&ops, None);
            let reference = crashharness::reference(&config, &ops)?;
            std::fs::write(&media, &reference.final_image)?;
            println!(
                "wrote {} bytes ({} syncs, {} media ops) to {}",
                reference.final_image.len(),
                reference.sync_reports.len(),
                reference.media_ops,
                media.display()
            );
        }
        Command::Inspect {
            file,
            logs,
            heap,
            line_size,
        } => inspect(&file, logs, heap, line_size)?,
        Command::Recover { file, line_size } => {
            let media = Media::open_file(&file, line_size)?;
            let region = Region::attach(media, SyncOptions::default())?;
            let r = region.recovery().clone();
            region.close()?;
            println!(
                "slots rolled back {} entries applied {} redo batches replayed {}",
                r.slots_rolled_back, r.entries_applied, r.redo_batches_replayed
            );
        }
        Command::SyncStats { trace, geometry } => {
            let ops = crashharness::load_trace(&trace)?;
            let config = geometry.config(&ops, None);
            let reference = crashharness::reference(&config, &ops)?;
            println!("epoch,entries,logged_bytes,copied_bytes,fences");
            for r in &reference.sync_reports {
                println!(
                    "{},{},{},{},{}",
                    r.epoch, r.entries_sealed, r.logged_bytes, r.bytes_copied, r.fences_issued
                );
            }
        }
        Command::Bench(args) => bench(args)?,
        Command::Crashtest(args) => return crashtest(args),
        Command::KvRun { file, ops, seed } => kv_run(&file, ops, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect(file: &PathBuf, logs: bool, heap: bool, line_size: u64) -> famsync::Result<()> {
    let mut media = Media::open_file(file, line_size)?;
    let mut raw = [0u8; SUPERBLOCK_SIZE as usize];
    media.read(0, &mut raw)?;
    let Some(sb) = Superblock::decode(&raw)? else {
        println!("not formatted");
        return Ok(());
    };
    let layout = Layout::from_superblock(&sb)?;
    println!(
        "region {} bytes, {} slots of {} bytes, data at {}",
        layout.region_size,
        layout.max_threads,
        layout.slot_size,
        layout.data_offset()
    );
    if logs {
        for s in inspect_slots(&mut media, &layout)? {
            println!(
                "slot {}: {:?} gen {} tail {} entries {} ({} bytes valid)",
                s.slot,
                s.header.state,
                s.header.generation,
                s.header.tail,
                s.entries.len(),
                s.valid_bytes
            );
            for e in &s.entries {
                println!("  offset {} size {}", e.offset, e.size());
            }
        }
    }
    if heap {
        let mut data = vec![0; layout.region_size as usize];
        media.read(layout.data_offset(), &mut data)?;
        let walk = walk_image(&data)?;
        let h = walk.header;
        println!(
            "heap root {} free head {} high water {}",
            h.root_offset, h.free_list_head, h.high_water
        );
        for b in &walk.blocks {
            println!(
                "  block {} size {} {}",
                b.offset,
                b.size,
                if b.free { "free" } else { "live" }
            );
        }
        println!("free list {:?}", walk.free_list);
        if walk.is_consistent() {
            println!("consistent");
        } else {
            for p in &walk.problems {
                println!("problem: {p}");
            }
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> famsync::Result<()> {
    let mix: Mix = args.mix.parse()?;
    let mode = match args.mode {
        ModeArg::Famsync => BaselineMode::Famsync,
        ModeArg::Page4k => BaselineMode::Page4k,
        ModeArg::Wal => BaselineMode::Wal,
    };
    let spec = WorkloadSpec {
        mix,
        record_count: args.records,
        op_count: args.ops,
        key_dist: match args.dist {
            DistArg::Uniform => KeyDist::Uniform,
            DistArg::Zipfian => KeyDist::default(),
        },
        value_size: args.value_size,
        seed: args.seed,
    };
    let config = BenchConfig {
        threads: args.threads,
        region_size: args.region_size,
        latency_ns_per_flush: args.latency_ns,
        ..BenchConfig::new(spec, mode)
    };
    let report = workload::run_benchmark(&config)?;
    println!("{}", BenchReport::CSV_HEADER);
    println!("{}", report.csv_row());
    eprintln!(
        "{} ops ({} mutations, {} distinct keys written) in {:.3}s; {} durability points",
        report.ops, report.mutations, report.distinct_keys, report.seconds, report.durability_points
    );
    if let Some(path) = args.csv {
        let new = !path.exists();
        let mut out = BufWriter::new(File::options().create(true).append(true).open(&path)?);
        if new {
            writeln!(out, "{}", BenchReport::CSV_HEADER)?;
        }
        writeln!(out, "{}", report.csv_row())?;
    }
    Ok(())
}

fn crashtest(args: CrashArgs) -> famsync::Result<ExitCode> {
    let kind = match args.kind {
        KindArg::Raw => TraceKind::Raw,
        KindArg::Heap => TraceKind::Heap,
        KindArg::Kv => TraceKind::Kv,
    };
    let summary = match (&args.trace, args.random_traces) {
        (Some(path), _) => {
            let ops = crashharness::load_trace(path)?;
            let config = args.geometry.config(&ops, None);
            if args.sweep {
                crashharness::sweep(&config, &ops)?
            } else {
                let reference = crashharness::reference(&config, &ops)?;
                let verdict = crashharness::inject_and_check(&config, &ops, &reference, reference.media_ops)?;
                crashharness::SweepSummary {
                    traces: 1,
                    boundaries: 1,
                    states: verdict.states as u64,
                    violations: verdict.violations,
                    examples: verdict.counterexamples,
                    ..Default::default()
                }
            }
        }
        (None, Some(count)) => {
            let config = args.geometry.config(&[], Some(kind));
            let spec = RandomTraceSpec::for_kind(kind);
            let result = crashharness::random_sweep(&config, &spec, args.seed, count)?;
            println!(
                "regenerated {} traces over the enumeration bound or log capacity",
                result.regenerated
            );
            result.summary
        }
        (None, None) => {
            return Err(famsync::Error::Config("give --trace FILE or --random-traces N".into()));
        }
    };
    let fences: std::collections::BTreeSet<u64> = summary.fences_per_sync.iter().copied().collect();
    println!("{summary}");
    println!("fences per sync {fences:?}");
    Ok(if summary.counterexamples() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Geometry of the `kv-run` store.
const KV_REGION: u64 = 4 << 20;
const KV_SLOT: u64 = 256 << 10;
const KV_BUCKETS: u64 = 256;
const KV_VALUE: u64 = 16;
const KV_KEYS: u64 = 2000;

fn kv_run(file: &PathBuf, ops: usize, seed: u64) -> famsync::Result<()> {
    let config = RegionConfig::new(KV_REGION).with_slots(1, KV_SLOT);
    let layout = config.layout()?;
    let media = Media::new(&MediaConfig::real_file(file, layout.media_capacity(64), 64))?;
    let region = Region::open(config, media)?;
    let store = KvStore::open_or_create(Heap::attach(&region)?, KV_BUCKETS, KV_VALUE)?;
    let out = std::io::stdout();
    let mut out = out.lock();
    writeln!(out, "READY {}", store.ops_applied()?)?;
    out.flush()?;
    for op in workload::mixed_ops(seed, ops, KV_KEYS, KV_VALUE) {
        if op.execute(&store)? {
            writeln!(out, "ACK {}", store.ops_applied()?)?;
            out.flush()?;
        }
    }
    writeln!(out, "DONE")?;
    Ok(())
}
