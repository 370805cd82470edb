use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;

use vmsift::analyzers::{
    scan_aes_schedules, scan_key_context, AesVariant, KeyCandidate, RsaScanner,
};
use vmsift::config::{Config, ConfigError};
use vmsift::harness::{summarize, write_histogram_csv, write_reports_csv, Experiment, Scenario};
use vmsift::mem_model::{Endianness, KEY_CONTEXT_LAYOUT};
use vmsift::PAGE_SIZE;

#[derive(Parser)]
#[command(
    name = "vmsift",
    version,
    about = "Targeted secret extraction simulator and memory dump key scanner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run attack iterations for one scenario and load level.
    Simulate(SimulateArgs),
    /// Scan a raw memory dump for key material.
    Scan {
        #[command(subcommand)]
        kind: ScanKind,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, default_value_t = 1.0)]
    load_level: f64,
    #[arg(long, default_value_t = 100)]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Configuration file; the bundled calibrated defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-iteration results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reaction-time histogram.
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Worker threads; overrides the configuration, 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum ScanKind {
    /// Windows that divide an RSA modulus.
    Rsa {
        /// Modulus in hexadecimal, or a file containing it.
        #[arg(long)]
        modulus_hex: String,
        #[arg(long)]
        factor_bits: u32,
        #[arg(long, value_enum, default_value_t = Endian::Le)]
        endian: Endian,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        dump: PathBuf,
    },
    /// Expanded AES key schedules.
    Aes {
        #[arg(long, value_parser = parse_variant)]
        variant: AesVariant,
        /// Accepted bit errors against the recomputed schedule.
        #[arg(long, default_value_t = 0)]
        tolerance: u32,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        dump: PathBuf,
    },
    /// Kernel key-context records.
    KeyContext { dump: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Endian {
    Le,
    Be,
    Both,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<AesVariant, String> {
    s.parse::<u32>()
        .ok()
        .and_then(AesVariant::from_bits)
        .ok_or_else(|| format!("expected 128 or 256, got {s:?}"))
}

enum Failure {
    Usage(String),
    Io(String),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Scan { kind } => scan(kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let Some(path) = path else {
        return Ok(Config::calibrated());
    };
    Config::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Io(e.to_string()),
        other => Failure::Usage(other.to_string()),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(w) = args.workers {
        config.harness.workers = w;
    }
    let experiment = Experiment::new(&config, args.scenario, args.load_level)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let reports = experiment
        .run_batch(args.seed, args.iterations, config.harness.workers)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let stats = summarize(&reports).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(path) = &args.out {
        write_reports_csv(&reports, create(path)?).map_err(|e| Failure::Io(e.to_string()))?;
    }
    if let Some(path) = &args.hist {
        write_histogram_csv(&stats.reaction_histogram, create(path)?)
            .map_err(|e| Failure::Io(e.to_string()))?;
    }
    let show =
        |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    println!("scenario            {}", args.scenario);
    println!("load level          {}", args.load_level);
    println!(
        "success rate        {:.2}% ({}/{})",
        100.0 * stats.success_rate,
        stats.successes,
        stats.iterations
    );
    println!(
        "extracted pages     median {} MAD {}",
        show(stats.median_extracted_pages, 1),
        show(stats.mad_extracted_pages, 1)
    );
    println!(
        "observation         median {} s",
        show(stats.median_observation_s, 2)
    );
    println!(
        "search              median {} s",
        show(stats.median_search_s, 2)
    );
    println!(
        "reaction time       median {} ms",
        show(stats.median_reaction_ms, 1)
    );
    println!(
        "filter reduction    mean {}%",
        show(stats.mean_filter_reduction.map(|r| 100.0 * r), 1)
    );
    Ok(())
}

type ScanFn = Box<dyn Fn(&[u8]) -> Vec<KeyCandidate>>;

/// A scanner over buffers plus the longest structure it can match.
struct Pass {
    scan: ScanFn,
    footprint: usize,
    stride: usize,
    /// Absolute offset of the last candidate printed.
    last: Option<u64>,
}

fn parse_modulus(arg: &str) -> Result<BigUint, Failure> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(|e| Failure::Io(format!("{arg}: {e}")))?
    } else {
        arg.to_string()
    };
    let digits: String = text.split_whitespace().collect();
    let digits = digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
        .unwrap_or(&digits);
    if digits.is_empty() {
        return Err(Failure::Usage("modulus is empty".into()));
    }
    BigUint::parse_bytes(digits.as_bytes(), 16)
        .ok_or_else(|| Failure::Usage(format!("malformed modulus hex {digits:?}")))
}

fn scan(kind: ScanKind) -> Result<(), Failure> {
    let (passes, dump) = match kind {
        ScanKind::Rsa {
            modulus_hex,
            factor_bits,
            endian,
            stride,
            dump,
        } => {
            let modulus = parse_modulus(&modulus_hex)?;
            let orders: &[Endianness] = match endian {
                Endian::Le => &[Endianness::Little],
                Endian::Be => &[Endianness::Big],
                Endian::Both => &[Endianness::Little, Endianness::Big],
            };
            let mut passes = Vec::new();
            for &order in orders {
                let scanner = RsaScanner::new(modulus.clone(), factor_bits, order, stride)
                    .map_err(|e| Failure::Usage(e.to_string()))?;
                passes.push(Pass {
                    footprint: scanner.window_len(),
                    stride,
                    scan: Box::new(move |chunk| scanner.scan(chunk)),
                    last: None,
                });
            }
            (passes, dump)
        }
        ScanKind::Aes {
            variant,
            tolerance,
            stride,
            dump,
        } => {
            if stride == 0 {
                return Err(Failure::Usage("stride must be positive".into()));
            }
            let pass = Pass {
                footprint: variant.schedule_len(),
                stride,
                scan: Box::new(move |chunk| scan_aes_schedules(chunk, variant, tolerance, stride)),
                last: None,
            };
            (vec![pass], dump)
        }
        ScanKind::KeyContext { dump } => {
            let max_key = *KEY_CONTEXT_LAYOUT
                .permitted_key_lens
                .iter()
                .max()
                .unwrap_or(&0) as usize;
            let pass = Pass {
                footprint: KEY_CONTEXT_LAYOUT.header_len + max_key,
                stride: 1,
                scan: Box::new(|chunk| scan_key_context(chunk, &KEY_CONTEXT_LAYOUT)),
                last: None,
            };
            (vec![pass], dump)
        }
    };
    let file = File::open(&dump).map_err(|e| Failure::Io(format!("{}: {e}", dump.display())))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    stream_scan(file, passes, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Reads `input` one page at a time. Each pass scans the new page together
/// with enough preceding bytes to catch structures crossing the boundary,
/// starting at an offset aligned to its stride.
fn stream_scan<R: Read, W: Write>(
    mut input: R,
    mut passes: Vec<Pass>,
    out: &mut W,
) -> Result<(), Failure> {
    let keep = passes
        .iter()
        .map(|p| p.footprint.saturating_sub(1) + p.stride)
        .max()
        .unwrap_or(0);
    // `history` holds the tail of everything read so far; `start` is the
    // absolute offset of its first byte.
    let mut history: Vec<u8> = Vec::new();
    let mut start: u64 = 0;
    let mut page = vec![0u8; PAGE_SIZE];
    loop {
        let n = read_full(&mut input, &mut page)?;
        if n == 0 {
            break;
        }
        let end = start + history.len() as u64;
        history.extend_from_slice(&page[..n]);
        let mut lines: Vec<(u64, String)> = Vec::new();
        for pass in &mut passes {
            let reach = pass.footprint.saturating_sub(1) as u64;
            let mut from = end.saturating_sub(reach).max(start);
            from -= from % pass.stride as u64;
            let from = from.max(start);
            let buf = &history[(from - start) as usize..];
            for c in (pass.scan)(buf) {
                let abs = from + c.offset as u64;
                if pass.last.is_some_and(|l| abs <= l) || !abs.is_multiple_of(pass.stride as u64) {
                    continue;
                }
                pass.last = Some(abs);
                lines.push((
                    abs,
                    format!(
                        "{abs} 0x{abs:x} {} {} {}",
                        c.kind.label(),
                        c.score,
                        hex::encode(&c.material)
                    ),
                ));
            }
        }
        lines.sort_by_key(|(abs, _)| *abs);
        for (_, line) in lines {
            writeln!(out, "{line}")?;
        }
        if history.len() > keep {
            let drop = history.len() - keep;
            history.drain(..drop);
            start += drop as u64;
        }
        if n < PAGE_SIZE {
            break;
        }
    }
    Ok(())
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
