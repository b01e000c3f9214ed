use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointfuse::harness::report::{emit_report, read_report, scan_timings_csv, summarize, to_csv, ReportFormat, SweepReport};
use pointfuse::harness::sweep::{
    default_noise_levels, fit_line, ordering_bench, ssm_bench, sweep_k, sweep_noise, DEFAULT_KS, DEFAULT_SCAN_NS,
};
use pointfuse::harness::{run_pipeline, ScenarioConfig, ScoreMode};
use pointfuse::serialization::OrderingMode;
use pointfuse::weights::{save, ModelWeights};
use pointfuse::{Error, Result};

/// Line to stdout; a closed pipe surfaces as an error instead of a panic.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

macro_rules! out_raw {
    ($s:expr) => {
        io::stdout().lock().write_all($s.as_bytes())?
    };
}

#[derive(Parser)]
#[command(name = "pointfuse", version, about = "Synthetic multi-agent point-token perception harness")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Scenario JSON; unspecified fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    ordering: Option<OrderingMode>,
    /// Tokens sent per agent, or `all`.
    #[arg(long, global = true)]
    top_k: Option<TopK>,
    #[arg(long, global = true)]
    noise_pos_std: Option<f64>,
    #[arg(long, global = true)]
    noise_rot_std: Option<f64>,
    #[arg(long, global = true)]
    grid_interval: Option<f64>,
    #[arg(long, global = true, value_enum)]
    score_mode: Option<ScoreArg>,
    /// Record wall times in reports (makes them run-dependent).
    #[arg(long, global = true)]
    timings: bool,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "both")]
    format: FormatArg,
}

#[derive(Clone, Copy)]
struct TopK(Option<usize>);

impl std::str::FromStr for TopK {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(Self(None));
        }
        s.parse::<usize>().map(|k| Self(Some(k))).map_err(|e| format!("expected a count or `all`: {e}"))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Oracle,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// One end-to-end run.
    Run,
    /// Runs over top-k values.
    SweepK {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Runs over localization noise levels, `pos:rot` pairs; a bare `pos` has no rotation noise.
    SweepNoise {
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<String>>,
    },
    /// One run per token ordering.
    OrderingBench,
    /// Scan wall time against sequence length.
    SsmBench {
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        n_state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Summarize a JSON report; optionally re-emit its CSV.
    Report {
        path: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write seeded random weights to a manifest plus data file.
    InitWeights { path: PathBuf },
}

impl Overrides {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::from_json_file(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.ordering {
            cfg.ordering = o;
        }
        if let Some(TopK(k)) = self.top_k {
            cfg.top_k = k;
        }
        if let Some(v) = self.noise_pos_std {
            cfg.noise_pos_std = v;
        }
        if let Some(v) = self.noise_rot_std {
            cfg.noise_rot_std = v;
        }
        if let Some(v) = self.grid_interval {
            cfg.grid_interval = v;
        }
        if let Some(m) = self.score_mode {
            cfg.score_mode = match m {
                ScoreArg::Oracle => ScoreMode::Oracle,
                ScoreArg::Learned => ScoreMode::Learned,
            };
        }
        cfg.record_timings |= self.timings;
        cfg.validate()?;
        Ok(cfg)
    }

    fn format(&self) -> ReportFormat {
        match self.format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Both => ReportFormat::Both,
        }
    }

    fn emit(&self, report: &SweepReport, stem: &str) -> Result<()> {
        out_raw!(summarize(report));
        for p in emit_report(report, self.format(), &self.out_dir, stem)? {
            out!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn parse_levels(raw: &[String]) -> Result<Vec<(f64, f64)>> {
    raw.iter()
        .map(|s| {
            let (p, r) = s.split_once(':').unwrap_or((s.as_str(), "0"));
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("noise level {s:?}: {e}")));
            Ok((parse(p)?, parse(r)?))
        })
        .collect()
}

fn execute(cli: &Cli) -> Result<()> {
    let o = &cli.overrides;
    match &cli.command {
        Command::Run => {
            let run = run_pipeline(&o.scenario()?)?;
            o.emit(&SweepReport { kind: "run".into(), runs: vec![run] }, "run")
        }
        Command::SweepK { ks } => {
            let ks = ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
            let report = sweep_k(&o.scenario()?, &ks)?;
            let xs: Vec<f64> = report.runs.iter().map(|r| r.top_k.unwrap_or(0) as f64).collect();
            let ys: Vec<f64> = report.runs.iter().map(|r| r.flops.total as f64).collect();
            if let Ok(fit) = fit_line(&xs, &ys) {
                out!("flops vs k: slope {:.4e} per token, R² {:.6}", fit.slope, fit.r2);
            }
            o.emit(&report, "sweep_k")
        }
        Command::SweepNoise { levels } => {
            let levels = match levels {
                Some(raw) => parse_levels(raw)?,
                None => default_noise_levels(),
            };
            o.emit(&sweep_noise(&o.scenario()?, &levels)?, "sweep_noise")
        }
        Command::OrderingBench => {
            let report = ordering_bench(&o.scenario()?)?;
            for r in &report.runs {
                if let Some(m) = r.locality_for(r.ordering) {
                    out!("locality {:<8} {m:.3}", r.ordering.name());
                }
            }
            o.emit(&report, "ordering_bench")
        }
        Command::SsmBench { ns, d, n_state, repeats } => {
            let ns = ns.clone().unwrap_or_else(|| DEFAULT_SCAN_NS.to_vec());
            let seed = o.seed.unwrap_or(0);
            let rows = ssm_bench(&ns, *d, *n_state, *repeats, seed)?;
            let xs: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
            let csv = scan_timings_csv(&rows);
            out_raw!(csv);
            if let Ok(fit) = fit_line(&xs, &ys) {
                out!("time vs N: slope {:.4e} ms per token, R² {:.6}", fit.slope, fit.r2);
            }
            std::fs::create_dir_all(&o.out_dir)?;
            let path = o.out_dir.join("ssm_bench.csv");
            std::fs::write(&path, csv)?;
            out!("wrote {}", path.display());
            Ok(())
        }
        Command::Report { path, csv } => {
            let report = read_report(path)?;
            for r in &report.runs {
                r.check_totals()?;
            }
            out_raw!(summarize(&report));
            if let Some(out) = csv {
                std::fs::write(out, to_csv(&report.runs))?;
                out!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::InitWeights { path } => {
            let cfg = o.scenario()?;
            let mut w = ModelWeights::init(&cfg.model, cfg.seed)?;
            save(&mut w, path)?;
            out!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        // the reader went away, as with `| head`
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
