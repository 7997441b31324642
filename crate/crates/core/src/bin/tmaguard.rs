use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use tmaguard::bus::tcp::{Broker, RetryPolicy, TcpClient};
use tmaguard::bus::TopicQos;
use tmaguard::config::Config;
use tmaguard::pipeline::{telemetry_csv, LedNode, PerceptionNode, SensorNode};
use tmaguard::report::{self, write_outputs};
use tmaguard::safety::WarningMode;
use tmaguard::sim::{RecordingWriter, Scenario};

#[derive(Parser)]
#[command(name = "tmaguard", version, about = "Proactive TMA warning pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Broker address, host:port.
    #[arg(long, global = true)]
    bus: Option<String>,
    /// Warning mode: sim, field_continuous or field_table.
    #[arg(long, global = true)]
    mode: Option<WarningMode>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulated scenarios.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Re-run a recording through the pipeline.
    Replay {
        dir: PathBuf,
    },
    /// Stopping sight distance values.
    Ssd {
        #[arg(long, allow_negative_numbers = true)]
        speed_mph: Option<f64>,
        /// Print every row of the design table.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Message broker.
    #[command(subcommand)]
    Bus(BusCommand),
    /// Run one role of the graph against a broker.
    Node(NodeArgs),
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run one scenario through the in-process graph.
    Run {
        /// Also write the frames as a recording.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run several scenarios per set speed and report mean speed and MSE.
    Sweep {
        /// Comma-separated relative speeds in m/s.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        speeds: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<u32>,
    },
}

#[derive(Subcommand)]
enum BusCommand {
    Serve {
        #[arg(long, default_value = "127.0.0.1:7447")]
        listen: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Sensor,
    Perception,
    Led,
}

#[derive(Args)]
struct NodeArgs {
    role: Role,
    /// QoS of the role's input topic.
    #[arg(long, default_value = "lossless")]
    qos: TopicQos,
    /// Sensor: roles to wait for before publishing.
    #[arg(long, value_delimiter = ',', default_value = "perception,led")]
    wait_for: Vec<String>,
    /// Sensor: maximum frames in flight ahead of telemetry (0 disables).
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Sensor: record the published frames here.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Seconds to wait for other roles.
    #[arg(long, default_value_t = 30)]
    ready_timeout_s: u64,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.scenario.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.pipeline.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&PathBuf>, files: &[(&str, Vec<u8>)], stdout_file: &str) -> Result<()> {
    match out {
        Some(dir) => write_outputs(dir, files)?,
        None => {
            let (_, bytes) = files.iter().find(|(n, _)| *n == stdout_file).expect("known output");
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn summary_line(r: &report::RunReport) -> String {
    let s = &r.summary;
    let f = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:.6}"));
    let u = |v: Option<u64>| v.map_or("n/a".to_owned(), |v| v.to_string());
    format!(
        "frames {}  mean speed {} m/s  speed MSE {}  warn frames {}  first warn {}  truth crossing {}",
        s.frames,
        f(s.mean_speed_mps),
        f(s.speed_mse),
        s.warn_frames,
        u(s.first_warn_seq),
        u(s.truth_crossing_seq)
    )
}

fn bus_addr(cli: &Cli) -> Result<&str> {
    cli.bus.as_deref().context("--bus host:port is required")
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Sim(SimCommand::Run { record }) => {
            let cfg = load_config(cli)?;
            let out = report::run_live(&cfg, record.as_deref())?;
            let mut files = out.files();
            let led: String = std::iter::once("seq,on\n".to_owned())
                .chain(out.telemetry.iter().map(|r| format!("{},{}\n", r.seq, r.warn)))
                .collect();
            files.push(("led.csv", led.into_bytes()));
            emit(cli.out.as_ref(), &files, "report.csv")?;
            eprintln!("{}", summary_line(&out.report));
        }
        Command::Sim(SimCommand::Sweep { speeds, runs }) => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = speeds {
                cfg.sweep.speeds_mps = s.clone();
            }
            if let Some(r) = runs {
                cfg.sweep.runs = *r;
            }
            let rep = report::sweep(&cfg.scenario, &cfg.pipeline, &cfg.sweep)?;
            emit(cli.out.as_ref(), &rep.files(), "sweep.csv")?;
        }
        Command::Replay { dir } => {
            let cfg = load_config(cli)?;
            let out = report::replay(dir, &cfg.pipeline)?;
            emit(cli.out.as_ref(), &out.files(), "report.csv")?;
            eprintln!("{}", summary_line(&out.report));
        }
        Command::Ssd { speed_mph, table, csv } => {
            if speed_mph.is_none() && !table {
                bail!("give --speed-mph and/or --table");
            }
            let params = load_config(cli)?.pipeline.ssd;
            let text = report::ssd_text(*speed_mph, *table, *csv, &params)?;
            emit(cli.out.as_ref(), &[("ssd.txt", text.into_bytes())], "ssd.txt")?;
        }
        Command::Bus(BusCommand::Serve { listen }) => {
            let broker = Broker::bind(listen)?;
            println!("listening on {}", broker.local_addr());
            std::io::stdout().flush()?;
            broker.serve()?;
        }
        Command::Node(args) => run_node(cli, args)?,
    }
    Ok(())
}

fn run_node(cli: &Cli, args: &NodeArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let addr = bus_addr(cli)?;
    let client = TcpClient::connect_with_retry(addr, RetryPolicy::default())?;
    let timeout = Duration::from_secs(args.ready_timeout_s);
    match args.role {
        Role::Sensor => {
            let recorder = args
                .record
                .as_deref()
                .map(|d| RecordingWriter::create(d, Some(&cfg.scenario), cfg.scenario.depth_unit_m))
                .transpose()?;
            let mut sensor = SensorNode::new(client, Scenario::new(cfg.scenario.clone())?, recorder);
            let waits: Vec<&str> = args.wait_for.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
            if args.window > 0 && waits.contains(&"perception") {
                sensor = sensor.with_flow_control(args.window)?;
            }
            sensor.wait_for(&waits, timeout)?;
            sensor.run()?;
            eprintln!("published {} frames", sensor.truths().len());
        }
        Role::Perception => {
            let mut node = PerceptionNode::new(client, cfg.pipeline, args.qos)?;
            node.run()?;
            let reports = node.into_reports();
            eprintln!("processed {} frames", reports.len());
            if let Some(dir) = &cli.out {
                write_outputs(dir, &[("telemetry.csv", telemetry_csv(&reports).into_bytes())])?;
            }
        }
        Role::Led => {
            let mut node = LedNode::new(&client, args.qos)?;
            node.run()?;
            eprintln!(
                "consumed {} statuses, {} transitions, final {}",
                node.history().len(),
                node.transitions().len(),
                if node.state().on { "on" } else { "off" }
            );
            if let Some(dir) = &cli.out {
                let led: String = std::iter::once("seq,on\n".to_owned())
                    .chain(node.history().iter().map(|(s, on)| format!("{s},{on}\n")))
                    .collect();
                write_outputs(dir, &[("led.csv", led.into_bytes())])?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
