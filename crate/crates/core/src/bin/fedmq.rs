use std::fs::{self, File};
use std::io::{BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use signal_hook::consts::{SIGINT, SIGTERM, SIGUSR1};
use tracing_subscriber::EnvFilter;

use fedmq::broker::DEFAULT_ITERATIONS;
use fedmq::runtime::admin::{self, AdminError};
use fedmq::runtime::config::{BrokerSettings, NodeConfig};
use fedmq::runtime::{exit, run_agent, run_ps, BrokerDaemon, DaemonError, NodeExit};
use fedmq::sim::{run_sim, Scenario};
use fedmq::topic::Identifier;

#[derive(Parser)]
#[command(
    name = "fedmq",
    version,
    about = "Federated learning over an authenticated MQTT broker"
)]
struct Cli {
    /// Log filter, e.g. `info` or `fedmq=debug`. Overrides the config file.
    #[arg(long, global = true, env = "FEDMQ_LOG_LEVEL")]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker.
    Broker {
        #[arg(long, env = "FEDMQ_CONFIG")]
        config: PathBuf,
        /// Listen port; replaces the port in `bind`.
        #[arg(long, env = "FEDMQ_PORT")]
        port: Option<u16>,
    },
    /// Run the parameter server.
    Ps(NodeArgs),
    /// Run a training client. SIGUSR1 makes it leave its federations.
    Agent(NodeArgs),
    /// Manage credentials and inspect state.
    Admin {
        /// Broker config naming the credential, ACL and metrics files.
        #[arg(long, env = "FEDMQ_CONFIG")]
        config: Option<PathBuf>,
        #[command(subcommand)]
        action: AdminCommand,
    },
    /// Run a scenario in one process over the in-memory network.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Directory for `<name>.jsonl` and `<name>.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Model store. Defaults to a fresh `<out>/<name>.store`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long, env = "FEDMQ_CONFIG")]
    config: PathBuf,
    /// Broker address, `host:port`.
    #[arg(long, env = "FEDMQ_BROKER")]
    broker: Option<String>,
    #[arg(long, env = "FEDMQ_SECRET_FILE")]
    secret_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AdminCommand {
    /// Add a client and print its secret.
    Enroll {
        client_id: Identifier,
        fed: Identifier,
        cep: Identifier,
        /// Grant the parameter-server rule set.
        #[arg(long)]
        ps: bool,
        /// Defaults to the client id.
        #[arg(long)]
        username: Option<String>,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: u32,
    },
    /// Disable a client and close its session.
    Revoke { client_id: Identifier },
    /// Print the stored model versions of a federation.
    Models {
        #[arg(long, env = "FEDMQ_STORE_DIR")]
        store: PathBuf,
        fed: Identifier,
        cep: Identifier,
    },
    /// Print the broker's last counter dump.
    Metrics,
}

fn init_logging(level: Option<&str>) {
    let filter = EnvFilter::try_new(level.unwrap_or("info")).unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
}

fn flag(signals: &[i32]) -> Arc<AtomicBool> {
    let f = Arc::new(AtomicBool::new(false));
    for s in signals {
        signal_hook::flag::register(*s, f.clone()).expect("signal handler");
    }
    f
}

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("fedmq: {err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = cli.log_level;
    match cli.command {
        Command::Broker { config, port } => broker(&config, port, log),
        Command::Ps(args) => node(args, log, true),
        Command::Agent(args) => node(args, log, false),
        Command::Admin { config, action } => {
            init_logging(log.as_deref().or(Some("warn")));
            match run_admin(config.as_deref(), action) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.exit_code(), e),
            }
        }
        Command::Sim { scenario, out, store } => {
            init_logging(log.as_deref().or(Some("warn")));
            sim(&scenario, &out, store)
        }
    }
}

fn broker(config: &Path, port: Option<u16>, log: Option<String>) -> ExitCode {
    let mut settings = match BrokerSettings::load(config) {
        Ok(s) => s,
        Err(e) => return fail(exit::CONFIG, e),
    };
    if let Err(e) = settings.apply_overrides(port, log) {
        return fail(exit::CONFIG, e);
    }
    init_logging(settings.log_level.as_deref());
    let stop = flag(&[SIGTERM, SIGINT]);
    let dump = flag(&[SIGUSR1]);
    let daemon = match BrokerDaemon::start(&settings) {
        Ok(d) => d,
        Err(e) => return fail(e.exit_code(), e),
    };
    println!("listening on {}", daemon.local_addr());
    let _ = std::io::stdout().flush();
    match daemon.run(&stop, &dump) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code(), e),
    }
}

fn node(args: NodeArgs, log: Option<String>, ps: bool) -> ExitCode {
    let mut cfg = match NodeConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(exit::CONFIG, e),
    };
    cfg.apply_overrides(args.broker, args.secret_file, log);
    init_logging(cfg.log_level.as_deref());
    let stop = flag(&[SIGTERM, SIGINT]);
    let result = if ps {
        run_ps(&cfg, &stop)
    } else {
        let leave = flag(&[SIGUSR1]);
        run_agent(&cfg, &stop, &leave)
    };
    match result {
        Ok(NodeExit::Completed | NodeExit::Stopped) => ExitCode::SUCCESS,
        Err(e @ DaemonError::Auth(_)) => fail(exit::RUNTIME, e),
        Err(e) => fail(e.exit_code(), e),
    }
}

fn run_admin(config: Option<&Path>, action: AdminCommand) -> Result<String, AdminError> {
    let settings = || -> Result<BrokerSettings, AdminError> {
        let path = config.ok_or_else(|| {
            fedmq::runtime::config::ConfigError::Invalid("--config (the broker config) is required".into())
        })?;
        Ok(BrokerSettings::load(path)?)
    };
    match action {
        AdminCommand::Enroll {
            client_id,
            fed,
            cep,
            ps,
            username,
            iterations,
        } => {
            let e = admin::enroll(&settings()?, client_id, username.as_deref(), fed, cep, ps, iterations)?;
            Ok(e.to_string())
        }
        AdminCommand::Revoke { client_id } => {
            admin::revoke(&settings()?, &client_id)?;
            Ok(format!("revoked {client_id}\n"))
        }
        AdminCommand::Models { store, fed, cep } => admin::models(&store, &fed, &cep),
        AdminCommand::Metrics => admin::metrics(&settings()?),
    }
}

fn sim(path: &Path, out: &Path, store: Option<PathBuf>) -> ExitCode {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let store = match store {
        Some(s) => s,
        None => {
            let s = out.join(format!("{}.store", scenario.name));
            if s.exists() {
                if let Err(e) = fs::remove_dir_all(&s) {
                    return fail(exit::RUNTIME, format!("{}: {e}", s.display()));
                }
            }
            s
        }
    };
    let report = match run_sim(&scenario, &store) {
        Ok(r) => r,
        Err(e) => return fail(exit::RUNTIME, e),
    };
    let write = |ext: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> std::io::Result<PathBuf> {
        fs::create_dir_all(out)?;
        let p = out.join(format!("{}.{ext}", scenario.name));
        let mut w = BufWriter::new(File::create(&p)?);
        f(&mut w)?;
        w.flush()?;
        Ok(p)
    };
    let files =
        write("jsonl", &|w| report.write_jsonl(w)).and_then(|j| Ok((j, write("csv", &|w| report.write_csv(w))?)));
    match files {
        Ok((jsonl, csv)) => {
            println!(
                "{}: {} rounds, final accuracy {:.4}, {} messages, {} dropped",
                report.scenario, report.rounds_completed, report.final_accuracy, report.messages, report.dropped
            );
            println!("report {}", jsonl.display());
            println!("curve {}", csv.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit::RUNTIME, e),
    }
}
