use std::process::ExitCode;

use nbrdf_cli::config::{cli, spec_by_name, RunConfig};
use nbrdf_cli::{commands, CliError};

fn dispatch() -> Result<(), CliError> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let (name, sub) = match sub.subcommand() {
        Some((inner, m)) => (format!("{name} {inner}"), m),
        None => (name.to_owned(), sub),
    };
    let spec = spec_by_name(&name).ok_or_else(|| CliError::Config(format!("unknown command {name}")))?;
    let cfg = RunConfig::from_matches(spec, sub)?;
    if sub.get_flag("print_config") {
        print!("# command: {name}\n{}", cfg.to_text());
        return Ok(());
    }
    let threads: usize = cfg.get("threads")?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))?;
    commands::run(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
