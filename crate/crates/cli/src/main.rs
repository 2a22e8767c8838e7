use clap::error::ErrorKind;
use clap::Parser;

use schemex_cli::{run, Cli, Failure};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let f = Failure::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", f.to_json_line());
            std::process::exit(f.exit_code());
        }
    };
    if let Err(f) = run(cli) {
        eprintln!("{}", f.to_json_line());
        std::process::exit(f.exit_code());
    }
}
