use std::process::ExitCode;

use clap::Parser;
use yoloface_cli::{configure_threads, run, Cli, ExitKind};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ExitKind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let threads = std::env::var("YOLOFACE_THREADS").ok();
    let result = configure_threads(threads.as_deref())
        .and_then(|_| run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
