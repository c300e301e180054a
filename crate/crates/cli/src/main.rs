use std::io::{self, Write};
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let result = tecnet_cli::run(std::env::args_os(), &mut lock);
    let _ = lock.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tecnet_cli::report_error(&e);
            ExitCode::from(tecnet_cli::exit_code(&e) as u8)
        }
    }
}
