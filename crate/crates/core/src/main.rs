use std::process::ExitCode;

fn main() -> ExitCode {
    longrank::cli::run(std::env::args_os())
}
