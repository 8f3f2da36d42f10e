use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(eddy_stommel::cli::run(std::env::args_os()))
}
