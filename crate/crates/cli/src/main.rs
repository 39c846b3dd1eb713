use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(texture_reformer_cli::cli::run(std::env::args_os()))
}
