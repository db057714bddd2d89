use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(secoco::cli::run(std::env::args()) as u8)
}
