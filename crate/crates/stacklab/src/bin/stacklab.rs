use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(stacklab::cli::run())
}
