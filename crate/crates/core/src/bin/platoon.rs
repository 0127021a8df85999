use std::process::ExitCode;

fn main() -> ExitCode {
    platoon::cli::main_with_args(std::env::args_os())
}
