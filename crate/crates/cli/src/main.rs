use std::process::ExitCode;

fn main() -> ExitCode {
    embedkit_cli::main_with(std::env::args_os())
}
