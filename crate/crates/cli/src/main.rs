use std::process::ExitCode;

fn main() -> ExitCode {
    twinloop_cli::main_with(std::env::args_os())
}
