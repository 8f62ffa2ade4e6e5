use std::process::ExitCode;

fn main() -> ExitCode {
    advfeat::cli::main_with_args(std::env::args_os())
}
