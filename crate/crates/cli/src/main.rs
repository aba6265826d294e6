use std::process::ExitCode;

fn main() -> ExitCode {
    sheetcoder_cli::cli::run(std::env::args_os())
}
