use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mmcrf_cli::run(std::env::args_os()))
}
