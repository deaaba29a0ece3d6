use std::process::ExitCode;

fn main() -> ExitCode {
    let code = kernel_attention::experiments::cli::run(std::env::args_os());
    ExitCode::from(code)
}
