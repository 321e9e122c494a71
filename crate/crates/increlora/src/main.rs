use std::process::ExitCode;

fn main() -> ExitCode {
    increlora::cli::run()
}
