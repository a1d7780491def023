use std::process::ExitCode;

fn main() -> ExitCode {
    splinemix::cli::run()
}
