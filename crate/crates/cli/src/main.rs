use std::process::ExitCode;

fn main() -> ExitCode {
    ppcreg_cli::run()
}
