use std::process::ExitCode;

fn main() -> ExitCode {
    wignersim::cli::main()
}
