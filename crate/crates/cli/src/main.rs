use std::process::ExitCode;

fn main() -> ExitCode {
    let env: Vec<(String, String)> = std::env::vars().collect();
    freetumor_cli::main_with(std::env::args(), &env)
}
