use std::io::Write;

use itemledger::gateway::cli::{run, CliEnv, STORE_ENV};

fn main() {
    let env = CliEnv { store: std::env::var_os(STORE_ENV).map(Into::into), ..CliEnv::default() };
    let out = run(std::env::args_os(), &env);
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    std::process::exit(out.code);
}
