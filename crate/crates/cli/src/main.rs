use clap::Parser;

use rlab_cli::{run, Cli};

fn main() {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rlab: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
