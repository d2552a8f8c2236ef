use clap::Parser;
use tslab_cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
