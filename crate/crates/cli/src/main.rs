use clap::Parser;
use maskgrid_cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(summary) => {
            for name in summary.outputs.keys() {
                println!("wrote {name}");
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
