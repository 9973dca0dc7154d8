use clap::Parser;
use vitforge_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    if let Err(e) = run(&cli, &mut out, &mut err) {
        eprintln!("vitforge: {e}");
        std::process::exit(e.exit_code());
    }
}
