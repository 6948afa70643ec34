use clap::Parser;

fn main() {
    let cli = peftcl_cli::Cli::parse();
    if let Err(e) = peftcl_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
