use clap::Parser;

fn main() {
    let cli = dms_cli::Cli::parse();
    if let Err(e) = dms_cli::run(cli) {
        eprintln!("dms: {e}");
        std::process::exit(e.exit_code());
    }
}
