use clap::Parser;

fn main() {
    let cli = kfp_cli::Cli::parse();
    std::process::exit(kfp_cli::run(cli));
}
