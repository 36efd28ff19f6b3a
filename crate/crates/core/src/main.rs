use clap::Parser;

fn main() {
    let cli = aniso_extremal::cli::Cli::parse();
    std::process::exit(aniso_extremal::cli::run(cli));
}
