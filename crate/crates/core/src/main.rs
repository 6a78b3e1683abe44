use clap::Parser;

fn main() {
    let cli = diffusion_zol::cli::Cli::parse();
    std::process::exit(diffusion_zol::cli::run(cli));
}
