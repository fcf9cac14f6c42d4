use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCFO_LOG", "warn")).init();
    let cli = dcfo::cli::Cli::parse();
    std::process::exit(dcfo::cli::run(cli));
}
