use clap::Parser;
use paac_cli::args::Cli;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    paac_cli::run(Cli::parse())
}
