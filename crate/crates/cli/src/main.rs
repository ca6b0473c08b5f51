use clap::Parser;
use incontext_cli::Cli;

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    incontext_cli::run(cli)
}
