use clap::Parser;

fn main() -> anyhow::Result<()> {
    voxdetail_server::cli::run(voxdetail_server::cli::Cli::parse())
}
