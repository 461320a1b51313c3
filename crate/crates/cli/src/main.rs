use clap::Parser;

fn main() -> anyhow::Result<()> {
    vapi::cli::run(vapi::cli::Cli::parse())
}
