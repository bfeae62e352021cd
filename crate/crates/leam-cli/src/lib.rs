//! Command-line front end for the activation-map pipeline.

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod common;

mod compare_cmd;
mod correlate_cmd;
mod fixtures_cmd;
mod map_cmd;
mod occlude_cmd;
mod stats_cmd;

pub use compare_cmd::CompareArgs;
pub use correlate_cmd::CorrelateArgs;
pub use fixtures_cmd::FixturesArgs;
pub use map_cmd::MapArgs;
pub use occlude_cmd::OccludeArgs;
pub use stats_cmd::StatsArgs;

#[derive(Parser, Debug)]
#[command(
    name = "leam",
    version,
    about = "Layer activation maps for embedding networks: generation, region correlation, similarity, occlusion evaluation, statistics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate per-pair, per-layer activation maps into an archive.
    Map(MapArgs),
    /// Correlate archived maps with segmentation masks.
    Correlate(CorrelateArgs),
    /// Compare archived maps via Bhattacharyya coefficient and EMD.
    Compare(CompareArgs),
    /// Measure cosine-similarity drops under validation occlusions.
    Occlude(OccludeArgs),
    /// Summaries, demographic grouping, and Mann-Whitney tests over CSVs.
    Stats(StatsArgs),
    /// Generate packaged fixtures and demo datasets.
    Fixtures(FixturesArgs),
}

/// Dispatch a parsed invocation; the returned code is the process exit code
/// (0 ok, 1 total failure, 2 partial failure with errors.log).
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Map(args) => map_cmd::run(args),
        Command::Correlate(args) => correlate_cmd::run(args),
        Command::Compare(args) => compare_cmd::run(args),
        Command::Occlude(args) => occlude_cmd::run(args),
        Command::Stats(args) => stats_cmd::run(args),
        Command::Fixtures(args) => fixtures_cmd::run(args),
    }
}
