//! `leam fixtures`: generate the packaged correlation fixture or a synthetic
//! demo dataset so the whole pipeline can be exercised without external data.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use leam_core::fixtures::{demo_dataset, fig3_fixture};

use crate::common::{ensure_dir, EXIT_OK};

#[derive(Args, Debug)]
pub struct FixturesArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Which fixture to generate.
    #[arg(long, default_value = "demo", value_parser = ["demo", "fig3"])]
    pub kind: String,
    /// Demo dataset: number of identities.
    #[arg(long, default_value_t = 3)]
    pub identities: usize,
    /// Demo dataset: images per identity.
    #[arg(long, default_value_t = 3)]
    pub images: usize,
    /// Demo dataset: square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    /// Generation seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn run(args: &FixturesArgs) -> Result<i32> {
    ensure_dir(&args.out)?;
    match args.kind.as_str() {
        "fig3" => {
            let fixture = fig3_fixture(&args.out)?;
            println!(
                "wrote {} (pair {}, layer {}, {} selected pixels)",
                fixture.manifest_path.display(),
                fixture.pair_id,
                fixture.layer,
                fixture.selected_pixels,
            );
        }
        _ => {
            let manifest = demo_dataset(&args.out, args.identities, args.images, args.side, args.seed)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(EXIT_OK)
}
