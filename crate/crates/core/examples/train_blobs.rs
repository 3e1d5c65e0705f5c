//! Trains TINY 2D on freshly generated blobs and prints the epoch log.
//!
//! cargo run --release -p pmfs-core --example train_blobs -- [size] [epochs] [ablate]

use std::time::Instant;

use pmfs_core::model::{AttentionMode, DecoderMode, ScalingConfig};
use pmfs_core::synthetic::{generate, SyntheticSpec};
use pmfs_core::tensor::Tensor;
use pmfs_core::metrics::LabelVolume;
use pmfs_core::train::{split, train, Example, RunConfig};

fn main() -> pmfs_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let ablate = args.get(3).is_some_and(|s| s == "ablate");

    let mut cfg = ScalingConfig::resolve("tiny-2d")?;
    cfg.in_channels = 1;
    if ablate {
        cfg.attention = AttentionMode::Identity;
        cfg.decoder = DecoderMode::None;
    }
    let spec = SyntheticSpec::blobs_2d(200, size, 7);
    let cases = generate(&spec)?
        .into_iter()
        .map(|s| {
            Ok(Example {
                image: Tensor::new(vec![1, size, size], s.image)?,
                mask: LabelVolume::unit(vec![size, size], s.mask)?,
            })
        })
        .collect::<pmfs_core::Result<Vec<_>>>()?;
    let run = RunConfig { epochs, ..RunConfig::default() };
    let (tr, va) = split(cases, run.val_fraction)?;
    let t = Instant::now();
    let report = train(&run, &cfg, &tr, &va, None)?;
    print!("{}", report.render());
    println!("elapsed {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}
