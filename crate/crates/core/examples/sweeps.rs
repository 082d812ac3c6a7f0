//! Noise and lesion sweeps with the experiment driver on synthetic data.
//! Trains a small model first; all files land in a temporary directory.
//!
//! `cargo run --release --example sweeps`

use gattanet::experiment::{self, ExperimentConfig};

fn main() -> gattanet::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(
        "dataset=synthetic
synthetic_train=1000
synthetic_test=300
backbone_max_epochs=6
backbone_patience=3
attention_max_epochs=4
attention_patience=4",
    )?;
    cfg.out_dir = dir.path().to_path_buf();

    println!("{}", experiment::pretrain_backbone(&cfg)?);
    println!("{}", experiment::train_attention(&cfg)?);

    println!("{}", experiment::NOISE_HEADER);
    for r in experiment::noise_sweep(&cfg)? {
        println!("{},{:.3},{:.3},{:+.2}", r.sigma, r.baseline_acc, r.augmented_acc, r.gap_pp());
    }
    let rows = experiment::lesion_sweep(&cfg)?;
    println!("lesion sweep: {} rows", rows.len());
    for r in rows.iter().filter(|r| r.set == "named") {
        println!("  {} {:.3}", r.mask, r.accuracy);
    }
    let export = experiment::export_maps(&cfg)?;
    println!("exported {} files for {} images", export.files.len(), export.images);
    Ok(())
}
