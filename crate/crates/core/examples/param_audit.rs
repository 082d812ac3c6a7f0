//! Parameter counts of the toy backbone and its attention system.
//!
//! `cargo run --example param_audit`

use gattanet::attention::{attention_param_count, AttentionParams};
use gattanet::{BackboneModel, ToyCnnConfig};

fn main() -> gattanet::Result<()> {
    for (name, config) in [("cifar10", ToyCnnConfig::cifar10()), ("cifar100", ToyCnnConfig::cifar100())] {
        let model = BackboneModel::build(config.clone(), 0)?;
        let channels: Vec<usize> = config.geometries().iter().map(|g| g.channels()).collect();
        println!("{name}: backbone {}", model.param_count());
        for dim in [4, 8, 16, 32, 64] {
            let attention = AttentionParams::for_backbone(&model, dim, 0)?;
            assert_eq!(attention.param_count(), attention_param_count(&channels, dim));
            println!("  d={dim:<2} attention {}", attention.param_count());
        }
    }
    Ok(())
}
