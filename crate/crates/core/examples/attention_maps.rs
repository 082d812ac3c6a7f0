//! Runs one modulated pass and inspects the attention state: global query,
//! per-layer agreement maps and their 16-bit PGM export.
//!
//! `cargo run --release --example attention_maps`

use gattanet::attention::{run, RunOptions};
use gattanet::backbone::Geometry;
use gattanet::data::{self, SyntheticSpec};
use gattanet::export::NormalizedMap;
use gattanet::{AttentionParams, BackboneModel, Tensor, ToyCnnConfig};

fn main() -> gattanet::Result<()> {
    let backbone = BackboneModel::build(ToyCnnConfig::with_classes(4), 0)?;
    let mut attention = AttentionParams::for_backbone(&backbone, 16, 0)?;
    for layer in &mut attention.layers {
        layer.alpha = Tensor::scalar(0.05);
    }
    let images = data::synthetic_dataset(4, &SyntheticSpec::default(), 3)?;
    let (batch, labels) = images.batch(&[0, 1, 2, 3]);
    let out = run(&backbone, &attention, &batch, &RunOptions::default())?;
    let state = &out.states[0];
    println!("labels {labels:?}, global query {:?}", state.global_query.shape());

    let dir = tempfile::tempdir()?;
    let tags = backbone.config().layer_tags();
    for ((geometry, tag), gatta) in backbone.geometries().iter().zip(&tags).zip(&state.gatta) {
        let first = gatta.slice_outer(0, 1)?;
        match *geometry {
            Geometry::Conv { height, width, .. } => {
                let map = NormalizedMap::from_values(first.data(), width, height)?;
                let path = dir.path().join(format!("{tag}.pgm"));
                std::fs::write(&path, map.to_pgm())?;
                println!("{tag}: {width}x{height} map, range [{:.3}, {:.3}]", map.min, map.max);
            }
            Geometry::Dense { units } => {
                let peak = first.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
                println!("{tag}: {units} unit scores, max {peak:.3}");
            }
        }
    }
    Ok(())
}
