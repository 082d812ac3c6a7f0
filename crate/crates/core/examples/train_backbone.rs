//! Pretrains the toy CNN on a small synthetic dataset and saves a
//! checkpoint.
//!
//! `cargo run --release --example train_backbone -- [epochs] [path]`

use std::path::PathBuf;

use gattanet::backbone::{pretrain, PretrainHyper};
use gattanet::checkpoint::Checkpoint;
use gattanet::data::{self, SyntheticSpec};
use gattanet::training::{evaluate, EvalOptions};
use gattanet::{BackboneModel, ToyCnnConfig};

fn main() -> gattanet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let path = args.next().map(PathBuf::from).unwrap_or_else(|| "out/example_backbone.gatta".into());

    let spec = SyntheticSpec::default();
    let all = data::synthetic_dataset(1200, &spec, 1)?;
    let test = data::synthetic_dataset(400, &spec, 2)?;
    let (train, val) = all.split_validation(0.1, 0)?;

    let model = BackboneModel::build(ToyCnnConfig::with_classes(spec.num_classes), 0)?;
    let hyper = PretrainHyper {
        max_epochs: epochs,
        patience: 5,
        ..PretrainHyper::default()
    };
    let out = pretrain(model, &train, &val, &hyper)?;
    for r in &out.history {
        println!("epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}", r.epoch, r.train_loss, r.train_acc, r.val_acc);
    }
    let test_acc = evaluate(&out.model, None, &test, &EvalOptions::default())?.accuracy;
    println!("best epoch {} (val {:.3}), test {:.3}", out.best_epoch, out.best_val_acc, test_acc);
    Checkpoint::backbone_only(out.model).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
