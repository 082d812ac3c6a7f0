//! Full pipeline at toy scale: pretrain a backbone, freeze it, then train
//! keys, queries and α on top and compare test accuracy.
//!
//! `cargo run --release --example train_attention`

use gattanet::attention::{train_attention, AttentionHyper};
use gattanet::backbone::{pretrain, PretrainHyper};
use gattanet::data::{self, SyntheticSpec};
use gattanet::training::{evaluate, EvalOptions};
use gattanet::{AttentionParams, BackboneModel, ToyCnnConfig};

fn main() -> gattanet::Result<()> {
    let spec = SyntheticSpec::default();
    let all = data::synthetic_dataset(1200, &spec, 1)?;
    let test = data::synthetic_dataset(400, &spec, 2)?;
    let (train, val) = all.split_validation(0.1, 0)?;

    let model = BackboneModel::build(ToyCnnConfig::with_classes(spec.num_classes), 0)?;
    let hyper = PretrainHyper {
        max_epochs: 8,
        patience: 4,
        ..PretrainHyper::default()
    };
    let backbone = pretrain(model, &train, &val, &hyper)?.model.freeze();

    let params = AttentionParams::for_backbone(&backbone, 16, 0)?;
    println!("trainable attention parameters: {}", params.param_count());
    let hyper = AttentionHyper {
        max_epochs: 6,
        patience: 6,
        ..AttentionHyper::default()
    };
    let out = train_attention(&backbone, params, &train, &val, &hyper)?;
    for r in &out.history {
        println!("epoch {:>3}  loss {:.4}  val {:.3}", r.epoch, r.train_loss, r.val_acc);
    }
    let opts = EvalOptions::default();
    let base = evaluate(&backbone, None, &test, &opts)?.accuracy;
    let aug = evaluate(&backbone, Some(&out.params), &test, &opts)?.accuracy;
    println!("best epoch {}, alpha {:?}", out.best_epoch, out.params.alphas());
    println!("test accuracy: baseline {base:.3}, augmented {aug:.3}");
    Ok(())
}
