//! Generates the synthetic dataset, writes it in CIFAR-10 binary layout,
//! reads it back and runs the nearest-centroid sanity check.
//!
//! `cargo run --release --example synthetic_data`

use gattanet::data::{self, CifarVariant, SyntheticSpec};

fn main() -> gattanet::Result<()> {
    let spec = SyntheticSpec::default();
    let train = data::synthetic_dataset(2000, &spec, 1)?;
    let test = data::synthetic_dataset(500, &spec, 2)?;
    println!("class counts {:?}", train.class_counts());
    println!("nearest-centroid accuracy {:.3}", data::nearest_centroid_accuracy(&train, &test));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("data_batch_1.bin");
    data::write_cifar_file(&path, &test, CifarVariant::Cifar10)?;
    let bytes = std::fs::metadata(&path)?.len();
    let back = data::read_cifar_file(&path, CifarVariant::Cifar10, data::Split::Test)?;
    println!("wrote {bytes} bytes ({} records), read back {} images", bytes / 3073, back.len());

    let (batch, _) = test.batch(&[0, 1, 2, 3]);
    let noisy = data::add_gaussian_noise(&batch, 0.1, 7, false)?;
    let augmented = data::augment(&batch, 7)?;
    println!("noisy batch {:?}, augmented batch {:?}", noisy.shape(), augmented.shape());
    Ok(())
}
