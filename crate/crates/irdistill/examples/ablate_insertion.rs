//! Sweep the adapter insertion layers: none, first half, last half, all
//! blocks, last two. Trains one short teacher per setting and scores each
//! on the validation split.
//!
//! ```text
//! cargo run --release --example ablate_insertion
//! ```

use std::path::Path;

use irdistill::datagen::{gen_dataset, make_splits};
use irdistill::pipeline::{ablation_csv, run_ablation, AblationAxis, TrainConfig};

fn main() -> irdistill::Result<()> {
    let root = Path::new("target/examples/ablation");
    let manifest = make_splits(&gen_dataset(root, 120, 24, 7)?, 0.1, 11)?;
    manifest.save(&root.join("manifest.tsv"))?;

    let mut cfg = TrainConfig::default();
    cfg.data_dir = root.to_path_buf();
    cfg.out_dir = root.join("runs");
    cfg.stage1_epochs = 20;
    cfg.lr = 0.01;
    cfg.val_every = 20;

    println!("training one 20-epoch teacher per insertion setting...");
    let rows = run_ablation(AblationAxis::Insertion, &cfg, root, &manifest)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
