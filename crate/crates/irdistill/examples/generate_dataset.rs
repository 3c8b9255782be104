//! Generate a synthetic infrared dataset and split it for training.
//!
//! Writes 16-bit PGM scenes, binary PGM masks, and a TSV manifest under
//! `target/examples/dataset`, then marks 10% of the train pool as labeled.
//!
//! ```text
//! cargo run --release --example generate_dataset
//! ```

use std::path::Path;

use irdistill::datagen::{gen_dataset, make_splits, Provenance};
use irdistill::io::read_mask_pgm;

fn main() -> irdistill::Result<()> {
    let out = Path::new("target/examples/dataset");
    let manifest = gen_dataset(out, 60, 12, 7)?;
    let split = make_splits(&manifest, 0.1, 11)?;
    let path = out.join("manifest.tsv");
    split.save(&path)?;

    println!("wrote {} scenes to {}", split.entries.len(), out.display());
    for p in [Provenance::Labeled, Provenance::Unlabeled, Provenance::Val] {
        println!("  {:>9}: {}", p.as_str(), split.with_provenance(p).len());
    }

    println!("\nfirst rows of {}:", path.display());
    for e in split.entries.iter().take(4) {
        println!(
            "  {}  {}  {}  {}",
            e.id,
            e.image_path.display(),
            e.mask_path.display(),
            e.provenance.as_str()
        );
    }

    let mut px = Vec::new();
    for e in split.entries.iter().take(20) {
        let mask = read_mask_pgm::<f64>(&out.join(&e.mask_path))?;
        px.push(mask.data().iter().filter(|v| **v == 1.0).count());
    }
    px.sort_unstable();
    println!(
        "\ntarget area over 20 masks: min {} px, median {} px, max {} px of {} px/scene",
        px[0],
        px[px.len() / 2],
        px[px.len() - 1],
        64 * 64
    );
    Ok(())
}
