//! The full two-stage pipeline on a small synthetic set.
//!
//! Trains the teacher on the labeled 10%, writes pseudo-labels for the whole
//! train pool, distills the student from them, and compares against the same
//! student trained directly on the 10% ground truth — the comparison the
//! paradigm exists for.
//!
//! ```text
//! cargo run --release --example two_stage
//! ```

use std::path::Path;

use irdistill::datagen::{gen_dataset, make_splits};
use irdistill::pipeline::{
    generate_pseudo_labels, train_student, train_teacher, StudentMode, TrainConfig,
};

fn main() -> irdistill::Result<()> {
    let root = Path::new("target/examples/two_stage");
    let manifest = make_splits(&gen_dataset(root, 120, 24, 7)?, 0.1, 11)?;
    manifest.save(&root.join("manifest.tsv"))?;

    let mut cfg = TrainConfig::default();
    cfg.data_dir = root.to_path_buf();
    cfg.out_dir = root.join("teacher");
    cfg.lr = 0.01;
    cfg.val_every = 10;

    println!("stage one: teacher on 12 labeled scenes");
    let teacher = train_teacher(&cfg, root, &manifest)?;
    println!(
        "  val mIoU {:.4}",
        teacher.logs.last().unwrap().val.as_ref().unwrap().miou
    );

    println!("pseudo-labeling all 120 train scenes");
    let pseudo = generate_pseudo_labels(&teacher.checkpoint, root, &manifest)?;

    let mut scfg = cfg.clone();
    scfg.lr = 6e-3;
    scfg.stage2_epochs = 40;
    scfg.val_every = 40;

    println!("stage two: student on pseudo-labels");
    scfg.out_dir = root.join("student_pseudo");
    let on_pseudo = train_student(&scfg, root, &pseudo, Some(&manifest), StudentMode::Pseudo)?;

    println!("baseline: student directly on the 12 labeled scenes");
    scfg.out_dir = root.join("student_direct");
    let direct = train_student(&scfg, root, &manifest, Some(&manifest), StudentMode::Direct)?;

    let miou = |r: &irdistill::pipeline::TrainReport| {
        r.logs.last().unwrap().val.as_ref().unwrap().miou
    };
    let (p, d) = (miou(&on_pseudo), miou(&direct));
    println!("\nval mIoU: student-on-pseudo {:.4} vs direct-10% {:.4} ({:+.0}%)", p, d, 100.0 * (p / d - 1.0));
    Ok(())
}
