//! Synthetic infrared small-target scenes plus the dataset bookkeeping
//! around them: manifests, labeled/unlabeled splits, and pseudo-label
//! dataset assembly.
//!
//! A scene is a 64×64 image in [0, 1]: a smooth value-noise background,
//! optional bright linear clutter, Gaussian pixel noise, and 1–3 small
//! Gaussian-profile targets whose support disks form the mask.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{write_image_pgm, write_mask_pgm};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Square scene side in pixels.
pub const SCENE_SIDE: usize = 64;

/// Target peak must exceed the local background mean by this much.
pub const DETECTABILITY_FLOOR: f64 = 0.2;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const LATTICE: usize = 8;
const BG_LOW: f64 = 0.15;
const BG_HIGH: f64 = 0.40;

/// Where a sample's mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Labeled,
    Unlabeled,
    Pseudo,
    Val,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Labeled => "labeled",
            Provenance::Unlabeled => "unlabeled",
            Provenance::Pseudo => "pseudo",
            Provenance::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Provenance::Labeled),
            "unlabeled" => Ok(Provenance::Unlabeled),
            "pseudo" => Ok(Provenance::Pseudo),
            "val" => Ok(Provenance::Val),
            other => Err(Error::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Generation knobs for one scene; `radii` and `intensities` hold one entry
/// per target.
#[derive(Clone, Debug)]
pub struct SceneParams {
    pub n_targets: usize,
    pub radii: Vec<usize>,
    pub intensities: Vec<f64>,
    pub noise_sigma: f64,
    pub clutter_edges: usize,
    pub seed: u64,
}

impl SceneParams {
    /// Draw a parameter set uniformly from the supported ranges.
    pub fn sampled(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_targets = rng.gen_range(1..=3);
        let radii = (0..n_targets).map(|_| rng.gen_range(1..=3)).collect();
        let intensities = (0..n_targets).map(|_| rng.gen_range(0.6..=1.0)).collect();
        SceneParams {
            n_targets,
            radii,
            intensities,
            noise_sigma: rng.gen_range(0.02..=0.08),
            clutter_edges: rng.gen_range(0..=2),
            seed: splitmix64(seed, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=3).contains(&self.n_targets) {
            return bad(format!("n_targets {} outside 1..=3", self.n_targets));
        }
        if self.radii.len() != self.n_targets || self.intensities.len() != self.n_targets {
            return bad("radii/intensities must list one entry per target".into());
        }
        if let Some(r) = self.radii.iter().find(|r| !(1..=3).contains(*r)) {
            return bad(format!("target radius {r} outside 1..=3"));
        }
        if let Some(i) = self.intensities.iter().find(|i| !(0.6..=1.0).contains(*i)) {
            return bad(format!("target intensity {i} outside 0.6..=1.0"));
        }
        if self.noise_sigma != 0.0 && !(0.02..=0.08).contains(&self.noise_sigma) {
            return bad(format!("noise sigma {} outside 0.02..=0.08 (or 0)", self.noise_sigma));
        }
        if self.clutter_edges > 3 {
            return bad(format!("clutter_edges {} outside 0..=3", self.clutter_edges));
        }
        Ok(())
    }
}

/// One generated scene: image in [0, 1] and its binary target mask, both
/// (SCENE_SIDE, SCENE_SIDE).
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub provenance: Provenance,
}

/// SplitMix64 step used to derive independent per-sample seeds.
pub(crate) fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Smooth background: a coarse random lattice bilinearly upsampled.
fn value_noise_background(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nodes = LATTICE + 1;
    let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen_range(BG_LOW..=BG_HIGH)).collect();
    let cell = SCENE_SIDE as f64 / LATTICE as f64;
    let mut out = vec![0.0; SCENE_SIDE * SCENE_SIDE];
    for i in 0..SCENE_SIDE {
        for j in 0..SCENE_SIDE {
            let y = i as f64 / cell;
            let x = j as f64 / cell;
            let (y0, x0) = (y as usize, x as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |r: usize, c: usize| lattice[r.min(LATTICE) * nodes + c.min(LATTICE)];
            out[i * SCENE_SIDE + j] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
        }
    }
    out
}

/// Bright linear structure: a thin anti-aliased streak acting as
/// false-alarm bait.
fn add_clutter_edge(img: &mut [f64], rng: &mut ChaCha8Rng) {
    let cy = rng.gen_range(8.0..(SCENE_SIDE as f64 - 8.0));
    let cx = rng.gen_range(8.0..(SCENE_SIDE as f64 - 8.0));
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let half_len = rng.gen_range(10.0..24.0);
    let amp = rng.gen_range(0.08..0.15);
    let (dy, dx) = (angle.sin(), angle.cos());
    for i in 0..SCENE_SIDE {
        for j in 0..SCENE_SIDE {
            let (py, px) = (i as f64 - cy, j as f64 - cx);
            let along = py * dy + px * dx;
            if along.abs() > half_len {
                continue;
            }
            let perp = py * dx - px * dy;
            img[i * SCENE_SIDE + j] += amp * (-perp * perp / 0.8).exp();
        }
    }
}

/// Render a scene. Deterministic in the seed: the same parameters always
/// produce bit-identical image and mask data.
pub fn generate_scene(id: &str, p: &SceneParams) -> Result<Sample> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut img = value_noise_background(&mut rng);
    for _ in 0..p.clutter_edges {
        add_clutter_edge(&mut img, &mut rng);
    }

    // Place targets by rejection: inside the frame with margin, pairwise
    // non-overlapping with a 2-pixel buffer.
    let mut centers: Vec<(usize, usize, usize)> = Vec::new();
    for &r in &p.radii {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ci = rng.gen_range(r + 1..SCENE_SIDE - r - 1);
            let cj = rng.gen_range(r + 1..SCENE_SIDE - r - 1);
            let clear = centers.iter().all(|&(oi, oj, or)| {
                let d2 = (ci as f64 - oi as f64).powi(2) + (cj as f64 - oj as f64).powi(2);
                d2.sqrt() >= (r + or + 2) as f64
            });
            if clear {
                centers.push((ci, cj, r));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "target placement infeasible after {MAX_PLACEMENT_ATTEMPTS} attempts (id {id})"
            )));
        }
    }

    let mut mask = vec![0.0; SCENE_SIDE * SCENE_SIDE];
    for (&(ci, cj, r), &intensity) in centers.iter().zip(&p.intensities) {
        let sigma = (r as f64 + 0.5) / 2.0;
        for i in 0..SCENE_SIDE {
            for j in 0..SCENE_SIDE {
                let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
                img[i * SCENE_SIDE + j] += intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                if d2 <= (r * r) as f64 {
                    mask[i * SCENE_SIDE + j] = 1.0;
                }
            }
        }
    }

    // Detectability floor on the noiseless composite: peak vs the mean of
    // off-target pixels in an 11×11 window.
    for &(ci, cj, _) in &centers {
        let peak = img[ci * SCENE_SIDE + cj].min(1.0);
        let (mut sum, mut n) = (0.0, 0);
        for i in ci.saturating_sub(5)..(ci + 6).min(SCENE_SIDE) {
            for j in cj.saturating_sub(5)..(cj + 6).min(SCENE_SIDE) {
                if mask[i * SCENE_SIDE + j] == 0.0 {
                    sum += img[i * SCENE_SIDE + j].min(1.0);
                    n += 1;
                }
            }
        }
        if peak - sum / (n as f64) < DETECTABILITY_FLOOR {
            return Err(Error::Config(format!(
                "target at ({ci}, {cj}) fails the detectability floor (id {id})"
            )));
        }
    }

    if p.noise_sigma > 0.0 {
        for v in &mut img {
            *v += p.noise_sigma * gaussian(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Sample {
        id: id.to_string(),
        image: Tensor::new(&[SCENE_SIDE, SCENE_SIDE], img)?,
        mask: Tensor::new(&[SCENE_SIDE, SCENE_SIDE], mask)?,
        provenance: Provenance::Unlabeled,
    })
}

/// One dataset row: paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub provenance: Provenance,
}

/// The dataset index: entries plus the split settings that produced them
/// (`label_fraction` 0 means the manifest has not been split yet).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub label_fraction: f64,
}

impl Manifest {
    pub fn with_provenance(&self, p: Provenance) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.provenance == p).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("# split_seed={} label_fraction={}\n", self.split_seed, self.label_fraction);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.image_path.display(),
                e.mask_path.display(),
                e.provenance.as_str()
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut offset = 0;
        let mut lines = text.lines();
        let header = match lines.next() {
            Some(h) => h,
            None => return Err(Error::Format { offset: 0, msg: "empty manifest".into() }),
        };
        let parse_header = || -> Option<(u64, f64)> {
            let rest = header.strip_prefix("# split_seed=")?;
            let (seed, frac) = rest.split_once(" label_fraction=")?;
            Some((seed.parse().ok()?, frac.parse().ok()?))
        };
        let Some((split_seed, label_fraction)) = parse_header() else {
            return Err(Error::Format { offset: 0, msg: format!("bad manifest header {header:?}") });
        };
        offset += header.len() + 1;
        let mut entries = Vec::new();
        for line in lines {
            if !line.is_empty() {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(Error::Format {
                        offset,
                        msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
                    });
                }
                entries.push(ManifestEntry {
                    id: fields[0].to_string(),
                    image_path: PathBuf::from(fields[1]),
                    mask_path: PathBuf::from(fields[2]),
                    provenance: Provenance::parse(fields[3])
                        .map_err(|e| Error::Format { offset, msg: e.to_string() })?,
                });
            }
            offset += line.len() + 1;
        }
        Ok(Manifest { entries, split_seed, label_fraction })
    }
}

/// Assign labeled/unlabeled provenance: shuffle the non-val entries with the
/// split seed and label the first ⌈fraction·N⌉ of the shuffle. Entry order
/// in the returned manifest is unchanged; val entries pass through.
pub fn make_splits(manifest: &Manifest, label_fraction: f64, split_seed: u64) -> Result<Manifest> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::Config(format!("label_fraction {label_fraction} outside (0, 1]")));
    }
    let pool: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].provenance != Provenance::Val)
        .collect();
    if pool.is_empty() {
        return Err(Error::Contract("make_splits: no splittable samples".into()));
    }
    let mut order = pool.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_labeled = (label_fraction * pool.len() as f64).ceil() as usize;
    let mut out = manifest.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.entries[idx].provenance =
            if rank < n_labeled { Provenance::Labeled } else { Provenance::Unlabeled };
    }
    out.split_seed = split_seed;
    out.label_fraction = label_fraction;
    Ok(out)
}

/// Re-key every trainable entry onto a teacher mask: the result covers
/// exactly D_L ∪ D_U with provenance `pseudo`, never referencing a ground
/// truth mask path; val entries are dropped (they keep GT in the original
/// manifest for evaluation).
pub fn build_pseudo_dataset(
    manifest: &Manifest,
    teacher_masks: &BTreeMap<String, PathBuf>,
) -> Result<Manifest> {
    let train: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| matches!(e.provenance, Provenance::Labeled | Provenance::Unlabeled))
        .collect();
    let missing: Vec<&str> = train
        .iter()
        .filter(|e| !teacher_masks.contains_key(&e.id))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "build_pseudo_dataset: missing teacher masks for {}",
            missing.join(", ")
        )));
    }
    let entries = train
        .iter()
        .map(|e| ManifestEntry {
            id: e.id.clone(),
            image_path: e.image_path.clone(),
            mask_path: teacher_masks[&e.id].clone(),
            provenance: Provenance::Pseudo,
        })
        .collect();
    Ok(Manifest { entries, split_seed: manifest.split_seed, label_fraction: manifest.label_fraction })
}

/// Generate a dataset under `out_dir`: `scenes` training-pool samples plus
/// `val_scenes` held-out validation samples, written as PGM files under
/// images/ and masks/, with an unsplit manifest returned.
pub fn gen_dataset(out_dir: &Path, scenes: usize, val_scenes: usize, seed: u64) -> Result<Manifest> {
    for sub in ["images", "masks", "pseudo"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut entries = Vec::new();
    let emit = |index: usize, id: String, provenance: Provenance| -> Result<ManifestEntry> {
        let params = SceneParams::sampled(splitmix64(seed, index as u64));
        let mut sample = generate_scene(&id, &params)?;
        sample.provenance = provenance;
        let image_path = PathBuf::from("images").join(format!("{id}.pgm"));
        let mask_path = PathBuf::from("masks").join(format!("{id}.pgm"));
        write_image_pgm(&out_dir.join(&image_path), &sample.image)?;
        write_mask_pgm(&out_dir.join(&mask_path), &sample.mask)?;
        Ok(ManifestEntry { id, image_path, mask_path, provenance })
    };
    for i in 0..scenes {
        entries.push(emit(i, format!("scene-{i:06}"), Provenance::Unlabeled)?);
    }
    for i in 0..val_scenes {
        entries.push(emit(scenes + i, format!("val-{i:06}"), Provenance::Val)?);
    }
    Ok(Manifest { entries, split_seed: 0, label_fraction: 0.0 })
}
