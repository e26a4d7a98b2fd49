//! Synthetic dataset trees: volumes, four-reader annotations and a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nodulenet::volume_store::{
    generate_phantom, save_annotations, save_volume, DatasetManifest, ManifestEntry, PhantomSpec, ReaderMask,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSetConfig {
    pub count: usize,
    pub shape: [usize; 3],
    /// Inclusive range of nodules per volume.
    pub nodules: [usize; 2],
    pub diameter_range_vox: [f64; 2],
    pub nodule_intensity: f32,
    pub background_noise_sd: f32,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        Self {
            count: 12,
            shape: [64; 3],
            nodules: [1, 3],
            diameter_range_vox: [6.0, 24.0],
            nodule_intensity: 1.0,
            background_noise_sd: 0.1,
        }
    }
}

pub const READERS: u8 = 4;

/// Spec of the `i`-th volume of a set.
pub fn volume_spec(cfg: &PhantomSetConfig, seed: u64, i: usize, rng: &mut ChaCha8Rng) -> PhantomSpec {
    PhantomSpec {
        shape: cfg.shape,
        n_nodules: rng.random_range(cfg.nodules[0]..=cfg.nodules[1].max(cfg.nodules[0])),
        diameter_range_vox: cfg.diameter_range_vox,
        nodule_intensity: cfg.nodule_intensity,
        background_noise_sd: cfg.background_noise_sd,
        seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
    }
}

/// Writes `volumes/`, `annotations/` and `manifest.json` under `out`.
pub fn write_phantom_set(cfg: &PhantomSetConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out.join("volumes"))?;
    fs::create_dir_all(out.join("annotations"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let spec = volume_spec(cfg, seed, i, &mut rng);
        let (vol, gts) = generate_phantom(&spec).with_context(|| format!("phantom {i}"))?;
        let shape = vol.shape();
        let mut bits = vec![false; shape.iter().product()];
        for g in &gts {
            for v in g.consensus_mask.voxels() {
                bits[(v[0] * shape[1] + v[1]) * shape[2] + v[2]] = true;
            }
        }
        let readers: Vec<ReaderMask> = (0..READERS).map(|r| ReaderMask::new(r, shape, bits.clone())).collect();
        let volume = PathBuf::from("volumes").join(format!("{}.mha", vol.id));
        let annotation = PathBuf::from("annotations").join(format!("{}.json", vol.id));
        save_volume(&vol, &out.join(&volume))?;
        save_annotations(&out.join(&annotation), shape, &readers)?;
        entries.push(ManifestEntry {
            volume,
            annotation,
            fold: None,
        });
    }
    let path = out.join("manifest.json");
    DatasetManifest::new(entries, out).save(&path)?;
    Ok(path)
}
