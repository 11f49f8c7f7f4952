//! Dataset generation, the on-disk manifest, and deterministic couple
//! sampling for unpaired training.

use super::{apply_makeup, render_face, FaceParams, MakeupParams, StyleClass};
use crate::geometry::LandmarkSet;
use crate::imageio::PlainImage;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BeforeEntry {
    pub image: String,
    pub landmarks: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AfterEntry {
    pub image: String,
    pub landmarks: String,
    pub style_class: StyleClass,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_side: usize,
    pub before: Vec<BeforeEntry>,
    pub after: Vec<AfterEntry>,
}

/// Generates `n_before` clean faces and `n_after` made-up faces with
/// disjoint identity seed streams, writes PNGs, landmark sidecars, and the
/// manifest, and returns the manifest. Fully deterministic in (args, seed).
pub fn generate_dataset(
    n_before: usize,
    n_after: usize,
    dramatic_fraction: f64,
    seed: u64,
    image_side: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_before == 0 || n_after == 0 {
        return Err(Error::Usage(format!(
            "dataset needs at least one image per set, got {n_before} before / {n_after} after"
        )));
    }
    if !(0.0..=1.0).contains(&dramatic_fraction) {
        return Err(Error::Usage(format!("dramatic fraction {dramatic_fraction} outside [0, 1]")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        image_side,
        before: Vec::with_capacity(n_before),
        after: Vec::with_capacity(n_after),
    };
    for i in 0..n_before {
        let sub = crate::rng::stream(seed, "before-identity", i as u64).next_u64();
        let (img, lm) = render_face(&FaceParams::sample(sub), image_side)?;
        let image = format!("before_{i:03}.png");
        let landmarks = format!("before_{i:03}.lm");
        img.save_png(&out_dir.join(&image))?;
        lm.save_sidecar(&out_dir.join(&landmarks))?;
        manifest.before.push(BeforeEntry { image, landmarks });
    }
    let n_dramatic = (n_after as f64 * dramatic_fraction).round() as usize;
    for j in 0..n_after {
        let sub = crate::rng::stream(seed, "after-identity", j as u64).next_u64();
        let style = if j < n_dramatic { StyleClass::Dramatic } else { StyleClass::Light };
        let msub = crate::rng::stream(seed, "after-makeup", j as u64).next_u64();
        let (base, lm) = render_face(&FaceParams::sample(sub), image_side)?;
        let made = apply_makeup(&base, &lm, &MakeupParams::sample(msub, style));
        let image = format!("after_{j:03}.png");
        let landmarks = format!("after_{j:03}.lm");
        made.save_png(&out_dir.join(&image))?;
        lm.save_sidecar(&out_dir.join(&landmarks))?;
        manifest.after.push(AfterEntry { image, landmarks, style_class: style });
    }
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A photograph plus its landmarks from the sidecar next to it (the image
/// path with its extension replaced by `.lm`).
pub fn load_face(path: &Path) -> Result<(PlainImage, LandmarkSet)> {
    let image = PlainImage::load_png(path)?;
    let sidecar = path.with_extension("lm");
    if !sidecar.exists() {
        return Err(Error::Dataset(format!(
            "missing landmark sidecar {} for image {}",
            sidecar.display(),
            path.display()
        )));
    }
    Ok((image, LandmarkSet::load_sidecar(&sidecar)?))
}

/// A loaded dataset: validated manifest plus lazy image access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { file: path.clone(), msg: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.before.is_empty() || manifest.after.is_empty() {
        return Err(Error::Dataset("manifest lists an empty image set".into()));
    }
    for (image, landmarks) in manifest
        .before
        .iter()
        .map(|e| (&e.image, &e.landmarks))
        .chain(manifest.after.iter().map(|e| (&e.image, &e.landmarks)))
    {
        let ip = dir.join(image);
        if !ip.is_file() {
            return Err(Error::Dataset(format!("missing image file {}", ip.display())));
        }
        // parse every sidecar now so malformed files fail at load time
        LandmarkSet::load_sidecar(&dir.join(landmarks))?;
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest })
}

impl Dataset {
    pub fn n_before(&self) -> usize {
        self.manifest.before.len()
    }

    pub fn n_after(&self) -> usize {
        self.manifest.after.len()
    }

    pub fn load_before(&self, i: usize) -> Result<(PlainImage, LandmarkSet)> {
        let e = &self.manifest.before[i];
        Ok((
            PlainImage::load_png(&self.dir.join(&e.image))?,
            LandmarkSet::load_sidecar(&self.dir.join(&e.landmarks))?,
        ))
    }

    pub fn load_after(&self, j: usize) -> Result<(PlainImage, LandmarkSet, StyleClass)> {
        let e = &self.manifest.after[j];
        Ok((
            PlainImage::load_png(&self.dir.join(&e.image))?,
            LandmarkSet::load_sidecar(&self.dir.join(&e.landmarks))?,
            e.style_class,
        ))
    }
}

/// Unpaired couples for one epoch: both sets shuffled with epoch-derived
/// streams, zipped to the shorter length. Same (seed, epoch) → same couples.
pub fn couples_for_epoch(
    seed: u64,
    epoch: u64,
    n_before: usize,
    n_after: usize,
) -> Vec<(usize, usize)> {
    let mut xs: Vec<usize> = (0..n_before).collect();
    let mut ys: Vec<usize> = (0..n_after).collect();
    xs.shuffle(&mut crate::rng::stream(seed, "couples-before", epoch));
    ys.shuffle(&mut crate::rng::stream(seed, "couples-after", epoch));
    xs.into_iter().zip(ys).collect()
}
