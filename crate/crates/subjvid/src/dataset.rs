//! Synthetic subject corpus on disk.
//!
//! ```text
//! <out>/manifest.json
//! <out>/subject_00/meta.json      same record as the manifest entry
//! <out>/subject_00/ref_0.png      reference images
//! <out>/subject_00/mask_0.png     ground-truth masks
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use subjvid_core::customize::ReferenceSet;
use subjvid_core::synth::{self, Appearance, SyntheticSubject};
use subjvid_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::images;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBJECT_META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: usize,
    pub dir: String,
    pub class_word: String,
    pub shape: usize,
    pub primary: usize,
    pub secondary: usize,
    pub pattern: usize,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub image: String,
    pub mask: String,
    pub scene: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl SubjectRecord {
    pub fn appearance(&self) -> Appearance {
        Appearance {
            shape: self.shape,
            primary: self.primary,
            secondary: self.secondary,
            pattern: self.pattern,
        }
    }

    fn from_subject(s: &SyntheticSubject) -> Self {
        let a = s.appearance;
        Self {
            id: s.id,
            dir: subject_dir_name(s.id),
            class_word: a.class_word().to_string(),
            shape: a.shape,
            primary: a.primary,
            secondary: a.secondary,
            pattern: a.pattern,
            views: s
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| ViewRecord {
                    image: format!("ref_{i}.png"),
                    mask: format!("mask_{i}.png"),
                    scene: v.scene,
                    cx: v.placement.cx,
                    cy: v.placement.cy,
                    radius: v.placement.radius,
                })
                .collect(),
        }
    }
}

pub fn subject_dir_name(id: usize) -> String {
    format!("subject_{id:02}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// Renders `n_subjects` subjects into `out_dir` and writes the manifest.
pub fn gen_dataset(n_subjects: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut subjects = Vec::with_capacity(n_subjects);
    for id in 0..n_subjects {
        let s = SyntheticSubject::generate(id, seed);
        let rec = SubjectRecord::from_subject(&s);
        let dir = out_dir.join(&rec.dir);
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        for (view, vr) in s.views.iter().zip(&rec.views) {
            images::write_rgb(&dir.join(&vr.image), &view.image)?;
            images::write_mask(&dir.join(&vr.mask), &view.mask)?;
        }
        write_json(&dir.join(SUBJECT_META), &rec)?;
        subjects.push(rec);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        subjects,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.version != MANIFEST_VERSION {
        return Err(HarnessError::Format(format!(
            "manifest version {} is not {MANIFEST_VERSION}",
            m.version
        )));
    }
    Ok(m)
}

/// A subject directory loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub dir: PathBuf,
    pub record: SubjectRecord,
    pub refs: ReferenceSet,
}

pub fn load_subject(dir: &Path) -> Result<LoadedSubject> {
    let record: SubjectRecord = read_json(&dir.join(SUBJECT_META))?;
    let class_word = synth::SHAPE_NAMES
        .iter()
        .find(|w| **w == record.class_word)
        .ok_or_else(|| HarnessError::Format(format!("unknown class word {:?}", record.class_word)))?;
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    let mut scenes = Vec::new();
    for v in &record.views {
        imgs.extend_from_slice(images::read_rgb(&dir.join(&v.image))?.data());
        masks.extend_from_slice(images::read_mask(&dir.join(&v.mask))?.data());
        scenes.push(v.scene);
    }
    let n = record.views.len();
    let size = subjvid_core::codec::IMAGE_SIZE;
    let refs = ReferenceSet::new(
        Tensor::new(&[n, 3, size, size], imgs),
        Tensor::new(&[n, size, size], masks),
        class_word,
        scenes,
    )?;
    Ok(LoadedSubject {
        dir: dir.to_path_buf(),
        record,
        refs,
    })
}
