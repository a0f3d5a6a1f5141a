//! Synthetic datasets with planted parts.
//!
//! Every group owns `planted_per_group` prototype descriptors. Each image of
//! a group carries all of them (plus Gaussian noise) in random region slots;
//! the other regions are background noise. The global descriptor of an
//! image is the mean of its region descriptors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    save_geometry, save_manifest, save_matrix, Dataset, DatasetManifest, DescriptorMatrix, ImageData, ImageRecord,
    RegionGeometry, Split,
};
use crate::error::{Error, Result};

const IMAGE_WIDTH: f32 = 640.0;
const IMAGE_HEIGHT: f32 = 480.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    /// `train` and `test` splits, labels `class{k}`.
    Classification,
    /// `database` and `query` splits, labels `landmark{k}`, plus unlabeled
    /// distractors and per-query junk.
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub task: SynthTask,
    pub groups: usize,
    /// Train (classification) or database (retrieval) images per group.
    pub images_per_group: usize,
    /// Test (classification) or query (retrieval) images per group.
    pub held_out_per_group: usize,
    pub regions_per_image: usize,
    pub dim: usize,
    pub planted_per_group: usize,
    /// Standard deviation of the noise added to planted regions.
    pub noise: f64,
    /// Standard deviation of background regions.
    pub background: f64,
    /// ℓ² norm of every prototype.
    pub prototype_norm: f64,
    /// Mutually orthogonal prototypes (needs `groups * planted_per_group <= dim`).
    pub orthogonal: bool,
    /// Retrieval only: pure-background database images.
    pub distractors: usize,
    /// Retrieval only: database images per group carrying a single planted
    /// part, listed as junk for that group's queries.
    pub junk_per_group: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            task: SynthTask::Classification,
            groups: 4,
            images_per_group: 20,
            held_out_per_group: 10,
            regions_per_image: 50,
            dim: 16,
            planted_per_group: 3,
            noise: 0.3,
            background: 1.0,
            prototype_norm: 12.0,
            orthogonal: false,
            distractors: 0,
            junk_per_group: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ParamInvalid(m.to_string()));
        if self.groups == 0 || self.images_per_group == 0 || self.regions_per_image == 0 || self.dim == 0 {
            return bad("groups, images_per_group, regions_per_image and dim must be >= 1");
        }
        if self.planted_per_group == 0 || self.planted_per_group > self.regions_per_image {
            return bad("planted_per_group must lie in 1..=regions_per_image");
        }
        if self.orthogonal && self.groups * self.planted_per_group > self.dim {
            return bad("orthogonal prototypes need groups * planted_per_group <= dim");
        }
        if !(self.noise >= 0.0 && self.background >= 0.0 && self.prototype_norm > 0.0) {
            return bad("noise and background must be >= 0, prototype_norm > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedImage {
    pub id: String,
    /// Planted group, `None` for distractors.
    pub group: Option<usize>,
    /// Region index → planted part index.
    pub planted: BTreeMap<usize, usize>,
}

/// Ground truth of a synthetic dataset, aligned with the manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub images: Vec<PlantedImage>,
    /// `prototypes[group][part]`
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

impl PlantedTruth {
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.images.len() != manifest.images.len() {
            return Err(Error::TruthMismatch(format!(
                "{} truth records for {} images",
                self.images.len(),
                manifest.images.len()
            )));
        }
        for (t, rec) in self.images.iter().zip(&manifest.images) {
            if t.id != rec.id {
                return Err(Error::TruthMismatch(format!("truth id {} vs manifest id {}", t.id, rec.id)));
            }
            if let Some((&r, _)) = t.planted.iter().find(|(&r, _)| r >= manifest.regions_per_image) {
                return Err(Error::TruthMismatch(format!("image {} plants region {r} out of range", t.id)));
            }
        }
        Ok(())
    }
}

fn prototypes(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let count = p.groups * p.planted_per_group;
    let mut vecs: Vec<DVector<f64>> = Vec::with_capacity(count);
    while vecs.len() < count {
        let mut v = DVector::from_fn(p.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if p.orthogonal {
            for u in &vecs {
                let proj = u.dot(&v);
                v -= u * proj;
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            vecs.push(v / n);
        }
    }
    (0..p.groups)
        .map(|g| {
            (0..p.planted_per_group)
                .map(|k| (&vecs[g * p.planted_per_group + k] * p.prototype_norm).iter().copied().collect())
                .collect()
        })
        .collect()
}

fn random_boxes(r: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 4]> {
    (0..r)
        .map(|_| {
            let w = rng.random_range(16..=320) as f32;
            let h = rng.random_range(16..=240) as f32;
            let x0 = rng.random_range(0..=(IMAGE_WIDTH - w) as u32) as f32;
            let y0 = rng.random_range(0..=(IMAGE_HEIGHT - h) as u32) as f32;
            [x0, y0, x0 + w, y0 + h]
        })
        .collect()
}

struct Generated {
    records: Vec<(String, Option<String>, Split)>,
    images: Vec<ImageData>,
    truth: PlantedTruth,
    junk: BTreeMap<String, Vec<String>>,
}

fn generate(p: &SynthParams, seed: u64) -> Result<Generated> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(p, &mut rng);
    let noise = Normal::new(0.0, p.noise).map_err(|e| Error::ParamInvalid(e.to_string()))?;
    let background = Normal::new(0.0, p.background).map_err(|e| Error::ParamInvalid(e.to_string()))?;
    let (r, d) = (p.regions_per_image, p.dim);

    let (fit_split, held_split, prefix) = match p.task {
        SynthTask::Classification => (Split::Train, Split::Test, "class"),
        SynthTask::Retrieval => (Split::Database, Split::Query, "landmark"),
    };
    // (group, parts to plant, split, label)
    let mut plan: Vec<(Option<usize>, usize, Split, Option<String>)> = Vec::new();
    for g in 0..p.groups {
        for _ in 0..p.images_per_group {
            plan.push((Some(g), p.planted_per_group, fit_split, Some(format!("{prefix}{g}"))));
        }
    }
    let mut junk_ids: Vec<Vec<usize>> = vec![Vec::new(); p.groups];
    if p.task == SynthTask::Retrieval {
        for g in 0..p.groups {
            for _ in 0..p.junk_per_group {
                junk_ids[g].push(plan.len());
                plan.push((Some(g), 1, Split::Database, Some(format!("{prefix}{g}"))));
            }
        }
        for _ in 0..p.distractors {
            plan.push((None, 0, Split::Database, None));
        }
    }
    for g in 0..p.groups {
        for _ in 0..p.held_out_per_group {
            plan.push((Some(g), p.planted_per_group, held_split, Some(format!("{prefix}{g}"))));
        }
    }

    let mut records = Vec::with_capacity(plan.len());
    let mut images = Vec::with_capacity(plan.len());
    let mut truth_images = Vec::with_capacity(plan.len());
    for (i, (group, n_planted, split, label)) in plan.into_iter().enumerate() {
        let id = format!("img{i:05}");
        let mut regions = DMatrix::from_fn(d, r, |_, _| background.sample(&mut rng));
        let mut planted = BTreeMap::new();
        if let Some(g) = group {
            let mut slots: Vec<usize> = (0..r).collect();
            for j in 0..n_planted {
                let pick = rng.random_range(j..r);
                slots.swap(j, pick);
            }
            for (part, &slot) in slots[..n_planted].iter().enumerate() {
                for k in 0..d {
                    regions[(k, slot)] = protos[g][part][k] + noise.sample(&mut rng);
                }
                planted.insert(slot, part);
            }
        }
        // round through f32 so in-memory data equals what is written to disk
        let regions = regions.map(|v| v as f32 as f64);
        let global = regions.column_mean().map(|v| v as f32 as f64);
        let geometry = RegionGeometry {
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
            boxes: random_boxes(r, &mut rng),
        };
        images.push(ImageData {
            regions,
            geometry,
            global,
        });
        truth_images.push(PlantedImage {
            id: id.clone(),
            group,
            planted,
        });
        records.push((id, label, split));
    }

    let mut junk = BTreeMap::new();
    if p.task == SynthTask::Retrieval && p.junk_per_group > 0 {
        for (i, t) in truth_images.iter().enumerate() {
            if records[i].2 == Split::Query {
                let g = t.group.expect("queries belong to a group");
                junk.insert(t.id.clone(), junk_ids[g].iter().map(|&j| records[j].0.clone()).collect());
            }
        }
    }
    Ok(Generated {
        records,
        images,
        truth: PlantedTruth {
            images: truth_images,
            prototypes: protos,
        },
        junk,
    })
}

fn file_names(id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        PathBuf::from(format!("data/{id}.regions.dmx")),
        PathBuf::from(format!("data/{id}.geom.dmx")),
        PathBuf::from(format!("data/{id}.global.dmx")),
    )
}

fn to_dataset(g: Generated, base_dir: PathBuf, p: &SynthParams) -> (Dataset, PlantedTruth) {
    let images = g
        .records
        .iter()
        .map(|(id, label, split)| {
            let (regions, geometry, global) = file_names(id);
            ImageRecord {
                id: id.clone(),
                regions,
                geometry,
                global,
                label: label.clone(),
                split: *split,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        base_dir,
        images,
        junk: g.junk,
        descriptor_dim: p.dim,
        global_dim: p.dim,
        regions_per_image: p.regions_per_image,
    };
    (
        Dataset {
            manifest,
            images: g.images,
        },
        g.truth,
    )
}

/// Builds a synthetic dataset in memory without touching the filesystem.
pub fn synth_dataset(p: &SynthParams, seed: u64) -> Result<(Dataset, PlantedTruth)> {
    let g = generate(p, seed)?;
    Ok(to_dataset(g, PathBuf::new(), p))
}

/// Writes a synthetic dataset under `out_dir`: `data/*.dmx`, `manifest.json`
/// and `truth.json`. Returns the manifest path.
pub fn synth_generate(p: &SynthParams, seed: u64, out_dir: impl AsRef<Path>) -> Result<(PathBuf, PlantedTruth)> {
    let out_dir = out_dir.as_ref();
    let (dataset, truth) = to_dataset(generate(p, seed)?, out_dir.to_path_buf(), p);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::IoFailure { path, source }
    };
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io(&data_dir))?;
    for (rec, img) in dataset.manifest.images.iter().zip(&dataset.images) {
        save_matrix(&DescriptorMatrix::from_dmatrix(&img.regions)?, out_dir.join(&rec.regions))?;
        save_geometry(&img.geometry, out_dir.join(&rec.geometry))?;
        let global = DMatrix::from_column_slice(img.global.len(), 1, img.global.as_slice());
        save_matrix(&DescriptorMatrix::from_dmatrix(&global)?, out_dir.join(&rec.global))?;
    }
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&dataset.manifest.images, &dataset.manifest.junk, &manifest_path)?;
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "seed": seed,
        "params": p,
        "truth": truth,
    }))
    .expect("truth serializes");
    fs::write(&truth_path, text).map_err(io(&truth_path))?;
    Ok((manifest_path, truth))
}

/// Reads the `truth` block of a `truth.json` written by [`synth_generate`].
pub fn load_truth(path: impl AsRef<Path>) -> Result<PlantedTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_value(v["truth"].clone()).map_err(|e| Error::ParseError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
