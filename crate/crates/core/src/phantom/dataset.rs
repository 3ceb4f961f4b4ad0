use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Availability, GridShape, Modality, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::phantom::anatomy::sample_anatomy;
use crate::phantom::render::{render_modality, StyleRecord};
use crate::rng;

pub const MANIFEST: &str = "manifest.json";
pub const META: &str = "meta.json";
pub const LABEL_FILE: &str = "label.u8";

/// Inputs of [`generate_dataset`]. Generation is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub cases: usize,
    pub grid_shape: GridShape,
    /// Train/val/test proportions; normalised internally.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub master_seed: u64,
}

fn default_split() -> [f64; 3] {
    [7.0, 1.0, 2.0]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { cases: 200, grid_shape: GridShape::cube(32), split: default_split(), master_seed: 0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 {
            return Err(Error::config("cases", "must be positive"));
        }
        if self.split.iter().any(|v| !v.is_finite() || *v < 0.0) || self.split.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("split", "fractions must be non-negative with a positive sum"));
        }
        Ok(())
    }

    /// Case counts per split. Train and val are rounded, test takes the remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let total: f64 = self.split.iter().sum();
        let n = self.cases as f64;
        let train = ((self.split[0] / total) * n).round() as usize;
        let val = (((self.split[1] / total) * n).round() as usize).min(self.cases - train.min(self.cases));
        let train = train.min(self.cases);
        [train, val, self.cases - train - val]
    }

    pub fn anatomy_seed(&self, case: usize) -> u64 {
        rng::derive_seed(self.master_seed, &[case as u64, rng::tag::ANATOMY])
    }

    pub fn style_seed(&self, case: usize, m: Modality) -> u64 {
        rng::derive_seed(self.master_seed, &[case as u64, rng::tag::STYLE, m.index() as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PhantomConfig,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSeeds {
    pub anatomy: u64,
    pub style: BTreeMap<Modality, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub shape: GridShape,
    pub dtype: String,
    pub order: String,
    pub modalities: Vec<Modality>,
    pub style_records: BTreeMap<Modality, StyleRecord>,
    pub seeds: CaseSeeds,
}

/// One loaded case. Volumes are indexed by [`Modality::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub grid: GridShape,
    pub volumes: [Vec<f32>; NUM_MODALITIES],
    pub availability: Availability,
    pub label_map: Vec<u8>,
    pub style_records: BTreeMap<Modality, StyleRecord>,
}

pub fn case_name(i: usize) -> String {
    format!("case_{i:04}")
}

fn volume_file(m: Modality) -> String {
    format!("{}.f32", m.name())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn f32_to_le_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Renders one case in memory.
pub fn build_case(config: &PhantomConfig, case: usize) -> Result<(MultimodalSample, CaseMeta)> {
    let anatomy_seed = config.anatomy_seed(case);
    let anatomy = sample_anatomy(anatomy_seed, config.grid_shape)?;
    let mut volumes: [Vec<f32>; NUM_MODALITIES] = Default::default();
    let mut styles = BTreeMap::new();
    let mut style_seeds = BTreeMap::new();
    for m in Modality::ALL {
        let seed = config.style_seed(case, m);
        let (vol, style) = render_modality(&anatomy, m, seed)?;
        volumes[m.index()] = vol;
        styles.insert(m, style);
        style_seeds.insert(m, seed);
    }
    let meta = CaseMeta {
        shape: config.grid_shape,
        dtype: "float32-le".into(),
        order: "DHW".into(),
        modalities: Modality::ALL.to_vec(),
        style_records: styles.clone(),
        seeds: CaseSeeds { anatomy: anatomy_seed, style: style_seeds },
    };
    let sample = MultimodalSample {
        id: case_name(case),
        grid: config.grid_shape,
        volumes,
        availability: Availability::ALL,
        label_map: anatomy.label_map,
        style_records: styles,
    };
    Ok((sample, meta))
}

fn write_case(dir: &Path, sample: &MultimodalSample, meta: &CaseMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in Modality::ALL {
        write_file(&dir.join(volume_file(m)), &f32_to_le_bytes(&sample.volumes[m.index()]))?;
    }
    write_file(&dir.join(LABEL_FILE), &sample.label_map)?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::json(dir.join(META), e))?;
    write_file(&dir.join(META), &json)
}

fn num_workers() -> usize {
    std::env::var("CDSEG_NUM_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn prepare_output(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let entries: Vec<_> = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(out, e))?;
        if !entries.is_empty() {
            if !overwrite {
                return Err(Error::OutputNotEmpty(out.to_path_buf()));
            }
            for entry in entries {
                let name = entry.file_name();
                let name = name.to_string_lossy();
                let path = entry.path();
                if name == MANIFEST {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                } else if name.starts_with("case_") && path.is_dir() {
                    fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Writes a phantom dataset under `out` and returns its manifest.
///
/// Cases are independent, so they are rendered on `CDSEG_NUM_WORKERS` threads
/// (default 1); output does not depend on the worker count.
pub fn generate_dataset(config: &PhantomConfig, out: &Path, overwrite: bool) -> Result<Manifest> {
    config.validate()?;
    prepare_output(out, overwrite)?;
    let workers = num_workers().min(config.cases);
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<()> {
                    for case in (w..config.cases).step_by(workers) {
                        let (sample, meta) = build_case(config, case)?;
                        write_case(&out.join(&sample.id), &sample, &meta)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;

    let [train, val, _] = config.split_counts();
    let names: Vec<String> = (0..config.cases).map(case_name).collect();
    let manifest = Manifest {
        config: config.clone(),
        splits: Splits {
            train: names[..train].to_vec(),
            val: names[train..train + val].to_vec(),
            test: names[train + val..].to_vec(),
        },
    };
    let path = out.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_file(&path, &json)?;
    log::info!("wrote {} cases to {}", config.cases, out.display());
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::json(&path, e))
}

pub fn load_case(dir: &Path, id: &str) -> Result<MultimodalSample> {
    let case_dir = dir.join(id);
    let meta_path = case_dir.join(META);
    let meta: CaseMeta = serde_json::from_slice(&read_file(&meta_path)?).map_err(|e| Error::json(&meta_path, e))?;
    let n = meta.shape.voxels();
    let mut volumes: [Vec<f32>; NUM_MODALITIES] = Default::default();
    let mut availability = Availability::from_bits(0);
    for &m in &meta.modalities {
        let path = case_dir.join(volume_file(m));
        let v = f32_from_le_bytes(&read_file(&path)?)
            .ok_or_else(|| Error::Dataset(format!("{} is not a float32 array", path.display())))?;
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!("{} has {} voxels, expected {n}", path.display(), v.len())));
        }
        volumes[m.index()] = v;
        availability = Availability::from_bits(availability.bits() | 1 << m.index());
    }
    let label_map = read_file(&case_dir.join(LABEL_FILE))?;
    if label_map.len() != n {
        return Err(Error::ShapeMismatch(format!("{id}: label map has {} voxels, expected {n}", label_map.len())));
    }
    if let Some(&bad) = label_map.iter().find(|&&l| l > 3) {
        return Err(Error::UnknownLabel(bad));
    }
    Ok(MultimodalSample {
        id: id.to_string(),
        grid: meta.shape,
        volumes,
        availability,
        label_map,
        style_records: meta.style_records,
    })
}

/// A loaded dataset split into train/val/test.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let load = |ids: &[String]| ids.iter().map(|id| load_case(dir, id)).collect::<Result<Vec<_>>>();
        Ok(Dataset {
            train: load(&manifest.splits.train)?,
            val: load(&manifest.splits.val)?,
            test: load(&manifest.splits.test)?,
            manifest,
        })
    }

    pub fn grid(&self) -> GridShape {
        self.manifest.config.grid_shape
    }
}

/// SHA-256 over the manifest and every case file, in sorted path order.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = vec![dir.join(MANIFEST)];
    let manifest = read_manifest(dir)?;
    let mut ids: Vec<&String> =
        manifest.splits.train.iter().chain(&manifest.splits.val).chain(&manifest.splits.test).collect();
    ids.sort();
    for id in ids {
        let mut names: Vec<String> = Modality::ALL.iter().map(|&m| volume_file(m)).collect();
        names.extend([LABEL_FILE.to_string(), META.to_string()]);
        names.sort();
        files.extend(names.into_iter().map(|n| dir.join(id).join(n)));
    }
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for f in files {
        buf.clear();
        fs::File::open(&f).and_then(|mut h| h.read_to_end(&mut buf)).map_err(|e| Error::io(&f, e))?;
        hasher.update(f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().as_bytes());
        hasher.update((buf.len() as u64).to_le_bytes());
        hasher.update(&buf);
    }
    Ok(hex_digest(&hasher.finalize()))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
