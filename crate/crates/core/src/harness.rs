//! Testbed directories, the reconstruction comparison grid and run
//! manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{invert_cascade, BaseMethod, CascadeConfig, CascadeModels, CascadeResult, SrMethod};
use crate::error::{Error, Result};
use crate::io::{read_image, write_atomic, write_image};
use crate::metrics::{evaluate_run, EvalReport};
use crate::tensor::StateTensor;
use crate::trainer::ShapeSample;

pub const TESTBED_INDEX: &str = "testbed.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "CASCADE_INV_THREADS";
/// Base-stage guidance scales of the IterInv rows.
pub const OMEGA1_SWEEP: [f64; 4] = [1.0, 3.0, 5.0, 7.0];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestbedEntry {
    pub file: String,
    pub prompt_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestImage {
    pub name: String,
    pub prompt_id: u32,
    pub image: StateTensor,
}

/// Writes each sample's top-resolution image plus an index file.
pub fn write_testbed(dir: impl AsRef<Path>, samples: &[ShapeSample]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(samples.len());
    let mut paths = Vec::with_capacity(samples.len() + 1);
    for (i, s) in samples.iter().enumerate() {
        let file = format!("image_{i:03}.ppm");
        let path = dir.join(&file);
        write_image(&s.image_pyramid[2], &path)?;
        entries.push(TestbedEntry {
            file,
            prompt_id: s.prompt_id,
        });
        paths.push(path);
    }
    let index = dir.join(TESTBED_INDEX);
    write_atomic(&index, serde_json::to_string_pretty(&entries)?.as_bytes())?;
    paths.push(index);
    Ok(paths)
}

pub fn load_testbed(dir: impl AsRef<Path>) -> Result<Vec<TestImage>> {
    let dir = dir.as_ref();
    let index = dir.join(TESTBED_INDEX);
    let entries: Vec<TestbedEntry> = serde_json::from_str(&fs::read_to_string(&index).map_err(|e| {
        Error::Format(format!("cannot read testbed index {}: {e}", index.display()))
    })?)?;
    if entries.is_empty() {
        return Err(Error::InvalidRange(format!("empty testbed in {}", dir.display())));
    }
    entries
        .into_iter()
        .map(|e| {
            Ok(TestImage {
                image: read_image(dir.join(&e.file), None)?,
                name: e.file,
                prompt_id: e.prompt_id,
            })
        })
        .collect()
}

/// Which half of the comparison grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFamily {
    Ddim,
    IterInv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub config: CascadeConfig,
}

/// DDIM from stage 3, from stage 2 and through all stages (stages below
/// the first inverted one are sampled), then NTI + IterInv per base-stage
/// guidance scale. All other settings come from `base`.
pub fn grid_rows(base: &CascadeConfig, families: &[GridFamily]) -> Vec<GridRow> {
    let mut rows = Vec::new();
    if families.contains(&GridFamily::Ddim) {
        for (label, from) in [("DDIM(s3)", 3), ("DDIM(s2,s3)", 2), ("DDIM(s1,s2,s3)", 1)] {
            let mut config = base.clone();
            config.stage1_method = BaseMethod::Ddim;
            config.sr_method = SrMethod::Ddim;
            config.invert_from_stage = from;
            config.iterinv.guidance = [1.0; 3];
            rows.push(GridRow {
                label: label.into(),
                config,
            });
        }
    }
    if families.contains(&GridFamily::IterInv) {
        for w in OMEGA1_SWEEP {
            let mut config = base.clone();
            config.stage1_method = BaseMethod::Nti;
            config.sr_method = SrMethod::IterInv;
            config.invert_from_stage = 1;
            config.iterinv.guidance[0] = w;
            rows.push(GridRow {
                label: format!("IterInv(ω₁={w})"),
                config,
            });
        }
    }
    rows
}

/// Worker count from the environment, defaulting to the machine's.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Results of one grid run, `results[row][image]`.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub rows: Vec<GridRow>,
    pub results: Vec<Vec<CascadeResult>>,
    pub report: EvalReport,
}

impl GridRun {
    pub fn row(&self, label: &str) -> Option<&[CascadeResult]> {
        self.rows.iter().position(|r| r.label == label).map(|i| self.results[i].as_slice())
    }
}

/// Runs every row on every image on a pool of `threads` workers. Each
/// (row, image) job stays on one worker; results keep input order.
pub fn evaluate_grid(
    models: &CascadeModels,
    images: &[TestImage],
    rows: &[GridRow],
    threads: usize,
) -> Result<GridRun> {
    if images.is_empty() {
        return Err(Error::InvalidRange("empty testbed".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidRange("no grid rows selected".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..images.len()).map(move |i| (r, i))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    let flat: Vec<CascadeResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, i)| {
                let img = &images[i];
                let res = invert_cascade(models, &img.image, img.prompt_id, &rows[r].config);
                if let Ok(ref ok) = res {
                    info!("{} / {}: {:.2} dB", rows[r].label, img.name, ok.top_metrics().psnr_db);
                }
                res
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let labels: Vec<String> = jobs.iter().map(|&(r, _)| rows[r].label.clone()).collect();
    let report = evaluate_run(&flat, &labels)?;
    let mut it = flat.into_iter();
    let results = rows.iter().map(|_| it.by_ref().take(images.len()).collect()).collect();
    Ok(GridRun {
        rows: rows.to_vec(),
        results,
        report,
    })
}

/// Ground truth followed by each row's top-resolution reconstruction,
/// left to right.
pub fn side_by_side(truth: &StateTensor, recons: &[&StateTensor]) -> Result<StateTensor> {
    let (h, w, c) = truth.dims();
    let n = recons.len() + 1;
    let mut out = StateTensor::zeros(h, w * n, c);
    for (k, img) in std::iter::once(truth).chain(recons.iter().copied()).enumerate() {
        truth.check_same_shape(img)?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, k * w + x, img.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Writes `report.json`, `report.txt` and one comparison strip per image;
/// returns the paths written.
pub fn write_grid_outputs(run: &GridRun, images: &[TestImage], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let json = out_dir.join("report.json");
    write_atomic(&json, run.report.to_json()?.as_bytes())?;
    paths.push(json);
    let table = out_dir.join("report.txt");
    let mut text = String::from("columns of each comparison image: ground truth");
    for r in &run.rows {
        text.push_str(", ");
        text.push_str(&r.label);
    }
    text.push_str("\n\n");
    text.push_str(&run.report.to_table());
    write_atomic(&table, text.as_bytes())?;
    paths.push(table);
    for (i, img) in images.iter().enumerate() {
        let truth = &run.results[0][i].config.resolutions;
        let top = img.image.resize_area(truth[2], truth[2])?;
        let recons: Vec<&StateTensor> = run.results.iter().map(|row| row[i].top()).collect();
        let p = out_dir.join(format!("compare_{i:03}.ppm"));
        write_image(&side_by_side(&top, &recons)?, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Loads models and testbed, runs the grid and writes report, images and
/// manifest to `out_dir`.
pub fn run_eval_grid(
    dataset_dir: &Path,
    model_dir: &Path,
    families: &[GridFamily],
    config: &CascadeConfig,
    out_dir: &Path,
    command: Vec<String>,
) -> Result<GridRun> {
    config.validate()?;
    let mut manifest = RunManifest::start(command, config)?;
    manifest.record_models(model_dir)?;
    manifest.seeds.insert("generation_seed".into(), config.generation_seed);
    manifest.seeds.insert("noise_seed".into(), config.iterinv.noise_seed);
    let models = CascadeModels::load_dir(model_dir)?;
    let images = load_testbed(dataset_dir)?;
    let rows = grid_rows(config, families);
    let run = evaluate_grid(&models, &images, &rows, worker_threads())?;
    let outputs = write_grid_outputs(&run, &images, out_dir)?;
    manifest.finish(&outputs, out_dir)?;
    manifest.write(out_dir)?;
    Ok(run)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance record written next to every set of outputs. Two runs with
/// equal manifests (ignoring timestamps) produce identical output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: Vec<String>,
    /// SHA-256 of the compact JSON of the effective configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Model file name to SHA-256.
    pub model_hashes: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Output path (relative to the manifest) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start(command: Vec<String>, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command,
            config_hash: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            seeds: BTreeMap::new(),
            model_hashes: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
            outputs: BTreeMap::new(),
        })
    }

    /// Hashes the three stage files in `dir`.
    pub fn record_models(&mut self, dir: &Path) -> Result<()> {
        for stage in 1..=3 {
            let name = CascadeModels::file_name(stage);
            let bytes = fs::read(dir.join(&name))?;
            self.model_hashes.insert(name, sha256_hex(&bytes));
        }
        Ok(())
    }

    /// Hashes the written outputs and stamps the finish time.
    pub fn finish(&mut self, outputs: &[PathBuf], base: &Path) -> Result<()> {
        for p in outputs {
            let key = p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
            self.outputs.insert(key, sha256_hex(&fs::read(p)?));
        }
        self.finished_at = Some(now());
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        write_atomic(&p, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
