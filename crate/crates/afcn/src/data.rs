//! Dataset ingestion, normalization, synthetic generation, and k-fold splits.
//!
//! On-disk layout: a JSON manifest naming per-subject CSV files. A subject CSV
//! holds N lines of T comma-separated floats (row i = ROI i, no header).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// One subject's ROI×time signal matrix plus class label.
#[derive(Clone, Debug)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    /// N×T, z-scored per ROI row.
    pub x: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub subjects: Vec<RoiTimeSeries>,
    pub n_classes: usize,
    pub atlas_size: usize,
    pub t_len: usize,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub n_classes: usize,
    pub t_len: usize,
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
}

/// Which ROI pairs were planted with phase-locked components, and where.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    /// (low, high) frequency in cycles/sample for each plantable band.
    pub bands: Vec<(f64, f64)>,
    /// Coupled ROI pairs, shared by all subjects.
    pub coupled_pairs: Vec<(usize, usize)>,
    /// Band index carrying the coupling for each class.
    pub class_band: Vec<usize>,
}

/// Z-score a row in place: mean 0, unit variance. Rows with standard
/// deviation below the ε guard map to all zeros (dead channels must not
/// poison Pearson with NaN).
fn zscore_row(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    for v in row.iter_mut() {
        *v -= mean;
    }
    let var = row.iter().map(|v| v * v).sum::<f64>() / n;
    let std = var.sqrt().max(EPS);
    for v in row.iter_mut() {
        *v /= std;
    }
}

/// Z-score every ROI row of an N×T matrix.
pub fn normalize_rows(x: &Tensor) -> Tensor {
    let (n, t) = (x.rows(), x.cols());
    let mut data = x.data().to_vec();
    for i in 0..n {
        zscore_row(&mut data[i * t..(i + 1) * t]);
    }
    Tensor::new(vec![n, t], data).unwrap()
}

fn parse_subject_csv(path: &Path, id: &str) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::data(format!("subject {id}: cannot read {}: {e}", path.display()))
    })?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::data(format!(
                    "subject {id}: non-numeric cell {cell:?} at line {}",
                    ln + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("subject {id}: empty CSV")));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::data(format!("subject {id}: ragged CSV rows")));
    }
    Ok(rows)
}

/// Load a dataset from a manifest. Subjects are truncated to the manifest's
/// `t_len` (shorter series are rejected) and z-scored per ROI row.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad manifest JSON: {e}")))?;
    if manifest.subjects.is_empty() {
        return Err(Error::data("empty dataset".to_string()));
    }
    if manifest.n_classes < 2 {
        return Err(Error::Config("n_classes must be ≥ 2".to_string()));
    }
    if manifest.t_len < 8 {
        return Err(Error::Config("t_len must be ≥ 8".to_string()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    let mut atlas_size = None;
    for entry in &manifest.subjects {
        if entry.label >= manifest.n_classes {
            return Err(Error::data(format!(
                "subject {}: label {} out of range for {} classes",
                entry.id, entry.label, manifest.n_classes
            )));
        }
        let rows = parse_subject_csv(&base.join(&entry.path), &entry.id)?;
        let n = rows.len();
        if n < 2 {
            return Err(Error::data(format!("subject {}: needs ≥ 2 ROI rows", entry.id)));
        }
        match atlas_size {
            None => atlas_size = Some(n),
            Some(prev) if prev != n => {
                return Err(Error::data(format!(
                    "subject {}: {n} ROI rows, expected {prev}",
                    entry.id
                )))
            }
            _ => {}
        }
        if rows[0].len() < manifest.t_len {
            return Err(Error::data(format!(
                "subject {}: series length {} shorter than t_len {}",
                entry.id,
                rows[0].len(),
                manifest.t_len
            )));
        }
        let mut data = Vec::with_capacity(n * manifest.t_len);
        for row in &rows {
            data.extend_from_slice(&row[..manifest.t_len]);
        }
        let x = Tensor::new(vec![n, manifest.t_len], data)?;
        subjects.push(RoiTimeSeries {
            subject_id: entry.id.clone(),
            x: normalize_rows(&x),
            label: entry.label,
        });
    }

    let mut seen = vec![false; manifest.n_classes];
    for s in &subjects {
        seen[s.label] = true;
    }
    if let Some(missing) = seen.iter().position(|p| !p) {
        return Err(Error::data(format!("class {missing} has no subjects")));
    }

    Ok(Dataset {
        subjects,
        n_classes: manifest.n_classes,
        atlas_size: atlas_size.unwrap(),
        t_len: manifest.t_len,
    })
}

fn format_row(row: &[f64]) -> String {
    row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Write a dataset as manifest + per-subject CSVs (plus an optional planted
/// coupling spec as `ground_truth.json`).
pub fn write_dataset(dir: &Path, dataset: &Dataset, truth: Option<&GroundTruth>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in &dataset.subjects {
        let fname = format!("{}.csv", s.subject_id);
        let (n, t) = (s.x.rows(), s.x.cols());
        let mut out = String::new();
        for i in 0..n {
            out.push_str(&format_row(&s.x.data()[i * t..(i + 1) * t]));
            out.push('\n');
        }
        std::fs::write(dir.join(&fname), out)?;
        entries.push(ManifestEntry {
            id: s.subject_id.clone(),
            path: fname,
            label: s.label,
        });
    }
    let manifest = Manifest {
        n_classes: dataset.n_classes,
        t_len: dataset.t_len,
        subjects: entries,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;
    if let Some(gt) = truth {
        std::fs::write(dir.join("ground_truth.json"), serde_json::to_string_pretty(gt).unwrap())?;
    }
    Ok(manifest_path)
}

/// Frequency bands available for planting class-specific coupling, in
/// cycles/sample. Chosen to sit on opposite sides of a dyadic cascade split.
pub const PLANT_BANDS: [(f64, f64); 2] = [(0.02, 0.06), (0.15, 0.25)];

/// Generate a balanced labeled dataset in which class identity is encoded
/// only in which frequency band the designated ROI pairs share phase-locked
/// sinusoids. Background components and noise are statistically identical
/// across classes, so raw-series correlation carries no class signal.
pub fn synth_band_dataset(
    n_subjects: usize,
    n_roi: usize,
    t_len: usize,
    n_classes: usize,
    noise_amp: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if n_roi < 4 {
        return Err(Error::Config("synthetic dataset needs n_roi ≥ 4".to_string()));
    }
    if t_len < 64 {
        return Err(Error::Config("synthetic dataset needs t_len ≥ 64".to_string()));
    }
    if n_classes < 2 || n_classes > PLANT_BANDS.len() {
        return Err(Error::Config(format!(
            "n_classes must be 2..={} (one plantable band per class)",
            PLANT_BANDS.len()
        )));
    }
    if n_subjects < n_classes {
        return Err(Error::Config("need at least one subject per class".to_string()));
    }

    let coupled_pairs: Vec<(usize, usize)> =
        (0..n_roi / 4).map(|p| (2 * p, 2 * p + 1)).collect();
    let truth = GroundTruth {
        bands: PLANT_BANDS.to_vec(),
        coupled_pairs: coupled_pairs.clone(),
        class_band: (0..n_classes).collect(),
    };

    let shared_amp = 1.0;
    let bg_amp = 0.7;
    let two_pi = std::f64::consts::TAU;

    let mut subjects = Vec::with_capacity(n_subjects);
    for idx in 0..n_subjects {
        let label = idx % n_classes; // balanced by construction
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut data = vec![0.0; n_roi * t_len];

        // class-coded shared components
        let (flo, fhi) = PLANT_BANDS[label];
        for &(a, b) in &coupled_pairs {
            let f = rng.gen_range(flo..fhi);
            let phase = rng.gen_range(0.0..two_pi);
            for t in 0..t_len {
                let v = shared_amp * (two_pi * f * t as f64 + phase).sin();
                data[a * t_len + t] += v;
                data[b * t_len + t] += v;
            }
        }
        // per-ROI independent background in every band + Gaussian noise
        for i in 0..n_roi {
            for &(lo, hi) in PLANT_BANDS.iter() {
                let f = rng.gen_range(lo..hi);
                let phase = rng.gen_range(0.0..two_pi);
                for t in 0..t_len {
                    data[i * t_len + t] += bg_amp * (two_pi * f * t as f64 + phase).sin();
                }
            }
            for t in 0..t_len {
                data[i * t_len + t] += noise_amp * gauss(&mut rng);
            }
        }

        let x = Tensor::new(vec![n_roi, t_len], data)?;
        subjects.push(RoiTimeSeries {
            subject_id: format!("synth{idx:04}"),
            x: normalize_rows(&x),
            label,
        });
    }

    Ok((
        Dataset { subjects, n_classes, atlas_size: n_roi, t_len },
        truth,
    ))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Index sets for one fold of stratified k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Build the k stratified shards shared by every fold of one (dataset, seed).
pub fn kfold_shards(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config("k-fold requires k ≥ 2".to_string()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.subjects.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut leftover = Vec::new();
    for (label, mut idxs) in by_class {
        shuffle(&mut idxs, &mut rng);
        if idxs.len() < k {
            eprintln!(
                "warning: class {label} has {} subjects (< {k} folds); assigning non-stratified",
                idxs.len()
            );
            leftover.extend(idxs);
            continue;
        }
        for (j, i) in idxs.into_iter().enumerate() {
            shards[j % k].push(i);
        }
    }
    shuffle(&mut leftover, &mut rng);
    for (j, i) in leftover.into_iter().enumerate() {
        shards[j % k].push(i);
    }
    Ok(shards)
}

/// Test = fold-th shard, val = next shard cyclically, train = the rest.
pub fn split_kfold(dataset: &Dataset, k: usize, fold: usize, seed: u64) -> Result<Split> {
    if fold >= k {
        return Err(Error::Config(format!("fold {fold} out of range for k={k}")));
    }
    let shards = kfold_shards(dataset, k, seed)?;
    let test = shards[fold].clone();
    let val = shards[(fold + 1) % k].clone();
    let mut train = Vec::new();
    for (j, shard) in shards.iter().enumerate() {
        if j != fold && j != (fold + 1) % k {
            train.extend_from_slice(shard);
        }
    }
    Ok(Split { train, val, test })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
