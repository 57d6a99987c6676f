//! Synthetic classification tasks, label-skewed client partitioning and
//! client-level quality corruption.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const QUALITY_CLEAN: usize = 0;
pub const QUALITY_CORRUPTED: usize = 1;

/// Upper bound on Dirichlet redraws when some client ends up empty.
pub const PARTITION_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub quality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub client_id: usize,
    pub quality: usize,
    pub samples: Vec<Sample>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for s in &self.samples {
            h[s.y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    #[default]
    GaussianNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    #[serde(default)]
    pub kind: CorruptionKind,
    /// Noise std as a multiple of the per-feature std of the clean train set.
    pub severity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub corrupted_ratio: f64,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidArgument("client count must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.corrupted_ratio) {
            return Err(Error::InvalidArgument(format!(
                "corrupted_ratio must lie in [0, 1], got {}",
                self.corrupted_ratio
            )));
        }
        if !(self.corruption.severity >= 0.0 && self.corruption.severity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "severity must be finite and >= 0, got {}",
                self.corruption.severity
            )));
        }
        Ok(())
    }

    pub fn corrupted_clients(&self) -> usize {
        (self.clients as f64 * self.corrupted_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub features: usize,
    pub n_per_class: usize,
    /// Mean pairwise distance between class centers, in units of the
    /// within-class standard deviation.
    pub separation: f64,
    /// Dimension of the subspace the clean data spans. Clusters live in
    /// `latent_dim` dimensions and are embedded by a random isometry;
    /// `None` means full rank (the identity embedding).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
}

/// Gaussian class clusters with a class-stratified 8:2 train/test split.
///
/// Class centers are standard normal draws rescaled so their mean pairwise
/// distance equals `separation`; within-class noise is unit isotropic. Both
/// live in `latent_dim` dimensions and are mapped into feature space by a
/// seeded matrix with orthonormal columns.
/// With `n = classes * n_per_class`, the train set has exactly `ceil(0.8 n)`
/// samples and every class appears in the test set.
pub fn gen_task(task: &TaskSpec, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let TaskSpec {
        classes,
        features,
        n_per_class,
        separation,
        latent_dim,
    } = *task;
    if classes < 2 || features < 2 || n_per_class < 10 {
        return Err(Error::InvalidArgument(format!(
            "task needs classes >= 2, features >= 2, n_per_class >= 10 (got {classes}, {features}, {n_per_class})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    let latent = latent_dim.unwrap_or(features);
    if latent == 0 || latent > features {
        return Err(Error::InvalidArgument(format!(
            "latent_dim must lie in 1..={features}, got {latent}"
        )));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let embedding = (latent < features).then(|| random_isometry(features, latent, seed));

    let mut rng = stream(seed, "centers", 0);
    let mut centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..latent).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    let mut dist_sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..classes {
        for j in i + 1..classes {
            dist_sum += euclidean(&centers[i], &centers[j]);
            pairs += 1.0;
        }
    }
    let scale = separation / (dist_sum / pairs);
    for c in centers.iter_mut().flatten() {
        *c *= scale;
    }

    let n = classes * n_per_class;
    let n_test = n - (4 * n).div_ceil(5);
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (c, center) in centers.iter().enumerate() {
        let test_c = n_test / classes + usize::from(c < n_test % classes);
        let mut rng = stream(seed, "class-samples", c as u64);
        for i in 0..n_per_class {
            let z: Vec<f64> = center.iter().map(|m| m + std_normal.sample(&mut rng)).collect();
            let x = match &embedding {
                Some(cols) => (0..features)
                    .map(|r| cols.iter().zip(&z).map(|(col, zk)| col[r] * zk).sum())
                    .collect(),
                None => z,
            };
            let s = Sample {
                x,
                y: c,
                quality: QUALITY_CLEAN,
            };
            if i < test_c {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    let mut rng = stream(seed, "split-order", 0);
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

/// `cols` orthonormal vectors in `R^dim` (Gram-Schmidt on Gaussian draws).
fn random_isometry(dim: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream(seed, "embedding", 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| std_normal.sample(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Label-skewed partition: for every class, client proportions are drawn from
/// `Dir(alpha * 1_K)` and that class's samples are dealt out accordingly.
///
/// The whole draw is repeated (up to [`PARTITION_RETRIES`] times) while any
/// client would receive no samples.
pub fn dirichlet_partition(train: &[Sample], spec: &PartitionSpec) -> Result<Vec<LocalDataset>> {
    spec.validate()?;
    let k = spec.clients;
    if k == 1 {
        return Ok(vec![LocalDataset {
            client_id: 0,
            quality: QUALITY_CLEAN,
            samples: train.to_vec(),
        }]);
    }
    let num_classes = train.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in train.iter().enumerate() {
        by_class[s.y].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0).expect("alpha validated");

    let mut empty_client = 0;
    for attempt in 0..PARTITION_RETRIES {
        let mut rng = stream(spec.seed, "partition", attempt as u64);
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let mut total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                // every gamma draw underflowed (tiny alpha)
                draws.fill(1.0);
                total = k as f64;
            }
            let n_c = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (client, d) in draws.iter().enumerate() {
                cum += d;
                let end = if client + 1 == k {
                    n_c
                } else {
                    (((cum / total) * n_c as f64).floor() as usize).clamp(start, n_c)
                };
                assignment[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        match assignment.iter().position(Vec::is_empty) {
            Some(client) => {
                empty_client = client;
                log::debug!("partition draw {attempt} left client {client} empty; redrawing");
            }
            None => {
                return Ok(assignment
                    .into_iter()
                    .enumerate()
                    .map(|(client_id, mut idx)| {
                        idx.sort_unstable();
                        LocalDataset {
                            client_id,
                            quality: QUALITY_CLEAN,
                            samples: idx.into_iter().map(|i| train[i].clone()).collect(),
                        }
                    })
                    .collect());
            }
        }
    }
    Err(Error::PartitionExhausted {
        attempts: PARTITION_RETRIES,
        client: empty_client,
    })
}

/// Population standard deviation of every feature.
pub fn feature_std<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Vec<f64> {
    let mut n = 0.0;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for s in samples {
        if mean.is_empty() {
            mean = vec![0.0; s.x.len()];
            m2 = vec![0.0; s.x.len()];
        }
        n += 1.0;
        for (j, &v) in s.x.iter().enumerate() {
            let delta = v - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (v - mean[j]);
        }
    }
    m2.into_iter().map(|v| (v / n).sqrt()).collect()
}

fn add_noise(samples: &mut [Sample], feature_std: &[f64], severity: f64, seed: u64, tag: &str, index: u64) {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream(seed, tag, index);
    for s in samples {
        for (v, sd) in s.x.iter_mut().zip(feature_std) {
            *v += severity * sd * std_normal.sample(&mut rng);
        }
        s.quality = QUALITY_CORRUPTED;
    }
}

/// Indices of the clients that receive corrupted data.
pub fn corrupted_client_ids(spec: &PartitionSpec) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..spec.clients).collect();
    ids.shuffle(&mut stream(spec.seed, "corrupted-clients", 0));
    let mut chosen = ids[..spec.corrupted_clients()].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Marks `round(K * corrupted_ratio)` clients, chosen by a seeded shuffle, as
/// corrupted and adds Gaussian feature noise to all of their samples. The
/// noise std per feature is `severity` times that feature's std over the
/// union of the (clean) shards.
pub fn assign_and_corrupt(mut shards: Vec<LocalDataset>, spec: &PartitionSpec) -> Result<Vec<LocalDataset>> {
    spec.validate()?;
    if shards.len() != spec.clients {
        return Err(Error::DimensionMismatch {
            expected: spec.clients,
            actual: shards.len(),
            context: "shard count",
        });
    }
    let chosen = corrupted_client_ids(spec);
    if chosen.is_empty() {
        return Ok(shards);
    }
    let std = feature_std(shards.iter().flat_map(|d| d.samples.iter()));
    for id in chosen {
        let shard = &mut shards[id];
        shard.quality = QUALITY_CORRUPTED;
        add_noise(
            &mut shard.samples,
            &std,
            spec.corruption.severity,
            spec.seed,
            "corrupt-client",
            shard.client_id as u64,
        );
    }
    Ok(shards)
}

/// A noisy copy of the whole test set under the same law as the corrupted
/// clients. `train_feature_std` must be the clean train-set feature std.
pub fn make_corrupted_test(test: &[Sample], spec: &PartitionSpec, train_feature_std: &[f64]) -> Vec<Sample> {
    let mut out = test.to_vec();
    add_noise(
        &mut out,
        train_feature_std,
        spec.corruption.severity,
        spec.seed,
        "corrupt-test",
        0,
    );
    out
}

/// `client_id,quality,y,x_0,...,x_{d-1}`, one sample per line.
pub fn export_samples(shards: &[LocalDataset]) -> String {
    let mut out = String::new();
    for shard in shards {
        for s in &shard.samples {
            let _ = write!(out, "{},{},{}", shard.client_id, s.quality, s.y);
            for v in &s.x {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`export_samples`]. Shards come back ordered by client id.
pub fn import_samples(text: &str) -> Result<Vec<LocalDataset>> {
    let mut shards: Vec<LocalDataset> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(err(format!("expected at least 4 fields, got {}", fields.len())));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|e| err(format!("bad {what} `{s}`: {e}")));
        let client_id = int(fields[0], "client_id")?;
        let quality = int(fields[1], "quality")?;
        let y = int(fields[2], "label")?;
        let x = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("bad feature `{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let sample = Sample { x, y, quality };
        match shards.iter_mut().find(|d| d.client_id == client_id) {
            Some(shard) => shard.samples.push(sample),
            None => shards.push(LocalDataset {
                client_id,
                quality,
                samples: vec![sample],
            }),
        }
    }
    shards.sort_by_key(|d| d.client_id);
    Ok(shards)
}

/// SHA-256 over labels, quality flags and the exact bit patterns of features.
pub fn dataset_hash<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        hasher.update((s.y as u64).to_le_bytes());
        hasher.update((s.quality as u64).to_le_bytes());
        for v in &s.x {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Mean total-variation distance between each shard's class histogram and
/// the pooled histogram.
pub fn mean_label_skew(shards: &[LocalDataset], num_classes: usize) -> f64 {
    let normalize = |h: &[usize]| -> Vec<f64> {
        let n: usize = h.iter().sum();
        h.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
    };
    let mut pooled = vec![0; num_classes];
    for d in shards {
        for (p, c) in pooled.iter_mut().zip(d.class_histogram(num_classes)) {
            *p += c;
        }
    }
    let global = normalize(&pooled);
    let total: f64 = shards
        .iter()
        .map(|d| {
            let local = normalize(&d.class_histogram(num_classes));
            0.5 * local.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    total / shards.len() as f64
}
