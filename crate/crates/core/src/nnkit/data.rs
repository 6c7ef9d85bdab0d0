use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Matrix, NnError, Result};

/// One training minibatch: inputs plus ground-truth class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    hard_labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, hard_labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(NnError::InvalidArgument(
                "a batch needs at least one sample".into(),
            ));
        }
        if inputs.rows() != hard_labels.len() {
            return Err(NnError::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                hard_labels.len()
            )));
        }
        Ok(Self {
            inputs,
            hard_labels,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn hard_labels(&self) -> &[usize] {
        &self.hard_labels
    }

    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

/// Labelled samples with a content hash identifying them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<usize>,
    classes: usize,
    id: String,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(NnError::InvalidArgument("dataset is empty".into()));
        }
        if samples.rows() != labels.len() {
            return Err(NnError::Shape(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(NnError::InvalidArgument(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        let id = content_hash(&samples, &labels, classes);
        Ok(Self {
            samples,
            labels,
            classes,
            id,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Hex prefix of a SHA-256 over shape, sample bits and labels.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (start..end).collect();
        Dataset::new(
            self.samples.select_rows(&idx),
            self.labels[start..end].to_vec(),
            self.classes,
        )
    }
}

fn content_hash(samples: &Matrix, labels: &[usize], classes: usize) -> String {
    let mut h = Sha256::new();
    h.update((samples.rows() as u64).to_le_bytes());
    h.update((samples.cols() as u64).to_le_bytes());
    h.update((classes as u64).to_le_bytes());
    for v in samples.as_slice() {
        h.update(v.to_le_bytes());
    }
    for &y in labels {
        h.update((y as u64).to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Gaussian clusters: class centres drawn from `N(0, 1)` per coordinate,
/// samples at `centre + N(0, spread^2)`. Labels are balanced (`i mod classes`)
/// before a seeded shuffle of the sample order.
pub fn make_blobs(
    seed: u64,
    n_samples: usize,
    dim: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if n_samples == 0 || dim == 0 || classes == 0 {
        return Err(NnError::InvalidArgument(
            "samples, dim and classes must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(NnError::InvalidArgument(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    for &i in &order {
        let y = i % classes;
        labels.push(y);
        data.extend(
            centres[y]
                .iter()
                .map(|c| c + spread * unit.sample(&mut rng)),
        );
    }
    Dataset::new(Matrix::from_vec(n_samples, dim, data)?, labels, classes)
}

/// Splits off the last `n_test` samples as a held-out set.
pub fn split_holdout(data: &Dataset, n_test: usize) -> Result<(Dataset, Dataset)> {
    if n_test == 0 || n_test >= data.len() {
        return Err(NnError::InvalidArgument(format!(
            "hold-out size {n_test} must be in 1..{}",
            data.len()
        )));
    }
    let cut = data.len() - n_test;
    Ok((data.slice(0, cut)?, data.slice(cut, data.len())?))
}

/// Contiguous shard `rank` of `world_size`. Shards are disjoint and cover the data.
pub fn partition(data: &Dataset, world_size: usize, rank: usize) -> Result<Dataset> {
    if world_size == 0 || rank >= world_size {
        return Err(NnError::InvalidArgument(format!(
            "rank {rank} not in world of {world_size}"
        )));
    }
    if world_size > data.len() {
        return Err(NnError::InvalidArgument(format!(
            "cannot split {} samples across {world_size} workers",
            data.len()
        )));
    }
    let (start, end) = shard_bounds(data.len(), world_size, rank);
    data.slice(start, end)
}

pub(crate) fn shard_bounds(n: usize, world_size: usize, rank: usize) -> (usize, usize) {
    (rank * n / world_size, (rank + 1) * n / world_size)
}

/// Deterministic epoch-shuffled minibatch stream over a (cached) shard.
///
/// Batch ids are global sequence numbers: batch `id` belongs to epoch
/// `id / batches_per_epoch`, and each epoch's order is a permutation seeded by
/// `(seed, epoch)`, so any batch can be regenerated from its id alone.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    batch_size: usize,
    batches_per_epoch: usize,
    seed: u64,
    shard_len: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl EpochSampler {
    /// `batches_per_epoch` defaults to `shard_len / batch_size` (at least 1);
    /// pass an explicit value to keep several workers in lockstep.
    pub fn new(
        shard_len: usize,
        batch_size: usize,
        seed: u64,
        batches_per_epoch: Option<usize>,
    ) -> Result<Self> {
        if shard_len == 0 || batch_size == 0 {
            return Err(NnError::InvalidArgument(
                "shard and batch size must be positive".into(),
            ));
        }
        let bpe = batches_per_epoch.unwrap_or((shard_len / batch_size).max(1));
        if bpe == 0 {
            return Err(NnError::InvalidArgument(
                "batches_per_epoch must be positive".into(),
            ));
        }
        Ok(Self {
            batch_size,
            batches_per_epoch: bpe,
            seed,
            shard_len,
            cached: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn epoch_of(&self, batch_id: u64) -> u64 {
        batch_id / self.batches_per_epoch as u64
    }

    /// Sample indices (into the shard) for `batch_id`. Indices wrap around the
    /// shard when `batches_per_epoch * batch_size` exceeds its length.
    pub fn indices(&mut self, batch_id: u64) -> Vec<usize> {
        let epoch = self.epoch_of(batch_id);
        let within = (batch_id % self.batches_per_epoch as u64) as usize;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.shard_len).collect();
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        let perm = &self.cached.as_ref().expect("just filled").1;
        let take = self.batch_size.min(self.shard_len);
        (0..take)
            .map(|j| perm[(within * self.batch_size + j) % self.shard_len])
            .collect()
    }

    pub fn batch(&mut self, shard: &Dataset, batch_id: u64) -> Result<Batch> {
        let idx = self.indices(batch_id);
        shard.batch(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = make_blobs(3, 100, 4, 10, 0.5).unwrap();
        let b = make_blobs(3, 100, 4, 10, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 10);
        }
        assert_ne!(a.id(), make_blobs(4, 100, 4, 10, 0.5).unwrap().id());
    }

    #[test]
    fn holdout_split_sizes() {
        let d = make_blobs(0, 50, 2, 3, 1.0).unwrap();
        let (tr, te) = split_holdout(&d, 10).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        assert!(split_holdout(&d, 50).is_err());
    }

    #[test]
    fn partition_rejects_bad_rank() {
        let d = make_blobs(0, 10, 2, 2, 1.0).unwrap();
        assert!(partition(&d, 2, 2).is_err());
        assert!(partition(&d, 11, 0).is_err());
        assert_eq!(partition(&d, 1, 0).unwrap(), d);
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = EpochSampler::new(20, 5, 7, None).unwrap();
        assert_eq!(s.batches_per_epoch(), 4);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..4).flat_map(|b| s.indices(epoch * 4 + b)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..20).collect::<Vec<_>>());
        }
        let e0: Vec<usize> = s.indices(0);
        let e1: Vec<usize> = s.indices(4);
        assert_ne!(e0, e1, "epochs reshuffle");
        let mut fresh = EpochSampler::new(20, 5, 7, None).unwrap();
        assert_eq!(fresh.indices(4), e1, "order depends only on (seed, epoch)");
    }
}
