//! Batch scheduling for supervised, semi-supervised and alternating training.
//!
//! An epoch is one pass over the labeled set. In alternating mode every
//! group of `ratio.0` labeled batches is followed by `ratio.1` unlabeled
//! batches. Unlabeled batches are drawn from an endless stream that walks
//! successive reshuffles of the unlabeled pool, so the whole schedule is a
//! pure function of `(seed, epoch)` and can be resumed anywhere.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::seed;

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Supervised,
    Semi,
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchKind {
    Labeled,
    Unlabeled,
}

impl BatchKind {
    pub fn name(self) -> &'static str {
        match self {
            BatchKind::Labeled => "labeled",
            BatchKind::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    /// Indices into `labeled` or `unlabeled` depending on `kind`.
    pub indices: Vec<usize>,
    pub epoch: usize,
    pub index_in_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct BatchIterator {
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    mode: BatchMode,
    seed: u64,
    ratio: (usize, usize),
    epoch: usize,
    cursor: usize,
    current: Vec<Batch>,
}

impl BatchIterator {
    pub fn new(split: &DatasetSplit, batch_size: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        Self::with_counts(split.labeled.len(), split.unlabeled.len(), batch_size, mode, seed)
    }

    pub fn with_counts(
        n_labeled: usize,
        n_unlabeled: usize,
        batch_size: usize,
        mode: BatchMode,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if n_labeled == 0 && mode != BatchMode::Semi {
            return Err(Error::Data("no labeled samples".into()));
        }
        if n_unlabeled == 0 && mode != BatchMode::Supervised {
            return Err(Error::Data(format!(
                "{mode:?} batching needs unlabeled samples"
            )));
        }
        Ok(Self {
            n_labeled,
            n_unlabeled,
            batch_size,
            mode,
            seed,
            ratio: (1, 1),
            epoch: 0,
            cursor: 0,
            current: Vec::new(),
        })
    }

    /// Labeled:unlabeled batch ratio for alternating mode.
    pub fn with_ratio(mut self, labeled: usize, unlabeled: usize) -> Result<Self> {
        if labeled == 0 || unlabeled == 0 {
            return Err(Error::Config("alternation ratio terms must be positive".into()));
        }
        self.ratio = (labeled, unlabeled);
        self.current.clear();
        Ok(self)
    }

    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    /// `(labeled, unlabeled)` batch counts of every epoch.
    pub fn batches_per_epoch(&self) -> (usize, usize) {
        let labeled = self.n_labeled.div_ceil(self.batch_size);
        match self.mode {
            BatchMode::Supervised => (labeled, 0),
            BatchMode::Semi => (0, self.n_unlabeled.div_ceil(self.batch_size)),
            BatchMode::Alternating => (labeled, labeled.div_ceil(self.ratio.0) * self.ratio.1),
        }
    }

    pub fn epoch_len(&self) -> usize {
        let (l, u) = self.batches_per_epoch();
        l + u
    }

    fn unlabeled_batch_size(&self) -> usize {
        self.batch_size.min(self.n_unlabeled)
    }

    /// The full, ordered batch list of one epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Batch> {
        let (_, u_per_epoch) = self.batches_per_epoch();
        let bu = self.unlabeled_batch_size();
        let mut perms: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut next_unlabeled = epoch * u_per_epoch * bu;
        let mut unlabeled = |count: usize| -> Vec<usize> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let cycle = next_unlabeled / self.n_unlabeled;
                let perm = perms.entry(cycle).or_insert_with(|| {
                    seed::permutation(self.n_unlabeled, self.seed, &[UNLABELED_STREAM, cycle as u64])
                });
                out.push(perm[next_unlabeled % self.n_unlabeled]);
                next_unlabeled += 1;
            }
            out
        };

        let mut batches = Vec::new();
        let mut push = |kind, indices| {
            let index_in_epoch = batches.len();
            batches.push(Batch {
                kind,
                indices,
                epoch,
                index_in_epoch,
            });
        };
        match self.mode {
            BatchMode::Semi => {
                for _ in 0..u_per_epoch {
                    push(BatchKind::Unlabeled, unlabeled(bu));
                }
            }
            BatchMode::Supervised | BatchMode::Alternating => {
                let order =
                    seed::permutation(self.n_labeled, self.seed, &[LABELED_STREAM, epoch as u64]);
                let chunks: Vec<Vec<usize>> =
                    order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
                for group in chunks.chunks(self.ratio.0) {
                    for c in group {
                        push(BatchKind::Labeled, c.clone());
                    }
                    if self.mode == BatchMode::Alternating {
                        for _ in 0..self.ratio.1 {
                            push(BatchKind::Unlabeled, unlabeled(bu));
                        }
                    }
                }
            }
        }
        batches
    }

    /// Position the stream at batch `cursor` of `epoch`.
    pub fn seek(&mut self, epoch: usize, cursor: usize) {
        self.epoch = epoch;
        self.cursor = cursor;
        self.current.clear();
    }

    pub fn position(&self) -> (usize, usize) {
        (self.epoch, self.cursor)
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.epoch_len() == 0 {
            return None;
        }
        loop {
            if self.current.is_empty() {
                self.current = self.epoch_batches(self.epoch);
            }
            if let Some(b) = self.current.get(self.cursor) {
                self.cursor += 1;
                return Some(b.clone());
            }
            self.epoch += 1;
            self.cursor = 0;
            self.current.clear();
        }
    }
}
