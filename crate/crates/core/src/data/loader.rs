use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{stack_images, strong_augment, weak_augment, AugmentPolicy, Normalization, SourceDataset, SplitManifest};
use crate::rng::{self, names, StreamRng};

/// Without-replacement sampler that reshuffles at every epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: StreamRng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: StreamRng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoaderState {
    pub labeled: EpochSampler,
    pub unlabeled: EpochSampler,
    pub augment: StreamRng,
}

#[derive(Clone, Debug)]
pub struct BatchConfig {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub policy: AugmentPolicy,
    pub normalization: Normalization,
}

/// One training step's inputs. Unlabeled samples arrive as paired weak and
/// strong views of the same images; their labels never leave the loader.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub labeled: Array4<f32>,
    pub labels: Vec<usize>,
    pub weak: Array4<f32>,
    pub strong: Array4<f32>,
}

pub struct BatchSource {
    dataset: Arc<dyn SourceDataset>,
    labeled_pool: Vec<(usize, usize)>,
    unlabeled_pool: Vec<usize>,
    config: BatchConfig,
    state: LoaderState,
}

impl BatchSource {
    pub fn new(dataset: Arc<dyn SourceDataset>, manifest: &SplitManifest, config: BatchConfig, seed: u64) -> Self {
        let labeled_pool = manifest.labeled_pool();
        let unlabeled_pool = manifest.unlabeled_pool();
        let state = LoaderState {
            labeled: EpochSampler::new(labeled_pool.len(), rng::stream(seed, names::LABELED_ORDER)),
            unlabeled: EpochSampler::new(unlabeled_pool.len(), rng::stream(seed, names::UNLABELED_ORDER)),
            augment: rng::stream(seed, names::AUGMENT),
        };
        Self {
            dataset,
            labeled_pool,
            unlabeled_pool,
            config,
            state,
        }
    }

    pub fn state(&self) -> &LoaderState {
        &self.state
    }

    pub fn restore(&mut self, state: LoaderState) {
        self.state = state;
    }

    pub fn next_batch(&mut self) -> TrainBatch {
        let policy = &self.config.policy;
        let picks = self.state.labeled.next_batch(self.config.labeled_batch);
        let mut labels = Vec::with_capacity(picks.len());
        let mut labeled = Vec::with_capacity(picks.len());
        for p in picks {
            let (index, class) = self.labeled_pool[p];
            labels.push(class);
            labeled.push(weak_augment(&self.dataset.image(index), policy, &mut self.state.augment));
        }
        let picks = self.state.unlabeled.next_batch(self.config.unlabeled_batch);
        let mut weak = Vec::with_capacity(picks.len());
        let mut strong = Vec::with_capacity(picks.len());
        for p in picks {
            let img = self.dataset.image(self.unlabeled_pool[p]);
            weak.push(weak_augment(&img, policy, &mut self.state.augment));
            strong.push(strong_augment(&img, policy, &mut self.state.augment));
        }
        let norm = &self.config.normalization;
        let (h, w, c) = self.dataset.image_shape();
        let stack = |imgs: &[super::Image]| {
            if imgs.is_empty() {
                Array4::zeros((0, h, w, c))
            } else {
                stack_images(imgs, norm)
            }
        };
        TrainBatch {
            labeled: stack(&labeled),
            labels,
            weak: stack(&weak),
            strong: stack(&strong),
        }
    }
}

/// Produces batches on a worker thread over a bounded channel. The worker
/// owns the loader state, so the batch sequence is identical to synchronous
/// loading; each batch carries the state needed to resume right after it.
pub struct Prefetcher {
    rx: Option<Receiver<(TrainBatch, LoaderState)>>,
    handle: Option<JoinHandle<()>>,
    last_state: LoaderState,
}

impl Prefetcher {
    pub fn spawn(mut source: BatchSource, depth: usize) -> Self {
        let last_state = source.state().clone();
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = thread::spawn(move || loop {
            let batch = source.next_batch();
            if tx.send((batch, source.state().clone())).is_err() {
                break;
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
            last_state,
        }
    }

    pub fn next_batch(&mut self) -> TrainBatch {
        let (batch, state) = self
            .rx
            .as_ref()
            .expect("receiver lives until drop")
            .recv()
            .expect("loader thread alive");
        self.last_state = state;
        batch
    }

    pub fn state(&self) -> &LoaderState {
        &self.last_state
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub enum Loader {
    Sync(BatchSource),
    Prefetch(Prefetcher),
}

impl Loader {
    pub fn new(source: BatchSource, prefetch: usize) -> Self {
        if prefetch == 0 {
            Loader::Sync(source)
        } else {
            Loader::Prefetch(Prefetcher::spawn(source, prefetch))
        }
    }

    pub fn next_batch(&mut self) -> TrainBatch {
        match self {
            Loader::Sync(s) => s.next_batch(),
            Loader::Prefetch(p) => p.next_batch(),
        }
    }

    /// State right after the most recently returned batch.
    pub fn state(&self) -> LoaderState {
        match self {
            Loader::Sync(s) => s.state().clone(),
            Loader::Prefetch(p) => p.state().clone(),
        }
    }
}
