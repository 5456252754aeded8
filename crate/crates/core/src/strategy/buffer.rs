use rand::seq::index::sample;
use rand::Rng;

use crate::data::{Annotation, ClassRange, TaskDataset, IMAGE_BYTES};
use crate::detector::{Boundary, Detector};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bytes per stored latent element (activations are kept as f64).
pub const LATENT_ELEMENT_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Channel-major `[3, 64, 64]` bytes.
    Raw(Vec<u8>),
    /// Activation `[Cz, Hz, Wz]` at the buffer's split point.
    Latent(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    /// Task the sample was drawn from.
    pub task: usize,
    pub payload: Payload,
    pub annotations: Vec<Annotation>,
    /// Classes the annotations were drawn from.
    pub range: ClassRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferKind {
    Raw,
    Latent { split: Boundary, shape: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub kind: BufferKind,
    pub entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, kind: BufferKind) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be at least 1"));
        }
        Ok(ReplayBuffer { capacity, kind, entries: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes_per_entry(&self) -> usize {
        match self.kind {
            BufferKind::Raw => IMAGE_BYTES,
            BufferKind::Latent { shape, .. } => shape.iter().product::<usize>() * LATENT_ELEMENT_BYTES,
        }
    }

    /// Memory held by the stored samples (annotations excluded).
    pub fn byte_size(&self) -> usize {
        self.len() * self.bytes_per_entry()
    }

    fn encode(&self, model: &Detector, task: &TaskDataset, samples: &[usize]) -> Result<Vec<BufferEntry>> {
        let payloads: Vec<Payload> = match self.kind {
            BufferKind::Raw => samples.iter().map(|&i| Payload::Raw(task.image_bytes(i).to_vec())).collect(),
            BufferKind::Latent { split, shape } => {
                if model.split_point() != split {
                    return Err(Error::invalid("latent buffer split differs from the model's split point"));
                }
                let batch = task.batch(samples)?;
                let z = model.latent_forward(&batch.images)?;
                let per = shape.iter().product::<usize>();
                if z.features.numel() != per * samples.len() {
                    return Err(Error::shape(format!("latent {:?} does not match buffer shape {shape:?}", z.features.shape())));
                }
                z.features.data().chunks(per).map(|c| Payload::Latent(c.to_vec())).collect()
            }
        };
        Ok(samples
            .iter()
            .zip(payloads)
            .map(|(&i, payload)| BufferEntry {
                task: task.index,
                payload,
                annotations: task.samples[i].annotations.clone(),
                range: task.visible,
            })
            .collect())
    }

    /// First fill takes a uniform sample of the task; later calls overwrite
    /// `ceil(capacity / 2)` uniformly chosen slots with new-task samples.
    pub fn update(&mut self, model: &Detector, task: &TaskDataset, rng: &mut impl Rng) -> Result<()> {
        if task.is_empty() {
            return Ok(());
        }
        if self.is_empty() {
            let n = self.capacity.min(task.len());
            let picks = sample(rng, task.len(), n).into_vec();
            self.entries = self.encode(model, task, &picks)?;
            return Ok(());
        }
        let n = self.capacity.div_ceil(2).min(task.len());
        let picks = sample(rng, task.len(), n).into_vec();
        let fresh = self.encode(model, task, &picks)?;
        // Free slots are used first; the remainder overwrites old entries.
        let old_len = self.len();
        let mut fresh = fresh.into_iter();
        self.entries.extend(fresh.by_ref().take(self.capacity - old_len));
        let rest: Vec<BufferEntry> = fresh.collect();
        let slots = sample(rng, old_len, rest.len()).into_vec();
        for (slot, e) in slots.into_iter().zip(rest) {
            self.entries[slot] = e;
        }
        Ok(())
    }

    /// `count` distinct entries chosen uniformly.
    pub fn draw(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<&BufferEntry>> {
        if self.is_empty() {
            return Err(Error::invalid("cannot draw from an empty replay buffer"));
        }
        let picks: Vec<usize> = if count <= self.len() {
            sample(rng, self.len(), count).into_vec()
        } else {
            (0..count).map(|_| rng.random_range(0..self.len())).collect()
        };
        Ok(picks.into_iter().map(|i| &self.entries[i]).collect())
    }

    /// Latent entries as one `[N, Cz, Hz, Wz]` tensor.
    pub fn latent_tensor(entries: &[&BufferEntry], shape: [usize; 3]) -> Result<Tensor> {
        let mut data = Vec::new();
        for e in entries {
            match &e.payload {
                Payload::Latent(v) => data.extend_from_slice(v),
                Payload::Raw(_) => return Err(Error::invalid("raw entry in a latent buffer")),
            }
        }
        Tensor::new(&[entries.len(), shape[0], shape[1], shape[2]], data)
    }
}
