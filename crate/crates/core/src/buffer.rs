//! Experience store for hidden-layer training.
//!
//! Admission keeps the stacked feature matrix (one row `φ(x)` per entry) as
//! well conditioned as possible: while there is room, a candidate must keep
//! the smallest singular value above a novelty floor; once full, the
//! candidate replaces whichever entry maximises the smallest singular value,
//! provided that strictly improves on the current one.

use serde::{Deserialize, Serialize};

use crate::linalg::{min_singular_value, Mat};
use crate::net::FeatureSnapshot;
use crate::plant::{ControlVec, StateVec};

pub const NOVELTY_FLOOR: f64 = 1e-3;
pub const DEFAULT_CAPACITY: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub state: StateVec,
    /// Learning control applied at `state`.
    pub label: ControlVec,
    pub clipped: bool,
    pub step: usize,
}

/// Outcome of [`ReplayBuffer::offer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Admission {
    Appended,
    Replaced { index: usize },
    Rejected,
}

impl Admission {
    pub fn accepted(self) -> bool {
        !matches!(self, Admission::Rejected)
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    features: Vec<Vec<f64>>,
    generation: Option<u64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            features: Vec::with_capacity(capacity),
            generation: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Smallest singular value of the cached feature matrix (0 when empty).
    pub fn min_singular_value(&self) -> f64 {
        if self.features.is_empty() {
            0.0
        } else {
            min_singular_value(&stack(&self.features))
        }
    }

    /// Recomputes the feature cache if `snapshot` is a new generation.
    pub fn sync_features(&mut self, snapshot: &FeatureSnapshot) {
        if self.generation == Some(snapshot.generation()) {
            return;
        }
        self.features = self.entries.iter().map(|e| snapshot.features(&e.state)).collect();
        self.generation = Some(snapshot.generation());
    }

    pub fn offer(&mut self, candidate: BufferEntry, snapshot: &FeatureSnapshot) -> Admission {
        self.sync_features(snapshot);
        let phi = snapshot.features(&candidate.state);

        if self.entries.is_empty() {
            self.push(candidate, phi);
            return Admission::Appended;
        }

        if self.entries.len() < self.capacity {
            let mut rows = self.features.clone();
            rows.push(phi.clone());
            if min_singular_value(&stack(&rows)) > NOVELTY_FLOOR {
                self.push(candidate, phi);
                return Admission::Appended;
            }
            return Admission::Rejected;
        }

        let current = self.min_singular_value();
        let mut best: Option<(usize, f64)> = None;
        let mut rows = self.features.clone();
        for i in 0..rows.len() {
            let saved = std::mem::replace(&mut rows[i], phi.clone());
            let value = min_singular_value(&stack(&rows));
            rows[i] = saved;
            if best.map_or(true, |(_, b)| value > b) {
                best = Some((i, value));
            }
        }
        match best {
            Some((index, value)) if value > current => {
                self.entries[index] = candidate;
                self.features[index] = phi;
                debug_assert!(self.min_singular_value() >= current);
                Admission::Replaced { index }
            }
            _ => Admission::Rejected,
        }
    }

    fn push(&mut self, entry: BufferEntry, phi: Vec<f64>) {
        self.entries.push(entry);
        self.features.push(phi);
    }

    /// Immutable copy of the `(state, label)` pairs; optionally without
    /// clipped labels.
    pub fn snapshot_for_training(&self, exclude_clipped: bool) -> Vec<(StateVec, ControlVec)> {
        self.entries
            .iter()
            .filter(|e| !(exclude_clipped && e.clipped))
            .map(|e| (e.state, e.label))
            .collect()
    }

    /// CSV dump: `step,x,y,theta,v,omega,label_l,label_r,clipped`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,x,y,theta,v,omega,label_l,label_r,clipped")?;
        for e in &self.entries {
            let s = e.state.0;
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                e.step,
                s[0],
                s[1],
                s[2],
                s[3],
                s[4],
                e.label[0],
                e.label[1],
                u8::from(e.clipped)
            )?;
        }
        Ok(())
    }
}

pub(crate) fn stack(rows: &[Vec<f64>]) -> Mat {
    Mat::from_rows(rows).expect("finite features of equal length")
}
