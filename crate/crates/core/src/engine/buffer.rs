use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seqmodel::RolloutGroup;

/// Rollout groups from exactly one behavior version.
///
/// Sampling is epoch-style: within a pass every stored group is drawn at most
/// once, uniformly among those not yet drawn. Groups pushed mid-pass join the
/// current pass. When the pass is exhausted a new one begins over all stored
/// groups. A full buffer evicts its oldest group on push.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    groups: VecDeque<(u64, Arc<RolloutGroup>)>,
    capacity: usize,
    version_tag: u64,
    next_id: u64,
    pending: Vec<u64>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize, version_tag: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be >= 1".into()));
        }
        Ok(RolloutBuffer {
            groups: VecDeque::with_capacity(capacity),
            capacity,
            version_tag,
            next_id: 0,
            pending: Vec::new(),
        })
    }

    pub fn version_tag(&self) -> u64 {
        self.version_tag
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &RolloutGroup> {
        self.groups.iter().map(|(_, g)| g.as_ref())
    }

    pub fn push(&mut self, group: impl Into<Arc<RolloutGroup>>) -> Result<()> {
        let group = group.into();
        if group.behavior_version() != self.version_tag {
            return Err(Error::VersionMismatch {
                expected: self.version_tag,
                got: group.behavior_version(),
            });
        }
        if self.groups.len() == self.capacity {
            if let Some((old, _)) = self.groups.pop_front() {
                self.pending.retain(|&id| id != old);
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.groups.push_back((id, group));
        self.pending.push(id);
        Ok(())
    }

    /// Draws `batch_size` groups. A batch larger than the buffer spans passes and
    /// so repeats groups.
    pub fn sample<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<Vec<Arc<RolloutGroup>>> {
        if self.groups.is_empty() {
            return Err(Error::EmptyDataset("sample from an empty rollout buffer".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.pending.is_empty() {
                self.pending.extend(self.groups.iter().map(|(id, _)| *id));
            }
            let id = self.pending.swap_remove(rng.random_range(0..self.pending.len()));
            let pos = self
                .groups
                .binary_search_by_key(&id, |(gid, _)| *gid)
                .expect("pending ids are always stored");
            out.push(Arc::clone(&self.groups[pos].1));
        }
        Ok(out)
    }

    /// Empties the buffer and advances to the next version.
    pub fn clear(&mut self) {
        self.clear_to(self.version_tag + 1);
    }

    /// Empties the buffer and accepts `version` from now on.
    pub fn clear_to(&mut self, version: u64) {
        self.groups.clear();
        self.pending.clear();
        self.version_tag = version;
    }
}
