//! Beam-search replay buffer: a bounded, reward-ordered store of the best
//! candidate states, plus the content-addressed checkpoint store backing it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::calibration::ConfidenceState;
use crate::error::{Error, Result};
use crate::nn::adam::OptimizerState;
use crate::nn::cbp::UtilityState;
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use crate::nn::ModelColumn;

/// One (pseudo-label vector, confidence snapshot, reward, checkpoint) tuple.
#[derive(Debug, Clone)]
pub struct BeamCandidate {
    pub pseudo_labels: Vec<u8>,
    pub confidence_state: ConfidenceState,
    pub reward: f64,
    pub checkpoint_ref: String,
    pub birth_iteration: usize,
}

/// Reward-descending buffer of at most `capacity` candidates. Ties rank the
/// older candidate (smaller birth iteration, then earlier insertion) first.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    beam: Vec<BeamCandidate>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer { beam: Vec::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.beam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beam.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn best(&self) -> Option<&BeamCandidate> {
        self.beam.first()
    }

    pub fn second(&self) -> Option<&BeamCandidate> {
        self.beam.get(1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BeamCandidate> {
        self.beam.iter()
    }

    /// Sorted insert; evicts the lowest-reward entry when full.
    pub fn insert(&mut self, candidate: BeamCandidate) {
        let position = self
            .beam
            .iter()
            .position(|existing| {
                existing.reward < candidate.reward
                    || (existing.reward == candidate.reward
                        && existing.birth_iteration > candidate.birth_iteration)
            })
            .unwrap_or(self.beam.len());
        self.beam.insert(position, candidate);
        self.beam.truncate(self.capacity);
    }

    /// True when an entry with identical labels already holds at least this
    /// reward; phases skip such inserts to keep the beam diverse.
    pub fn dominates(&self, pseudo_labels: &[u8], reward: f64) -> bool {
        self.beam
            .iter()
            .any(|c| c.reward >= reward && c.pseudo_labels == pseudo_labels)
    }
}

/// In-memory content-addressed column store; beam candidates reference
/// checkpoints by hash, and a run directory flush persists them.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    entries: BTreeMap<String, Vec<u8>>,
}

impl CheckpointStore {
    pub fn new() -> CheckpointStore {
        CheckpointStore::default()
    }

    pub fn put_column(&mut self, column: &ModelColumn) -> String {
        self.put_state(column, None, None)
    }

    /// Stores a column together with its training state so warm starts
    /// continue where the candidate left off.
    pub fn put_state(
        &mut self,
        column: &ModelColumn,
        optimizer: Option<&OptimizerState>,
        utility: Option<&UtilityState>,
    ) -> String {
        let bytes = encode_checkpoint(&Checkpoint::of_column(column, optimizer, None, utility));
        let digest = Sha256::digest(&bytes);
        let hash = hex_prefix(&digest, 16);
        self.entries.insert(hash.clone(), bytes);
        hash
    }

    fn lookup(&self, reference: &str) -> Result<Checkpoint> {
        let bytes = self
            .entries
            .get(reference)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown checkpoint {reference}")))?;
        decode_checkpoint(bytes)
    }

    pub fn get_column(&self, reference: &str) -> Result<ModelColumn> {
        self.lookup(reference)?.to_column()
    }

    pub fn get_state(
        &self,
        reference: &str,
    ) -> Result<(ModelColumn, Option<OptimizerState>, Option<UtilityState>)> {
        let ckpt = self.lookup(reference)?;
        let column = ckpt.to_column()?;
        Ok((column, ckpt.optimizer, ckpt.utility))
    }

    /// Drops everything not referenced by the beam.
    pub fn retain_refs<'a>(&mut self, keep: impl Iterator<Item = &'a str>) {
        let keep: Vec<String> = keep.map(|s| s.to_string()).collect();
        self.entries.retain(|k, _| keep.iter().any(|r| r == k));
    }

    /// Writes `<ref>.ckpt` files into `dir`.
    pub fn flush_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (reference, bytes) in &self.entries {
            std::fs::write(dir.join(format!("{reference}.ckpt")), bytes)?;
        }
        Ok(())
    }
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

/// Uniform per-index crossover between two parent label vectors.
pub fn uniform_crossover(a: &[u8], b: &[u8], rng: &mut impl rand::Rng) -> Vec<u8> {
    a.iter()
        .zip(b)
        .map(|(&from_a, &from_b)| if rng.gen_bool(0.5) { from_a } else { from_b })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn candidate(reward: f64, birth: usize) -> BeamCandidate {
        BeamCandidate {
            pseudo_labels: vec![0, 1],
            confidence_state: ConfidenceState::new(vec![0.5, 0.5], 10.0).unwrap(),
            reward,
            checkpoint_ref: format!("ref-{reward}-{birth}"),
            birth_iteration: birth,
        }
    }

    #[test]
    fn insert_into_empty() {
        let mut buffer = ReplayBuffer::new(3);
        buffer.insert(candidate(0.5, 1));
        assert_eq!(buffer.len(), 1);
        assert_eq!(buffer.best().unwrap().reward, 0.5);
    }

    #[test]
    fn eviction_keeps_top_rewards() {
        // oracle: sort-and-truncate
        let mut buffer = ReplayBuffer::new(2);
        buffer.insert(candidate(0.9, 1));
        buffer.insert(candidate(0.8, 2));
        buffer.insert(candidate(0.85, 3));
        let rewards: Vec<f64> = buffer.iter().map(|c| c.reward).collect();
        assert_eq!(rewards, vec![0.9, 0.85]);
    }

    #[test]
    fn equal_reward_keeps_existing_first() {
        let mut buffer = ReplayBuffer::new(3);
        buffer.insert(candidate(0.7, 1));
        buffer.insert(candidate(0.7, 4));
        assert_eq!(buffer.best().unwrap().birth_iteration, 1);
        assert_eq!(buffer.iter().nth(1).unwrap().birth_iteration, 4);
    }

    #[test]
    fn best_reward_is_monotone_under_random_inserts() {
        let mut buffer = ReplayBuffer::new(4);
        let mut rng = stream_rng(41, 0);
        let mut best = f64::NEG_INFINITY;
        for birth in 0..200 {
            buffer.insert(candidate(rng.gen_range(0.0..1.0), birth));
            let now = buffer.best().unwrap().reward;
            assert!(now >= best);
            best = now;
            assert!(buffer.len() <= 4);
            let rewards: Vec<f64> = buffer.iter().map(|c| c.reward).collect();
            for pair in rewards.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }
    }

    #[test]
    fn checkpoint_store_round_trip() {
        use crate::nn::Architecture;
        let column = ModelColumn::new(Architecture::new(3, vec![4]), &mut stream_rng(1, 0));
        let mut store = CheckpointStore::new();
        let reference = store.put_column(&column);
        assert_eq!(reference.len(), 16);
        let restored = store.get_column(&reference).unwrap();
        assert_eq!(restored.params, column.params);
        // same content, same hash
        assert_eq!(store.put_column(&column), reference);
        assert!(store.get_column("feedfacedeadbeef").is_err());
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let labels = vec![0, 1, 1, 0, 1];
        let child = uniform_crossover(&labels, &labels, &mut stream_rng(2, 0));
        assert_eq!(child, labels);
    }

    #[test]
    fn crossover_mixes_both_parents() {
        let a = vec![0u8; 64];
        let b = vec![1u8; 64];
        let child = uniform_crossover(&a, &b, &mut stream_rng(3, 0));
        let ones = child.iter().filter(|&&v| v == 1).count();
        assert!(ones > 10 && ones < 54, "ones = {ones}");
    }
}
