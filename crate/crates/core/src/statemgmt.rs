//! Serialized operator state: full, immutable and incremental blobs,
//! key-hash chunking, chain validation on load, and checkpoint replication
//! bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::NodeId;
use crate::streamcore::{OperatorMeta, QueryId, QueryInstance, SeqMarks, StreamId, Tuple};

pub const BLOB_HEADER_BYTES: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobKind {
    /// The complete state; installing it replaces whatever the target holds.
    Full,
    /// State the target lacks, shipped while the source keeps processing.
    Immutable,
    /// State built up since the target's last installed blob.
    Incremental,
}

/// Inclusive range of input sequence numbers; empty when `high < low`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqRange {
    pub low: u64,
    pub high: u64,
}

impl SeqRange {
    pub fn is_empty(&self) -> bool {
        self.high < self.low
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    /// Chunks of one snapshot share a group id.
    pub group: u64,
    pub index: u32,
    pub of: u32,
}

impl Default for ChunkInfo {
    fn default() -> Self {
        ChunkInfo { group: 0, index: 0, of: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateBlob {
    pub query: QueryId,
    pub kind: BlobKind,
    pub records: Arc<Vec<Tuple>>,
    pub covered: BTreeMap<StreamId, SeqRange>,
    pub meta: OperatorMeta,
    pub chunk: ChunkInfo,
    pub bytes: u64,
}

impl StateBlob {
    pub fn new(query: QueryId, kind: BlobKind, records: Vec<Tuple>, covered: BTreeMap<StreamId, SeqRange>, meta: OperatorMeta) -> Self {
        let bytes = serialized_size(&records);
        StateBlob { query, kind, records: Arc::new(records), covered, meta, chunk: ChunkInfo::default(), bytes }
    }

    pub fn with_group(mut self, group: u64) -> Self {
        self.chunk.group = group;
        self
    }

    /// Highest covered seq per stream.
    pub fn high_marks(&self) -> SeqMarks {
        self.covered.iter().map(|(s, r)| (*s, r.high)).collect()
    }
}

/// Size model: 64-byte blob header plus `payload + 32` per record.
pub fn serialized_size(records: &[Tuple]) -> u64 {
    BLOB_HEADER_BYTES + records.iter().map(Tuple::record_bytes).sum::<u64>()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("no base checkpoint to take an increment against")]
    NoBaseCheckpoint,
    #[error("blob for query {blob:?} offered to query {instance:?}")]
    QueryMismatch { blob: QueryId, instance: QueryId },
    #[error("blob does not cover input stream {0}")]
    MissingStream(StreamId),
    #[error("gap on stream {stream}: state holds up to {held}, blob starts at {low}")]
    Gap { stream: StreamId, held: u64, low: u64 },
    #[error("overlap on stream {stream}: state holds up to {held}, blob starts at {low}")]
    Overlap { stream: StreamId, held: u64, low: u64 },
    #[error("base marks exceed the live state on stream {0}")]
    BaseAhead(StreamId),
    #[error("chunk {index} of group {group} is inconsistent with its group")]
    ChunkMismatch { group: u64, index: u32 },
    #[error("{missing} chunk(s) of group {group} never arrived")]
    IncompleteChunks { group: u64, missing: usize },
}

/// Full snapshot of an instance. Leaves the instance unchanged.
pub fn extract_state(inst: &QueryInstance) -> StateBlob {
    let covered = inst.marks().iter().map(|(s, m)| (*s, SeqRange { low: 1, high: *m })).collect();
    StateBlob::new(inst.query, BlobKind::Full, inst.op.records(), covered, inst.op.meta())
}

/// Records with seq above `since`, covering `since + 1 ..= current`.
pub fn extract_since(inst: &QueryInstance, since: &SeqMarks, kind: BlobKind) -> Result<StateBlob, StateError> {
    let mut covered = BTreeMap::new();
    for (s, m) in inst.marks() {
        let base = since.get(s).copied().unwrap_or(0);
        if base > *m {
            return Err(StateError::BaseAhead(*s));
        }
        covered.insert(*s, SeqRange { low: base + 1, high: *m });
    }
    Ok(StateBlob::new(inst.query, kind, inst.op.records_after(since), covered, inst.op.meta()))
}

/// Increment relative to the latest blob of `since`.
pub fn extract_incremental(inst: &QueryInstance, since: Option<&Checkpoint>) -> Result<StateBlob, StateError> {
    let cp = since.ok_or(StateError::NoBaseCheckpoint)?;
    extract_since(inst, &cp.high_marks(), BlobKind::Incremental)
}

/// Splits a blob by key-hash order into chunks whose record bytes stay
/// within `max_chunk_bytes`, except where a single key is larger.
pub fn partition(blob: &StateBlob, max_chunk_bytes: u64) -> Vec<StateBlob> {
    let max = max_chunk_bytes.max(1);
    let mut by_key: BTreeMap<(u64, u64), Vec<&Tuple>> = BTreeMap::new();
    for t in blob.records.iter() {
        by_key.entry((mix64(t.key), t.key)).or_default().push(t);
    }
    let mut chunks: Vec<Vec<Tuple>> = Vec::new();
    let mut current: Vec<Tuple> = Vec::new();
    let mut current_bytes = 0u64;
    for records in by_key.into_values() {
        let key_bytes: u64 = records.iter().map(|t| t.record_bytes()).sum();
        if !current.is_empty() && current_bytes + key_bytes > max {
            chunks.push(std::mem::take(&mut current));
            current_bytes = 0;
        }
        current.extend(records.into_iter().cloned());
        current_bytes += key_bytes;
    }
    if !current.is_empty() || chunks.is_empty() {
        chunks.push(current);
    }
    let of = chunks.len() as u32;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, mut records)| {
            records.sort_by_key(|t| (t.stream, t.seq));
            let mut c = StateBlob::new(blob.query, blob.kind, records, blob.covered.clone(), blob.meta);
            c.chunk = ChunkInfo { group: blob.chunk.group, index: i as u32, of };
            c
        })
        .collect()
}

pub fn partition_state(inst: &QueryInstance, max_chunk_bytes: u64) -> Vec<StateBlob> {
    partition(&extract_state(inst), max_chunk_bytes)
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq)]
struct PendingGroup {
    group: u64,
    kind: BlobKind,
    covered: BTreeMap<StreamId, SeqRange>,
    meta: OperatorMeta,
    missing: BTreeSet<u32>,
}

/// Whether an installed blob completed its snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstallProgress {
    Complete,
    Partial,
}

/// Installs blobs one at a time, validating that each snapshot continues
/// exactly where the instance's state ends. Chunks of a snapshot may come
/// in any order; marks advance once the last one is installed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateLoader {
    pending: Option<PendingGroup>,
}

impl StateLoader {
    pub fn is_idle(&self) -> bool {
        self.pending.is_none()
    }

    pub fn install(&mut self, inst: &mut QueryInstance, blob: &StateBlob) -> Result<InstallProgress, StateError> {
        if blob.query != inst.query {
            return Err(StateError::QueryMismatch { blob: blob.query, instance: inst.query });
        }
        if let Some(p) = &mut self.pending {
            if p.group != blob.chunk.group || p.kind != blob.kind || p.covered != blob.covered || !p.missing.remove(&blob.chunk.index) {
                return Err(StateError::ChunkMismatch { group: blob.chunk.group, index: blob.chunk.index });
            }
            inst.op.install_records(&blob.records);
            if p.missing.is_empty() {
                let p = self.pending.take().expect("pending group");
                finish(inst, &p.covered, p.meta);
                return Ok(InstallProgress::Complete);
            }
            return Ok(InstallProgress::Partial);
        }
        if blob.kind == BlobKind::Full {
            inst.reset();
        }
        for (s, held) in inst.marks() {
            let r = blob.covered.get(s).ok_or(StateError::MissingStream(*s))?;
            if r.low > held + 1 {
                return Err(StateError::Gap { stream: *s, held: *held, low: r.low });
            }
            if r.low < held + 1 {
                return Err(StateError::Overlap { stream: *s, held: *held, low: r.low });
            }
        }
        inst.op.install_records(&blob.records);
        if blob.chunk.of > 1 {
            let missing = (0..blob.chunk.of).filter(|i| *i != blob.chunk.index).collect();
            self.pending = Some(PendingGroup {
                group: blob.chunk.group,
                kind: blob.kind,
                covered: blob.covered.clone(),
                meta: blob.meta,
                missing,
            });
            return Ok(InstallProgress::Partial);
        }
        finish(inst, &blob.covered, blob.meta);
        Ok(InstallProgress::Complete)
    }

    pub fn finish(&self) -> Result<(), StateError> {
        match &self.pending {
            None => Ok(()),
            Some(p) => Err(StateError::IncompleteChunks { group: p.group, missing: p.missing.len() }),
        }
    }
}

fn finish(inst: &mut QueryInstance, covered: &BTreeMap<StreamId, SeqRange>, meta: OperatorMeta) {
    let mut marks = inst.marks().clone();
    for (s, r) in covered {
        if let Some(m) = marks.get_mut(s) {
            *m = (*m).max(r.high);
        }
    }
    inst.set_marks(marks);
    inst.op.apply_meta(meta);
}

/// Installs an ordered chain of blobs.
pub fn load_state(inst: &mut QueryInstance, blobs: &[StateBlob]) -> Result<(), StateError> {
    let mut loader = StateLoader::default();
    for b in blobs {
        loader.install(inst, b)?;
    }
    loader.finish()
}

/// A base snapshot plus the increments shipped after it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub base: StateBlob,
    pub increments: Vec<StateBlob>,
    pub replicated_on: BTreeSet<NodeId>,
}

impl Checkpoint {
    pub fn new(base: StateBlob) -> Self {
        Checkpoint { base, increments: Vec::new(), replicated_on: BTreeSet::new() }
    }

    pub fn high_marks(&self) -> SeqMarks {
        self.increments.last().unwrap_or(&self.base).high_marks()
    }

    pub fn bytes(&self) -> u64 {
        self.base.bytes + self.increments.iter().map(|b| b.bytes).sum::<u64>()
    }
}

/// Tracks, per target node, what state a source has shipped there, so the
/// next shipment is exactly the missing suffix.
#[derive(Clone, Debug, Default)]
pub struct ReplicationLog {
    targets: BTreeMap<NodeId, Checkpoint>,
}

impl ReplicationLog {
    pub fn checkpoint(&self, target: NodeId) -> Option<&Checkpoint> {
        self.targets.get(&target)
    }

    /// Next replica blob for `target`: a full base the first time, an
    /// increment afterwards.
    pub fn next_replica(&mut self, inst: &QueryInstance, target: NodeId) -> StateBlob {
        match self.targets.get_mut(&target) {
            None => {
                let base = extract_state(inst);
                let mut cp = Checkpoint::new(base.clone());
                cp.replicated_on.insert(target);
                self.targets.insert(target, cp);
                base
            }
            Some(cp) => {
                let inc = extract_incremental(inst, Some(cp)).expect("replica marks never exceed live marks");
                cp.increments.push(inc.clone());
                inc
            }
        }
    }

    /// State `target` lacks: relative to its replica if one exists,
    /// otherwise everything.
    pub fn missing_state(&mut self, inst: &QueryInstance, target: NodeId, kind: BlobKind) -> StateBlob {
        let since = self.targets.get(&target).map(Checkpoint::high_marks).unwrap_or_default();
        let blob = extract_since(inst, &since, kind).expect("replica marks never exceed live marks");
        self.record(target, &blob);
        blob
    }

    /// Increment relative to the replica on `target`.
    pub fn increment_for(&mut self, inst: &QueryInstance, target: NodeId) -> Result<StateBlob, StateError> {
        let inc = extract_incremental(inst, self.targets.get(&target))?;
        self.record(target, &inc);
        Ok(inc)
    }

    fn record(&mut self, target: NodeId, blob: &StateBlob) {
        match self.targets.get_mut(&target) {
            Some(cp) => cp.increments.push(blob.clone()),
            None => {
                let mut cp = Checkpoint::new(blob.clone());
                cp.replicated_on.insert(target);
                self.targets.insert(target, cp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::SimTime;
    use crate::streamcore::OperatorSpec;

    const P: StreamId = StreamId(0);
    const A: StreamId = StreamId(1);

    fn spec() -> OperatorSpec {
        OperatorSpec::Join { person: P, auction: A, output: StreamId(2), output_payload_bytes: 16 }
    }

    fn feed(inst: &mut QueryInstance, from: u64, to: u64, payload: u32, keys: u64) {
        for seq in from..=to {
            let t = Tuple::new(A, seq % keys, SimTime::from_millis(seq), seq, payload);
            inst.process(&t).unwrap();
        }
    }

    #[test]
    fn full_blob_size_model() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 100_000, 1024, 1);
        let blob = extract_state(&inst);
        assert_eq!(blob.bytes, 64 + 100_000 * 1056);
        assert_eq!(blob.covered[&A], SeqRange { low: 1, high: 100_000 });
    }

    #[test]
    fn empty_state_is_header_only() {
        let inst = QueryInstance::new(QueryId(0), &spec());
        let blob = extract_state(&inst);
        assert_eq!(blob.bytes, BLOB_HEADER_BYTES);
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        load_state(&mut fresh, &[blob]).unwrap();
        assert_eq!(fresh, inst);
    }

    #[test]
    fn round_trip() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 500, 100, 7);
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        load_state(&mut fresh, &[extract_state(&inst)]).unwrap();
        assert_eq!(fresh.op.records(), inst.op.records());
        assert_eq!(fresh.marks(), inst.marks());
    }

    #[test]
    fn increment_after_base() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 1000, 1024, 3);
        let cp = Checkpoint::new(extract_state(&inst));
        feed(&mut inst, 1001, 1100, 1024, 3);
        let inc = extract_incremental(&inst, Some(&cp)).unwrap();
        assert_eq!(inc.records.len(), 100);
        assert_eq!(inc.covered[&A], SeqRange { low: 1001, high: 1100 });
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        load_state(&mut fresh, &[cp.base.clone(), inc]).unwrap();
        assert_eq!(fresh.op.records(), inst.op.records());
    }

    #[test]
    fn increment_without_base() {
        let inst = QueryInstance::new(QueryId(0), &spec());
        assert_eq!(extract_incremental(&inst, None), Err(StateError::NoBaseCheckpoint));
    }

    #[test]
    fn gap_and_overlap_detected() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 10, 8, 2);
        let base = extract_state(&inst);
        feed(&mut inst, 11, 20, 8, 2);
        let mut marks = SeqMarks::new();
        marks.insert(A, 12);
        let skipping = extract_since(&inst, &marks, BlobKind::Incremental).unwrap();
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        assert!(matches!(load_state(&mut fresh, &[base.clone(), skipping]), Err(StateError::Gap { .. })));
        marks.insert(A, 5);
        let overlapping = extract_since(&inst, &marks, BlobKind::Incremental).unwrap();
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        assert!(matches!(load_state(&mut fresh, &[base, overlapping]), Err(StateError::Overlap { .. })));
    }

    #[test]
    fn hundred_megabytes_in_ten_chunks() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 100_000, 968, u64::MAX);
        let full = extract_state(&inst);
        assert_eq!(full.bytes - BLOB_HEADER_BYTES, 100_000_000);
        let chunks = partition(&full, 10_000_000);
        assert_eq!(chunks.len(), 10);
        assert!(chunks.iter().all(|c| c.bytes - BLOB_HEADER_BYTES <= 10_000_000));
        let total: u64 = chunks.iter().map(|c| c.bytes).sum();
        assert_eq!(total, full.bytes + 9 * BLOB_HEADER_BYTES);
    }

    #[test]
    fn small_state_single_chunk() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 10, 8, 3);
        assert_eq!(partition_state(&inst, 1 << 20).len(), 1);
    }

    #[test]
    fn oversized_key_gets_its_own_chunk() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 100, 1000, 1);
        let chunks = partition_state(&inst, 10_000);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].bytes > 10_000);
    }

    #[test]
    fn chunks_in_reverse_order_equal_full_load() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 2000, 50, 97);
        let mut chunks = partition_state(&inst, 10_000);
        assert!(chunks.len() > 3);
        chunks.reverse();
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        load_state(&mut fresh, &chunks).unwrap();
        assert_eq!(fresh.op.records(), inst.op.records());
        assert_eq!(fresh.marks(), inst.marks());
    }

    #[test]
    fn missing_chunk_reported() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 2000, 50, 97);
        let chunks = partition_state(&inst, 10_000);
        let mut fresh = QueryInstance::new(QueryId(0), &spec());
        assert!(matches!(load_state(&mut fresh, &chunks[1..]), Err(StateError::IncompleteChunks { .. })));
    }

    #[test]
    fn second_replication_without_input_is_empty() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 10, 8, 2);
        let mut log = ReplicationLog::default();
        let base = log.next_replica(&inst, NodeId(3));
        assert_eq!(base.kind, BlobKind::Full);
        let inc = log.next_replica(&inst, NodeId(3));
        assert_eq!(inc.kind, BlobKind::Incremental);
        assert!(inc.records.is_empty());
        assert_eq!(inc.bytes, BLOB_HEADER_BYTES);
    }

    #[test]
    fn periodic_increment_size() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        let mut log = ReplicationLog::default();
        log.next_replica(&inst, NodeId(1));
        // 10 s at 1000 tuples/s, 1 kB payload.
        feed(&mut inst, 1, 10_000, 1024, 50);
        let inc = log.next_replica(&inst, NodeId(1));
        assert_eq!(inc.bytes, 64 + 10_000 * 1056);
    }

    #[test]
    fn missing_state_is_relative_to_replica() {
        let mut inst = QueryInstance::new(QueryId(0), &spec());
        feed(&mut inst, 1, 100, 8, 2);
        let mut log = ReplicationLog::default();
        log.next_replica(&inst, NodeId(1));
        feed(&mut inst, 101, 150, 8, 2);
        let imm = log.missing_state(&inst, NodeId(1), BlobKind::Immutable);
        assert_eq!(imm.records.len(), 50);
        feed(&mut inst, 151, 160, 8, 2);
        let inc = log.increment_for(&inst, NodeId(1)).unwrap();
        assert_eq!(inc.covered[&A], SeqRange { low: 151, high: 160 });
        let fresh_target = log.missing_state(&inst, NodeId(2), BlobKind::Immutable);
        assert_eq!(fresh_target.records.len(), 160);
    }
}
