//! Liveness and safety checkers over round-boundary snapshots.
//!
//! A snapshot reduces each correct replica to the triple
//! (prepared, locked, executed) block digests. A snapshot is *hot* when
//! (i) two correct replicas hold conflicting locks, (ii) no locked block
//! could still gather a quorum even if every correct replica not locked on a
//! conflicting block joined it, and (iii) nothing was executed since the
//! previous snapshot. The temperature checker counts consecutive hot
//! snapshots; the lasso checker looks for cycles of hot states in a graph
//! accumulated across executions.
//!
//! Graph vertices carry the lock conditions (i)+(ii) only: per-replica
//! executed heights never decrease inside an execution, so a cycle in the
//! accumulated graph cannot contain an execution-advancing edge and
//! condition (iii) holds on every cycle by construction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest as _, Sha256};

use crate::chain::{BlockDigest, BlockStore, ChainError, ProtocolConfig};
use crate::sim::SimTime;

/// Partial view of one replica: digests of its prepared, locked and last
/// executed blocks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PartialProcessState {
    pub prepared: BlockDigest,
    pub locked: BlockDigest,
    pub executed: BlockDigest,
}

/// 256-bit digest of a partial system state's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateHash(pub [u8; 32]);

impl StateHash {
    pub fn short_hex(&self) -> String {
        let mut s = String::with_capacity(16);
        for b in &self.0[..8] {
            let _ = fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
        }
        s
    }
}

impl fmt::Debug for StateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateHash({})", self.short_hex())
    }
}

impl fmt::Display for StateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.short_hex())
    }
}

/// Ordered map from correct replica index to its partial state, plus the
/// cached hash of the canonical encoding. Twin instances are excluded: the
/// snapshot describes the correct processes only.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PartialSystemState {
    state_map: BTreeMap<u8, PartialProcessState>,
    hash: StateHash,
}

impl PartialSystemState {
    pub fn new(state_map: BTreeMap<u8, PartialProcessState>) -> PartialSystemState {
        let mut h = Sha256::new();
        h.update([0x53u8]);
        for (idx, p) in &state_map {
            h.update([*idx]);
            h.update(p.prepared.as_bytes());
            h.update(p.locked.as_bytes());
            h.update(p.executed.as_bytes());
        }
        let hash = StateHash(h.finalize().into());
        PartialSystemState { state_map, hash }
    }

    /// The all-genesis state every execution starts from.
    pub fn initial(correct_indices: &[u8], genesis: BlockDigest) -> PartialSystemState {
        let p = PartialProcessState { prepared: genesis, locked: genesis, executed: genesis };
        PartialSystemState::new(correct_indices.iter().map(|i| (*i, p)).collect())
    }

    pub fn hash(&self) -> StateHash {
        self.hash
    }

    pub fn state_map(&self) -> &BTreeMap<u8, PartialProcessState> {
        &self.state_map
    }
}

/// Lock conditions (i) and (ii) of the hot-state definition. With
/// `credit_faulty_votes` the `f` faulty identities are added to every
/// block's hypothetical supporter count (an adversary-best-case variant;
/// the default matches the definition, which enlists correct processes
/// only).
pub fn hot_lock_conditions(
    s: &PartialSystemState,
    store: &BlockStore,
    config: &ProtocolConfig,
    credit_faulty_votes: bool,
) -> Result<bool, ChainError> {
    let locks: Vec<BlockDigest> = s.state_map.values().map(|p| p.locked).collect();

    // (i) at least one conflicting pair of locks among correct replicas.
    let mut conflicting_pair = false;
    'outer: for (i, a) in locks.iter().enumerate() {
        for b in &locks[i + 1..] {
            if store.conflicts(a, b)? {
                conflicting_pair = true;
                break 'outer;
            }
        }
    }
    if !conflicting_pair {
        return Ok(false);
    }

    // (ii) every locked block falls short of a quorum even after enlisting
    // all correct replicas whose own lock does not conflict with it.
    let quorum = config.quorum_size() as usize;
    let credit = if credit_faulty_votes { config.f as usize } else { 0 };
    let mut candidates: BTreeSet<BlockDigest> = BTreeSet::new();
    candidates.extend(locks.iter().copied());
    for b in &candidates {
        let mut supporters = 0usize;
        for lock in &locks {
            if !store.conflicts(lock, b)? {
                supporters += 1;
            }
        }
        if supporters + credit >= quorum {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Full hot-state predicate: lock conditions plus (iii), no execution
/// progress since the previous snapshot.
pub fn is_hot(
    s: &PartialSystemState,
    prev: &PartialSystemState,
    store: &BlockStore,
    config: &ProtocolConfig,
    credit_faulty_votes: bool,
) -> Result<bool, ChainError> {
    for (idx, p) in &s.state_map {
        let q = prev
            .state_map
            .get(idx)
            .ok_or(ChainError::Internal("snapshots cover different replica sets"))?;
        if p.executed != q.executed {
            return Ok(false);
        }
    }
    hot_lock_conditions(s, store, config, credit_faulty_votes)
}

/// Temperature counter: bumps on hot snapshots, resets on cold ones, and
/// reports a violation the moment the count reaches the threshold.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureState {
    pub threshold: u32,
    pub temp: u32,
}

impl TemperatureState {
    pub fn new(threshold: u32) -> TemperatureState {
        TemperatureState { threshold, temp: 0 }
    }

    /// Feeds one snapshot's hotness; returns true exactly when the counter
    /// hits the threshold.
    pub fn observe(&mut self, hot: bool) -> bool {
        if hot {
            self.temp += 1;
            self.temp == self.threshold
        } else {
            self.temp = 0;
            false
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum CheckerKind {
    Temperature,
    Lasso,
    TimeBound,
    Agreement,
}

impl CheckerKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckerKind::Temperature => "temperature",
            CheckerKind::Lasso => "lasso",
            CheckerKind::TimeBound => "time-bound",
            CheckerKind::Agreement => "agreement",
        }
    }
}

/// One checker finding. `liveness` is false for safety (agreement) findings.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Verdict {
    pub checker: CheckerKind,
    pub liveness: bool,
    /// 1-based round at which the checker fired, where applicable.
    pub round: Option<u32>,
    pub time: Option<SimTime>,
    /// Lasso witness: the cycle's state hashes.
    pub cycle: Vec<StateHash>,
}

/// State-transition graph shared by all executions of a campaign. States are
/// deduplicated by hash; `hot` caches the lock conditions per vertex.
#[derive(Clone, Debug)]
pub struct StateTransitionGraph {
    hot: BTreeMap<StateHash, bool>,
    out: BTreeMap<StateHash, BTreeSet<StateHash>>,
    edge_count: usize,
    witness_cap: usize,
}

impl Default for StateTransitionGraph {
    fn default() -> Self {
        StateTransitionGraph::new()
    }
}

impl StateTransitionGraph {
    pub fn new() -> StateTransitionGraph {
        StateTransitionGraph { hot: BTreeMap::new(), out: BTreeMap::new(), edge_count: 0, witness_cap: 64 }
    }

    pub fn with_witness_cap(cap: usize) -> StateTransitionGraph {
        let mut g = StateTransitionGraph::new();
        g.witness_cap = cap;
        g
    }

    pub fn state_count(&self) -> usize {
        self.hot.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn hot_count(&self) -> usize {
        self.hot.values().filter(|h| **h).count()
    }

    pub fn states(&self) -> impl Iterator<Item = (&StateHash, bool)> {
        self.hot.iter().map(|(h, hot)| (h, *hot))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&StateHash, &StateHash)> {
        self.out.iter().flat_map(|(a, outs)| outs.iter().map(move |b| (a, b)))
    }

    /// Inserts a vertex with a precomputed hot flag. First insertion wins;
    /// the flag of a known vertex never changes. This is the interchange
    /// surface for graphs assembled outside a simulation run.
    pub fn add_state(&mut self, hash: StateHash, hot: bool) {
        self.hot.entry(hash).or_insert(hot);
        self.out.entry(hash).or_default();
    }

    /// Adds the edge `a -> b`, inserting missing endpoints as non-hot.
    pub fn add_transition(&mut self, a: StateHash, b: StateHash) {
        self.add_state(a, false);
        self.add_state(b, false);
        if self.out.get_mut(&a).unwrap().insert(b) {
            self.edge_count += 1;
        }
    }

    fn insert_state(
        &mut self,
        s: &PartialSystemState,
        store: &BlockStore,
        config: &ProtocolConfig,
        credit_faulty_votes: bool,
    ) -> Result<(), ChainError> {
        if !self.hot.contains_key(&s.hash()) {
            let hot = hot_lock_conditions(s, store, config, credit_faulty_votes)?;
            self.hot.insert(s.hash(), hot);
            self.out.entry(s.hash()).or_default();
        }
        Ok(())
    }

    /// Records the observed transition `prev -> next`, inserting both states
    /// if new. Growth is monotone; re-inserting is idempotent.
    pub fn update(
        &mut self,
        prev: &PartialSystemState,
        next: &PartialSystemState,
        store: &BlockStore,
        config: &ProtocolConfig,
        credit_faulty_votes: bool,
    ) -> Result<(), ChainError> {
        self.insert_state(prev, store, config, credit_faulty_votes)?;
        self.insert_state(next, store, config, credit_faulty_votes)?;
        if self.out.get_mut(&prev.hash()).unwrap().insert(next.hash()) {
            self.edge_count += 1;
        }
        Ok(())
    }

    /// Finds cycles consisting entirely of hot states. Returns one verdict
    /// per elementary cycle found (deduplicated by vertex set), bounded by
    /// the witness cap; the result is non-empty iff a hot cycle exists.
    pub fn find_hot_lassos(&self) -> Vec<Verdict> {
        let verts: Vec<StateHash> =
            self.hot.iter().filter(|(_, h)| **h).map(|(v, _)| *v).collect();
        let index: BTreeMap<StateHash, usize> =
            verts.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut adj: Vec<Vec<usize>> = alloc::vec![Vec::new(); verts.len()];
        for (i, v) in verts.iter().enumerate() {
            if let Some(outs) = self.out.get(v) {
                for w in outs {
                    if let Some(&j) = index.get(w) {
                        adj[i].push(j);
                    }
                }
            }
        }

        let mut seen_sets: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut cycles: Vec<Vec<usize>> = Vec::new();
        for scc in strongly_connected_components(&adj) {
            let trivial = scc.len() == 1 && !adj[scc[0]].contains(&scc[0]);
            if trivial {
                continue;
            }
            enumerate_cycles(&adj, &scc, self.witness_cap, &mut seen_sets, &mut cycles);
            if cycles.len() >= self.witness_cap {
                break;
            }
        }

        cycles
            .into_iter()
            .map(|cycle| Verdict {
                checker: CheckerKind::Lasso,
                liveness: true,
                round: None,
                time: None,
                cycle: cycle.into_iter().map(|i| verts[i]).collect(),
            })
            .collect()
    }
}

/// Iterative Tarjan over an adjacency-list graph.
fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSET: usize = usize::MAX;
    let n = adj.len();
    let mut index = alloc::vec![UNSET; n];
    let mut lowlink = alloc::vec![0usize; n];
    let mut on_stack = alloc::vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut sccs: Vec<Vec<usize>> = Vec::new();

    for root in 0..n {
        if index[root] != UNSET {
            continue;
        }
        // Frame: (vertex, next out-edge position).
        let mut frames: Vec<(usize, usize)> = alloc::vec![(root, 0)];
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            if *pos < adj[v].len() {
                let w = adj[v][*pos];
                *pos += 1;
                if index[w] == UNSET {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                frames.pop();
                if let Some(&mut (parent, _)) = frames.last_mut() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    let mut scc = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        scc.push(w);
                        if w == v {
                            break;
                        }
                    }
                    scc.sort_unstable();
                    sccs.push(scc);
                }
            }
        }
    }
    sccs
}

/// Enumerates elementary cycles inside one SCC: for each start vertex (in
/// ascending order) it walks simple paths through vertices >= start, so each
/// cycle is reported once, rooted at its minimal vertex. Stops at the cap.
fn enumerate_cycles(
    adj: &[Vec<usize>],
    scc: &[usize],
    cap: usize,
    seen_sets: &mut BTreeSet<Vec<usize>>,
    cycles: &mut Vec<Vec<usize>>,
) {
    let members: BTreeSet<usize> = scc.iter().copied().collect();
    for &start in scc {
        if cycles.len() >= cap {
            return;
        }
        // Frame: (vertex, next out-edge position). `in_path` marks the stack.
        let mut frames: Vec<(usize, usize)> = alloc::vec![(start, 0)];
        let mut in_path: BTreeSet<usize> = BTreeSet::new();
        in_path.insert(start);
        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            if *pos < adj[v].len() && cycles.len() < cap {
                let w = adj[v][*pos];
                *pos += 1;
                if w == start {
                    let mut cycle: Vec<usize> = frames.iter().map(|(u, _)| *u).collect();
                    let mut key = cycle.clone();
                    key.sort_unstable();
                    if seen_sets.insert(key) {
                        cycles.push(core::mem::take(&mut cycle));
                    }
                } else if w > start && members.contains(&w) && !in_path.contains(&w) {
                    in_path.insert(w);
                    frames.push((w, 0));
                }
            } else {
                in_path.remove(&v);
                frames.pop();
            }
        }
    }
}

/// Time-bound baseline: a violation exists iff some window of `bound`
/// simulated milliseconds inside `[0, duration]` contains no new execution
/// event. `exec_times` must be sorted ascending. Returns the end of the
/// first such window.
pub fn time_bound_check(exec_times: &[SimTime], duration: SimTime, bound: SimTime) -> Option<SimTime> {
    let mut prev = 0;
    for &t in exec_times {
        if t.saturating_sub(prev) > bound {
            return Some(prev + bound);
        }
        prev = t;
    }
    if duration.saturating_sub(prev) > bound {
        return Some(prev + bound);
    }
    None
}

/// Agreement check: some pair of correct replicas executed conflicting
/// blocks. Executed chains are ancestor-closed, so comparing the latest
/// executed digests pairwise is equivalent to comparing at every height.
pub fn check_safety(
    final_state: &PartialSystemState,
    store: &BlockStore,
) -> Result<Option<(u8, u8)>, ChainError> {
    let execs: Vec<(u8, BlockDigest)> =
        final_state.state_map().iter().map(|(i, p)| (*i, p.executed)).collect();
    for (i, (pi, a)) in execs.iter().enumerate() {
        for (pj, b) in &execs[i + 1..] {
            if store.conflicts(a, b)? {
                return Ok(Some((*pi, *pj)));
            }
        }
    }
    Ok(None)
}

/// A flagged execution is a false positive when the correct replicas' final
/// locks contain no conflicting pair (every pair lies on one chain).
pub fn classify_false_positive(
    final_state: &PartialSystemState,
    store: &BlockStore,
) -> Result<bool, ChainError> {
    let locks: Vec<BlockDigest> = final_state.state_map().values().map(|p| p.locked).collect();
    for (i, a) in locks.iter().enumerate() {
        for b in &locks[i + 1..] {
            if store.conflicts(a, b)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
