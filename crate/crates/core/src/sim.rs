//! Deterministic discrete-event execution of one scenario.
//!
//! Time is integral milliseconds. Views are paced by fixed windows (one
//! round = one view): at each window boundary the harness forces every
//! replica whose view is still behind into the round's view, takes a
//! snapshot of the correct replicas first, and then drains the window's
//! events in (time, sequence) order. The synchronous variant may leave a
//! view early through its blame path; the boundary rule never moves a
//! replica backwards.
//!
//! Partitions gate deliveries at *delivery* time: a message delayed across a
//! boundary is dropped unless the new round's partition still connects
//! sender and recipient. Self-deliveries ignore partitions. Extra delays
//! from scenario rules are keyed by the round in which the message was sent
//! and stack on the base network delay.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec::Vec;

use crate::chain::{
    BlockDigest, BlockStore, ChainError, Message, MessageKind, ProcessId, ProtocolKind, Recipient,
    ViewNumber,
};
use crate::monitor::PartialSystemState;
use crate::replica::{Outputs, ReplicaEvent, ReplicaState, TimerKind};
use crate::scenario::Scenario;

pub type SimTime = u64;

/// One view window per protocol: the synchronous variant needs room for its
/// report wait, voting, commit timers and a possible blame round.
pub fn view_window(kind: ProtocolKind) -> SimTime {
    match kind {
        ProtocolKind::SyncHotStuff => 6 * crate::replica::DELTA_MS,
        _ => 100,
    }
}

/// Base one-hop delivery delay. The synchronous variant's schedule is driven
/// entirely by its Δ timers, so its base delay is zero.
pub fn base_delay(kind: ProtocolKind) -> SimTime {
    match kind {
        ProtocolKind::SyncHotStuff => 0,
        _ => 10,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TraceEntry {
    Delivered {
        time: SimTime,
        to: ProcessId,
        from: ProcessId,
        kind: MessageKind,
        view: ViewNumber,
        block: Option<BlockDigest>,
    },
    Replica {
        time: SimTime,
        id: ProcessId,
        event: ReplicaEvent,
    },
}

impl TraceEntry {
    pub fn time(&self) -> SimTime {
        match self {
            TraceEntry::Delivered { time, .. } | TraceEntry::Replica { time, .. } => *time,
        }
    }
}

/// Snapshot taken when a round's window closes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RoundBoundary {
    pub round: u32,
    pub time: SimTime,
    pub snapshot: PartialSystemState,
}

#[derive(Clone, Debug)]
pub struct ExecutionResult {
    pub scenario: Scenario,
    pub store: BlockStore,
    pub initial: PartialSystemState,
    pub boundaries: Vec<RoundBoundary>,
    pub trace: Vec<TraceEntry>,
    /// Times of every execution event on a correct replica, ascending.
    pub exec_times: Vec<SimTime>,
    pub final_state: PartialSystemState,
    pub duration: SimTime,
}

enum Item {
    Deliver { to: ProcessId, msg: Message },
    Timer { id: ProcessId, kind: TimerKind, set_view: ViewNumber },
}

struct Queued {
    time: SimTime,
    seq: u64,
    item: Item,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        // Reversed: BinaryHeap is a max-heap, we pop earliest first.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

pub struct Execution {
    scenario: Scenario,
    replicas: BTreeMap<ProcessId, ReplicaState>,
    instances: Vec<ProcessId>,
    store: BlockStore,
    queue: BinaryHeap<Queued>,
    seq: u64,
    now: SimTime,
    window: SimTime,
    base_delay: SimTime,
    next_round: u32,
    initial: PartialSystemState,
    boundaries: Vec<RoundBoundary>,
    trace: Vec<TraceEntry>,
    exec_times: Vec<SimTime>,
}

impl Execution {
    pub fn new(scenario: Scenario) -> Result<Execution, ChainError> {
        scenario.validate()?;
        let store = BlockStore::new();
        let genesis = store.genesis();
        let instances = scenario.instances();
        let replicas: BTreeMap<ProcessId, ReplicaState> = instances
            .iter()
            .map(|id| (*id, ReplicaState::new(*id, scenario.config, genesis)))
            .collect();
        let initial = PartialSystemState::initial(&scenario.correct_indices(), genesis);
        let window = view_window(scenario.config.kind);
        let base = base_delay(scenario.config.kind);
        Ok(Execution {
            scenario,
            replicas,
            instances,
            store,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            window,
            base_delay: base,
            next_round: 1,
            initial,
            boundaries: Vec::new(),
            trace: Vec::new(),
            exec_times: Vec::new(),
        })
    }

    pub fn initial_state(&self) -> &PartialSystemState {
        &self.initial
    }

    fn leader_of(&self, view: ViewNumber) -> u8 {
        let idx = (view.saturating_sub(1)) as usize;
        self.scenario
            .leaders
            .get(idx)
            .copied()
            .unwrap_or_else(|| *self.scenario.leaders.last().unwrap())
    }

    fn round_at(&self, time: SimTime) -> u32 {
        (time / self.window) as u32 + 1
    }

    fn push(&mut self, time: SimTime, item: Item) {
        self.seq += 1;
        self.queue.push(Queued { time, seq: self.seq, item });
    }

    fn send(&mut self, msg: Message) {
        let send_round = self.round_at(self.now);
        let recipients: Vec<ProcessId> = self
            .instances
            .iter()
            .copied()
            .filter(|r| match msg.recipient {
                Recipient::All => true,
                Recipient::Index(i) => r.index == i,
            })
            .collect();
        for to in recipients {
            let extra = self.scenario.delay_for(send_round, msg.sender.index, to.index, msg.kind);
            let at = self.now + self.base_delay + extra;
            self.push(at, Item::Deliver { to, msg: msg.clone() });
        }
    }

    fn apply(&mut self, id: ProcessId, out: Outputs) -> Result<(), ChainError> {
        let view = self.replicas[&id].view;
        for e in out.events {
            self.trace.push(TraceEntry::Replica { time: self.now, id, event: e });
            if matches!(e, ReplicaEvent::Executed(_)) && self.scenario.twin != Some(id.index) {
                self.exec_times.push(self.now);
            }
        }
        for (kind, delay) in out.timers {
            self.push(self.now + delay, Item::Timer { id, kind, set_view: view });
        }
        for msg in out.outbound {
            self.send(msg);
        }
        if let Some(v) = out.advance_view {
            if v > self.replicas[&id].view {
                let leader = self.leader_of(v);
                let next = self.replicas.get_mut(&id).unwrap().enter_view(v, leader, self.now);
                self.apply(id, next)?;
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> PartialSystemState {
        let map = self
            .scenario
            .correct_indices()
            .into_iter()
            .map(|i| (i, self.replicas[&ProcessId::single(i)].partial()))
            .collect();
        PartialSystemState::new(map)
    }

    /// Runs one round to its window boundary. Returns the boundary snapshot,
    /// or None once all rounds have run.
    pub fn run_round(&mut self) -> Result<Option<RoundBoundary>, ChainError> {
        if self.next_round > self.scenario.rounds {
            return Ok(None);
        }
        let round = self.next_round;
        let start = (round as SimTime - 1) * self.window;
        let end = round as SimTime * self.window;
        self.now = start;

        let ids: Vec<ProcessId> = self.instances.clone();
        for id in ids {
            if self.replicas[&id].view < round as ViewNumber {
                let leader = self.leader_of(round as ViewNumber);
                let out = self.replicas.get_mut(&id).unwrap().enter_view(
                    round as ViewNumber,
                    leader,
                    self.now,
                );
                self.apply(id, out)?;
            }
        }

        while self.queue.peek().is_some_and(|q| q.time < end) {
            let q = self.queue.pop().unwrap();
            self.now = q.time;
            match q.item {
                Item::Deliver { to, msg } => {
                    let round_now = self.round_at(self.now);
                    if to != msg.sender
                        && !self.scenario.partition_allows(round_now, msg.sender, to)
                    {
                        continue;
                    }
                    self.trace.push(TraceEntry::Delivered {
                        time: self.now,
                        to,
                        from: msg.sender,
                        kind: msg.kind,
                        view: msg.view,
                        block: msg.block,
                    });
                    let out =
                        self.replicas.get_mut(&to).unwrap().handle_message(&mut self.store, &msg, self.now)?;
                    self.apply(to, out)?;
                }
                Item::Timer { id, kind, set_view } => {
                    let out = self.replicas.get_mut(&id).unwrap().on_timer(
                        &mut self.store,
                        kind,
                        set_view,
                        self.now,
                    )?;
                    self.apply(id, out)?;
                }
            }
        }

        self.now = end;
        let boundary = RoundBoundary { round, time: end, snapshot: self.snapshot() };
        self.boundaries.push(boundary.clone());
        self.next_round += 1;
        Ok(Some(boundary))
    }

    pub fn run_to_completion(mut self) -> Result<ExecutionResult, ChainError> {
        while self.run_round()?.is_some() {}
        let final_state =
            self.boundaries.last().map(|b| b.snapshot.clone()).unwrap_or_else(|| self.initial.clone());
        let duration = self.scenario.rounds as SimTime * self.window;
        Ok(ExecutionResult {
            scenario: self.scenario,
            store: self.store,
            initial: self.initial,
            boundaries: self.boundaries,
            trace: self.trace,
            exec_times: self.exec_times,
            final_state,
            duration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{proposal_payload, Block, ProtocolConfig};
    use crate::monitor::{check_safety, classify_false_positive, is_hot};
    use crate::scenario::lock_split_fixture;
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn run(scenario: Scenario) -> ExecutionResult {
        Execution::new(scenario).unwrap().run_to_completion().unwrap()
    }

    /// Digest of the round-1 branch block in the lock-split fixture.
    fn fixture_blocks(store: &BlockStore) -> (BlockDigest, BlockDigest, BlockDigest) {
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0)).digest;
        let b2 = Block::child(&g, 2, proposal_payload(2, 2, 0)).digest;
        (genesis, b1, b2)
    }

    #[test]
    fn fixture_round_one_isolates_a_single_lock() {
        let result = run(lock_split_fixture());
        let (genesis, b1, _) = fixture_blocks(&result.store);
        let snap = &result.boundaries[0].snapshot;
        assert_eq!(snap.state_map()[&3].locked, b1);
        assert_eq!(snap.state_map()[&2].locked, genesis);
        assert_eq!(snap.state_map()[&4].locked, genesis);
        assert_eq!(snap.state_map()[&3].executed, genesis);
    }

    #[test]
    fn fixture_round_two_splits_locks_across_branches() {
        let result = run(lock_split_fixture());
        let (genesis, b1, b2) = fixture_blocks(&result.store);
        let snap = &result.boundaries[1].snapshot;
        assert_eq!(snap.state_map()[&3].locked, b1);
        assert_eq!(snap.state_map()[&2].locked, b2);
        assert_eq!(snap.state_map()[&4].locked, b2);
        // The second branch committed; the holdout did not execute.
        assert_eq!(snap.state_map()[&2].executed, b2);
        assert_eq!(snap.state_map()[&4].executed, b2);
        assert_eq!(snap.state_map()[&3].executed, genesis);
        assert!(result.store.conflicts(&b1, &b2).unwrap());
    }

    #[test]
    fn fixture_deadlocks_hot_from_round_three() {
        let result = run(lock_split_fixture());
        let cfg = result.scenario.config;
        for w in result.boundaries.windows(2).skip(1) {
            assert_eq!(w[0].snapshot, w[1].snapshot, "deadlock must be a self-loop");
        }
        for w in result.boundaries.windows(2).skip(1) {
            assert!(is_hot(&w[1].snapshot, &w[0].snapshot, &result.store, &cfg, false).unwrap());
        }
        // Hot, but not a safety violation, and not a false positive.
        assert_eq!(check_safety(&result.final_state, &result.store).unwrap(), None);
        assert!(!classify_false_positive(&result.final_state, &result.store).unwrap());
    }

    #[test]
    fn fixture_delayed_certificate_dies_at_the_boundary() {
        // The round-1 certificate announcement to replica 4 is delayed past
        // the boundary, and round 2 exiles its sender: it must never arrive.
        let result = run(lock_split_fixture());
        let p4: ProcessId = "4".parse().unwrap();
        let late = result.trace.iter().any(|e| {
            matches!(e, TraceEntry::Delivered { to, from, kind: MessageKind::QCAnnounce, view: 1, .. }
                if *to == p4 && from.index == 1)
        });
        assert!(!late, "delayed announce must be dropped by the new partition");
    }

    #[test]
    fn basic_hotstuff_recovers_on_the_fixture_schedule() {
        let mut scenario = lock_split_fixture();
        scenario.config = ProtocolConfig::new(4, 1, ProtocolKind::HotStuff).unwrap();
        let result = run(scenario);
        let cfg = result.scenario.config;

        // No snapshot pair is ever hot...
        let mut prev = &result.initial;
        for b in &result.boundaries {
            assert!(!is_hot(&b.snapshot, prev, &result.store, &cfg, false).unwrap());
            prev = &b.snapshot;
        }
        // ...and the majority partition commits a round after round.
        let snap = result.final_state.state_map();
        let exec = snap[&2].executed;
        assert_eq!(snap[&3].executed, exec);
        assert_eq!(snap[&4].executed, exec);
        assert_eq!(result.store.get(&exec).unwrap().height, 9);
        assert_eq!(check_safety(&result.final_state, &result.store).unwrap(), None);
    }

    fn happy_scenario(kind: ProtocolKind, n: u8, rounds: u32) -> Scenario {
        let all: BTreeSet<ProcessId> = (1..=n).map(ProcessId::single).collect();
        Scenario {
            config: ProtocolConfig::new(n, 1, kind).unwrap(),
            rounds,
            leaders: (0..rounds).map(|r| 1 + (r % n as u32) as u8).collect(),
            partitions: (0..rounds).map(|_| vec![all.clone()]).collect(),
            twin: None,
            delays: vec![],
            seed: 0,
        }
    }

    #[test]
    fn failure_free_timing_is_pinned() {
        // Two-phase: report, propose, vote, announce, vote, announce = 6
        // hops of 10 ms; execution lands at 60 within each 100 ms window.
        let result = run(happy_scenario(ProtocolKind::TwoPhaseHotStuff, 4, 3));
        assert_eq!(result.exec_times, vec![60, 60, 60, 60, 160, 160, 160, 160, 260, 260, 260, 260]);

        // Basic adds one vote/announce pair: 80 per window.
        let result = run(happy_scenario(ProtocolKind::HotStuff, 4, 3));
        assert_eq!(result.exec_times[..4], [80, 80, 80, 80]);
        assert_eq!(*result.exec_times.last().unwrap(), 280);

        // Synchronous: propose after 2Δ, commit 2Δ after voting.
        let result = run(happy_scenario(ProtocolKind::SyncHotStuff, 3, 3));
        assert_eq!(result.exec_times, vec![200, 200, 200, 500, 500, 500, 800, 800, 800]);
    }

    #[test]
    fn failure_free_runs_commit_one_block_per_round() {
        for kind in [ProtocolKind::HotStuff, ProtocolKind::TwoPhaseHotStuff] {
            let result = run(happy_scenario(kind, 4, 5));
            let exec = result.final_state.state_map()[&1].executed;
            assert_eq!(result.store.get(&exec).unwrap().height, 5);
            for p in result.final_state.state_map().values() {
                assert_eq!(p.executed, exec);
                assert_eq!(p.locked, exec);
            }
        }
        let result = run(happy_scenario(ProtocolKind::SyncHotStuff, 3, 5));
        let exec = result.final_state.state_map()[&1].executed;
        assert_eq!(result.store.get(&exec).unwrap().height, 5);
    }

    #[test]
    fn total_partition_stalls_everything() {
        let mut scenario = happy_scenario(ProtocolKind::TwoPhaseHotStuff, 4, 3);
        scenario.partitions = (0..3)
            .map(|_| (1..=4).map(|i| BTreeSet::from([ProcessId::single(i)])).collect())
            .collect();
        let result = run(scenario);
        assert!(result.exec_times.is_empty());
        assert_eq!(result.final_state, result.initial);
        assert_eq!(result.boundaries[0].snapshot, result.initial);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run(lock_split_fixture());
        let b = run(lock_split_fixture());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.boundaries, b.boundaries);
        assert_eq!(a.exec_times, b.exec_times);

        let mut sync = happy_scenario(ProtocolKind::SyncHotStuff, 3, 4);
        sync.twin = Some(1);
        sync.partitions = (0..4)
            .map(|_| {
                vec![
                    BTreeSet::from(["1A".parse().unwrap(), ProcessId::single(2)]),
                    BTreeSet::from(["1B".parse().unwrap(), ProcessId::single(3)]),
                ]
            })
            .collect();
        let a = run(sync.clone());
        let b = run(sync);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.boundaries, b.boundaries);
    }

    /// Asymmetric progress plus a twinned leader drives the synchronous
    /// variant into conflicting commits: the quorum size f+1 cannot bridge
    /// two sides that each hold a twin instance.
    #[test]
    fn sync_split_brain_violates_agreement() {
        let side_a: BTreeSet<ProcessId> = BTreeSet::from(["1A".parse().unwrap(), ProcessId::single(2)]);
        let side_b: BTreeSet<ProcessId> = BTreeSet::from(["1B".parse().unwrap(), ProcessId::single(3)]);
        let all: BTreeSet<ProcessId> = side_a.union(&side_b).copied().collect();
        let scenario = Scenario {
            config: ProtocolConfig::new(3, 1, ProtocolKind::SyncHotStuff).unwrap(),
            rounds: 3,
            leaders: vec![3, 2, 1],
            partitions: vec![
                vec![all],
                vec![side_a.clone(), side_b.clone()],
                vec![side_a, side_b],
            ],
            twin: Some(1),
            delays: vec![],
            seed: 0,
        };
        let result = run(scenario);
        assert_eq!(check_safety(&result.final_state, &result.store).unwrap(), Some((2, 3)));
        assert!(!classify_false_positive(&result.final_state, &result.store).unwrap());
        let e2 = result.final_state.state_map()[&2].executed;
        let e3 = result.final_state.state_map()[&3].executed;
        assert!(result.store.conflicts(&e2, &e3).unwrap());
    }
}
