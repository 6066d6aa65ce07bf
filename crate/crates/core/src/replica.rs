//! Per-replica protocol state machines.
//!
//! Two families share the message vocabulary. The HotStuff family (basic
//! three-phase and the two-phase variant) is leader-relayed: replicas report
//! their prepared block to the view's leader, the leader proposes once it
//! holds a quorum of identical reports, votes flow back to the leader, and
//! formed certificates are broadcast as announcements. The synchronous
//! variant is timer-driven: the leader waits 2Δ for lock reports before
//! proposing, votes are broadcast and every replica assembles certificates
//! itself, commits happen 2Δ after voting unless a conflicting block was
//! observed, and a quorum of blames quits the view.
//!
//! View pacing is external: the caller advances replicas with `enter_view`,
//! schedules returned timers, and routes outbound messages. Replicas never
//! advance their own view except by requesting it (`advance_view`) after a
//! blame-quorum view change.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::chain::{
    proposal_payload, Block, BlockDigest, BlockStore, ChainError, Message, MessageKind, Phase,
    ProcessId, ProtocolConfig, ProtocolKind, QuorumCertificate, Recipient, Vote, ViewNumber,
};
use crate::sim::SimTime;

/// Synchrony bound for the synchronous variant, in simulated milliseconds.
pub const DELTA_MS: SimTime = 50;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TimerKind {
    /// No progress for 3Δ: broadcast a blame.
    BlameTimeout,
    /// 2Δ after voting: execute unless the view saw a conflicting block.
    CommitTimeout(BlockDigest),
    /// 2Δ after quitting a view: enter the next one.
    ViewChangeWait,
    /// 2Δ after the leader enters a view: propose over the best lock.
    LeaderProposeWait,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReplicaEvent {
    EnteredView(ViewNumber),
    Prepared(BlockDigest),
    Locked(BlockDigest),
    Executed(BlockDigest),
    BlameBroadcast(ViewNumber),
    QuitView(ViewNumber),
}

/// Everything a replica wants done after one step: messages to send, trace
/// events, timers to schedule (relative to now), and an optional view jump.
#[derive(Default, Debug)]
pub struct Outputs {
    pub outbound: Vec<Message>,
    pub events: Vec<ReplicaEvent>,
    pub timers: Vec<(TimerKind, SimTime)>,
    pub advance_view: Option<ViewNumber>,
}

impl Outputs {
    fn merge(&mut self, other: Outputs) {
        self.outbound.extend(other.outbound);
        self.events.extend(other.events);
        self.timers.extend(other.timers);
        if other.advance_view.is_some() {
            self.advance_view = other.advance_view;
        }
    }
}

pub struct ReplicaState {
    pub id: ProcessId,
    pub config: ProtocolConfig,
    pub view: ViewNumber,
    pub leader: u8,
    pub prepared: BlockDigest,
    pub prepared_qc: QuorumCertificate,
    pub locked: BlockDigest,
    pub locked_qc: QuorumCertificate,
    pub executed: BlockDigest,

    // Leader bookkeeping, cleared each view.
    reports: BTreeMap<u8, BlockDigest>,
    report_qcs: BTreeMap<BlockDigest, QuorumCertificate>,
    proposed: bool,
    votes: BTreeMap<(BlockDigest, Phase), BTreeSet<u8>>,
    formed: BTreeSet<(BlockDigest, Phase)>,

    // Voter bookkeeping. `voted` persists across views: certificate adoption
    // is gated on having voted for the block at the matching phase.
    voted: BTreeMap<(ViewNumber, Phase), BlockDigest>,

    // Synchronous-variant bookkeeping, cleared each view.
    seen_proposals: BTreeSet<BlockDigest>,
    blames: BTreeSet<u8>,
    blamed: bool,
    quit: bool,
    blame_deadline: SimTime,
}

impl ReplicaState {
    pub fn new(id: ProcessId, config: ProtocolConfig, genesis: BlockDigest) -> ReplicaState {
        ReplicaState {
            id,
            config,
            view: 0,
            leader: 0,
            prepared: genesis,
            prepared_qc: QuorumCertificate::genesis(genesis),
            locked: genesis,
            locked_qc: QuorumCertificate::genesis(genesis),
            executed: genesis,
            reports: BTreeMap::new(),
            report_qcs: BTreeMap::new(),
            proposed: false,
            votes: BTreeMap::new(),
            formed: BTreeSet::new(),
            voted: BTreeMap::new(),
            seen_proposals: BTreeSet::new(),
            blames: BTreeSet::new(),
            blamed: false,
            quit: false,
            blame_deadline: 0,
        }
    }

    fn is_sync(&self) -> bool {
        self.config.kind == ProtocolKind::SyncHotStuff
    }

    pub fn enter_view(&mut self, view: ViewNumber, leader: u8, now: SimTime) -> Outputs {
        self.view = view;
        self.leader = leader;
        self.reports.clear();
        self.report_qcs.clear();
        self.proposed = false;
        self.votes.clear();
        self.formed.clear();
        self.seen_proposals.clear();
        self.blames.clear();
        self.blamed = false;
        self.quit = false;

        let mut out = Outputs::default();
        out.events.push(ReplicaEvent::EnteredView(view));
        if self.is_sync() {
            // Report the current lock to the leader, arm the blame timer,
            // and (as leader) wait 2Δ for reports before proposing.
            out.outbound.push(Message {
                kind: MessageKind::NewView,
                sender: self.id,
                recipient: Recipient::Index(leader),
                view,
                block: Some(self.locked),
                qc: Some(self.locked_qc.clone()),
            });
            self.blame_deadline = now + 3 * DELTA_MS;
            out.timers.push((TimerKind::BlameTimeout, 3 * DELTA_MS));
            if self.id.index == leader {
                out.timers.push((TimerKind::LeaderProposeWait, 2 * DELTA_MS));
            }
        } else {
            out.outbound.push(Message {
                kind: MessageKind::NewView,
                sender: self.id,
                recipient: Recipient::Index(leader),
                view,
                block: Some(self.prepared),
                qc: Some(self.prepared_qc.clone()),
            });
        }
        out
    }

    pub fn handle_message(
        &mut self,
        store: &mut BlockStore,
        msg: &Message,
        now: SimTime,
    ) -> Result<Outputs, ChainError> {
        if self.is_sync() {
            self.sync_handle(store, msg, now)
        } else {
            self.hs_handle(store, msg)
        }
    }

    pub fn on_timer(
        &mut self,
        store: &mut BlockStore,
        kind: TimerKind,
        set_view: ViewNumber,
        now: SimTime,
    ) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        if !self.is_sync() || set_view != self.view {
            return Ok(out);
        }
        match kind {
            TimerKind::BlameTimeout => {
                // Voting re-arms the deadline; a stale timer fires early.
                if now >= self.blame_deadline && !self.quit {
                    out.merge(self.sync_blame());
                }
            }
            TimerKind::CommitTimeout(digest) => {
                if !self.quit && !self.seen_proposals.iter().any(|d| *d != digest) {
                    out.merge(self.execute_up_to(store, &digest)?);
                }
            }
            TimerKind::ViewChangeWait => {
                out.advance_view = Some(self.view + 1);
            }
            TimerKind::LeaderProposeWait => {
                if !self.quit && !self.proposed && self.id.index == self.leader {
                    self.proposed = true;
                    let parent = store.get(&self.locked)?.clone();
                    let block =
                        Block::child(&parent, self.view, proposal_payload(self.id.index, self.view, 0));
                    let digest = block.digest;
                    store.insert(block)?;
                    out.outbound.push(Message {
                        kind: MessageKind::Propose,
                        sender: self.id,
                        recipient: Recipient::All,
                        view: self.view,
                        block: Some(digest),
                        qc: Some(self.locked_qc.clone()),
                    });
                }
            }
        }
        Ok(out)
    }

    /// The replica's contribution to a system snapshot.
    pub fn partial(&self) -> crate::monitor::PartialProcessState {
        crate::monitor::PartialProcessState {
            prepared: self.prepared,
            locked: self.locked,
            executed: self.executed,
        }
    }

    /// Executes everything from the current executed block (exclusive) up the
    /// chain to `target`. Targets that do not extend the executed chain are
    /// dropped: per-replica execution is monotone along one chain.
    fn execute_up_to(
        &mut self,
        store: &BlockStore,
        target: &BlockDigest,
    ) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        if *target != self.executed && store.extends(target, &self.executed)? {
            for d in store.path_between(&self.executed, target)? {
                out.events.push(ReplicaEvent::Executed(d));
            }
            self.executed = *target;
        }
        Ok(out)
    }

    // --- HotStuff family (leader-relayed phases) ---

    fn hs_phases(&self) -> &'static [Phase] {
        match self.config.kind {
            ProtocolKind::HotStuff => &[Phase::Prepare, Phase::PreCommit, Phase::Commit],
            ProtocolKind::TwoPhaseHotStuff => &[Phase::Prepare, Phase::Commit],
            ProtocolKind::SyncHotStuff => &[],
        }
    }

    fn hs_vote_phase(&self, kind: MessageKind) -> Option<Phase> {
        let phase = match kind {
            MessageKind::VotePrepare => Phase::Prepare,
            MessageKind::VotePreCommit => Phase::PreCommit,
            MessageKind::VoteCommit => Phase::Commit,
            _ => return None,
        };
        self.hs_phases().contains(&phase).then_some(phase)
    }

    fn hs_handle(&mut self, store: &mut BlockStore, msg: &Message) -> Result<Outputs, ChainError> {
        // Certificates act at any view; everything else is view-locked.
        if msg.kind == MessageKind::QCAnnounce {
            return self.hs_on_qc(store, msg);
        }
        if msg.view != self.view {
            return Ok(Outputs::default());
        }
        match msg.kind {
            MessageKind::NewView => self.hs_on_report(store, msg),
            MessageKind::Propose => self.hs_on_propose(store, msg),
            MessageKind::VotePrepare | MessageKind::VotePreCommit | MessageKind::VoteCommit => {
                self.hs_on_vote(msg)
            }
            _ => Ok(Outputs::default()),
        }
    }

    fn hs_on_report(&mut self, store: &mut BlockStore, msg: &Message) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let (Some(block), Some(qc)) = (msg.block, &msg.qc) else {
            return Ok(out);
        };
        self.reports.entry(msg.sender.index).or_insert(block);
        self.report_qcs.entry(block).or_insert_with(|| qc.clone());

        // Propose only once a quorum reports the same prepared block.
        if self.proposed {
            return Ok(out);
        }
        let quorum = self.config.quorum_size() as usize;
        let mut tally: BTreeMap<BlockDigest, usize> = BTreeMap::new();
        for d in self.reports.values() {
            *tally.entry(*d).or_insert(0) += 1;
        }
        let Some((parent_digest, _)) = tally.iter().find(|(_, c)| **c >= quorum) else {
            return Ok(out);
        };
        self.proposed = true;
        let parent = store.get(parent_digest)?.clone();
        let justify = self.report_qcs.get(parent_digest).cloned().ok_or(ChainError::Internal(
            "report tally without matching certificate",
        ))?;
        let block = Block::child(&parent, self.view, proposal_payload(self.id.index, self.view, 0));
        let digest = block.digest;
        store.insert(block)?;
        out.outbound.push(Message {
            kind: MessageKind::Propose,
            sender: self.id,
            recipient: Recipient::All,
            view: self.view,
            block: Some(digest),
            qc: Some(justify),
        });
        Ok(out)
    }

    fn hs_on_propose(&mut self, store: &mut BlockStore, msg: &Message) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let (Some(digest), Some(justify)) = (msg.block, &msg.qc) else {
            return Ok(out);
        };
        if msg.sender.index != self.leader || self.voted.contains_key(&(self.view, self.hs_phases()[0]))
        {
            return Ok(out);
        }
        let block = store.get(&digest)?;
        if block.view != self.view || block.parent != justify.block {
            return Ok(out);
        }
        let safe = store.extends(&digest, &self.locked)? || justify.view > self.locked_qc.view;
        if !safe {
            return Ok(out);
        }
        let phase = self.hs_phases()[0];
        self.voted.insert((self.view, phase), digest);
        out.outbound.push(Message {
            kind: MessageKind::VotePrepare,
            sender: self.id,
            recipient: Recipient::Index(self.leader),
            view: self.view,
            block: Some(digest),
            qc: None,
        });
        Ok(out)
    }

    fn hs_on_vote(&mut self, msg: &Message) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let (Some(digest), Some(phase)) = (msg.block, self.hs_vote_phase(msg.kind)) else {
            return Ok(out);
        };
        self.votes.entry((digest, phase)).or_default().insert(msg.sender.index);
        let signers = &self.votes[&(digest, phase)];
        if signers.len() < self.config.quorum_size() as usize
            || self.formed.contains(&(digest, phase))
        {
            return Ok(out);
        }
        self.formed.insert((digest, phase));
        let votes: Vec<Vote> = signers
            .iter()
            .map(|i| Vote {
                block: digest,
                view: self.view,
                phase,
                signer: ProcessId::single(*i),
            })
            .collect();
        let qc = crate::chain::form_qc(&votes, &self.config)?
            .ok_or(ChainError::Internal("quorum tally below quorum"))?;
        out.outbound.push(Message {
            kind: MessageKind::QCAnnounce,
            sender: self.id,
            recipient: Recipient::All,
            view: self.view,
            block: Some(digest),
            qc: Some(qc),
        });
        Ok(out)
    }

    /// Certificate handling. Adoption is gated on having voted for the
    /// certified block at the matching phase (in whatever view it was
    /// formed); phase progression additionally requires the certificate to
    /// belong to the current view.
    fn hs_on_qc(&mut self, store: &mut BlockStore, msg: &Message) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let Some(qc) = &msg.qc else {
            return Ok(out);
        };
        if !self.hs_phases().contains(&qc.phase)
            || self.voted.get(&(qc.view, qc.phase)) != Some(&qc.block)
        {
            return Ok(out);
        }

        let lock_phase = if self.config.kind == ProtocolKind::HotStuff {
            Phase::PreCommit
        } else {
            Phase::Prepare
        };
        if qc.phase == Phase::Prepare && qc.view > self.prepared_qc.view {
            self.prepared = qc.block;
            self.prepared_qc = qc.clone();
            out.events.push(ReplicaEvent::Prepared(qc.block));
        }
        if qc.phase == lock_phase && qc.view > self.locked_qc.view {
            self.locked = qc.block;
            self.locked_qc = qc.clone();
            out.events.push(ReplicaEvent::Locked(qc.block));
        }
        if qc.phase == Phase::Commit {
            out.merge(self.execute_up_to(store, &qc.block)?);
        }

        if qc.view == self.view {
            let phases = self.hs_phases();
            let pos = phases.iter().position(|p| *p == qc.phase).unwrap();
            if let Some(next) = phases.get(pos + 1) {
                if !self.voted.contains_key(&(self.view, *next)) {
                    self.voted.insert((self.view, *next), qc.block);
                    let kind = match next {
                        Phase::PreCommit => MessageKind::VotePreCommit,
                        _ => MessageKind::VoteCommit,
                    };
                    out.outbound.push(Message {
                        kind,
                        sender: self.id,
                        recipient: Recipient::Index(self.leader),
                        view: self.view,
                        block: Some(qc.block),
                        qc: None,
                    });
                }
            }
        }
        Ok(out)
    }

    // --- Synchronous variant (timer-driven, broadcast votes) ---

    fn sync_handle(
        &mut self,
        store: &mut BlockStore,
        msg: &Message,
        now: SimTime,
    ) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        // Locks follow any newer certificate unconditionally, even one
        // carried by an otherwise stale message.
        if let Some(qc) = &msg.qc {
            if qc.phase == Phase::Generic {
                out.merge(self.sync_adopt_lock(qc));
            }
        }
        if msg.view != self.view || self.quit {
            return Ok(out);
        }
        match msg.kind {
            MessageKind::Propose => out.merge(self.sync_on_propose(store, msg, now)?),
            MessageKind::VotePrepare => out.merge(self.sync_on_vote(msg)?),
            MessageKind::Blame => out.merge(self.sync_add_blame(msg.sender.index)),
            MessageKind::BlameForward => out.merge(self.sync_quit()),
            _ => {}
        }
        Ok(out)
    }

    fn sync_adopt_lock(&mut self, qc: &QuorumCertificate) -> Outputs {
        let mut out = Outputs::default();
        if qc.view > self.locked_qc.view {
            self.locked = qc.block;
            self.locked_qc = qc.clone();
            self.prepared = qc.block;
            self.prepared_qc = qc.clone();
            out.events.push(ReplicaEvent::Locked(qc.block));
        }
        out
    }

    fn sync_on_propose(
        &mut self,
        store: &mut BlockStore,
        msg: &Message,
        now: SimTime,
    ) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let (Some(digest), Some(justify)) = (msg.block, &msg.qc) else {
            return Ok(out);
        };
        if msg.sender.index != self.leader {
            return Ok(out);
        }
        let block = store.get(&digest)?;
        if block.view != self.view || block.parent != justify.block {
            return Ok(out);
        }
        // Two distinct proposals in one view are leader equivocation: blame,
        // and poison this view's commit timers via the seen set.
        self.seen_proposals.insert(digest);
        if self.seen_proposals.len() > 1 {
            out.merge(self.sync_blame());
            return Ok(out);
        }
        if !store.extends(&digest, &self.locked)? {
            out.merge(self.sync_blame());
            return Ok(out);
        }
        if self.voted.contains_key(&(self.view, Phase::Generic)) {
            return Ok(out);
        }
        self.voted.insert((self.view, Phase::Generic), digest);
        self.blame_deadline = now + 3 * DELTA_MS;
        out.timers.push((TimerKind::BlameTimeout, 3 * DELTA_MS));
        out.timers.push((TimerKind::CommitTimeout(digest), 2 * DELTA_MS));
        out.outbound.push(Message {
            kind: MessageKind::VotePrepare,
            sender: self.id,
            recipient: Recipient::All,
            view: self.view,
            block: Some(digest),
            qc: None,
        });
        Ok(out)
    }

    fn sync_on_vote(&mut self, msg: &Message) -> Result<Outputs, ChainError> {
        let mut out = Outputs::default();
        let Some(digest) = msg.block else {
            return Ok(out);
        };
        self.votes.entry((digest, Phase::Generic)).or_default().insert(msg.sender.index);
        let signers = &self.votes[&(digest, Phase::Generic)];
        if signers.len() < self.config.quorum_size() as usize
            || self.formed.contains(&(digest, Phase::Generic))
        {
            return Ok(out);
        }
        self.formed.insert((digest, Phase::Generic));
        let votes: Vec<Vote> = signers
            .iter()
            .map(|i| Vote {
                block: digest,
                view: self.view,
                phase: Phase::Generic,
                signer: ProcessId::single(*i),
            })
            .collect();
        let qc = crate::chain::form_qc(&votes, &self.config)?
            .ok_or(ChainError::Internal("quorum tally below quorum"))?;
        out.merge(self.sync_adopt_lock(&qc));
        Ok(out)
    }

    fn sync_blame(&mut self) -> Outputs {
        let mut out = Outputs::default();
        if self.blamed {
            return out;
        }
        self.blamed = true;
        out.events.push(ReplicaEvent::BlameBroadcast(self.view));
        out.outbound.push(Message {
            kind: MessageKind::Blame,
            sender: self.id,
            recipient: Recipient::All,
            view: self.view,
            block: None,
            qc: None,
        });
        out.merge(self.sync_add_blame(self.id.index));
        out
    }

    fn sync_add_blame(&mut self, index: u8) -> Outputs {
        self.blames.insert(index);
        if self.blames.len() >= (self.config.f + 1) as usize {
            self.sync_quit()
        } else {
            Outputs::default()
        }
    }

    /// Quits the current view: forward the blame evidence, stop
    /// participating, and enter the next view after 2Δ.
    fn sync_quit(&mut self) -> Outputs {
        let mut out = Outputs::default();
        if self.quit {
            return out;
        }
        self.quit = true;
        out.events.push(ReplicaEvent::QuitView(self.view));
        out.outbound.push(Message {
            kind: MessageKind::BlameForward,
            sender: self.id,
            recipient: Recipient::All,
            view: self.view,
            block: None,
            qc: None,
        });
        out.timers.push((TimerKind::ViewChangeWait, 2 * DELTA_MS));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::TwinTag;

    fn hs_config(kind: ProtocolKind) -> ProtocolConfig {
        ProtocolConfig::new(4, 1, kind).unwrap()
    }

    fn msg(
        kind: MessageKind,
        sender: ProcessId,
        view: ViewNumber,
        block: Option<BlockDigest>,
        qc: Option<QuorumCertificate>,
    ) -> Message {
        Message { kind, sender, recipient: Recipient::All, view, block, qc }
    }

    fn qc(block: BlockDigest, view: ViewNumber, phase: Phase, signers: &[u8]) -> QuorumCertificate {
        QuorumCertificate { block, view, phase, signers: signers.iter().copied().collect() }
    }

    /// Fan messages among replicas (no partitions, no delays) until quiet.
    fn pump(
        replicas: &mut BTreeMap<ProcessId, ReplicaState>,
        store: &mut BlockStore,
        mut queue: Vec<Message>,
    ) -> Vec<(ProcessId, ReplicaEvent)> {
        let mut events = Vec::new();
        while !queue.is_empty() {
            let mut next = Vec::new();
            for m in queue {
                let targets: Vec<ProcessId> = replicas
                    .keys()
                    .copied()
                    .filter(|id| match m.recipient {
                        Recipient::All => true,
                        Recipient::Index(i) => id.index == i,
                    })
                    .collect();
                for id in targets {
                    let out = replicas.get_mut(&id).unwrap().handle_message(store, &m, 0).unwrap();
                    next.extend(out.outbound);
                    events.extend(out.events.into_iter().map(|e| (id, e)));
                }
            }
            queue = next;
        }
        events
    }

    fn hs_world(kind: ProtocolKind) -> (BTreeMap<ProcessId, ReplicaState>, BlockStore, Vec<Message>) {
        let store = BlockStore::new();
        let genesis = store.genesis();
        let mut replicas = BTreeMap::new();
        let mut initial = Vec::new();
        for i in 1..=4 {
            let id = ProcessId::single(i);
            let mut r = ReplicaState::new(id, hs_config(kind), genesis);
            initial.extend(r.enter_view(1, 1, 0).outbound);
            replicas.insert(id, r);
        }
        (replicas, store, initial)
    }

    #[test]
    fn basic_view_runs_all_three_phases() {
        let (mut replicas, mut store, initial) = hs_world(ProtocolKind::HotStuff);
        let events = pump(&mut replicas, &mut store, initial);
        let executed: Vec<ProcessId> = events
            .iter()
            .filter_map(|(id, e)| matches!(e, ReplicaEvent::Executed(_)).then_some(*id))
            .collect();
        assert_eq!(executed.len(), 4);
        let r = &replicas[&ProcessId::single(2)];
        assert_eq!(r.prepared, r.locked);
        assert_eq!(r.locked, r.executed);
        assert_ne!(r.executed, store.genesis());
        assert_eq!(store.get(&r.executed).unwrap().view, 1);
    }

    #[test]
    fn two_phase_locks_on_first_certificate() {
        let (mut replicas, mut store, initial) = hs_world(ProtocolKind::TwoPhaseHotStuff);
        // Run only up to the first certificate announcement: reports,
        // proposal, prepare votes, then one announce round.
        let mut queue = initial;
        let mut announced = Vec::new();
        for _ in 0..4 {
            let mut next = Vec::new();
            for m in core::mem::take(&mut queue) {
                if m.kind == MessageKind::QCAnnounce {
                    announced.push(m);
                    continue;
                }
                let targets: Vec<ProcessId> = replicas
                    .keys()
                    .copied()
                    .filter(|id| match m.recipient {
                        Recipient::All => true,
                        Recipient::Index(i) => id.index == i,
                    })
                    .collect();
                for id in targets {
                    let out = replicas.get_mut(&id).unwrap().handle_message(&mut store, &m, 0).unwrap();
                    next.extend(out.outbound);
                }
            }
            queue = next;
        }
        assert_eq!(announced.len(), 1);
        let prepare_qc = announced[0].qc.clone().unwrap();
        assert_eq!(prepare_qc.phase, Phase::Prepare);

        // Delivering the prepare certificate locks immediately in the
        // two-phase variant.
        let voter = replicas.get_mut(&ProcessId::single(3)).unwrap();
        let out = voter.handle_message(&mut store, &announced[0], 0).unwrap();
        assert_eq!(voter.locked, prepare_qc.block);
        assert!(out.events.contains(&ReplicaEvent::Locked(prepare_qc.block)));
        // And the follow-up vote is a commit vote.
        assert_eq!(out.outbound.len(), 1);
        assert_eq!(out.outbound[0].kind, MessageKind::VoteCommit);
    }

    #[test]
    fn basic_does_not_lock_on_prepare_certificate() {
        let (mut replicas, mut store, initial) = hs_world(ProtocolKind::HotStuff);
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let voter = replicas.get_mut(&ProcessId::single(3)).unwrap();
        let propose =
            msg(MessageKind::Propose, ProcessId::single(1), 1, Some(d1), Some(voter.locked_qc.clone()));
        voter.handle_message(&mut store, &propose, 0).unwrap();
        let announce = msg(
            MessageKind::QCAnnounce,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(qc(d1, 1, Phase::Prepare, &[1, 2, 3])),
        );
        voter.handle_message(&mut store, &announce, 0).unwrap();
        assert_eq!(voter.prepared, d1);
        assert_eq!(voter.locked, genesis);
        drop(initial);
    }

    #[test]
    fn leader_needs_quorum_of_identical_reports() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let mut leader =
            ReplicaState::new(ProcessId::single(2), hs_config(ProtocolKind::TwoPhaseHotStuff), genesis);
        leader.enter_view(2, 2, 0);
        let g_qc = QuorumCertificate::genesis(genesis);
        let b1_qc = qc(d1, 1, Phase::Prepare, &[1, 3, 4]);

        // Split reports: two for the genesis block, two for its child.
        let reports = [
            (1u8, genesis, g_qc.clone()),
            (2, d1, b1_qc.clone()),
            (3, d1, b1_qc.clone()),
            (4, genesis, g_qc.clone()),
        ];
        let mut proposals = Vec::new();
        for (i, b, c) in &reports {
            let m = msg(MessageKind::NewView, ProcessId::single(*i), 2, Some(*b), Some(c.clone()));
            proposals.extend(leader.handle_message(&mut store, &m, 0).unwrap().outbound);
        }
        assert!(proposals.is_empty(), "2+2 reports must not trigger a proposal");

        // A twin report for an index already counted changes nothing...
        let m = msg(MessageKind::NewView, ProcessId::twin(2, TwinTag::B), 2, Some(d1), Some(b1_qc.clone()));
        assert!(leader.handle_message(&mut store, &m, 0).unwrap().outbound.is_empty());

        // ...but a third distinct index on the same block does.
        let mut leader2 =
            ReplicaState::new(ProcessId::single(2), hs_config(ProtocolKind::TwoPhaseHotStuff), genesis);
        leader2.enter_view(2, 2, 0);
        let mut proposals = Vec::new();
        for i in [1u8, 3, 4] {
            let m = msg(MessageKind::NewView, ProcessId::single(i), 2, Some(d1), Some(b1_qc.clone()));
            proposals.extend(leader2.handle_message(&mut store, &m, 0).unwrap().outbound);
        }
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].kind, MessageKind::Propose);
        let proposed = store.get(&proposals[0].block.unwrap()).unwrap();
        assert_eq!(proposed.parent, d1);
        assert_eq!(proposed.view, 2);
    }

    /// A replica that never voted for a block must not adopt its
    /// certificates; this is what keeps a locked replica locked when it
    /// refused the conflicting proposal.
    #[test]
    fn certificate_adoption_is_gated_on_own_vote() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let b2 = Block::child(&g, 2, proposal_payload(2, 2, 0));
        let (d1, d2) = (b1.digest, b2.digest);
        store.insert(b1).unwrap();
        store.insert(b2).unwrap();

        let mut r =
            ReplicaState::new(ProcessId::single(3), hs_config(ProtocolKind::TwoPhaseHotStuff), genesis);
        r.enter_view(1, 1, 0);
        let propose = msg(
            MessageKind::Propose,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(QuorumCertificate::genesis(genesis)),
        );
        let out = r.handle_message(&mut store, &propose, 0).unwrap();
        assert_eq!(out.outbound[0].kind, MessageKind::VotePrepare);
        let announce = msg(
            MessageKind::QCAnnounce,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(qc(d1, 1, Phase::Prepare, &[1, 3, 4])),
        );
        r.handle_message(&mut store, &announce, 0).unwrap();
        assert_eq!(r.locked, d1);

        // View 2: a conflicting proposal justified by the genesis
        // certificate is unsafe for this replica, so it stays silent.
        r.enter_view(2, 2, 0);
        let propose2 = msg(
            MessageKind::Propose,
            ProcessId::single(2),
            2,
            Some(d2),
            Some(QuorumCertificate::genesis(genesis)),
        );
        let out = r.handle_message(&mut store, &propose2, 0).unwrap();
        assert!(out.outbound.is_empty());

        // Others voted for it; their certificate arrives. Without a matching
        // own vote the replica must not adopt it.
        let announce2 = msg(
            MessageKind::QCAnnounce,
            ProcessId::single(2),
            2,
            Some(d2),
            Some(qc(d2, 2, Phase::Prepare, &[1, 2, 4])),
        );
        let out = r.handle_message(&mut store, &announce2, 0).unwrap();
        assert!(out.outbound.is_empty());
        assert!(out.events.is_empty());
        assert_eq!(r.locked, d1, "unvoted certificate must not move the lock");
    }

    #[test]
    fn stale_commit_certificate_still_executes() {
        // A commit certificate from an earlier view is processed on arrival.
        let (mut replicas, mut store, _) = hs_world(ProtocolKind::TwoPhaseHotStuff);
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let r = replicas.get_mut(&ProcessId::single(4)).unwrap();
        let propose = msg(
            MessageKind::Propose,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(QuorumCertificate::genesis(genesis)),
        );
        r.handle_message(&mut store, &propose, 0).unwrap();
        let prep = msg(
            MessageKind::QCAnnounce,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(qc(d1, 1, Phase::Prepare, &[1, 2, 4])),
        );
        r.handle_message(&mut store, &prep, 0).unwrap();
        r.enter_view(2, 2, 0);

        let commit = msg(
            MessageKind::QCAnnounce,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(qc(d1, 1, Phase::Commit, &[1, 2, 4])),
        );
        let out = r.handle_message(&mut store, &commit, 0).unwrap();
        assert!(out.events.contains(&ReplicaEvent::Executed(d1)));
        assert_eq!(r.executed, d1);
        // But no commit vote: the certificate is not from the current view.
        assert!(out.outbound.is_empty());
    }

    // --- synchronous variant ---

    fn sync_config() -> ProtocolConfig {
        ProtocolConfig::new(3, 1, ProtocolKind::SyncHotStuff).unwrap()
    }

    fn sync_replica(index: u8, store: &BlockStore) -> ReplicaState {
        ReplicaState::new(ProcessId::single(index), sync_config(), store.genesis())
    }

    #[test]
    fn sync_leader_proposes_over_best_reported_lock() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let mut leader = sync_replica(2, &store);
        let out = leader.enter_view(2, 2, 0);
        assert!(out.timers.contains(&(TimerKind::LeaderProposeWait, 2 * DELTA_MS)));

        // A report carrying a newer lock certificate is adopted outright.
        let report = msg(
            MessageKind::NewView,
            ProcessId::single(3),
            2,
            Some(d1),
            Some(qc(d1, 1, Phase::Generic, &[1, 3])),
        );
        leader.handle_message(&mut store, &report, 0).unwrap();
        assert_eq!(leader.locked, d1);

        let out = leader.on_timer(&mut store, TimerKind::LeaderProposeWait, 2, 100).unwrap();
        assert_eq!(out.outbound.len(), 1);
        let proposed = store.get(&out.outbound[0].block.unwrap()).unwrap();
        assert_eq!(proposed.parent, d1, "proposal must extend the best lock");
    }

    #[test]
    fn sync_vote_quorum_self_assembles_certificate() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let mut r = sync_replica(3, &store);
        r.enter_view(1, 1, 0);
        let propose = msg(
            MessageKind::Propose,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(QuorumCertificate::genesis(genesis)),
        );
        let out = r.handle_message(&mut store, &propose, 0).unwrap();
        assert_eq!(out.outbound[0].kind, MessageKind::VotePrepare);
        assert!(matches!(out.outbound[0].recipient, Recipient::All));
        assert!(out.timers.contains(&(TimerKind::CommitTimeout(d1), 2 * DELTA_MS)));

        // Own vote plus one more reaches the 2-vote quorum; the replica
        // forms the certificate locally and locks.
        let own = msg(MessageKind::VotePrepare, ProcessId::single(3), 1, Some(d1), None);
        r.handle_message(&mut store, &own, 0).unwrap();
        assert_eq!(r.locked, genesis);
        let other = msg(MessageKind::VotePrepare, ProcessId::single(2), 1, Some(d1), None);
        let out = r.handle_message(&mut store, &other, 0).unwrap();
        assert!(out.events.contains(&ReplicaEvent::Locked(d1)));
        assert_eq!(r.locked, d1);

        // 2Δ later the commit timer fires and the block executes.
        let out = r.on_timer(&mut store, TimerKind::CommitTimeout(d1), 1, 100).unwrap();
        assert!(out.events.contains(&ReplicaEvent::Executed(d1)));
        assert_eq!(r.executed, d1);
    }

    #[test]
    fn sync_equivocation_blames_and_poisons_commit() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1a = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let b1b = Block::child(&g, 1, proposal_payload(1, 1, 1));
        let (da, db) = (b1a.digest, b1b.digest);
        store.insert(b1a).unwrap();
        store.insert(b1b).unwrap();

        let mut r = sync_replica(2, &store);
        r.enter_view(1, 1, 0);
        let gqc = QuorumCertificate::genesis(genesis);
        let pa = msg(MessageKind::Propose, ProcessId::twin(1, TwinTag::A), 1, Some(da), Some(gqc.clone()));
        let out = r.handle_message(&mut store, &pa, 0).unwrap();
        assert_eq!(out.outbound[0].kind, MessageKind::VotePrepare);

        let pb = msg(MessageKind::Propose, ProcessId::twin(1, TwinTag::B), 1, Some(db), Some(gqc));
        let out = r.handle_message(&mut store, &pb, 0).unwrap();
        assert!(out.outbound.iter().any(|m| m.kind == MessageKind::Blame));
        assert!(out.events.contains(&ReplicaEvent::BlameBroadcast(1)));

        // The poisoned commit timer must not execute.
        let out = r.on_timer(&mut store, TimerKind::CommitTimeout(da), 1, 100).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(r.executed, genesis);
    }

    #[test]
    fn sync_unsafe_proposal_draws_blame() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let b2 = Block::child(&g, 2, proposal_payload(2, 2, 0));
        let (d1, d2) = (b1.digest, b2.digest);
        store.insert(b1).unwrap();
        store.insert(b2).unwrap();

        let mut r = sync_replica(3, &store);
        r.enter_view(1, 1, 0);
        // Lock on B1 via an assembled certificate.
        for i in [1u8, 3] {
            let v = msg(MessageKind::VotePrepare, ProcessId::single(i), 1, Some(d1), None);
            r.handle_message(&mut store, &v, 0).unwrap();
        }
        assert_eq!(r.locked, d1);

        // View 2: a proposal conflicting with the lock, justified only by
        // the stale genesis certificate.
        r.enter_view(2, 2, 300);
        let propose = msg(
            MessageKind::Propose,
            ProcessId::single(2),
            2,
            Some(d2),
            Some(QuorumCertificate::genesis(genesis)),
        );
        let out = r.handle_message(&mut store, &propose, 300).unwrap();
        assert!(out.outbound.iter().any(|m| m.kind == MessageKind::Blame));
        assert!(!out.outbound.iter().any(|m| m.kind == MessageKind::VotePrepare));
    }

    #[test]
    fn sync_blame_quorum_quits_the_view() {
        let store = BlockStore::new();
        let mut store = store;
        let mut r = sync_replica(3, &store);
        r.enter_view(1, 1, 0);

        let b1 = msg(MessageKind::Blame, ProcessId::single(1), 1, None, None);
        let out = r.handle_message(&mut store, &b1, 10).unwrap();
        assert!(out.events.is_empty());
        let b2 = msg(MessageKind::Blame, ProcessId::single(2), 1, None, None);
        let out = r.handle_message(&mut store, &b2, 20).unwrap();
        assert!(out.events.contains(&ReplicaEvent::QuitView(1)));
        assert!(out.outbound.iter().any(|m| m.kind == MessageKind::BlameForward));
        assert!(out.timers.contains(&(TimerKind::ViewChangeWait, 2 * DELTA_MS)));

        // After quitting, the view-change timer asks for the next view, and
        // in-view traffic is ignored.
        let late = msg(MessageKind::Blame, ProcessId::single(1), 1, None, None);
        assert!(r.handle_message(&mut store, &late, 30).unwrap().events.is_empty());
        let out = r.on_timer(&mut store, TimerKind::ViewChangeWait, 1, 120).unwrap();
        assert_eq!(out.advance_view, Some(2));
    }

    #[test]
    fn sync_blame_timer_respects_rearm() {
        let mut store = BlockStore::new();
        let genesis = store.genesis();
        let g = store.get(&genesis).unwrap().clone();
        let b1 = Block::child(&g, 1, proposal_payload(1, 1, 0));
        let d1 = b1.digest;
        store.insert(b1).unwrap();

        let mut r = sync_replica(2, &store);
        r.enter_view(1, 1, 0);
        // Voting at t=100 pushes the deadline to t=250, so the timer armed
        // at view entry (fires t=150) is stale.
        let propose = msg(
            MessageKind::Propose,
            ProcessId::single(1),
            1,
            Some(d1),
            Some(QuorumCertificate::genesis(genesis)),
        );
        r.handle_message(&mut store, &propose, 100).unwrap();
        let out = r.on_timer(&mut store, TimerKind::BlameTimeout, 1, 150).unwrap();
        assert!(out.outbound.is_empty());
        // The re-armed timer is effective.
        let out = r.on_timer(&mut store, TimerKind::BlameTimeout, 1, 250).unwrap();
        assert!(out.outbound.iter().any(|m| m.kind == MessageKind::Blame));
    }

    #[test]
    fn twin_ids_differ_only_in_tag() {
        assert_ne!(ProcessId::twin(1, TwinTag::A), ProcessId::twin(1, TwinTag::B));
        assert_eq!(ProcessId::twin(1, TwinTag::A).index, ProcessId::twin(1, TwinTag::B).index);
        assert_eq!(ProcessId::single(2).tag, TwinTag::None);
    }
}
