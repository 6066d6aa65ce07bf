//! Twins-style scenario definitions and generation.
//!
//! A scenario fixes everything that makes an execution deterministic: the
//! protocol, the per-round leader schedule, the per-round network partition
//! over replica *instances* (the twinned index contributes two instances
//! carrying the same identity), and message delay rules. Faulty behaviour is
//! never scripted: it emerges from running two protocol-faithful instances
//! of one identity behind different partition blocks.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};

use crate::chain::{ChainError, MessageKind, ProcessId, ProtocolConfig, ProtocolKind, TwinTag};
use crate::sim::SimTime;

/// Extra delivery delay for matching messages, on top of the base network
/// delay. `recipient: None` matches deliveries to every instance.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DelayRule {
    /// 1-based round in which the message is *sent*.
    pub round: u32,
    pub sender: u8,
    pub recipient: Option<u8>,
    pub kind: MessageKind,
    pub delay_ms: SimTime,
}

impl DelayRule {
    /// Per-kind caps keep delays inside the range the protocols tolerate by
    /// design (multiples of the 50 ms synchrony bound).
    pub fn max_delay(kind: MessageKind) -> SimTime {
        match kind {
            MessageKind::Propose | MessageKind::QCAnnounce => 150,
            _ => 100,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Scenario {
    pub config: ProtocolConfig,
    pub rounds: u32,
    /// Leader index per round, 1-based indices.
    pub leaders: Vec<u8>,
    /// Partition blocks per round over all instances.
    pub partitions: Vec<Vec<BTreeSet<ProcessId>>>,
    /// The index running as a twin pair, if any.
    pub twin: Option<u8>,
    pub delays: Vec<DelayRule>,
    pub seed: u64,
}

impl Scenario {
    /// All replica instances, twins included, in deterministic order.
    pub fn instances(&self) -> Vec<ProcessId> {
        let mut out = Vec::new();
        for i in 1..=self.config.n {
            if self.twin == Some(i) {
                out.push(ProcessId::twin(i, TwinTag::A));
                out.push(ProcessId::twin(i, TwinTag::B));
            } else {
                out.push(ProcessId::single(i));
            }
        }
        out
    }

    /// Indices of the correct (non-twinned) replicas.
    pub fn correct_indices(&self) -> Vec<u8> {
        (1..=self.config.n).filter(|i| self.twin != Some(*i)).collect()
    }

    /// Whether round `round` (1-based) delivers messages from `a` to `b`.
    pub fn partition_allows(&self, round: u32, a: ProcessId, b: ProcessId) -> bool {
        match self.partitions.get(round as usize - 1) {
            Some(blocks) => blocks.iter().any(|blk| blk.contains(&a) && blk.contains(&b)),
            None => false,
        }
    }

    /// Extra delay applied to one delivery. With several matching rules the
    /// largest wins; rules never stack.
    pub fn delay_for(&self, round: u32, sender: u8, recipient: u8, kind: MessageKind) -> SimTime {
        self.delays
            .iter()
            .filter(|r| {
                r.round == round
                    && r.sender == sender
                    && r.kind == kind
                    && r.recipient.is_none_or(|x| x == recipient)
            })
            .map(|r| r.delay_ms)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let n = self.config.n;
        if self.rounds == 0 || self.rounds > 10_000 {
            return Err(ChainError::BadConfig("rounds must be in 1..=10000"));
        }
        if self.leaders.len() != self.rounds as usize {
            return Err(ChainError::BadConfig("one leader per round required"));
        }
        if self.leaders.iter().any(|l| *l < 1 || *l > n) {
            return Err(ChainError::BadConfig("leader index out of range"));
        }
        if let Some(t) = self.twin {
            if t < 1 || t > n {
                return Err(ChainError::BadConfig("twin index out of range"));
            }
        }
        if self.partitions.len() != self.rounds as usize {
            return Err(ChainError::BadConfig("one partition per round required"));
        }
        let all: BTreeSet<ProcessId> = self.instances().into_iter().collect();
        for blocks in &self.partitions {
            let mut seen: BTreeSet<ProcessId> = BTreeSet::new();
            for blk in blocks {
                if blk.is_empty() {
                    return Err(ChainError::BadConfig("empty partition block"));
                }
                for id in blk {
                    if !seen.insert(*id) {
                        return Err(ChainError::BadConfig("instance in two partition blocks"));
                    }
                }
            }
            if seen != all {
                return Err(ChainError::BadConfig("partition must cover every instance"));
            }
        }
        for rule in &self.delays {
            if rule.round < 1 || rule.round > self.rounds {
                return Err(ChainError::BadConfig("delay rule round out of range"));
            }
            if rule.sender < 1 || rule.sender > n {
                return Err(ChainError::BadConfig("delay rule sender out of range"));
            }
            if let Some(rcpt) = rule.recipient {
                if rcpt < 1 || rcpt > n {
                    return Err(ChainError::BadConfig("delay rule recipient out of range"));
                }
            }
            if rule.delay_ms > DelayRule::max_delay(rule.kind) {
                return Err(ChainError::BadConfig("delay rule exceeds cap for its kind"));
            }
        }
        Ok(())
    }
}

/// Scenario-space parameters for one campaign.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GeneratorConfig {
    pub protocol: ProtocolConfig,
    pub rounds: u32,
    pub count: u32,
    pub seed: u64,
    /// Inject per-round message delay rules in addition to partitions.
    pub with_delays: bool,
}

/// Chance that a configuration keeps the twinned index as leader: 1 in 2.
/// Twins scenarios lean on repeated faulty leadership; a fresh correct leader
/// every round would dissolve most of the interesting schedules.
const TWIN_LEAD_DEN: u64 = 2;
/// Chance of a delay rule per (round, sender) when delays are on: 1 in 6.
const DELAY_DEN: u64 = 6;
/// Longest stretch of rounds a single setup configuration runs for.
const MAX_SETUP_LEN: u64 = 2;

fn uniform(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

fn pick<T: Copy>(rng: &mut impl RngCore, options: &[T]) -> T {
    options[uniform(rng, options.len() as u64) as usize]
}

/// Deterministically derives `count` scenarios from the master seed. Each
/// scenario gets its own sub-seed so any single one can be regenerated.
pub fn generate(cfg: &GeneratorConfig) -> Vec<Scenario> {
    let mut master = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let sub_seed = master.next_u64();
            generate_one(cfg, sub_seed)
        })
        .collect()
}

/// One leader plus a two-block cut of the instances.
fn draw_configuration(
    rng: &mut impl RngCore,
    n: u8,
    twin: u8,
    instances: &[ProcessId],
) -> (u8, Vec<BTreeSet<ProcessId>>) {
    let leader = if uniform(rng, TWIN_LEAD_DEN) == 0 {
        twin
    } else {
        1 + uniform(rng, n as u64) as u8
    };
    let blocks = loop {
        let mut a = BTreeSet::new();
        let mut b = BTreeSet::new();
        for id in instances {
            if uniform(rng, 2) == 0 {
                a.insert(*id);
            } else {
                b.insert(*id);
            }
        }
        if !a.is_empty() && !b.is_empty() {
            break alloc::vec![a, b];
        }
    };
    (leader, blocks)
}

/// Scenarios follow the classic Twins shape: two short setup configurations,
/// then one steady configuration for the rest of the run. The steady state
/// either makes progress or wedges for good; schedules that reshuffle every
/// round mostly shake themselves loose again.
fn generate_one(cfg: &GeneratorConfig, seed: u64) -> Scenario {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let n = cfg.protocol.n;
    let twin = 1 + uniform(&mut rng, n as u64) as u8;

    let mut scenario = Scenario {
        config: cfg.protocol,
        rounds: cfg.rounds,
        leaders: Vec::new(),
        partitions: Vec::new(),
        twin: Some(twin),
        delays: Vec::new(),
        seed,
    };
    let instances = scenario.instances();

    let first = 1 + uniform(&mut rng, MAX_SETUP_LEN) as u32;
    let second = first + 1 + uniform(&mut rng, MAX_SETUP_LEN) as u32;
    let setup_a = draw_configuration(&mut rng, n, twin, &instances);
    let setup_b = draw_configuration(&mut rng, n, twin, &instances);
    let steady = draw_configuration(&mut rng, n, twin, &instances);

    for round in 1..=cfg.rounds {
        let (leader, blocks) = if round <= first {
            &setup_a
        } else if round <= second {
            &setup_b
        } else {
            &steady
        };
        scenario.leaders.push(*leader);
        scenario.partitions.push(blocks.clone());

        if cfg.with_delays {
            for sender in 1..=n {
                if uniform(&mut rng, DELAY_DEN) != 0 {
                    continue;
                }
                let (kind, delay_ms) = match cfg.protocol.kind {
                    ProtocolKind::SyncHotStuff => {
                        if uniform(&mut rng, 2) == 0 {
                            (MessageKind::Propose, pick(&mut rng, &[25, 50, 75, 100, 125, 150]))
                        } else {
                            (MessageKind::VotePrepare, pick(&mut rng, &[25, 50, 75, 100]))
                        }
                    }
                    _ => (MessageKind::QCAnnounce, pick(&mut rng, &[50, 100, 150])),
                };
                scenario.delays.push(DelayRule {
                    round,
                    sender,
                    recipient: None,
                    kind,
                    delay_ms,
                });
            }
        }
    }
    scenario
}

/// Hand-built two-phase schedule that splits the correct replicas' locks
/// across two branches and then starves every later leader of a quorum of
/// identical reports: one replica stays locked on the round-1 branch while
/// the twinned index is partitioned away, so no later proposal forms and the
/// system deadlocks hot.
pub fn lock_split_fixture() -> Scenario {
    fn ids(names: &[&str]) -> BTreeSet<ProcessId> {
        names.iter().map(|s| s.parse().unwrap()).collect()
    }

    let config = ProtocolConfig::new(4, 1, ProtocolKind::TwoPhaseHotStuff).unwrap();
    let mut partitions = alloc::vec![
        alloc::vec![ids(&["1A", "3", "4"]), ids(&["1B", "2"])],
        alloc::vec![ids(&["1B", "2", "3", "4"]), ids(&["1A"])],
    ];
    for _ in 3..=10 {
        partitions.push(alloc::vec![ids(&["2", "3", "4"]), ids(&["1A", "1B"])]);
    }
    Scenario {
        config,
        rounds: 10,
        leaders: alloc::vec![1, 2, 3, 4, 2, 3, 4, 2, 3, 4],
        partitions,
        twin: Some(1),
        delays: alloc::vec![
            DelayRule {
                round: 1,
                sender: 1,
                recipient: Some(4),
                kind: MessageKind::QCAnnounce,
                delay_ms: 100,
            },
            DelayRule {
                round: 2,
                sender: 3,
                recipient: Some(2),
                kind: MessageKind::NewView,
                delay_ms: 50,
            },
        ],
        seed: 2,
    }
}
