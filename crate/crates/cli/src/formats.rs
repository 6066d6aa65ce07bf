//! Text formats: the scenario file, trace dumps, graph export and the
//! campaign report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};

use hotcheck_core::replica::ReplicaEvent;
use hotcheck_core::sim::TraceEntry;
use hotcheck_core::{
    DelayRule, ExecutionResult, MessageKind, ProcessId, ProtocolConfig, ProtocolKind, Scenario,
    StateTransitionGraph,
};

use crate::campaign::ReportRow;

pub fn protocol_from_token(t: &str) -> Option<ProtocolKind> {
    match t {
        "hotstuff" => Some(ProtocolKind::HotStuff),
        "two-phase-hotstuff" => Some(ProtocolKind::TwoPhaseHotStuff),
        "sync-hotstuff" => Some(ProtocolKind::SyncHotStuff),
        _ => None,
    }
}

fn message_kind_from_token(t: &str) -> Option<MessageKind> {
    match t {
        "new-view" => Some(MessageKind::NewView),
        "propose" => Some(MessageKind::Propose),
        "vote-prepare" => Some(MessageKind::VotePrepare),
        "vote-pre-commit" => Some(MessageKind::VotePreCommit),
        "vote-commit" => Some(MessageKind::VoteCommit),
        "qc-announce" => Some(MessageKind::QCAnnounce),
        "blame" => Some(MessageKind::Blame),
        "blame-forward" => Some(MessageKind::BlameForward),
        _ => None,
    }
}

/// Canonical scenario file. Parsing `scenario_to_text` output yields the
/// original scenario.
pub fn scenario_to_text(s: &Scenario) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "protocol: {}", s.config.kind.name());
    let _ = writeln!(out, "n: {}", s.config.n);
    let _ = writeln!(out, "f: {}", s.config.f);
    let _ = writeln!(out, "rounds: {}", s.rounds);
    match s.twin {
        Some(t) => {
            let _ = writeln!(out, "twin: {t}");
        }
        None => {
            let _ = writeln!(out, "twin: none");
        }
    }
    let _ = writeln!(out, "seed: {}", s.seed);
    let leaders: Vec<String> = s.leaders.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "leaders: {}", leaders.join(" "));
    for (i, blocks) in s.partitions.iter().enumerate() {
        let rendered: Vec<String> = blocks
            .iter()
            .map(|blk| {
                let ids: Vec<String> = blk.iter().map(|id| id.to_string()).collect();
                format!("{{{}}}", ids.join(" "))
            })
            .collect();
        let _ = writeln!(out, "partition {}: {}", i + 1, rendered.join(" | "));
    }
    for d in &s.delays {
        let rcpt = d.recipient.map_or("*".to_string(), |r| r.to_string());
        let _ = writeln!(
            out,
            "delay {}: {} -> {} {} {}",
            d.round,
            d.sender,
            rcpt,
            d.kind.name(),
            d.delay_ms
        );
    }
    out
}

pub fn scenario_from_text(text: &str) -> Result<Scenario> {
    let mut fields: BTreeMap<&str, String> = BTreeMap::new();
    let mut partitions: BTreeMap<u32, Vec<BTreeSet<ProcessId>>> = BTreeMap::new();
    let mut delays: Vec<DelayRule> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once(':').with_context(|| format!("line {lineno}: expected 'key: value'"))?;
        let key = key.trim();
        let value = value.trim();

        if let Some(num) = key.strip_prefix("partition ") {
            let round: u32 =
                num.trim().parse().with_context(|| format!("line {lineno}: bad partition round"))?;
            let mut blocks = Vec::new();
            for part in value.split('|') {
                let part = part.trim();
                let inner = part
                    .strip_prefix('{')
                    .and_then(|p| p.strip_suffix('}'))
                    .with_context(|| format!("line {lineno}: partition blocks use {{a b c}}"))?;
                let mut blk = BTreeSet::new();
                for tok in inner.split_whitespace() {
                    let id: ProcessId = tok
                        .parse()
                        .map_err(|_| anyhow!("line {lineno}: bad process id '{tok}'"))?;
                    blk.insert(id);
                }
                blocks.push(blk);
            }
            if partitions.insert(round, blocks).is_some() {
                bail!("line {lineno}: duplicate partition for round {round}");
            }
        } else if let Some(num) = key.strip_prefix("delay ") {
            let round: u32 =
                num.trim().parse().with_context(|| format!("line {lineno}: bad delay round"))?;
            let toks: Vec<&str> = value.split_whitespace().collect();
            let [sender, arrow, rcpt, kind, ms] = toks.as_slice() else {
                bail!("line {lineno}: delay lines read 'sender -> recipient kind ms'");
            };
            if *arrow != "->" {
                bail!("line {lineno}: delay lines read 'sender -> recipient kind ms'");
            }
            delays.push(DelayRule {
                round,
                sender: sender.parse().with_context(|| format!("line {lineno}: bad sender"))?,
                recipient: if *rcpt == "*" {
                    None
                } else {
                    Some(rcpt.parse().with_context(|| format!("line {lineno}: bad recipient"))?)
                },
                kind: message_kind_from_token(kind)
                    .with_context(|| format!("line {lineno}: unknown message kind '{kind}'"))?,
                delay_ms: ms.parse().with_context(|| format!("line {lineno}: bad delay"))?,
            });
        } else {
            fields.insert(
                match key {
                    "protocol" => "protocol",
                    "n" => "n",
                    "f" => "f",
                    "rounds" => "rounds",
                    "twin" => "twin",
                    "seed" => "seed",
                    "leaders" => "leaders",
                    other => bail!("line {lineno}: unknown key '{other}'"),
                },
                value.to_string(),
            );
        }
    }

    let get = |k: &str| fields.get(k).with_context(|| format!("missing '{k}:' line"));
    let kind = protocol_from_token(get("protocol")?)
        .with_context(|| format!("unknown protocol '{}'", fields["protocol"]))?;
    let n: u8 = get("n")?.parse().context("bad n")?;
    let f: u8 = get("f")?.parse().context("bad f")?;
    let config = ProtocolConfig::new(n, f, kind).map_err(|e| anyhow!("{e}"))?;
    let rounds: u32 = get("rounds")?.parse().context("bad rounds")?;
    let twin = match get("twin")?.as_str() {
        "none" => None,
        t => Some(t.parse::<u8>().context("bad twin index")?),
    };
    let seed: u64 = get("seed")?.parse().context("bad seed")?;
    let leaders: Vec<u8> = get("leaders")?
        .split_whitespace()
        .map(|t| t.parse::<u8>().context("bad leader index"))
        .collect::<Result<_>>()?;

    let mut ordered = Vec::new();
    for round in 1..=rounds {
        ordered.push(
            partitions
                .remove(&round)
                .with_context(|| format!("missing 'partition {round}:' line"))?,
        );
    }
    if let Some((round, _)) = partitions.into_iter().next() {
        bail!("partition {round} is outside 1..={rounds}");
    }

    let scenario = Scenario { config, rounds, leaders, partitions: ordered, twin, delays, seed };
    scenario.validate().map_err(|e| anyhow!("invalid scenario: {e}"))?;
    Ok(scenario)
}

fn opt_block(b: Option<hotcheck_core::BlockDigest>) -> String {
    b.map_or_else(|| "-".to_string(), |d| d.short_hex())
}

/// One line per trace entry, in delivery/event order.
pub fn render_trace(result: &ExecutionResult) -> String {
    let mut out = String::new();
    for entry in &result.trace {
        match entry {
            TraceEntry::Delivered { time, to, from, kind, view, block } => {
                let _ = writeln!(
                    out,
                    "t={time} replica={to} kind={} view={view} block={} from={from}",
                    kind.name(),
                    opt_block(*block),
                );
            }
            TraceEntry::Replica { time, id, event } => {
                let (kind, view, block) = match event {
                    ReplicaEvent::EnteredView(v) => ("entered-view", Some(*v), None),
                    ReplicaEvent::Prepared(d) => ("prepared", None, Some(*d)),
                    ReplicaEvent::Locked(d) => ("locked", None, Some(*d)),
                    ReplicaEvent::Executed(d) => ("executed", None, Some(*d)),
                    ReplicaEvent::BlameBroadcast(v) => ("blame-broadcast", Some(*v), None),
                    ReplicaEvent::QuitView(v) => ("quit-view", Some(*v), None),
                };
                let view = view.map_or_else(|| "-".to_string(), |v| v.to_string());
                let _ = writeln!(
                    out,
                    "t={time} replica={id} kind={kind} view={view} block={}",
                    opt_block(block),
                );
            }
        }
    }
    out
}

/// Graphviz dump of the accumulated state-transition graph. Hot states are
/// filled; vertex names are the snapshot hash prefixes.
pub fn graph_to_dot(g: &StateTransitionGraph) -> String {
    let mut out = String::from("digraph states {\n");
    for (hash, hot) in g.states() {
        let style = if hot { " style=filled fillcolor=salmon" } else { "" };
        let _ = writeln!(out, "  \"{hash}\" [hot={hot}{style}];");
    }
    for (a, b) in g.edges() {
        let _ = writeln!(out, "  \"{a}\" -> \"{b}\";");
    }
    out.push_str("}\n");
    out
}

pub const REPORT_CSV_HEADER: &str =
    "method,threshold,runtime_ms,trace_len,pct_safety,pct_liveness,pct_false_pos";

pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{:.2},{:.2}",
            r.method, r.threshold, r.runtime_ms, r.trace_len, r.pct_safety, r.pct_liveness,
            r.pct_false_pos
        );
    }
    out
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>10} {:>9} {:>10} {:>12} {:>13}",
        "method", "threshold", "runtime_ms", "trace_len", "pct_safety", "pct_liveness",
        "pct_false_pos"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>10} {:>9} {:>10.2} {:>12.2} {:>13.2}",
            r.method, r.threshold, r.runtime_ms, r.trace_len, r.pct_safety, r.pct_liveness,
            r.pct_false_pos
        );
    }
    out
}
