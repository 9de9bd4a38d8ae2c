use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Shared-memory buffers streamed by the producer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Buffer {
    Q,
    K,
    V,
    #[serde(rename = "do")]
    DO,
}

impl fmt::Display for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Buffer::Q => "Q",
            Buffer::K => "K",
            Buffer::V => "V",
            Buffer::DO => "dO",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agent {
    Producer,
    Consumer(usize),
    DqWriter,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::Producer => f.write_str("producer"),
            Agent::Consumer(w) => write!(f, "consumer {w}"),
            Agent::DqWriter => f.write_str("dq-writer"),
        }
    }
}

/// The GEMMs of the forward (`qk`, `pv`) and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GemmKind {
    /// `S = Q Kᵀ`
    Qk,
    /// `O += P̃ V`
    Pv,
    /// `dP = dO Vᵀ`
    Dp,
    /// `dV += Pᵀ dO`
    Dv,
    /// `dK += dSᵀ Q`
    Dk,
    /// `dQ_local = dS K`
    Dq,
}

impl fmt::Display for GemmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GemmKind::Qk => "qk",
            GemmKind::Pv => "pv",
            GemmKind::Dp => "dp",
            GemmKind::Dv => "dv",
            GemmKind::Dk => "dk",
            GemmKind::Dq => "dq",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    LoadIssued(Buffer),
    Committed(Buffer),
    Consumed(Buffer),
    Released(Buffer),
    GemmStart(GemmKind),
    GemmEnd(GemmKind),
    SoftmaxStart,
    SoftmaxEnd,
    TransposeStart,
    TransposeEnd,
    TokenAcquired,
    TokenPassed,
    DqQueued,
    DqAddStart,
    DqAddEnd,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::LoadIssued(b) => write!(f, "load-issued:{b}"),
            Action::Committed(b) => write!(f, "committed:{b}"),
            Action::Consumed(b) => write!(f, "consumed:{b}"),
            Action::Released(b) => write!(f, "released:{b}"),
            Action::GemmStart(g) => write!(f, "gemm-start:{g}"),
            Action::GemmEnd(g) => write!(f, "gemm-end:{g}"),
            Action::SoftmaxStart => f.write_str("softmax-start"),
            Action::SoftmaxEnd => f.write_str("softmax-end"),
            Action::TransposeStart => f.write_str("transpose-start"),
            Action::TransposeEnd => f.write_str("transpose-end"),
            Action::TokenAcquired => f.write_str("token-acquired"),
            Action::TokenPassed => f.write_str("token-passed"),
            Action::DqQueued => f.write_str("dq-queued"),
            Action::DqAddStart => f.write_str("dq-add-start"),
            Action::DqAddEnd => f.write_str("dq-add-end"),
        }
    }
}

/// One trace tuple. `block` is the per-buffer load sequence number for
/// buffer actions (the key block index when one query tile is simulated)
/// and the iteration index for compute actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub agent: Agent,
    pub action: Action,
    pub block: usize,
    pub stage: Option<usize>,
}

/// Depth of each circular buffer in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStages {
    pub buffer: Buffer,
    pub stages: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    NonMonotoneTime,
    WrongStage,
    UnknownBuffer,
    CommitWithoutLoad,
    ConsumeBeforeCommit,
    ReleaseWithoutConsume,
    DoubleRelease,
    StageReuseBeforeRelease,
    TooManyInFlight,
    PingpongOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Index of the offending event in the trace.
    pub index: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event {}: {}", self.index, self.message)
    }
}

/// Checks a trace against the buffer and barrier protocol. Never panics.
pub fn validate_events(
    trace: &[TraceEvent],
    buffers: &[BufferStages],
    consumers: usize,
    pingpong: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |index: usize, kind: ViolationKind, message: String| {
        out.push(Violation {
            index,
            kind,
            message,
        })
    };

    let depth: HashMap<Buffer, usize> = buffers
        .iter()
        .map(|b| (b.buffer, b.stages.max(1)))
        .collect();
    let mut issued: HashSet<(Buffer, usize)> = HashSet::new();
    let mut committed: HashSet<(Buffer, usize)> = HashSet::new();
    let mut consumed: HashSet<(Buffer, usize, Agent)> = HashSet::new();
    let mut releases: HashMap<(Buffer, usize), HashSet<Agent>> = HashMap::new();
    let mut in_flight: HashMap<Buffer, usize> = HashMap::new();
    let mut holder: Option<usize> = None;
    let mut turn = 0usize;
    let mut last = f64::NEG_INFINITY;

    for (idx, e) in trace.iter().enumerate() {
        if !(e.time >= last) {
            flag(
                idx,
                ViolationKind::NonMonotoneTime,
                format!("time {} after {}", e.time, last),
            );
        } else {
            last = e.time;
        }

        let buffer = match e.action {
            Action::LoadIssued(b)
            | Action::Committed(b)
            | Action::Consumed(b)
            | Action::Released(b) => Some(b),
            _ => None,
        };
        if let Some(b) = buffer {
            let Some(&s) = depth.get(&b) else {
                flag(
                    idx,
                    ViolationKind::UnknownBuffer,
                    format!("buffer {b} has no declared stages"),
                );
                continue;
            };
            let stage = e.block % s;
            if e.stage != Some(stage) {
                flag(
                    idx,
                    ViolationKind::WrongStage,
                    format!(
                        "{b} block {} recorded in stage {:?}, expected {stage}",
                        e.block, e.stage
                    ),
                );
            }
            let key = (b, e.block);
            match e.action {
                Action::LoadIssued(_) => {
                    let reused = e.block >= s && {
                        let prev = releases.get(&(b, e.block - s)).map_or(0, |r| r.len());
                        prev < consumers
                    };
                    let count = in_flight.entry(b).or_default();
                    if reused {
                        flag(
                            idx,
                            ViolationKind::StageReuseBeforeRelease,
                            format!(
                                "{b} stage {stage} refilled with block {} before block {} was released",
                                e.block,
                                e.block - s
                            ),
                        );
                    } else if *count >= s {
                        flag(
                            idx,
                            ViolationKind::TooManyInFlight,
                            format!("more than {s} {b} stages in flight at block {}", e.block),
                        );
                    }
                    *count += 1;
                    issued.insert(key);
                }
                Action::Committed(_) => {
                    if !issued.contains(&key) {
                        flag(
                            idx,
                            ViolationKind::CommitWithoutLoad,
                            format!(
                                "{b} block {} committed in stage {stage} without a load",
                                e.block
                            ),
                        );
                    }
                    committed.insert(key);
                }
                Action::Consumed(_) => {
                    if !committed.contains(&key) {
                        flag(
                            idx,
                            ViolationKind::ConsumeBeforeCommit,
                            format!(
                                "{} consumed {b} block {} in stage {stage} before its commit",
                                e.agent, e.block
                            ),
                        );
                    }
                    consumed.insert((b, e.block, e.agent));
                }
                Action::Released(_) => {
                    if !consumed.contains(&(b, e.block, e.agent)) {
                        flag(
                            idx,
                            ViolationKind::ReleaseWithoutConsume,
                            format!(
                                "{} released {b} stage {stage} without consuming block {}",
                                e.agent, e.block
                            ),
                        );
                    }
                    let set = releases.entry(key).or_default();
                    if !set.insert(e.agent) {
                        flag(
                            idx,
                            ViolationKind::DoubleRelease,
                            format!("{} released {b} block {} twice", e.agent, e.block),
                        );
                    } else if set.len() == consumers {
                        let count = in_flight.entry(b).or_default();
                        *count = count.saturating_sub(1);
                    }
                }
                _ => {}
            }
            continue;
        }

        if !pingpong {
            continue;
        }
        let who = match e.agent {
            Agent::Consumer(w) => Some(w),
            _ => None,
        };
        match e.action {
            Action::TokenAcquired => {
                if let Some(h) = holder {
                    flag(
                        idx,
                        ViolationKind::PingpongOrder,
                        format!(
                            "{} acquired the pingpong token held by consumer {h}",
                            e.agent
                        ),
                    );
                } else if who != Some(turn) {
                    flag(
                        idx,
                        ViolationKind::PingpongOrder,
                        format!(
                            "{} acquired the pingpong token on consumer {turn}'s turn",
                            e.agent
                        ),
                    );
                }
                holder = who;
            }
            Action::TokenPassed => {
                if holder.is_none() || holder != who {
                    flag(
                        idx,
                        ViolationKind::PingpongOrder,
                        format!("{} passed a pingpong token it does not hold", e.agent),
                    );
                }
                holder = None;
                if let Some(w) = who {
                    turn = (w + 1) % consumers.max(1);
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(
        time: f64,
        agent: Agent,
        action: Action,
        block: usize,
        stage: Option<usize>,
    ) -> TraceEvent {
        TraceEvent {
            time,
            agent,
            action,
            block,
            stage,
        }
    }

    const KV: [BufferStages; 1] = [BufferStages {
        buffer: Buffer::K,
        stages: 2,
    }];

    #[test]
    fn consume_before_commit_is_the_only_violation() {
        let c = Agent::Consumer(0);
        let trace = [
            ev(
                0.0,
                Agent::Producer,
                Action::LoadIssued(Buffer::K),
                0,
                Some(0),
            ),
            ev(5.0, c, Action::Consumed(Buffer::K), 0, Some(0)),
            ev(
                9.0,
                Agent::Producer,
                Action::Committed(Buffer::K),
                0,
                Some(0),
            ),
            ev(20.0, c, Action::Released(Buffer::K), 0, Some(0)),
        ];
        let v = validate_events(&trace, &KV, 1, false);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::ConsumeBeforeCommit);
        assert_eq!(v[0].index, 1);
        assert!(v[0].message.contains("stage 0"), "{}", v[0].message);
    }

    #[test]
    fn refill_before_release_is_flagged() {
        let c = Agent::Consumer(0);
        let p = Agent::Producer;
        let trace = [
            ev(0.0, p, Action::LoadIssued(Buffer::K), 0, Some(0)),
            ev(1.0, p, Action::LoadIssued(Buffer::K), 1, Some(1)),
            ev(2.0, p, Action::Committed(Buffer::K), 0, Some(0)),
            ev(3.0, c, Action::Consumed(Buffer::K), 0, Some(0)),
            ev(4.0, p, Action::LoadIssued(Buffer::K), 2, Some(0)),
            ev(5.0, c, Action::Released(Buffer::K), 0, Some(0)),
        ];
        let v = validate_events(&trace, &KV, 1, false);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::StageReuseBeforeRelease);
    }

    #[test]
    fn other_protocol_errors() {
        let p = Agent::Producer;
        let c0 = Agent::Consumer(0);
        let c1 = Agent::Consumer(1);
        let trace = [
            ev(3.0, p, Action::Committed(Buffer::K), 0, Some(1)),
            ev(2.0, c1, Action::TokenAcquired, 0, None),
            ev(4.0, c0, Action::TokenPassed, 0, None),
            ev(5.0, p, Action::LoadIssued(Buffer::Q), 0, Some(0)),
        ];
        let kinds: Vec<_> = validate_events(&trace, &KV, 2, true)
            .into_iter()
            .map(|v| v.kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::WrongStage,
                ViolationKind::CommitWithoutLoad,
                ViolationKind::NonMonotoneTime,
                ViolationKind::PingpongOrder,
                ViolationKind::PingpongOrder,
                ViolationKind::UnknownBuffer,
            ]
        );
    }
}
