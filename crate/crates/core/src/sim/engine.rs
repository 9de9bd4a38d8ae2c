//! Event loop shared by the forward and backward schedules.
//!
//! Agents run straight-line programs. Tensor cores and the exponential unit
//! are processor-shared between warpgroups (equal split among warpgroups
//! with pending work) and FIFO within one warpgroup. The load channel and
//! the dQ accumulation channel are FIFO queues; a load commits a fixed
//! latency after its transfer ends.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use super::trace::{Action, Agent, Buffer, BufferStages, GemmKind, TraceEvent};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Op {
    /// Waits for the target stage to be free, then starts the transfer.
    Load {
        buf: Buffer,
        seq: usize,
        bytes: f64,
        commit: bool,
    },
    WaitArrival {
        buf: Buffer,
        seq: usize,
    },
    Transpose {
        seq: usize,
        cycles: f64,
    },
    Commit {
        buf: Buffer,
        seq: usize,
    },
    WaitCommit {
        buf: Buffer,
        seq: usize,
    },
    Release {
        buf: Buffer,
        seq: usize,
    },
    /// Asynchronous issue. On completion the GEMM releases `release` (its
    /// shared-memory operand) and, with `pass_token`, hands the pingpong
    /// token on.
    Gemm {
        kind: GemmKind,
        seq: usize,
        flops: f64,
        pass_token: bool,
        release: Option<(Buffer, usize)>,
    },
    WaitGemm {
        kind: GemmKind,
        seq: usize,
    },
    /// Blocking.
    Softmax {
        seq: usize,
        ops: f64,
    },
    Acquire,
    /// Hands a dQ tile to the writer; blocks while all staging slots are taken.
    DqPush {
        seq: usize,
        bytes: f64,
    },
    /// Accumulates a dQ tile without a writer; blocks until done.
    DqAdd {
        seq: usize,
        bytes: f64,
    },
    /// Consumer-wide barrier: arrive, then wait for every consumer.
    Arrive {
        seq: usize,
    },
    WaitBarrier {
        seq: usize,
    },
}

pub(crate) struct Program {
    pub agent: Agent,
    pub ops: Vec<Op>,
}

pub(crate) struct EngineConfig {
    pub consumers: usize,
    pub buffers: Vec<BufferStages>,
    pub tensor_rate: f64,
    pub mufu_rate: f64,
    pub load_bytes_per_cycle: f64,
    pub load_latency: f64,
    pub dq_bytes_per_cycle: f64,
    pub dq_slots: usize,
    pub dq_writer: bool,
}

#[derive(Debug)]
pub(crate) struct EngineOutput {
    pub makespan: f64,
    pub tensor_busy: f64,
    pub mufu_busy: f64,
    pub load_busy: f64,
    pub dq_busy: f64,
    pub trace: Vec<TraceEvent>,
}

#[derive(Clone, Copy, Debug)]
enum Work {
    Gemm {
        kind: GemmKind,
        seq: usize,
        pass_token: bool,
        release: Option<(Buffer, usize)>,
    },
    Softmax {
        seq: usize,
    },
}

struct Job {
    work: Work,
    remaining: f64,
    total: f64,
}

/// Processor-shared unit with one FIFO per warpgroup.
struct Shared {
    rate: f64,
    queues: Vec<VecDeque<Job>>,
    busy: f64,
}

impl Shared {
    fn new(rate: f64, owners: usize) -> Self {
        Self {
            rate,
            queues: (0..owners).map(|_| VecDeque::new()).collect(),
            busy: 0.0,
        }
    }

    fn active(&self) -> usize {
        self.queues.iter().filter(|q| !q.is_empty()).count()
    }

    /// Returns true when the job starts immediately.
    fn push(&mut self, owner: usize, work: Work, amount: f64) -> bool {
        let q = &mut self.queues[owner];
        q.push_back(Job {
            work,
            remaining: amount,
            total: amount,
        });
        q.len() == 1
    }

    fn next_done(&self) -> Option<f64> {
        let a = self.active() as f64;
        self.queues
            .iter()
            .filter_map(|q| q.front())
            .map(|j| j.remaining.max(0.0) * a / self.rate)
            .min_by(f64::total_cmp)
    }

    fn advance(&mut self, dt: f64) {
        let a = self.active();
        if a == 0 || dt <= 0.0 {
            return;
        }
        let share = dt * self.rate / a as f64;
        for j in self.queues.iter_mut().filter_map(|q| q.front_mut()) {
            j.remaining -= share;
        }
        self.busy += dt;
    }

    /// Pops finished heads; the bool is whether a successor started.
    fn take_done(&mut self) -> Vec<(usize, Work, Option<Work>)> {
        let mut done = Vec::new();
        for (owner, q) in self.queues.iter_mut().enumerate() {
            while let Some(j) = q.front() {
                if j.remaining > 1e-9 * j.total.max(1.0) {
                    break;
                }
                let j = q.pop_front().unwrap();
                done.push((owner, j.work, q.front().map(|n| n.work)));
            }
        }
        done
    }
}

/// FIFO transfer channel.
struct Channel {
    bytes_per_cycle: f64,
    latency: f64,
    free_at: f64,
    busy: f64,
}

impl Channel {
    /// Completion time of a transfer submitted at `now`.
    fn submit(&mut self, now: f64, bytes: f64) -> f64 {
        let start = now.max(self.free_at);
        let dt = bytes / self.bytes_per_cycle;
        self.free_at = start + dt;
        self.busy += dt;
        self.free_at + self.latency
    }
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Arrival {
        buf: Buffer,
        seq: usize,
        commit: bool,
        agent: usize,
    },
    Wake {
        agent: usize,
    },
    WriterDone {
        seq: usize,
    },
}

struct AgentState {
    who: Agent,
    ops: Vec<Op>,
    pc: usize,
    asleep: bool,
    done: bool,
}

struct Engine {
    cfg: EngineConfig,
    now: f64,
    agents: Vec<AgentState>,
    depth: HashMap<Buffer, usize>,
    arrived: HashSet<(Buffer, usize)>,
    committed: HashSet<(Buffer, usize)>,
    releases: HashMap<(Buffer, usize), usize>,
    gemm_done: HashSet<(usize, GemmKind, usize)>,
    barrier: HashMap<usize, usize>,
    tensor: Shared,
    mufu: Shared,
    load: Channel,
    dq: Channel,
    dq_queue: VecDeque<(usize, usize, f64)>,
    writer_busy: bool,
    turn: usize,
    heap: BinaryHeap<Reverse<(Time, u64)>>,
    events: HashMap<u64, Event>,
    next_id: u64,
    trace: Vec<TraceEvent>,
}

#[derive(Clone, Copy, PartialEq)]
struct Time(f64);
impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Time {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn consumer_index(who: Agent) -> usize {
    match who {
        Agent::Consumer(w) => w,
        _ => 0,
    }
}

pub(crate) fn run(cfg: EngineConfig, programs: Vec<Program>) -> Result<EngineOutput> {
    let w = cfg.consumers;
    let mut e = Engine {
        depth: cfg.buffers.iter().map(|b| (b.buffer, b.stages)).collect(),
        tensor: Shared::new(cfg.tensor_rate, w),
        mufu: Shared::new(cfg.mufu_rate, w),
        load: Channel {
            bytes_per_cycle: cfg.load_bytes_per_cycle,
            latency: cfg.load_latency,
            free_at: 0.0,
            busy: 0.0,
        },
        dq: Channel {
            bytes_per_cycle: cfg.dq_bytes_per_cycle,
            latency: 0.0,
            free_at: 0.0,
            busy: 0.0,
        },
        cfg,
        now: 0.0,
        agents: programs
            .into_iter()
            .map(|p| AgentState {
                who: p.agent,
                ops: p.ops,
                pc: 0,
                asleep: false,
                done: false,
            })
            .collect(),
        arrived: HashSet::new(),
        committed: HashSet::new(),
        releases: HashMap::new(),
        gemm_done: HashSet::new(),
        barrier: HashMap::new(),
        dq_queue: VecDeque::new(),
        writer_busy: false,
        turn: 0,
        heap: BinaryHeap::new(),
        events: HashMap::new(),
        next_id: 0,
        trace: Vec::new(),
    };
    e.run()?;
    Ok(EngineOutput {
        makespan: e.now,
        tensor_busy: e.tensor.busy,
        mufu_busy: e.mufu.busy,
        load_busy: e.load.busy,
        dq_busy: e.dq.busy,
        trace: e.trace,
    })
}

impl Engine {
    fn log(&mut self, agent: Agent, action: Action, block: usize, stage: Option<usize>) {
        self.trace.push(TraceEvent {
            time: self.now,
            agent,
            action,
            block,
            stage,
        });
    }

    fn stage(&self, buf: Buffer, seq: usize) -> Option<usize> {
        self.depth.get(&buf).map(|s| seq % s)
    }

    fn schedule(&mut self, at: f64, ev: Event) {
        let id = self.next_id;
        self.next_id += 1;
        self.events.insert(id, ev);
        self.heap.push(Reverse((Time(at), id)));
    }

    fn stage_free(&self, buf: Buffer, seq: usize) -> bool {
        let s = self.depth.get(&buf).copied().unwrap_or(1);
        seq < s || self.releases.get(&(buf, seq - s)).copied().unwrap_or(0) >= self.cfg.consumers
    }

    fn all_done(&self) -> bool {
        self.agents.iter().all(|a| a.done) && self.dq_queue.is_empty() && !self.writer_busy
    }

    fn run(&mut self) -> Result<()> {
        loop {
            self.run_agents();
            if self.all_done() {
                return Ok(());
            }
            let mut next = f64::INFINITY;
            if let Some(Reverse((t, _))) = self.heap.peek() {
                next = t.0;
            }
            for dt in [self.tensor.next_done(), self.mufu.next_done()]
                .into_iter()
                .flatten()
            {
                next = next.min(self.now + dt);
            }
            if !next.is_finite() {
                return Err(Error::Deadlock(self.describe_blocked()));
            }
            let dt = next - self.now;
            self.tensor.advance(dt);
            self.mufu.advance(dt);
            self.now = next;
            while let Some(Reverse((t, id))) = self.heap.peek().copied() {
                if t.0 > self.now {
                    break;
                }
                self.heap.pop();
                let ev = self.events.remove(&id).expect("scheduled event");
                self.fire(ev);
            }
            for (owner, work, started) in self.tensor.take_done() {
                self.finish_work(owner, work, started);
            }
            for (owner, work, started) in self.mufu.take_done() {
                self.finish_work(owner, work, started);
            }
        }
    }

    fn fire(&mut self, ev: Event) {
        match ev {
            Event::Arrival {
                buf,
                seq,
                commit,
                agent,
            } => {
                self.arrived.insert((buf, seq));
                if commit {
                    self.committed.insert((buf, seq));
                    let who = self.agents[agent].who;
                    self.log(who, Action::Committed(buf), seq, self.stage(buf, seq));
                }
            }
            Event::Wake { agent } => {
                let a = &self.agents[agent];
                let who = a.who;
                match a.ops[a.pc] {
                    Op::Transpose { seq, .. } => self.log(who, Action::TransposeEnd, seq, None),
                    Op::DqAdd { seq, .. } => self.log(who, Action::DqAddEnd, seq, None),
                    _ => {}
                }
                let a = &mut self.agents[agent];
                a.asleep = false;
                a.pc += 1;
            }
            Event::WriterDone { seq } => {
                self.log(Agent::DqWriter, Action::DqAddEnd, seq, None);
                self.writer_busy = false;
            }
        }
    }

    fn finish_work(&mut self, owner: usize, work: Work, started: Option<Work>) {
        let who = Agent::Consumer(owner);
        match work {
            Work::Gemm {
                kind,
                seq,
                pass_token,
                release,
            } => {
                self.log(who, Action::GemmEnd(kind), seq, None);
                self.gemm_done.insert((owner, kind, seq));
                if let Some((buf, bseq)) = release {
                    *self.releases.entry((buf, bseq)).or_default() += 1;
                    self.log(who, Action::Released(buf), bseq, self.stage(buf, bseq));
                }
                if pass_token {
                    self.log(who, Action::TokenPassed, seq, None);
                    self.turn = (owner + 1) % self.cfg.consumers;
                }
            }
            Work::Softmax { seq } => {
                self.log(who, Action::SoftmaxEnd, seq, None);
                let idx = self
                    .agents
                    .iter()
                    .position(|a| a.who == who)
                    .expect("consumer agent");
                let a = &mut self.agents[idx];
                a.asleep = false;
                a.pc += 1;
            }
        }
        if let Some(Work::Gemm { kind, seq, .. }) = started {
            self.log(who, Action::GemmStart(kind), seq, None);
        }
    }

    fn run_agents(&mut self) {
        loop {
            let mut progressed = false;
            // One op per agent per pass, so agents ready at the same
            // instant interleave their channel requests.
            for i in 0..self.agents.len() {
                progressed |= self.step(i);
            }
            if self.cfg.dq_writer && !self.writer_busy {
                if let Some((_, seq, bytes)) = self.dq_queue.pop_front() {
                    self.log(Agent::DqWriter, Action::DqAddStart, seq, None);
                    let at = self.dq.submit(self.now, bytes);
                    self.writer_busy = true;
                    self.schedule(at, Event::WriterDone { seq });
                    progressed = true;
                }
            }
            if !progressed {
                return;
            }
        }
    }

    /// Executes at most one op of agent `i`; false when blocked or finished.
    fn step(&mut self, i: usize) -> bool {
        let a = &self.agents[i];
        if a.done || a.asleep {
            return false;
        }
        if a.pc == a.ops.len() {
            self.agents[i].done = true;
            return false;
        }
        let who = a.who;
        let owner = consumer_index(who);
        match a.ops[a.pc] {
            Op::Load {
                buf,
                seq,
                bytes,
                commit,
            } => {
                if !self.stage_free(buf, seq) {
                    return false;
                }
                self.log(who, Action::LoadIssued(buf), seq, self.stage(buf, seq));
                let at = self.load.submit(self.now, bytes);
                self.schedule(
                    at,
                    Event::Arrival {
                        buf,
                        seq,
                        commit,
                        agent: i,
                    },
                );
            }
            Op::WaitArrival { buf, seq } => {
                if !self.arrived.contains(&(buf, seq)) {
                    return false;
                }
            }
            Op::Transpose { seq, cycles } => {
                self.log(who, Action::TransposeStart, seq, None);
                self.agents[i].asleep = true;
                self.schedule(self.now + cycles, Event::Wake { agent: i });
                return true;
            }
            Op::Commit { buf, seq } => {
                self.committed.insert((buf, seq));
                self.log(who, Action::Committed(buf), seq, self.stage(buf, seq));
            }
            Op::WaitCommit { buf, seq } => {
                if !self.committed.contains(&(buf, seq)) {
                    return false;
                }
                self.log(who, Action::Consumed(buf), seq, self.stage(buf, seq));
            }
            Op::Release { buf, seq } => {
                *self.releases.entry((buf, seq)).or_default() += 1;
                self.log(who, Action::Released(buf), seq, self.stage(buf, seq));
            }
            Op::Gemm {
                kind,
                seq,
                flops,
                pass_token,
                release,
            } => {
                let work = Work::Gemm {
                    kind,
                    seq,
                    pass_token,
                    release,
                };
                if self.tensor.push(owner, work, flops) {
                    self.log(who, Action::GemmStart(kind), seq, None);
                }
            }
            Op::WaitGemm { kind, seq } => {
                if !self.gemm_done.contains(&(owner, kind, seq)) {
                    return false;
                }
            }
            Op::Softmax { seq, ops } => {
                self.mufu.push(owner, Work::Softmax { seq }, ops);
                self.log(who, Action::SoftmaxStart, seq, None);
                self.agents[i].asleep = true;
                return true;
            }
            Op::Acquire => {
                if self.turn != owner {
                    return false;
                }
                self.log(who, Action::TokenAcquired, 0, None);
            }
            Op::DqPush { seq, bytes } => {
                if self.dq_queue.len() + usize::from(self.writer_busy) >= self.cfg.dq_slots {
                    return false;
                }
                self.dq_queue.push_back((owner, seq, bytes));
                self.log(who, Action::DqQueued, seq, None);
            }
            Op::DqAdd { seq, bytes } => {
                self.log(who, Action::DqAddStart, seq, None);
                let at = self.dq.submit(self.now, bytes);
                self.agents[i].asleep = true;
                self.schedule(at, Event::Wake { agent: i });
                return true;
            }
            Op::Arrive { seq } => *self.barrier.entry(seq).or_default() += 1,
            Op::WaitBarrier { seq } => {
                if self.barrier.get(&seq).copied().unwrap_or(0) < self.cfg.consumers {
                    return false;
                }
            }
        }
        self.agents[i].pc += 1;
        true
    }

    fn describe_blocked(&self) -> String {
        let mut parts = Vec::new();
        for a in self.agents.iter().filter(|a| !a.done) {
            let what = match a.ops[a.pc] {
                Op::Load { buf, seq, .. } => {
                    let s = self.depth.get(&buf).copied().unwrap_or(1);
                    let prev = seq - s;
                    let released = self.releases.get(&(buf, prev)).copied().unwrap_or(0);
                    format!(
                        "waits to load {buf} block {seq} into stage {}, which needs block {prev} released by all consumers ({released} of {} so far)",
                        seq % s,
                        self.cfg.consumers
                    )
                }
                Op::WaitArrival { buf, seq } => format!("waits for arrival of {buf} block {seq}"),
                Op::WaitCommit { buf, seq } => format!(
                    "waits for commit of {buf} block {seq} (stage {})",
                    self.stage(buf, seq).unwrap_or(0)
                ),
                Op::WaitGemm { kind, seq } => format!("waits for gemm {kind} of iteration {seq}"),
                Op::Acquire => format!("waits for the pingpong token (held by turn {})", self.turn),
                Op::DqPush { seq, .. } => format!("waits for a free dQ slot for iteration {seq}"),
                Op::WaitBarrier { seq } => {
                    format!("waits at the consumer barrier of iteration {seq}")
                }
                op => format!("is stuck at {op:?}"),
            };
            parts.push(format!("{} {what}", a.who));
        }
        parts.join("; ")
    }
}
