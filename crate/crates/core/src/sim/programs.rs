//! Agent programs for each schedule.

use super::engine::{Op, Program};
use super::model::{ResourceModel, ScheduleKind, SimShape};
use super::trace::{Agent, Buffer, GemmKind};

/// Same fallback rule as the numerical schedules: 2-stage needs two key
/// blocks, 3-stage four; otherwise the basic loop runs.
pub(crate) fn effective_overlap(overlap: u8, blocks: usize) -> u8 {
    match overlap {
        3 if blocks >= 4 => 3,
        2 if blocks >= 2 => 2,
        _ => 1,
    }
}

/// Ops that bring one buffer block in, as issued by whoever does the loads.
fn fetch(ops: &mut Vec<Op>, buf: Buffer, seq: usize, bytes: f64, transpose: Option<f64>) {
    match transpose {
        Some(cycles) => ops.extend([
            Op::Load {
                buf,
                seq,
                bytes,
                commit: false,
            },
            Op::WaitArrival { buf, seq },
            Op::Transpose { seq, cycles },
            Op::Commit { buf, seq },
        ]),
        None => ops.push(Op::Load {
            buf,
            seq,
            bytes,
            commit: true,
        }),
    }
}

struct Forward<'a> {
    shape: &'a SimShape,
    model: &'a ResourceModel,
    kind: ScheduleKind,
    elem: f64,
}

impl Forward<'_> {
    fn tiles(&self) -> usize {
        self.shape.col_blocks()
    }

    fn seq(&self, t: usize, j: usize) -> usize {
        t * self.tiles() + j
    }

    fn bytes(&self, buf: Buffer, t: usize, j: usize) -> f64 {
        let d = self.shape.headdim as f64;
        match buf {
            Buffer::Q => self.shape.row_len(t) as f64 * d * self.elem,
            _ => self.shape.col_len(j) as f64 * d * self.elem,
        }
    }

    fn transpose(&self, buf: Buffer, t: usize, j: usize) -> Option<f64> {
        (self.kind.fp8 && buf == Buffer::V)
            .then(|| self.bytes(buf, t, j) / self.model.transpose_bytes_per_cycle)
    }

    fn fetch(&self, ops: &mut Vec<Op>, buf: Buffer, t: usize, j: usize) {
        let seq = if buf == Buffer::Q { t } else { self.seq(t, j) };
        fetch(
            ops,
            buf,
            seq,
            self.bytes(buf, t, j),
            self.transpose(buf, t, j),
        );
    }

    /// One load stream in the order consumer 0 waits for blocks, so the FIFO
    /// load queue never serves a block ahead of one needed earlier. With FP8
    /// a second stream transposes V as it lands and commits it.
    fn producers(&self) -> Vec<Program> {
        let tiles = self.tiles();
        let (mut loads, mut transposes) = (Vec::new(), Vec::new());
        let mut seen = std::collections::HashSet::new();
        for op in self.consumer(0).ops {
            let Op::WaitCommit { buf, seq } = op else {
                continue;
            };
            if !seen.insert((buf, seq)) {
                continue;
            }
            let (t, j) = if buf == Buffer::Q {
                (seq, 0)
            } else {
                (seq / tiles, seq % tiles)
            };
            let bytes = self.bytes(buf, t, j);
            match self.transpose(buf, t, j) {
                Some(cycles) => {
                    loads.push(Op::Load {
                        buf,
                        seq,
                        bytes,
                        commit: false,
                    });
                    transposes.extend([
                        Op::WaitArrival { buf, seq },
                        Op::Transpose { seq, cycles },
                        Op::Commit { buf, seq },
                    ]);
                }
                None => loads.push(Op::Load {
                    buf,
                    seq,
                    bytes,
                    commit: true,
                }),
            }
        }
        let mut out = vec![Program {
            agent: Agent::Producer,
            ops: loads,
        }];
        if !transposes.is_empty() {
            out.push(Program {
                agent: Agent::Producer,
                ops: transposes,
            });
        }
        out
    }

    fn consumer(&self, w: usize) -> Program {
        let mut e = Emit {
            f: self,
            w,
            t: 0,
            ops: Vec::new(),
        };
        let n = self.tiles();
        let depth = effective_overlap(self.kind.overlap, n);
        for t in 0..self.shape.query_tiles {
            e.t = t;
            e.need(Buffer::Q, 0);
            match (depth, self.kind.pingpong) {
                (1, false) => {
                    for j in 0..n {
                        e.need(Buffer::K, j);
                        e.gemm(GemmKind::Qk, j, false);
                        e.wait(GemmKind::Qk, j);
                        e.softmax(j);
                        e.need(Buffer::V, j);
                        e.gemm(GemmKind::Pv, j, false);
                        e.wait(GemmKind::Pv, j);
                    }
                }
                (1, true) => {
                    // GEMM phases [QK 0], [PV j-1, QK j], [PV n-1].
                    e.need(Buffer::K, 0);
                    e.acquire();
                    e.gemm(GemmKind::Qk, 0, true);
                    e.wait(GemmKind::Qk, 0);
                    e.softmax(0);
                    for j in 1..n {
                        e.need(Buffer::V, j - 1);
                        e.need(Buffer::K, j);
                        e.acquire();
                        e.gemm(GemmKind::Pv, j - 1, false);
                        e.gemm(GemmKind::Qk, j, true);
                        e.wait(GemmKind::Qk, j);
                        e.softmax(j);
                    }
                    e.tail_pv(n - 1);
                }
                (2, _) => {
                    e.need(Buffer::K, 0);
                    e.acquire();
                    e.gemm(GemmKind::Qk, 0, true);
                    e.wait(GemmKind::Qk, 0);
                    e.softmax(0);
                    for j in 1..n {
                        e.need(Buffer::K, j);
                        if self.kind.pingpong {
                            e.need(Buffer::V, j - 1);
                            e.acquire();
                        }
                        e.gemm(GemmKind::Qk, j, false);
                        if !self.kind.pingpong {
                            e.need(Buffer::V, j - 1);
                        }
                        e.gemm(GemmKind::Pv, j - 1, true);
                        e.wait(GemmKind::Qk, j);
                        e.softmax(j);
                        e.wait(GemmKind::Pv, j - 1);
                    }
                    e.tail_pv(n - 1);
                }
                _ => {
                    for j in 0..2 {
                        e.need(Buffer::K, j);
                        e.acquire();
                        e.gemm(GemmKind::Qk, j, true);
                        e.wait(GemmKind::Qk, j);
                        if j == 0 {
                            e.softmax(0);
                        }
                    }
                    for j in 2..n {
                        e.need(Buffer::K, j);
                        if self.kind.pingpong {
                            e.need(Buffer::V, j - 2);
                            e.acquire();
                        }
                        e.gemm(GemmKind::Qk, j, false);
                        if !self.kind.pingpong {
                            e.need(Buffer::V, j - 2);
                        }
                        e.gemm(GemmKind::Pv, j - 2, true);
                        e.softmax(j - 1);
                        e.wait(GemmKind::Qk, j);
                        e.wait(GemmKind::Pv, j - 2);
                    }
                    e.need(Buffer::V, n - 2);
                    e.acquire();
                    e.gemm(GemmKind::Pv, n - 2, true);
                    e.softmax(n - 1);
                    e.wait(GemmKind::Pv, n - 2);
                    e.tail_pv(n - 1);
                }
            }
            e.release(Buffer::Q, 0);
        }
        Program {
            agent: Agent::Consumer(w),
            ops: e.ops,
        }
    }
}

struct Emit<'a, 'b> {
    f: &'b Forward<'a>,
    w: usize,
    t: usize,
    ops: Vec<Op>,
}

impl Emit<'_, '_> {
    fn seq(&self, buf: Buffer, j: usize) -> usize {
        if buf == Buffer::Q {
            self.t
        } else {
            self.f.seq(self.t, j)
        }
    }

    fn rows(&self) -> f64 {
        self.f.shape.row_len(self.t) as f64 / self.f.model.warpgroups as f64
    }

    /// Without warp specialization the first consumer loads synchronously.
    fn need(&mut self, buf: Buffer, j: usize) {
        if !self.f.kind.warp_specialized && self.w == 0 {
            self.f.fetch(&mut self.ops, buf, self.t, j);
        }
        let seq = self.seq(buf, j);
        self.ops.push(Op::WaitCommit { buf, seq });
    }

    fn release(&mut self, buf: Buffer, j: usize) {
        let seq = self.seq(buf, j);
        self.ops.push(Op::Release { buf, seq });
    }

    fn acquire(&mut self) {
        if self.f.kind.pingpong {
            self.ops.push(Op::Acquire);
        }
    }

    /// The stage holding the K or V block is released when the GEMM reading
    /// it completes.
    fn gemm(&mut self, kind: GemmKind, j: usize, ends_phase: bool) {
        let operand = if kind == GemmKind::Qk {
            Buffer::K
        } else {
            Buffer::V
        };
        let flops =
            2.0 * self.rows() * self.f.shape.col_len(j) as f64 * self.f.shape.headdim as f64;
        self.ops.push(Op::Gemm {
            kind,
            seq: self.f.seq(self.t, j),
            flops,
            pass_token: ends_phase && self.f.kind.pingpong,
            release: Some((operand, self.f.seq(self.t, j))),
        });
    }

    fn wait(&mut self, kind: GemmKind, j: usize) {
        let seq = self.f.seq(self.t, j);
        self.ops.push(Op::WaitGemm { kind, seq });
    }

    fn softmax(&mut self, j: usize) {
        let ops = self.rows() * self.f.shape.col_len(j) as f64;
        self.ops.push(Op::Softmax {
            seq: self.f.seq(self.t, j),
            ops,
        });
    }

    fn tail_pv(&mut self, j: usize) {
        self.need(Buffer::V, j);
        self.acquire();
        self.gemm(GemmKind::Pv, j, true);
        self.wait(GemmKind::Pv, j);
    }
}

pub(crate) fn forward(shape: &SimShape, model: &ResourceModel, kind: ScheduleKind) -> Vec<Program> {
    let f = Forward {
        shape,
        model,
        kind,
        elem: if kind.fp8 { 1.0 } else { 2.0 },
    };
    let mut programs = Vec::new();
    if kind.warp_specialized {
        programs.extend(f.producers());
    }
    programs.extend((0..model.warpgroups).map(|w| f.consumer(w)));
    programs
}

/// Key block `0` stays resident while the producer streams `Q_i`/`dO_i`.
/// Each consumer owns an equal share of the key rows.
pub(crate) fn backward(shape: &SimShape, model: &ResourceModel, dq_writer: bool) -> Vec<Program> {
    let d = shape.headdim as f64;
    let cols = shape.col_len(0) as f64;
    let kv_bytes = cols * d * 2.0;
    let mut producer = Vec::new();
    fetch(&mut producer, Buffer::K, 0, kv_bytes, None);
    fetch(&mut producer, Buffer::V, 0, kv_bytes, None);
    for i in 0..shape.row_blocks() {
        let bytes = shape.row_len(i) as f64 * d * 2.0;
        fetch(&mut producer, Buffer::Q, i, bytes, None);
        fetch(&mut producer, Buffer::DO, i, bytes, None);
    }
    let mut programs = vec![Program {
        agent: Agent::Producer,
        ops: producer,
    }];
    let share = cols / model.warpgroups as f64;
    for w in 0..model.warpgroups {
        let mut ops = vec![
            Op::WaitCommit {
                buf: Buffer::K,
                seq: 0,
            },
            Op::WaitCommit {
                buf: Buffer::V,
                seq: 0,
            },
        ];
        for i in 0..shape.row_blocks() {
            let rows = shape.row_len(i) as f64;
            let flops = 2.0 * rows * share * d;
            let gemm = |kind| Op::Gemm {
                kind,
                seq: i,
                flops,
                pass_token: false,
                release: None,
            };
            ops.extend([
                Op::WaitCommit {
                    buf: Buffer::Q,
                    seq: i,
                },
                gemm(GemmKind::Qk),
                Op::WaitCommit {
                    buf: Buffer::DO,
                    seq: i,
                },
                gemm(GemmKind::Dp),
                Op::WaitGemm {
                    kind: GemmKind::Qk,
                    seq: i,
                },
                Op::Softmax {
                    seq: i,
                    ops: rows * share,
                },
                Op::WaitGemm {
                    kind: GemmKind::Dp,
                    seq: i,
                },
                gemm(GemmKind::Dv),
                gemm(GemmKind::Dk),
                gemm(GemmKind::Dq),
                Op::WaitGemm {
                    kind: GemmKind::Dq,
                    seq: i,
                },
                Op::Release {
                    buf: Buffer::Q,
                    seq: i,
                },
                Op::Release {
                    buf: Buffer::DO,
                    seq: i,
                },
            ]);
            // The CTA writes one fp32 dQ tile per query block; each warpgroup
            // stages its share of it.
            let bytes = rows * d * 4.0 / model.warpgroups as f64;
            if dq_writer {
                ops.push(Op::DqPush { seq: i, bytes });
            } else {
                // Without a writer the warpgroups add their shares of the
                // shared tile themselves and meet before reusing it.
                ops.extend([
                    Op::DqAdd { seq: i, bytes },
                    Op::Arrive { seq: i },
                    Op::WaitBarrier { seq: i },
                ]);
            }
        }
        ops.extend([
            Op::Release {
                buf: Buffer::K,
                seq: 0,
            },
            Op::Release {
                buf: Buffer::V,
                seq: 0,
            },
        ]);
        programs.push(Program {
            agent: Agent::Consumer(w),
            ops,
        });
    }
    programs
}
