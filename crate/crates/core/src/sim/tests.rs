use super::*;
use crate::formats::FloatFormat;

const PRESETS: [ScheduleKind; 6] = [
    ScheduleKind::SERIAL,
    ScheduleKind::OVERLAP_ONLY,
    ScheduleKind::WARP_SPECIALIZED,
    ScheduleKind::PINGPONG,
    ScheduleKind::FULL,
    ScheduleKind::FULL_3STAGE,
];

fn run(shape: SimShape, model: &ResourceModel, kind: ScheduleKind) -> SimReport {
    let r = simulate(&shape, model, kind).unwrap();
    let v = r.validate();
    assert!(
        v.is_empty(),
        "{} {shape:?}: {:?}",
        kind.label(),
        &v[..v.len().min(3)]
    );
    r
}

#[test]
fn serial_single_stage_is_sum_of_parts() {
    for (n, d, br, bc) in [(1024, 128, 128, 128), (300, 64, 64, 48), (17, 16, 16, 16)] {
        let m = ResourceModel::default().with_stages(1);
        let shape = SimShape::new(n, d, br, bc);
        let r = run(shape, &m, ScheduleKind::SERIAL);
        let rows = br.min(n) as f64;
        let (nf, df) = (n as f64, d as f64);
        let load = |elems: f64| elems * 2.0 / m.load_bytes_per_cycle + m.load_latency_cycles;
        let mut expected = load(rows * df);
        for j in 0..shape.col_blocks() {
            expected += 2.0 * load(shape.col_len(j) as f64 * df);
        }
        expected += 4.0 * rows * nf * df / m.tensor_flops_per_cycle;
        expected += rows * nf / m.mufu_ops_per_cycle;
        assert!(
            (r.makespan - expected).abs() <= 1e-9 * expected,
            "{n}: {} vs {expected}",
            r.makespan
        );
    }
}

#[test]
fn infinite_bandwidth_hides_softmax() {
    let mut m = ResourceModel::default();
    m.load_bytes_per_cycle = f64::INFINITY;
    m.load_latency_cycles = 0.0;
    for kind in [
        ScheduleKind::FULL,
        ScheduleKind::new(true, false, 2),
        ScheduleKind::FULL_3STAGE,
    ] {
        for n in [2048, 8192] {
            let r = run(SimShape::new(n, 128, 128, 128), &m, kind);
            let gemm = r.matmul_flops / m.tensor_flops_per_cycle;
            assert!(r.softmax_cycle_fraction <= 1.0);
            assert!(
                r.makespan <= 1.05 * gemm,
                "{} n={n}: {} vs {gemm}",
                kind.label(),
                r.makespan
            );
        }
    }
}

#[test]
fn ablation_ordering_on_default_model() {
    let m = ResourceModel::default();
    let shape = SimShape::new(8192, 128, 128, 128);
    let t = |k| run(shape, &m, k).makespan;
    let (full, ws, overlap, serial) = (
        t(ScheduleKind::FULL),
        t(ScheduleKind::WARP_SPECIALIZED),
        t(ScheduleKind::OVERLAP_ONLY),
        t(ScheduleKind::SERIAL),
    );
    assert!(
        full < ws && ws < overlap && overlap < serial,
        "{full} {ws} {overlap} {serial}"
    );
    // Two pingponged warpgroups already hide a softmax half as long as the
    // GEMMs, so the in-warpgroup overlap adds nothing on this model.
    let pingpong = t(ScheduleKind::PINGPONG);
    assert!(pingpong < ws);
    assert!((full - pingpong).abs() <= 1e-9 * full, "{full} {pingpong}");
}

#[test]
fn makespan_non_increasing_in_stages() {
    for kind in PRESETS {
        for (n, d, bc) in [(8192, 128, 128), (1000, 64, 64), (640, 256, 80)] {
            let mut last = f64::INFINITY;
            for s in 1..=4 {
                let m = ResourceModel::default().with_stages(s);
                let r = run(SimShape::new(n, d, 128, bc), &m, kind);
                assert!(
                    r.makespan <= last * (1.0 + 1e-12),
                    "{} n={n} s={s}",
                    kind.label()
                );
                last = r.makespan;
            }
        }
    }
}

// Holds only when loads keep up with compute. With long latency and tiny
// tiles, deeper overlap keeps V stages occupied longer and the last refill
// round trip starts later (see overlap_can_lose_when_latency_bound).
#[test]
fn overlap_never_hurts_when_compute_bound() {
    let bases = [
        ScheduleKind::SERIAL,
        ScheduleKind::WARP_SPECIALIZED,
        ScheduleKind::PINGPONG,
    ];
    let shapes = [
        SimShape::new(1024, 128, 128, 128),
        SimShape::new(640, 64, 64, 64),
    ];
    for base in bases {
        for s in 2..=4 {
            for mufu in [4.0, 16.0, 64.0] {
                for (latency, bw) in [(0.0, f64::INFINITY), (0.0, 1024.0), (100.0, f64::INFINITY)] {
                    for shape in shapes {
                        let mut m = ResourceModel::default().with_stages(s);
                        m.mufu_ops_per_cycle = mufu;
                        m.load_latency_cycles = latency;
                        m.load_bytes_per_cycle = bw;
                        let plain = run(shape, &m, base).makespan;
                        for depth in [2, 3] {
                            let k = ScheduleKind {
                                overlap: depth,
                                ..base
                            };
                            let over = run(shape, &m, k).makespan;
                            assert!(
                                over <= plain * (1.0 + 1e-12),
                                "{} s={s} mufu={mufu} lat={latency} bw={bw} {shape:?}: {over} > {plain}",
                                k.label()
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn overlap_can_lose_when_latency_bound() {
    let mut m = ResourceModel::default().with_stages(4);
    m.mufu_ops_per_cycle = 64.0;
    m.load_latency_cycles = 3000.0;
    m.load_bytes_per_cycle = f64::INFINITY;
    let shape = SimShape::new(200, 64, 64, 32);
    let plain = run(shape, &m, ScheduleKind::WARP_SPECIALIZED).makespan;
    let deep = run(shape, &m, ScheduleKind::new(true, false, 3)).makespan;
    assert!(deep > plain + 2000.0, "{deep} vs {plain}");
}

#[test]
fn pingpong_overlap_raises_tensor_utilization() {
    for mufu in [32.0, 16.0, 8.0, 4.0] {
        let mut m = ResourceModel::default();
        m.mufu_ops_per_cycle = mufu;
        let w = work_model(8192, 128, FloatFormat::Fp16, &m).unwrap();
        assert!(w.softmax_cycle_fraction >= 0.25);
        let shape = SimShape::new(4096, 128, 128, 128);
        let full = run(shape, &m, ScheduleKind::FULL);
        let ws = run(shape, &m, ScheduleKind::WARP_SPECIALIZED);
        assert!(
            full.utilization.tensor > ws.utilization.tensor,
            "mufu={mufu}"
        );
    }
}

#[test]
fn identical_inputs_identical_traces() {
    let m = ResourceModel::default().with_stages(3);
    let shape = SimShape::new(777, 64, 64, 64).with_query_tiles(3);
    let a = run(shape, &m, ScheduleKind::FULL_3STAGE);
    let b = run(shape, &m, ScheduleKind::FULL_3STAGE);
    assert_eq!(a, b);
}

#[test]
fn report_invariants() {
    let m = ResourceModel::default();
    for kind in PRESETS {
        let r = run(
            SimShape::new(1536, 128, 128, 64).with_query_tiles(2),
            &m,
            kind,
        );
        for (busy, util) in [
            (r.busy.tensor, r.utilization.tensor),
            (r.busy.mufu, r.utilization.mufu),
            (r.busy.load, r.utilization.load),
        ] {
            assert!(busy <= r.makespan * (1.0 + 1e-12));
            assert!((util - busy / r.makespan).abs() < 1e-15);
        }
        assert!((r.busy.tensor - r.matmul_flops / 4096.0).abs() < 1e-6 * r.busy.tensor);
        assert_eq!(r.iterations, 24 * 2);
        assert!((r.softmax_cycle_fraction - 0.5).abs() < 1e-12);
    }
}

#[test]
fn pingpong_alternates_gemm_phases() {
    let r = run(
        SimShape::new(1024, 128, 128, 128),
        &ResourceModel::default(),
        ScheduleKind::FULL,
    );
    let order: Vec<Agent> = r
        .trace
        .iter()
        .filter(|e| e.action == Action::TokenAcquired)
        .map(|e| e.agent)
        .collect();
    assert_eq!(order.len(), 2 * 9);
    for (i, a) in order.iter().enumerate() {
        assert_eq!(*a, Agent::Consumer(i % 2));
    }
}

#[test]
fn fp8_doubles_matmul_rate_and_transposes_v() {
    let m = ResourceModel::default();
    let shape = SimShape::new(4096, 128, 128, 128);
    let f16 = run(shape, &m, ScheduleKind::FULL);
    let f8 = run(shape, &m, ScheduleKind::FULL.with_fp8(true));
    assert!((f8.softmax_cycle_fraction - 1.0).abs() < 1e-12);
    assert!(f8.makespan < f16.makespan);
    let transposes = f8
        .trace
        .iter()
        .filter(|e| e.action == Action::TransposeEnd)
        .count();
    assert_eq!(transposes, 32);
    assert!(f16.trace.iter().all(|e| e.action != Action::TransposeStart));
}

#[test]
fn backward_writer_hides_dq_accumulation() {
    let m = ResourceModel::default();
    for n in [512, 4096] {
        let shape = SimShape::new(n, 128, 128, 128);
        let with = simulate_backward(&shape, &m, true).unwrap();
        let without = simulate_backward(&shape, &m, false).unwrap();
        assert!(with.validate().is_empty());
        assert!(without.validate().is_empty());
        assert!(with.makespan < without.makespan, "n={n}");
        let adds = with
            .trace
            .iter()
            .filter(|e| e.agent == Agent::DqWriter && e.action == Action::DqAddEnd)
            .count();
        assert_eq!(adds, 2 * shape.row_blocks());
        assert!(with.busy.dq <= with.makespan);
    }
}

#[test]
fn budget_flags() {
    let shape = SimShape::new(8192, 128, 128, 128);
    let ok = simulate(&shape, &ResourceModel::default(), ScheduleKind::FULL).unwrap();
    assert!(ok.infeasible.is_empty(), "{:?}", ok.infeasible);
    let deep = simulate(
        &shape,
        &ResourceModel::default().with_stages(4),
        ScheduleKind::FULL,
    )
    .unwrap();
    assert!(deep
        .infeasible
        .iter()
        .any(|f| f.starts_with("shared memory")));
    let wide = SimShape::new(8192, 256, 128, 256);
    let r = simulate(&wide, &ResourceModel::default(), ScheduleKind::FULL_3STAGE).unwrap();
    assert!(r.infeasible.iter().any(|f| f.starts_with("registers")));
}

#[test]
fn invalid_inputs() {
    let m = ResourceModel::default();
    assert!(simulate(&SimShape::new(0, 64, 64, 64), &m, ScheduleKind::FULL).is_err());
    assert!(simulate(
        &SimShape::new(128, 64, 64, 64).with_query_tiles(3),
        &m,
        ScheduleKind::FULL
    )
    .is_err());
    assert!(simulate(
        &SimShape::new(128, 64, 64, 64),
        &m,
        ScheduleKind::new(false, true, 2)
    )
    .is_err());
}
