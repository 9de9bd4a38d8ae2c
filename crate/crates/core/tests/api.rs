use flashlab::dense::{sample_normal_matrix, Matrix, Stream};
use flashlab::flash::{flash_bwd, flash_fwd, Schedule, TileConfig};
use flashlab::fp8::{fp8_flash_fwd, Fp8AttentionConfig};
use flashlab::reference::{gqa_expand, std_attention_fwd, AttentionInputs};
use flashlab::sim::{simulate, validate_trace, ResourceModel, ScheduleKind, SimShape};
use flashlab::Error;

fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
    (
        sample_normal_matrix(n, d, seed, Stream::Query),
        sample_normal_matrix(n, d, seed, Stream::Key),
        sample_normal_matrix(n, d, seed, Stream::Value),
    )
}

#[test]
fn shape_errors_are_reported() {
    let (q, k, _) = qkv(8, 4, 1);
    let v = Matrix::zeros(9, 4);
    assert!(matches!(
        AttentionInputs::new(&q, &k, &v),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(TileConfig::new(0, 16).is_err());
    let (k, v) = (vec![k.clone(); 3], vec![v; 3]);
    assert!(matches!(
        gqa_expand(&k, &v, 16, 3),
        Err(Error::HeadGrouping {
            heads: 16,
            kv_heads: 3
        })
    ));
}

#[test]
fn tiles_larger_than_the_sequence() {
    let (q, k, v) = qkv(5, 8, 2);
    let inputs = AttentionInputs::new(&q, &k, &v).unwrap().with_causal(true);
    let dense = std_attention_fwd(&inputs).unwrap();
    for schedule in Schedule::ALL {
        let out = flash_fwd(&inputs, &TileConfig::new(64, 64).unwrap(), schedule).unwrap();
        assert!(out.o.max_abs_diff(&dense.o) <= 1e-12);
    }
}

#[test]
fn backward_is_deterministic() {
    let (q, k, v) = qkv(40, 16, 3);
    let d_o = sample_normal_matrix(40, 16, 3, Stream::OutputGrad);
    let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
    let tile = TileConfig::new(16, 8).unwrap();
    let fwd = flash_fwd(&inputs, &tile, Schedule::TwoStage).unwrap();
    let a = flash_bwd(&inputs, &fwd.o, &d_o, &fwd.l, &tile).unwrap();
    let b = flash_bwd(&inputs, &fwd.o, &d_o, &fwd.l, &tile).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fp8_forward_is_close_on_gaussian_inputs() {
    let (q, k, v) = qkv(256, 64, 4);
    let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
    let exact = std_attention_fwd(&inputs).unwrap().o;
    let cfg = Fp8AttentionConfig::full(4).with_tile(TileConfig::new(64, 64).unwrap());
    let out = fp8_flash_fwd(&inputs, &cfg).unwrap();
    assert!(out.o.max_abs_diff(&exact) < 0.1);
    assert!(fp8_flash_fwd(&inputs, &cfg).unwrap().o == out.o);
}

#[test]
fn simulator_runs_are_repeatable_and_valid() {
    let shape = SimShape::new(2048, 128, 128, 128);
    let model = ResourceModel::default();
    let a = simulate(&shape, &model, ScheduleKind::FULL).unwrap();
    let b = simulate(&shape, &model, ScheduleKind::FULL).unwrap();
    assert_eq!(a.makespan, b.makespan);
    assert_eq!(a.trace.len(), b.trace.len());
    assert!(validate_trace(&a).is_empty());
}
