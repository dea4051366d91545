use apa_numerics::suite::{run_suite, CASE_NAMES};
use apa_numerics::{attention, multi_head_attention, softmax, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_passes_grad_check_in_f64() {
    let results = run_suite::<f64>(100, 0xC0FFEE, 1e-5).unwrap();
    assert_eq!(results.len(), CASE_NAMES.len());
    for (name, err) in results {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_op_passes_grad_check_in_f32() {
    for (name, err) in run_suite::<f32>(100, 7, 1e-3).unwrap() {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn tape_attention_matches_composed_softmax() {
    let q = Tensor::new([3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1f64]).unwrap();
    let k = Tensor::new([2, 2], vec![1.0, 0.2, -0.4, 0.9]).unwrap();
    let v = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
    let direct = attention(&q, &k, &v).unwrap();

    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let kt = t.transpose(kv).unwrap();
    let s = t.matmul(qv, kt).unwrap();
    let s = t.scale(s, 1.0 / 2f64.sqrt());
    let p = t.softmax_rows(s).unwrap();
    let composed = t.matmul(p, vv).unwrap();
    assert!(direct.max_abs_diff(t.value(composed)) < 1e-14);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(x in proptest::collection::vec(-20.0f64..20.0, 1..12), shift in -50.0f64..50.0) {
        let a = softmax(&Tensor::new([x.len()], x.clone()).unwrap(), 0).unwrap();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let b = softmax(&Tensor::new([x.len()], x.iter().map(|v| v - max).collect()).unwrap(), 0).unwrap();
        let c = softmax(&Tensor::new([x.len()], x.iter().map(|v| v + shift).collect()).unwrap(), 0).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.max_abs_diff(&c) < 1e-12);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn attention_rows_stay_in_value_hull(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 2), heads in 1usize..=2) {
        let out = multi_head_attention(&q, &k, &v, heads).unwrap();
        for col in 0..2 {
            let vals: Vec<f64> = (0..5).map(|r| v.data()[r * 2 + col]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for row in 0..3 {
                let o = out.data()[row * 2 + col];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
        let again = multi_head_attention(&q, &k, &v, heads).unwrap();
        prop_assert_eq!(out, again);
    }
}
