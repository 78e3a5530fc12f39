mod common;

use common::*;
use embrank::merge::*;
use embrank::Rows;
use proptest::prelude::*;

const SHAPES: [(&str, usize, usize); 3] = [("emb", 5, 7), ("proj.bias", 1, 7), ("proj.weight", 7, 7)];

#[test]
fn one_hot_weights_reproduce_inputs_bitwise() {
    let inputs: Vec<ParamSet> = (0..3).map(|s| param_set(s, &SHAPES)).collect();
    for k in 0..3 {
        let mut w = vec![0.0; 3];
        w[k] = 1.0;
        let m = merge_checkpoints(&inputs, &w).unwrap();
        for ((_, a), (_, b)) in m.iter().zip(inputs[k].iter()) {
            let bits = |r: &Rows| r.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn opposite_inputs_cancel() {
    let a = param_set(4, &SHAPES);
    let m = merge_checkpoints(&[a.clone(), a.scaled(-1.0).unwrap()], &[0.5, 0.5]).unwrap();
    assert!(m.iter().all(|(_, r)| r.data().iter().all(|x| *x == 0.0)));
}

#[test]
fn grid_search_finds_known_best() {
    assert_eq!(merge_search_pick(0.7), vec![0.30000000000000004, 0.7]);
    assert_eq!(merge_search_pick(0.0), vec![1.0, 0.0]);
}

#[test]
fn file_round_trip() {
    let a = param_set(5, &SHAPES);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.qvlp");
    a.save(&p).unwrap();
    assert_eq!(ParamSet::load(&p).unwrap(), a);
}

#[test]
fn invalid_merges() {
    let a = param_set(1, &SHAPES);
    let b = param_set(2, &SHAPES[..2]);
    assert!(matches!(merge_checkpoints(&[a.clone(), b], &[0.5, 0.5]), Err(embrank::Error::ManifestMismatch(_))));
    assert!(merge_checkpoints(std::slice::from_ref(&a), &[1.0]).is_err());
    assert!(merge_checkpoints(&[a.clone(), a.clone()], &[0.0, 0.0]).is_err());
    assert!(merge_checkpoints(&[a.clone(), a.clone()], &[-1.0, 2.0]).is_err());
    assert!(merge_checkpoints(&[a.clone(), a.clone()], &[1.0]).is_err());
    assert!(grid_search_merge(&[a.clone(), a], &[], |_| Ok(0.0)).is_err());
}

proptest! {
    #[test]
    fn merge_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), w in 0.0f64..1.0) {
        let a = param_set(s1, &SHAPES);
        let b = param_set(s2, &SHAPES);
        let m = merge_checkpoints(&[a.clone(), b.clone()], &[1.0 - w, w]).unwrap();
        for (((_, r), (_, x)), (_, y)) in m.iter().zip(a.iter()).zip(b.iter()) {
            for ((v, p), q) in r.data().iter().zip(x.data()).zip(y.data()) {
                prop_assert!((v - ((1.0 - w) * p + w * q)).abs() <= 1e-12 * (1.0 + p.abs() + q.abs()));
            }
        }
    }

    #[test]
    fn weight_scale_does_not_matter(s1 in any::<u64>(), s2 in any::<u64>(), w in 0.01f64..1.0, c in 0.01f64..100.0) {
        let inputs = [param_set(s1, &SHAPES), param_set(s2, &SHAPES)];
        let m1 = merge_checkpoints(&inputs, &[1.0 - w + 0.01, w]).unwrap();
        let m2 = merge_checkpoints(&inputs, &[c * (1.0 - w + 0.01), c * w]).unwrap();
        for ((_, a), (_, b)) in m1.iter().zip(m2.iter()) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn merge_commutes_with_scaling(s1 in any::<u64>(), s2 in any::<u64>(), w in 0.0f64..1.0, c in -10.0f64..10.0) {
        let (a, b) = (param_set(s1, &SHAPES), param_set(s2, &SHAPES));
        let lhs = merge_checkpoints(&[a.scaled(c).unwrap(), b.scaled(c).unwrap()], &[1.0 - w, w]).unwrap();
        let rhs = merge_checkpoints(&[a, b], &[1.0 - w, w]).unwrap().scaled(c).unwrap();
        for ((_, x), (_, y)) in lhs.iter().zip(rhs.iter()) {
            prop_assert!(x.max_abs_diff(y) <= 1e-11);
        }
    }
}
