use diffwin::windowmask::{
    build_structure, discrete_mask, discrete_mask_matrix, expectation_oracle, segment_soft_mask, soft_mask,
    soft_mask_by_matmul, soft_mask_on_tape, BoundaryScores, MaskMode, StructureCache,
};
use diffwin::{Tape, Tensor};
use proptest::prelude::*;

/// `[m, n]` rows normalised from positive weights, with occasional exact
/// zeros so point masses and sparse rows appear.
fn distributions(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop_oneof![4 => 0.001f64..10.0, 1 => Just(0.0)], m * n).prop_map(move |w| {
        let mut data = Vec::with_capacity(m * n);
        for row in w.chunks(n) {
            let mut row = row.to_vec();
            if row.iter().all(|&x| x == 0.0) {
                row[0] = 1.0;
            }
            let z: f64 = row.iter().sum();
            data.extend(row.iter().map(|x| x / z));
        }
        Tensor::new(vec![m, n], data).unwrap()
    })
}

fn scores() -> impl Strategy<Value = BoundaryScores> {
    (1usize..5, 1usize..17).prop_flat_map(|(m, n)| {
        (distributions(m, n), distributions(m, n)).prop_map(|(l, r)| BoundaryScores::new(l, r).unwrap())
    })
}

proptest! {
    #[test]
    fn soft_mask_is_the_expected_discrete_mask(bs in scores()) {
        let s = build_structure(bs.keys(), 1).unwrap();
        let soft = soft_mask(&bs, &s).unwrap();
        let oracle = expectation_oracle(&bs);
        prop_assert!(soft.values().max_abs_diff(oracle.values()) <= 1e-12);
        prop_assert_eq!(soft.mode(), MaskMode::SoftToken);
    }

    #[test]
    fn soft_mask_lies_in_zero_two(bs in scores()) {
        let s = build_structure(bs.keys(), 1).unwrap();
        let soft = soft_mask(&bs, &s).unwrap();
        prop_assert!(soft.values().data().iter().all(|&x| (-1e-15..=2.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn boundary_roles_are_symmetric(bs in scores()) {
        let s = build_structure(bs.keys(), 1).unwrap();
        let a = soft_mask(&bs, &s).unwrap();
        let b = soft_mask(&bs.swapped(), &s).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) <= 1e-15);
    }

    #[test]
    fn scan_and_matrix_routes_agree(bs in scores(), b in 1usize..6) {
        let n = bs.keys();
        let s = build_structure(n, b).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(bs.phi_left().clone());
        let r = tape.constant(bs.phi_right().clone());
        let j = tape.constant(s.segment.clone());
        let scanned = soft_mask_on_tape(&mut tape, l, r, b).unwrap();
        let multiplied = soft_mask_by_matmul(&mut tape, l, r, j).unwrap();
        prop_assert!(tape.value(scanned).max_abs_diff(tape.value(multiplied)) <= 1e-12);
    }

    #[test]
    fn segment_mask_is_constant_per_segment(bs in scores(), b in 1usize..7) {
        let s = build_structure(bs.keys(), b).unwrap();
        let seg = segment_soft_mask(&bs, &s).unwrap();
        prop_assert_eq!(seg.segment_size(), b);
        for q in 0..seg.values().rows() {
            for block in seg.values().row(q).chunks(b) {
                prop_assert!(block.iter().all(|&x| x == block[0]));
            }
        }
    }

    #[test]
    fn segment_mask_dominates_token_mask_on_point_masses(n in 1usize..17, l in 0usize..16, r in 0usize..16, b in 1usize..6) {
        let (l, r) = (l % n + 1, r % n + 1);
        let hot = |k: usize| {
            let mut v = vec![0.0; n];
            v[k - 1] = 1.0;
            Tensor::new(vec![1, n], v).unwrap()
        };
        let bs = BoundaryScores::new(hot(l), hot(r)).unwrap();
        let token = soft_mask(&bs, &build_structure(n, 1).unwrap()).unwrap();
        let seg = segment_soft_mask(&bs, &build_structure(n, b).unwrap()).unwrap();
        for (t, s) in token.values().data().iter().zip(seg.values().data()) {
            prop_assert!(s >= t);
        }
    }

    #[test]
    fn discrete_mask_is_an_interval(n in 1usize..20, l in 0usize..20, r in 0usize..20) {
        let (l, r) = (l % n + 1, r % n + 1);
        let row = discrete_mask(l, r, n).unwrap();
        for (i, &x) in row.iter().enumerate() {
            let inside = l <= i + 1 && i + 1 <= r;
            prop_assert_eq!(x, if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn structure_examples() {
    let s = build_structure(3, 1).unwrap();
    assert_eq!(s.upper.data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let s = build_structure(4, 2).unwrap();
    let want = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    assert_eq!(s.segment.data(), &want);
    let s = build_structure(4, 1).unwrap();
    assert_eq!(s.segment, s.upper);
    // A segment longer than the sequence covers all of it.
    let s = build_structure(3, 5).unwrap();
    assert!(s.segment.data().iter().all(|&x| x == 1.0));
    assert!(build_structure(3, 0).is_err());
}

#[test]
fn discrete_examples() {
    assert_eq!(
        discrete_mask(3, 8, 10).unwrap(),
        vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
    );
    assert_eq!(discrete_mask(1, 1, 3).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(discrete_mask(3, 1, 3).unwrap(), vec![0.0, 0.0, 0.0]);
    assert!(discrete_mask(0, 2, 3).is_err());
    assert!(discrete_mask(1, 4, 3).is_err());
    let m = discrete_mask_matrix(&[(1, 2), (2, 3)], 3).unwrap();
    assert_eq!(m.values().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert_eq!(m.mode(), MaskMode::Discrete);
}

#[test]
fn soft_mask_examples() {
    let row = |v: Vec<f64>| Tensor::new(vec![1, v.len()], v).unwrap();
    let uniform = BoundaryScores::new(row(vec![0.5, 0.5]), row(vec![0.5, 0.5])).unwrap();
    let m = soft_mask(&uniform, &build_structure(2, 1).unwrap()).unwrap();
    assert_eq!(m.values().data(), &[1.0, 1.0]);

    // Coincident point masses count the position twice.
    let point = BoundaryScores::new(row(vec![0.0, 1.0, 0.0]), row(vec![0.0, 1.0, 0.0])).unwrap();
    let m = soft_mask(&point, &build_structure(3, 1).unwrap()).unwrap();
    assert_eq!(m.values().data(), &[0.0, 2.0, 0.0]);

    // Reversed point masses still cover the span between them.
    let reversed = BoundaryScores::new(row(vec![0.0, 0.0, 1.0]), row(vec![1.0, 0.0, 0.0])).unwrap();
    let m = soft_mask(&reversed, &build_structure(3, 1).unwrap()).unwrap();
    assert_eq!(m.values().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn rejects_bad_boundaries() {
    let t = |v: Vec<f64>| Tensor::new(vec![1, v.len()], v).unwrap();
    assert!(BoundaryScores::new(t(vec![0.5, 0.6]), t(vec![0.5, 0.5])).is_err());
    assert!(BoundaryScores::new(t(vec![1.5, -0.5]), t(vec![0.5, 0.5])).is_err());
    assert!(BoundaryScores::new(t(vec![1.0]), t(vec![0.5, 0.5])).is_err());
    let ok = BoundaryScores::new(t(vec![0.5, 0.5]), t(vec![0.5, 0.5])).unwrap();
    assert!(soft_mask(&ok, &build_structure(3, 1).unwrap()).is_err());
}

#[test]
fn cache_builds_each_length_once() {
    let mut cache = StructureCache::new();
    let a = cache.get(8, 2).unwrap();
    let b = cache.get(8, 2).unwrap();
    assert!(std::sync::Arc::ptr_eq(&a, &b));
    cache.get(64, 2).unwrap();
    assert_eq!(cache.len(), 2);
}
