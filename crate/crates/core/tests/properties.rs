mod common;

use common::*;
use mergeforge::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use mergeforge::mask::{active_ratio, apply_mask, build_mask, selfish_ratio, TaskMask};
use mergeforge::merge::{merge_average, merge_ta, merge_ties};
use mergeforge::router::{argmax, projection_norm, softmax, svd};
use mergeforge::task_vector::{apply, extract, fingerprint, TaskVector};
use mergeforge::{NamedTensorMap, Tensor};
use proptest::prelude::*;

fn vector(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0f32), 6 => -3.0f32..3.0], len)
}

/// `m` task vectors of a shared length.
fn vectors(max_tasks: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1..=max_tasks, 1usize..32).prop_flat_map(|(m, n)| prop::collection::vec(vector(n), m))
}

fn tv(id: usize, data: &[f32]) -> TaskVector {
    let mut delta = NamedTensorMap::new();
    delta.insert("w", Tensor::vector(data).unwrap()).unwrap();
    TaskVector { delta, base_fingerprint: "fp".into(), task_id: format!("t{id}") }
}

fn tvs(raw: &[Vec<f32>]) -> Vec<TaskVector> {
    raw.iter().enumerate().map(|(i, v)| tv(i, v)).collect()
}

fn w(m: &NamedTensorMap) -> &[f32] {
    m.get("w").unwrap().data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>()) {
        let map = random_map(&mut rng(seed));
        let back = from_bytes(&to_bytes(&map).unwrap()).unwrap();
        prop_assert!(back.bitwise_eq(&map));
        prop_assert_eq!(back.metadata(), map.metadata());
        prop_assert_eq!(fingerprint(&back), fingerprint(&map));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let bytes = to_bytes(&random_map(&mut rng(seed))).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn ta_matches_loop_sum(raw in vectors(5)) {
        let merged = merge_ta(&tvs(&raw)).unwrap();
        prop_assert!(rel_error(w(&merged.tau_merge), &ta_oracle(&raw, 1.0)) <= 1e-6);
    }

    #[test]
    fn average_is_scaled_sum(raw in vectors(5)) {
        let merged = merge_average(&tvs(&raw)).unwrap();
        prop_assert!(rel_error(w(&merged.tau_merge), &ta_oracle(&raw, 1.0 / raw.len() as f64)) <= 1e-6);
    }

    #[test]
    fn ties_matches_explicit_steps(raw in vectors(5), keep in 0.05f32..=1.0) {
        let merged = merge_ties(&tvs(&raw), keep).unwrap();
        prop_assert!(rel_error(w(&merged.tau_merge), &ties_oracle(&raw, f64::from(keep))) <= 1e-6);
    }

    #[test]
    fn mask_matches_elementwise_rule(raw in vectors(4), lambda in 0.0f32..2.0) {
        let v = tvs(&raw);
        let merged = merge_ta(&v).unwrap();
        for t in &v {
            let mask = build_mask(t, &merged, lambda).unwrap();
            prop_assert_eq!(w(&mask.masks), &mask_oracle(w(&t.delta), w(&merged.tau_merge), lambda)[..]);
        }
    }

    #[test]
    fn masks_shrink_as_lambda_grows(raw in vectors(4), a in 0.0f32..2.0, b in 0.0f32..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let v = tvs(&raw);
        let merged = merge_ta(&v).unwrap();
        let loose = build_mask(&v[0], &merged, lo).unwrap();
        let strict = build_mask(&v[0], &merged, hi).unwrap();
        for (s, l) in w(&strict.masks).iter().zip(w(&loose.masks)) {
            prop_assert!(s <= l);
        }
        prop_assert!(active_ratio(&strict, None).unwrap() <= active_ratio(&loose, None).unwrap());
        prop_assert_eq!(build_mask(&v[0], &merged, lo).unwrap(), loose);
    }

    #[test]
    fn apply_mask_selects_per_position(raw in vectors(3), lambda in 0.0f32..1.5) {
        let v = tvs(&raw);
        let merged = merge_ta(&v).unwrap();
        let n = raw[0].len();
        let mut base = NamedTensorMap::new();
        base.insert("w", Tensor::vector(&(0..n).map(|i| i as f32 * 0.25 - 1.0).collect::<Vec<_>>()).unwrap()).unwrap();
        let merged = mergeforge::merge::MergedVector { base_fingerprint: fingerprint(&base), ..merged };
        let mask = build_mask(&TaskVector { base_fingerprint: fingerprint(&base), ..v[0].clone() }, &merged, lambda).unwrap();
        let out = apply_mask(&base, &merged, &mask).unwrap();
        for i in 0..n {
            let expected = if w(&mask.masks)[i] == 1.0 { w(&base)[i] + w(&merged.tau_merge)[i] } else { w(&base)[i] };
            prop_assert_eq!(w(&out)[i].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn selfish_ratio_matches_count(masks in (1usize..5, 1usize..40).prop_flat_map(|(m, n)| {
        prop::collection::vec(prop::collection::vec(prop::bool::ANY, n), m)
    })) {
        let built: Vec<TaskMask> = masks
            .iter()
            .enumerate()
            .map(|(i, bits)| {
                let mut m = NamedTensorMap::new();
                m.insert("w", Tensor::vector(&bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>()).unwrap()).unwrap();
                TaskMask { masks: m, lambda: 0.6, task_id: format!("t{i}") }
            })
            .collect();
        let n = masks[0].len();
        let exactly_one = (0..n).filter(|&i| masks.iter().filter(|b| b[i]).count() == 1).count();
        prop_assert_eq!(selfish_ratio(&built).unwrap(), exactly_one as f64 / n as f64);
    }

    #[test]
    fn extract_then_apply_recovers_exact_positions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[3, 5], &mut r, 4.0);
        let b = random_tensor(&[3, 5], &mut r, 4.0);
        let mut t0 = NamedTensorMap::new();
        t0.insert("w", a).unwrap();
        let mut t1 = NamedTensorMap::new();
        t1.insert("w", b).unwrap();
        let tau = extract(&t1, &t0, "t").unwrap();
        let back = apply(&t0, &tau, 1.0).unwrap();
        for ((&x, &y), &z) in w(&back).iter().zip(w(&t1)).zip(w(&t0)) {
            if (y - z) + z == y {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn svd_agrees_with_gram_eigenvectors(rows in 2usize..7, cols in 2usize..7, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let a: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        let dec = svd(rows, cols, &a).unwrap();
        let recon = dec.reconstruct();
        prop_assert!(recon.iter().zip(&a).all(|(x, y)| (x - y).abs() <= 1e-9));
        let mut gram = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                gram[i * cols + j] = (0..rows).map(|k| a[k * cols + i] * a[k * cols + j]).sum();
            }
        }
        let (values, vecs) = jacobi_eigen(cols, &gram);
        let k = rows.min(cols);
        for i in 0..k {
            let sv = dec.singular_values[i];
            prop_assert!((sv * sv - values[i]).abs() <= 1e-9 * values[0].max(1.0));
            // Directions are only defined for well-separated eigenvalues.
            let gap = (0..k).filter(|&j| j != i).map(|j| (values[i] - values[j]).abs()).fold(f64::INFINITY, f64::min);
            if gap > 1e-3 {
                let dot: f64 = (0..cols).map(|c| dec.vt[i * cols + c] * vecs[i][c]).sum();
                prop_assert!(1.0 - dot.abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn projection_norm_matches_loops_and_contracts(k in 1usize..8, seed in any::<u64>()) {
        use rand::Rng;
        let d = 8;
        let mut r = rng(seed);
        let m: Vec<f64> = (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let dec = svd(d, d, &m).unwrap();
        let p = Tensor::new(vec![k, d], dec.vt[..k * d].iter().map(|&v| v as f32).collect()).unwrap();
        let h: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let got = projection_norm(&p, &h).unwrap();
        prop_assert!((got - projection_norm_oracle(k, d, p.data(), &h)).abs() <= 1e-6);
        prop_assert!(got <= h.iter().map(|x| x * x).sum::<f64>().sqrt() * (1.0 + 1e-6));
    }

    #[test]
    fn softmax_normalizes_and_argmax_ignores_shifts(
        scores in prop::collection::vec(-30.0f64..30.0, 1..10),
        c in -1e3f64..1e3,
    ) {
        let p = softmax(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let q = softmax(&shifted);
        prop_assert_eq!(argmax(&scores), argmax(&shifted));
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-6));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    for i in 0..20 {
        let map = random_map(&mut r);
        let path = dir.path().join(format!("m{i}.ntm"));
        save_checkpoint(&map, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bitwise_eq(&map));
    }
    assert!(load_checkpoint(dir.path().join("absent.ntm")).is_err());
}
