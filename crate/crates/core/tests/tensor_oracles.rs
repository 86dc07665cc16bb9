//! Pinned-value and finite-difference verification of the tensor engine.
//!
//! Expected values for the non-trivial cases were computed with independent
//! oracles (triple-loop matmul, f64 exp/normalize, per-position log-sum-exp)
//! which are kept in this file next to the frozen constants they produced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidmark_core::tensor::{grad_check, NodeId, Tape, Tensor, TensorError, TensorResult};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity_preserves_matrix() {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, vec![3, 3], -2.0, 2.0);
    let eye = Tensor::new(
        vec![3, 3],
        vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
    )
    .unwrap();
    let mut t = Tape::new();
    let i = t.constant(eye);
    let m = t.constant(a.clone());
    let out = t.matmul(i, m).unwrap();
    assert_eq!(t.value(out).data(), a.data());
}

/// Independent naive oracle: explicit triple loop in f64.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(2);
    let a = rand_tensor(&mut r, vec![4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, vec![5, 3], -1.0, 1.0);
    let expect = matmul_oracle(&a, &b);
    let mut t = Tape::new();
    let (ia, ib) = (t.constant(a), t.constant(b));
    let out = t.matmul(ia, ib).unwrap();
    for (got, want) in t.value(out).data().iter().zip(expect) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn matmul_shape_mismatch_names_primitive() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![4, 2]));
    match t.matmul(a, b) {
        Err(TensorError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

// ── reductions ──────────────────────────────────────────────────────

#[test]
fn mean_of_constant_tensor() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(vec![4, 7], 0.25));
    let m = t.mean(x).unwrap();
    assert_eq!(t.value(m).item(), 0.25);
}

// ── softmax / log_softmax ───────────────────────────────────────────

#[test]
fn softmax_symmetry_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);

    let y = t.constant(Tensor::full(vec![4], -3.7));
    let s = t.softmax(y, 0).unwrap();
    for v in t.value(s).data() {
        assert!((v - 0.25).abs() < 1e-7);
    }
}

#[test]
fn softmax_matches_high_precision_oracle() {
    // Oracle: f64 exp/normalize of [1, 2, 3].
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let denom: f64 = e.iter().sum();
    let expect: Vec<f64> = e.iter().map(|v| v / denom).collect();
    // Frozen from the oracle above.
    let frozen = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
    for (o, f) in expect.iter().zip(frozen) {
        assert!((o - f).abs() < 1e-15);
    }

    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    for (got, want) in t.value(s).data().iter().zip(frozen) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn log_softmax_symmetry_and_oracle() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let l = t.log_softmax(x, 0).unwrap();
    for v in t.value(l).data() {
        assert!((*v as f64 + std::f64::consts::LN_2).abs() < 1e-7);
    }

    // Oracle: lse = 5 + ln(1 + e^-4 + e^-7) in f64; out = x - lse.
    let lse = 5.0 + (1.0 + (-4.0f64).exp() + (-7.0f64).exp()).ln();
    let frozen = [-0.019045007879257447, -4.0190450078792574, -7.0190450078792574];
    for (x, f) in [5.0, 1.0, -2.0].iter().zip(frozen) {
        assert!((x - lse - f).abs() < 1e-12);
    }

    let y = t.constant(Tensor::new(vec![3], vec![5.0, 1.0, -2.0]).unwrap());
    let l = t.log_softmax(y, 0).unwrap();
    for (got, want) in t.value(l).data().iter().zip(frozen) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn exp_log_softmax_equals_softmax() {
    let mut r = rng(3);
    for _ in 0..50 {
        let x = rand_tensor(&mut r, vec![2, 6], -50.0, 50.0);
        let mut t = Tape::new();
        let i = t.constant(x);
        let s = t.softmax(i, 1).unwrap();
        let l = t.log_softmax(i, 1).unwrap();
        for (sv, lv) in t.value(s).data().iter().zip(t.value(l).data()) {
            assert!((sv - lv.exp()).abs() < 1e-5);
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    // Strict openness needs the exp spread to stay within f32 resolution;
    // extreme logits saturate to exactly 0/1 and are checked closed below.
    let mut r = rng(4);
    for _ in 0..50 {
        let x = rand_tensor(&mut r, vec![3, 5], -8.0, 8.0);
        let mut t = Tape::new();
        let i = t.constant(x);
        let s = t.softmax(i, 1).unwrap();
        let v = t.value(s);
        for row in 0..3 {
            let sum: f64 = v.data()[row * 5..(row + 1) * 5]
                .iter()
                .map(|&p| p as f64)
                .sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        for &p in v.data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
    for _ in 0..50 {
        let x = rand_tensor(&mut r, vec![3, 5], -50.0, 50.0);
        let mut t = Tape::new();
        let i = t.constant(x);
        let s = t.softmax(i, 1).unwrap();
        let v = t.value(s);
        for row in 0..3 {
            let sum: f64 = v.data()[row * 5..(row + 1) * 5]
                .iter()
                .map(|&p| p as f64)
                .sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        for &p in v.data() {
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn softmax_on_leading_axis() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 5.0, 1.0, 5.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    for &v in t.value(s).data() {
        assert!((v - 0.5).abs() < 1e-7);
    }
}

// ── cross entropy ───────────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits_equals_ln_vocab() {
    for vocab in [2usize, 8, 32, 64] {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::full(vec![3, vocab], 0.7));
        let ce = t.cross_entropy(logits, &[0, vocab - 1, vocab / 2]).unwrap();
        let want = (vocab as f64).ln();
        assert!(
            (t.value(ce).item() as f64 - want).abs() < 1e-5,
            "vocab {vocab}"
        );
    }
}

#[test]
fn cross_entropy_saturates_to_zero_on_dominant_logit() {
    let mut data = vec![0.0f32; 32];
    data[9] = 20.0;
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(vec![1, 32], data).unwrap());
    let ce = t.cross_entropy(logits, &[9]).unwrap();
    assert!(t.value(ce).item() < 1e-6);
    assert!(t.value(ce).item() >= 0.0);
}

#[test]
fn cross_entropy_matches_lse_oracle() {
    let mut r = rng(5);
    let logits = rand_tensor(&mut r, vec![4, 10], -3.0, 3.0);
    let targets = [3usize, 0, 9, 5];
    // Oracle: mean over positions of lse(row) - row[target], all in f64.
    let mut want = 0.0f64;
    for (row, &tgt) in targets.iter().enumerate() {
        let vals: Vec<f64> = logits.data()[row * 10..(row + 1) * 10]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        want += lse - vals[tgt];
    }
    want /= targets.len() as f64;

    let mut t = Tape::new();
    let l = t.constant(logits);
    let ce = t.cross_entropy(l, &targets).unwrap();
    assert!((t.value(ce).item() as f64 - want).abs() < 1e-6);
}

#[test]
fn cross_entropy_ignore_index_skips_positions() {
    use vidmark_core::tensor::IGNORE_INDEX;
    let mut r = rng(6);
    let logits = rand_tensor(&mut r, vec![3, 8], -2.0, 2.0);
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let full = t.cross_entropy(l, &[IGNORE_INDEX, 2, IGNORE_INDEX]).unwrap();

    let mut t2 = Tape::new();
    let row = Tensor::new(vec![1, 8], logits.data()[8..16].to_vec()).unwrap();
    let l2 = t2.constant(row);
    let only = t2.cross_entropy(l2, &[2]).unwrap();
    assert_eq!(t.value(full).item(), t2.value(only).item());

    let mut t3 = Tape::new();
    let l3 = t3.constant(Tensor::zeros(vec![2, 8]));
    assert!(matches!(
        t3.cross_entropy(l3, &[IGNORE_INDEX, IGNORE_INDEX]),
        Err(TensorError::EmptyTargets)
    ));
}

// ── backward ────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, vec![3, 4, 2], -1.0, 1.0);
    let mut t = Tape::new();
    let i = t.leaf(x);
    let s = t.sum(i).unwrap();
    let g = t.backward(s, &[i]).unwrap();
    assert!(g[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_squared_norm_is_two_x() {
    let mut r = rng(8);
    let x = rand_tensor(&mut r, vec![5], -1.0, 1.0);
    let mut t = Tape::new();
    let i = t.leaf(x.clone());
    let sq = t.mul(i, i).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s, &[i]).unwrap();
    for (gv, xv) in g[0].data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-6);
    }
}

#[test]
fn backward_unused_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let used = t.leaf(Tensor::full(vec![2], 1.0));
    let unused = t.leaf(Tensor::full(vec![3], 1.0));
    let s = t.sum(used).unwrap();
    let g = t.backward(s, &[used, unused]).unwrap();
    assert_eq!(g[1].shape(), &[3]);
    assert!(g[1].data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(vec![2, 2], 1.0));
    let y = t.gelu(x).unwrap();
    assert!(matches!(
        t.backward(y, &[x]),
        Err(TensorError::RootNotScalar { .. })
    ));
    let s = t.sum(y).unwrap();
    assert!(matches!(
        t.backward(s, &[y]),
        Err(TensorError::NotALeaf { .. })
    ));
}

#[test]
fn two_layer_network_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let w1 = rand_tensor(&mut r, vec![4, 5], -0.7, 0.7);
    let b1 = rand_tensor(&mut r, vec![5], -0.1, 0.1);
    let w2 = rand_tensor(&mut r, vec![5, 6], -0.7, 0.7);
    let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
    let report = grad_check(
        |t, xi| {
            let w1 = t.constant(w1.clone());
            let b1 = t.constant(b1.clone());
            let w2 = t.constant(w2.clone());
            let h = t.matmul(xi, w1)?;
            let h = t.add_row_vec(h, b1)?;
            let h = t.gelu(h)?;
            let logits = t.matmul(h, w2)?;
            t.cross_entropy(logits, &[2, 4, 1])
        },
        &x,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_passes_on_sum_of_squares() {
    let mut r = rng(10);
    let x = rand_tensor(&mut r, vec![4, 3], -1.0, 1.0);
    let report = grad_check(
        |t, xi| {
            let sq = t.mul(xi, xi)?;
            t.sum(sq)
        },
        &x,
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
    assert_eq!(report.analytic.shape(), x.shape());
    assert_eq!(report.finite_diff.shape(), x.shape());
}

// ── per-primitive finite differences ────────────────────────────────

type Builder = fn(&mut Tape, NodeId, &mut ChaCha8Rng) -> TensorResult<NodeId>;

/// Every differentiable primitive gets >= 20 random small-shape cases whose
/// analytic gradients must match central finite differences (step 1e-3)
/// within relative error 1e-3.
#[test]
fn every_primitive_gradient_matches_finite_differences() {
    fn aux(t: &mut Tape, r: &mut ChaCha8Rng, shape: Vec<usize>) -> NodeId {
        let n = shape.iter().product();
        t.constant(
            Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
        )
    }

    let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
        ("matmul_lhs", vec![3, 4], |t, x, r| {
            let b = aux(t, r, vec![4, 2]);
            let m = t.matmul(x, b)?;
            t.sum(m)
        }),
        ("matmul_rhs", vec![4, 2], |t, x, r| {
            let a = aux(t, r, vec![3, 4]);
            let m = t.matmul(a, x)?;
            let sq = t.mul(m, m)?;
            t.sum(sq)
        }),
        ("transpose", vec![3, 5], |t, x, r| {
            let tr = t.transpose(x)?;
            let b = aux(t, r, vec![3, 2]);
            let m = t.matmul(tr, b)?;
            t.sum(m)
        }),
        ("add", vec![4, 3], |t, x, r| {
            let b = aux(t, r, vec![4, 3]);
            let s = t.add(x, b)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("sub", vec![4, 3], |t, x, r| {
            let b = aux(t, r, vec![4, 3]);
            let s = t.sub(x, b)?;
            let sq = t.mul(s, s)?;
            t.mean(sq)
        }),
        ("mul", vec![2, 6], |t, x, r| {
            let b = aux(t, r, vec![2, 6]);
            let s = t.mul(x, b)?;
            t.sum(s)
        }),
        ("add_row_vec", vec![5], |t, x, r| {
            let a = aux(t, r, vec![3, 5]);
            let s = t.add_row_vec(a, x)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("add_rows_at", vec![2, 4], |t, x, r| {
            let a = aux(t, r, vec![5, 4]);
            let s = t.add_rows_at(a, x, 2)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("scale", vec![3, 3], |t, x, _| {
            let s = t.scale(x, -1.7)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("gelu", vec![4, 4], |t, x, _| {
            let g = t.gelu(x)?;
            t.sum(g)
        }),
        ("mean", vec![3, 4], |t, x, _| {
            let sq = t.mul(x, x)?;
            t.mean(sq)
        }),
        ("reshape", vec![2, 6], |t, x, r| {
            let rs = t.reshape(x, vec![3, 4])?;
            let b = aux(t, r, vec![4, 2]);
            let m = t.matmul(rs, b)?;
            t.sum(m)
        }),
        ("concat_rows", vec![2, 3], |t, x, r| {
            let b = aux(t, r, vec![4, 3]);
            let c = t.concat_rows(x, b)?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        }),
        ("slice_rows", vec![6, 3], |t, x, _| {
            let s = t.slice_rows(x, 1, 4)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("concat_cols", vec![3, 2], |t, x, r| {
            let b = aux(t, r, vec![3, 4]);
            let c = t.concat_cols(x, b)?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        }),
        ("slice_cols", vec![3, 6], |t, x, _| {
            let s = t.slice_cols(x, 2, 5)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
        ("embedding", vec![6, 4], |t, x, _| {
            let e = t.embedding(x, &[0, 3, 3, 5])?;
            let sq = t.mul(e, e)?;
            t.sum(sq)
        }),
        ("layer_norm_x", vec![3, 8], |t, x, r| {
            let g = aux(t, r, vec![8]);
            let b = aux(t, r, vec![8]);
            let n = t.layer_norm(x, g, b)?;
            let sq = t.mul(n, n)?;
            t.sum(sq)
        }),
        ("layer_norm_gain", vec![8], |t, x, r| {
            let a = aux(t, r, vec![3, 8]);
            let b = aux(t, r, vec![8]);
            let n = t.layer_norm(a, x, b)?;
            let sq = t.mul(n, n)?;
            t.sum(sq)
        }),
        ("softmax", vec![3, 5], |t, x, r| {
            let s = t.softmax(x, 1)?;
            let w = aux(t, r, vec![3, 5]);
            let p = t.mul(s, w)?;
            t.sum(p)
        }),
        ("log_softmax", vec![3, 5], |t, x, r| {
            let s = t.log_softmax(x, 1)?;
            let w = aux(t, r, vec![3, 5]);
            let p = t.mul(s, w)?;
            t.sum(p)
        }),
        ("cross_entropy", vec![3, 7], |t, x, _| {
            t.cross_entropy(x, &[2, vidmark_core::tensor::IGNORE_INDEX, 6])
        }),
        ("patchify", vec![2, 4, 4, 3], |t, x, r| {
            let p = t.patchify(x, 2)?;
            let w = aux(t, r, vec![8, 12]);
            let m = t.mul(p, w)?;
            t.sum(m)
        }),
        ("bilinear_resize", vec![1, 4, 6, 2], |t, x, _| {
            let d = t.bilinear_resize(x, 2, 3)?;
            let u = t.bilinear_resize(d, 4, 6)?;
            let sq = t.mul(u, u)?;
            t.sum(sq)
        }),
        ("box_filter", vec![1, 5, 5, 2], |t, x, _| {
            let f = t.box_filter(x, 3)?;
            let sq = t.mul(f, f)?;
            t.sum(sq)
        }),
    ];

    for (name, shape, build) in cases {
        let mut r = rng(0xC0FFEE ^ shape.len() as u64 ^ name.len() as u64);
        for case in 0..20 {
            let x = rand_tensor(&mut r, shape.clone(), -1.0, 1.0);
            let aux_rng = r.clone();
            let report = grad_check(
                |t, xi| build(t, xi, &mut aux_rng.clone()),
                &x,
                1e-3,
                1e-3,
            )
            .unwrap_or_else(|e| panic!("{name} case {case}: {e}"));
            assert!(
                report.pass,
                "{name} case {case}: max rel err {} at element {}",
                report.max_rel_err, report.worst_index
            );
        }
    }
}

// ── replay determinism ──────────────────────────────────────────────

#[test]
fn replay_reproduces_recorded_values_bit_exactly() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, vec![2, 4, 4, 3], -0.5, 0.5);
    let w = rand_tensor(&mut r, vec![12, 6], -0.5, 0.5);
    let gvec = rand_tensor(&mut r, vec![6], 0.5, 1.5);
    let bvec = rand_tensor(&mut r, vec![6], -0.1, 0.1);

    let mut t = Tape::new();
    let xi = t.leaf(x);
    let wi = t.constant(w);
    let gi = t.constant(gvec);
    let bi = t.constant(bvec);
    let p = t.patchify(xi, 2).unwrap();
    let h = t.matmul(p, wi).unwrap();
    let h = t.layer_norm(h, gi, bi).unwrap();
    let h = t.gelu(h).unwrap();
    let s = t.softmax(h, 1).unwrap();
    let loss = t.mean(s).unwrap();

    let replayed = t.replay_f32().unwrap();
    for (idx, id) in t.node_ids().enumerate() {
        assert_eq!(
            t.value(id).data(),
            replayed[idx].data(),
            "node {idx} diverged"
        );
    }

    // Gradients are a pure function of the tape: two runs agree bit-exactly.
    let g1 = t.backward(loss, &[xi]).unwrap();
    let g2 = t.backward(loss, &[xi]).unwrap();
    assert_eq!(g1[0].data(), g2[0].data());
}

#[test]
fn embedding_rejects_out_of_range_index() {
    let mut t = Tape::new();
    let table = t.constant(Tensor::zeros(vec![4, 2]));
    match t.embedding(table, &[0, 4]) {
        Err(TensorError::IndexOutOfRange { op, index, size }) => {
            assert_eq!(op, "embedding");
            assert_eq!(index, 4);
            assert_eq!(size, 4);
        }
        other => panic!("expected index error, got {other:?}"),
    }
}
