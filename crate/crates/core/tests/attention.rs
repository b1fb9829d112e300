use blosan_core::attention::{
    build_mask, multi_dim_attention, vanilla_attention, AdditiveCompat, Activation, AttnConfig, Compat, MaskKind,
    MaskedSelfAttention, MultiplicativeCompat, Source2Token, Token2Token, Validity,
};
use blosan_core::autodiff::gradcheck::{check_params, worst};
use blosan_core::init::uniform;
use blosan_core::rng::{stream, Stream};
use blosan_core::{NodeId, ParamStore, Result, Session, Tensor};
use proptest::prelude::*;

/// Scores supplied directly, bypassing any parameters.
struct Fixed(Tensor<f64>, bool);

impl Compat for Fixed {
    fn scores<T: blosan_core::Scalar>(&self, sess: &mut Session<T>, _x: NodeId, _q: NodeId) -> Result<NodeId> {
        let t = Tensor::from_f64(self.0.shape(), self.0.data())?;
        Ok(sess.constant(t))
    }

    fn is_multi_dim(&self) -> bool {
        self.1
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, &mut stream(seed, Stream::Data)).unwrap()
}

fn cfg(d_e: usize, d_h: usize, multi_dim: bool) -> AttnConfig {
    AttnConfig {
        d_e,
        d_h,
        multi_dim,
        ..AttnConfig::default()
    }
}

fn zero_all(store: &mut ParamStore<f64>) {
    let paths: Vec<String> = store.paths().map(String::from).collect();
    for p in paths {
        let shape = store.get(&p).unwrap().shape().to_vec();
        store.set(&p, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn additive_with_zero_params_returns_bias() {
    for multi_dim in [false, true] {
        let mut store = ParamStore::new();
        let c = AdditiveCompat::init(&mut store, "a", &cfg(3, 4, multi_dim), 2, &mut stream(1, Stream::Init)).unwrap();
        zero_all(&mut store);
        let out = if multi_dim { 3 } else { 1 };
        store.set("a/b", Tensor::full(&[out], 0.7)).unwrap();
        let mut sess = Session::new(&store);
        let x = sess.input(random(&[5, 3], 2));
        let q = sess.input(random(&[2], 3));
        let s = c.scores(&mut sess, x, q).unwrap();
        let v = sess.graph.value(s);
        assert_eq!(v.shape(), if multi_dim { &[5, 3][..] } else { &[5][..] });
        assert!(v.data().iter().all(|&e| e == 0.7));
    }
}

#[test]
fn additive_without_token_weights_gives_uniform_attention() {
    let mut store = ParamStore::new();
    let c = AdditiveCompat::init(&mut store, "a", &cfg(3, 4, false), 2, &mut stream(1, Stream::Init)).unwrap();
    store.set("a/w1", Tensor::zeros(&[3, 4])).unwrap();
    let mut sess = Session::new(&store);
    let x = sess.input(random(&[6, 3], 2));
    let q = sess.input(random(&[2], 3));
    let (_, p) = vanilla_attention(&mut sess, x, q, &c).unwrap();
    for &v in sess.graph.value(p).data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn additive_gradients_match_finite_differences() {
    for multi_dim in [false, true] {
        let mut store = ParamStore::new();
        let c = AdditiveCompat::init(&mut store, "a", &cfg(3, 4, multi_dim), 2, &mut stream(5, Stream::Init)).unwrap();
        store.set("a/b1", random(&[4], 9)).unwrap();
        let x = random(&[2, 4, 3], 6);
        let q = random(&[2, 2], 7);
        let weights = random(if multi_dim { &[2, 4, 3] } else { &[2, 4] }, 8);
        let reports = check_params(
            &store,
            |sess| {
                let xi = sess.input(x.clone());
                let qi = sess.input(q.clone());
                let s = c.scores(sess, xi, qi)?;
                let w = sess.constant(weights.clone());
                let s = sess.graph.mul(s, w)?;
                let s = sess.graph.tanh(s)?;
                sess.graph.sum_all(s)
            },
            1e-5,
        )
        .unwrap();
        let (path, r) = worst(&reports).unwrap();
        assert!(r.max_rel_error < 1e-6, "{path}: {r:?}");
    }
}

fn identity_multiplicative(d: usize) -> (ParamStore<f64>, MultiplicativeCompat) {
    let mut store = ParamStore::new();
    let c = MultiplicativeCompat::init(&mut store, "m", d, d, d, &mut stream(1, Stream::Init)).unwrap();
    let eye = Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 });
    store.set("m/w1", eye.clone()).unwrap();
    store.set("m/w2", eye).unwrap();
    (store, c)
}

fn mult_score(store: &ParamStore<f64>, c: &MultiplicativeCompat, x: &[f64], q: &[f64]) -> f64 {
    let mut sess = Session::new(store);
    let xi = sess.input(Tensor::from_f64(&[1, x.len()], x).unwrap());
    let qi = sess.input(Tensor::from_f64(&[q.len()], q).unwrap());
    let s = c.scores(&mut sess, xi, qi).unwrap();
    sess.graph.value(s).data()[0]
}

#[test]
fn multiplicative_identity_examples() {
    let (store, c) = identity_multiplicative(2);
    assert_eq!(mult_score(&store, &c, &[1.0, 0.0], &[0.0, 3.0]), 0.0);
    assert_eq!(mult_score(&store, &c, &[1.0, 1.0], &[1.0, 1.0]), 2.0);
}

#[test]
fn multiplicative_is_linear_in_tokens() {
    let mut store = ParamStore::new();
    let c = MultiplicativeCompat::init(&mut store, "m", 4, 3, 5, &mut stream(2, Stream::Init)).unwrap();
    let x = random(&[4], 3).to_vec();
    let q = random(&[3], 4).to_vec();
    let base = mult_score(&store, &c, &x, &q);
    for alpha in [-2.5, 0.0, 0.3, 7.0] {
        let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let s = mult_score(&store, &c, &scaled, &q);
        assert!((s - alpha * base).abs() < 1e-12, "alpha={alpha}");
    }
}

fn attend_fixed(x: Tensor<f64>, scores: Tensor<f64>, multi_dim: bool) -> (Tensor<f64>, Tensor<f64>) {
    let store = ParamStore::new();
    let mut sess = Session::new(&store);
    let xi = sess.input(x);
    let q = sess.input(Tensor::zeros(&[1]));
    let compat = Fixed(scores, multi_dim);
    let (s, p) = if multi_dim {
        multi_dim_attention(&mut sess, xi, q, &compat).unwrap()
    } else {
        vanilla_attention(&mut sess, xi, q, &compat).unwrap()
    };
    (sess.graph.value(s).clone(), sess.graph.value(p).clone())
}

#[test]
fn vanilla_attention_examples() {
    let x = random(&[4, 3], 1);
    let (s, _) = attend_fixed(x.clone(), Tensor::full(&[4], 0.3), false);
    for k in 0..3 {
        let mean = (0..4).map(|i| x.get(&[i, k])).sum::<f64>() / 4.0;
        assert!((s.data()[k] - mean).abs() < 1e-12);
    }

    let e = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let (s, _) = attend_fixed(e, Tensor::from_f64(&[2], &[3f64.ln(), 0.0]).unwrap(), false);
    assert!((s.data()[0] - 0.75).abs() < 1e-12);
    assert!((s.data()[1] - 0.25).abs() < 1e-12);
}

#[test]
fn sequences_cannot_be_empty() {
    assert!(Tensor::<f64>::try_zeros(&[0, 3]).is_err());
}

#[test]
fn multi_dim_attention_examples() {
    let x = random(&[5, 3], 2);
    let (s, p) = attend_fixed(x.clone(), Tensor::from_fn(&[5, 3], |k| (k % 3) as f64), true);
    for k in 0..3 {
        let mean = (0..5).map(|i| x.get(&[i, k])).sum::<f64>() / 5.0;
        assert!((s.data()[k] - mean).abs() < 1e-12);
        let col: f64 = (0..5).map(|i| p.get(&[i, k])).sum();
        assert!((col - 1.0).abs() < 1e-12);
    }

    let t = 3;
    let onehot = Tensor::from_fn(&[5, 3], |k| if k / 3 == t { 0.0 } else { f64::NEG_INFINITY });
    let (s, _) = attend_fixed(x.clone(), onehot, true);
    for k in 0..3 {
        assert_eq!(s.data()[k], x.get(&[t, k]));
    }
}

#[test]
fn vanilla_rejects_vector_scores() {
    let store = ParamStore::new();
    let mut sess = Session::new(&store);
    let x = sess.input(random(&[3, 2], 1));
    let q = sess.input(Tensor::zeros(&[1]));
    assert!(vanilla_attention(&mut sess, x, q, &Fixed(Tensor::zeros(&[3, 2]), true)).is_err());
    assert!(multi_dim_attention(&mut sess, x, q, &Fixed(Tensor::zeros(&[3]), false)).is_err());
}

#[test]
fn compat_shape_mismatch_is_an_error() {
    let mut store = ParamStore::new();
    let c = AdditiveCompat::init(&mut store, "a", &cfg(3, 4, false), 2, &mut stream(1, Stream::Init)).unwrap();
    let mut sess = Session::new(&store);
    let x = sess.input(random(&[5, 4], 2));
    let q = sess.input(random(&[2], 3));
    assert!(c.scores(&mut sess, x, q).is_err());
}

fn s2t_eval(store: &ParamStore<f64>, s2t: &Source2Token, x: Tensor<f64>, v: Option<&Validity>) -> Result<Tensor<f64>> {
    let mut sess = Session::new(store);
    let xi = sess.input(x);
    let out = s2t.forward(&mut sess, xi, v)?;
    Ok(sess.graph.value(out).clone())
}

#[test]
fn source2token_examples() {
    let mut store = ParamStore::new();
    let s2t = Source2Token::init(&mut store, "s", 4, &mut stream(3, Stream::Init)).unwrap();
    store.set("s/b1", random(&[4], 11)).unwrap();

    let x1 = random(&[1, 4], 1);
    assert_eq!(s2t_eval(&store, &s2t, x1.clone(), None).unwrap(), x1.reshape(&[4]).unwrap());

    let dup = Tensor::from_fn(&[2, 4], |k| x1.data()[k % 4]);
    let s = s2t_eval(&store, &s2t, dup, None).unwrap();
    assert!(s.max_abs_diff(&x1.reshape(&[4]).unwrap()) < 1e-12);

    let x = random(&[3, 4], 2);
    let padded = Tensor::from_fn(&[5, 4], |k| if k < 12 { x.data()[k] } else { 9.0 });
    let v = Validity::new(&[5], vec![true, true, true, false, false]).unwrap();
    let a = s2t_eval(&store, &s2t, x, None).unwrap();
    let b = s2t_eval(&store, &s2t, padded, Some(&v)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    let none = Validity::new(&[2], vec![false, false]).unwrap();
    assert!(s2t_eval(&store, &s2t, random(&[2, 4], 3), Some(&none)).is_err());
}

fn t2t_eval(store: &ParamStore<f64>, t2t: &Token2Token, x: Tensor<f64>) -> Tensor<f64> {
    let mut sess = Session::new(store);
    let xi = sess.input(x);
    let (out, _) = t2t.forward(&mut sess, xi, None, None).unwrap();
    sess.graph.value(out).clone()
}

#[test]
fn token2token_single_token_is_identity() {
    let mut store = ParamStore::new();
    let t2t = Token2Token::init(&mut store, "t", 3, &mut stream(4, Stream::Init)).unwrap();
    let x = random(&[1, 3], 5);
    assert_eq!(t2t_eval(&store, &t2t, x.clone()), x);
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    Tensor::from_fn(x.shape(), |k| x.data()[perm[k / d] * d + k % d])
}

#[test]
fn token2token_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let t2t = Token2Token::init(&mut store, "t", 3, &mut stream(4, Stream::Init)).unwrap();
    let x = random(&[5, 3], 6);
    let perm = [3, 0, 4, 1, 2];
    let a = permute_rows(&t2t_eval(&store, &t2t, x.clone()), &perm);
    let b = t2t_eval(&store, &t2t, permute_rows(&x, &perm));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn token2token_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let t2t = Token2Token::init(&mut store, "t", 3, &mut stream(7, Stream::Init)).unwrap();
    store.set("t/b1", random(&[3], 12)).unwrap();
    let x = random(&[4, 3], 8);
    let w = random(&[4, 3], 9);
    let reports = check_params(
        &store,
        |sess| {
            let xi = sess.input(x.clone());
            let (out, _) = t2t.forward(sess, xi, None, None)?;
            let w = sess.constant(w.clone());
            let y = sess.graph.mul(out, w)?;
            sess.graph.sum_all(y)
        },
        1e-5,
    )
    .unwrap();
    let (path, r) = worst(&reports).unwrap();
    assert!(r.max_rel_error < 1e-4, "{path}: {r:?}");
}

fn masked(d: usize, seed: u64) -> (ParamStore<f64>, MaskedSelfAttention) {
    let mut store = ParamStore::new();
    let m = MaskedSelfAttention::init(&mut store, "m", d, 5.0, &mut stream(seed, Stream::Init)).unwrap();
    store.set("m/b1", random(&[d], seed + 100)).unwrap();
    (store, m)
}

fn masked_eval(store: &ParamStore<f64>, m: &MaskedSelfAttention, x: Tensor<f64>, kind: MaskKind) -> Tensor<f64> {
    let n = x.shape()[x.rank() - 2];
    let mut sess = Session::new(store);
    let xi = sess.input(x);
    let out = m.forward(&mut sess, xi, &build_mask(n, kind).unwrap(), None).unwrap();
    sess.graph.value(out.output).clone()
}

#[test]
fn masked_single_token_forward_is_zero() {
    let (store, m) = masked(3, 1);
    let out = masked_eval(&store, &m, random(&[1, 3], 2), MaskKind::Forward);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_directions_differ() {
    let (store, m) = masked(4, 2);
    let x = random(&[6, 4], 3);
    let fw = masked_eval(&store, &m, x.clone(), MaskKind::Forward);
    let bw = masked_eval(&store, &m, x, MaskKind::Backward);
    assert!(fw.max_abs_diff(&bw) > 1e-6);
}

#[test]
fn masks_break_permutation_equivariance() {
    let (store, m) = masked(3, 3);
    let x = random(&[3, 3], 4);
    let perm = [2, 1, 0];
    for kind in [MaskKind::Forward, MaskKind::Backward] {
        let a = permute_rows(&masked_eval(&store, &m, x.clone(), kind), &perm);
        let b = masked_eval(&store, &m, permute_rows(&x, &perm), kind);
        assert!(a.max_abs_diff(&b) > 1e-6, "{kind:?}");
    }
    let a = permute_rows(&masked_eval(&store, &m, x.clone(), MaskKind::None), &perm);
    let b = masked_eval(&store, &m, permute_rows(&x, &perm), MaskKind::None);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn masked_gradients_match_finite_differences() {
    let (store, m) = masked(3, 5);
    let x = random(&[5, 3], 6);
    let mask = build_mask(5, MaskKind::Forward).unwrap();
    let reports = check_params(
        &store,
        |sess| {
            let xi = sess.input(x.clone());
            let out = m.forward(sess, xi, &mask, None)?;
            sess.graph.sum_all(out.output)
        },
        1e-5,
    )
    .unwrap();
    let (path, r) = worst(&reports).unwrap();
    assert!(r.max_rel_error < 1e-4, "{path}: {r:?}");
}

#[test]
fn padded_keys_are_ignored() {
    let (store, m) = masked(3, 6);
    let x = random(&[4, 3], 7);
    let padded = Tensor::from_fn(&[6, 3], |k| if k < 12 { x.data()[k] } else { -4.0 });
    let v = Validity::new(&[6], vec![true, true, true, true, false, false]).unwrap();
    let expected = masked_eval(&store, &m, x, MaskKind::None);
    let mut sess = Session::new(&store);
    let xi = sess.input(padded);
    let out = m.forward(&mut sess, xi, &build_mask(6, MaskKind::None).unwrap(), Some(&v)).unwrap();
    let got = sess.graph.value(out.output).data()[..12].to_vec();
    let got = Tensor::new(&[4, 3], got).unwrap();
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn mask_length_must_match() {
    let (store, m) = masked(3, 1);
    let mut sess = Session::new(&store);
    let x = sess.input(random(&[4, 3], 2));
    assert!(m.forward(&mut sess, x, &build_mask(3, MaskKind::Forward).unwrap(), None).is_err());
}

#[test]
fn attn_config_validation() {
    assert!(AttnConfig::default().validate().is_ok());
    assert!(AttnConfig { c: 0.0, ..AttnConfig::default() }.validate().is_err());
    assert!(AttnConfig { d_h: 0, ..AttnConfig::default() }.validate().is_err());
    assert_eq!("elu".parse::<Activation>().unwrap(), Activation::Elu);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_mask_is_causal(seed in 0u64..1000, n in 2usize..7, j in 0usize..6, scale in 0.1f64..5.0) {
        let j = j % n;
        let (store, m) = masked(3, seed);
        let x = random(&[n, 3], seed + 1);
        let noise = random(&[n, 3], seed + 2);
        let y = Tensor::from_fn(&[n, 3], |k| if k / 3 > j { x.data()[k] + scale * noise.data()[k] } else { x.data()[k] });
        for (kind, lo, hi) in [(MaskKind::Forward, j + 1, n), (MaskKind::Backward, 0, j)] {
            let yb = Tensor::from_fn(&[n, 3], |k| {
                let t = k / 3;
                if t >= lo && t < hi { x.data()[k] + scale * noise.data()[k] } else { x.data()[k] }
            });
            let a = masked_eval(&store, &m, x.clone(), kind);
            let b = masked_eval(&store, &m, if kind == MaskKind::Forward { y.clone() } else { yb }, kind);
            for k in 0..3 {
                prop_assert!((a.get(&[j, k]) - b.get(&[j, k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_probabilities_are_normalized_and_scores_bounded(seed in 0u64..1000, n in 1usize..7, big in 1.0f64..50.0) {
        let (store, m) = masked(3, seed);
        let x = random(&[n, 3], seed + 1).map(|v| v * big).unwrap();
        let mask = build_mask(n, MaskKind::Forward).unwrap();
        let mut sess = Session::new(&store);
        let xi = sess.input(x);
        let out = m.forward(&mut sess, xi, &mask, None).unwrap();
        let scores = sess.graph.value(out.scores);
        prop_assert!(scores.data().iter().all(|v| v.abs() <= 5.0));
        let p = sess.graph.value(out.probs);
        for j in 0..n {
            for k in 0..3 {
                let total: f64 = (0..n).map(|i| p.get(&[j, i, k])).sum();
                let expected = if j == 0 { 0.0 } else { 1.0 };
                prop_assert!((total - expected).abs() < 1e-12);
            }
        }
        prop_assert!(sess.graph.value(out.output).is_finite());
    }

    #[test]
    fn vanilla_output_is_a_convex_combination(seed in 0u64..1000, n in 1usize..8) {
        let x = random(&[n, 3], seed);
        let scores = random(&[n], seed + 1).map(|v| 4.0 * v).unwrap();
        let (s, p) = attend_fixed(x.clone(), scores, false);
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| x.get(&[i, k])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.data()[k] >= lo - 1e-12 && s.data()[k] <= hi + 1e-12);
        }
    }
}
