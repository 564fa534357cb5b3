//! Structural invariants of softmax, attention and the normalisation layers.

use dfkit_core::layers::{dropout, BatchNorm2d, Builder, Forward, LayerNorm, Mode, MultiHeadAttention, ParamStore};
use dfkit_core::{Fill, Tape, Tensor};
use proptest::prelude::*;

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(
        shape,
        Fill::Uniform {
            low: lo,
            high: hi,
            seed,
        },
    )
    .unwrap()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..12, shift in -50.0f64..50.0, seed in 0u64..1 << 40) {
        let x = rand(&[r, c], -20.0, 20.0, seed);
        let shifted = x.map(|v| v + shift);
        let mut t = Tape::<f64>::new();
        let (a, b) = (t.constant(x), t.constant(shifted));
        let (sa, sb) = (t.softmax(a, 1).unwrap(), t.softmax(b, 1).unwrap());
        let (pa, pb) = (t.value(sa).data().to_vec(), t.value(sb).data());
        for row in pa.chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        for (u, v) in pa.iter().zip(pb) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one(b in 1usize..3, tokens in 1usize..7, heads in 1usize..4, per_head in 1usize..5, seed in 0u64..1 << 40) {
        let dim = heads * per_head;
        let mut store = ParamStore::<f64>::new();
        let msa = MultiHeadAttention::new(&mut Builder::new(&mut store, seed), "msa", dim, heads).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.input(rand(&[b, tokens, dim], -2.0, 2.0, seed + 1));
        let (out, w) = msa.forward_with_weights(&mut f, x).unwrap();
        prop_assert_eq!(f.tape.shape(out), &[b, tokens, dim][..]);
        prop_assert_eq!(f.tape.shape(w), &[b, heads, tokens, tokens][..]);
        for row in f.tape.value(w).data().chunks(tokens) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_commutes_with_token_permutation(tokens in 2usize..6, heads in 1usize..3, per_head in 1usize..4, rot in 1usize..5, seed in 0u64..1 << 40) {
        let dim = heads * per_head;
        let mut store = ParamStore::<f64>::new();
        let msa = MultiHeadAttention::new(&mut Builder::new(&mut store, seed), "msa", dim, heads).unwrap();
        let x = rand(&[1, tokens, dim], -2.0, 2.0, seed + 1);
        // rotate the token order by `rot`
        let perm: Vec<usize> = (0..tokens).map(|i| (i + rot) % tokens).collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * dim..(i + 1) * dim].to_vec()).collect();
        let run = |input: Tensor<f64>| {
            let mut f = Forward::new(&store, Mode::Eval, 0);
            let v = f.input(input);
            let y = msa.forward(&mut f, v).unwrap();
            f.tape.value(y).data().to_vec()
        };
        let plain = run(x.clone());
        let moved = run(Tensor::from_vec(&[1, tokens, dim], permuted).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..dim {
                prop_assert!((moved[k * dim + c] - plain[i * dim + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations_stay_in_their_codomains(xs in prop::collection::vec(-60.0f64..60.0, 1..40)) {
        let n = xs.len();
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::from_vec(&[n], xs).unwrap());
        let (s, h, r) = (t.sigmoid(v), t.tanh(v), t.relu(v));
        prop_assert!(t.value(s).data().iter().all(|&y| (0.0..=1.0).contains(&y)));
        prop_assert!(t.value(h).data().iter().all(|&y| (-1.0..=1.0).contains(&y)));
        prop_assert!(t.value(r).data().iter().all(|&y| y >= 0.0));
    }

    #[test]
    fn layer_norm_standardises_each_token(rows in 1usize..6, dim in 8usize..33, spread in 2.0f64..10.0, offset in -5.0f64..5.0, seed in 0u64..1 << 40) {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut Builder::new(&mut store, 0), "ln", dim).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = rand(&[rows, dim], offset - spread, offset + spread, seed);
        let raw = x.data().to_vec();
        let xv = f.input(x);
        let y = ln.forward(&mut f, xv).unwrap();
        for (out, inp) in f.tape.value(y).data().chunks(dim).zip(raw.chunks(dim)) {
            let (m, v) = mean_var(out);
            let (_, var_in) = mean_var(inp);
            prop_assert!(m.abs() < 1e-9, "mean {}", m);
            prop_assert!((v - var_in / (var_in + ln.eps)).abs() < 1e-9, "variance {}", v);
        }
    }

    #[test]
    fn batch_norm_training_output_has_zero_channel_mean(b in 2usize..4, c in 1usize..4, side in 2usize..5, seed in 0u64..1 << 40) {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut Builder::new(&mut store, 0), "bn", c).unwrap();
        let mut f = Forward::new(&store, Mode::Train, 0);
        let x = f.input(rand(&[b, c, side, side], -3.0, 5.0, seed));
        let y = bn.forward(&mut f, x).unwrap();
        let data = f.tape.value(y).data();
        let plane = side * side;
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|i| data[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect();
            let (m, v) = mean_var(&vals);
            prop_assert!(m.abs() < 1e-9);
            prop_assert!(v <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn dropout_is_identity_outside_training() {
    let x = rand(&[4, 50], -1.0, 1.0, 9);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x.clone());
    let y = dropout(&mut t, v, 0.5, false, 3).unwrap();
    assert_eq!(t.value(y).data(), x.data());
}

#[test]
fn dropout_zeroes_about_the_rate_and_rescales_survivors() {
    let x = Tensor::<f64>::ones(&[20_000]);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x);
    let y = dropout(&mut t, v, 0.25, true, 5).unwrap();
    let out = t.value(y).data();
    let zeros = out.iter().filter(|&&o| o == 0.0).count() as f64 / out.len() as f64;
    assert!((zeros - 0.25).abs() < 0.02, "{zeros}");
    assert!(out.iter().all(|&o| o == 0.0 || (o - 1.0 / 0.75).abs() < 1e-12));
}
