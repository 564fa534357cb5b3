//! Convolution and max-pooling kernels against direct loops.

use dfkit_core::tensor::{Conv2dGeometry, Pool2dGeometry};
use dfkit_core::{Fill, Tape, Tensor};
use proptest::prelude::*;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(
        shape,
        Fill::Uniform {
            low: -1.0,
            high: 1.0,
            seed,
        },
    )
    .unwrap()
}

#[allow(clippy::too_many_arguments)]
fn direct_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [n, cin, h, wd]: [usize; 4],
    cout: usize,
    k: usize,
    stride: usize,
    [ph, pw]: [usize; 2],
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * ph - k) / stride + 1;
    let ow = (wd + 2 * pw - k) / stride + 1;
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for bi in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin_g {
                        for di in 0..k {
                            for dj in 0..k {
                                let r = (i * stride + di) as isize - ph as isize;
                                let s = (j * stride + dj) as isize - pw as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let c = g * cin_g + ci;
                                acc += x[((bi * cin + c) * h + r as usize) * wd + s as usize]
                                    * w[((co * cin_g + ci) * k + di) * k + dj];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn direct_pool(x: &[f64], [n, c, h, w]: [usize; 4], k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for di in 0..k {
                    for dj in 0..k {
                        let r = (i * stride + di) as isize - pad as isize;
                        let s = (j * stride + dj) as isize - pad as isize;
                        if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                            best = best.max(x[(plane * h + r as usize) * w + s as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, g in 1usize..4, cin_g in 1usize..3, cout_g in 1usize..3, k in 1usize..5,
        stride in 1usize..4, ph in 0usize..3, pw in 0usize..3, eh in 0usize..5, ew in 0usize..5,
        seed in 0u64..1 << 40,
    ) {
        let (h, wd) = (k + eh, k + ew);
        let (cin, cout) = (g * cin_g, g * cout_g);
        let x = rand(&[n, cin, h, wd], seed);
        let w = rand(&[cout, cin_g, k, k], seed + 1);
        let b = rand(&[cout], seed + 2);
        let want = direct_conv(x.data(), w.data(), b.data(), [n, cin, h, wd], cout, k, stride, [ph, pw], g);

        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let geom = Conv2dGeometry { stride, pad_h: ph, pad_w: pw, groups: g };
        let y = t.conv2d(xv, wv, Some(bv), geom).unwrap();
        let oh = (h + 2 * ph - k) / stride + 1;
        let ow = (wd + 2 * pw - k) / stride + 1;
        prop_assert_eq!(t.shape(y), &[n, cout, oh, ow][..]);
        for (a, e) in t.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn pool_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, k in 1usize..4, stride in 1usize..4,
        eh in 0usize..5, ew in 0usize..5, pad_on in any::<bool>(), seed in 0u64..1 << 40,
    ) {
        let (h, w) = (k + eh, k + ew);
        // padding never exceeds half the window, so every window sees data
        let pad = if pad_on { k / 2 } else { 0 };
        let x = rand(&[n, c, h, w], seed);
        let want = direct_pool(x.data(), [n, c, h, w], k, stride, pad);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let y = t.max_pool2d(xv, Pool2dGeometry { window: k, stride, padding: pad }).unwrap();
        prop_assert_eq!(t.value(y).data(), &want[..]);
    }
}
