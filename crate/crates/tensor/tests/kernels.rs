use dca_tensor::kernels::{
    adaptive_avg_pool, adaptive_avg_pool_backward, conv2d_backward, conv2d_forward, resize_bilinear,
    resize_bilinear_backward, softmax_channels, Conv2dSpec,
};
use dca_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + phase) * 0.618).sin())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: Conv2dSpec) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * s.padding - s.dilation * (k - 1) - 1) / s.stride + 1;
    let ow = (wd + 2 * s.padding - s.dilation * (k - 1) - 1) / s.stride + 1;
    Tensor::from_fn(&[n, o, oh, ow], |i| {
        let (b, oc, y, xo) = (i / (o * oh * ow), i / (oh * ow) % o, i / ow % oh, i % ow);
        let mut acc = 0.0;
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * s.stride + ky * s.dilation) as isize - s.padding as isize;
                    let ix = (xo * s.stride + kx * s.dilation) as isize - s.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                            * w.data()[((oc * c + ic) * k + ky) * k + kx];
                    }
                }
            }
        }
        acc
    })
}

fn conv_case() -> impl Strategy<Value = ([usize; 4], usize, usize, Conv2dSpec)> {
    (1usize..3, 1usize..4, 1usize..10, 1usize..10, 1usize..4, prop::sample::select(vec![1usize, 3]), 1usize..3, 0usize..5, 1usize..5)
        .prop_map(|(n, c, h, w, o, k, stride, padding, dilation)| ([n, c, h, w], o, k, Conv2dSpec { stride, padding, dilation }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conv_matches_direct_loops((shape, o, k, spec) in conv_case()) {
        let x = wave(&shape, 0.3);
        let w = wave(&[o, shape[1], k, k], 1.7);
        match conv2d_forward(&x, &w, None, spec) {
            Ok(y) => {
                let want = naive_conv(&x, &w, spec);
                prop_assert_eq!(y.shape(), want.shape());
                prop_assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
            }
            // Only kernels wider than the padded input may be refused.
            Err(_) => prop_assert!(shape[2].min(shape[3]) + 2 * spec.padding < spec.dilation * (k - 1) + 1),
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint((shape, o, k, spec) in conv_case()) {
        let x = wave(&shape, 0.9);
        let w = wave(&[o, shape[1], k, k], 2.4);
        if let Ok(y) = conv2d_forward(&x, &w, None, spec) {
            let dy = wave(y.shape(), 5.1);
            let g = conv2d_backward(&x, &w, &dy, spec, [true, true, false]).unwrap();
            let inner = dot(&y, &dy);
            prop_assert!((inner - dot(&g.input.unwrap(), &x)).abs() < 1e-9);
            prop_assert!((inner - dot(&g.weight.unwrap(), &w)).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_backward_is_the_adjoint(h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let x = wave(&[1, 2, h, w], 0.2);
        let y = resize_bilinear(&x, oh, ow).unwrap();
        let dy = wave(y.shape(), 3.3);
        let dx = resize_bilinear_backward(&dy, x.shape());
        prop_assert!((dot(&y, &dy) - dot(&dx, &x)).abs() < 1e-10);
    }

    #[test]
    fn pool_backward_is_the_adjoint(h in 1usize..12, w in 1usize..12, r in 1usize..9) {
        let x = wave(&[2, 1, h, w], 0.4);
        let y = adaptive_avg_pool(&x, r).unwrap();
        let dy = wave(y.shape(), 1.1);
        let dx = adaptive_avg_pool_backward(&dy, x.shape());
        prop_assert!((dot(&y, &dy) - dot(&dx, &x)).abs() < 1e-10);
    }

    #[test]
    fn softmax_is_a_distribution(k in 1usize..6, scale in 0.1f64..200.0) {
        let s = wave(&[2, k, 3, 3], 0.0).map(|v| v * scale);
        let p = softmax_channels(&s).unwrap();
        for b in 0..2 {
            for px in 0..9 {
                let col: Vec<f64> = (0..k).map(|c| p.data()[(b * k + c) * 9 + px]).collect();
                prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_gradient_matches_its_closed_form(v in -30.0f64..30.0) {
        let tape = Tape::inference();
        let x = tape.input(Tensor::from_vec(&[1], vec![v]).unwrap(), true);
        let y = tape.sigmoid(x);
        let grads = tape.backward(y).unwrap();
        let s = 1.0 / (1.0 + (-v).exp());
        prop_assert!((grads.of(x).unwrap().data()[0] - s * (1.0 - s)).abs() < 1e-15);
    }
}
