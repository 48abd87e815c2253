use picnet_core::tensor::concat;
use picnet_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn add_examples() {
    let tape = Tape::new();
    let a = tape.param(&t(&[2], &[1.0, 2.0]));
    let b = tape.param(&t(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);

    let z = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(a.add(&z).unwrap().value().data(), &[1.0, 2.0]);

    let g = a.add(&b).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
}

#[test]
fn add_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.param(&Tensor::zeros(&[2, 3]));
    let b = tape.param(&Tensor::zeros(&[3, 2]));
    let err = a.add(&b).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let b = t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 3.0, -1.0]);
    let eye = tape.param(&Tensor::eye(2));
    let bv = tape.param(&b);
    assert_eq!(eye.matmul(&bv).unwrap().value(), b);

    let x = tape.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.param(&t(&[2, 1], &[1.0, 1.0]));
    let c = x.matmul(&y).unwrap().value();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);

    let bad = tape.param(&Tensor::zeros(&[3, 1]));
    assert!(matches!(x.matmul(&bad), Err(Error::Shape(_))));
}

#[test]
fn conv2d_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 3, 4, 5], &mut rng);
    let xv = tape.param(&x);
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let w = tape.param(&t(&[3, 3, 1, 1], &eye));
    let y = xv.conv2d(&w, None, 1, 0).unwrap().value();
    assert!(close(y.data(), x.data(), 0.0));

    let c = 1.75;
    let x = tape.param(&Tensor::full(&[1, 1, 5, 5], c));
    let w = tape.param(&Tensor::ones(&[1, 1, 3, 3]));
    let y = x.conv2d(&w, None, 1, 1).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 5, 5]);
    for r in 1..4 {
        for col in 1..4 {
            assert!((y.data()[r * 5 + col] - 9.0 * c).abs() < 1e-12);
        }
    }
    // Corner sees four in-bounds taps under zero padding.
    assert!((y.data()[0] - 4.0 * c).abs() < 1e-12);

    let y = x.conv2d(&w, None, 2, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 2, 2]);

    let big = tape.param(&Tensor::ones(&[1, 1, 7, 7]));
    assert!(matches!(x.conv2d(&big, None, 1, 0), Err(Error::Shape(_))));
}

#[test]
fn depthwise_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 1, 5, 4], &mut rng);
    let w = Tensor::randn(&[1, 1, 3, 3], &mut rng);
    let xv = tape.param(&x);
    let wv = tape.param(&w);
    let a = xv.depthwise_conv2d(&wv, 1, 1).unwrap().value();
    let b = xv.conv2d(&wv, None, 1, 1).unwrap().value();
    assert!(close(a.data(), b.data(), 1e-12));

    let x = Tensor::randn(&[2, 3, 5, 4], &mut rng);
    let mut delta = vec![0.0; 27];
    for c in 0..3 {
        delta[c * 9 + 4] = 1.0;
    }
    let y = tape
        .leaf(x.clone())
        .depthwise_conv2d(&tape.param(&t(&[3, 1, 3, 3], &delta)), 1, 1)
        .unwrap()
        .value();
    assert_eq!(y, x);
}

#[test]
fn conv3d_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[1, 1, 3, 4, 4], &mut rng);
    let y = tape
        .leaf(x.clone())
        .conv3d(&tape.param(&Tensor::ones(&[1, 1, 1, 1, 1])), None, 1, 0)
        .unwrap()
        .value();
    assert_eq!(y, x);

    let c = -0.5;
    let y = tape
        .leaf(Tensor::full(&[1, 1, 5, 5, 5], c))
        .conv3d(&tape.param(&Tensor::ones(&[1, 1, 3, 3, 3])), None, 1, 1)
        .unwrap()
        .value();
    let centre = 2 * 25 + 2 * 5 + 2;
    assert!((y.data()[centre] - 27.0 * c).abs() < 1e-12);
}

#[test]
fn avg_pool_examples() {
    let tape = Tape::new();
    let x = tape.param(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = x.avg_pool2d(2, 2).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[2.5]);

    let y = tape.param(&Tensor::full(&[2, 3, 5, 7], 0.3)).avg_pool2d(2, 2).unwrap().value();
    assert_eq!(y.shape(), &[2, 3, 3, 4]);
    assert!(y.data().iter().all(|&v| v == 0.3));

    assert!(matches!(x.avg_pool2d(0, 2), Err(Error::Config(_))));
    assert!(matches!(x.avg_pool2d(2, 0), Err(Error::Config(_))));
}

#[test]
fn bilinear_examples() {
    let tape = Tape::new();
    let y = tape.param(&Tensor::full(&[1, 2, 3, 3], 1.25)).bilinear_upsample(7, 6).unwrap().value();
    assert_eq!(y.shape(), &[1, 2, 7, 6]);
    assert!(y.data().iter().all(|&v| v == 1.25));

    let y = tape.param(&t(&[1, 1, 1, 1], &[-3.0])).bilinear_upsample(4, 5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == -3.0));

    // Half-pixel centres: a 1x2 row [0, 1] upsampled to width 4.
    let y = tape.param(&t(&[1, 1, 1, 2], &[0.0, 1.0])).bilinear_upsample(1, 4).unwrap().value();
    assert!(close(y.data(), &[0.0, 0.25, 0.75, 1.0], 1e-15));

    let x = tape.param(&Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(x.bilinear_upsample(3, 4), Err(Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape.param(&Tensor::zeros(&[1, 4])).softmax_rows().unwrap().value();
    assert!(close(y.data(), &[0.25; 4], 1e-15));

    let y = tape.param(&t(&[1, 2], &[1000.0, 0.0])).softmax_rows().unwrap().value();
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);

    // Overflow upstream turns into an error rather than a silent NaN.
    let huge = tape.param(&t(&[1, 2], &[1e308, -1e308]));
    let r = huge.scale(10.0).and_then(|v| v.softmax_rows());
    assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
}

#[test]
fn relu_and_concat_examples() {
    let tape = Tape::new();
    let x = tape.param(&t(&[2], &[-1.0, 2.0]));
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);

    let z = tape.param(&Tensor::zeros(&[3]));
    let g = z.relu().unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(g.get(z).unwrap(), &[0.0; 3]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::randn(&[2, 3], &mut rng);
    let b = Tensor::randn(&[2, 5], &mut rng);
    let c = concat(&[tape.param(&a), tape.param(&b)], 1).unwrap().value();
    assert_eq!(c.shape(), &[2, 8]);
    for r in 0..2 {
        assert_eq!(&c.data()[r * 8..r * 8 + 3], &a.data()[r * 3..r * 3 + 3]);
        assert_eq!(&c.data()[r * 8 + 3..r * 8 + 8], &b.data()[r * 5..r * 5 + 5]);
    }
    let bad = tape.param(&Tensor::zeros(&[3, 5]));
    assert!(matches!(concat(&[tape.param(&a), bad], 1), Err(Error::Shape(_))));
}

#[test]
fn global_avg_pool_example() {
    let tape = Tape::new();
    let x = tape.param(&t(&[1, 2, 1, 2], &[1.0, 3.0, -2.0, 4.0]));
    assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.0, 1.0]);
}

#[test]
fn frobenius_examples() {
    let tape = Tape::new();
    assert_eq!(tape.param(&t(&[1, 2], &[3.0, 4.0])).frobenius_norm().unwrap().item().unwrap(), 5.0);
    let z = tape.param(&Tensor::zeros(&[2, 3]));
    let n = z.frobenius_norm().unwrap();
    assert_eq!(n.item().unwrap(), 0.0);
    let g = n.backward().unwrap();
    assert!(g.get(z).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let ce = tape.param(&Tensor::zeros(&[1, 4])).cross_entropy(&[2]).unwrap().item().unwrap();
    assert!((ce - 4f64.ln()).abs() < 1e-12);

    let ce = tape
        .leaf(t(&[1, 4], &[100.0, 0.0, 0.0, 0.0]))
        .cross_entropy(&[0])
        .unwrap()
        .item()
        .unwrap();
    assert!((0.0..1e-40).contains(&ce));

    let x = tape.param(&Tensor::zeros(&[2, 3]));
    assert!(matches!(x.cross_entropy(&[0, 3]), Err(Error::Data(_))));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(&t(&[3], &[0.5, -1.0, 2.0]));
    let g = x.sum().unwrap().backward().unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 3]);

    let g = x.add(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0; 3]);

    assert!(matches!(x.relu().unwrap().backward(), Err(Error::Usage(_))));
}

#[test]
fn dag_gradient_sums_over_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = Tensor::randn(&[4, 3], &mut rng);
    let tape = Tape::new();
    let x = tape.param(&x0);
    let ga = x.mul(&x).unwrap().sum().unwrap().backward().unwrap().tensor(x);
    let gb = x.square().unwrap().sum().unwrap().backward().unwrap().tensor(x);
    assert!(close(ga.data(), gb.data(), 1e-15));
    let want: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert!(close(ga.data(), &want, 1e-15));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = tape.param(&Tensor::randn(&[2, 3, 6, 6], &mut rng));
        let w = tape.param(&Tensor::randn(&[4, 3, 3, 3], &mut rng));
        let y = x.conv2d(&w, None, 1, 1).unwrap().relu().unwrap();
        let loss = y.avg_pool2d(2, 2).unwrap().frobenius_norm().unwrap();
        let g = loss.backward().unwrap();
        (loss.item().unwrap().to_bits(), g.tensor(w))
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], &mut rng);
        let x = Tensor::new(&[rows, cols], x.data().iter().map(|v| v * scale).collect()).unwrap();
        let tape = Tape::new();
        let y = tape.param(&x).softmax_rows().unwrap().value();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_preserve_constants(
        h in 1usize..9,
        w in 1usize..9,
        extra_h in 0usize..5,
        extra_w in 0usize..5,
        c in -10.0f64..10.0,
    ) {
        let tape = Tape::new();
        let x = tape.param(&Tensor::full(&[1, 2, h, w], c));
        let p = x.avg_pool2d(2, 2).unwrap().value();
        prop_assert_eq!(p.shape(), &[1, 2, h.div_ceil(2), w.div_ceil(2)]);
        prop_assert!(p.data().iter().all(|&v| v == c));
        let u = x.bilinear_upsample(h + extra_h, w + extra_w).unwrap().value();
        prop_assert!(u.data().iter().all(|&v| v == c));
    }
}
