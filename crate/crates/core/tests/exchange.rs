use menet_core::exchange::{
    self, AemParams, CoefficientMap, EnergyField, FeaturePair, DEFAULT_LAMBDA,
};
use menet_core::layers::{Conv, ConvBlock};
use menet_core::tensor::gradcheck::check_graph_fn;
use menet_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn random_aem(channels: usize, seed: u64) -> AemParams<f64> {
    let k = exchange::eca_kernel_size(channels);
    AemParams {
        eca_kernel: random(&[1, 1, k], seed),
        spatial_kernel: random(&[1, 2, 7, 7], seed + 1).map(|v| v * 0.3),
        spatial_bias: random(&[1], seed + 2),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn overlay_examples() {
    let a = random(&[2, 3, 3], 1);
    let zero = Tensor::zeros(vec![2, 3, 3]);
    assert_eq!(FeaturePair::new(a.clone(), zero).unwrap().overlay().unwrap(), a);
    let neg = a.map(|v| -v);
    let sum = FeaturePair::new(a.clone(), neg).unwrap().overlay().unwrap();
    assert!(sum.data().iter().all(|&v| v == 0.0));
    let b = random(&[2, 3, 3], 2);
    let sum = FeaturePair::new(a.clone(), b.clone()).unwrap().overlay().unwrap();
    for i in 0..a.len() {
        assert_eq!(sum.data()[i], a.data()[i] + b.data()[i]);
    }
    assert!(FeaturePair::new(a, Tensor::zeros(vec![2, 3, 4])).is_err());
}

#[test]
fn constant_channel_energy_is_two() {
    for lambda in [1e-4, 0.5, 3.0] {
        let x = Tensor::<f64>::full(vec![2, 4, 4], 0.5);
        let e = EnergyField::compute(&x, lambda).unwrap();
        assert!(e.energy.data().iter().all(|&v| v == 2.0));
        assert_eq!(e.count, 16);
    }
}

#[test]
fn energy_hand_example() {
    let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 5.0]).unwrap();
    let e = EnergyField::compute(&x, 1e-4).unwrap();
    assert_eq!(e.mean.data(), &[2.0]);
    assert_eq!(e.variance.data(), &[3.0]);
    let v = e.energy.data();
    assert!((v[3] - 0.8).abs() < 1e-3);
    for &low in &v[..3] {
        assert!((low - 12.0 / 7.0).abs() < 1e-3);
        assert!(v[3] < low);
    }
}

#[test]
fn energy_rejects_bad_lambda() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 2]);
    assert!(EnergyField::compute(&x, 0.0).is_err());
    assert!(EnergyField::compute(&x, -1.0).is_err());
    assert!(EnergyField::compute(&Tensor::<f64>::zeros(vec![1, 1, 1]), 1e-4).is_err());
}

#[test]
fn fem_coefficient_examples() {
    let x = Tensor::<f64>::full(vec![1, 3, 3], 2.0);
    let c = CoefficientMap::from_energy(&EnergyField::compute(&x, DEFAULT_LAMBDA).unwrap()).unwrap();
    assert!(c.f_t1w.data().iter().all(|&f| (f - 0.62246).abs() < 1e-5));
    assert!(c.f_fa.data().iter().all(|&f| (f - 0.37754).abs() < 1e-5));

    let bad = EnergyField {
        energy: Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
        lambda: DEFAULT_LAMBDA,
        mean: Tensor::zeros(vec![1, 1, 1]),
        variance: Tensor::zeros(vec![1, 1, 1]),
        count: 2,
    };
    assert!(CoefficientMap::from_energy(&bad).is_err());
}

#[test]
fn fem_exchange_examples() {
    let x = random(&[3, 4, 4], 5);
    let pair = FeaturePair::new(x.clone(), x.clone()).unwrap();
    assert_eq!(pair.fem_exchange(DEFAULT_LAMBDA).unwrap(), x);

    let pair = FeaturePair::new(Tensor::<f64>::full(vec![1, 4, 4], 1.0), Tensor::zeros(vec![1, 4, 4])).unwrap();
    let y = pair.fem_exchange(DEFAULT_LAMBDA).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.62246).abs() < 1e-5));
}

#[test]
fn eca_weight_examples() {
    let zero = AemParams {
        eca_kernel: Tensor::<f64>::zeros(vec![1, 1, 3]),
        spatial_kernel: Tensor::zeros(vec![1, 2, 7, 7]),
        spatial_bias: Tensor::zeros(vec![1]),
    };
    let w = zero.eca_weights(&Tensor::zeros(vec![4, 3, 3])).unwrap();
    assert_eq!(w.shape(), &[4, 1, 1]);
    assert!(w.data().iter().all(|&v| v == 0.5));

    let ident = AemParams {
        eca_kernel: Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
        ..zero.clone()
    };
    let x = random(&[4, 3, 3], 9);
    let w = ident.eca_weights(&x).unwrap();
    for c in 0..4 {
        let mean: f64 = x.data()[c * 9..(c + 1) * 9].iter().sum::<f64>() / 9.0;
        assert!((w.data()[c] - sigmoid(mean)).abs() < 1e-12);
    }
}

#[test]
fn aem_coefficient_examples() {
    let x = random(&[4, 5, 5], 3);
    let zero = AemParams {
        spatial_kernel: Tensor::zeros(vec![1, 2, 7, 7]),
        spatial_bias: Tensor::zeros(vec![1]),
        ..random_aem(4, 10)
    };
    let (c, _) = zero.coefficients(&x).unwrap();
    assert_eq!(c.f_fa.shape(), &[1, 5, 5]);
    assert!(c.f_fa.data().iter().all(|&v| v == 0.5));
    assert!(c.f_t1w.data().iter().all(|&v| v == 0.5));

    let params = random_aem(4, 20);
    let (c, x_f) = params.coefficients(&x).unwrap();
    for (a, b) in c.f_t1w.data().iter().zip(c.f_fa.data()) {
        assert!((a + b - 1.0).abs() <= 1e-12);
    }
    // Independent scalar-loop oracle for the pooled map.
    let w = params.eca_weights(&x).unwrap();
    assert_eq!(x_f.shape(), &[2, 5, 5]);
    for p in 0..25 {
        let vals: Vec<f64> = (0..4).map(|ch| w.data()[ch] * x.data()[ch * 25 + p]).collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((x_f.data()[p] - mean).abs() < 1e-15);
        assert_eq!(x_f.data()[25 + p], max);
    }
}

#[test]
fn aem_exchange_identity_and_gradients() {
    let x = random(&[4, 5, 5], 4);
    let params = random_aem(4, 30);
    let pair = FeaturePair::new(x.clone(), x.clone()).unwrap();
    assert_eq!(pair.aem_exchange(&params).unwrap(), x);

    let inputs = vec![
        random(&[4, 5, 5], 41),
        random(&[4, 5, 5], 42),
        params.eca_kernel.clone(),
        params.spatial_kernel.clone(),
        params.spatial_bias.clone(),
    ];
    let err = check_graph_fn(&inputs, 7, |g, v| {
        let aem = exchange::AemVars {
            eca_kernel: v[2],
            spatial_kernel: v[3],
            spatial_bias: v[4],
        };
        exchange::aem_exchange(g, v[0], v[1], &aem)
    })
    .unwrap();
    assert!(err < 1e-4, "aem gradient error {err}");
}

#[test]
fn fem_gradient_matches_finite_differences() {
    let inputs = vec![random(&[3, 4, 4], 51), random(&[3, 4, 4], 52)];
    let err = check_graph_fn(&inputs, 8, |g, v| exchange::fem_exchange(g, v[0], v[1], DEFAULT_LAMBDA)).unwrap();
    assert!(err < 1e-4, "fem gradient error {err}");
}

fn identity_block(g: &mut Graph<f64>, channels: usize) -> ConvBlock {
    let mut k = vec![0.0; channels * channels * 9];
    for c in 0..channels {
        k[(c * channels + c) * 9 + 4] = 1.0;
    }
    let convs = (0..2)
        .map(|_| Conv {
            weight: g.constant(Tensor::new(vec![channels, channels, 3, 3], k.clone()).unwrap()),
            bias: Some(g.constant(Tensor::zeros(vec![channels]))),
            pad: 1,
        })
        .collect();
    ConvBlock { convs }
}

#[test]
fn exchange_stage_identity_and_shapes() {
    let x = random(&[3, 4, 4], 60).map(f64::abs);
    let mut g = Graph::<f64>::new();
    let params = random_aem(3, 61);
    let aem = params.register(&mut g, false).unwrap();
    let (b1, b2) = (identity_block(&mut g, 3), identity_block(&mut g, 3));
    let (a, b) = (g.constant(x.clone()), g.constant(x.clone()));
    let (o1, o2) = exchange::exchange_stage(&mut g, a, b, DEFAULT_LAMBDA, &aem, &b1, &b2).unwrap();
    assert_eq!(g.value(o1), &x);
    assert_eq!(g.value(o2), &x);

    // Widening block: 3 -> 5 channels.
    let mut r = ChaCha8Rng::seed_from_u64(62);
    let mut widen = |g: &mut Graph<f64>| ConvBlock {
        convs: vec![
            Conv {
                weight: g.constant(Tensor::from_fn(vec![5, 3, 3, 3], |_| r.random_range(-0.3..0.3))),
                bias: None,
                pad: 1,
            },
            Conv {
                weight: g.constant(Tensor::from_fn(vec![5, 5, 3, 3], |_| r.random_range(-0.3..0.3))),
                bias: None,
                pad: 1,
            },
        ],
    };
    let (w1, w2) = (widen(&mut g), widen(&mut g));
    let c = g.constant(random(&[3, 4, 4], 63));
    let (o1, o2) = exchange::exchange_stage(&mut g, a, c, DEFAULT_LAMBDA, &aem, &w1, &w2).unwrap();
    assert_eq!(g.shape(o1), &[5, 4, 4]);
    assert_eq!(g.shape(o2), &[5, 4, 4]);
}

#[test]
fn two_stage_encoder_gradient() {
    // inputs: t1w, fa, then per stage: eca, spatial w, spatial b, conv weights for both branches
    let mut inputs = vec![random(&[2, 4, 4], 70), random(&[2, 4, 4], 71)];
    for stage in 0..2u64 {
        let p = random_aem(2, 80 + 10 * stage);
        inputs.push(p.eca_kernel);
        inputs.push(p.spatial_kernel);
        inputs.push(p.spatial_bias);
        for branch in 0..2u64 {
            inputs.push(random(&[2, 2, 3, 3], 90 + 10 * stage + branch).map(|v| v * 0.5));
            inputs.push(random(&[2], 95 + 10 * stage + branch).map(|v| v * 0.1 + 0.3));
        }
    }
    let err = check_graph_fn(&inputs, 9, |g, v| {
        let (mut a, mut b) = (v[0], v[1]);
        for stage in 0..2 {
            let o = 2 + stage * 7;
            let aem = exchange::AemVars {
                eca_kernel: v[o],
                spatial_kernel: v[o + 1],
                spatial_bias: v[o + 2],
            };
            let block = |w: usize| ConvBlock {
                convs: vec![Conv {
                    weight: v[w],
                    bias: Some(v[w + 1]),
                    pad: 1,
                }],
            };
            let (t, f) = exchange::exchange_stage(g, a, b, DEFAULT_LAMBDA, &aem, &block(o + 3), &block(o + 5))?;
            a = t;
            b = f;
        }
        g.add(a, b)
    })
    .unwrap();
    assert!(err < 1e-4, "two-stage encoder gradient error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exchange_invariants(seed in any::<u64>(), c in 1usize..4, h in 2usize..6, w in 2usize..6) {
        let a = random(&[c, h, w], seed);
        let b = random(&[c, h, w], seed ^ 0xabcdef);
        let pair = FeaturePair::new(a.clone(), b.clone()).unwrap();

        let fem = pair.fem_coefficients(DEFAULT_LAMBDA).unwrap();
        for (x, y) in fem.f_t1w.data().iter().zip(fem.f_fa.data()) {
            prop_assert!((x + y - 1.0).abs() <= 1e-12);
            prop_assert!(*x > 0.5 && *x < 1.0);
        }
        let params = random_aem(c, seed.wrapping_add(1));
        let (aem, _) = params.coefficients(&pair.overlay().unwrap()).unwrap();
        for (x, y) in aem.f_t1w.data().iter().zip(aem.f_fa.data()) {
            prop_assert!((x + y - 1.0).abs() <= 1e-12);
        }

        for out in [pair.fem_exchange(DEFAULT_LAMBDA).unwrap(), pair.aem_exchange(&params).unwrap()] {
            for i in 0..out.len() {
                let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
                prop_assert!(out.data()[i] >= lo && out.data()[i] <= hi);
            }
        }
    }
}
