use std::collections::BTreeSet;

use menet_core::data::gen_phantom;
use menet_core::model::{
    init, loss_gradient_check, predict_volume, threshold_mask, MeNetConfig, Variant,
};
use menet_core::tensor::Tensor;
use menet_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> MeNetConfig {
    MeNetConfig {
        levels: 2,
        base_channels: 4,
        height: 8,
        width: 8,
        variant,
        ..MeNetConfig::default()
    }
}

fn random_slice(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![1, h, w], |_| r.random_range(0.0..1.0))
}

#[test]
fn default_widths_double() {
    let cfg = MeNetConfig::default();
    assert_eq!((cfg.levels, cfg.base_channels), (4, 16));
    assert_eq!(cfg.widths(), vec![16, 32, 64, 128]);
}

#[test]
fn config_validation() {
    let ok = MeNetConfig::default();
    ok.validate().unwrap();
    for bad in [
        MeNetConfig { levels: 1, ..ok.clone() },
        MeNetConfig { height: 60, ..ok.clone() },
        MeNetConfig { width: 36, ..ok.clone() },
        MeNetConfig { base_channels: 0, ..ok.clone() },
        MeNetConfig { lambda: 0.0, ..ok.clone() },
    ] {
        assert!(matches!(init::<f32>(&bad, 0), Err(Error::Config(_))), "{bad:?}");
    }
    let json = r#"{"levels": 3, "variant": "baseline"}"#;
    let cfg: MeNetConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.levels, cfg.base_channels, cfg.variant), (3, 16, Variant::Baseline));
    assert!(serde_json::from_str::<MeNetConfig>(r#"{"depth": 3}"#).is_err());
}

#[test]
fn shape_law_64() {
    let params = init::<f32>(&MeNetConfig::default(), 3).unwrap();
    let (a, b) = (random_slice(1, 64, 64), random_slice(2, 64, 64));
    let out = params.forward(&a, &b).unwrap();
    assert_eq!(out.logits.shape(), &[1, 64, 64]);
    assert!(out.probabilities.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let base = params.forward_baseline(&a, &b).unwrap();
    assert_eq!(base.logits.shape(), &[1, 64, 64]);
}

#[test]
fn shape_law_other_extents() {
    for (levels, h, w) in [(2, 16, 10), (3, 24, 32), (4, 8, 16)] {
        let cfg = MeNetConfig { levels, base_channels: 2, height: h, width: w, ..MeNetConfig::default() };
        let p = init::<f32>(&cfg, 0).unwrap();
        let out = p.forward(&random_slice(1, h, w), &random_slice(2, h, w)).unwrap();
        assert_eq!(out.logits.shape(), &[1, h, w]);
    }
}

#[test]
fn extent_mismatch_rejected() {
    let p = init::<f32>(&small(Variant::Menet), 0).unwrap();
    let err = p.forward(&random_slice(1, 8, 16), &random_slice(2, 8, 16));
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    let baseline = init::<f32>(&small(Variant::Baseline), 0).unwrap();
    let mut as_menet = baseline.clone();
    as_menet.config.variant = Variant::Menet;
    assert!(matches!(
        as_menet.forward(&random_slice(1, 8, 8), &random_slice(2, 8, 8)),
        Err(Error::Config(_))
    ));
}

#[test]
fn deterministic_init_and_forward() {
    let cfg = MeNetConfig { base_channels: 4, levels: 3, height: 16, width: 16, ..MeNetConfig::default() };
    let a = init::<f32>(&cfg, 5).unwrap();
    let b = init::<f32>(&cfg, 5).unwrap();
    let c = init::<f32>(&cfg, 6).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let (x, y) = (random_slice(1, 16, 16), random_slice(2, 16, 16));
    assert_eq!(a.forward(&x, &y).unwrap(), a.forward(&x, &y).unwrap());
    assert_eq!(a.forward_baseline(&x, &y).unwrap(), b.forward_baseline(&x, &y).unwrap());
}

#[test]
fn baseline_inventory_is_subset() {
    for cfg in [MeNetConfig::default(), small(Variant::Menet)] {
        let menet = init::<f32>(&cfg, 9).unwrap();
        let baseline = init::<f32>(&MeNetConfig { variant: Variant::Baseline, ..cfg.clone() }, 9).unwrap();
        assert!(baseline.numel() < menet.numel());

        let m: BTreeSet<&str> = menet.store.names().collect();
        let b: BTreeSet<&str> = baseline.store.names().collect();
        assert!(b.is_subset(&m));
        let mut expected = BTreeSet::new();
        for l in 0..cfg.levels {
            for n in ["eca", "spatial.w", "spatial.b"] {
                expected.insert(format!("enc{l}.aem.{n}"));
            }
        }
        for br in ["t1w", "fa"] {
            for n in ["q", "k", "v"] {
                expected.insert(format!("fusion.{br}.{n}"));
            }
        }
        let extra: BTreeSet<String> = m.difference(&b).map(|s| s.to_string()).collect();
        assert_eq!(extra, expected);
        for (name, t) in baseline.store.iter() {
            assert_eq!(menet.store.get(name).unwrap(), t, "{name}");
        }
        // exchange weights: eca 1×1×k, spatial 1×2×7×7 + bias; projections d×d each
        let deep = cfg.widths()[cfg.levels - 1];
        let aem: usize = (0..cfg.levels)
            .map(|l| {
                let c = if l == 0 { cfg.base_channels } else { cfg.base_channels << (l - 1) };
                menet_core::exchange::eca_kernel_size(c) + 98 + 1
            })
            .sum();
        assert_eq!(menet.numel() - baseline.numel(), aem + 6 * deep * deep);
    }
}

#[test]
fn variants_differ() {
    let p = init::<f32>(&small(Variant::Menet), 2).unwrap();
    let (x, y) = (random_slice(3, 8, 8), random_slice(4, 8, 8));
    assert_ne!(p.forward(&x, &y).unwrap().logits, p.forward_baseline(&x, &y).unwrap().logits);
}

#[test]
fn whole_network_gradient_check() {
    for seed in 1..=3 {
        for variant in [Variant::Menet, Variant::Baseline] {
            let err = loss_gradient_check(variant, seed).unwrap();
            assert!(err < 1e-4, "{variant:?} seed {seed}: gradient error {err}");
        }
    }
}

#[test]
fn threshold_is_strict() {
    let probs = Tensor::<f64>::new([1, 2, 3], vec![0.2, 0.5, 0.50001, 0.9, 0.4999, 1.0]).unwrap();
    assert_eq!(threshold_mask(&probs, 0.5), vec![0, 0, 1, 1, 0, 1]);
    assert_eq!(threshold_mask(&probs, 0.3), vec![0, 1, 1, 1, 1, 1]);
}

#[test]
fn predict_volume_shapes_and_zero_head() {
    let case = gen_phantom(4, [16, 16, 16]).unwrap();
    let cfg = MeNetConfig { levels: 2, base_channels: 2, height: 16, width: 16, ..MeNetConfig::default() };
    let mut p = init::<f32>(&cfg, 0).unwrap();
    let mask = predict_volume(&p, &case, 0.5).unwrap();
    assert_eq!(mask.extents(), case.label.extents());
    assert_eq!(mask.spacing(), case.label.spacing());
    assert!(mask.is_binary());

    // zero head → logits 0 → probability exactly 0.5 → background under strict >
    p.store.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let mask = predict_volume(&p, &case, 0.5).unwrap();
    assert_eq!(mask.foreground_count().unwrap(), 0);
    let all = predict_volume(&p, &case, 0.49).unwrap();
    assert_eq!(all.foreground_count().unwrap(), all.len());

    let wrong = MeNetConfig { height: 32, ..cfg };
    let p = init::<f32>(&wrong, 0).unwrap();
    assert!(matches!(predict_volume(&p, &case, 0.5), Err(Error::Config(_))));
}
