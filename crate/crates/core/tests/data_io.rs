use menet_core::data::{
    extract_slices, gen_dataset, gen_phantom, gen_phantom_with, list_cases, read_mvol, restack,
    split, write_mvol, Case, PhantomParams, SliceFilter, SplitRatio, SplitSpec, Volume,
    DEFAULT_SPACING, MVOL_HEADER_LEN,
};
use menet_core::Error;
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:03}")).collect()
}

#[test]
fn mvol_round_trip_both_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let f = Volume::float(
        [3, 4, 5],
        [1.25, 0.5, 2.0],
        (0..60).map(|i| (i as f32).sin() * 1e-3 + f32::EPSILON * i as f32).collect(),
    )
    .unwrap();
    let b = Volume::binary([3, 4, 5], DEFAULT_SPACING, (0..60).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
    for (name, v) in [("f.mvol", &f), ("b.mvol", &b)] {
        let path = dir.path().join(name);
        write_mvol(v, &path).unwrap();
        let back = read_mvol(&path).unwrap();
        assert_eq!(&back, v);
        assert_eq!(std::fs::read(&path).unwrap(), v.to_bytes());
    }
}

#[test]
fn header_size_for_2x3x4_float() {
    // magic + version + 3 extents + 3 spacings + dtype
    let oracle = 4 + 4 + 3 * 4 + 3 * 4 + 1;
    let v = Volume::float([2, 3, 4], DEFAULT_SPACING, vec![1.0; 24]).unwrap();
    let bytes = v.to_bytes();
    assert_eq!(MVOL_HEADER_LEN, oracle);
    assert_eq!(bytes.len() - 24 * 4, oracle);
    assert_eq!(&bytes[oracle..oracle + 4], &1.0f32.to_le_bytes());
}

#[test]
fn corrupted_files_give_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mvol");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(matches!(read_mvol(&path), Err(Error::BadMagic { .. })));
    std::fs::write(&path, b"MVOL\x01\x00").unwrap();
    assert!(matches!(read_mvol(&path), Err(Error::Truncated(_))));
    assert!(matches!(read_mvol(dir.path().join("missing.mvol")), Err(Error::Io { .. })));
}

#[test]
fn phantom_is_deterministic() {
    let a = gen_phantom(11, [32, 32, 32]).unwrap();
    let b = gen_phantom(11, [32, 32, 32]).unwrap();
    let c = gen_phantom(12, [32, 32, 32]).unwrap();
    for (x, y) in [(&a.t1w, &b.t1w), (&a.fa, &b.fa), (&a.label, &b.label)] {
        assert_eq!(x.checksum(), y.checksum());
    }
    assert_ne!(a.label.checksum(), c.label.checksum());
}

#[test]
fn phantom_foreground_fraction_in_thin_regime() {
    for seed in 0..20 {
        let case = gen_phantom(seed, [64, 64, 64]).unwrap();
        let fraction = case.label.foreground_count().unwrap() as f64 / case.label.len() as f64;
        assert!((0.001..=0.05).contains(&fraction), "seed {seed}: {fraction}");
    }
}

#[test]
fn phantom_value_ranges() {
    let case = gen_phantom(5, [48, 48, 48]).unwrap();
    case.validate().unwrap();
    assert_eq!(case.spacing(), [1.25; 3]);
    for v in [&case.t1w, &case.fa] {
        assert!((0..v.len()).all(|i| (0.0..=1.0).contains(&v.value(i))));
    }
    let mask = case.label.mask().unwrap();
    // FA is discriminative: tube and background separate cleanly
    let p = PhantomParams::default();
    for (i, &m) in mask.iter().enumerate() {
        let fa = case.fa.value(i);
        if m {
            assert!(fa >= p.fa_tube.0 - p.fa_noise - 1e-6);
        } else {
            assert!(fa <= p.fa_background.1 + p.fa_noise + 1e-6);
        }
    }
}

#[test]
fn label_fa_before_noise_is_high() {
    let params = PhantomParams {
        fa_noise: 0.0,
        t1w_noise: 0.0,
        ..PhantomParams::default()
    };
    for seed in 0..5 {
        let case = gen_phantom_with(seed, [32, 32, 32], &params, "c".into()).unwrap();
        let mask = case.label.mask().unwrap();
        assert!(mask.iter().any(|&m| m));
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert!(case.fa.value(i) >= 0.7);
            }
        }
    }
}

#[test]
fn phantom_rejects_small_extents() {
    assert!(matches!(gen_phantom(0, [15, 32, 32]), Err(Error::Data(_))));
}

#[test]
fn dataset_layout_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let ids = gen_dataset(dir.path(), 3, 16, 9).unwrap();
    assert_eq!(ids, vec!["case_000", "case_001", "case_002"]);
    assert_eq!(list_cases(dir.path()).unwrap(), ids);
    for f in ["t1w.mvol", "fa.mvol", "label.mvol"] {
        assert!(dir.path().join("case_001").join(f).is_file());
    }
    let case = Case::load(dir.path().join("case_001")).unwrap();
    assert_eq!(case.id, "case_001");
    let again = tempfile::tempdir().unwrap();
    gen_dataset(again.path(), 3, 16, 9).unwrap();
    for id in &ids {
        for f in ["t1w.mvol", "fa.mvol", "label.mvol"] {
            let a = std::fs::read(dir.path().join(id).join(f)).unwrap();
            let b = std::fs::read(again.path().join(id).join(f)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn split_sizes() {
    let r = SplitRatio::default();
    let s = split(&ids(102), r, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (82, 10, 10));
    let s = split(&ids(40), r, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (32, 4, 4));
    assert!(matches!(split(&ids(9), r, 1), Err(Error::Data(_))));
}

#[test]
fn split_deterministic_and_json() {
    let a = split(&ids(40), SplitRatio::default(), 7).unwrap();
    let b = split(&ids(40), SplitRatio::default(), 7).unwrap();
    let c = split(&ids(40), SplitRatio::default(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    a.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["train", "val", "test", "seed"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(SplitSpec::load(&path).unwrap(), a);
}

#[test]
fn ratio_parsing() {
    assert_eq!("8:1:1".parse::<SplitRatio>().unwrap(), SplitRatio::default());
    assert_eq!("7:2:1".parse::<SplitRatio>().unwrap().to_string(), "7:2:1");
    for bad in ["8:1", "a:b:c", "0:1:1", ""] {
        assert!(matches!(bad.parse::<SplitRatio>(), Err(Error::Config(_))), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions(n in 10usize..200, seed in any::<u64>(), tr in 1u32..10, va in 0u32..4, te in 0u32..4) {
        let ratio = SplitRatio { train: tr, val: va, test: te };
        let all = ids(n);
        let s = split(&all, ratio, seed).unwrap();
        let mut union: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        union.sort();
        prop_assert_eq!(&union, &all);
        let total = (tr + va + te) as f64;
        for (got, w) in [(s.train.len(), tr), (s.val.len(), va), (s.test.len(), te)] {
            let exact = n as f64 * w as f64 / total;
            prop_assert!((got as f64 - exact).abs() <= 1.0, "{} vs {}", got, exact);
        }
    }
}

#[test]
fn slices_cover_volume_and_restack_bitwise() {
    let case = gen_phantom(3, [64, 64, 64]).unwrap();
    let slices = extract_slices(&case, None);
    assert_eq!(slices.len(), 64);
    for (z, s) in slices.iter().enumerate() {
        assert_eq!(s.z, z);
        assert_eq!(s.t1w.shape(), &[1, 64, 64]);
        assert_eq!(s.label.shape(), &[1, 64, 64]);
    }
    let t1w: Vec<_> = slices.iter().map(|s| s.t1w.clone()).collect();
    let label: Vec<_> = slices.iter().map(|s| s.label.clone()).collect();
    assert_eq!(restack(&t1w, case.spacing(), false).unwrap(), case.t1w);
    assert_eq!(restack(&label, case.spacing(), true).unwrap(), case.label);
    assert_eq!(
        restack(&t1w, case.spacing(), false).unwrap().to_bytes(),
        case.t1w.to_bytes()
    );
}

#[test]
fn slice_filter() {
    // seed 1 leaves many empty axial slices at 64³
    let case = gen_phantom(1, [64, 64, 64]).unwrap();
    let all = extract_slices(&case, None);
    let non_empty = all.iter().filter(|s| !s.is_empty()).count();
    let empty = all.len() - non_empty;
    assert!(empty > 10);

    let only = extract_slices(&case, Some(SliceFilter { empty_fraction: 0.0, seed: 0 }));
    assert_eq!(only.len(), non_empty);
    assert!(only.iter().all(|s| !s.is_empty()));
    assert!(only.windows(2).all(|w| w[0].z < w[1].z));

    let some = extract_slices(&case, Some(SliceFilter::default()));
    assert_eq!(some.len(), non_empty + (empty as f64 * 0.1).round() as usize);
    assert_eq!(some, extract_slices(&case, Some(SliceFilter::default())));

    let every = extract_slices(&case, Some(SliceFilter { empty_fraction: 1.0, seed: 3 }));
    assert_eq!(every, all);
}
