use proptest::prelude::*;
use tlm::features::{
    apply_mask, build_view, offset_importance, read_matrix, write_matrix, FeatureError, MaskRange, ViewSpec,
};
use tlm::ingest::{Origin, Timestamp};
use tlm::synth::{self, LeakageProfile};
use tlm::{Direction, LabeledDataset, RawSegment, Session, ViewKind};

fn segment(k: usize, payload: Vec<u8>) -> RawSegment {
    RawSegment {
        seq: 1000 + k as u32 * 10_000,
        timestamp: Timestamp::new(100 + k as u64, 0),
        direction: Direction::ClientToServer,
        payload,
    }
}

fn session(id: &str, label: &str, payloads: Vec<Vec<u8>>) -> Session {
    Session {
        session_id: id.into(),
        label: label.into(),
        segments: payloads.into_iter().enumerate().map(|(k, p)| segment(k, p)).collect(),
        origin: Origin::Synthetic(0),
    }
}

/// Segment `k` (1-based) carries 150 + 10k bytes, each equal to `k * 7 + offset`.
fn thirteen_segment_session() -> Session {
    let payloads = (1..=13)
        .map(|k| {
            if k <= 3 {
                Vec::new()
            } else {
                (0..150 + 10 * k).map(|j| (k * 7 + j) as u8).collect()
            }
        })
        .collect();
    session("s", "a", payloads)
}

fn app_record(len: usize, fill: u8) -> Vec<u8> {
    let mut r = vec![0x17, 3, 3, (len >> 8) as u8, len as u8];
    r.extend(std::iter::repeat_n(fill, len));
    r
}

fn synthetic() -> LabeledDataset {
    synth::generate(&LeakageProfile {
        classes: 3,
        sessions_per_class: 6,
        handshake_leak: true,
        length_leak: true,
        seed: 9,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn tcp_payload_rows_follow_the_handshake() {
    let ds = LabeledDataset::new(vec![thirteen_segment_session()], 1);
    let v = build_view(&ds, &ViewSpec::tcp_payload()).unwrap();
    assert_eq!(v.samples.len(), 1);
    let f = &v.samples[0].features;
    assert_eq!(f.len(), 2000);
    for i in 0..10 {
        let k = i + 4;
        let len = 150 + 10 * k;
        let row = &f[i * 200..(i + 1) * 200];
        for (j, &b) in row.iter().enumerate() {
            let expected = if j < len { (k * 7 + j) as u8 } else { 0 };
            assert_eq!(b, expected, "row {i} offset {j}");
        }
    }
}

#[test]
fn short_sessions_are_zero_padded() {
    let ds = LabeledDataset::new(vec![session("s", "a", vec![vec![], vec![], vec![], vec![9; 3]])], 1);
    let v = build_view(&ds, &ViewSpec::tcp_payload()).unwrap();
    let f = &v.samples[0].features;
    assert_eq!(&f[..3], &[9, 9, 9]);
    assert!(f[3..].iter().all(|&b| b == 0));
}

#[test]
fn tls_view_takes_app_data_segments_and_masks_headers() {
    let payloads = vec![
        vec![],
        vec![0x16, 3, 1, 0, 2, 1, 2],
        app_record(30, 0xaa),
        vec![0x15, 3, 3, 0, 2, 1, 1],
        app_record(250, 0xbb),
    ];
    let ds = LabeledDataset::new(vec![session("s", "a", payloads)], 1);
    let spec = ViewSpec::tls_app_data().with_mask(MaskRange::prefix(5));
    let v = build_view(&ds, &spec).unwrap();
    let f = &v.samples[0].features;
    assert_eq!(f.len(), 2000);
    assert_eq!(&f[..5], &[0; 5]);
    assert!(f[5..35].iter().all(|&b| b == 0xaa));
    assert!(f[35..200].iter().all(|&b| b == 0));
    assert_eq!(&f[200..205], &[0; 5]);
    assert!(f[205..400].iter().all(|&b| b == 0xbb));
    assert!(f[400..].iter().all(|&b| b == 0));
}

#[test]
fn sessions_without_app_data_are_dropped() {
    let ds = LabeledDataset::new(
        vec![
            session("none", "a", vec![vec![], vec![0x16, 3, 1, 0, 1, 0]]),
            session("one", "b", vec![app_record(4, 1)]),
        ],
        1,
    );
    let v = build_view(&ds, &ViewSpec::tls_app_data()).unwrap();
    assert_eq!(v.dropped, 1);
    assert_eq!(v.samples.len(), 1);
    assert_eq!(v.samples[0].session_id, "one");
    assert_eq!(v.samples[0].class_index, 1);
    let only_handshake = LabeledDataset::new(vec![session("none", "a", vec![vec![0x16, 3, 1, 0, 1, 0]])], 1);
    assert!(matches!(
        build_view(&only_handshake, &ViewSpec::tls_app_data()),
        Err(FeatureError::EmptyView { dropped: 1 })
    ));
}

#[test]
fn concat_view_joins_records_and_masks_each_header() {
    let a = app_record(10, 0x11);
    let b = app_record(20, 0x22);
    // The second record straddles two segments.
    let mut joined = a.clone();
    joined.extend_from_slice(&b[..12]);
    let tail = b[12..].to_vec();
    let mut tail_seg = vec![0x17];
    tail_seg.extend_from_slice(&tail[1..]);
    assert_eq!(tail[0], 0x22);
    let ds = LabeledDataset::new(vec![session("s", "a", vec![joined, tail_seg])], 1);
    let spec = ViewSpec {
        concat_length: 64,
        ..ViewSpec::concat_tls()
    };
    let v = build_view(&ds, &spec).unwrap();
    let f = &v.samples[0].features;
    assert_eq!(f.len(), 64);
    assert_eq!(&f[..15], &a[..]);

    let masked = build_view(&ds, &spec.clone().with_mask(MaskRange::prefix(5))).unwrap();
    let g = &masked.samples[0].features;
    assert_eq!(&g[..5], &[0; 5]);
    assert!(g[5..15].iter().all(|&x| x == 0x11));
    assert_eq!(&g[15..20], &[0; 5]);
}

#[test]
fn concat_view_truncates() {
    let ds = LabeledDataset::new(vec![session("s", "a", vec![app_record(3000, 7)])], 1);
    let v = build_view(&ds, &ViewSpec::concat_tls()).unwrap();
    assert_eq!(v.dim(), 2000);
    assert_eq!(v.samples[0].features.len(), 2000);
    assert!(v.samples[0].features[5..].iter().all(|&b| b == 7));
}

#[test]
fn every_view_has_uniform_dimension_and_masked_zeros() {
    let ds = synthetic();
    for kind in [ViewKind::TcpPayload, ViewKind::TlsAppData] {
        for mask in [MaskRange::NONE, MaskRange::prefix(5), MaskRange { start: 3, end: 40 }] {
            let spec = ViewSpec {
                kind,
                ..ViewSpec::tcp_payload()
            }
            .with_mask(mask);
            let v = build_view(&ds, &spec).unwrap();
            assert_eq!(v.dim(), 2000);
            for s in &v.samples {
                assert_eq!(s.features.len(), 2000);
                for row in s.features.chunks(200) {
                    assert!(row[mask.start..mask.end].iter().all(|&b| b == 0));
                }
            }
        }
    }
}

#[test]
fn view_is_deterministic() {
    let ds = synthetic();
    let a = build_view(&ds, &ViewSpec::tls_app_data()).unwrap();
    let b = build_view(&ds, &ViewSpec::tls_app_data()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn apply_mask_behaviour() {
    let ds = synthetic();
    let v = build_view(&ds, &ViewSpec::tls_app_data()).unwrap();
    assert_eq!(apply_mask(&v, MaskRange::NONE).unwrap(), v);

    let m = apply_mask(&v, MaskRange::prefix(21)).unwrap();
    assert_eq!(m.spec.per_packet_mask, MaskRange::prefix(21));
    for s in &m.samples {
        for row in s.features.chunks(200) {
            assert!(row[..21].iter().all(|&b| b == 0));
        }
    }
    assert_eq!(apply_mask(&m, MaskRange::prefix(21)).unwrap(), m);
    // The input is untouched and rebuilding with the mask gives the same view.
    assert_eq!(v.spec.per_packet_mask, MaskRange::NONE);
    let rebuilt = build_view(&ds, &ViewSpec::tls_app_data().with_mask(MaskRange::prefix(21))).unwrap();
    assert_eq!(rebuilt.samples, m.samples);

    let hull = apply_mask(
        &apply_mask(&v, MaskRange::prefix(5)).unwrap(),
        MaskRange { start: 10, end: 12 },
    )
    .unwrap();
    assert_eq!(hull.spec.per_packet_mask, MaskRange::prefix(12));

    assert!(matches!(
        apply_mask(&v, MaskRange { start: 0, end: 201 }),
        Err(FeatureError::RangeOutOfBounds { .. })
    ));
    let c = build_view(&ds, &ViewSpec::concat_tls()).unwrap();
    assert!(matches!(
        apply_mask(&c, MaskRange::prefix(5)),
        Err(FeatureError::KindMismatch(_))
    ));
}

#[test]
fn spec_validation() {
    let too_wide = ViewSpec::tcp_payload().with_mask(MaskRange::prefix(201));
    assert!(matches!(
        too_wide.validate(),
        Err(FeatureError::RangeOutOfBounds { .. })
    ));
    let zero = ViewSpec {
        concat_length: 0,
        ..ViewSpec::concat_tls()
    };
    assert!(zero.validate().is_err());
    assert!(ViewSpec::concat_tls()
        .with_mask(MaskRange::prefix(500))
        .validate()
        .is_ok());
}

#[test]
fn offset_importance_examples() {
    let spec = ViewSpec::tcp_payload();
    let mut flat = vec![0.0; 2000];
    flat[203] = 1.0;
    let o = offset_importance(&flat, &spec).unwrap();
    assert_eq!(o.len(), 200);
    assert_eq!(o[3], 1.0);
    assert_eq!(o.iter().sum::<f64>(), 1.0);

    let uniform = offset_importance(&vec![1.0 / 2000.0; 2000], &spec).unwrap();
    for w in uniform.windows(2) {
        assert!((w[0] - w[1]).abs() < 1e-15);
    }
    assert!(matches!(
        offset_importance(&flat, &ViewSpec::concat_tls()),
        Err(FeatureError::KindMismatch(_))
    ));
    assert!(matches!(
        offset_importance(&flat[..10], &spec),
        Err(FeatureError::DimensionMismatch { .. })
    ));
}

proptest! {
    #[test]
    fn offset_importance_preserves_mass(packets in 1usize..12, n in 1usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spec = ViewSpec { packets, bytes_per_packet: n, ..ViewSpec::tcp_payload() };
        let flat: Vec<f64> = (0..packets * n).map(|_| rng.random::<f64>()).collect();
        let o = offset_importance(&flat, &spec).unwrap();
        let a: f64 = flat.iter().sum();
        let b: f64 = o.iter().sum();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        for j in 0..n {
            let direct: f64 = (0..packets).map(|i| flat[i * n + j]).sum();
            prop_assert!((o[j] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn masking_twice_is_masking_once(start in 0usize..200, len in 0usize..200) {
        let end = (start + len).min(200);
        let ds = LabeledDataset::new(vec![
            session("x", "a", vec![app_record(300, 0x5a), app_record(40, 0x33)]),
            session("y", "b", vec![app_record(120, 0x44)]),
        ], 1);
        let v = build_view(&ds, &ViewSpec::tls_app_data()).unwrap();
        let r = MaskRange { start, end };
        if let Ok(once) = apply_mask(&v, r) {
            prop_assert_eq!(apply_mask(&once, r).unwrap(), once.clone());
            for s in &once.samples {
                for row in s.features.chunks(200) {
                    prop_assert!(row[start..end].iter().all(|&b| b == 0));
                }
            }
        } else {
            prop_assert!(start == 0 && end >= 125);
        }
    }
}

#[test]
fn matrix_round_trip() {
    let ds = synthetic();
    let v = build_view(&ds, &ViewSpec::tls_app_data().with_mask(MaskRange::prefix(5))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("view.tlmv");
    write_matrix(&v, &p).unwrap();
    let back = read_matrix(&p).unwrap();
    assert_eq!(back.samples, v.samples);
    assert_eq!(back.spec, v.spec);
    assert_eq!(back.class_names, v.class_names);

    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"TLMV");
    assert_eq!(
        u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
        v.samples.len()
    );
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2000);
    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_matrix(&p).is_err());
}
