use mi_decode::data::{
    read_container, recording_from_container, recording_to_container, write_container, Container, DataError,
};
use mi_decode::signal::{Cue, CueEvent, RawRecording};
use ndarray::Array2;
use proptest::prelude::*;

fn recording() -> impl Strategy<Value = RawRecording> {
    (1usize..6, 1usize..200, 1.0f64..2000.0).prop_flat_map(|(c, n, fs)| {
        let samples = proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), c * n);
        let events = proptest::collection::vec((0..n, 0usize..4), 0..6);
        (samples, events).prop_map(move |(v, mut ev)| {
            ev.sort();
            let cues = [Cue::Left, Cue::Right, Cue::Feet, Cue::Tongue];
            RawRecording {
                samples: Array2::from_shape_vec((c, n), v).unwrap(),
                fs,
                channel_labels: (0..c).map(|i| format!("E{i}")).collect(),
                events: ev.into_iter().map(|(onset, k)| CueEvent { onset, cue: cues[k] }).collect(),
            }
        })
    })
}

fn bits(r: &RawRecording) -> Vec<u64> {
    r.samples.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn write_read_is_bit_identical(rec in recording()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.eegt");
        write_container(&rec, &path).unwrap();
        let back = read_container(&path).unwrap();
        prop_assert_eq!(bits(&back), bits(&rec));
        prop_assert_eq!(back.fs.to_bits(), rec.fs.to_bits());
        prop_assert_eq!(&back.events, &rec.events);
        prop_assert_eq!(&back.channel_labels, &rec.channel_labels);
        // Encoding is a pure function of the value.
        prop_assert_eq!(std::fs::read(&path).unwrap(), recording_to_container(&back).to_bytes().unwrap());
    }

    #[test]
    fn rank3_payloads_survive(shape in proptest::collection::vec(1usize..5, 0..=3), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_add(i.wrapping_mul(0x9E37_79B9)) & 0x7FEF_FFFF_FFFF_FFFF)).collect();
        let mut c = Container::new(mi_decode::data::ContainerHeader::new("blob"));
        c.push("x", shape.clone(), values.clone());
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let (spec, v) = back.payload("x").unwrap();
        prop_assert_eq!(&spec.shape, &shape);
        prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

fn sample_bytes() -> Vec<u8> {
    let rec = RawRecording {
        samples: Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64),
        fs: 250.0,
        channel_labels: vec!["C3".into(), "Cz".into()],
        events: vec![CueEvent { onset: 1, cue: Cue::Left }],
    };
    recording_to_container(&rec).to_bytes().unwrap()
}

#[test]
fn layout_is_little_endian_with_json_header() {
    let bytes = sample_bytes();
    assert_eq!(&bytes[..4], b"EEGT");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + hlen]).unwrap();
    assert_eq!(header["kind"], "recording");
    assert_eq!(header["payloads"][0]["shape"], serde_json::json!([2, 5]));
    let payload = &bytes[10 + hlen..];
    assert_eq!(payload.len(), 80);
    assert_eq!(f64::from_le_bytes(payload[8..16].try_into().unwrap()), 1.0);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = sample_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad), Err(DataError::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Container::from_bytes(&bad), Err(DataError::VersionUnsupported(9))));
    assert!(matches!(
        Container::from_bytes(&bytes[..bytes.len() - 8]),
        Err(DataError::TruncatedPayload { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Container::from_bytes(&long), Err(DataError::TrailingData { extra: 1 })));
    assert!(recording_from_container(Container::from_bytes(&bytes).unwrap()).is_ok());
}
