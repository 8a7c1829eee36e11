use std::path::Path;

use halomesh::io::spv::{decode, encode};
use halomesh::io::{
    downsample_record, generate_synthetic_dataset, read_labels, Dataset, SpvVolume, Split, LIVER, TUMOR,
};
use halomesh::{SpvError, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn f32_volumes_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let t = Tensor::from_fn(&shape, |i| {
            let h = i.iter().fold(seed as u64, |a, &v| a.wrapping_mul(6364136223846793005).wrapping_add(v as u64 + 1));
            f32::from_bits((h >> 33) as u32 & 0x7f7f_ffff) * if h & 1 == 0 { 1.0 } else { -1.0 }
        });
        let back = decode(&encode(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back, SpvVolume::F32(t));
    }

    #[test]
    fn label_volumes_roundtrip(shape in prop::collection::vec(1usize..6, 3), seed in any::<u64>()) {
        let t = Tensor::from_fn(&shape, |i| ((i[0] * 7 + i[1] * 3 + i[2]) as u64 ^ seed) as u8 % 3);
        let back = decode(&encode(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back, SpvVolume::U8(t));
    }
}

#[test]
fn header_bytes_by_hand() {
    let t = Tensor::from_vec(&[2, 1, 1], vec![1.0f32, -2.0]).unwrap();
    let mut want = b"SPV1".to_vec();
    want.extend_from_slice(&[0, 3]);
    for e in [2u32, 1, 1] {
        want.extend_from_slice(&e.to_le_bytes());
    }
    want.extend_from_slice(&1.0f32.to_le_bytes());
    want.extend_from_slice(&(-2.0f32).to_le_bytes());
    assert_eq!(encode(&t), want);
}

#[test]
fn malformed_files_give_distinct_errors() {
    let good = encode(&Tensor::from_vec(&[2, 2, 1], vec![0u8, 1, 2, 1]).unwrap());
    let p = Path::new("x.spv");
    let mut bad_magic = good.clone();
    bad_magic[0] = b'Q';
    assert!(matches!(decode(&bad_magic, p), Err(SpvError::BadMagic { .. })));
    assert!(matches!(decode(&good[..good.len() - 1], p), Err(SpvError::Truncated { .. })));
    assert!(matches!(decode(&good[..8], p), Err(SpvError::Truncated { .. })));
    let mut extra = good.clone();
    extra.push(0);
    assert!(matches!(decode(&extra, p), Err(SpvError::TrailingBytes { .. })));
    let mut dtype = good.clone();
    dtype[4] = 9;
    assert!(matches!(decode(&dtype, p), Err(SpvError::UnknownDtype { .. })));

    let dir = tempfile::tempdir().unwrap();
    let seg = dir.path().join("bad.seg.spv");
    std::fs::write(&seg, encode(&Tensor::from_vec(&[1, 1, 2], vec![1u8, 3]).unwrap())).unwrap();
    let err = read_labels(&seg).unwrap_err();
    assert!(matches!(err, SpvError::LabelRange { .. }), "{err}");
    let img = dir.path().join("f.spv");
    std::fs::write(&img, encode(&Tensor::<f32>::zeros(&[1, 1, 1]))).unwrap();
    assert!(matches!(read_labels(&img), Err(SpvError::DtypeMismatch { .. })));
}

#[test]
fn synthetic_dataset_is_seeded_and_split() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_synthetic_dataset(a.path(), 16, 16, 7).unwrap();
    generate_synthetic_dataset(b.path(), 16, 16, 7).unwrap();
    assert_eq!(da.ids(Split::Train).len(), 12);
    assert_eq!(da.ids(Split::Val).len(), 4);
    for (id, _) in da.entries() {
        for ext in ["img", "seg"] {
            let f = format!("{id}.{ext}.spv");
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
    let reopened = Dataset::open(a.path()).unwrap();
    for rec in reopened.load_split(Split::Train).unwrap() {
        assert_eq!(rec.image.shape(), &[16, 16, 16]);
        assert!(rec.count(TUMOR) > 0, "{}", rec.id);
        assert!(rec.count(LIVER) > rec.count(TUMOR));
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(c.path(), 4, 16, 8).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("case000.img.spv")).unwrap(),
        std::fs::read(c.path().join("case000.img.spv")).unwrap()
    );
}

#[test]
fn downsampling_halves_every_side() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(dir.path(), 2, 16, 1).unwrap();
    let rec = ds.load("case000").unwrap();
    let half = downsample_record(&rec).unwrap();
    assert_eq!(half.image.shape(), &[8, 8, 8]);
    let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
    assert!((mean(&rec.image) - mean(&half.image)).abs() < 1e-5);
}

#[test]
fn bad_manifest_lines_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.tsv"), "a\tsideways\n").unwrap();
    assert!(Dataset::open(dir.path()).is_err());
    assert!(Dataset::open(&dir.path().join("missing")).is_err());
}
