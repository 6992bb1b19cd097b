mod common;

use speaker_count::dsp::archive::decode_lmfb;

#[test]
fn round_trips_are_bit_exact() {
    common::persistence_round_trips(51).unwrap();
}

#[test]
fn every_truncation_and_bit_flip_is_rejected() {
    let tried = common::persistence_corruption(500, 52).unwrap();
    assert!(tried > 1000);
}

#[test]
fn archive_with_valid_checksum_but_nan_payload_is_rejected() {
    let m = speaker_count::dsp::LmfbMatrix::new(1, 2, vec![0.5, 1.5]).unwrap();
    let mut b = speaker_count::dsp::archive::encode_lmfb(&m);
    b[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
    let n = b.len();
    let crc = crc32fast::hash(&b[..n - 4]);
    b[n - 4..].copy_from_slice(&crc.to_le_bytes());
    let err = decode_lmfb(&b).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
}
