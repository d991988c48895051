//! `.3dqp` encoder and decoder against byte fixtures produced from the
//! format description by `fixtures/make_fixtures.py`.

use ternq::codec::{deserialize_model, serialize_model, PackedLayer, PackedModel, StorageScheme};
use ternq::quant::TernaryTensor;
use ternq::Error;

const TERNARY: &[u8] = include_bytes!("fixtures/ternary.3dqp");
const BINARY: &[u8] = include_bytes!("fixtures/binary.3dqp");
const EMPTY: &[u8] = include_bytes!("fixtures/empty.3dqp");

fn layer(name: &str, shape: &[usize], gp: f32, gn: f32, alpha: &[f32], values: &[i8]) -> PackedLayer {
    PackedLayer {
        name: name.into(),
        gamma_pos: gp,
        gamma_neg: gn,
        alpha: alpha.to_vec(),
        pattern: TernaryTensor::from_values(shape, values).unwrap(),
    }
}

fn ternary_model() -> PackedModel {
    PackedModel {
        scheme: StorageScheme::Ternary,
        layers: vec![
            layer("enc.kernel", &[2, 1, 1, 1, 3], 1.5, 0.75, &[0.5, 0.25], &[1, 0, -1, 0, 1, 1]),
            layer("head.kernel", &[1, 1, 1, 1, 10], 1.0, 1.0, &[0.125], &[1, -1, 0, 0, 1, 1, -1, 0, 0, 1]),
        ],
    }
}

fn binary_model() -> PackedModel {
    PackedModel {
        scheme: StorageScheme::Binary,
        layers: vec![layer("b.kernel", &[1, 1, 1, 3, 3], 2.0, 0.5, &[0.375], &[1, -1, -1, 1, 1, 1, -1, 1, -1])],
    }
}

#[test]
fn encoder_matches_fixtures() {
    assert_eq!(serialize_model(&ternary_model()).unwrap(), TERNARY);
    assert_eq!(serialize_model(&binary_model()).unwrap(), BINARY);
    let empty = PackedModel { scheme: StorageScheme::Ternary, layers: vec![] };
    assert_eq!(serialize_model(&empty).unwrap(), EMPTY);
}

#[test]
fn decoder_matches_fixtures() {
    assert_eq!(deserialize_model(TERNARY).unwrap(), ternary_model());
    assert_eq!(deserialize_model(BINARY).unwrap(), binary_model());
    assert!(deserialize_model(EMPTY).unwrap().layers.is_empty());
}

#[test]
fn encoded_len_matches_fixture_sizes() {
    assert_eq!(ternary_model().encoded_len(), TERNARY.len());
    assert_eq!(binary_model().encoded_len(), BINARY.len());
    assert_eq!(EMPTY.len(), 14);
}

#[test]
fn restored_values_follow_levels() {
    let w = ternary_model().layers[0].restore().unwrap();
    // channel 0: α 0.5, channel 1: α 0.25
    assert_eq!(w.data(), &[0.75, 0.0, -0.375, 0.0, 0.375, 0.375]);
}

#[test]
fn every_truncation_is_rejected() {
    for cut in 0..TERNARY.len() {
        let err = deserialize_model(&TERNARY[..cut]).unwrap_err();
        assert!(
            matches!(err, Error::Truncated { .. } | Error::Crc { .. } | Error::Corrupt(_) | Error::BadMagic { .. }),
            "cut {cut}: {err}"
        );
    }
}

#[test]
fn every_single_bit_flip_is_rejected() {
    for byte in 0..TERNARY.len() {
        for bit in 0..8 {
            let mut b = TERNARY.to_vec();
            b[byte] ^= 1 << bit;
            assert!(deserialize_model(&b).is_err(), "flip at byte {byte} bit {bit} accepted");
        }
    }
}
