//! STEN and SCKP encoding: property round-trips and error offsets.

use proptest::prelude::*;
use shunted::model::{Checkpoint, Model, ModelConfig, Variant};
use shunted::numerics::sten::{self, AnyTensor};
use shunted::numerics::Tensor;
use shunted::Error;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..5)
}

fn f64_tensor() -> impl Strategy<Value = Tensor<f64>> {
    shape_strategy().prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        // raw bit patterns cover NaN payloads, infinities and subnormals
        prop::collection::vec(any::<u64>(), n).prop_map(move |bits| {
            Tensor::new(shape.clone(), bits.into_iter().map(f64::from_bits).collect()).unwrap()
        })
    })
}

fn f32_tensor() -> impl Strategy<Value = Tensor<f32>> {
    shape_strategy().prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u32>(), n).prop_map(move |bits| {
            Tensor::new(shape.clone(), bits.into_iter().map(f32::from_bits).collect()).unwrap()
        })
    })
}

fn any_tensor() -> impl Strategy<Value = AnyTensor> {
    prop_oneof![
        f32_tensor().prop_map(AnyTensor::from_tensor),
        f64_tensor().prop_map(AnyTensor::from_tensor),
    ]
}

fn bits(t: &AnyTensor) -> (Vec<usize>, Vec<u64>) {
    let data = match t {
        AnyTensor::F32(t) => t.data().iter().map(|v| v.to_bits() as u64).collect(),
        AnyTensor::F64(t) => t.data().iter().map(|v| v.to_bits()).collect(),
    };
    (t.shape().to_vec(), data)
}

fn encode(t: &AnyTensor) -> Vec<u8> {
    match t {
        AnyTensor::F32(t) => sten::to_bytes(t),
        AnyTensor::F64(t) => sten::to_bytes(t),
    }
}

fn offset(e: Error) -> usize {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sten_roundtrip_is_bitwise(t in any_tensor()) {
        let bytes = encode(&t);
        let back = sten::from_bytes(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&t));
        prop_assert_eq!(back.dtype(), t.dtype());
        let size = match t { AnyTensor::F32(_) => 4, AnyTensor::F64(_) => 8 };
        let numel: usize = t.shape().iter().product();
        prop_assert_eq!(bytes.len(), 8 + 8 * t.shape().len() + size * numel);
    }

    #[test]
    fn sten_truncation_is_located(t in any_tensor(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&t);
        let keep = cut.index(bytes.len());
        let err = sten::from_bytes(&bytes[..keep]).unwrap_err();
        prop_assert!(offset(err) <= keep);
    }

    #[test]
    fn sckp_roundtrip_is_bitwise(
        entries in prop::collection::vec(("[a-z][a-z0-9_.]{0,24}", any_tensor()), 0..6),
    ) {
        let ck = Checkpoint { entries };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.entries.len(), ck.entries.len());
        for ((n0, t0), (n1, t1)) in ck.entries.iter().zip(&back.entries) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(bits(t0), bits(t1));
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn sckp_handles_unicode_names(name in "\\PC{1,12}", v in any::<f64>()) {
        let mut ck = Checkpoint::new();
        ck.push(name.clone(), &Tensor::<f64>::scalar(v));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.entries[0].0, &name);
        prop_assert_eq!(back.tensor::<f64>(&name).unwrap().data()[0].to_bits(), v.to_bits());
    }
}

#[test]
fn sten_header_errors_point_at_the_field() {
    let t = Tensor::<f32>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let good = sten::to_bytes(&t);
    assert_eq!(&good[..8], b"STEN\x01\x00\x02\x00");
    for (at, val) in [(0usize, b'X'), (4, 9), (5, 7), (7, 1)] {
        let mut b = good.clone();
        b[at] = val;
        assert_eq!(offset(sten::from_bytes(&b).unwrap_err()), at, "byte {at}");
    }
    // dims claim more payload than present
    let mut b = good.clone();
    b[8] = 3;
    assert!(sten::from_bytes(&b).is_err());
    let mut b = good;
    b.push(0);
    assert_eq!(offset(sten::from_bytes(&b).unwrap_err()), 8 + 16 + 24);
}

#[test]
fn sckp_layout_and_errors() {
    let mut ck = Checkpoint::new();
    ck.push("w", &Tensor::<f32>::scalar(1.5));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..9], b"SCKP\x01\x01\x00\x00\x00");
    assert_eq!(&bytes[9..12], b"\x01\x00w");
    assert_eq!(&bytes[12..16], b"STEN");
    for keep in 0..bytes.len() {
        assert!(offset(Checkpoint::from_bytes(&bytes[..keep]).unwrap_err()) <= keep);
    }
    let mut trailing = bytes.clone();
    trailing.push(7);
    assert_eq!(offset(Checkpoint::from_bytes(&trailing).unwrap_err()), bytes.len());
    // the embedded tensor's error offset is absolute in the file
    let mut bad = bytes;
    bad[12] = b'X';
    assert_eq!(offset(Checkpoint::from_bytes(&bad).unwrap_err()), 12);
}

#[test]
fn sckp_type_and_shape_mismatches_are_reported() {
    let mut ck = Checkpoint::new();
    ck.push("a", &Tensor::<f64>::zeros(&[2]));
    assert!(ck.tensor::<f32>("a").is_err());
    assert!(ck.tensor::<f64>("missing").is_err());

    let cfg = ModelConfig::variant(Variant::Desk);
    let (_, store) = Model::build::<f32>(&cfg, 0).unwrap();
    let mut ck = Checkpoint::from_store(&store);
    let (_, mut other) = Model::build::<f32>(&cfg, 1).unwrap();
    ck.load_into(&mut other).unwrap();
    for (p, q) in store.iter().zip(other.iter()) {
        assert_eq!(p.value, q.value);
    }
    ck.entries[0].1 = AnyTensor::from_tensor(Tensor::<f32>::zeros(&[1]));
    let err = ck.load_into(&mut other).unwrap_err().to_string();
    assert!(err.contains(&store.iter().next().unwrap().name), "{err}");
}

#[test]
fn files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::from_f64(&[3], &[0.1, -2.0, f64::INFINITY]).unwrap();
    let p = dir.path().join("t.sten");
    sten::save(&p, &t).unwrap();
    assert_eq!(sten::load(&p).unwrap(), AnyTensor::from_tensor(t.clone()));
    let mut ck = Checkpoint::new();
    ck.push("t", &t);
    let p = dir.path().join("c.sckp");
    ck.save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
}
