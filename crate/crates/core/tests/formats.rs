mod common;

use dualpath_core::checkpoint::Checkpoint;
use dualpath_core::dft::{decode, encode, read_dft, read_dft_array, write_dft, write_dft_array, DftArray, DftData};
use dualpath_tensor::Tensor;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 0..4)
}

/// Arbitrary bit patterns, including NaNs, infinities and subnormals.
fn array() -> impl Strategy<Value = DftArray> {
    shape().prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop_oneof![
            prop::collection::vec(any::<u64>(), n).prop_map(|b| DftData::F64(b.into_iter().map(f64::from_bits).collect())),
            prop::collection::vec(any::<u32>(), n).prop_map(|b| DftData::F32(b.into_iter().map(f32::from_bits).collect())),
        ]
        .prop_map(move |data| DftArray { shape: shape.clone(), data })
    })
}

fn tensor() -> impl Strategy<Value = Tensor> {
    shape().prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (prop::collection::vec(("[a-z]{1,8}(\\.[a-z]{1,6}){0,2}", tensor()), 0..5), any::<u64>(), -1e3f64..1e3).prop_map(
        |(tensors, seed, lr)| Checkpoint {
            config: serde_json::json!({ "seed": seed, "lr": lr, "name": "toy" }),
            tensors,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dft_round_trip_in_memory(a in array()) {
        prop_assert!(decode(&encode(&a)).unwrap().bit_eq(&a));
    }

    #[test]
    fn dft_truncation_is_detected(a in array(), cut in 1usize..16) {
        let bytes = encode(&a);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_in_memory(c in checkpoint()) {
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&c));
        prop_assert_eq!(back.encode(), bytes);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = common::rng(1);
    let t = common::normal(&[3, 4], &mut r);
    let p = dir.path().join("t.dft");
    write_dft(&p, &t).unwrap();
    assert!(read_dft(&p).unwrap().bit_eq(&t));

    let half = DftArray {
        shape: vec![2],
        data: DftData::F32(vec![1.5, -0.0]),
    };
    write_dft_array(&p, &half).unwrap();
    assert!(read_dft_array(&p).unwrap().bit_eq(&half));
    assert!(read_dft(&p).is_err());

    let c = Checkpoint {
        config: serde_json::json!({ "k": 1 }),
        tensors: vec![("w".into(), t)],
    };
    let cp = dir.path().join("c.dvhd");
    c.write(&cp).unwrap();
    assert!(Checkpoint::read(&cp).unwrap().bit_eq(&c));
}
