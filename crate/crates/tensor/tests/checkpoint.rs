use clickvos_tensor::{checkpoint, ParamStore, Tensor, TensorError};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f64>(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn records_round_trip_bit_exact(tensors in prop::collection::vec(tensor_strategy(), 0..6)) {
        let names: Vec<String> = (0..tensors.len()).map(|i| format!("layer{i}.weight")).collect();
        let bytes = checkpoint::encode(names.iter().map(String::as_str).zip(&tensors));
        let back = checkpoint::decode(&bytes, "mem".as_ref()).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((name, t), (orig_name, orig)) in back.iter().zip(names.iter().zip(&tensors)) {
            prop_assert_eq!(name, orig_name);
            prop_assert_eq!(t.shape(), orig.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = orig.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn header_layout_is_fixed() {
    let t = Tensor::new([2], vec![1.5, -2.0]).unwrap();
    let bytes = checkpoint::encode([("w", &t)]);
    assert_eq!(&bytes[..4], b"ABSW");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 1);
    assert_eq!(bytes[10], b'w');
    assert_eq!(bytes[11], 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.5);
    assert_eq!(bytes.len(), 32);
}

#[test]
fn store_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.absw");
    let mut store = ParamStore::new();
    store.insert("a", Tensor::new([2, 2], vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap()).unwrap();
    store.insert("b.bias", Tensor::scalar(-7.25)).unwrap();
    checkpoint::write(&path, &store).unwrap();
    let mut other = ParamStore::new();
    other.insert("a", Tensor::zeros([2, 2])).unwrap();
    other.insert("b.bias", Tensor::zeros(Vec::<usize>::new())).unwrap();
    other.load_records(checkpoint::read(&path).unwrap()).unwrap();
    for ((_, x), (_, y)) in store.iter().zip(other.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let path = std::path::Path::new("bad.absw");
    assert!(matches!(checkpoint::decode(b"ABSX\x01\0\0\0", path), Err(TensorError::Format { .. })));
    let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
    let bytes = checkpoint::encode([("x", &t)]);
    assert!(matches!(
        checkpoint::decode(&bytes[..bytes.len() - 3], path),
        Err(TensorError::Format { .. })
    ));
}
