use hif_core::tensor::io::{self, AnyTensor};
use hif_core::tensor::{DType, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

fn row_norms(t: &Tensor<f64>, width: usize) -> Vec<f64> {
    t.data()
        .chunks_exact(width)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn hift_bytes_are_little_endian() {
    let t = Tensor::<f32>::new([2], vec![1.0, -2.5]).unwrap();
    let bytes = io::encode(&t).unwrap();
    let mut expect = b"HIFT".to_vec();
    expect.extend_from_slice(&[1, 0, 1]);
    expect.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
    expect.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    assert_eq!(bytes, expect);
    assert_eq!(io::read_tensor::<f32, _>(&expect[..]).unwrap(), t);
}

#[test]
fn hift_rejects_bad_magic_and_truncation() {
    let t = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = io::encode(&t).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(io::read_any(&bad[..]).is_err());
    assert!(io::read_any(&bytes[..bytes.len() - 1]).is_err());
    let mut dtype = bytes.clone();
    dtype[5] = 7;
    assert!(io::read_any(&dtype[..]).is_err());
}

#[test]
fn hift_file_round_trip_keeps_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hift");
    let t = Tensor::<f64>::from_f64([3, 1, 2], &[0.1, -0.2, 0.3, 1e-300, f64::MAX, -0.0]).unwrap();
    io::save(&path, &t).unwrap();
    match io::load_any(&path).unwrap() {
        AnyTensor::F64(back) => {
            assert_eq!(back.dims(), t.dims());
            let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&t));
        }
        other => panic!("wrong dtype {:?}", other.dtype()),
    }
    assert_eq!(io::load_any(&path).unwrap().dtype(), DType::Float64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn graph_matmul_matches_plain(a in matrix(4, 3), b in matrix(3, 6)) {
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let z = g.matmul(x, y).unwrap();
        prop_assert!(g.value(z).max_abs_diff(&a.matmul(&b).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_std(x in matrix(5, 8)) {
        let (_, sigma) = x.layer_norm_stats().unwrap();
        prop_assume!(sigma.data().iter().all(|&s| s > 0.05));
        let mut g = Graph::new();
        let v = g.input(x);
        let n = g.normalize(v).unwrap();
        let (mu, sd) = g.value(n).layer_norm_stats().unwrap();
        for (&m, &s) in mu.data().iter().zip(sd.data()) {
            prop_assert!(m.abs() < 1e-12);
            // epsilon in the normalizer pulls the std slightly below one
            prop_assert!((s - 1.0).abs() < 1e-2, "std {}", s);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution(q in matrix(3, 5), k in matrix(5, 5)) {
        // identity values expose the softmax weights directly
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        let v = Tensor::new([5, 5], eye).unwrap();
        let mut g = Graph::new();
        let (q, k, v) = (g.input(q), g.input(k), g.input(v));
        let w = g.attention(q, k, v, 1, None).unwrap();
        for row in g.value(w).data().chunks_exact(5) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_get_no_weight(q in matrix(2, 4), k in matrix(4, 4)) {
        let v = Tensor::from_f64([4, 4], &[
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]).unwrap();
        let mask = [true, false, true, false, false, true, true, true];
        let mut g = Graph::new();
        let (q, k, v) = (g.input(q), g.input(k), g.input(v));
        let w = g.attention(q, k, v, 1, Some(&mask)).unwrap();
        let out = g.value(w).data();
        for (p, &visible) in out.iter().zip(&mask) {
            if !visible {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn rope_preserves_norms(x in matrix(6, 8), base in 10.0f64..1e4) {
        let positions: Vec<usize> = (0..6).map(|i| i * 3).collect();
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let r = g.rope(v, 2, &positions, base).unwrap();
        let (a, b) = (row_norms(&x, 2), row_norms(g.value(r), 2));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn hift_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((seed as f64 + i as f64 * 0.37).sin()) as f32).collect();
        let t = Tensor::new(dims, data).unwrap();
        let bytes = io::encode(&t).unwrap();
        prop_assert_eq!(bytes.len(), io::encoded_len(&t));
        prop_assert_eq!(io::read_tensor::<f32, _>(&bytes[..]).unwrap(), t);
    }
}
