use hyperaug_py::{apply_op, neumann_inverse, op_names, run_checks, smallcnn_num_params};

#[test]
fn op_names_round_trip_through_apply_op() {
    let names = op_names();
    assert_eq!(names.len(), 14);
    let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i % 7) as f64 / 7.0).collect();
    for name in names {
        let out = apply_op(name, x.clone(), [2, 3, 4, 4], 0.5).unwrap();
        assert_eq!(out.len(), x.len(), "{name}");
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
    }
}

#[test]
fn neumann_inverse_matches_a_diagonal_inverse() {
    let h = vec![vec![2.0, 0.0], vec![0.0, 0.5]];
    let v = vec![1.0, 1.0];
    let u = neumann_inverse(h, v, 0.4, 200).unwrap();
    assert!((u[0] - 0.5).abs() < 1e-9, "{u:?}");
    assert!((u[1] - 2.0).abs() < 1e-9, "{u:?}");
}

#[test]
fn smallcnn_size_on_mnist_shapes() {
    assert_eq!(smallcnn_num_params([1, 28, 28], 10), 26_698);
}

#[test]
fn self_checks_pass() {
    assert!(run_checks().iter().all(|(name, passed, detail)| {
        if !passed {
            eprintln!("{name}: {detail}");
        }
        *passed
    }));
}
