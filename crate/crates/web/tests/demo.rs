use t2v_web::*;

#[test]
fn schedule_curve_decreases() {
    let ab = alpha_bar_curve(50, 1e-3, 0.2).unwrap();
    assert_eq!(ab.len(), 50);
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
    assert!(alpha_bar_curve(0, 1e-3, 0.2).is_err());
}

#[test]
fn prefix_sum_trace() {
    let [f, b, m] = scan_traces(&[1.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(f, vec![1.0, 3.0, 6.0]);
    assert_eq!(b, vec![6.0, 5.0, 3.0]);
    assert_eq!(m, vec![7.0, 8.0, 9.0]);
}

#[test]
fn images_have_rgba_layout() {
    let n = FACE_SIZE * FACE_SIZE * 4;
    let clean = noised_face(1, 3, 0, 100, 1e-4, 0.02).unwrap();
    assert_eq!(clean.len(), n);
    assert!(clean.chunks(4).all(|p| p[3] == 255));
    let noisy = noised_face(1, 3, 100, 100, 1e-4, 0.02).unwrap();
    assert_ne!(clean, noisy);
    assert_eq!(noisy, noised_face(1, 3, 100, 100, 1e-4, 0.02).unwrap());
    let (pair, desc) = face_pair(1, 3, 0).unwrap();
    assert_eq!(pair.len(), 2 * n);
    assert!(desc.contains("tone 3"), "{desc}");
}
