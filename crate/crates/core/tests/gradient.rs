mod common;

use actmon::refnet::{init_network, ArchSpec};

#[test]
fn input_gradient_matches_central_differences() {
    let err = common::max_gradient_error(100, 17);
    assert!(err < common::FD_REL_TOL, "max relative error {err:e}");
}

#[test]
fn reference_network_gradient_matches_central_differences_on_a_few_pixels() {
    let net = init_network(&ArchSpec::reference(), 3).unwrap();
    let x: Vec<f64> = (0..256).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let target = vec![0.0; 10];
    let g = net.input_gradient(&x, &target).unwrap();
    let loss = |x: &[f64]| -> f64 { net.forward(x).unwrap().iter().map(|y| y * y).sum() };
    for j in [0, 17, 100, 255] {
        let mut up = x.clone();
        let mut down = x.clone();
        up[j] += common::FD_STEP;
        down[j] -= common::FD_STEP;
        let fd = (loss(&up) - loss(&down)) / (2.0 * common::FD_STEP);
        let scale = g[j].abs().max(fd.abs()).max(1e-6);
        assert!(
            (g[j] - fd).abs() / scale < common::FD_REL_TOL,
            "pixel {j}: {} vs {fd}",
            g[j]
        );
    }
}
