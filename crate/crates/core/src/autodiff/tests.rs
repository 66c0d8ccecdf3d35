use super::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn filled(shape: &[usize], v: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, vec![v; n])
}

#[test]
fn conv_of_ones_sums_kernel() {
    let mut g = Graph::new();
    let x = g.constant(filled(&[1, 3, 3, 3], 1.0));
    let w = g.param(filled(&[1, 1, 3, 3, 3], 1.0));
    let b = g.param(filled(&[1], 0.0));
    let y = g.conv3d_valid(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[27.0]);
}

#[test]
fn conv_valid_shape_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(filled(&[1, 5, 5, 5], 0.5));
    let w = g.param(filled(&[2, 1, 3, 3, 3], 0.1));
    let b = g.param(filled(&[2], 0.0));
    let y = g.conv3d_valid(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 3, 3]);

    let small = g.constant(filled(&[1, 2, 5, 5], 0.5));
    assert!(g.conv3d_valid(small, w, b).is_err());
    let wrong_c = g.constant(filled(&[3, 5, 5, 5], 0.5));
    let e = g.conv3d_valid(wrong_c, w, b).unwrap_err();
    assert!(e.to_string().contains("channel mismatch"), "{e}");
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2, 2], (0..8).map(f64::from).collect()));
    let y = g.maxpool3d(x).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);

    let c = g.param(filled(&[1, 4, 2, 2], 3.0));
    let y = g.maxpool3d(c).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 3.0]);

    let odd = g.constant(filled(&[1, 3, 2, 2], 0.0));
    assert!(g.maxpool3d(odd).is_err());
}

#[test]
fn maxpool_ties_route_to_first_voxel() {
    let mut g = Graph::new();
    let x = g.param(filled(&[1, 2, 2, 4], 1.0));
    let y = g.maxpool3d(x).unwrap();
    let p = g.sigmoid(y);
    let loss = g.weighted_masked_bce(p, &[1, 1], None, &LossConfig::default()).unwrap();
    g.backward(loss).unwrap();
    let gx = g.grad(x).unwrap();
    let nonzero: Vec<usize> = gx.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
    // Blocks start at flat indices 0 and 2.
    assert_eq!(nonzero, vec![0, 2]);
}

#[test]
fn transposed_conv_single_contribution() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], vec![2.5]));
    let w = g.param(filled(&[1, 1, 2, 2, 2], 1.0));
    let b = g.param(filled(&[1], 0.0));
    let y = g.conv_transpose3d_x2(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let x = g.constant(filled(&[2, 3, 4, 5], 1.0));
    let w = g.param(filled(&[2, 3, 2, 2, 2], 1.0));
    let b = g.param(filled(&[3], 0.0));
    let y = g.conv_transpose3d_x2(x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 6, 8, 10]);

    let wrong = g.param(filled(&[1, 3, 2, 2, 2], 1.0));
    assert!(g.conv_transpose3d_x2(x, wrong, b).is_err());
}

#[test]
fn transposed_conv_with_ones_is_nearest_upsampling() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..2 * 2 * 3 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = g.constant(t(&[1, 2, 3, 2], data[..12].to_vec()));
    let w = g.param(filled(&[1, 1, 2, 2, 2], 1.0));
    let b = g.param(filled(&[1], 0.0));
    let y = g.conv_transpose3d_x2(x, w, b).unwrap();
    let yv = g.value(y).data();
    for z in 0..4 {
        for r in 0..6 {
            for c in 0..4 {
                let up = yv[(z * 6 + r) * 4 + c];
                let src = data[((z / 2) * 3 + r / 2) * 2 + c / 2];
                assert_eq!(up, src);
            }
        }
    }
}

#[test]
fn concat_center_crop_cases() {
    let mut g = Graph::new();
    let a = g.param(filled(&[2, 4, 4, 4], 1.0));
    let b = g.param(filled(&[3, 4, 4, 4], 2.0));
    let y = g.concat_center_crop(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[5, 4, 4, 4]);

    let a = g.param(filled(&[1, 2, 2, 2], 1.0));
    let bdata: Vec<f64> = (0..216).map(|i| f64::from(i) * 0.01).collect();
    let b = g.param(t(&[1, 6, 6, 6], bdata));
    let y = g.concat_center_crop(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2, 2, 2]);
    // b's center box starts at (2, 2, 2).
    assert_eq!(g.value(y).data()[8], f64::from((2 * 6 + 2) * 6 + 2) * 0.01);

    let p = g.sigmoid(y);
    let loss = g.weighted_masked_bce(p, &[1; 16], None, &LossConfig::default()).unwrap();
    g.backward(loss).unwrap();
    let gb = g.grad(b).unwrap();
    for d in 0..6 {
        for h in 0..6 {
            for w in 0..6 {
                let inside = (2..4).contains(&d) && (2..4).contains(&h) && (2..4).contains(&w);
                let v = gb[(d * 6 + h) * 6 + w];
                assert_eq!(v != 0.0, inside, "voxel ({d},{h},{w})");
            }
        }
    }

    let odd = g.param(filled(&[1, 5, 5, 5], 0.0));
    assert!(g.concat_center_crop(a, odd).unwrap_err().to_string().contains("odd margin"));
}

#[test]
fn sigmoid_values_and_symmetry() {
    assert_eq!(sigmoid(0.0f64), 0.5);
    assert!(sigmoid(-800.0f64) > 0.0 && sigmoid(-40.0f64) < 1e-17);
    assert!(sigmoid(800.0f64) < 1.0 && sigmoid(40.0f64) > 1.0 - 1e-15);
    assert!(sigmoid(100.0f32) < 1.0);
    for i in -20..=20 {
        let x = i as f64 * 0.731;
        assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 1], vec![0.0]));
    let y = g.sigmoid(x);
    // For y = 0 the loss -ln(1 - sigmoid(x)) has derivative sigmoid(x).
    let loss = g.weighted_masked_bce(y, &[0], None, &LossConfig::default()).unwrap();
    g.backward(loss).unwrap();
    assert!((g.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);

    let h = 1e-5f64;
    let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
    assert!((fd - 0.25).abs() < 1e-10);
}

fn bce(p: &[f64], y: &[u8], dc: Option<&[u8]>, cfg: LossConfig) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let pv = g.param(t(&[1, 1, 1, p.len()], p.to_vec()));
    let l = g.weighted_masked_bce(pv, y, dc, &cfg).unwrap();
    g.backward(l).unwrap();
    (g.value(l).item(), g.grad(pv).unwrap().to_vec())
}

#[test]
fn bce_closed_forms() {
    let w10 = LossConfig { root_weight: 10.0, ..Default::default() };
    let (l, _) = bce(&[0.5], &[1], None, w10);
    assert!((l - 10.0 * std::f64::consts::LN_2).abs() < 1e-10);

    let (l, _) = bce(&[1.0, 0.0, 1.0], &[1, 0, 1], None, LossConfig::default());
    assert!(l <= -(1.0f64 - 1e-7).ln() + 1e-15 && l > 0.0);

    let dc = LossConfig { use_dontcare: true, ..Default::default() };
    let (l, gr) = bce(&[0.9, 0.8], &[0, 1], Some(&[1, 0]), dc);
    assert!((l + 0.8f64.ln()).abs() < 1e-10);
    assert_eq!(gr[0], 0.0);
}

#[test]
fn root_weight_scales_symmetric_gradient_exactly() {
    let cfg = LossConfig { root_weight: 10.0, ..Default::default() };
    let p = 0.25;
    let (_, gr) = bce(&[p, 1.0 - p], &[1, 0], None, cfg);
    assert_eq!(gr[0], -10.0 * gr[1]);
}

#[test]
fn backward_accumulates_on_leaves() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 1], vec![0.3]));
    let y = g.sigmoid(x);
    let l = g.weighted_masked_bce(y, &[1], None, &LossConfig::default()).unwrap();
    g.backward(l).unwrap();
    let once = g.grad(x).unwrap()[0];
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap()[0], 2.0 * once);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(filled(&[1, 2, 2, 2], 0.0));
    let y = g.sigmoid(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(filled(&[1, 3, 3, 3], 1.0));
    let w = g.param(filled(&[1, 1, 3, 3, 3], 0.01));
    let b = g.param(filled(&[1], 0.0));
    let y = g.conv3d_valid(x, w, b).unwrap();
    let p = g.sigmoid(y);
    let l = g.weighted_masked_bce(p, &[1], None, &LossConfig::default()).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none());
    assert!(g.grad(w).is_some() && g.grad(b).is_some());
}
