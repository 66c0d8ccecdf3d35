//! Compares reverse-mode gradients of a small conv/pool/upsample graph with
//! central finite differences in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rootseg::autodiff::{Graph, LossConfig, Tensor};

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

/// Loss of conv -> relu -> maxpool -> transposed conv -> crop-concat with the input -> sigmoid -> BCE.
fn loss(params: &[Tensor<f64>], target: &[u8], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let v: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let h = g.conv3d_valid(v[0], v[1], v[2]).unwrap();
    let h = g.relu(h);
    let h = g.maxpool3d(h).unwrap();
    let h = g.conv_transpose3d_x2(h, v[3], v[4]).unwrap();
    let h = g.concat_center_crop(h, v[0]).unwrap();
    let h = g.conv3d_valid(h, v[5], v[6]).unwrap();
    let p = g.sigmoid(h);
    let l = g.weighted_masked_bce(p, target, None, &LossConfig { root_weight: 4.0, ..LossConfig::default() }).unwrap();
    let value = g.value(l).item();
    if grads {
        g.backward(l).unwrap();
    }
    (value, if grads { v.iter().map(|&x| g.grad(x).unwrap().to_vec()).collect() } else { Vec::new() })
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = vec![
        tensor(&mut rng, vec![1, 10, 10, 10], 1.0),
        tensor(&mut rng, vec![3, 1, 3, 3, 3], 0.5),
        tensor(&mut rng, vec![3], 0.1),
        tensor(&mut rng, vec![3, 2, 2, 2, 2], 0.5),
        tensor(&mut rng, vec![2], 0.1),
        tensor(&mut rng, vec![3, 3, 1, 1, 1], 0.5),
        tensor(&mut rng, vec![3], 0.1),
    ];
    let target: Vec<u8> = (0..3 * 8 * 8 * 8).map(|_| rng.random_bool(0.2) as u8).collect();
    let (value, grads) = loss(&params, &target, true);
    println!("loss {value:.6}");
    let h = 1e-6;
    let names = ["input", "conv1.w", "conv1.b", "up.w", "up.b", "head.w", "head.b"];
    for t in 0..params.len() {
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let j = rng.random_range(0..params[t].numel());
            let orig = params[t].data()[j];
            params[t].data_mut()[j] = orig + h;
            let up = loss(&params, &target, false).0;
            params[t].data_mut()[j] = orig - h;
            let down = loss(&params, &target, false).0;
            params[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((grads[t][j] - numeric).abs() / grads[t][j].abs().max(numeric.abs()).max(1e-6));
        }
        println!("{:<8} max relative error over 5 entries: {worst:.2e}", names[t]);
    }
}
