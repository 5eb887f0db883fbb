// Scratch: where does iteration time go?
use gazeswap::faces::FaceImage;
use gazeswap::losses::*;
use gazeswap::model::*;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut px = Array3::zeros((64, 64, 3));
    for v in px.iter_mut() {
        *v = rng.gen_range(0.1..=0.9);
    }
    let img = FaceImage::new(px).unwrap();
    let model = LiaeModel::new(ModelConfig::default(), 1).unwrap();

    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model.forward_cached(&img, PathwayMode::Original).unwrap();
    }
    println!("forward: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1000.0);

    let (_, _, _, cache) = model.forward_cached(&img, PathwayMode::Original).unwrap();
    let gi = Array3::from_elem((64, 64, 3), 0.1);
    let gm = Array2::from_elem((64, 64), 0.1);
    let t0 = Instant::now();
    for _ in 0..n {
        let mut grads = ModelGrads::zeros_like(&model);
        model.backward(&cache, &gi, &gm, &mut grads);
    }
    println!("backward+alloc: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1000.0);

    let mut px2 = Array3::zeros((64, 64, 3));
    for v in px2.iter_mut() {
        *v = rng.gen_range(0.1..=0.9);
    }
    let img2 = FaceImage::new(px2).unwrap();
    let cfg = SsimConfig::default();
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = dssim_with_grad(&img, &img2, &cfg).unwrap();
    }
    println!("dssim_with_grad 64x64: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1000.0);

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = ModelGrads::zeros_like(&model);
    }
    println!("grads alloc: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1000.0);
}
