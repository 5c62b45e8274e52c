//! Times training steps of a four-block subnet on a 16-sample batch.
//!
//! Usage: `cargo run --release -p octangle-nn --example subnet_throughput [SIZE]`

use std::time::Instant;

use octangle_nn::{ConvBlock, GlobalAvgPool, Layer, Mode, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(112);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Sequential::new();
    let mut cin = 1;
    for c in [8, 16, 32, 32] {
        net.push(ConvBlock::new(cin, c, 3, true, &mut rng).unwrap());
        cin = c;
    }
    net.push(GlobalAvgPool::new());
    let n = 16;
    let x = Tensor::new(&[n, 1, size, size], (0..n * size * size).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    for _ in 0..3 {
        let t = Instant::now();
        let y = net.forward(&x, Mode::Train).unwrap();
        let tf = t.elapsed();
        net.backward(&Tensor::new(y.shape(), vec![1.0; y.len()]).unwrap()).unwrap();
        println!("forward {:?}  step {:?}", tf, t.elapsed());
    }
}
