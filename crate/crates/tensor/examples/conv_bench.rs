use std::time::Instant;

use modseg_tensor::ops::{conv3d, Conv3dOpts};
use modseg_tensor::{Tensor, Var};
use rand::SeedableRng;

fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    for &(cin, cout, n) in &[(24usize, 8usize, 32usize), (8, 8, 32), (96, 32, 8), (1, 4, 32)] {
        let x = Var::leaf(Tensor::<f32>::randn(&[2, cin, n, n, n], 1.0, &mut rng));
        let w = Var::leaf(Tensor::<f32>::randn(&[cout, cin, 3, 3, 3], 0.1, &mut rng));
        let t = Instant::now();
        let y = conv3d(&x, &w, None, Conv3dOpts::same(3)).unwrap();
        let fwd = t.elapsed();
        let t = Instant::now();
        let _g = y.sum_all().backward().unwrap();
        let macs = 2.0 * (n * n * n * cin * cout * 27) as f64;
        println!(
            "cin={cin} cout={cout} n={n}: fwd {:?} ({:.1} GMAC/s) bwd {:?}",
            fwd,
            macs / fwd.as_secs_f64() / 1e9,
            t.elapsed()
        );
    }
}
