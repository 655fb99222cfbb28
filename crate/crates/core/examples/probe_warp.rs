use lane3d_core::sim::*;

fn main() {
    let cfg = SimConfig::photometric_oracle();
    let mut worst = (0.0f64, 0u64);
    let mut sum = 0.0;
    for seed in 0..60u64 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let target = render_frame(&scene, 2).unwrap();
        let source = render_frame(&scene, 1).unwrap();
        let (warped, warp_mask) = photometric_warp(&target, &source);
        let mut mask = warp_mask.clone();
        for ((v, u), m) in mask.indexed_iter_mut() {
            *m = *m && target.seg[[v, u]] > 0;
        }
        let n = mask.iter().filter(|m| **m).count();
        let mae = masked_mae(&warped, &target.image_chw(), &mask);
        sum += mae;
        if mae > worst.0 { worst = (mae, seed); }
        if mae > 0.015 { println!("seed {seed:2}: mae {mae:.4} (n={n})"); }
    }
    println!("mean {:.4}  worst {:.4} @ seed {}", sum / 60.0, worst.0, worst.1);
}
