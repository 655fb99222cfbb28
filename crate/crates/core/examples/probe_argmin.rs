use lane3d_core::geometry::*;
use lane3d_core::sim::*;

fn inverse_depth_bins(d_min: f64, d_max: f64, n: usize) -> Vec<f64> {
    // strictly increasing depths, uniform in 1/d
    (0..n)
        .map(|i| {
            let inv = 1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * (n - 1 - i) as f64 / (n - 1) as f64;
            1.0 / inv
        })
        .collect()
}

fn main() {
    let cfg = SimConfig::stereo_oracle();
    let bins = inverse_depth_bins(3.0, 80.0, 8);
    println!("bins: {:?}", bins.iter().map(|b| (b * 10.0).round() / 10.0).collect::<Vec<_>>());
    let mut total_ok = 0usize;
    let mut total_n = 0usize;
    let lo: u64 = std::env::var("LO").map(|v| v.parse().unwrap()).unwrap_or(0);
    for seed in lo..lo+20 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let target = render_frame(&scene, 2).unwrap();
        let source = render_frame(&scene, 1).unwrap();
        let k = target.rig.intrinsics;
        let t_rel = relative_pose(&source.rig, &target.rig); // src -> dst
        let src = source.image_chw();
        let timg = target.image_chw();
        let (h, w) = target.seg.dim();
        let c = 3usize;
        // cost per bin
        let mut costs = vec![ndarray::Array2::<f64>::from_elem((h, w), f64::INFINITY); bins.len()];
        let mut valid = vec![ndarray::Array2::<bool>::from_elem((h, w), false); bins.len()];
        for (bi, &depth) in bins.iter().enumerate() {
            let grid = warp_grid(&k, &k, &t_rel, depth, (h, w)).unwrap();
            let (warped, mask) = warp_image(&src.view(), &grid);
            for v in 0..h {
                for u in 0..w {
                    if mask[[v, u]] {
                        let mut acc = 0.0;
                        let which: usize = std::env::var("CH").map(|v| v.parse().unwrap()).unwrap_or(99);
                        for ci in 0..c {
                            if which < 3 && ci != which { continue; }
                            acc += (warped[[ci, v, u]] - timg[[ci, v, u]]).abs();
                        }
                        costs[bi][[v, u]] = acc / c as f64;
                        valid[bi][[v, u]] = true;
                    }
                }
            }
        }
        let mut ok = 0usize;
        let mut n = 0usize;
        for v in 0..h {
            for u in 0..w {
                let d = target.depth[[v, u]] as f64;
                if target.seg[[v, u]] == 0 || d <= 0.0 {
                    continue;
                }
                // GT bin: nearest in inverse depth
                let gt_bin = bins
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        ((1.0 / *a - 1.0 / d).abs()).partial_cmp(&(1.0 / *b - 1.0 / d).abs()).unwrap()
                    })
                    .unwrap()
                    .0;
                if !valid[gt_bin][[v, u]] {
                    continue;
                }
                let arg = (0..bins.len())
                    .filter(|bi| valid[*bi][[v, u]])
                    .min_by(|a, b| costs[*a][[v, u]].partial_cmp(&costs[*b][[v, u]]).unwrap())
                    .unwrap();
                n += 1;
                if arg == gt_bin {
                    ok += 1;
                } else if seed < 0 {
                    let inv = 1.0 / d;
                    let lo = 1.0 / bins[gt_bin.min(arg).max(0)];
                    println!("  miss: d {d:.1} (inv {inv:.4}) gt_bin {gt_bin} ({:.1}) arg {arg} ({:.1}) cost_gt {:.4} cost_arg {:.4} _lo {lo:.2}",
                        bins[gt_bin], bins[arg], costs[gt_bin][[v,u]], costs[arg][[v,u]]);
                }
            }
        }
        total_ok += ok;
        total_n += n;
        if (ok as f64) < 0.9 * n as f64 {
            println!("seed {seed}: {ok}/{n} = {:.3}", ok as f64 / n as f64);
        }
    }
    println!("TOTAL {total_ok}/{total_n} = {:.4}", total_ok as f64 / total_n as f64);
}
