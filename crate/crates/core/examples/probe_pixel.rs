use lane3d_core::geometry::*;
use lane3d_core::sim::*;

fn main() {
    let cfg = SimConfig::photometric_oracle();
    let scene = generate_scene(11, &cfg).unwrap();
    let target = render_frame(&scene, 2).unwrap();
    let source = render_frame(&scene, 1).unwrap();
    let t_rel = relative_pose(&target.rig, &source.rig);
    let src = source.image_chw();
    for (v, u) in [(44usize, 75usize), (43, 71), (44, 22)] {
        let d = target.depth[[v, u]] as f64;
        let xc = unproject(&target.rig.intrinsics, u as f64, v as f64, d).unwrap();
        let xs = t_rel.apply(xc);
        let (us, vs, zs) = project(&source.rig.intrinsics, xs).unwrap();
        let mut buf = [0.0f64; 3];
        bilinear_at(&src.view(), us, vs, &mut buf);
        println!("tgt px({v},{u}) ch0={:.3}  -> src ({us:.2},{vs:.2}) z {zs:.1} bilinear {:.3}", target.image[[v,u,0]], buf[0]);
        // neighborhood of source image around (us, vs)
        let ui = us.floor() as usize; let vi = vs.floor() as usize;
        for dv in 0..2 { for du in 0..3 {
            let uu = ui + du; let vv = vi + dv;
            if uu < src.dim().2 && vv < src.dim().1 {
                print!("   src[{vv},{uu}] = {:.3} (depth {:.1})", src[[0, vv, uu]], source.depth[[vv,uu]]);
            }
        } println!(); }
    }
}
