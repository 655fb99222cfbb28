use lane3d_core::sim::*;

fn main() {
    let cfg = SimConfig::photometric_oracle();
    let scene = generate_scene(11, &cfg).unwrap();
    let target = render_frame(&scene, 2).unwrap();
    let source = render_frame(&scene, 1).unwrap();
    let (warped, warp_mask) = photometric_warp(&target, &source);
    let timg = target.image_chw();
    let (h, w) = target.seg.dim();
    let mut worst: Vec<(f64, usize, usize, usize)> = vec![];
    for v in 0..h { for u in 0..w {
        if warp_mask[[v,u]] && target.seg[[v,u]]>0 {
            for ch in 0..3 {
                let e = (warped[[ch,v,u]]-timg[[ch,v,u]]).abs();
                worst.push((e, ch, v, u));
            }
        }
    }}
    worst.sort_by(|a,b| b.0.partial_cmp(&a.0).unwrap());
    for (e, ch, v, u) in worst.iter().take(12) {
        let d = target.depth[[*v,*u]];
        // world point
        let pc = lane3d_core::geometry::unproject(&target.rig.intrinsics, *u as f64, *v as f64, d as f64).unwrap();
        let pw = target.rig.cam_to_world().apply(pc);
        println!("err {e:.3} ch{ch} px({v},{u}) depth {d:.1} world y {:.1} tgt {:.3} warped {:.3}", pw[1], timg[[*ch,*v,*u]], warped[[*ch,*v,*u]]);
    }
    for lane in &scene.lanes { println!("lane range {:?} curve0 {:.2}", lane.y_range, lane.ground_curve[0]); }
}
