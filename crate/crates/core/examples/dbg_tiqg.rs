use lane3d_core::autodiff::Tensor;
use lane3d_core::backbone::{Encoder, EncoderConfig, FeatureMap};
use lane3d_core::gradcheck::*;
use lane3d_core::nn::*;
use lane3d_core::tiqg::*;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tiqg = Tiqg::new(
        &TiqgConfig {
            feature_channels: 4, instances: 2, points: 3, dim: 8, heads: 2,
            ffn_dim: 12, fuse_hidden: 16, crop: CropConfig::default_future(), use_temporal: true,
        },
        &mut rng,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let enc = Encoder::new(&EncoderConfig { in_channels: 3, channels: vec![4], strides: vec![2] }, &mut rng);
    let img = Array3::from_shape_fn((3, 8, 12), |_| rng.gen_range(0.0..1.0));
    let f_t0 = ArrayD::from_shape_fn(IxDyn(&[4, 4, 6]), |_| rng.gen_range(-1.0..1.0));

    // 1) just frame_queries on constant features
    let entries = check_module(&tiqg.named_params(), 1e-4, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 2 };
        tiqg.frame_queries(&f_t, QueryTag::Current, tape).values.pow_scalar(2.0).sum_all()
    });
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0f64, f64::max);
    println!("frame_queries worst rel err: {worst:.3e}");

    // 2) encoder + frame_queries on the real image
    let mut params = tiqg.named_params();
    params.extend(enc.named_params().into_iter().map(|(n, p)| (format!("enc.{n}"), p)));
    let entries = check_module(&params, 1e-4, |tape| {
        let f = enc.forward(&Tensor::constant(img.clone().into_dyn()), tape);
        tiqg.frame_queries(&f, QueryTag::Current, tape).values.pow_scalar(2.0).sum_all()
    });
    for e in entries.iter().filter(|e| !e.pass) { println!("enc+frame FAIL {}: {:.3e}", e.name, e.max_rel_err); }
    println!("enc+frame done");

    // 3) future branch only
    let rig = lane3d_core::geometry::CameraRig {
        intrinsics: lane3d_core::geometry::Intrinsics::new(10.0, 10.0, 5.5, 3.5, 12, 8),
        cam_to_ego: lane3d_core::sim::cam_to_ego(1.5),
        ego_to_world: lane3d_core::geometry::Pose::identity(),
    };
    let entries = check_module(&params, 1e-4, |tape| {
        let (q, _) = tiqg.future_queries(&img, &rig, &enc, tape).unwrap();
        q.values.pow_scalar(2.0).sum_all()
    });
    for e in entries.iter().filter(|e| !e.pass) { println!("future FAIL {}: {:.3e}", e.name, e.max_rel_err); }
    println!("future done");

    let f_p0 = ArrayD::from_shape_fn(IxDyn(&[4, 4, 6]), |_| {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        r.gen_range(-1.0..1.0)
    });
    // 4) two frame_queries sharing the instance embed
    let entries = check_module(&tiqg.named_params(), 1e-4, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 2 };
        let f_p = FeatureMap { values: Tensor::constant(f_p0.clone()), stride: 2 };
        let a = tiqg.frame_queries(&f_t, QueryTag::Current, tape).values.pow_scalar(2.0).sum_all();
        let b = tiqg.frame_queries(&f_p, QueryTag::Past, tape).values.pow_scalar(2.0).sum_all();
        a.add(&b)
    });
    for e in entries.iter().filter(|e| !e.pass) { println!("shared FAIL {}: {:.3e}", e.name, e.max_rel_err); }
    println!("shared done");

    // 5) cross attention of two query sets
    let entries = check_module(&tiqg.named_params(), 1e-4, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 2 };
        let f_p = FeatureMap { values: Tensor::constant(f_p0.clone()), stride: 2 };
        let qt = tiqg.frame_queries(&f_t, QueryTag::Current, tape);
        let qp = tiqg.frame_queries(&f_p, QueryTag::Past, tape);
        tiqg.cross.forward(&qp.tokens(), &qt.tokens(), tape).pow_scalar(2.0).sum_all()
    });
    for e in entries.iter().filter(|e| !e.pass) { println!("ca FAIL {}: {:.3e}", e.name, e.max_rel_err); }
    println!("ca done");

    // 6) full forward
    let entries = check_module(&params, 1e-4, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 2 };
        let f_p = FeatureMap { values: Tensor::constant(f_p0.clone()), stride: 2 };
        tiqg.forward(&f_t, &f_p, &img, &rig, &enc, tape).unwrap().values.pow_scalar(2.0).sum_all()
    });
    for e in entries.iter().filter(|e| !e.pass) { println!("full FAIL {}: {:.3e}", e.name, e.max_rel_err); }
    println!("full done");
}
