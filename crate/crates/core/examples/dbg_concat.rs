use lane3d_core::autodiff::Tensor;
use lane3d_core::gradcheck::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a0 = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0)));
    let c = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0)));

    // concat axis 2 + reshape
    let err = check_scalar_fn(&a0, |a| {
        Tensor::concat(&[a.clone(), b.clone(), c.clone()], 2)
            .reshape(&[6, 12])
            .pow_scalar(2.0)
            .sum_all()
    });
    println!("concat2+reshape: {err:.3e}");

    // same input used in TWO concat slots
    let err = check_scalar_fn(&a0, |a| {
        Tensor::concat(&[a.clone(), a.mul_scalar(2.0), c.clone()], 2)
            .reshape(&[6, 12])
            .pow_scalar(2.0)
            .sum_all()
    });
    println!("concat2 shared: {err:.3e}");

    // the SAME tensor object twice (aliasing!)
    let err = check_scalar_fn(&a0, |a| {
        Tensor::concat(&[a.clone(), a.clone(), a.clone()], 2)
            .reshape(&[6, 12])
            .pow_scalar(2.0)
            .sum_all()
    });
    println!("concat2 aliased: {err:.3e}");
}
