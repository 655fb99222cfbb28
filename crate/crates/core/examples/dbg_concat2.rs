use lane3d_core::autodiff::Tensor;
use ndarray::{ArrayD, IxDyn};

fn main() {
    let a0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |ix| (ix[1] * 2 + ix[2]) as f64);
    let b0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |ix| 10.0 + (ix[1] * 2 + ix[2]) as f64);
    let a = Tensor::leaf(a0.clone());
    let b = Tensor::constant(b0.clone());
    let cat = Tensor::concat(&[a.clone(), b.clone()], 2);
    println!("cat shape {:?}", cat.shape());
    println!("cat values {:?}", cat.values());
    let loss = cat.pow_scalar(2.0).sum_all();
    let g = loss.backward();
    println!("da {:?}", g.wrt(&a).unwrap());
    println!("expected 2*a {:?}", a0.mapv(|v| 2.0 * v));
}
