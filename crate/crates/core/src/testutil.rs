use cat_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
