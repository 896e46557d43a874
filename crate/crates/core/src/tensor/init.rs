use rand::Rng;

use crate::tensor::Tensor;

/// Fan-in and fan-out with the usual convention: dimension 1 times the
/// receptive field, and dimension 0 times the receptive field.
pub(crate) fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [d0, d1, rest @ ..] => {
            let rf: usize = rest.iter().product();
            (d1 * rf, d0 * rf)
        }
    }
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
