//! Deterministic inputs shared by the benchmarks under `benches/`.

use lkareid::Tensor;

/// A fixed pseudo-random tensor with entries in `[-1, 1]`.
pub fn input(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| (((i + 1) * 2_654_435_761 + salt * 97) % 10_007) as f64 / 5003.5 - 1.0)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}
