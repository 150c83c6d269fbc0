use crate::encoder::config::MaskMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `l×l` allow pattern: entry `(i, j)` says whether position `i`
/// may attend to position `j`. Positions at or beyond `valid_len` are PAD
/// and are never attended to.
pub fn attention_allow(l: usize, valid_len: usize, mode: MaskMode) -> Vec<bool> {
    let mut allow = vec![false; l * l];
    for i in 0..l {
        for j in 0..l.min(valid_len) {
            allow[i * l + j] = match mode {
                MaskMode::Causal => j <= i,
                MaskMode::Bidirectional => true,
            };
        }
    }
    // A PAD query row under the causal mask can still see every real token.
    if mode == MaskMode::Causal {
        for i in valid_len..l {
            for j in 0..valid_len {
                allow[i * l + j] = true;
            }
        }
    }
    allow
}

/// The allow pattern as a 0/1 matrix.
pub fn build_attention_mask<T: Scalar>(l: usize, valid_len: usize, mode: MaskMode) -> Tensor<T> {
    let data = attention_allow(l, valid_len, mode)
        .into_iter()
        .map(|a| if a { T::one() } else { T::zero() })
        .collect();
    Tensor::new([l, l], data).expect("square mask")
}
