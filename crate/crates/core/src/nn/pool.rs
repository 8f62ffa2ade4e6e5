use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Output of [`maxpool2x2`]: pooled values and, for every pooled cell, the
/// flat input index that won the window.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<u32>,
    input_shape: Shape,
}

/// 2x2 max pooling with stride 2 over an NCHW tensor.
///
/// Ties go to the first maximal element in row-major window order
/// (top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2x2(x: &Tensor) -> Result<Pooled> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2x2 expects NCHW input, got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2x2 needs even spatial size, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0f32; b * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out[o] = data[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_parts(Shape::nchw(b, c, ho, wo)?, out),
        argmax,
        input_shape: x.shape_obj().clone(),
    })
}

/// Routes each pooled gradient to the input element recorded in `argmax`.
pub fn maxpool2x2_backward(grad: &Tensor, pooled: &Pooled) -> Result<Tensor> {
    if grad.shape() != pooled.output.shape() {
        return Err(Error::mismatch(
            "maxpool2x2_backward",
            pooled.output.shape(),
            grad.shape(),
        ));
    }
    let mut gin = vec![0f32; pooled.input_shape.numel()];
    for (&g, &i) in grad.data().iter().zip(&pooled.argmax) {
        gin[i as usize] += g;
    }
    Ok(Tensor::from_parts(pooled.input_shape.clone(), gin))
}
