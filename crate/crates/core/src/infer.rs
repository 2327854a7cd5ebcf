//! Single- and multi-scale inference, and evaluation over a dataset.

use dca_tensor::kernels::resize_bilinear;
use dca_tensor::Tensor;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_labels, Model, IGNORE_INDEX};
use crate::train::normalize;

pub const DEFAULT_SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// Averages class probabilities over rescaled copies of `images`
/// (`[n, 3, H, W]`, normalized). Each scale's probabilities are resized to
/// `out_size` before averaging.
pub fn multi_scale_infer(model: &Model, images: &Tensor<f32>, scales: &[f64], out_size: (usize, usize)) -> Result<Tensor<f32>> {
    if scales.is_empty() {
        return Err(invalid("scale list is empty"));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid(format!("scale {s} is not positive")));
    }
    let (_, _, h, w) = images.dims4()?;
    let mut sum: Option<Tensor<f32>> = None;
    for &s in scales {
        let (sh, sw) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));
        let scaled = resize_bilinear(images, sh, sw)?;
        let probs = model.probabilities(&scaled)?;
        let probs = resize_bilinear(&probs, out_size.0, out_size.1)?;
        match sum.as_mut() {
            Some(acc) => acc.add_assign(&probs)?,
            None => sum = Some(probs),
        }
    }
    let acc = sum.expect("at least one scale");
    Ok(acc.scale(1.0 / scales.len() as f32))
}

/// Predicted label maps for each sample, at the sample's own resolution.
pub fn predict(model: &Model, data: &Dataset, scales: &[f64], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        if chunk.iter().any(|s| (s.height(), s.width()) != (h, w)) {
            return Err(invalid("evaluation batches need equally sized images"));
        }
        let imgs: Vec<Tensor<f32>> = chunk.iter().map(|s| normalize(&s.image)).collect();
        let probs = multi_scale_infer(model, &Tensor::stack(&imgs)?, scales, (h, w))?;
        let labels = argmax_labels(&probs)?;
        out.extend(labels.chunks(h * w).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &Dataset, scales: &[f64], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for (pred, s) in predict(model, data, scales, batch_size)?.iter().zip(&data.samples) {
        cm.accumulate(pred, &s.labels, IGNORE_INDEX)?;
    }
    Ok(cm)
}
