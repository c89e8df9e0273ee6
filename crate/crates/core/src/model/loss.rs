use crate::error::{Error, Result};
use crate::model::ScoreMap;
use crate::scalar::Scalar;
use crate::tensor::Mask;

/// Binary cross-entropy over a two-way softmax of the temperature-scaled
/// score channels. Returns the mean pixel loss and its analytic gradient
/// with respect to each score entry.
pub fn bce_loss<T: Scalar>(score: &ScoreMap<T>, gt: &Mask, temperature: f64) -> Result<(T, ScoreMap<T>)> {
    if (gt.h(), gt.w()) != (score.h(), score.w()) {
        return Err(Error::Shape(format!(
            "bce_loss: score {}x{} vs mask {}x{}",
            score.h(),
            score.w(),
            gt.h(),
            gt.w()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Shape(format!("bce_loss: temperature {temperature} must be positive")));
    }
    let n = (score.h() * score.w()) as f64;
    let mut loss = 0.0f64;
    let mut grad_fg = Vec::with_capacity(score.fg().len());
    let mut grad_bg = Vec::with_capacity(score.fg().len());
    for ((&sf, &sb), &y) in score.fg().iter().zip(score.bg()).zip(gt.data()) {
        let d = temperature * (sf.to64() - sb.to64());
        // log(1 + e^{-|d|}) is stable for either sign of d.
        let softplus = (-d.abs()).exp().ln_1p();
        let log_p_fg = if d >= 0.0 { -softplus } else { d - softplus };
        let log_p_bg = if d >= 0.0 { -d - softplus } else { -softplus };
        loss -= if y { log_p_fg } else { log_p_bg };
        let p_fg = if d >= 0.0 { 1.0 / (1.0 + (-d).exp()) } else { d.exp() / (1.0 + d.exp()) };
        let g = temperature * (p_fg - if y { 1.0 } else { 0.0 }) / n;
        grad_fg.push(T::of(g));
        grad_bg.push(T::of(-g));
    }
    Ok((T::of(loss / n), ScoreMap::new(score.h(), score.w(), grad_bg, grad_fg)?))
}
