use crate::error::{Error, Result};
use crate::model::{EncoderState, ScoreMap};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, conv2d, cosine, FeatureMap, Mask};

pub(crate) fn stage_apply<T: Scalar>(
    stage: &crate::model::Stage<T>,
    input: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let mut pre = conv2d(input, &stage.kernel)?;
    let (_, c, h, w) = pre.shape();
    {
        let data = pre.data_mut();
        for ch in 0..c {
            let b = stage.bias[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v = *v + b;
            }
        }
    }
    let post = if stage.relu { pre.map(|v| if v > T::zero() { v } else { T::zero() }) } else { pre.clone() };
    Ok((pre, post))
}

/// Full forward trace: post-activation at every boundary (`acts[0]` is the
/// input, `acts[i]` the output of stage i) plus pre-activations for backward.
/// If a hook is supplied, it replaces the activation at its boundary before
/// subsequent stages run; `acts` records the replaced value.
pub(crate) struct ForwardTrace<T> {
    pub acts: Vec<FeatureMap<T>>,
    pub pres: Vec<FeatureMap<T>>,
    pub hook_boundary: Option<usize>,
}

pub(crate) fn forward_trace<T: Scalar>(
    enc: &EncoderState<T>,
    image: &FeatureMap<T>,
    hook: Option<(usize, &dyn Fn(&FeatureMap<T>) -> Result<FeatureMap<T>>)>,
) -> Result<ForwardTrace<T>> {
    if let Some((b, _)) = hook {
        if b > enc.num_stages() {
            return Err(Error::Shape(format!("hook boundary {b} beyond {} stages", enc.num_stages())));
        }
    }
    let mut acts: Vec<FeatureMap<T>> = Vec::with_capacity(enc.num_stages() + 1);
    let mut pres: Vec<FeatureMap<T>> = Vec::with_capacity(enc.num_stages());
    let mut cur = image.clone();
    if let Some((0, f)) = hook {
        cur = f(&cur)?;
    }
    acts.push(cur.clone());
    for (i, stage) in enc.stages().iter().enumerate() {
        let (pre, mut post) = stage_apply(stage, &cur)?;
        if let Some((b, f)) = hook {
            if b == i + 1 {
                post = f(&post)?;
            }
        }
        pres.push(pre);
        acts.push(post.clone());
        cur = post;
    }
    Ok(ForwardTrace { acts, pres, hook_boundary: hook.map(|(b, _)| b) })
}

/// Runs the encoder and returns `(low_level, deep)`: the activation exposed
/// at the tap boundary (after the hook, when one is installed there) and the
/// final-stage activation.
pub fn forward<T: Scalar>(
    enc: &EncoderState<T>,
    image: &FeatureMap<T>,
    hook: Option<&dyn Fn(&FeatureMap<T>) -> Result<FeatureMap<T>>>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let trace = forward_trace(enc, image, hook.map(|f| (enc.tap_index(), f)))?;
    let low = trace.acts[enc.tap_index()].clone();
    let deep = trace.acts.last().unwrap().clone();
    Ok((low, deep))
}

/// Post-activation maps at every stage boundary, input included.
pub fn forward_activations<T: Scalar>(enc: &EncoderState<T>, image: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
    Ok(forward_trace(enc, image, None)?.acts)
}

/// Masked average pooling of one support shot's deep feature. The image-
/// resolution mask is nearest-downsampled to the feature grid first.
pub fn prototypes<T: Scalar>(deep: &FeatureMap<T>, mask: &Mask) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = deep.shape();
    if n != 1 {
        return Err(Error::Shape(format!("prototypes: expected batch 1, got {n}")));
    }
    let small = mask.downsample_nearest(h, w)?;
    let n_fg = small.fg_count();
    if n_fg == 0 {
        return Err(Error::EmptyFg("mask lost all foreground at feature resolution".into()));
    }
    if n_fg == h * w {
        return Err(Error::EmptyBg("mask lost all background at feature resolution".into()));
    }
    let mut fg = vec![0.0f64; c];
    let mut bg = vec![0.0f64; c];
    for ch in 0..c {
        let plane = deep.plane(0, ch);
        let (mut afg, mut abg) = (0.0f64, 0.0f64);
        for (i, &v) in plane.iter().enumerate() {
            if small.data()[i] {
                afg += v.to64();
            } else {
                abg += v.to64();
            }
        }
        fg[ch] = afg / n_fg as f64;
        bg[ch] = abg / (h * w - n_fg) as f64;
    }
    Ok((fg.into_iter().map(T::of).collect(), bg.into_iter().map(T::of).collect()))
}

/// K-shot prototypes: the arithmetic mean of per-shot prototypes.
pub fn prototypes_multi<T: Scalar>(deeps: &[FeatureMap<T>], masks: &[Mask]) -> Result<(Vec<T>, Vec<T>)> {
    if deeps.is_empty() || deeps.len() != masks.len() {
        return Err(Error::Shape(format!("prototypes_multi: {} features vs {} masks", deeps.len(), masks.len())));
    }
    let c = deeps[0].c();
    let mut fg = vec![0.0f64; c];
    let mut bg = vec![0.0f64; c];
    for (deep, mask) in deeps.iter().zip(masks) {
        let (f, b) = prototypes(deep, mask)?;
        for ch in 0..c {
            fg[ch] += f[ch].to64();
            bg[ch] += b[ch].to64();
        }
    }
    let k = deeps.len() as f64;
    Ok((fg.into_iter().map(|v| T::of(v / k)).collect(), bg.into_iter().map(|v| T::of(v / k)).collect()))
}

/// Per-position cosine similarity of the query's deep feature to each
/// prototype, bilinearly upsampled to the query image resolution.
pub fn score_map<T: Scalar>(
    query_deep: &FeatureMap<T>,
    fg_proto: &[T],
    bg_proto: &[T],
    out_h: usize,
    out_w: usize,
) -> Result<ScoreMap<T>> {
    let (n, c, h, w) = query_deep.shape();
    if n != 1 {
        return Err(Error::Shape(format!("score_map: expected batch 1, got {n}")));
    }
    if fg_proto.len() != c || bg_proto.len() != c {
        return Err(Error::Shape(format!(
            "score_map: prototype lengths {}/{} vs {c} channels",
            fg_proto.len(),
            bg_proto.len()
        )));
    }
    let mut vec_buf = vec![T::zero(); c];
    let mut planes = FeatureMap::<T>::zeros(1, 2, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                vec_buf[ch] = query_deep.at(0, ch, y, x);
            }
            planes.set(0, 0, y, x, cosine(&vec_buf, bg_proto)?);
            planes.set(0, 1, y, x, cosine(&vec_buf, fg_proto)?);
        }
    }
    let up = bilinear_resize(&planes, out_h, out_w)?;
    ScoreMap::new(out_h, out_w, up.plane(0, 0).to_vec(), up.plane(0, 1).to_vec())
}

/// Per-pixel argmax over the two channels; exact ties go to background.
pub fn predict<T: Scalar>(score: &ScoreMap<T>) -> Mask {
    let data = score.fg().iter().zip(score.bg()).map(|(f, b)| f > b).collect();
    Mask::new(score.h(), score.w(), data).expect("score map dims are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_encoder(seed: u64) -> EncoderState<f64> {
        EncoderState::default_init(seed, 1).unwrap()
    }

    #[test]
    fn hook_identity_matches_no_hook() {
        let enc = tiny_encoder(5);
        let img = FeatureMap::from_fn(1, 3, 16, 16, |_, c, y, x| ((c + y + x) % 7) as f64 / 7.0);
        let ident = |m: &FeatureMap<f64>| Ok(m.clone());
        let (low_a, deep_a) = forward(&enc, &img, None).unwrap();
        let (low_b, deep_b) = forward(&enc, &img, Some(&ident)).unwrap();
        assert_eq!(low_a, low_b);
        assert_eq!(deep_a, deep_b);
    }

    #[test]
    fn zero_weights_give_zero_deep_feature() {
        let mut enc = tiny_encoder(5);
        for st in enc.stages_mut() {
            st.kernel.weights_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = FeatureMap::constant(1, 3, 16, 16, 0.3f64);
        let (_, deep) = forward(&enc, &img, None).unwrap();
        assert!(deep.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_feature_prototypes_are_constant() {
        let deep = FeatureMap::constant(1, 4, 8, 8, 0.7f64);
        let mut mask = Mask::filled(32, 32, false);
        for y in 8..20 {
            for x in 8..20 {
                mask.set(y, x, true);
            }
        }
        let (fg, bg) = prototypes(&deep, &mask).unwrap();
        assert!(fg.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(bg.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_bg_pixel_prototype_is_that_pixel() {
        // Mask all-fg except one bg pixel, at feature resolution 1:1.
        let deep = FeatureMap::from_fn(1, 3, 4, 4, |_, c, y, x| (c * 16 + y * 4 + x) as f64);
        let mut mask = Mask::filled(4, 4, true);
        mask.set(2, 1, false);
        let (_, bg) = prototypes(&deep, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(bg[c], (c * 16 + 2 * 4 + 1) as f64);
        }
    }

    #[test]
    fn empty_downsampled_fg_is_designated_error() {
        let deep = FeatureMap::constant(1, 2, 4, 4, 1.0f64);
        // One fg pixel positioned off the nearest-neighbor sample grid.
        let mut mask = Mask::filled(32, 32, false);
        mask.set(0, 0, true);
        assert!(matches!(prototypes(&deep, &mask), Err(Error::EmptyFg(_))));
        let full = Mask::filled(32, 32, true);
        assert!(matches!(prototypes(&deep, &full), Err(Error::EmptyBg(_))));
    }

    #[test]
    fn score_map_saturates_for_matching_prototype() {
        let c = 4;
        let mut fg_proto = vec![0.0f64; c];
        fg_proto[0] = 1.0;
        let mut bg_proto = vec![0.0f64; c];
        bg_proto[1] = 1.0; // orthogonal to both fg proto and feature
        let deep = FeatureMap::from_fn(1, c, 4, 4, |_, ch, _, _| if ch == 0 { 2.0 } else { 0.0 });
        let s = score_map(&deep, &fg_proto, &bg_proto, 8, 8).unwrap();
        assert!(s.fg().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(s.bg().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn equal_prototypes_give_zero_confidence() {
        let proto = vec![0.3f64, -0.2, 0.9];
        let deep = FeatureMap::from_fn(1, 3, 4, 4, |_, c, y, x| (c + y + x) as f64 * 0.21 - 0.4);
        let s = score_map(&deep, &proto, &proto, 4, 4).unwrap();
        for (f, b) in s.fg().iter().zip(s.bg()) {
            assert!((f - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_tie_goes_to_background() {
        let s = ScoreMap::new(2, 2, vec![0.5f64; 4], vec![0.5f64; 4]).unwrap();
        let m = predict(&s);
        assert_eq!(m.fg_count(), 0);
        let s2 = ScoreMap::new(2, 2, vec![0.1f64; 4], vec![0.2f64; 4]).unwrap();
        assert_eq!(predict(&s2).fg_count(), 4);
    }
}
