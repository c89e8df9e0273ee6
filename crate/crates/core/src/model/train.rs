//! Manual backpropagation through score map, prototypes and encoder stages,
//! plus the SGD-with-momentum update.
//!
//! Gradients are accumulated in f64 regardless of the storage scalar. When a
//! tap hook (the train-time perturbation) is installed, its output is treated
//! as a constant: no gradient flows into the hook or the support-branch
//! stages below it. Stages below the tap still train through the query
//! branch, because both branches share the encoder weights.

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::forward::{forward_trace, ForwardTrace};
use crate::model::{bce_loss, EncoderState, ScoreMap, TEMPERATURE};
use crate::scalar::Scalar;
use crate::tensor::conv::valid_range;
use crate::tensor::{bilinear_resize, cosine, FeatureMap, Mask};

/// Boundary index plus the transformation applied there.
pub type TapHook<'a, T> = (usize, &'a dyn Fn(&FeatureMap<T>) -> Result<FeatureMap<T>>);

/// Per-stage f64 gradient buffers, shaped like the encoder parameters.
pub struct EpisodeGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl EpisodeGradients {
    fn zeros<T: Scalar>(enc: &EncoderState<T>) -> Self {
        Self {
            weights: enc.stages().iter().map(|s| vec![0.0; s.kernel.weights().len()]).collect(),
            biases: enc.stages().iter().map(|s| vec![0.0; s.bias.len()]).collect(),
        }
    }
}

/// SGD with momentum; velocity buffers are f64 and live outside the encoder
/// state (they are not checkpointed).
pub struct Sgd {
    lr: f64,
    momentum: f64,
    vel_w: Vec<Vec<f64>>,
    vel_b: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new<T: Scalar>(enc: &EncoderState<T>, lr: f64, momentum: f64) -> Result<Self> {
        if lr < 0.0 || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("run.lr/run.momentum: invalid ({lr}, {momentum})")));
        }
        Ok(Self {
            lr,
            momentum,
            vel_w: enc.stages().iter().map(|s| vec![0.0; s.kernel.weights().len()]).collect(),
            vel_b: enc.stages().iter().map(|s| vec![0.0; s.bias.len()]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn apply<T: Scalar>(&mut self, enc: &mut EncoderState<T>, grads: &EpisodeGradients) {
        let frozen = enc.freeze_mask().to_vec();
        for (i, stage) in enc.stages_mut().iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            for ((w, v), g) in stage.kernel.weights_mut().iter_mut().zip(&mut self.vel_w[i]).zip(&grads.weights[i]) {
                *v = self.momentum * *v + g;
                *w = T::of(w.to64() - self.lr * *v);
            }
            for ((b, v), g) in stage.bias.iter_mut().zip(&mut self.vel_b[i]).zip(&grads.biases[i]) {
                *v = self.momentum * *v + g;
                *b = T::of(b.to64() - self.lr * *v);
            }
        }
    }
}

/// One channel-planar f64 gradient grid.
struct Plane3 {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane3 {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }
}

fn conv_backward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &crate::tensor::ConvKernel<T>,
    d_out: &Plane3,
    dw: &mut [f64],
    need_din: bool,
) -> Option<Plane3> {
    let (h, w) = (input.h() as isize, input.w() as isize);
    let (kh, kw) = (kernel.kh() as isize, kernel.kw() as isize);
    let (s, p) = (kernel.stride() as isize, kernel.padding() as isize);
    let (oh, ow) = (d_out.h as isize, d_out.w as isize);
    let mut din = if need_din { Some(Plane3::zeros(input.c(), input.h(), input.w())) } else { None };
    for oc in 0..kernel.out_c() {
        let dplane = &d_out.data[oc * d_out.h * d_out.w..(oc + 1) * d_out.h * d_out.w];
        for ic in 0..kernel.in_c() {
            let aplane = input.plane(0, ic);
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((oc * kernel.in_c() + ic) * kernel.kh() + ky as usize) * kernel.kw() + kx as usize;
                    let wval = kernel.weights()[widx].to64();
                    let (oy_lo, oy_hi) = valid_range(h, ky, s, p, oh);
                    let (ox_lo, ox_hi) = valid_range(w, kx, s, p, ow);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - p;
                            let g = dplane[(oy as usize) * d_out.w + ox as usize];
                            acc += aplane[(iy * w + ix) as usize].to64() * g;
                            if let Some(din) = din.as_mut() {
                                din.data[(ic as usize * din.h + iy as usize) * din.w + ix as usize] += wval * g;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    din
}

/// Transpose of half-pixel bilinear sampling: scatter each output gradient
/// onto its four source corners.
fn bilinear_backward(d_out: &[f64], oh: usize, ow: usize, h: usize, w: usize) -> Vec<f64> {
    let mut din = vec![0.0; h * w];
    let coord = |d: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        ((lo), (lo + 1).min(src - 1), pos - lo as f64)
    };
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let g = d_out[oy * ow + ox];
            din[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            din[y0 * w + x1] += g * (1.0 - fy) * fx;
            din[y1 * w + x0] += g * fy * (1.0 - fx);
            din[y1 * w + x1] += g * fy * fx;
        }
    }
    din
}

fn backprop_branch<T: Scalar>(
    enc: &EncoderState<T>,
    trace: &ForwardTrace<T>,
    mut d_act: Plane3,
    grads: &mut EpisodeGradients,
) {
    let s = enc.num_stages();
    if trace.hook_boundary == Some(s) {
        return;
    }
    for i in (0..s).rev() {
        let stage = &enc.stages()[i];
        if stage.relu {
            for (g, z) in d_act.data.iter_mut().zip(trace.pres[i].data()) {
                if !(*z > T::zero()) {
                    *g = 0.0;
                }
            }
        }
        for ch in 0..d_act.c {
            grads.biases[i][ch] += d_act.data[ch * d_act.h * d_act.w..(ch + 1) * d_act.h * d_act.w].iter().sum::<f64>();
        }
        let stop_here = trace.hook_boundary == Some(i) || i == 0;
        let din = conv_backward(&trace.acts[i], &stage.kernel, &d_act, &mut grads.weights[i], !stop_here);
        if stop_here {
            break;
        }
        d_act = din.expect("input gradient requested");
    }
}

struct EpisodeForward<T: Scalar> {
    support: Vec<ForwardTrace<T>>,
    query: ForwardTrace<T>,
    small_masks: Vec<Mask>,
    fg_proto: Vec<f64>,
    bg_proto: Vec<f64>,
    score: ScoreMap<T>,
}

fn episode_forward<T: Scalar>(
    enc: &EncoderState<T>,
    episode: &Episode<T>,
    hook: Option<TapHook<T>>,
) -> Result<EpisodeForward<T>> {
    let k = episode.shots();
    if k == 0 {
        return Err(Error::Shape("episode has no support shots".into()));
    }
    let support: Vec<ForwardTrace<T>> = episode
        .support_images
        .iter()
        .map(|img| forward_trace(enc, img, hook))
        .collect::<Result<_>>()?;
    // The query branch never sees the perturbation hook.
    let query = forward_trace(enc, &episode.query_image, None)?;

    let deep0 = support[0].acts.last().unwrap();
    let (c, hf, wf) = (deep0.c(), deep0.h(), deep0.w());
    let mut small_masks = Vec::with_capacity(k);
    let mut fg_proto = vec![0.0f64; c];
    let mut bg_proto = vec![0.0f64; c];
    for (trace, mask) in support.iter().zip(&episode.support_masks) {
        let deep = trace.acts.last().unwrap();
        let small = mask.downsample_nearest(hf, wf)?;
        let n_fg = small.fg_count();
        if n_fg == 0 {
            return Err(Error::EmptyFg("support mask lost all foreground at feature resolution".into()));
        }
        if n_fg == hf * wf {
            return Err(Error::EmptyBg("support mask lost all background at feature resolution".into()));
        }
        for ch in 0..c {
            let plane = deep.plane(0, ch);
            let (mut afg, mut abg) = (0.0, 0.0);
            for (i, &v) in plane.iter().enumerate() {
                if small.data()[i] {
                    afg += v.to64();
                } else {
                    abg += v.to64();
                }
            }
            fg_proto[ch] += afg / n_fg as f64 / k as f64;
            bg_proto[ch] += abg / (hf * wf - n_fg) as f64 / k as f64;
        }
        small_masks.push(small);
    }

    let query_deep = query.acts.last().unwrap();
    let fg_p: Vec<T> = fg_proto.iter().map(|&v| T::of(v)).collect();
    let bg_p: Vec<T> = bg_proto.iter().map(|&v| T::of(v)).collect();
    let mut vec_buf = vec![T::zero(); c];
    let mut score_lo = FeatureMap::<T>::zeros(1, 2, hf, wf);
    for y in 0..hf {
        for x in 0..wf {
            for ch in 0..c {
                vec_buf[ch] = query_deep.at(0, ch, y, x);
            }
            score_lo.set(0, 0, y, x, cosine(&vec_buf, &bg_p)?);
            score_lo.set(0, 1, y, x, cosine(&vec_buf, &fg_p)?);
        }
    }
    let (out_h, out_w) = (episode.query_image.h(), episode.query_image.w());
    let up = bilinear_resize(&score_lo, out_h, out_w)?;
    let score = ScoreMap::new(out_h, out_w, up.plane(0, 0).to_vec(), up.plane(0, 1).to_vec())?;
    Ok(EpisodeForward { support, query, small_masks, fg_proto, bg_proto, score })
}

/// Scalar training loss of one episode (forward only).
pub fn episode_loss<T: Scalar>(enc: &EncoderState<T>, episode: &Episode<T>, hook: Option<TapHook<T>>) -> Result<f64> {
    let fwd = episode_forward(enc, episode, hook)?;
    let (loss, _) = bce_loss(&fwd.score, &episode.query_mask, TEMPERATURE)?;
    Ok(loss.to64())
}

/// Gradient of cosine(u, v) with respect to u and v, matching the forward
/// zero-norm convention (zero gradient at the singular point).
#[inline]
fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: &mut [f64], dv: &mut [f64]) {
    let mut dot = 0.0;
    let mut nu2 = 0.0;
    let mut nv2 = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu2 += a * a;
        nv2 += b * b;
    }
    if nu2 == 0.0 || nv2 == 0.0 {
        return;
    }
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    let s = dot / (nu * nv);
    for i in 0..u.len() {
        du[i] += g * (v[i] / (nu * nv) - s * u[i] / nu2);
        dv[i] += g * (u[i] / (nu * nv) - s * v[i] / nv2);
    }
}

/// Full manual backpropagation; returns the loss and parameter gradients.
pub fn episode_gradients<T: Scalar>(
    enc: &EncoderState<T>,
    episode: &Episode<T>,
    hook: Option<TapHook<T>>,
) -> Result<(f64, EpisodeGradients)> {
    let (loss, grads, _) = episode_gradients_scored(enc, episode, hook)?;
    Ok((loss, grads))
}

fn episode_gradients_scored<T: Scalar>(
    enc: &EncoderState<T>,
    episode: &Episode<T>,
    hook: Option<TapHook<T>>,
) -> Result<(f64, EpisodeGradients, ScoreMap<T>)> {
    let fwd = episode_forward(enc, episode, hook)?;
    let (loss, d_score) = bce_loss(&fwd.score, &episode.query_mask, TEMPERATURE)?;
    let mut grads = EpisodeGradients::zeros(enc);

    let (_, c, hf, wf) = fwd.query.acts.last().unwrap().shape();
    // Upsample backward, per channel.
    let d_bg_lo = bilinear_backward(
        &d_score.bg().iter().map(|v| v.to64()).collect::<Vec<_>>(),
        d_score.h(),
        d_score.w(),
        hf,
        wf,
    );
    let d_fg_lo = bilinear_backward(
        &d_score.fg().iter().map(|v| v.to64()).collect::<Vec<_>>(),
        d_score.h(),
        d_score.w(),
        hf,
        wf,
    );

    // Cosine backward: query features and both prototypes.
    let query_deep = fwd.query.acts.last().unwrap();
    let mut d_query = Plane3::zeros(c, hf, wf);
    let mut d_fg_proto = vec![0.0f64; c];
    let mut d_bg_proto = vec![0.0f64; c];
    let mut u = vec![0.0f64; c];
    let mut du = vec![0.0f64; c];
    for y in 0..hf {
        for x in 0..wf {
            for ch in 0..c {
                u[ch] = query_deep.at(0, ch, y, x).to64();
            }
            du.iter_mut().for_each(|v| *v = 0.0);
            cosine_backward(&u, &fwd.fg_proto, d_fg_lo[y * wf + x], &mut du, &mut d_fg_proto);
            cosine_backward(&u, &fwd.bg_proto, d_bg_lo[y * wf + x], &mut du, &mut d_bg_proto);
            for ch in 0..c {
                d_query.data[(ch * hf + y) * wf + x] += du[ch];
            }
        }
    }

    // Query branch.
    backprop_branch(enc, &fwd.query, d_query, &mut grads);

    // Prototype backward into each support shot, then its branch.
    let k = episode.shots() as f64;
    for (trace, small) in fwd.support.iter().zip(&fwd.small_masks) {
        let n_fg = small.fg_count() as f64;
        let n_bg = (hf * wf) as f64 - n_fg;
        let mut d_deep = Plane3::zeros(c, hf, wf);
        for ch in 0..c {
            let gf = d_fg_proto[ch] / (k * n_fg);
            let gb = d_bg_proto[ch] / (k * n_bg);
            for (i, &m) in small.data().iter().enumerate() {
                d_deep.data[ch * hf * wf + i] = if m { gf } else { gb };
            }
        }
        backprop_branch(enc, trace, d_deep, &mut grads);
    }

    Ok((loss.to64(), grads))
}

/// One optimization step on a single episode. Returns the loss before the
/// update. Frozen stages receive no update; with `lr = 0` the weights are
/// unchanged bit-for-bit.
pub fn train_step<T: Scalar>(
    enc: &mut EncoderState<T>,
    opt: &mut Sgd,
    episode: &Episode<T>,
    hook: Option<TapHook<T>>,
) -> Result<f64> {
    let (loss, grads) = episode_gradients(enc, episode, hook)?;
    opt.apply(enc, &grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_episode, DomainSpec};

    fn episode16(seed: u64) -> Episode<f64> {
        generate_episode(seed, &DomainSpec::source(), 1, 16, 16).unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut enc = EncoderState::<f64>::default_init(4, 1).unwrap();
        let before = enc.clone();
        let mut opt = Sgd::new(&enc, 0.0, 0.9).unwrap();
        train_step(&mut enc, &mut opt, &episode16(2), None).unwrap();
        assert_eq!(enc, before);
    }

    #[test]
    fn full_freeze_keeps_weights_and_still_reports_loss() {
        let mut enc = EncoderState::<f64>::default_init(4, 1).unwrap();
        enc.set_freeze_mask(vec![true; 4]).unwrap();
        let before = enc.clone();
        let mut opt = Sgd::new(&enc, 1e-2, 0.9).unwrap();
        let loss = train_step(&mut enc, &mut opt, &episode16(2), None).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(enc, before);
    }

    #[test]
    fn partial_freeze_only_touches_unfrozen_stages() {
        let mut enc = EncoderState::<f64>::default_init(4, 1).unwrap();
        enc.set_frozen_by_name(&["stage1".into(), "stage2".into()]).unwrap();
        let before = enc.clone();
        let mut opt = Sgd::new(&enc, 1e-2, 0.9).unwrap();
        for seed in 0..5 {
            train_step(&mut enc, &mut opt, &episode16(seed), None).unwrap();
        }
        assert_eq!(enc.stages()[0], before.stages()[0]);
        assert_eq!(enc.stages()[1], before.stages()[1]);
        assert_ne!(enc.stages()[2], before.stages()[2]);
        assert_ne!(enc.stages()[3], before.stages()[3]);
    }

    #[test]
    fn query_branch_ignores_hook() {
        let enc = EncoderState::<f64>::default_init(4, 1).unwrap();
        let ep = episode16(3);
        let zero_out = |_m: &FeatureMap<f64>| Ok(FeatureMap::zeros(1, 8, 16, 16));
        let with = episode_forward(&enc, &ep, Some((1, &zero_out))).unwrap();
        let without = episode_forward(&enc, &ep, None).unwrap();
        assert_eq!(with.query.acts, without.query.acts);
        assert_ne!(
            with.support[0].acts.last().unwrap(),
            without.support[0].acts.last().unwrap()
        );
    }

    #[test]
    fn training_reduces_loss_on_repeated_episode() {
        let mut enc = EncoderState::<f64>::default_init(4, 1).unwrap();
        let ep = episode16(5);
        let mut opt = Sgd::new(&enc, 1e-2, 0.9).unwrap();
        let first = train_step(&mut enc, &mut opt, &ep, None).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut enc, &mut opt, &ep, None).unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_sampled() {
        let enc = EncoderState::<f64>::default_init(11, 1).unwrap();
        let ep = episode16(7);
        let (_, grads) = episode_gradients(&enc, &ep, None).unwrap();
        let eps = 1e-4;
        // Spot-check a deterministic sample of parameters in every stage;
        // the acceptance suite sweeps all of them.
        for stage_idx in 0..4 {
            let n_w = enc.stages()[stage_idx].kernel.weights().len();
            for probe in 0..6 {
                let widx = (probe * 97 + stage_idx * 31) % n_w;
                let mut up = enc.clone();
                up.stages_mut()[stage_idx].kernel.weights_mut()[widx] += eps;
                let mut dn = enc.clone();
                dn.stages_mut()[stage_idx].kernel.weights_mut()[widx] -= eps;
                let num =
                    (episode_loss(&up, &ep, None).unwrap() - episode_loss(&dn, &ep, None).unwrap()) / (2.0 * eps);
                let ana = grads.weights[stage_idx][widx];
                let rel = (ana - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "stage {stage_idx} w[{widx}]: analytic {ana} vs numeric {num}");
            }
            let n_b = enc.stages()[stage_idx].bias.len();
            for probe in 0..2 {
                let bidx = (probe * 5 + stage_idx) % n_b;
                let mut up = enc.clone();
                up.stages_mut()[stage_idx].bias[bidx] += eps;
                let mut dn = enc.clone();
                dn.stages_mut()[stage_idx].bias[bidx] -= eps;
                let num =
                    (episode_loss(&up, &ep, None).unwrap() - episode_loss(&dn, &ep, None).unwrap()) / (2.0 * eps);
                let ana = grads.biases[stage_idx][bidx];
                let rel = (ana - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "stage {stage_idx} b[{bidx}]: analytic {ana} vs numeric {num}");
            }
        }
    }

    #[test]
    fn hook_fixed_output_gradients_match_finite_differences() {
        // With the tap output pinned to a constant, analytic gradients match
        // finite differences of the same stop-gradient loss.
        let enc = EncoderState::<f64>::default_init(13, 1).unwrap();
        let ep = episode16(9);
        let base = forward_trace(&enc, &ep.support_images[0], None).unwrap();
        let fixed = base.acts[1].scale(0.8);
        let hook = move |_: &FeatureMap<f64>| Ok(fixed.clone());
        let (_, grads) = episode_gradients(&enc, &ep, Some((1, &hook))).unwrap();
        let eps = 1e-4;
        for stage_idx in 0..4 {
            let n_w = enc.stages()[stage_idx].kernel.weights().len();
            for probe in 0..4 {
                let widx = (probe * 53 + stage_idx * 17) % n_w;
                let mut up = enc.clone();
                up.stages_mut()[stage_idx].kernel.weights_mut()[widx] += eps;
                let mut dn = enc.clone();
                dn.stages_mut()[stage_idx].kernel.weights_mut()[widx] -= eps;
                let num = (episode_loss(&up, &ep, Some((1, &hook))).unwrap()
                    - episode_loss(&dn, &ep, Some((1, &hook))).unwrap())
                    / (2.0 * eps);
                let ana = grads.weights[stage_idx][widx];
                let rel = (ana - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "stage {stage_idx} w[{widx}]: analytic {ana} vs numeric {num}");
            }
        }
    }
}
