//! Layer-wise relevance propagation with the EpsilonPlus composite.
//!
//! Rules per layer kind:
//!
//! | kind              | rule                                                        |
//! |-------------------|-------------------------------------------------------------|
//! | linear            | epsilon, `z + eps * sign(z)` with `eps = 1e-6`, bias in `z`  |
//! | conv2d            | z-plus: only positive contributions, bias ignored           |
//! | maxpool2d         | winner takes all (first row-major cell on ties)             |
//! | avgpool2d, gap    | proportional to the input values, uniform if the window sums to zero |
//! | relu, flatten     | identity                                                    |
//!
//! For conv inputs that may be negative (normalized pixels), the positive
//! contribution of input `a` through weight `w` is `a * w⁺` when `a >= 0`
//! and `a * w⁻` when `a < 0`. On nonnegative inputs this is exactly
//! `a * w⁺`, and it keeps every denominator nonnegative.

use crate::error::{Error, Result};
use crate::matching::Keypoint;
use crate::model::{unit_embeddings, ForwardTrace, LayerSpec, ModelGraph};
use crate::tensor::{max_pool_argmax, Tensor};

pub const EPSILON: f64 = 1e-6;

/// Relevance of every neuron of a tapped layer, same shape as `A^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub layer_index: usize,
    pub values: Tensor,
}

impl RelevanceMap {
    /// Channel-summed relevance, `h * w` row-major.
    pub fn channel_sum(&self) -> Vec<f64> {
        self.values.channel_sum().expect("relevance maps are rank-3")
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[2], s[1])
    }
}

/// Pixel-space relevance of one matched keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRelevance {
    pub match_id: usize,
    pub values: Tensor,
}

impl PixelRelevance {
    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    /// Channel-summed 2-D heatmap at input resolution, row-major.
    pub fn heatmap(&self) -> Vec<f64> {
        self.values.channel_sum().expect("pixel relevance is rank-3")
    }
}

/// Per-dimension seeds `R_i = â_i · b̂_i` for both embeddings. The seeds sum
/// to the cosine similarity; each side treats the partner as fixed context,
/// so both seeds are the same vector.
pub fn seed_relevance_from_cosine(a: &ForwardTrace, b: &ForwardTrace) -> Result<(Tensor, Tensor)> {
    let (ua, ub) = unit_embeddings(a.embedding(), b.embedding())?;
    let seed: Vec<f32> = ua.iter().zip(&ub).map(|(x, y)| (x * y) as f32).collect();
    let t = Tensor::from_vec(seed)?;
    Ok((t.clone(), t))
}

/// Propagates `seed` (relevance at the embedding output) down to the output
/// of tap `stop_layer`.
pub fn lrp_backward(
    model: &ModelGraph,
    trace: &ForwardTrace,
    seed: &Tensor,
    stop_layer: usize,
) -> Result<RelevanceMap> {
    let top = model.embedding_index();
    if seed.shape() != trace.embedding().shape() {
        return Err(Error::Shape(format!(
            "seed {:?} does not match embedding {:?}",
            seed.shape(),
            trace.embedding().shape()
        )));
    }
    if !model.is_tap(stop_layer) {
        return Err(Error::InvalidArgument(format!(
            "layer {stop_layer} is not a tap point (taps: {:?})",
            model.tap_points()
        )));
    }
    let r: Vec<f64> = seed.data().iter().map(|&v| v as f64).collect();
    let r = propagate(model, trace, r, top, stop_layer + 1)?;
    let shape = trace.layer_output(stop_layer).shape().to_vec();
    Ok(RelevanceMap {
        layer_index: stop_layer,
        values: Tensor::new(shape, r.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Backpropagates the tapped activation masked to the single spatial cell
/// `keypoint` (all channels kept) down to the input pixels.
pub fn masked_pixel_backprop(
    model: &ModelGraph,
    trace: &ForwardTrace,
    layer: usize,
    keypoint: Keypoint,
    match_id: usize,
) -> Result<PixelRelevance> {
    let act = trace.activation(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} is not a tap point"))
    })?;
    let (c, h, w) = act.chw()?;
    if keypoint.i >= w || keypoint.j >= h {
        return Err(Error::OutOfBounds(format!(
            "keypoint ({}, {}) outside {w}x{h} grid",
            keypoint.i, keypoint.j
        )));
    }
    let mut seed = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let idx = (ch * h + keypoint.j) * w + keypoint.i;
        seed[idx] = act.data()[idx] as f64;
    }
    let r = propagate(model, trace, seed, layer, 0)?;
    Ok(PixelRelevance {
        match_id,
        values: Tensor::new(
            trace.input().shape().to_vec(),
            r.into_iter().map(|v| v as f32).collect(),
        )?,
    })
}

/// Inclusive pixel rectangle `(x0, y0, x1, y1)` of the input region that can
/// influence cell `keypoint` of the output of `layer`.
pub fn receptive_field(model: &ModelGraph, layer: usize, keypoint: Keypoint) -> (usize, usize, usize, usize) {
    let (mut x0, mut x1) = (keypoint.i as isize, keypoint.i as isize);
    let (mut y0, mut y1) = (keypoint.j as isize, keypoint.j as isize);
    for index in (0..=layer).rev() {
        if let Some((k, s, p)) = model.layers()[index].window() {
            let (k, s, p) = (k as isize, s as isize, p as isize);
            x0 = x0 * s - p;
            y0 = y0 * s - p;
            x1 = x1 * s - p + k - 1;
            y1 = y1 * s - p + k - 1;
        }
    }
    let spec = model.input_spec();
    let clip = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    (
        clip(x0, spec.width),
        clip(y0, spec.height),
        clip(x1, spec.width),
        clip(y1, spec.height),
    )
}

/// Runs layers `top` down to `bottom` (inclusive) backwards. `r` is the
/// relevance at the output of `top`; the result is relevance at the input of
/// `bottom`.
fn propagate(
    model: &ModelGraph,
    trace: &ForwardTrace,
    mut r: Vec<f64>,
    top: usize,
    bottom: usize,
) -> Result<Vec<f64>> {
    for index in (bottom..=top).rev() {
        let input = trace.layer_input(index);
        r = match &model.layers()[index] {
            LayerSpec::Relu | LayerSpec::Flatten => r,
            LayerSpec::Linear { .. } => {
                let p = model.params(index).ok_or_else(|| unsupported(model, index))?;
                linear_epsilon(input, &p.weight, &p.bias, &r)
            }
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = model.params(index).ok_or_else(|| unsupported(model, index))?;
                conv_zplus(input, &p.weight, *stride, *padding, &r)?
            }
            LayerSpec::MaxPool2d { kernel, stride } => max_pool_wta(input, *kernel, *stride, &r)?,
            LayerSpec::AvgPool2d { kernel, stride } => {
                avg_pool_proportional(input, *kernel, *stride, &r)?
            }
            LayerSpec::GlobalAvgPool => {
                let (_, h, w) = input.chw()?;
                avg_pool_proportional_windows(input, &r, |_| (0..h * w).collect())?
            }
        };
    }
    Ok(r)
}

fn unsupported(model: &ModelGraph, index: usize) -> Error {
    Error::UnsupportedLayer {
        index,
        kind: model.layers()[index].kind_name().into(),
    }
}

fn stabilize(z: f64) -> f64 {
    if z >= 0.0 {
        z + EPSILON
    } else {
        z - EPSILON
    }
}

fn linear_epsilon(input: &Tensor, weight: &Tensor, bias: &Tensor, r: &[f64]) -> Vec<f64> {
    let a = input.data();
    let n_in = a.len();
    let mut out = vec![0.0f64; n_in];
    for (k, row) in weight.data().chunks_exact(n_in).enumerate() {
        if r[k] == 0.0 {
            continue;
        }
        let mut z = bias.data()[k] as f64;
        for (&wv, &av) in row.iter().zip(a) {
            z += wv as f64 * av as f64;
        }
        let s = r[k] / stabilize(z);
        for ((o, &wv), &av) in out.iter_mut().zip(row).zip(a) {
            *o += av as f64 * wv as f64 * s;
        }
    }
    out
}

#[inline]
fn positive_contribution(a: f32, w: f32) -> f64 {
    let (a, w) = (a as f64, w as f64);
    if a >= 0.0 {
        a * w.max(0.0)
    } else {
        a * w.min(0.0)
    }
}

fn conv_zplus(input: &Tensor, weight: &Tensor, stride: usize, padding: usize, r: &[f64]) -> Result<Vec<f64>> {
    let (c, h, w) = input.chw()?;
    let ws = weight.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let ow_h = crate::tensor::window_output_extent(h, kh, stride, padding).unwrap_or(0);
    let ow = crate::tensor::window_output_extent(w, kw, stride, padding).unwrap_or(0);
    if ow_h * ow * oc != r.len() {
        return Err(Error::Shape(format!(
            "relevance of length {} does not match conv output {oc}x{ow_h}x{ow}",
            r.len()
        )));
    }
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0f64; c * h * w];
    // Visits the in-bounds taps of output cell (oy, ox) for output channel o.
    let visit = |o: usize, oy: usize, ox: usize, f: &mut dyn FnMut(usize, f64)| {
        for ci in 0..c {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xi = (ci * h + iy as usize) * w + ix as usize;
                    let wv = k[((o * c + ci) * kh + ky) * kw + kx];
                    f(xi, positive_contribution(x[xi], wv));
                }
            }
        }
    };
    for o in 0..oc {
        for oy in 0..ow_h {
            for ox in 0..ow {
                let rk = r[(o * ow_h + oy) * ow + ox];
                if rk == 0.0 {
                    continue;
                }
                let mut z = 0.0f64;
                visit(o, oy, ox, &mut |_, zc| z += zc);
                if z <= 0.0 {
                    continue;
                }
                let s = rk / z;
                visit(o, oy, ox, &mut |xi, zc| out[xi] += zc * s);
            }
        }
    }
    Ok(out)
}

fn max_pool_wta(input: &Tensor, kernel: usize, stride: usize, r: &[f64]) -> Result<Vec<f64>> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let rk = r[(ch * oh + oy) * ow + ox];
                if rk != 0.0 {
                    out[max_pool_argmax(input, kernel, stride, ch, oy, ox)] += rk;
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool_proportional(input: &Tensor, kernel: usize, stride: usize, r: &[f64]) -> Result<Vec<f64>> {
    let (_, h, w) = input.chw()?;
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    avg_pool_proportional_windows(input, r, |cell| {
        let (oy, ox) = (cell / ow, cell % ow);
        debug_assert!(oy < oh);
        let mut idx = Vec::with_capacity(kernel * kernel);
        for ky in 0..kernel {
            for kx in 0..kernel {
                idx.push((oy * stride + ky) * w + ox * stride + kx);
            }
        }
        idx
    })
}

/// Shared proportional redistribution: `window(cell)` lists the plane
/// offsets feeding output cell `cell` of each channel.
fn avg_pool_proportional_windows(
    input: &Tensor,
    r: &[f64],
    window: impl Fn(usize) -> Vec<usize>,
) -> Result<Vec<f64>> {
    let (c, h, w) = input.chw()?;
    let cells = r.len() / c;
    let x = input.data();
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for cell in 0..cells {
            let rk = r[ch * cells + cell];
            if rk == 0.0 {
                continue;
            }
            let idx = window(cell);
            let z: f64 = idx.iter().map(|&i| x[base + i] as f64).sum();
            if z.abs() < 1e-12 {
                let share = rk / idx.len() as f64;
                for &i in &idx {
                    out[base + i] += share;
                }
            } else {
                let s = rk / stabilize(z);
                for &i in &idx {
                    out[base + i] += x[base + i] as f64 * s;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use crate::model::InputSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(c: usize, h: usize, w: usize) -> InputSpec {
        InputSpec {
            channels: c,
            height: h,
            width: w,
        }
    }

    #[test]
    fn single_linear_path_conserves() {
        // x=[3], W=[[2]] -> z=6; seed 6 lands fully on the input.
        let model = ModelBuilder::new(spec(1, 1, 1))
            .tap()
            .flatten()
            .linear(1, vec![2.0], vec![0.0])
            .build();
        // a tap needs a preceding layer; build a relu first instead
        assert!(model.is_err());
        let model = ModelBuilder::new(spec(1, 1, 1))
            .relu()
            .tap()
            .flatten()
            .linear(1, vec![2.0], vec![0.0])
            .build()
            .unwrap();
        let input = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let trace = model.forward(&input).unwrap();
        assert_eq!(trace.embedding().data(), &[6.0]);
        let seed = Tensor::from_vec(vec![6.0]).unwrap();
        let rel = lrp_backward(&model, &trace, &seed, 0).unwrap();
        assert!((rel.values.data()[0] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn max_pool_relevance_goes_to_argmax() {
        let model = ModelBuilder::new(spec(1, 2, 2))
            .relu()
            .tap()
            .maxpool(2, 2)
            .flatten()
            .build()
            .unwrap();
        let input = Tensor::new(vec![1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let trace = model.forward(&input).unwrap();
        let rel = lrp_backward(&model, &trace, &Tensor::from_vec(vec![1.0]).unwrap(), 0).unwrap();
        assert_eq!(rel.values.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn seeds_sum_to_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelBuilder::new(spec(1, 1, 8)).relu().tap().flatten().build().unwrap();
        for _ in 0..20 {
            let a = Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
            let b = Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
            let (ta, tb) = (model.forward(&a).unwrap(), model.forward(&b).unwrap());
            let (sa, sb) = seed_relevance_from_cosine(&ta, &tb).unwrap();
            assert_eq!(sa, sb);
            // direct formula
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((sa.sum() - dot / (na * nb)).abs() < 1e-5);
        }
    }

    #[test]
    fn seed_special_cases() {
        let model = ModelBuilder::new(spec(1, 1, 3)).relu().tap().flatten().build().unwrap();
        let e1 = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let t1 = model.forward(&e1).unwrap();
        let t2 = model.forward(&e2).unwrap();
        let (s, _) = seed_relevance_from_cosine(&t1, &t1).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
        let (s, _) = seed_relevance_from_cosine(&t1, &t2).unwrap();
        assert!(s.sum().abs() < 1e-6);
        let z = model.forward(&Tensor::zeros(vec![1, 1, 3]).unwrap()).unwrap();
        assert!(matches!(
            seed_relevance_from_cosine(&t1, &z),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn two_conv_model_conserves_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = ModelBuilder::new(spec(2, 6, 6))
            .conv_with(3, 3, 1, 1, |_| rng.gen_range(-0.5..1.0), |_| 0.0)
            .relu()
            .tap()
            .conv_with(4, 3, 1, 0, |_| 0.0, |_| 0.0)
            .relu()
            .flatten()
            .build();
        let model = model.unwrap();
        // second conv: fill with random weights
        let mut tensors = model.tensors().clone();
        let w = tensors.get_mut("layer2.weight").unwrap();
        for v in w.data_mut() {
            *v = rng.gen_range(-0.5..1.0);
        }
        let model = ModelGraph::new(model.description().clone(), tensors).unwrap();
        let input = Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let trace = model.forward(&input).unwrap();
        // seed = the embedding itself (nonnegative, post-relu)
        let seed = trace.embedding().clone();
        let total = seed.sum();
        let rel = lrp_backward(&model, &trace, &seed, 1).unwrap();
        assert!(((rel.values.sum() - total) / total).abs() < 0.01);
        let mut r: Vec<f64> = rel.values.data().iter().map(|&v| v as f64).collect();
        r = propagate(&model, &trace, r, 1, 0).unwrap();
        let s: f64 = r.iter().sum();
        assert!(((s - total) / total).abs() < 0.01);
        assert!(r.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn masked_backprop_zero_activation_gives_zero_heatmap() {
        let model = ModelBuilder::new(spec(1, 4, 4))
            .conv_with(1, 3, 1, 1, |_| 1.0, |_| -100.0)
            .relu()
            .tap()
            .flatten()
            .build()
            .unwrap();
        let input = Tensor::new(vec![1, 4, 4], vec![0.5; 16]).unwrap();
        let trace = model.forward(&input).unwrap();
        let px = masked_pixel_backprop(&model, &trace, 1, Keypoint { i: 1, j: 2 }, 0).unwrap();
        assert!(px.heatmap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            masked_pixel_backprop(&model, &trace, 1, Keypoint { i: 4, j: 0 }, 0),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn one_by_one_conv_gives_single_pixel_heatmaps() {
        let model = ModelBuilder::new(spec(3, 5, 5))
            .conv_with(2, 1, 1, 0, |i| 0.2 + i as f32 * 0.1, |_| 0.0)
            .relu()
            .tap()
            .flatten()
            .build()
            .unwrap();
        let input = Tensor::new(vec![3, 5, 5], (0..75).map(|v| 0.1 + v as f32 / 75.0).collect()).unwrap();
        let trace = model.forward(&input).unwrap();
        let a = masked_pixel_backprop(&model, &trace, 1, Keypoint { i: 0, j: 0 }, 0).unwrap();
        let b = masked_pixel_backprop(&model, &trace, 1, Keypoint { i: 3, j: 4 }, 1).unwrap();
        let (ha, hb) = (a.heatmap(), b.heatmap());
        let nz = |h: &[f64]| h.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(nz(&ha), vec![0]);
        assert_eq!(nz(&hb), vec![4 * 5 + 3]);
    }

    #[test]
    fn support_inside_three_by_three_window() {
        let model = ModelBuilder::new(spec(1, 6, 6))
            .conv_with(2, 3, 1, 1, |i| if i % 2 == 0 { 0.5 } else { -0.2 }, |_| 0.1)
            .relu()
            .tap()
            .flatten()
            .build()
            .unwrap();
        let input = Tensor::new(vec![1, 6, 6], (0..36).map(|v| (v % 5) as f32 * 0.2).collect()).unwrap();
        let trace = model.forward(&input).unwrap();
        let kp = Keypoint { i: 2, j: 3 };
        assert_eq!(receptive_field(&model, 1, kp), (1, 2, 3, 4));
        let h = masked_pixel_backprop(&model, &trace, 1, kp, 0).unwrap().heatmap();
        for (idx, v) in h.iter().enumerate() {
            let (y, x) = (idx / 6, idx % 6);
            if *v != 0.0 {
                assert!((1..=3).contains(&x) && (2..=4).contains(&y), "({x},{y})");
            }
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn epsilon_rule_conserves_for_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w1: Vec<f32> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = ModelBuilder::new(spec(1, 1, 8))
            .relu()
            .tap()
            .flatten()
            .linear(6, w1, vec![0.0; 6])
            .linear(4, w2, vec![0.0; 4])
            .build()
            .unwrap();
        let input = Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let trace = model.forward(&input).unwrap();
        let seed = Tensor::from_vec(vec![0.3, -0.1, 0.25, 0.05]).unwrap();
        let rel = lrp_backward(&model, &trace, &seed, 0).unwrap();
        assert!(((rel.values.sum() - seed.sum()) / seed.sum()).abs() < 1e-3);
    }

    #[test]
    fn unknown_stop_layer_rejected() {
        let model = ModelBuilder::new(spec(1, 2, 2)).relu().tap().flatten().build().unwrap();
        let trace = model.forward(&Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let seed = trace.embedding().clone();
        assert!(lrp_backward(&model, &trace, &seed, 1).is_err());
    }
}
