//! Attention-based mixed-sample generator.
//!
//! Given N source images, their encoder feature maps, and a ratio vector on
//! the simplex, the generator embeds each ratio as a constant feature plane,
//! projects the embedded maps to query, key, and value heads with 1x1
//! convolutions, scores each image's queries against the other images' keys,
//! and normalizes the per-image attention maps across the image axis into a
//! pixelwise partition of unity. Upsampled to image resolution, these policy
//! masks Hadamard-mix the sources into one image.
//!
//! The same parameters serve any number of input images: nothing in the
//! architecture depends on N.

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::{DiffError, Tape, Var};
use crate::model::{encoder_features, BackboneVars};
use crate::tensor::Tensor;

/// Pixelwise mask tolerance: each stack must sum to 1 across images at
/// every pixel within this bound.
pub const MASK_SUM_TOL: f64 = 1e-5;

/// Weights of the three 1x1 projection convolutions.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
}

impl GeneratorParams {
    /// `feature_channels` is the encoder output channel count C; the
    /// projections see C+1 channels after ratio embedding. Query and key
    /// reduce to floor((C+1)/2) channels, value to a single channel.
    pub fn init(feature_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        let cin = feature_channels + 1;
        let d = cin / 2;
        let dist = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("finite std");
        let mut conv = |cout: usize| {
            Tensor::from_vec((0..cout * cin).map(|_| dist.sample(rng)).collect(), &[cout, cin, 1, 1])
                .expect("shape")
        };
        GeneratorParams {
            query_w: conv(d),
            query_b: Tensor::zeros(&[d]),
            key_w: conv(d),
            key_b: Tensor::zeros(&[d]),
            value_w: conv(1),
            value_b: Tensor::zeros(&[1]),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.query_w.shape()[1] - 1
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.query_w, &self.query_b, &self.key_w, &self.key_b, &self.value_w, &self.value_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("query.weight".into(), &self.query_w),
            ("query.bias".into(), &self.query_b),
            ("key.weight".into(), &self.key_w),
            ("key.bias".into(), &self.key_b),
            ("value.weight".into(), &self.value_w),
            ("value.bias".into(), &self.value_b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("query.weight".into(), &mut self.query_w),
            ("query.bias".into(), &mut self.query_b),
            ("key.weight".into(), &mut self.key_w),
            ("key.bias".into(), &mut self.key_b),
            ("value.weight".into(), &mut self.value_w),
            ("value.bias".into(), &mut self.value_b),
        ]
    }

    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        GeneratorVars {
            query_w: reg(&self.query_w),
            query_b: reg(&self.query_b),
            key_w: reg(&self.key_w),
            key_b: reg(&self.key_b),
            value_w: reg(&self.value_w),
            value_b: reg(&self.value_b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct GeneratorVars {
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
}

impl GeneratorVars {
    /// Tape handles in the same order as [`GeneratorParams::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.query_w, self.query_b, self.key_w, self.key_b, self.value_w, self.value_b]
    }
}

/// Query/key matrices `[d, wh]` and value vector `[wh]` for one image.
pub struct AttentionHeads {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub d: usize,
    pub wh: usize,
}

/// Concatenates a constant plane holding the mix ratio onto a feature map:
/// `[C, h, w]` becomes `[C+1, h, w]` with the ratio in channel 0.
pub fn embed_ratio(tape: &mut Tape, z: Var, ratio: f64) -> Result<Var, DiffError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DiffError::Invalid {
            op: "embed_ratio",
            detail: format!("ratio {ratio} outside [0, 1]"),
        });
    }
    let s = tape.shape_of(z).to_vec();
    if s.len() != 3 {
        return Err(DiffError::Shape {
            op: "embed_ratio",
            detail: format!("expected [C, h, w], got {:?}", s),
        });
    }
    let plane = tape.leaf(Tensor::full(&[1, s[1], s[2]], ratio));
    tape.concat(&[plane, z], 0)
}

/// Projects a ratio-embedded map to attention heads with the three 1x1
/// convolutions.
pub fn qkv_project(
    tape: &mut Tape,
    z_ratio: Var,
    theta: &GeneratorVars,
) -> Result<AttentionHeads, DiffError> {
    let s = tape.shape_of(z_ratio).to_vec();
    if s.len() != 3 {
        return Err(DiffError::Shape {
            op: "qkv_project",
            detail: format!("expected [C+1, h, w], got {:?}", s),
        });
    }
    let (c1, h, w) = (s[0], s[1], s[2]);
    if tape.shape_of(theta.query_w)[1] != c1 {
        return Err(DiffError::Shape {
            op: "qkv_project",
            detail: format!(
                "projection expects {} channels, map has {}",
                tape.shape_of(theta.query_w)[1],
                c1
            ),
        });
    }
    let wh = h * w;
    let x = tape.reshape(z_ratio, &[1, c1, h, w])?;
    let d = tape.shape_of(theta.query_w)[0];
    let q4 = tape.conv2d(x, theta.query_w, Some(theta.query_b), 1, 0)?;
    let k4 = tape.conv2d(x, theta.key_w, Some(theta.key_b), 1, 0)?;
    let v4 = tape.conv2d(x, theta.value_w, Some(theta.value_b), 1, 0)?;
    Ok(AttentionHeads {
        q: tape.reshape(q4, &[d, wh])?,
        k: tape.reshape(k4, &[d, wh])?,
        v: tape.reshape(v4, &[wh])?,
        d,
        wh,
    })
}

/// Cross-attention map for image `n`: rows of the score matrix
/// `sum_{i != n} q_n^T k_i / sqrt(d)` are softmaxed along the key axis and
/// applied to `v_n`, giving a `[wh]` vector.
pub fn cross_attention(tape: &mut Tape, heads: &[AttentionHeads], n: usize) -> Result<Var, DiffError> {
    if heads.len() < 2 {
        return Err(DiffError::Invalid {
            op: "cross_attention",
            detail: format!("need at least 2 images, got {}", heads.len()),
        });
    }
    if n >= heads.len() {
        return Err(DiffError::Invalid {
            op: "cross_attention",
            detail: format!("index {} out of range for {} heads", n, heads.len()),
        });
    }
    let (d, wh) = (heads[n].d, heads[n].wh);
    if heads.iter().any(|h| h.d != d || h.wh != wh) {
        return Err(DiffError::Shape {
            op: "cross_attention",
            detail: "heads disagree on d or spatial size".into(),
        });
    }
    let qt = tape.transpose2(heads[n].q)?;
    let mut scores: Option<Var> = None;
    for (i, other) in heads.iter().enumerate() {
        if i == n {
            continue;
        }
        let s = tape.matmul(qt, other.k)?;
        scores = Some(match scores {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let scaled = tape.scale(scores.expect("at least one other image"), 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(scaled, 1)?;
    let v_col = tape.reshape(heads[n].v, &[wh, 1])?;
    let p = tape.matmul(attn, v_col)?;
    tape.reshape(p, &[wh])
}

/// Stacks per-image attention maps, softmaxes across the image axis at each
/// pixel, and bilinearly upsamples each plane to image resolution. Every
/// pixel of the result is a convex weight vector over the N sources.
pub fn normalize_and_upsample(
    tape: &mut Tape,
    maps: &[Var],
    target: (usize, usize),
) -> Result<Var, DiffError> {
    if maps.len() < 2 {
        return Err(DiffError::Invalid {
            op: "normalize_and_upsample",
            detail: format!("need at least 2 maps, got {}", maps.len()),
        });
    }
    let shape = tape.shape_of(maps[0]).to_vec();
    if shape.len() != 2 {
        return Err(DiffError::Shape {
            op: "normalize_and_upsample",
            detail: format!("expected [h, w] maps, got {:?}", shape),
        });
    }
    let mut planes = Vec::with_capacity(maps.len());
    for &m in maps {
        if tape.shape_of(m) != shape {
            return Err(DiffError::Shape {
                op: "normalize_and_upsample",
                detail: format!("map {:?} vs {:?}", tape.shape_of(m), shape),
            });
        }
        planes.push(tape.reshape(m, &[1, shape[0], shape[1]])?);
    }
    let stack = tape.concat(&planes, 0)?;
    let normed = tape.softmax(stack, 0)?;
    tape.upsample_bilinear(normed, target)
}

fn check_masks(masks: &Tensor) -> Result<(), DiffError> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(DiffError::Shape {
            op: "policy_masks",
            detail: format!("expected [N, H, W], got {:?}", s),
        });
    }
    let (n, hw) = (s[0], s[1] * s[2]);
    for &v in masks.data() {
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(DiffError::Invalid {
                op: "policy_masks",
                detail: format!("mask entry {v} outside [0, 1]"),
            });
        }
    }
    for p in 0..hw {
        let sum: f64 = (0..n).map(|i| masks.data()[i * hw + p]).sum();
        if (sum - 1.0).abs() > MASK_SUM_TOL {
            return Err(DiffError::Invalid {
                op: "policy_masks",
                detail: format!("mask stack sums to {sum} at pixel {p}"),
            });
        }
    }
    Ok(())
}

/// A validated `[N, H, W]` policy mask stack: entries in `[0, 1]` forming a
/// pixelwise partition of unity.
#[derive(Clone, Debug)]
pub struct PolicyMasks(Tensor);

impl PolicyMasks {
    pub fn new(t: Tensor) -> Result<Self, DiffError> {
        check_masks(&t)?;
        Ok(PolicyMasks(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Hadamard-mixes N `[C, H, W]` images under a `[N, H, W]` mask stack,
/// broadcasting each mask across channels.
pub fn mix_images(tape: &mut Tape, images: &[Var], masks: Var) -> Result<Var, DiffError> {
    let ms = tape.shape_of(masks).to_vec();
    check_masks(tape.value(masks))?;
    if images.len() != ms[0] {
        return Err(DiffError::Shape {
            op: "mix_images",
            detail: format!("{} images vs {} masks", images.len(), ms[0]),
        });
    }
    let mut acc: Option<Var> = None;
    for (n, &img) in images.iter().enumerate() {
        let is = tape.shape_of(img);
        if is.len() != 3 || is[1] != ms[1] || is[2] != ms[2] {
            return Err(DiffError::Shape {
                op: "mix_images",
                detail: format!("image {:?} vs mask plane {}x{}", is, ms[1], ms[2]),
            });
        }
        let plane = tape.select0(masks, n)?;
        let term = tape.mul_plane(img, plane)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("mask stack is nonempty"))
}

/// Ratio-weighted label mixing: `y_mix = sum_n ratio_n * y_n`. Labels must
/// be one-hot; the result is a distribution over classes.
pub fn mix_labels(labels: &[Tensor], ratios: &[f64]) -> Result<Tensor, DiffError> {
    if labels.is_empty() || labels.len() != ratios.len() {
        return Err(DiffError::Invalid {
            op: "mix_labels",
            detail: format!("{} labels vs {} ratios", labels.len(), ratios.len()),
        });
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || ratios.iter().any(|r| *r < 0.0) {
        return Err(DiffError::Invalid {
            op: "mix_labels",
            detail: format!("ratios {ratios:?} are not on the simplex"),
        });
    }
    let classes = labels[0].shape().to_vec();
    let mut out = Tensor::zeros(&classes);
    for (y, &r) in labels.iter().zip(ratios) {
        if y.shape() != classes {
            return Err(DiffError::Shape {
                op: "mix_labels",
                detail: format!("label {:?} vs {:?}", y.shape(), classes),
            });
        }
        let ones = y.data().iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DiffError::Invalid {
                op: "mix_labels",
                detail: "labels must be one-hot".into(),
            });
        }
        for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *o += r * v;
        }
    }
    Ok(out)
}

/// Output of one generator run, still attached to the tape.
pub struct Generated {
    pub x_mix: Var,
    pub masks: Var,
}

/// The post-encoder pipeline: ratio embedding, projection, cross attention,
/// mask normalization and upsampling, Hadamard mixing. `features[n]` is the
/// encoder map for `images[n]`; both are tape values so gradients can flow
/// from the mix back into the projection parameters.
pub fn generate_from_features(
    tape: &mut Tape,
    features: &[Var],
    images: &[Var],
    ratios: &[f64],
    theta: &GeneratorVars,
) -> Result<Generated, DiffError> {
    let n = images.len();
    if n < 2 || features.len() != n || ratios.len() != n {
        return Err(DiffError::Invalid {
            op: "generate",
            detail: format!("{} images, {} feature maps, {} ratios", n, features.len(), ratios.len()),
        });
    }
    let rsum: f64 = ratios.iter().sum();
    if (rsum - 1.0).abs() > 1e-6 || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(DiffError::Invalid {
            op: "generate",
            detail: format!("ratios {ratios:?} are not on the simplex"),
        });
    }
    let img_shape = tape.shape_of(images[0]).to_vec();
    let target = (img_shape[1], img_shape[2]);
    let mut heads = Vec::with_capacity(n);
    for i in 0..n {
        let embedded = embed_ratio(tape, features[i], ratios[i])?;
        heads.push(qkv_project(tape, embedded, theta)?);
    }
    let feat_shape = tape.shape_of(features[0]).to_vec();
    let (h, w) = (feat_shape[1], feat_shape[2]);
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let p = cross_attention(tape, &heads, i)?;
        maps.push(tape.reshape(p, &[h, w])?);
    }
    let masks = normalize_and_upsample(tape, &maps, target)?;
    let x_mix = mix_images(tape, images, masks)?;
    Ok(Generated { x_mix, masks })
}

/// Full pipeline from raw images: encoder features are taken from the
/// (frozen) encoder view at stage `l`, so gradients reach only the
/// projection parameters.
pub fn generate(
    tape: &mut Tape,
    encoder: &BackboneVars,
    l: usize,
    images: &[Var],
    ratios: &[f64],
    theta: &GeneratorVars,
) -> Result<Generated, DiffError> {
    let mut features = Vec::with_capacity(images.len());
    for &img in images {
        let s = tape.shape_of(img).to_vec();
        if s.len() != 3 {
            return Err(DiffError::Shape {
                op: "generate",
                detail: format!("expected [C, H, W] image, got {:?}", s),
            });
        }
        let batched = tape.reshape(img, &[1, s[0], s[1], s[2]])?;
        let z = encoder_features(tape, encoder, batched, l)?;
        let zs = tape.shape_of(z).to_vec();
        features.push(tape.reshape(z, &[zs[1], zs[2], zs[3]])?);
    }
    generate_from_features(tape, &features, images, ratios, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check_many;
    use crate::model::{Classifier, ModelConfig};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
        Tensor::from_vec(
            (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            shape,
        )
        .unwrap()
    }

    fn one_hot(label: usize, classes: usize) -> Tensor {
        let mut t = Tensor::zeros(&[classes]);
        t.data_mut()[label] = 1.0;
        t
    }

    #[test]
    fn embed_ratio_layout() {
        let mut t = Tape::new();
        let mut r = rng(0);
        let z_t = random_tensor(&[64, 8, 8], &mut r);
        let z = t.leaf(z_t.clone());
        let e = embed_ratio(&mut t, z, 0.4).unwrap();
        assert_eq!(t.shape_of(e), &[65, 8, 8]);
        let data = t.value(e).data();
        assert!(data[..64].iter().all(|&v| v == 0.4));
        // stripping channel 0 recovers z exactly
        assert_eq!(&data[64..], z_t.data());

        let zero = embed_ratio(&mut t, z, 0.0).unwrap();
        assert!(t.value(zero).data()[..64].iter().all(|&v| v == 0.0));
        assert!(embed_ratio(&mut t, z, 1.2).is_err());
    }

    #[test]
    fn qkv_channel_arithmetic() {
        let mut r = rng(1);
        let theta = GeneratorParams::init(64, &mut r);
        assert_eq!(theta.query_w.shape(), &[32, 65, 1, 1]);
        assert_eq!(theta.value_w.shape(), &[1, 65, 1, 1]);
        assert_eq!(theta.feature_channels(), 64);
        let mut t = Tape::new();
        let z = t.leaf(random_tensor(&[64, 4, 2], &mut r));
        let e = embed_ratio(&mut t, z, 0.5).unwrap();
        let vars = theta.mount(&mut t, false);
        let heads = qkv_project(&mut t, e, &vars).unwrap();
        assert_eq!(t.shape_of(heads.q), &[32, 8]);
        assert_eq!(t.shape_of(heads.k), &[32, 8]);
        assert_eq!(t.shape_of(heads.v), &[8]);
    }

    #[test]
    fn unit_weight_value_projection_copies_channel() {
        let mut t = Tape::new();
        let feature = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[1, 2, 2]).unwrap();
        let z = t.leaf(feature.clone());
        let e = embed_ratio(&mut t, z, 0.9).unwrap();
        let theta = GeneratorParams {
            query_w: Tensor::zeros(&[1, 2, 1, 1]),
            query_b: Tensor::zeros(&[1]),
            key_w: Tensor::zeros(&[1, 2, 1, 1]),
            key_b: Tensor::zeros(&[1]),
            value_w: Tensor::from_vec(vec![0.0, 1.0], &[1, 2, 1, 1]).unwrap(),
            value_b: Tensor::zeros(&[1]),
        };
        let vars = theta.mount(&mut t, false);
        let heads = qkv_project(&mut t, e, &vars).unwrap();
        assert_eq!(t.value(heads.v).data(), feature.data());
        assert!(t.value(heads.q).data().iter().all(|&v| v == 0.0));
        assert!(t.value(heads.k).data().iter().all(|&v| v == 0.0));
    }

    /// Dense direct computation of the attention map, independent of the
    /// tape ops.
    fn attention_oracle(q: &[f64], ks: &[&[f64]], v: &[f64], d: usize, wh: usize) -> Vec<f64> {
        let mut scores = vec![0.0; wh * wh];
        for k in ks {
            for r in 0..wh {
                for c in 0..wh {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += q[dd * wh + r] * k[dd * wh + c];
                    }
                    scores[r * wh + c] += acc;
                }
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; wh];
        for r in 0..wh {
            let row: Vec<f64> = (0..wh).map(|c| scores[r * wh + c] * scale).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            out[r] = exps.iter().zip(v).map(|(e, vv)| e / z * vv).sum();
        }
        out
    }

    fn make_heads(
        tape: &mut Tape,
        qs: &[Tensor],
        ks: &[Tensor],
        vs: &[Tensor],
        d: usize,
        wh: usize,
    ) -> Vec<AttentionHeads> {
        qs.iter()
            .zip(ks)
            .zip(vs)
            .map(|((q, k), v)| AttentionHeads {
                q: tape.leaf(q.clone()),
                k: tape.leaf(k.clone()),
                v: tape.leaf(v.clone()),
                d,
                wh,
            })
            .collect()
    }

    #[test]
    fn zero_keys_give_mean_value() {
        let mut t = Tape::new();
        let (d, wh) = (2, 4);
        let mut r = rng(2);
        let qs = vec![random_tensor(&[d, wh], &mut r), random_tensor(&[d, wh], &mut r)];
        let ks = vec![Tensor::zeros(&[d, wh]), Tensor::zeros(&[d, wh])];
        let v0 = Tensor::from_vec(vec![1.0, 2.0, 3.0, 6.0], &[wh]).unwrap();
        let vs = vec![v0.clone(), random_tensor(&[wh], &mut r)];
        let heads = make_heads(&mut t, &qs, &ks, &vs, d, wh);
        let p = cross_attention(&mut t, &heads, 0).unwrap();
        let mean = v0.data().iter().sum::<f64>() / wh as f64;
        for &x in t.value(p).data() {
            assert!((x - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_score_shift_leaves_attention_unchanged() {
        // All-ones single-channel queries make every score row equal to k2,
        // so shifting k2 by a constant shifts every score equally.
        let wh = 4;
        let mut t = Tape::new();
        let q = Tensor::full(&[1, wh], 1.0);
        let k2 = Tensor::from_vec(vec![0.3, -0.7, 1.1, 0.2], &[1, wh]).unwrap();
        let k2_shift =
            Tensor::from_vec(k2.data().iter().map(|v| v + 5.0).collect(), &[1, wh]).unwrap();
        let v = Tensor::from_vec(vec![0.5, 1.5, -1.0, 2.0], &[wh]).unwrap();
        let filler = Tensor::zeros(&[1, wh]);
        let heads_a = make_heads(
            &mut t,
            &[q.clone(), filler.clone()],
            &[filler.clone(), k2],
            &[v.clone(), v.clone()],
            1,
            wh,
        );
        let pa = cross_attention(&mut t, &heads_a, 0).unwrap();
        let heads_b =
            make_heads(&mut t, &[q, filler.clone()], &[filler, k2_shift], &[v.clone(), v], 1, wh);
        let pb = cross_attention(&mut t, &heads_b, 0).unwrap();
        let diff = t.value(pa).max_abs_diff(t.value(pb));
        assert!(diff < 1e-9, "shift changed attention by {diff}");
    }

    #[test]
    fn dense_oracle_matches_two_image_attention() {
        let (d, wh) = (3, 4);
        let mut r = rng(3);
        let qs = vec![random_tensor(&[d, wh], &mut r), random_tensor(&[d, wh], &mut r)];
        let ks = vec![random_tensor(&[d, wh], &mut r), random_tensor(&[d, wh], &mut r)];
        let vs = vec![random_tensor(&[wh], &mut r), random_tensor(&[wh], &mut r)];
        let mut t = Tape::new();
        let heads = make_heads(&mut t, &qs, &ks, &vs, d, wh);
        for n in 0..2 {
            let p = cross_attention(&mut t, &heads, n).unwrap();
            let other = 1 - n;
            let expect = attention_oracle(qs[n].data(), &[ks[other].data()], vs[n].data(), d, wh);
            for (got, want) in t.value(p).data().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_image_attention_rejected() {
        let mut t = Tape::new();
        let q = random_tensor(&[1, 4], &mut rng(4));
        let heads = make_heads(&mut t, std::slice::from_ref(&q), std::slice::from_ref(&q), &[Tensor::zeros(&[4])], 1, 4);
        assert!(cross_attention(&mut t, &heads, 0).is_err());
    }

    #[test]
    fn identical_maps_normalize_to_uniform() {
        let mut t = Tape::new();
        let m = t.leaf(random_tensor(&[2, 2], &mut rng(5)));
        let masks = normalize_and_upsample(&mut t, &[m, m, m], (8, 8)).unwrap();
        assert!(t.value(masks).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn quarter_three_quarter_split() {
        let mut t = Tape::new();
        let zeros = t.leaf(Tensor::zeros(&[2, 2]));
        let ln3 = t.leaf(Tensor::full(&[2, 2], 3.0f64.ln()));
        let masks = normalize_and_upsample(&mut t, &[zeros, ln3], (4, 4)).unwrap();
        let data = t.value(masks).data();
        for i in 0..16 {
            assert!((data[i] - 0.25).abs() < 1e-12);
            assert!((data[16 + i] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn random_masks_partition_unity() {
        let mut r = rng(6);
        for _ in 0..20 {
            let mut t = Tape::new();
            let maps: Vec<Var> = (0..3).map(|_| t.leaf(random_tensor(&[3, 3], &mut r))).collect();
            let masks = normalize_and_upsample(&mut t, &maps, (7, 5)).unwrap();
            PolicyMasks::new(t.value(masks).clone()).unwrap();
        }
    }

    #[test]
    fn mixing_identical_images_is_identity() {
        let mut t = Tape::new();
        let mut r = rng(7);
        let img_t =
            Tensor::from_vec((0..12).map(|_| r.gen_range(0.0..1.0)).collect(), &[3, 2, 2]).unwrap();
        let img = t.leaf(img_t.clone());
        let maps: Vec<Var> = (0..2).map(|_| t.leaf(random_tensor(&[2, 2], &mut r))).collect();
        let masks = normalize_and_upsample(&mut t, &maps, (2, 2)).unwrap();
        let mixed = mix_images(&mut t, &[img, img], masks).unwrap();
        assert!(t.value(mixed).max_abs_diff(&img_t) < 1e-12);
    }

    #[test]
    fn degenerate_mask_selects_one_source() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[1, 2, 2], 0.2));
        let b = t.leaf(Tensor::full(&[1, 2, 2], 0.9));
        let stack =
            Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[2, 2, 2]).unwrap();
        let masks = t.leaf(stack);
        let mixed = mix_images(&mut t, &[a, b], masks).unwrap();
        assert!(t.value(mixed).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn mix_matches_elementwise_oracle_and_stays_in_range() {
        let mut r = rng(8);
        let mut t = Tape::new();
        let imgs_t: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::from_vec((0..16).map(|_| r.gen_range(0.0..1.0)).collect(), &[1, 4, 4])
                    .unwrap()
            })
            .collect();
        let imgs: Vec<Var> = imgs_t.iter().map(|i| t.leaf(i.clone())).collect();
        let maps: Vec<Var> = (0..3).map(|_| t.leaf(random_tensor(&[4, 4], &mut r))).collect();
        let masks = normalize_and_upsample(&mut t, &maps, (4, 4)).unwrap();
        let mixed = mix_images(&mut t, &imgs, masks).unwrap();
        let mask_t = t.value(masks).clone();
        let mixed_t = t.value(mixed).clone();
        for p in 0..16 {
            let expect: f64 = (0..3).map(|n| imgs_t[n].data()[p] * mask_t.data()[n * 16 + p]).sum();
            assert!((mixed_t.data()[p] - expect).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&mixed_t.data()[p]));
        }
    }

    #[test]
    fn invalid_masks_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[1, 2, 2]));
        let bad = t.leaf(Tensor::full(&[2, 2, 2], 0.9));
        assert!(mix_images(&mut t, &[a, a], bad).is_err());
    }

    #[test]
    fn label_mixing_arithmetic() {
        let m = mix_labels(&[one_hot(0, 4), one_hot(1, 4)], &[0.6, 0.4]).unwrap();
        assert_eq!(m.data(), &[0.6, 0.4, 0.0, 0.0]);

        let same = mix_labels(&[one_hot(0, 4), one_hot(0, 4)], &[0.3, 0.7]).unwrap();
        assert_eq!(same.data(), &[1.0, 0.0, 0.0, 0.0]);

        let third = 1.0 / 3.0;
        let m3 = mix_labels(&[one_hot(0, 4), one_hot(0, 4), one_hot(2, 4)], &[third; 3]).unwrap();
        assert!((m3.data()[0] - 2.0 * third).abs() < 1e-12);
        assert!((m3.data()[2] - third).abs() < 1e-12);
        assert_eq!(m3.data()[1], 0.0);
        assert!((m3.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);

        assert!(mix_labels(&[one_hot(0, 4)], &[0.4]).is_err());
        let soft = Tensor::from_vec(vec![0.5, 0.5, 0.0, 0.0], &[4]).unwrap();
        assert!(mix_labels(&[soft, one_hot(1, 4)], &[0.5, 0.5]).is_err());
    }

    fn tiny_encoder(seed: u64) -> (Classifier, crate::model::ArchDescriptor) {
        let d = ModelConfig { widths: vec![2, 2, 3, 3], blocks_per_stage: 1, feature_stage: 3 }
            .validate(1, 8, 8, 2)
            .unwrap();
        let cls = Classifier::init(d.clone(), &mut rng(seed));
        (cls, d)
    }

    #[test]
    fn generate_on_identical_images_returns_the_image() {
        let (cls, d) = tiny_encoder(9);
        let enc = cls.encoder_prefix(3).unwrap();
        let theta = GeneratorParams::init(d.stage_shape(3).0, &mut rng(10));
        let mut t = Tape::new();
        let img_t =
            Tensor::from_vec((0..64).map(|i| (i % 7) as f64 / 7.0).collect(), &[1, 8, 8]).unwrap();
        let img = t.leaf(img_t.clone());
        let enc_vars = enc.mount(&mut t, false);
        let theta_vars = theta.mount(&mut t, false);
        let g =
            generate(&mut t, &enc_vars, 3, &[img, img, img], &[0.2, 0.3, 0.5], &theta_vars).unwrap();
        assert!(t.value(g.x_mix).max_abs_diff(&img_t) < 1e-9);
    }

    #[test]
    fn generated_pixels_stay_within_source_envelope() {
        let (cls, d) = tiny_encoder(12);
        let enc = cls.encoder_prefix(3).unwrap();
        let theta = GeneratorParams::init(d.stage_shape(3).0, &mut rng(13));
        let mut r = rng(14);
        for trial in 0..50 {
            let n = 2 + trial % 4;
            let mut t = Tape::new();
            let imgs_t: Vec<Tensor> = (0..n)
                .map(|_| {
                    Tensor::from_vec((0..64).map(|_| r.gen_range(0.0..1.0)).collect(), &[1, 8, 8])
                        .unwrap()
                })
                .collect();
            let imgs: Vec<Var> = imgs_t.iter().map(|i| t.leaf(i.clone())).collect();
            let ratios = if trial == 0 {
                vec![1.0, 0.0]
            } else {
                crate::data::sample_mix_ratios(n, 1.0, &mut r).unwrap()
            };
            let enc_vars = enc.mount(&mut t, false);
            let theta_vars = theta.mount(&mut t, false);
            let g = generate(&mut t, &enc_vars, 3, &imgs, &ratios, &theta_vars).unwrap();
            let mixed = t.value(g.x_mix);
            for p in 0..64 {
                let lo = imgs_t.iter().map(|i| i.data()[p]).fold(f64::INFINITY, f64::min);
                let hi = imgs_t.iter().map(|i| i.data()[p]).fold(f64::NEG_INFINITY, f64::max);
                assert!(mixed.data()[p] >= lo - 1e-6 && mixed.data()[p] <= hi + 1e-6);
            }
            PolicyMasks::new(t.value(g.masks).clone()).unwrap();
        }
    }

    #[test]
    fn permuting_sources_permutes_masks_and_preserves_mix() {
        let (cls, d) = tiny_encoder(15);
        let enc = cls.encoder_prefix(3).unwrap();
        let theta = GeneratorParams::init(d.stage_shape(3).0, &mut rng(16));
        let mut r = rng(17);
        let imgs_t: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::from_vec((0..64).map(|_| r.gen_range(0.0..1.0)).collect(), &[1, 8, 8])
                    .unwrap()
            })
            .collect();
        let ratios = [0.5, 0.2, 0.3];
        let perm = [2usize, 0, 1];

        let run = |order: &[usize]| {
            let mut t = Tape::new();
            let imgs: Vec<Var> = order.iter().map(|&i| t.leaf(imgs_t[i].clone())).collect();
            let rats: Vec<f64> = order.iter().map(|&i| ratios[i]).collect();
            let enc_vars = enc.mount(&mut t, false);
            let theta_vars = theta.mount(&mut t, false);
            let g = generate(&mut t, &enc_vars, 3, &imgs, &rats, &theta_vars).unwrap();
            (t.value(g.x_mix).clone(), t.value(g.masks).clone())
        };

        let (mix_a, masks_a) = run(&[0, 1, 2]);
        let (mix_b, masks_b) = run(&perm);
        assert!(mix_a.max_abs_diff(&mix_b) < 1e-6);
        let hw = 64;
        for (slot, &src) in perm.iter().enumerate() {
            for p in 0..hw {
                let a = masks_a.data()[src * hw + p];
                let b = masks_b.data()[slot * hw + p];
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_parameters_serve_any_set_size() {
        let (cls, d) = tiny_encoder(18);
        let enc = cls.encoder_prefix(3).unwrap();
        let theta = GeneratorParams::init(d.stage_shape(3).0, &mut rng(19));
        let mut r = rng(20);
        for n in 2..=5 {
            let mut t = Tape::new();
            let imgs: Vec<Var> = (0..n)
                .map(|_| {
                    let img = Tensor::from_vec(
                        (0..64).map(|_| r.gen_range(0.0..1.0)).collect(),
                        &[1, 8, 8],
                    )
                    .unwrap();
                    t.leaf(img)
                })
                .collect();
            let ratios = crate::data::sample_mix_ratios(n, 1.0, &mut r).unwrap();
            let enc_vars = enc.mount(&mut t, false);
            let theta_vars = theta.mount(&mut t, false);
            let g = generate(&mut t, &enc_vars, 3, &imgs, &ratios, &theta_vars).unwrap();
            PolicyMasks::new(t.value(g.masks).clone()).unwrap();
        }
    }

    #[test]
    fn mean_mix_gradient_matches_finite_differences() {
        let (cls, d) = tiny_encoder(21);
        let enc = cls.encoder_prefix(3).unwrap();
        let theta = GeneratorParams::init(d.stage_shape(3).0, &mut rng(22));
        let mut r = rng(23);
        let imgs_t: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::from_vec((0..64).map(|_| r.gen_range(0.0..1.0)).collect(), &[1, 8, 8])
                    .unwrap()
            })
            .collect();
        let ratios = [0.35, 0.65];
        let inputs: Vec<Tensor> = theta.params().into_iter().cloned().collect();
        let err = grad_check_many(
            |t, vars| {
                let theta_vars = GeneratorVars {
                    query_w: vars[0],
                    query_b: vars[1],
                    key_w: vars[2],
                    key_b: vars[3],
                    value_w: vars[4],
                    value_b: vars[5],
                };
                let imgs: Vec<Var> = imgs_t.iter().map(|i| t.leaf(i.clone())).collect();
                let enc_vars = enc.mount(t, false);
                let g = generate(t, &enc_vars, 3, &imgs, &ratios, &theta_vars)?;
                t.mean(g.x_mix)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
