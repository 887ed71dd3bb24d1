//! Builders and forward passes for the classification and segmentation
//! networks, classification-to-segmentation weight transfer, and mask
//! prediction.
//!
//! Both networks share an encoder prefix: the boundary convolution and the
//! conv pairs of blocks 1-4 (the shared code path below makes the reuse
//! structural, not incidental). The classifier adds pool4, block 5, the
//! flattening convolution and two dense layers; the segmenter branches at
//! block4_conv2 into three deconvolution blocks with skip concatenations, a
//! boundary deconvolution, and a 1x1 head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Phase, TensorId};
use crate::error::{Error, Result};
use crate::lidar::{DayRecord, Grid, MaskGrid};
use crate::nn::{seeded_rng, LayerParams, ModelParams};
use crate::preprocess::{self, ScaleConfig};
use crate::tensor::Tensor;

/// Output width of the flattening convolution.
pub const FLAT_CHANNELS: usize = 512;
/// Hidden width of the first dense layer.
pub const DENSE_HIDDEN: usize = 256;
/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.9;

/// Layers common to both networks, in order.
pub const SHARED_LAYERS: [&str; 9] = [
    "boundary_conv",
    "block1_conv1",
    "block1_conv2",
    "block2_conv1",
    "block2_conv2",
    "block3_conv1",
    "block3_conv2",
    "block4_conv1",
    "block4_conv2",
];

#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: ScaleConfig,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub cfg: ScaleConfig,
    pub params: ModelParams,
}

/// Result of one forward pass over a (N, H_day, Wq, 2) batch.
pub struct ForwardPass {
    /// Logits: (N, 2) for the classifier, (N, H_day, Wq, 2) for the segmenter.
    pub output: TensorId,
    /// Flat parameter name -> graph leaf, for gradient extraction. Empty in
    /// inference mode.
    pub binding: Vec<(String, TensorId)>,
    /// Named per-sample shapes at every architectural point.
    pub shapes: Vec<(String, Vec<usize>)>,
}

fn shared_encoder_names(cfg: &ScaleConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = cfg.base_channels;
    let (h0, wq) = (cfg.h0(), cfg.quarter_width);
    let mut out = vec![
        ("input".to_string(), vec![cfg.h_day, wq, 2]),
        ("boundary_conv".to_string(), vec![h0, wq, 2]),
    ];
    let mut h = h0;
    let mut w = wq;
    for i in 1..=4 {
        let c = c0 << (i - 1);
        out.push((format!("block{i}_conv1"), vec![h, w, c]));
        out.push((format!("block{i}_conv2"), vec![h, w, c]));
        if i < 4 {
            h /= 2;
            w /= 2;
            out.push((format!("pool{i}"), vec![h, w, c]));
        }
    }
    out
}

/// Per-sample shapes at every named point of the classifier.
pub fn classifier_shape_trace(cfg: &ScaleConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = cfg.base_channels;
    let (h0, wq) = (cfg.h0(), cfg.quarter_width);
    let mut out = shared_encoder_names(cfg);
    let (h4, w4) = (h0 / 8, wq / 8);
    out.push(("pool4".to_string(), vec![h4 / 2, w4 / 2, 8 * c0]));
    out.push(("block5_conv1".to_string(), vec![h4 / 2, w4 / 2, 16 * c0]));
    out.push(("block5_conv2".to_string(), vec![h4 / 2, w4 / 2, 16 * c0]));
    out.push(("pool5".to_string(), vec![h0 / 32, wq / 32, 16 * c0]));
    out.push(("flatten_conv".to_string(), vec![1, 1, FLAT_CHANNELS]));
    out.push(("dense1".to_string(), vec![DENSE_HIDDEN]));
    out.push(("dense2".to_string(), vec![2]));
    out
}

/// Per-sample shapes at every named point of the segmenter.
pub fn segmenter_shape_trace(cfg: &ScaleConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = cfg.base_channels;
    let (h0, wq) = (cfg.h0(), cfg.quarter_width);
    let mut out = shared_encoder_names(cfg);
    for step in 1..=3usize {
        let c = c0 << (3 - step);
        let h = h0 >> (3 - step);
        let w = wq >> (3 - step);
        out.push((format!("deconv{step}"), vec![h, w, c]));
        out.push((format!("up{step}_conv1"), vec![h, w, c]));
        out.push((format!("up{step}_conv2"), vec![h, w, c]));
    }
    out.push(("boundary_deconv".to_string(), vec![cfg.h_day, wq, c0]));
    out.push(("head_conv".to_string(), vec![cfg.h_day, wq, 2]));
    out
}

pub fn build_classifier(cfg: &ScaleConfig, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    let c0 = cfg.base_channels;
    let mut rng = seeded_rng(seed);
    let mut p = ModelParams::new();
    p.insert("boundary_conv", LayerParams::conv(cfg.margin + 1, 1, 2, 2, &mut rng));
    let mut cin = 2;
    for i in 1..=5 {
        let cout = c0 << (i - 1);
        p.insert(format!("block{i}_conv1"), LayerParams::conv(3, 3, cin, cout, &mut rng));
        p.insert(format!("block{i}_conv2"), LayerParams::conv(3, 3, cout, cout, &mut rng));
        cin = cout;
    }
    let (fh, fw) = cfg.flatten_kernel();
    p.insert("flatten_conv", LayerParams::conv(fh, fw, 16 * c0, FLAT_CHANNELS, &mut rng));
    p.insert("dense1", LayerParams::dense(FLAT_CHANNELS, DENSE_HIDDEN, true, &mut rng));
    p.insert("dense2", LayerParams::dense(DENSE_HIDDEN, 2, false, &mut rng));
    Ok(Classifier { cfg: cfg.clone(), params: p })
}

pub fn build_segmenter(cfg: &ScaleConfig, seed: u64) -> Result<Segmenter> {
    cfg.validate()?;
    let c0 = cfg.base_channels;
    let mut rng = seeded_rng(seed);
    let mut p = ModelParams::new();
    p.insert("boundary_conv", LayerParams::conv(cfg.margin + 1, 1, 2, 2, &mut rng));
    let mut cin = 2;
    for i in 1..=4 {
        let cout = c0 << (i - 1);
        p.insert(format!("block{i}_conv1"), LayerParams::conv(3, 3, cin, cout, &mut rng));
        p.insert(format!("block{i}_conv2"), LayerParams::conv(3, 3, cout, cout, &mut rng));
        cin = cout;
    }
    for step in 1..=3usize {
        let cout = c0 << (3 - step);
        let cin_d = cout * 2;
        p.insert(format!("deconv{step}"), LayerParams::deconv(2, 2, cout, cin_d, &mut rng));
        p.insert(format!("up{step}_conv1"), LayerParams::conv(3, 3, cin_d, cout, &mut rng));
        p.insert(format!("up{step}_conv2"), LayerParams::conv(3, 3, cout, cout, &mut rng));
    }
    p.insert(
        "boundary_deconv",
        LayerParams::deconv(cfg.margin + 1, 1, c0, c0, &mut rng).with_bn(c0),
    );
    p.insert("head_conv", LayerParams::conv(1, 1, c0, 2, &mut rng));
    Ok(Segmenter { cfg: cfg.clone(), params: p })
}

// ── forward machinery ──────────────────────────────────────────────────────

struct Build<'g, 'p> {
    g: &'g mut Graph,
    params: &'p ModelParams,
    phase: Phase,
    dropout: f64,
    binding: Vec<(String, TensorId)>,
    shapes: Vec<(String, Vec<usize>)>,
    /// Updated running statistics to fold back after a training pass.
    bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'g, 'p> Build<'g, 'p> {
    fn new(g: &'g mut Graph, params: &'p ModelParams, phase: Phase, dropout: f64) -> Self {
        Build {
            g,
            params,
            phase,
            dropout,
            binding: Vec::new(),
            shapes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    fn train(&self) -> bool {
        self.phase == Phase::Train
    }

    fn record(&mut self, name: &str, id: TensorId) {
        let s = self.g.shape(id);
        self.shapes.push((name.to_string(), s[1..].to_vec()));
    }

    fn stage(&mut self, name: &str) -> Result<(TensorId, TensorId, &'p LayerParams)> {
        let layer = self.params.get(name)?;
        let k = self.g.leaf(layer.kernel.clone(), self.train())?;
        let b = self.g.leaf(layer.bias.clone(), self.train())?;
        if self.train() {
            self.binding.push((format!("{name}.kernel"), k));
            self.binding.push((format!("{name}.bias"), b));
        }
        Ok((k, b, layer))
    }

    fn conv(&mut self, name: &str, x: TensorId, padding: Padding) -> Result<TensorId> {
        let (k, b, _) = self.stage(name)?;
        let out = self.g.conv2d(x, k, b, padding)?;
        self.record(name, out);
        Ok(out)
    }

    fn conv_relu(&mut self, name: &str, x: TensorId, padding: Padding) -> Result<TensorId> {
        let (k, b, _) = self.stage(name)?;
        let out = self.g.conv2d(x, k, b, padding)?;
        let out = self.g.relu(out)?;
        self.record(name, out);
        Ok(out)
    }

    fn deconv(&mut self, name: &str, x: TensorId, stride: usize) -> Result<TensorId> {
        let (k, b, _) = self.stage(name)?;
        let out = self.g.deconv2d(x, k, b, stride)?;
        self.record(name, out);
        Ok(out)
    }

    fn pool_dropout(&mut self, idx: usize, x: TensorId, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        let pooled = self.g.maxpool2(x)?;
        self.record(&format!("pool{idx}"), pooled);
        self.g.dropout(pooled, self.dropout, self.phase, rng)
    }

    /// Batch norm against the layer's stored statistics. In train mode the
    /// updated running stats are collected for the caller to fold back.
    fn batchnorm(&mut self, name: &str, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let layer = self.params.get(name)?;
        let bn = layer
            .bn
            .as_ref()
            .ok_or_else(|| Error::Config(format!("layer '{name}' has no batch norm")))?;
        let mut rm = bn.running_mean.data().to_vec();
        let mut rv = bn.running_var.data().to_vec();
        let out = self
            .g
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, self.phase, BN_MOMENTUM)?;
        if self.train() {
            self.bn_updates.push((name.to_string(), rm, rv));
        }
        Ok(out)
    }

    fn stage_bn(&mut self, name: &str) -> Result<(TensorId, TensorId)> {
        let layer = self.params.get(name)?;
        let bn = layer
            .bn
            .as_ref()
            .ok_or_else(|| Error::Config(format!("layer '{name}' has no batch norm")))?;
        let gamma = self.g.leaf(bn.gamma.clone(), self.train())?;
        let beta = self.g.leaf(bn.beta.clone(), self.train())?;
        if self.train() {
            self.binding.push((format!("{name}.bn_gamma"), gamma));
            self.binding.push((format!("{name}.bn_beta"), beta));
        }
        Ok((gamma, beta))
    }
}

struct EncoderOut {
    /// block4_conv2 activation (the branch point).
    out: TensorId,
    /// blockX_conv2 activations for X = 1, 2, 3 (skip connections).
    skips: [TensorId; 3],
}

/// Boundary conv plus blocks 1-4 conv pairs; pooling and dropout after
/// blocks 1-3 only. This is the prefix both networks share.
fn shared_encoder(b: &mut Build, x: TensorId, rng: &mut ChaCha8Rng) -> Result<EncoderOut> {
    b.record("input", x);
    let mut h = b.conv("boundary_conv", x, Padding::Valid)?;
    let mut skips = [x; 3];
    for i in 1..=4 {
        h = b.conv_relu(&format!("block{i}_conv1"), h, Padding::Same)?;
        h = b.conv_relu(&format!("block{i}_conv2"), h, Padding::Same)?;
        if i < 4 {
            skips[i - 1] = h;
            h = b.pool_dropout(i, h, rng)?;
        }
    }
    Ok(EncoderOut { out: h, skips })
}

fn check_input(g: &Graph, x: TensorId, cfg: &ScaleConfig) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != cfg.h_day || s[2] != cfg.quarter_width || s[3] != 2 {
        return Err(Error::dim(
            "model_forward",
            format!(
                "expected (N, {}, {}, 2) input, got {s:?}",
                cfg.h_day, cfg.quarter_width
            ),
        ));
    }
    Ok(())
}

fn classifier_forward(
    g: &mut Graph,
    cfg: &ScaleConfig,
    params: &ModelParams,
    x: TensorId,
    phase: Phase,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardPass, Vec<(String, Vec<f64>, Vec<f64>)>)> {
    check_input(g, x, cfg)?;
    let n = g.shape(x)[0];
    let mut b = Build::new(g, params, phase, dropout);
    let enc = shared_encoder(&mut b, x, rng)?;
    let mut h = b.pool_dropout(4, enc.out, rng)?;
    h = b.conv_relu("block5_conv1", h, Padding::Same)?;
    h = b.conv_relu("block5_conv2", h, Padding::Same)?;
    h = b.pool_dropout(5, h, rng)?;
    let (k, bias, _) = b.stage("flatten_conv")?;
    h = b.g.conv2d(h, k, bias, Padding::Valid)?;
    h = b.g.relu(h)?;
    b.record("flatten_conv", h);
    h = b.g.dropout(h, dropout, phase, rng)?;
    h = b.g.reshape(h, vec![n, FLAT_CHANNELS])?;
    let (k1, b1, _) = b.stage("dense1")?;
    h = b.g.dense(h, k1, b1)?;
    let (gamma, beta) = b.stage_bn("dense1")?;
    h = b.batchnorm("dense1", h, gamma, beta)?;
    h = b.g.relu(h)?;
    b.record("dense1", h);
    let (k2, b2, _) = b.stage("dense2")?;
    let logits = b.g.dense(h, k2, b2)?;
    b.record("dense2", logits);
    Ok((
        ForwardPass {
            output: logits,
            binding: b.binding,
            shapes: b.shapes,
        },
        b.bn_updates,
    ))
}

fn segmenter_forward(
    g: &mut Graph,
    cfg: &ScaleConfig,
    params: &ModelParams,
    x: TensorId,
    phase: Phase,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardPass, Vec<(String, Vec<f64>, Vec<f64>)>)> {
    check_input(g, x, cfg)?;
    let mut b = Build::new(g, params, phase, dropout);
    let enc = shared_encoder(&mut b, x, rng)?;
    let mut h = enc.out;
    for step in 1..=3usize {
        h = b.deconv(&format!("deconv{step}"), h, 2)?;
        let skip = enc.skips[3 - step];
        h = b.g.concat_last(h, skip)?;
        h = b.conv_relu(&format!("up{step}_conv1"), h, Padding::Same)?;
        h = b.conv_relu(&format!("up{step}_conv2"), h, Padding::Same)?;
    }
    let (k, bias, _) = b.stage("boundary_deconv")?;
    h = b.g.deconv2d(h, k, bias, 1)?;
    let (gamma, beta) = b.stage_bn("boundary_deconv")?;
    h = b.batchnorm("boundary_deconv", h, gamma, beta)?;
    h = b.g.relu(h)?;
    b.record("boundary_deconv", h);
    let logits = b.conv("head_conv", h, Padding::Valid)?;
    Ok((
        ForwardPass {
            output: logits,
            binding: b.binding,
            shapes: b.shapes,
        },
        b.bn_updates,
    ))
}

fn apply_bn_updates(params: &mut ModelParams, updates: Vec<(String, Vec<f64>, Vec<f64>)>) {
    for (name, rm, rv) in updates {
        let layer = params.get_mut(&name).expect("bn layer exists");
        let bn = layer.bn.as_mut().expect("bn present");
        bn.running_mean.data_mut().copy_from_slice(&rm);
        bn.running_var.data_mut().copy_from_slice(&rv);
    }
}

impl Classifier {
    /// Training pass: parameters become requires_grad leaves, dropout is
    /// live, and running statistics are updated in place.
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let (pass, updates) =
            classifier_forward(g, &self.cfg, &self.params, x, Phase::Train, dropout, rng)?;
        apply_bn_updates(&mut self.params, updates);
        Ok(pass)
    }

    /// Deterministic inference pass (dropout off, running statistics).
    pub fn forward_infer(&self, g: &mut Graph, x: TensorId) -> Result<ForwardPass> {
        let mut rng = seeded_rng(0);
        let (pass, _) =
            classifier_forward(g, &self.cfg, &self.params, x, Phase::Infer, 0.0, &mut rng)?;
        Ok(pass)
    }

    /// Inference through the shared encoder only (boundary conv .. block4_conv2).
    pub fn forward_encoder_infer(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        check_input(g, x, &self.cfg)?;
        let mut rng = seeded_rng(0);
        let mut b = Build::new(g, &self.params, Phase::Infer, 0.0);
        let enc = shared_encoder(&mut b, x, &mut rng)?;
        Ok(enc.out)
    }
}

impl Segmenter {
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let (pass, updates) =
            segmenter_forward(g, &self.cfg, &self.params, x, Phase::Train, dropout, rng)?;
        apply_bn_updates(&mut self.params, updates);
        Ok(pass)
    }

    pub fn forward_infer(&self, g: &mut Graph, x: TensorId) -> Result<ForwardPass> {
        let mut rng = seeded_rng(0);
        let (pass, _) =
            segmenter_forward(g, &self.cfg, &self.params, x, Phase::Infer, 0.0, &mut rng)?;
        Ok(pass)
    }

    pub fn forward_encoder_infer(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        check_input(g, x, &self.cfg)?;
        let mut rng = seeded_rng(0);
        let mut b = Build::new(g, &self.params, Phase::Infer, 0.0);
        let enc = shared_encoder(&mut b, x, &mut rng)?;
        Ok(enc.out)
    }
}

/// Copies the shared encoder weights (boundary conv and blocks 1-4) from a
/// trained classifier into a segmenter, leaving the decoder untouched.
pub fn transfer_weights(classifier: &Classifier, segmenter: &mut Segmenter) -> Result<()> {
    for name in SHARED_LAYERS {
        let src = classifier.params.get(name).map_err(|_| Error::Transfer {
            layer: name.to_string(),
            detail: "missing in classifier".into(),
        })?;
        let dst = segmenter.params.get_mut(name).map_err(|_| Error::Transfer {
            layer: name.to_string(),
            detail: "missing in segmenter".into(),
        })?;
        if src.kernel.shape() != dst.kernel.shape() || src.bias.shape() != dst.bias.shape() {
            return Err(Error::Transfer {
                layer: name.to_string(),
                detail: format!(
                    "shape mismatch: {:?} vs {:?}",
                    src.kernel.shape(),
                    dst.kernel.shape()
                ),
            });
        }
        dst.kernel = src.kernel.clone();
        dst.bias = src.bias.clone();
    }
    Ok(())
}

/// Segments one preprocessed quarter image (H_day, Wq, 2). A pixel is cloud
/// when its cloud-channel probability is at least 0.5.
pub fn predict_mask(segmenter: &Segmenter, image: &Tensor) -> Result<MaskGrid> {
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "predict_mask input contains NaN/Inf; preprocess it first".into(),
        ));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("predict_mask", format!("expected (H, W, 2), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut g = Graph::new();
    let batched = image.reshaped(vec![1, h, w, s[2]])?;
    let x = g.leaf(batched, false)?;
    let pass = segmenter.forward_infer(&mut g, x)?;
    let probs = g.softmax(pass.output, 3)?;
    let pd = g.value(probs).data();
    let mut mask = Grid::filled(h, w, 0u8);
    for hi in 0..h {
        for wi in 0..w {
            let cloud_p = pd[(hi * w + wi) * 2 + 1];
            if cloud_p >= 0.5 {
                mask.set(hi, wi, 1);
            }
        }
    }
    Ok(mask)
}

/// Segments a whole day: the four quarters are predicted independently and
/// stitched; bins covered by two quarters take the logical OR.
pub fn predict_day(segmenter: &Segmenter, day: &DayRecord) -> Result<MaskGrid> {
    let cfg = &segmenter.cfg;
    let (h, w) = day.dims();
    if h != cfg.h_day || w != cfg.w_day {
        return Err(Error::dim(
            "predict_day",
            format!("day {h}x{w} does not match scale {}x{}", cfg.h_day, cfg.w_day),
        ));
    }
    let (bs, ldr) = preprocess::preprocess_day(day)?;
    let mut out = Grid::filled(h, w, 0u8);
    for &offset in &cfg.offsets {
        let mut img = vec![0.0; h * cfg.quarter_width * 2];
        for hi in 0..h {
            for wi in 0..cfg.quarter_width {
                img[(hi * cfg.quarter_width + wi) * 2] = bs.data()[hi * w + offset + wi];
                img[(hi * cfg.quarter_width + wi) * 2 + 1] = ldr.data()[hi * w + offset + wi];
            }
        }
        let image = Tensor::new(vec![h, cfg.quarter_width, 2], img)?;
        let quarter_mask = predict_mask(segmenter, &image)?;
        for hi in 0..h {
            for wi in 0..cfg.quarter_width {
                if quarter_mask.get(hi, wi) == 1 {
                    out.set(hi, offset + wi, 1);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(cfg: &ScaleConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let len = n * cfg.h_day * cfg.quarter_width * 2;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, cfg.h_day, cfg.quarter_width, 2], data).unwrap()
    }

    fn forward_shapes(cfg: &ScaleConfig) -> (Vec<(String, Vec<usize>)>, Vec<(String, Vec<usize>)>) {
        let cls = build_classifier(cfg, 1).unwrap();
        let seg = build_segmenter(cfg, 2).unwrap();
        let x = random_batch(cfg, 1, 3);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false).unwrap();
        let cpass = cls.forward_infer(&mut g, xid).unwrap();
        let mut g2 = Graph::new();
        let xid2 = g2.leaf(x, false).unwrap();
        let spass = seg.forward_infer(&mut g2, xid2).unwrap();
        (cpass.shapes, spass.shapes)
    }

    #[test]
    fn desk_forward_matches_shape_trace() {
        let cfg = ScaleConfig::desk();
        let (cshapes, sshapes) = forward_shapes(&cfg);
        assert_eq!(cshapes, classifier_shape_trace(&cfg));
        assert_eq!(sshapes, segmenter_shape_trace(&cfg));
    }

    #[test]
    fn desk_trace_landmarks() {
        let cfg = ScaleConfig::desk();
        let trace = classifier_shape_trace(&cfg);
        let get = |n: &str| trace.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(get("input"), vec![67, 96, 2]);
        assert_eq!(get("boundary_conv"), vec![64, 96, 2]);
        assert_eq!(get("pool5"), vec![2, 3, 64]);
        assert_eq!(get("flatten_conv"), vec![1, 1, 512]);
        assert_eq!(get("dense2"), vec![2]);
        let strace = segmenter_shape_trace(&cfg);
        let sget = |n: &str| strace.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(sget("block4_conv2"), vec![8, 12, 32]);
        assert_eq!(sget("head_conv"), vec![67, 96, 2]);
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let cfg = ScaleConfig::desk();
        let cls = build_classifier(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(random_batch(&cfg, 3, 5), false).unwrap();
        let pass = cls.forward_infer(&mut g, x).unwrap();
        let probs = g.softmax(pass.output, 1).unwrap();
        for row in g.value(probs).data().chunks_exact(2) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn segmenter_pixel_probabilities_sum_to_one() {
        let cfg = ScaleConfig::desk();
        let seg = build_segmenter(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(random_batch(&cfg, 1, 5), false).unwrap();
        let pass = seg.forward_infer(&mut g, x).unwrap();
        let probs = g.softmax(pass.output, 3).unwrap();
        for row in g.value(probs).data().chunks_exact(2) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn parameter_names_intersect_exactly_on_shared_prefix() {
        let cfg = ScaleConfig::desk();
        let cls = build_classifier(&cfg, 1).unwrap();
        let seg = build_segmenter(&cfg, 2).unwrap();
        let cnames: std::collections::BTreeSet<_> = cls.params.names().collect();
        let snames: std::collections::BTreeSet<_> = seg.params.names().collect();
        let shared: std::collections::BTreeSet<_> =
            cnames.intersection(&snames).copied().collect();
        let expected: std::collections::BTreeSet<_> = SHARED_LAYERS.into_iter().collect();
        assert_eq!(shared, expected);
    }

    #[test]
    fn transfer_copies_shared_and_leaves_decoder() {
        let cfg = ScaleConfig::desk();
        let cls = build_classifier(&cfg, 10).unwrap();
        let mut seg = build_segmenter(&cfg, 20).unwrap();
        let decoder_before = seg.params.get("deconv1").unwrap().kernel.clone();
        transfer_weights(&cls, &mut seg).unwrap();
        for name in SHARED_LAYERS {
            assert_eq!(
                seg.params.get(name).unwrap().kernel.data(),
                cls.params.get(name).unwrap().kernel.data(),
                "layer {name} not copied bitwise"
            );
        }
        assert_eq!(
            seg.params.get("deconv1").unwrap().kernel.data(),
            decoder_before.data()
        );
    }

    #[test]
    fn transfer_between_scales_fails_with_layer_name() {
        let cls = build_classifier(&ScaleConfig::desk(), 1).unwrap();
        let mut full_cfg = ScaleConfig::full();
        full_cfg.base_channels = 16;
        let mut seg = build_segmenter(&full_cfg, 1).unwrap();
        match transfer_weights(&cls, &mut seg) {
            Err(Error::Transfer { layer, .. }) => assert_eq!(layer, "boundary_conv"),
            other => panic!("expected transfer error, got {other:?}"),
        }
    }

    #[test]
    fn transferred_encoder_matches_classifier_partial_forward() {
        let cfg = ScaleConfig::desk();
        let cls = build_classifier(&cfg, 42).unwrap();
        let mut seg = build_segmenter(&cfg, 43).unwrap();
        transfer_weights(&cls, &mut seg).unwrap();
        for seed in 0..5 {
            let x = random_batch(&cfg, 1, 100 + seed);
            let mut g1 = Graph::new();
            let id1 = g1.leaf(x.clone(), false).unwrap();
            let a = cls.forward_encoder_infer(&mut g1, id1).unwrap();
            let mut g2 = Graph::new();
            let id2 = g2.leaf(x, false).unwrap();
            let b = seg.forward_encoder_infer(&mut g2, id2).unwrap();
            let (av, bv) = (g1.value(a).data(), g2.value(b).data());
            assert_eq!(av.len(), bv.len());
            for (x1, x2) in av.iter().zip(bv) {
                assert!((x1 - x2).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn inference_is_a_pure_function() {
        let cfg = ScaleConfig::desk();
        let seg = build_segmenter(&cfg, 5).unwrap();
        let x = random_batch(&cfg, 1, 9);
        let run = || {
            let mut g = Graph::new();
            let id = g.leaf(x.clone(), false).unwrap();
            let pass = seg.forward_infer(&mut g, id).unwrap();
            g.value(pass.output).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zeroed_head_predicts_everything_cloud_at_exactly_half() {
        // Zero head weights give equal logits, softmax exactly 0.5, and the
        // >= rule classifies the pixel as cloud.
        let cfg = ScaleConfig::desk();
        let mut seg = build_segmenter(&cfg, 5).unwrap();
        {
            let head = seg.params.get_mut("head_conv").unwrap();
            for v in head.kernel.data_mut() {
                *v = 0.0;
            }
            for v in head.bias.data_mut() {
                *v = 0.0;
            }
        }
        let image = Tensor::zeros(vec![cfg.h_day, cfg.quarter_width, 2]);
        let mask = predict_mask(&seg, &image).unwrap();
        assert!(mask.data.iter().all(|&v| v == 1));
    }

    #[test]
    fn predict_mask_rejects_nan_and_is_binary() {
        let cfg = ScaleConfig::desk();
        let seg = build_segmenter(&cfg, 5).unwrap();
        let mut bad = Tensor::zeros(vec![cfg.h_day, cfg.quarter_width, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(predict_mask(&seg, &bad), Err(Error::Validation(_))));

        let mut rng = seeded_rng(3);
        let data: Vec<f64> = (0..cfg.h_day * cfg.quarter_width * 2)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let img = Tensor::new(vec![cfg.h_day, cfg.quarter_width, 2], data).unwrap();
        let mask = predict_mask(&seg, &img).unwrap();
        assert!(mask.data.iter().all(|&v| v <= 1));
    }
}
