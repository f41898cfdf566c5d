//! Built-in small convolutional network with exact analytic gradients.
//!
//! Two 3x3 convolutions (zero padding, each followed by a rectifier and
//! 2x2 average pooling) feed two fully-connected layers producing class
//! logits. Everything is plain `f64` with hand-written forward and
//! backward passes, so input gradients for white-box attacks are exact
//! rather than estimated, and training is bit-reproducible from a seed.

use crate::classifier::{check_batch, softmax, Classifier, LossSpec};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededStream};
use rand::Rng;

const KSIZE: usize = 3;

/// Inputs are shifted by this amount before the first convolution.
const PIXEL_CENTER: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SmallNet {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    conv1_out: usize,
    conv2_out: usize,
    hidden: usize,
    // spatial dims after the first pooling stage
    p1: (usize, usize),
    pub(crate) conv1_w: Vec<f64>,
    pub(crate) conv1_b: Vec<f64>,
    pub(crate) conv2_w: Vec<f64>,
    pub(crate) conv2_b: Vec<f64>,
    pub(crate) fc1_w: Vec<f64>,
    pub(crate) fc1_b: Vec<f64>,
    pub(crate) fc2_w: Vec<f64>,
    pub(crate) fc2_b: Vec<f64>,
}

fn pool_dim(d: usize) -> usize {
    if d >= 2 {
        d / 2
    } else {
        1
    }
}

fn block(d: usize) -> usize {
    if d >= 2 {
        2
    } else {
        1
    }
}

impl SmallNet {
    /// Default widths: 4 and 8 convolution filters, 32 hidden units.
    pub fn new(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        SmallNet::with_widths(input_shape, num_classes, 4, 8, 32, seed)
    }

    pub fn with_widths(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        conv1_out: usize,
        conv2_out: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput("input shape must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if conv1_out == 0 || conv2_out == 0 || hidden == 0 {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let p1 = (pool_dim(h), pool_dim(w));
        let p2 = (pool_dim(p1.0), pool_dim(p1.1));
        let fc_in = conv2_out * p2.0 * p2.1;

        let mut net = SmallNet {
            input_shape,
            num_classes,
            conv1_out,
            conv2_out,
            hidden,
            p1,
            conv1_w: vec![0.0; conv1_out * c * KSIZE * KSIZE],
            conv1_b: vec![0.0; conv1_out],
            conv2_w: vec![0.0; conv2_out * conv1_out * KSIZE * KSIZE],
            conv2_b: vec![0.0; conv2_out],
            fc1_w: vec![0.0; hidden * fc_in],
            fc1_b: vec![0.0; hidden],
            fc2_w: vec![0.0; num_classes * hidden],
            fc2_b: vec![0.0; num_classes],
        };
        net.init_weights(seed);
        Ok(net)
    }

    /// Uniform fan-in initialization; biases start at zero.
    fn init_weights(&mut self, seed: u64) {
        let fans = [
            self.input_shape.0 * KSIZE * KSIZE,
            self.conv1_out * KSIZE * KSIZE,
            self.fc1_w.len() / self.hidden,
            self.hidden,
        ];
        let weights: [&mut Vec<f64>; 4] = [
            &mut self.conv1_w,
            &mut self.conv2_w,
            &mut self.fc1_w,
            &mut self.fc2_w,
        ];
        for (layer, (w, fan)) in weights.into_iter().zip(fans).enumerate() {
            let bound = 1.0 / (fan as f64).sqrt();
            let mut rng = SeededStream::new(seed, layer as u64).rng();
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn conv1_out(&self) -> usize {
        self.conv1_out
    }

    pub fn conv2_out(&self) -> usize {
        self.conv2_out
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// All parameters flattened in a fixed order (conv weights and biases,
    /// then the dense layers). Used by the checkpoint format and by
    /// finite-difference probes.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.param_groups() {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for group in self.param_groups_mut() {
            let n = group.len();
            group.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|g| g.len()).sum()
    }

    pub(crate) fn param_groups(&self) -> [&[f64]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub(crate) fn param_groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    /// Loss value at `x`; the scalar the analytic gradients differentiate.
    pub fn loss_value(&self, x: &ImageTensor, loss: &LossSpec) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(loss_and_dlogits(&logits, loss)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &ImageTensor) -> Result<ForwardCache> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape,
                got: x.shape(),
            });
        }
        let (c, h, w) = self.input_shape;
        // fixed preprocessing: center pixels around zero
        let centered: Vec<f64> = x.as_slice().iter().map(|v| v - PIXEL_CENTER).collect();
        let z1 = conv_forward(&centered, (c, h, w), &self.conv1_w, &self.conv1_b, self.conv1_out);
        let a1p = pool_forward(&relu(&z1), (self.conv1_out, h, w));
        let z2 = conv_forward(
            &a1p,
            (self.conv1_out, self.p1.0, self.p1.1),
            &self.conv2_w,
            &self.conv2_b,
            self.conv2_out,
        );
        let a2p = pool_forward(&relu(&z2), (self.conv2_out, self.p1.0, self.p1.1));
        let z3 = dense_forward(&a2p, &self.fc1_w, &self.fc1_b, self.hidden);
        let a3 = relu(&z3);
        let logits = dense_forward(&a3, &self.fc2_w, &self.fc2_b, self.num_classes);
        Ok(ForwardCache {
            centered,
            a1p,
            z1,
            z2,
            a2p,
            z3,
            a3,
            logits,
        })
    }

    /// Full backward pass from a gradient at the logits. Parameter
    /// gradients and the input gradient are each optional so attacks can
    /// skip the parameter half.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamGrads>, Option<ImageTensor>) {
        let (c, h, w) = self.input_shape;
        let mut grads = if want_params {
            Some(ParamGrads::zeros_like(self))
        } else {
            None
        };

        // fc2
        let mut d_a3 = vec![0.0; self.hidden];
        for (o, &dz) in dlogits.iter().enumerate() {
            let row = &self.fc2_w[o * self.hidden..(o + 1) * self.hidden];
            for (i, &wv) in row.iter().enumerate() {
                d_a3[i] += wv * dz;
            }
        }
        if let Some(g) = grads.as_mut() {
            for (o, &dz) in dlogits.iter().enumerate() {
                g.fc2_b[o] += dz;
                let row = &mut g.fc2_w[o * self.hidden..(o + 1) * self.hidden];
                for (i, &a) in cache.a3.iter().enumerate() {
                    row[i] += dz * a;
                }
            }
        }

        // fc1
        let dz3 = relu_backward(&d_a3, &cache.z3);
        let fc_in = self.fc1_w.len() / self.hidden;
        let mut d_a2p = vec![0.0; fc_in];
        for (o, &dz) in dz3.iter().enumerate() {
            let row = &self.fc1_w[o * fc_in..(o + 1) * fc_in];
            for (i, &wv) in row.iter().enumerate() {
                d_a2p[i] += wv * dz;
            }
        }
        if let Some(g) = grads.as_mut() {
            for (o, &dz) in dz3.iter().enumerate() {
                g.fc1_b[o] += dz;
                let row = &mut g.fc1_w[o * fc_in..(o + 1) * fc_in];
                for (i, &a) in cache.a2p.iter().enumerate() {
                    row[i] += dz * a;
                }
            }
        }

        // conv2 block
        let d_a2 = pool_backward(&d_a2p, (self.conv2_out, self.p1.0, self.p1.1));
        let dz2 = relu_backward(&d_a2, &cache.z2);
        let (dw2, db2, d_a1p) = conv_backward(
            &cache.a1p,
            (self.conv1_out, self.p1.0, self.p1.1),
            &self.conv2_w,
            self.conv2_out,
            &dz2,
        );
        if let Some(g) = grads.as_mut() {
            g.conv2_w = dw2;
            g.conv2_b = db2;
        }

        // conv1 block
        let d_a1 = pool_backward(&d_a1p, (self.conv1_out, h, w));
        let dz1 = relu_backward(&d_a1, &cache.z1);
        let (dw1, db1, dx) =
            conv_backward(&cache.centered, (c, h, w), &self.conv1_w, self.conv1_out, &dz1);
        if let Some(g) = grads.as_mut() {
            g.conv1_w = dw1;
            g.conv1_b = db1;
        }

        let input_grad = if want_input {
            Some(ImageTensor::from_vec(c, h, w, dx).expect("shape fixed"))
        } else {
            None
        };
        (grads, input_grad)
    }
}

impl Classifier for SmallNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn predict_proba(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        check_batch(self, batch)?;
        batch
            .iter()
            .map(|x| Ok(softmax(&self.logits(x)?)))
            .collect()
    }

    fn supports_input_gradient(&self) -> bool {
        true
    }

    fn input_gradient(&self, x: &ImageTensor, loss: &LossSpec) -> Result<ImageTensor> {
        if loss.label() >= self.num_classes {
            return Err(Error::InvalidInput(format!(
                "loss label {} out of range for {} classes",
                loss.label(),
                self.num_classes
            )));
        }
        let cache = self.forward_cached(x)?;
        let (_, dlogits) = loss_and_dlogits(&cache.logits, loss)?;
        let (_, dx) = self.backward(&cache, &dlogits, false, true);
        Ok(dx.expect("input gradient requested"))
    }
}

pub(crate) struct ForwardCache {
    /// Input after centering; the first convolution's actual input.
    pub centered: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1p: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2p: Vec<f64>,
    pub z3: Vec<f64>,
    pub a3: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) struct ParamGrads {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(net: &SmallNet) -> Self {
        ParamGrads {
            conv1_w: vec![0.0; net.conv1_w.len()],
            conv1_b: vec![0.0; net.conv1_b.len()],
            conv2_w: vec![0.0; net.conv2_w.len()],
            conv2_b: vec![0.0; net.conv2_b.len()],
            fc1_w: vec![0.0; net.fc1_w.len()],
            fc1_b: vec![0.0; net.fc1_b.len()],
            fc2_w: vec![0.0; net.fc2_w.len()],
            fc2_b: vec![0.0; net.fc2_b.len()],
        }
    }

    pub fn groups(&self) -> [&[f64]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        let other_groups = other.groups();
        for (mine, theirs) in self.groups_mut().into_iter().zip(other_groups) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.groups_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// Loss value and its gradient with respect to the logits.
pub(crate) fn loss_and_dlogits(logits: &[f64], loss: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    let label = loss.label();
    if label >= k {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {k} logits"
        )));
    }
    match loss {
        LossSpec::CrossEntropy { label } => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let value = lse - logits[*label];
            let mut d = softmax(logits);
            d[*label] -= 1.0;
            Ok((value, d))
        }
        LossSpec::Margin { label, kappa } => {
            // strongest competitor, lowest index on ties
            let mut comp = usize::MAX;
            for (i, &z) in logits.iter().enumerate() {
                if i == *label {
                    continue;
                }
                if comp == usize::MAX || z > logits[comp] {
                    comp = i;
                }
            }
            let margin = logits[*label] - logits[comp];
            let mut d = vec![0.0; k];
            let value = if margin >= -kappa {
                d[*label] = 1.0;
                d[comp] = -1.0;
                margin
            } else {
                -kappa
            };
            Ok((value, d))
        }
    }
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn relu_backward(dout: &[f64], z: &[f64]) -> Vec<f64> {
    dout.iter()
        .zip(z)
        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

fn pad_input(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0; c * ph * pw];
    for i in 0..c {
        for y in 0..h {
            let src = (i * h + y) * w;
            let dst = (i * ph + y + 1) * pw + 1;
            padded[dst..dst + w].copy_from_slice(&input[src..src + w]);
        }
    }
    padded
}

/// 3x3 convolution with zero padding 1 and stride 1 (same spatial size).
fn conv_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
) -> Vec<f64> {
    let padded = pad_input(input, (c, h, w));
    let pw = w + 2;
    let ph = h + 2;
    let mut out = vec![0.0; out_c * h * w];
    for o in 0..out_c {
        let out_plane = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..c {
            let w_base = (o * c + i) * KSIZE * KSIZE;
            let k = &weights[w_base..w_base + 9];
            let p_base = i * ph * pw;
            for y in 0..h {
                let r0 = p_base + y * pw;
                let r1 = r0 + pw;
                let r2 = r1 + pw;
                for x in 0..w {
                    out_plane[y * w + x] += k[0] * padded[r0 + x]
                        + k[1] * padded[r0 + x + 1]
                        + k[2] * padded[r0 + x + 2]
                        + k[3] * padded[r1 + x]
                        + k[4] * padded[r1 + x + 1]
                        + k[5] * padded[r1 + x + 2]
                        + k[6] * padded[r2 + x]
                        + k[7] * padded[r2 + x + 1]
                        + k[8] * padded[r2 + x + 2];
                }
            }
        }
        for v in out_plane.iter_mut() {
            *v += bias[o];
        }
    }
    out
}

/// Gradients of a 3x3 same-convolution: weight grads, bias grads, and the
/// gradient with respect to the layer input.
fn conv_backward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    weights: &[f64],
    out_c: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let padded = pad_input(input, (c, h, w));
    let pw = w + 2;
    let ph = h + 2;
    let mut dw = vec![0.0; out_c * c * KSIZE * KSIZE];
    let mut db = vec![0.0; out_c];
    let mut din_pad = vec![0.0; c * ph * pw];
    for o in 0..out_c {
        let dz_plane = &dout[o * h * w..(o + 1) * h * w];
        db[o] = dz_plane.iter().sum();
        for i in 0..c {
            let w_base = (o * c + i) * KSIZE * KSIZE;
            let p_base = i * ph * pw;
            for y in 0..h {
                for x in 0..w {
                    let dz = dz_plane[y * w + x];
                    if dz == 0.0 {
                        continue;
                    }
                    for ky in 0..KSIZE {
                        let prow = p_base + (y + ky) * pw + x;
                        let wrow = w_base + ky * KSIZE;
                        dw[wrow] += dz * padded[prow];
                        dw[wrow + 1] += dz * padded[prow + 1];
                        dw[wrow + 2] += dz * padded[prow + 2];
                        din_pad[prow] += dz * weights[wrow];
                        din_pad[prow + 1] += dz * weights[wrow + 1];
                        din_pad[prow + 2] += dz * weights[wrow + 2];
                    }
                }
            }
        }
    }
    // crop the padding off the input gradient
    let mut din = vec![0.0; c * h * w];
    for i in 0..c {
        for y in 0..h {
            let src = (i * ph + y + 1) * pw + 1;
            let dst = (i * h + y) * w;
            din[dst..dst + w].copy_from_slice(&din_pad[src..src + w]);
        }
    }
    (dw, db, din)
}

/// 2x2 average pooling with stride 2; a trailing odd row/column is dropped,
/// and an axis of extent 1 is passed through.
fn pool_forward(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (pool_dim(h), pool_dim(w));
    let (bh, bw) = (block(h), block(w));
    let inv_area = 1.0 / (bh * bw) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for i in 0..c {
        for py in 0..oh {
            for px in 0..ow {
                let mut acc = 0.0;
                for dy in 0..bh {
                    for dx in 0..bw {
                        acc += input[(i * h + py * bh + dy) * w + px * bw + dx];
                    }
                }
                out[(i * oh + py) * ow + px] = acc * inv_area;
            }
        }
    }
    out
}

fn pool_backward(dout: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (pool_dim(h), pool_dim(w));
    let (bh, bw) = (block(h), block(w));
    let inv_area = 1.0 / (bh * bw) as f64;
    let mut din = vec![0.0; c * h * w];
    for i in 0..c {
        for py in 0..oh {
            for px in 0..ow {
                let d = dout[(i * oh + py) * ow + px] * inv_area;
                for dy in 0..bh {
                    for dx in 0..bw {
                        din[(i * h + py * bh + dy) * w + px * bw + dx] += d;
                    }
                }
            }
        }
    }
    din
}

fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = input.len();
    (0..out_dim)
        .map(|o| {
            let row = &weights[o * in_dim..(o + 1) * in_dim];
            bias[o]
                + row
                    .iter()
                    .zip(input)
                    .map(|(&wv, &a)| wv * a)
                    .sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::predict_label;

    fn random_image(seed: u64, shape: (usize, usize, usize)) -> ImageTensor {
        let mut rng = SeededStream::new(seed, 0).rng();
        let n = shape.0 * shape.1 * shape.2;
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageTensor::from_vec(shape.0, shape.1, shape.2, data).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut net = SmallNet::new((1, 8, 8), 4, 0).unwrap();
        let zeros = vec![0.0; net.param_count()];
        net.set_params_flat(&zeros).unwrap();
        let x = random_image(1, (1, 8, 8));
        let rows = net.predict_proba(&[x]).unwrap();
        for p in &rows[0] {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_rows_normalize() {
        let net = SmallNet::new((1, 8, 8), 3, 5).unwrap();
        let batch: Vec<ImageTensor> = (0..6).map(|i| random_image(i, (1, 8, 8))).collect();
        let rows = net.predict_proba(&batch).unwrap();
        for row in rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn batch_composition_does_not_change_rows() {
        let net = SmallNet::new((1, 8, 8), 3, 9).unwrap();
        let batch: Vec<ImageTensor> = (0..5).map(|i| random_image(40 + i, (1, 8, 8))).collect();
        let together = net.predict_proba(&batch).unwrap();
        for (i, x) in batch.iter().enumerate() {
            let alone = net.predict_proba(std::slice::from_ref(x)).unwrap();
            for (a, b) in alone[0].iter().zip(&together[i]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fresh_net_labels_are_not_degenerate() {
        let net = SmallNet::new((1, 8, 8), 3, 123).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..1000 {
            let x = random_image(10_000 + i, (1, 8, 8));
            counts[predict_label(&net, &x).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c < 900), "counts {counts:?}");
    }

    #[test]
    fn oversize_batch_and_shape_mismatch_error() {
        let net = SmallNet::new((1, 8, 8), 3, 2).unwrap();
        let wrong = random_image(0, (1, 4, 4));
        assert!(net.predict_proba(&[wrong]).is_err());
        assert!(net.predict_proba(&[]).is_err());
    }

    #[test]
    fn zero_weight_net_has_zero_input_gradient() {
        let mut net = SmallNet::new((1, 8, 8), 3, 0).unwrap();
        net.set_params_flat(&vec![0.0; net.param_count()]).unwrap();
        let x = random_image(3, (1, 8, 8));
        let g = net
            .input_gradient(&x, &LossSpec::CrossEntropy { label: 1 })
            .unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn margin_gradient_uses_lowest_indexed_competitor_on_ties() {
        let (value, d) = loss_and_dlogits(
            &[1.0, 1.0, 0.5],
            &LossSpec::Margin {
                label: 2,
                kappa: 0.0,
            },
        )
        .unwrap();
        assert!((value - (0.5 - 1.0)).abs() < 1e-12);
        assert_eq!(d, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn margin_clamps_below_minus_kappa() {
        let (value, d) = loss_and_dlogits(
            &[5.0, 0.0],
            &LossSpec::Margin {
                label: 1,
                kappa: 2.0,
            },
        )
        .unwrap();
        assert_eq!(value, -2.0);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    /// Relative error with a floor so near-zero pairs compare as equal.
    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-8 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    fn check_input_gradient(net: &SmallNet, x: &ImageTensor, loss: &LossSpec) {
        let analytic = net.input_gradient(x, loss).unwrap();
        let h = 1e-4;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (net.loss_value(&plus, loss).unwrap() - net.loss_value(&minus, loss).unwrap())
                / (2.0 * h);
            let err = rel_err(fd, analytic.as_slice()[idx]);
            assert!(
                err < 1e-3,
                "input coord {idx}: fd {fd} vs analytic {} (err {err})",
                analytic.as_slice()[idx]
            );
        }
    }

    fn check_param_gradient(net: &SmallNet, x: &ImageTensor, loss: &LossSpec) {
        let cache = net.forward_cached(x).unwrap();
        let (_, dlogits) = loss_and_dlogits(&cache.logits, loss).unwrap();
        let (grads, _) = net.backward(&cache, &dlogits, true, false);
        let grads = grads.unwrap();
        let flat_grads: Vec<f64> = grads.groups().iter().flat_map(|g| g.iter().copied()).collect();

        let params = net.params_flat();
        let h = 1e-4;
        let mut probe = net.clone();
        for idx in 0..params.len() {
            let mut p = params.clone();
            p[idx] += h;
            probe.set_params_flat(&p).unwrap();
            let up = probe.loss_value(x, loss).unwrap();
            p[idx] -= 2.0 * h;
            probe.set_params_flat(&p).unwrap();
            let down = probe.loss_value(x, loss).unwrap();
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(fd, flat_grads[idx]);
            assert!(
                err < 1e-3,
                "param {idx}: fd {fd} vs analytic {} (err {err})",
                flat_grads[idx]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_cross_entropy() {
        let net = SmallNet::with_widths((2, 5, 6), 3, 2, 3, 5, 77).unwrap();
        let x = random_image(8, (2, 5, 6));
        let loss = LossSpec::CrossEntropy { label: 1 };
        check_input_gradient(&net, &x, &loss);
        check_param_gradient(&net, &x, &loss);
    }

    #[test]
    fn gradients_match_finite_differences_margin() {
        let net = SmallNet::with_widths((1, 6, 6), 4, 2, 3, 6, 31).unwrap();
        let x = random_image(9, (1, 6, 6));
        let loss = LossSpec::Margin {
            label: 2,
            kappa: 0.0,
        };
        check_input_gradient(&net, &x, &loss);
        check_param_gradient(&net, &x, &loss);
    }

    #[test]
    fn tiny_inputs_are_supported() {
        // a 1x1x2 "image" exercises the degenerate pooling path
        let net = SmallNet::with_widths((1, 1, 2), 2, 2, 2, 4, 3).unwrap();
        let x = ImageTensor::from_vec(1, 1, 2, vec![0.3, 0.9]).unwrap();
        let rows = net.predict_proba(&[x.clone()]).unwrap();
        assert!((rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let loss = LossSpec::CrossEntropy { label: 0 };
        check_input_gradient(&net, &x, &loss);
        check_param_gradient(&net, &x, &loss);
    }
}
