//! Reference architectures ending in a ghost-extended head, and the flat
//! parameter vector they are trained through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, LossTarget, Tape, Var};
use crate::error::{Error, Result};
use crate::ghost::{ClassLayout, GammaInit, GhostHeadConfig, LossBreakdown};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    /// Fully connected ReLU layers of the given widths, then the head.
    Mlp { hidden: Vec<usize> },
    /// Two `conv3×3 → relu → maxpool2×2` blocks, flatten, head.
    Cnn2Block { channels: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub ghosts: usize,
    pub head_activation: Activation,
    pub gamma_init: GammaInit,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn mlp(hidden: Vec<usize>, classes: usize, ghosts: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            input: [1, 28, 28],
            classes,
            ghosts,
            head_activation: Activation::Identity,
            gamma_init: GammaInit::Zeros,
            init_seed,
        }
    }

    pub fn cnn2block(classes: usize, ghosts: usize, init_seed: u64) -> Self {
        Self {
            kind: ModelKind::Cnn2Block { channels: [8, 16] },
            input: [1, 28, 28],
            classes,
            ghosts,
            head_activation: Activation::Identity,
            gamma_init: GammaInit::Zeros,
            init_seed,
        }
    }

    pub fn layout(&self) -> ClassLayout {
        ClassLayout::new(self.classes, self.ghosts)
    }
}

/// One named, contiguous slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// True for the ghost parameters γ (ghost head columns and biases).
    pub ghost: bool,
}

/// All trainable parameters flattened into one vector, with a segment index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<Segment>, data: Vec<f64>) -> Result<Self> {
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut offset = 0;
        for s in &segments {
            if s.offset != offset || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::contract(format!("inconsistent segment {}", s.name)));
            }
            offset += s.len;
        }
        if total != data.len() {
            return Err(Error::contract(format!(
                "parameter vector length {} does not match segment total {total}",
                data.len()
            )));
        }
        Ok(Self { data, segments })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len])
    }

    /// Same layout, new values.
    pub fn with_values(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.segments.clone(), data)
    }

    /// Indices of the non-ghost (backbone and real head) coordinates.
    pub fn backbone_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .filter(|s| !s.ghost)
            .flat_map(|s| s.offset..s.offset + s.len)
    }

    pub fn ghost_len(&self) -> usize {
        self.segments.iter().filter(|s| s.ghost).map(|s| s.len).sum()
    }

    /// Splits into named tensors.
    pub fn unflatten(&self) -> Result<Vec<(String, Tensor)>> {
        self.segments
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.data[s.offset..s.offset + s.len].to_vec())?;
                Ok((s.name.clone(), t))
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`]; names and shapes must match `layout`.
    pub fn flatten(layout: &[Segment], tensors: &[(String, Tensor)]) -> Result<Self> {
        if layout.len() != tensors.len() {
            return Err(Error::contract("segment count mismatch"));
        }
        let mut data = Vec::with_capacity(layout.iter().map(|s| s.len).sum());
        for (seg, (name, t)) in layout.iter().zip(tensors) {
            if &seg.name != name || seg.shape != t.shape() {
                return Err(Error::contract(format!("segment {} does not match {name}", seg.name)));
            }
            data.extend_from_slice(t.data());
        }
        Self::new(layout.to_vec(), data)
    }

    /// SHA-256 of the little-endian bit patterns, first 8 bytes as u64.
    pub fn fingerprint(&self) -> u64 {
        crate::fingerprint_f64(&self.data)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        weight: usize,
        bias: usize,
    },
    ConvBlock {
        weight: usize,
        bias: usize,
        pad_to: Option<usize>,
    },
}

/// An architecture; parameters live separately in a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    segments: Vec<Segment>,
    layers: Vec<Layer>,
    features: usize,
    head: [usize; 4],
}

/// Outputs of one recorded forward pass.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

const EVAL_CHUNK: usize = 500;

impl Model {
    /// Builds the architecture and a deterministic initialisation from
    /// `spec.init_seed`.
    pub fn build(spec: ModelSpec) -> Result<(Self, ParamVector)> {
        let [c_in, h, w] = spec.input;
        if spec.classes == 0 || c_in == 0 || h == 0 || w == 0 {
            return Err(Error::Spec("input dims and class count must be positive".into()));
        }
        let mut segments = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, ghost: bool| {
            let offset = segments.iter().map(|s: &Segment| s.len).sum();
            let len = shape.iter().product();
            segments.push(Segment {
                name,
                shape,
                offset,
                len,
                ghost,
            });
            segments.len() - 1
        };
        let mut layers = Vec::new();
        let features = match &spec.kind {
            ModelKind::Mlp { hidden } => {
                let mut width = c_in * h * w;
                for (i, &out) in hidden.iter().enumerate() {
                    if out == 0 {
                        return Err(Error::Spec("hidden widths must be positive".into()));
                    }
                    let weight = push(format!("dense{}.weight", i + 1), vec![width, out], false);
                    let bias = push(format!("dense{}.bias", i + 1), vec![out], false);
                    layers.push(Layer::Dense { weight, bias });
                    width = out;
                }
                width
            }
            ModelKind::Cnn2Block { channels } => {
                let (mut ch, mut hh, mut ww) = (c_in, h, w);
                for (i, &out) in channels.iter().enumerate() {
                    if out == 0 {
                        return Err(Error::Spec("channel counts must be positive".into()));
                    }
                    // An odd map between blocks is zero-padded at the
                    // bottom/right so the next valid conv lands on an even size.
                    let pad_to = if i > 0 && (hh % 2 == 1 || ww % 2 == 1) {
                        if hh != ww {
                            return Err(Error::Spec(format!("non-square odd map {hh}×{ww}")));
                        }
                        Some(hh + 1)
                    } else {
                        None
                    };
                    if let Some(p) = pad_to {
                        hh = p;
                        ww = p;
                    }
                    if hh < 4 || ww < 4 {
                        return Err(Error::Spec(format!(
                            "block {} input {hh}×{ww} too small for conv3×3 + pool2×2",
                            i + 1
                        )));
                    }
                    let (ch_, cw) = (hh - 2, ww - 2);
                    if ch_ % 2 != 0 || cw % 2 != 0 {
                        return Err(Error::Spec(format!(
                            "block {} conv output {ch_}×{cw} cannot be pooled by 2×2",
                            i + 1
                        )));
                    }
                    let weight = push(format!("conv{}.weight", i + 1), vec![out, ch, 3, 3], false);
                    let bias = push(format!("conv{}.bias", i + 1), vec![out], false);
                    layers.push(Layer::ConvBlock { weight, bias, pad_to });
                    ch = out;
                    hh = ch_ / 2;
                    ww = cw / 2;
                }
                ch * hh * ww
            }
        };
        let (c, e) = (spec.classes, spec.ghosts);
        let hw = push("head.weight".into(), vec![features, c], false);
        let hb = push("head.bias".into(), vec![c], false);
        let (gw, gb) = if e > 0 {
            (
                push("ghost.weight".into(), vec![features, e], true),
                push("ghost.bias".into(), vec![e], true),
            )
        } else {
            (usize::MAX, usize::MAX)
        };
        let model = Self {
            spec,
            segments,
            layers,
            features,
            head: [hw, hb, gw, gb],
        };
        let params = model.initialize()?;
        Ok((model, params))
    }

    fn initialize(&self) -> Result<ParamVector> {
        let mut data = vec![0.0; self.segments.iter().map(|s| s.len).sum()];
        let mut backbone = stream_rng(self.spec.init_seed, Stream::BackboneInit);
        for seg in self.segments.iter().filter(|s| !s.ghost) {
            if seg.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product::<usize>().max(1);
            let fan_in = if seg.shape.len() == 2 { seg.shape[0] } else { fan_in };
            // layers feeding a ReLU get the He bound; the head gets LeCun's
            let bound = if seg.name.starts_with("head") {
                (3.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            for v in &mut data[seg.offset..seg.offset + seg.len] {
                *v = backbone.random_range(-bound..bound);
            }
        }
        if self.spec.ghosts > 0 {
            let mut ghost_rng = stream_rng(self.spec.init_seed, Stream::GhostInit);
            let (gw, gb) = self
                .spec
                .gamma_init
                .draw(self.features, self.spec.ghosts, &mut ghost_rng)?;
            let ws = &self.segments[self.head[2]];
            data[ws.offset..ws.offset + ws.len].copy_from_slice(&gw);
            let bs = &self.segments[self.head[3]];
            data[bs.offset..bs.offset + bs.len].copy_from_slice(&gb);
        }
        ParamVector::new(self.segments.clone(), data)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_params(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Width `s` of the feature vector entering the head.
    pub fn feature_width(&self) -> usize {
        self.features
    }

    pub fn layout(&self) -> ClassLayout {
        self.spec.layout()
    }

    /// The head of `params` as a standalone config.
    pub fn head(&self, params: &ParamVector) -> Result<GhostHeadConfig> {
        let (c, e, s) = (self.spec.classes, self.spec.ghosts, self.features);
        let seg = |i: usize| {
            let sg = &self.segments[i];
            &params.as_slice()[sg.offset..sg.offset + sg.len]
        };
        let real_w = seg(self.head[0]);
        let mut weights = Vec::with_capacity(s * (c + e));
        for j in 0..s {
            weights.extend_from_slice(&real_w[j * c..(j + 1) * c]);
            if e > 0 {
                weights.extend_from_slice(&seg(self.head[2])[j * e..(j + 1) * e]);
            }
        }
        let mut biases = seg(self.head[1]).to_vec();
        if e > 0 {
            biases.extend_from_slice(seg(self.head[3]));
        }
        Ok(GhostHeadConfig {
            c,
            e,
            s,
            activation: self.spec.head_activation,
            weights: Tensor::new(vec![s, c + e], weights)?,
            biases,
        })
    }

    fn check_input(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::Dimension {
                op: "model input",
                lhs: s.to_vec(),
                rhs: self.spec.input.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Records the forward pass of `images[N×C×H×W]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, params: &ParamVector, track: bool) -> Result<Forward> {
        if params.segments() != self.segments.as_slice() {
            return Err(Error::contract("parameter vector does not belong to this model"));
        }
        let n = self.check_input(images)?;
        let vars: Vec<Var> = params
            .unflatten()?
            .into_iter()
            .map(|(_, t)| tape.leaf(t, track))
            .collect();
        let mut x = tape.leaf(images.clone(), false);
        if matches!(self.spec.kind, ModelKind::Mlp { .. }) {
            x = tape.reshape(x, vec![n, self.spec.input.iter().product()])?;
        }
        for layer in &self.layers {
            x = match *layer {
                Layer::Dense { weight, bias } => {
                    let h = tape.matmul(x, vars[weight])?;
                    let h = tape.add_bias(h, vars[bias])?;
                    tape.pointwise(h, Activation::Relu)?
                }
                Layer::ConvBlock { weight, bias, pad_to } => {
                    let h = match pad_to {
                        Some(p) => tape.pad_bottom_right(x, p, p)?,
                        None => x,
                    };
                    let h = tape.conv2d(h, vars[weight])?;
                    let h = tape.add_channel_bias(h, vars[bias])?;
                    let h = tape.pointwise(h, Activation::Relu)?;
                    tape.maxpool2(h)?
                }
            };
        }
        if matches!(self.spec.kind, ModelKind::Cnn2Block { .. }) {
            x = tape.reshape(x, vec![n, self.features])?;
        }
        let [hw, hb, gw, gb] = self.head;
        let real = tape.matmul(x, vars[hw])?;
        let mut z = tape.add_bias(real, vars[hb])?;
        if self.spec.ghosts > 0 {
            let ghost = tape.matmul(x, vars[gw])?;
            let ghost = tape.add_bias(ghost, vars[gb])?;
            z = tape.concat_cols(z, ghost)?;
        }
        let logits = if self.spec.head_activation == Activation::Identity {
            z
        } else {
            tape.pointwise(z, self.spec.head_activation)?
        };
        Ok(Forward { logits, params: vars })
    }

    /// Batch-mean loss decomposition and the flat gradient of the `target`
    /// loss with respect to `params`.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        images: &Tensor,
        labels: &[usize],
        target: LossTarget,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, images, params, true)?;
        let loss = tape.cross_entropy(fwd.logits, labels, self.layout(), target)?;
        let breakdown = tape.breakdown(loss).expect("cross-entropy node records a breakdown");
        let mut grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(params.len());
        for (v, seg) in fwd.params.iter().zip(&self.segments) {
            match grads.take(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, seg.len)),
            }
        }
        Ok((breakdown, flat))
    }

    /// Logits without gradient tracking, computed in bounded-size chunks.
    pub fn logits(&self, params: &ParamVector, images: &Tensor) -> Result<Tensor> {
        let n = self.check_input(images)?;
        let per: usize = self.spec.input.iter().product();
        let width = self.layout().total();
        let mut out = Vec::with_capacity(n * width);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&self.spec.input);
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &chunk, params, false)?;
            out.extend_from_slice(tape.value(fwd.logits).data());
        }
        Tensor::new(vec![n, width], out)
    }

    /// Mean loss decomposition and real-class accuracy (ghost classes are
    /// never predicted).
    pub fn evaluate(&self, params: &ParamVector, images: &Tensor, labels: &[usize]) -> Result<(LossBreakdown, f64)> {
        let z = self.logits(params, images)?;
        let layout = self.layout();
        let breakdown = crate::ghost::ghost_softmax_ce(&z, labels, layout)?;
        let correct = z
            .data()
            .chunks(layout.total())
            .zip(labels)
            .filter(|(row, &y)| argmax(&row[..layout.real]) == y)
            .count();
        Ok((breakdown, correct as f64 / labels.len() as f64))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghost::{ghost_softmax_ce, head_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 1, 28, 28], (0..n * 784).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Model::build(ModelSpec::cnn2block(10, 2, 99)).unwrap();
        let (_, b) = Model::build(ModelSpec::cnn2block(10, 2, 99)).unwrap();
        assert_eq!(a, b);
        let (_, c) = Model::build(ModelSpec::cnn2block(10, 2, 100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cnn_shape_arithmetic() {
        let (m, p) = Model::build(ModelSpec::cnn2block(10, 2, 1)).unwrap();
        // 28 → 26 → 13 → pad 14 → 12 → 6
        assert_eq!(m.feature_width(), 16 * 6 * 6);
        let z = m.logits(&p, &random_images(1, 0)).unwrap();
        assert_eq!(z.shape(), &[1, 12]);
        assert_eq!(
            m.num_params(),
            8 * 9 + 8 + 16 * 8 * 9 + 16 + 576 * 10 + 10 + 576 * 2 + 2
        );
    }

    #[test]
    fn cnn_rejects_unpoolable_inputs() {
        let mut spec = ModelSpec::cnn2block(10, 0, 1);
        spec.input = [1, 27, 27];
        assert!(matches!(Model::build(spec.clone()), Err(Error::Spec(_))));
        spec.input = [1, 6, 6];
        assert!(matches!(Model::build(spec), Err(Error::Spec(_))));
    }

    #[test]
    fn bare_mlp_is_the_head() {
        let (m, p) = Model::build(ModelSpec::mlp(vec![], 10, 2, 5)).unwrap();
        let imgs = random_images(3, 1);
        let z = m.logits(&p, &imgs).unwrap();
        let feats = imgs.clone().reshape(vec![3, 784]).unwrap();
        let direct = head_forward(&feats, &m.head(&p).unwrap()).unwrap();
        for (a, b) in z.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_logits() {
        let (m, p) = Model::build(ModelSpec::cnn2block(10, 2, 3)).unwrap();
        let z = m.logits(&p, &Tensor::zeros(vec![2, 1, 28, 28]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ghost_segment_bookkeeping() {
        let (_, p0) = Model::build(ModelSpec::mlp(vec![32], 10, 0, 1)).unwrap();
        assert_eq!(p0.ghost_len(), 0);
        assert!(p0.segments().iter().all(|s| !s.ghost));
        let (m2, p2) = Model::build(ModelSpec::mlp(vec![32], 10, 2, 1)).unwrap();
        assert_eq!(p2.ghost_len(), 32 * 2 + 2);
        let total: usize = p2.segments().iter().map(|s| s.len).sum();
        assert_eq!(total, p2.len());
        assert_eq!(m2.num_params(), p2.len());
        // the shared parameters are identical across arms
        assert_eq!(&p2.as_slice()[..p0.len()], p0.as_slice());
    }

    #[test]
    fn unflatten_flatten_round_trip() {
        let (m, p) = Model::build(ModelSpec::cnn2block(10, 2, 4)).unwrap();
        let tensors = p.unflatten().unwrap();
        let back = ParamVector::flatten(m.segments(), &tensors).unwrap();
        assert_eq!(back, p);
        assert!(p.with_values(vec![0.0; 3]).is_err());
    }

    #[test]
    fn evaluate_matches_direct_loss() {
        let (m, p) = Model::build(ModelSpec::mlp(vec![8], 10, 2, 6)).unwrap();
        let imgs = random_images(4, 2);
        let labels = [3, 1, 0, 9];
        let (b, acc) = m.evaluate(&p, &imgs, &labels).unwrap();
        let z = m.logits(&p, &imgs).unwrap();
        assert_eq!(b, ghost_softmax_ce(&z, &labels, m.layout()).unwrap());
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (m, p) = Model::build(ModelSpec::cnn2block(10, 2, 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // perturb ghost columns away from zero so every segment is exercised
        let mut vals = p.as_slice().to_vec();
        for v in vals.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let p = p.with_values(vals).unwrap();
        let imgs = random_images(3, 9);
        let labels = [4, 7, 0];
        let (_, g) = m.loss_and_grad(&p, &imgs, &labels, LossTarget::Extended).unwrap();
        let loss = |q: &ParamVector| {
            let z = m.logits(q, &imgs).unwrap();
            ghost_softmax_ce(&z, &labels, m.layout()).unwrap().l_ext
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = rng.random_range(0..p.len());
            let mut plus = p.as_slice().to_vec();
            plus[i] += h;
            let mut minus = p.as_slice().to_vec();
            minus[i] -= h;
            let fd = (loss(&p.with_values(plus).unwrap()) - loss(&p.with_values(minus).unwrap())) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }
}
