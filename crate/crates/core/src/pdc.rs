//! The pathology detection core: a convolutional autoencoder whose
//! reconstruction residuals are turned into anomaly maps and image scores.
//!
//! Encoder: three residual down-blocks (widths `w, 2w, C`), each
//! `relu(conv3x3/2) -> conv3x3` plus a strided 1x1 skip. The last block has
//! no output relu so latents are signed. Decoder: three
//! `nearest-up x2 -> conv3x3 -> relu` blocks (widths `2w, w, w`) and a 3x3
//! head with logistic squashing. All convolutions use replicate padding, so
//! a constant latent decodes to a constant image.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { image_size: 64, latent_channels: 64, base_width: 16 }
    }
}

impl ModelConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "model.image_size = {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Grayscale batch `B x 1 x S x S` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Array4<f64>);

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 1 || h != w || h == 0 || h % 8 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image batch must be B x 1 x S x S with S divisible by 8, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch("image values must lie in [0, 1]".into()));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    /// Stacks `S x S` planes into a batch.
    pub fn from_planes<'a>(planes: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let views: Vec<_> = planes.into_iter().map(|p| p.insert_axis(Axis(0))).collect();
        if views.is_empty() {
            return Err(Error::EmptyInput);
        }
        let stacked =
            ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(format!("cannot stack images: {e}")))?;
        Self::new(stacked)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dim().0
    }

    pub fn size(&self) -> usize {
        self.0.dim().2
    }
}

/// Encoder bottleneck `B x C x s x s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap(Array4<f64>);

impl LatentMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, _, h, w) = data.dim();
        if h != w {
            return Err(Error::ShapeMismatch(format!("latent grid must be square, got {h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("latent entries must be finite".into()));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dim().0
    }

    pub fn channels(&self) -> usize {
        self.0.dim().1
    }

    pub fn grid(&self) -> usize {
        self.0.dim().2
    }

    pub(crate) fn from_raw(data: Array4<f64>) -> Self {
        Self(data)
    }
}

/// Non-negative per-pixel anomaly scores `B x S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap(Array3<f64>);

impl AnomalyMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::ShapeMismatch("anomaly maps must be non-negative".into()));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }
}

/// A named, shaped view of one parameter tensor.
#[derive(Debug)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
struct ResDown {
    conv_a: Conv2d,
    conv_b: Conv2d,
    skip: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct UpBlock {
    conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    seed: u64,
    encoder: Vec<ResDown>,
    decoder: Vec<UpBlock>,
    head: Conv2d,
}

fn conv_blocks<'a>(prefix: &str, conv: &'a Conv2d, out: &mut Vec<ParamBlock<'a>>) {
    out.push(ParamBlock {
        name: format!("{prefix}.weight"),
        shape: conv.weight.shape().to_vec(),
        data: conv.weight.as_slice().expect("standard layout"),
    });
    out.push(ParamBlock {
        name: format!("{prefix}.bias"),
        shape: conv.bias.shape().to_vec(),
        data: conv.bias.as_slice().expect("standard layout"),
    });
}

fn conv_blocks_mut<'a>(conv: &'a mut Conv2d, out: &mut Vec<&'a mut [f64]>) {
    out.push(conv.weight.as_slice_mut().expect("standard layout"));
    out.push(conv.bias.as_slice_mut().expect("standard layout"));
}

impl ModelParams {
    /// Seeded fan-in uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, seed, |cin, cout, k, s| Conv2d::init(cin, cout, k, s, &mut rng)))
    }

    fn build(config: ModelConfig, seed: u64, mut make: impl FnMut(usize, usize, usize, usize) -> Conv2d) -> Self {
        let w = config.base_width;
        let c = config.latent_channels;
        let enc = [(1, w), (w, 2 * w), (2 * w, c)];
        let encoder = enc
            .iter()
            .map(|&(cin, cout)| ResDown {
                conv_a: make(cin, cout, 3, 2),
                conv_b: make(cout, cout, 3, 1),
                skip: make(cin, cout, 1, 2),
            })
            .collect();
        let dec = [(c, 2 * w), (2 * w, w), (w, w)];
        let decoder = dec.iter().map(|&(cin, cout)| UpBlock { conv: make(cin, cout, 3, 1) }).collect();
        let head = make(w, 1, 3, 1);
        Self { config, seed, encoder, decoder, head }
    }

    /// Same architecture with every parameter zero (gradient accumulators,
    /// optimizer state, checkpoint loading).
    pub fn zeros_like(&self) -> Self {
        Self::build(self.config, self.seed, Conv2d::zeros)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All-zero parameters for `config`, filled in by checkpoint loading.
    pub(crate) fn zeroed(config: ModelConfig, seed: u64) -> Self {
        Self::build(config, seed, Conv2d::zeros)
    }

    /// Parameter tensors in their fixed serialization order.
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            conv_blocks(&format!("encoder.{i}.conv_a"), &b.conv_a, &mut out);
            conv_blocks(&format!("encoder.{i}.conv_b"), &b.conv_b, &mut out);
            conv_blocks(&format!("encoder.{i}.skip"), &b.skip, &mut out);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            conv_blocks(&format!("decoder.{i}.conv"), &b.conv, &mut out);
        }
        conv_blocks("head", &self.head, &mut out);
        out
    }

    /// Mutable slices in the same order as [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            conv_blocks_mut(&mut b.conv_a, &mut out);
            conv_blocks_mut(&mut b.conv_b, &mut out);
            conv_blocks_mut(&mut b.skip, &mut out);
        }
        for b in &mut self.decoder {
            conv_blocks_mut(&mut b.conv, &mut out);
        }
        conv_blocks_mut(&mut self.head, &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }
}

struct DownTrace {
    x: Array4<f64>,
    a: Array4<f64>,
    h: Array4<f64>,
    pre: Array4<f64>,
}

pub(crate) struct EncoderTrace {
    blocks: Vec<DownTrace>,
}

struct UpTrace {
    u: Array4<f64>,
    a: Array4<f64>,
}

pub(crate) struct DecoderTrace {
    blocks: Vec<UpTrace>,
    head_in: Array4<f64>,
    output: Array4<f64>,
}

impl DecoderTrace {
    pub fn output(&self) -> &Array4<f64> {
        &self.output
    }
}

fn check_image(x: &ImageBatch, m: &ModelParams) -> Result<()> {
    if x.size() != m.config.image_size {
        return Err(Error::ShapeMismatch(format!("image size {} but model expects {}", x.size(), m.config.image_size)));
    }
    Ok(())
}

fn check_latent(z: &LatentMap, m: &ModelParams) -> Result<()> {
    let want = (m.config.latent_channels, m.config.latent_size());
    if (z.channels(), z.grid()) != want {
        return Err(Error::ShapeMismatch(format!(
            "latent is {}x{}x{}, model expects {}x{}x{}",
            z.channels(),
            z.grid(),
            z.grid(),
            want.0,
            want.1,
            want.1
        )));
    }
    Ok(())
}

pub(crate) fn encode_traced(x: &ImageBatch, m: &ModelParams) -> Result<(LatentMap, EncoderTrace)> {
    check_image(x, m)?;
    let mut cur = x.0.clone();
    let mut blocks = Vec::with_capacity(m.encoder.len());
    let last = m.encoder.len() - 1;
    for (i, b) in m.encoder.iter().enumerate() {
        let a = b.conv_a.forward(&cur);
        let h = nn::relu(&a);
        let mut pre = b.conv_b.forward(&h);
        pre += &b.skip.forward(&cur);
        let out = if i == last { pre.clone() } else { nn::relu(&pre) };
        blocks.push(DownTrace { x: cur, a, h, pre });
        cur = out;
    }
    Ok((LatentMap(cur), EncoderTrace { blocks }))
}

impl EncoderTrace {
    /// Accumulates encoder gradients into `grad`; returns the image gradient.
    pub fn backward(&self, m: &ModelParams, dz: &Array4<f64>, grad: &mut ModelParams) -> Array4<f64> {
        let last = self.blocks.len() - 1;
        let mut d = dz.clone();
        for (i, t) in self.blocks.iter().enumerate().rev() {
            let (p, g) = (&m.encoder[i], &mut grad.encoder[i]);
            let dpre = if i == last { d } else { nn::relu_backward(&t.pre, &d) };
            let dh = p.conv_b.backward(&t.h, &dpre, &mut g.conv_b);
            let da = nn::relu_backward(&t.a, &dh);
            let mut dx = p.conv_a.backward(&t.x, &da, &mut g.conv_a);
            dx += &p.skip.backward(&t.x, &dpre, &mut g.skip);
            d = dx;
        }
        d
    }
}

pub(crate) fn decode_traced(z: &LatentMap, m: &ModelParams) -> Result<DecoderTrace> {
    check_latent(z, m)?;
    let mut cur = z.0.clone();
    let mut blocks = Vec::with_capacity(m.decoder.len());
    for b in &m.decoder {
        let u = nn::upsample2(&cur);
        let a = b.conv.forward(&u);
        cur = nn::relu(&a);
        blocks.push(UpTrace { u, a });
    }
    let output = nn::sigmoid(&m.head.forward(&cur));
    Ok(DecoderTrace { blocks, head_in: cur, output })
}

impl DecoderTrace {
    /// Backward from the gradient with respect to the reconstruction.
    pub fn backward(&self, m: &ModelParams, dxhat: &Array4<f64>, grad: &mut ModelParams) -> Array4<f64> {
        let mut dlogit = dxhat.clone();
        dlogit.zip_mut_with(&self.output, |g, &y| *g *= y * (1.0 - y));
        let mut d = m.head.backward(&self.head_in, &dlogit, &mut grad.head);
        for (i, t) in self.blocks.iter().enumerate().rev() {
            let da = nn::relu_backward(&t.a, &d);
            let du = m.decoder[i].conv.backward(&t.u, &da, &mut grad.decoder[i].conv);
            d = nn::upsample2_backward(&du);
        }
        d
    }
}

pub fn encode(x: &ImageBatch, m: &ModelParams) -> Result<LatentMap> {
    encode_traced(x, m).map(|(z, _)| z)
}

pub fn decode(z: &LatentMap, m: &ModelParams) -> Result<ImageBatch> {
    decode_traced(z, m).map(|t| ImageBatch(t.output))
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian smoothing with reflect padding; `sigma = 0` copies.
pub fn gaussian_smooth(plane: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.to_owned();
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] =
                taps.iter().enumerate().map(|(t, k)| k * plane[[y, reflect(x as isize + t as isize - r, w)]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] =
                taps.iter().enumerate().map(|(t, k)| k * tmp[[reflect(y as isize + t as isize - r, h), x]]).sum();
        }
    }
    out
}

/// `|x - xhat|` per pixel, then Gaussian smoothing.
pub fn residual_map(x: &ImageBatch, xhat: &ImageBatch, smoothing_sigma: f64) -> Result<AnomalyMap> {
    if x.0.dim() != xhat.0.dim() {
        return Err(Error::ShapeMismatch(format!("input {:?} vs reconstruction {:?}", x.0.dim(), xhat.0.dim())));
    }
    if smoothing_sigma.is_nan() || smoothing_sigma < 0.0 {
        return Err(Error::ShapeMismatch(format!("smoothing sigma {smoothing_sigma} must be >= 0")));
    }
    let (b, _, s, _) = x.0.dim();
    let mut out = Array3::zeros((b, s, s));
    for i in 0..b {
        let diff = (&x.0.slice(ndarray::s![i, 0, .., ..]) - &xhat.0.slice(ndarray::s![i, 0, .., ..])).mapv(f64::abs);
        out.index_axis_mut(Axis(0), i).assign(&gaussian_smooth(diff.view(), smoothing_sigma));
    }
    Ok(AnomalyMap(out))
}

/// Mean of the top `ceil(top_q * S^2)` pixels of every map.
pub fn image_score(a: &AnomalyMap, top_q: f64) -> Result<Vec<f64>> {
    if !(top_q > 0.0 && top_q <= 1.0) {
        return Err(Error::ShapeMismatch(format!("top_q = {top_q} must lie in (0, 1]")));
    }
    let mut scores = Vec::with_capacity(a.0.dim().0);
    for plane in a.0.outer_iter() {
        let mut vals: Vec<f64> = plane.iter().copied().collect();
        if vals.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = ((top_q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        vals.sort_by(|a, b| b.total_cmp(a));
        scores.push(vals[..n].iter().sum::<f64>() / n as f64);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, latent_channels: 8, base_width: 4 }
    }

    fn random_batch(b: usize, s: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Array4::from_shape_fn((b, 1, s, s), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn encode_decode_shapes() {
        let m = ModelParams::new(ModelConfig::default(), 1).unwrap();
        let z = encode(&random_batch(2, 64, 0), &m).unwrap();
        assert_eq!(z.data().dim(), (2, 64, 8, 8));
        let y = decode(&z, &m).unwrap();
        assert_eq!(y.data().dim(), (2, 1, 64, 64));
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shapes_hold_for_other_sizes() {
        for s in [8, 16, 24, 40] {
            let cfg = ModelConfig { image_size: s, ..small() };
            let m = ModelParams::new(cfg, 2).unwrap();
            let z = encode(&random_batch(1, s, 1), &m).unwrap();
            assert_eq!(z.data().dim(), (1, 8, s / 8, s / 8));
            assert_eq!(decode(&z, &m).unwrap().data().dim(), (1, 1, s, s));
        }
    }

    #[test]
    fn duplicated_samples_encode_identically() {
        let m = ModelParams::new(small(), 3).unwrap();
        let one = random_batch(1, 16, 4);
        let plane = one.data().slice(ndarray::s![0, 0, .., ..]).to_owned();
        let two = ImageBatch::from_planes([plane.view(), plane.view()]).unwrap();
        let z = encode(&two, &m).unwrap();
        assert_eq!(z.data().index_axis(Axis(0), 0), z.data().index_axis(Axis(0), 1));
        assert_eq!(z.data().index_axis(Axis(0), 0), encode(&one, &m).unwrap().data().index_axis(Axis(0), 0));
    }

    #[test]
    fn encode_is_bit_reproducible() {
        let x = random_batch(2, 16, 9);
        let a = encode(&x, &ModelParams::new(small(), 7).unwrap()).unwrap();
        let b = encode(&x, &ModelParams::new(small(), 7).unwrap()).unwrap();
        assert!(a.data().iter().zip(b.data().iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn zero_latent_decodes_to_constant() {
        let m = ModelParams::new(small(), 5).unwrap();
        let z = LatentMap::new(Array4::zeros((1, 8, 2, 2))).unwrap();
        let y = decode(&z, &m).unwrap();
        let first = y.data()[[0, 0, 0, 0]];
        assert!(y.data().iter().all(|&v| v == first));
    }

    #[test]
    fn shape_errors() {
        let m = ModelParams::new(small(), 5).unwrap();
        assert!(matches!(encode(&random_batch(1, 24, 0), &m), Err(Error::ShapeMismatch(_))));
        let z = LatentMap::new(Array4::zeros((1, 4, 2, 2))).unwrap();
        assert!(matches!(decode(&z, &m), Err(Error::ShapeMismatch(_))));
        assert!(ImageBatch::new(Array4::from_elem((1, 1, 8, 8), 1.5)).is_err());
        assert!(ImageBatch::new(Array4::zeros((1, 1, 12, 12))).is_err());
        assert!(ModelParams::new(ModelConfig { image_size: 20, ..small() }, 0).is_err());
    }

    #[test]
    fn residual_map_examples() {
        let x = random_batch(2, 8, 1);
        let zero = residual_map(&x, &x, 2.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut y = x.data().clone();
        y[[1, 0, 3, 4]] -= 0.25;
        let y = ImageBatch(y);
        let m = residual_map(&x, &y, 0.0).unwrap();
        for ((b, r, c), &v) in m.data().indexed_iter() {
            let want = if (b, r, c) == (1, 3, 4) { 0.25 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_preserves_interior_mass() {
        let mut plane = Array2::zeros((32, 32));
        plane[[16, 15]] = 1.0;
        let x = ImageBatch::new(plane.clone().insert_axis(Axis(0)).insert_axis(Axis(0))).unwrap();
        let y = ImageBatch::new(Array4::zeros((1, 1, 32, 32))).unwrap();
        let m = residual_map(&x, &y, 1.0).unwrap();
        assert!((m.data().sum() - 1.0).abs() < 1e-3);
        let sm = gaussian_smooth(plane.view(), 1.0);
        assert!(sm[[16, 15]] > sm[[16, 16]] && sm[[16, 16]] > sm[[16, 17]]);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn image_score_examples() {
        let c = AnomalyMap::new(Array3::from_elem((1, 8, 8), 0.3)).unwrap();
        for q in [0.01, 0.5, 1.0] {
            assert!((image_score(&c, q).unwrap()[0] - 0.3).abs() < 1e-15);
        }
        let mut one = Array3::zeros((1, 8, 8));
        one[[0, 2, 5]] = 1.0;
        assert_eq!(image_score(&AnomalyMap::new(one).unwrap(), 1.0 / 64.0).unwrap(), vec![1.0]);
        let m = AnomalyMap::new(array![[[1.0, 2.0], [3.0, 4.0]]]).unwrap();
        assert_eq!(image_score(&m, 0.5).unwrap(), vec![3.5]);
        assert_eq!(image_score(&m, 1.0).unwrap(), vec![2.5]);
        assert!(image_score(&m, 0.0).is_err());
    }
}
