//! The composite-branch change-detection network.
//!
//! Both images pass through one shared low-level encoder (DConv1–3 with
//! pooling). High-level features come from two encoder branches of identical
//! shape, branch A for the first image and branch B for the second (DConv4,
//! pool, DConv5). Each branch has its own decoder of transposed convolutions
//! with skip connections to that image's own encoder activations. The two
//! decoder outputs are concatenated (A then B) and fused by two 1×1
//! convolutions and a sigmoid.
//!
//! A DConv block is two consecutive convolution → batch-norm → ReLU units
//! with 3×3 kernels and padding 1.
//!
//! Parameters are named with dotted paths, for example
//! `shared.dconv1.0.weight`, `enc_a.dconv4.1.bn.gamma`, `dec_b.tconv6.weight`
//! or `head.conv10.bias`. Batch-norm running statistics are saved as
//! `….bn.running_mean` and `….bn.running_var`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{ChangeMap, RasterImage, ScalarMap};
use crate::tensor::{
    checkpoint, xavier_init, BatchNormState, Graph, Mode, ParamId, ParamStore, Tensor, Var,
};
use crate::threshold::fixed_threshold;

/// Channel counts of DConv1..DConv5 before scaling, as multiples of the base
/// width.
const ENCODER_MULTIPLIERS: [usize; 5] = [1, 2, 4, 8, 16];
/// Width of the first fusion convolution before scaling.
const FUSION_WIDTH: usize = 16;
/// Spatial dimensions must be multiples of this (four 2×2 poolings).
pub const SPATIAL_MULTIPLE: usize = 16;
/// Threshold applied to the network output to obtain a change map.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// How the two images share encoder and decoder parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchMode {
    /// Shared low-level encoder, separate high-level branches.
    #[default]
    Composite,
    /// One set of weights for both images (branch B aliases branch A).
    Single,
    /// Two complete, unshared encoders.
    Double,
}

impl BranchMode {
    pub const ALL: [BranchMode; 3] = [
        BranchMode::Single,
        BranchMode::Double,
        BranchMode::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Composite => "composite",
            BranchMode::Single => "single",
            BranchMode::Double => "double",
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(BranchMode::Composite),
            "single" => Ok(BranchMode::Single),
            "double" => Ok(BranchMode::Double),
            _ => Err(Error::Argument(format!(
                "unknown branch mode {s:?} (expected single, double or composite)"
            ))),
        }
    }
}

/// Parameter names with their shapes.
pub type ParamShapes = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Channels of DConv1 before scaling.
    pub base_width: usize,
    /// Divisor applied to every channel count except the single output.
    pub scale: usize,
    pub branch_mode: BranchMode,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            scale: 1,
            branch_mode: BranchMode::Composite,
            input_channels: 3,
        }
    }
}

/// Channel counts after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    /// DConv1..DConv5.
    pub encoder: [usize; 5],
    /// DConv6..DConv9 (and TConv6..TConv9).
    pub decoder: [usize; 4],
    /// Conv10, Conv11.
    pub head: [usize; 2],
}

/// Output shape of one stage of the network for a single image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub name: &'static str,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl NetworkConfig {
    pub fn with_scale(scale: usize) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Result<Widths> {
        if self.scale == 0 {
            return Err(Error::Config("network scale must be at least 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config(
                "network needs at least one input channel".into(),
            ));
        }
        let div = |k: usize| {
            let w = k / self.scale;
            if w == 0 {
                Err(Error::Config(format!(
                    "scale {} reduces a {k}-channel layer to zero channels",
                    self.scale
                )))
            } else {
                Ok(w)
            }
        };
        let mut encoder = [0; 5];
        for (e, m) in encoder.iter_mut().zip(ENCODER_MULTIPLIERS) {
            *e = div(self.base_width * m)?;
        }
        Ok(Widths {
            encoder,
            decoder: [encoder[3], encoder[2], encoder[1], encoder[0]],
            head: [div(FUSION_WIDTH)?, 1],
        })
    }

    /// Stage-by-stage output shapes for one image of `height`×`width`,
    /// computed without running the network.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<Vec<StageShape>> {
        let w = self.widths()?;
        check_spatial(height, width)?;
        let s = |name, channels, div: usize| StageShape {
            name,
            channels,
            height: height / div,
            width: width / div,
        };
        let up = |name, channels, div: usize| StageShape {
            name,
            channels,
            height: height * 2 / div,
            width: width * 2 / div,
        };
        Ok(vec![
            s("dconv1", w.encoder[0], 1),
            s("pool1", w.encoder[0], 2),
            s("dconv2", w.encoder[1], 2),
            s("pool2", w.encoder[1], 4),
            s("dconv3", w.encoder[2], 4),
            s("pool3", w.encoder[2], 8),
            s("dconv4", w.encoder[3], 8),
            s("pool4", w.encoder[3], 16),
            s("dconv5", w.encoder[4], 16),
            up("tconv6", w.decoder[0], 16),
            s("dconv6", w.decoder[0], 8),
            up("tconv7", w.decoder[1], 8),
            s("dconv7", w.decoder[1], 4),
            up("tconv8", w.decoder[2], 4),
            s("dconv8", w.decoder[2], 2),
            up("tconv9", w.decoder[3], 2),
            s("dconv9", w.decoder[3], 1),
            s("conv10", w.head[0], 1),
            s("conv11", w.head[1], 1),
        ])
    }
}

fn check_spatial(height: usize, width: usize) -> Result<()> {
    if height == 0
        || width == 0
        || !height.is_multiple_of(SPATIAL_MULTIPLE)
        || !width.is_multiple_of(SPATIAL_MULTIPLE)
    {
        return Err(Error::Shape(format!(
            "network input {height}x{width} is not a positive multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// One convolution → batch-norm → ReLU unit.
#[derive(Debug, Clone, Copy)]
struct ConvBnRelu {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Debug, Clone, Copy)]
struct DConv([ConvBnRelu; 2]);

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    tconv: [ParamId; 4],
    dconv: [DConv; 4],
}

#[derive(Debug, Clone)]
struct Layers {
    /// DConv1..3 applied to the first image.
    low_a: [DConv; 3],
    /// DConv1..3 applied to the second image (same as `low_a` unless double).
    low_b: [DConv; 3],
    /// DConv4, DConv5 for each image.
    high_a: [DConv; 2],
    high_b: [DConv; 2],
    dec_a: Decoder,
    dec_b: Decoder,
    conv10: Conv,
    conv11: Conv,
}

struct Builder<'r, R: Rng> {
    params: ParamStore,
    bn: Vec<(String, BatchNormState)>,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = xavier_init(shape, self.rng);
        self.params.add(name, t)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        Conv {
            weight: self.weight(format!("{prefix}.weight"), &[cout, cin, k, k]),
            bias: self
                .params
                .add(format!("{prefix}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn dconv(&mut self, prefix: &str, cin: usize, cout: usize) -> DConv {
        let unit = |this: &mut Self, i: usize, cin: usize| {
            let p = format!("{prefix}.{i}");
            let c = this.conv(&p, cin, cout, 3);
            let gamma = this
                .params
                .add(format!("{p}.bn.gamma"), Tensor::full(&[cout], 1.0));
            let beta = this
                .params
                .add(format!("{p}.bn.beta"), Tensor::zeros(&[cout]));
            this.bn.push((format!("{p}.bn"), BatchNormState::new(cout)));
            ConvBnRelu {
                weight: c.weight,
                bias: c.bias,
                gamma,
                beta,
                bn: this.bn.len() - 1,
            }
        };
        let first = unit(self, 0, cin);
        let second = unit(self, 1, cout);
        DConv([first, second])
    }

    fn low(&mut self, prefix: &str, cin: usize, w: &Widths) -> [DConv; 3] {
        [
            self.dconv(&format!("{prefix}.dconv1"), cin, w.encoder[0]),
            self.dconv(&format!("{prefix}.dconv2"), w.encoder[0], w.encoder[1]),
            self.dconv(&format!("{prefix}.dconv3"), w.encoder[1], w.encoder[2]),
        ]
    }

    fn high(&mut self, prefix: &str, w: &Widths) -> [DConv; 2] {
        [
            self.dconv(&format!("{prefix}.dconv4"), w.encoder[2], w.encoder[3]),
            self.dconv(&format!("{prefix}.dconv5"), w.encoder[3], w.encoder[4]),
        ]
    }

    fn decoder(&mut self, prefix: &str, w: &Widths) -> Decoder {
        // inputs to TConv6..9 and the skip widths they are concatenated with
        let inputs = [w.encoder[4], w.decoder[0], w.decoder[1], w.decoder[2]];
        let skips = [w.encoder[3], w.encoder[2], w.encoder[1], w.encoder[0]];
        let mut tconv = Vec::with_capacity(4);
        let mut dconv = Vec::with_capacity(4);
        for i in 0..4 {
            let out = w.decoder[i];
            tconv.push(self.weight(
                format!("{prefix}.tconv{}.weight", i + 6),
                &[inputs[i], out, 2, 2],
            ));
            dconv.push(self.dconv(&format!("{prefix}.dconv{}", i + 6), out + skips[i], out));
        }
        Decoder {
            tconv: tconv.try_into().expect("four"),
            dconv: dconv.try_into().expect("four"),
        }
    }
}

/// The change-detection network: parameters, batch-norm statistics and the
/// layer wiring.
#[derive(Debug, Clone)]
pub struct ChangeDetector {
    config: NetworkConfig,
    params: ParamStore,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    layers: Layers,
}

impl ChangeDetector {
    /// Build a freshly initialized network. Convolution and transposed
    /// convolution weights are Xavier-uniform; biases and batch-norm shifts
    /// are zero and batch-norm scales one.
    pub fn build(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let w = config.widths()?;
        let cin = config.input_channels;
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            rng,
        };
        let (low_a, low_b) = match config.branch_mode {
            BranchMode::Double => (b.low("enc_a", cin, &w), b.low("enc_b", cin, &w)),
            _ => {
                let low = b.low("shared", cin, &w);
                (low, low)
            }
        };
        let high_a = b.high("enc_a", &w);
        let high_b = match config.branch_mode {
            BranchMode::Single => high_a,
            _ => b.high("enc_b", &w),
        };
        let dec_a = b.decoder("dec_a", &w);
        let dec_b = match config.branch_mode {
            BranchMode::Single => dec_a,
            _ => b.decoder("dec_b", &w),
        };
        let fused = 2 * w.decoder[3];
        let conv10 = b.conv("head.conv10", fused, w.head[0], 1);
        let conv11 = b.conv("head.conv11", w.head[0], w.head[1], 1);
        let (bn_names, bn) = b.bn.into_iter().unzip();
        Ok(Self {
            config,
            params: b.params,
            bn_names,
            bn,
            layers: Layers {
                low_a,
                low_b,
                high_a,
                high_b,
                dec_a,
                dec_b,
                conv10,
                conv11,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn batchnorm_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    /// Parameter names and shapes of the branch-A and branch-B encoder and
    /// decoder layers, with the branch prefix removed.
    pub fn branch_shapes(&self) -> (ParamShapes, ParamShapes) {
        let collect = |enc: &str, dec: &str| {
            self.params
                .ids()
                .filter_map(|id| {
                    let name = self.params.name(id);
                    let rest = name
                        .strip_prefix(enc)
                        .filter(|r| r.starts_with(".dconv4") || r.starts_with(".dconv5"))
                        .or_else(|| name.strip_prefix(dec))?;
                    Some((rest.to_string(), self.params.value(id).shape().to_vec()))
                })
                .collect::<Vec<_>>()
        };
        let a = collect("enc_a", "dec_a");
        let b = if self.config.branch_mode == BranchMode::Single {
            a.clone()
        } else {
            collect("enc_b", "dec_b")
        };
        (a, b)
    }

    fn conv_bn_relu(&mut self, g: &mut Graph, x: Var, u: ConvBnRelu, mode: Mode) -> Result<Var> {
        let w = g.param(&self.params, u.weight);
        let b = g.param(&self.params, u.bias);
        let y = g.conv2d(x, w, Some(b), 1)?;
        let gamma = g.param(&self.params, u.gamma);
        let beta = g.param(&self.params, u.beta);
        let y = g.batchnorm(y, gamma, beta, &mut self.bn[u.bn], mode)?;
        Ok(g.relu(y))
    }

    fn dconv(&mut self, g: &mut Graph, x: Var, d: DConv, mode: Mode) -> Result<Var> {
        let y = self.conv_bn_relu(g, x, d.0[0], mode)?;
        self.conv_bn_relu(g, y, d.0[1], mode)
    }

    fn conv(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        let w = g.param(&self.params, c.weight);
        let b = g.param(&self.params, c.bias);
        g.conv2d(x, w, Some(b), 0)
    }

    /// Encoder and decoder for one image; returns the DConv9 output.
    fn branch(
        &mut self,
        g: &mut Graph,
        x: Var,
        low: [DConv; 3],
        high: [DConv; 2],
        dec: Decoder,
        mode: Mode,
    ) -> Result<Var> {
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for d in low.into_iter().chain(high.into_iter().take(1)) {
            h = self.dconv(g, h, d, mode)?;
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        h = self.dconv(g, h, high[1], mode)?;
        for i in 0..4 {
            let w = g.param(&self.params, dec.tconv[i]);
            let up = g.tconv2(h, w)?;
            let cat = g.concat_channels(up, skips[3 - i])?;
            h = self.dconv(g, cat, dec.dconv[i], mode)?;
        }
        Ok(h)
    }

    /// Record a forward pass on NCHW inputs; returns the change probability
    /// map of shape `(N, 1, H, W)`.
    pub fn forward(&mut self, g: &mut Graph, x1: Var, x2: Var, mode: Mode) -> Result<Var> {
        let s1 = g.value(x1).dims4()?;
        let s2 = g.value(x2).dims4()?;
        if s1 != s2 {
            return Err(Error::Shape(format!(
                "image tensors differ in shape: {:?} vs {:?}",
                g.value(x1).shape(),
                g.value(x2).shape()
            )));
        }
        if s1[1] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels, s1[1]
            )));
        }
        check_spatial(s1[2], s1[3])?;
        let l = self.layers.clone();
        let a = self.branch(g, x1, l.low_a, l.high_a, l.dec_a, mode)?;
        let b = self.branch(g, x2, l.low_b, l.high_b, l.dec_b, mode)?;
        let fused = g.concat_channels(a, b)?;
        let h = self.conv(g, fused, l.conv10)?;
        let h = self.conv(g, h, l.conv11)?;
        Ok(g.sigmoid(h))
    }

    /// Eval-mode change probabilities for an image pair of any size. Inputs
    /// are reflect-padded on the bottom and right to multiples of 16 and the
    /// result cropped back.
    pub fn predict_di(&mut self, x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
        if !x1.same_shape(x2) {
            return Err(Error::Shape(format!(
                "images differ in shape: {}x{}x{} vs {}x{}x{}",
                x1.height(),
                x1.width(),
                x1.channels(),
                x2.height(),
                x2.width(),
                x2.channels()
            )));
        }
        let (h, w) = (x1.height(), x1.width());
        let ph = h.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let pw = w.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let mut g = Graph::new();
        let t1 = g.input(padded_tensor(x1, ph, pw));
        let t2 = g.input(padded_tensor(x2, ph, pw));
        let out = self.forward(&mut g, t1, t2, Mode::Eval)?;
        let data = g.value(out).data();
        ScalarMap::from_fn(h, w, |r, c| data[r * pw + c])
    }

    /// Eval-mode prediction thresholded at 0.5.
    pub fn predict_change_map(
        &mut self,
        x1: &RasterImage,
        x2: &RasterImage,
    ) -> Result<(ScalarMap, ChangeMap)> {
        let di = self.predict_di(x1, x2)?;
        let cm = fixed_threshold(&di, DECISION_THRESHOLD)?;
        Ok((di, cm))
    }

    /// All tensors of the model in checkpoint order: parameters, then
    /// batch-norm running statistics.
    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .ids()
            .map(|id| {
                (
                    self.params.name(id).to_string(),
                    self.params.value(id).clone(),
                )
            })
            .collect();
        for (name, s) in self.bn_names.iter().zip(&self.bn) {
            let c = s.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], s.running_mean.clone()).expect("length"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], s.running_var.clone()).expect("length"),
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.state_entries())
    }

    /// Replace all parameters and statistics with those of a checkpoint
    /// written for the same configuration.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        checkpoint::check_layout(&self.state_entries(), &entries)?;
        let n = self.params.len();
        let mut it = entries.into_iter();
        for id in self.params.ids().collect::<Vec<_>>() {
            *self.params.value_mut(id) = it.next().expect("layout checked").1;
        }
        for s in &mut self.bn {
            s.running_mean = it.next().expect("layout checked").1.into_data();
            s.running_var = it.next().expect("layout checked").1.into_data();
        }
        debug_assert_eq!(self.params.len(), n);
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_entries(checkpoint::read(path)?)
    }
}

/// Index into `0..n` after mirror reflection without repeating the edge.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// A `(1, C, ph, pw)` tensor of `img`, reflect-padded on the bottom/right.
fn padded_tensor(img: &RasterImage, ph: usize, pw: usize) -> Tensor {
    let c = img.channels();
    let mut data = vec![0.0; c * ph * pw];
    for r in 0..ph {
        let sr = reflect(r, img.height());
        for col in 0..pw {
            let px = img.pixel(sr, reflect(col, img.width()));
            for ch in 0..c {
                data[(ch * ph + r) * pw + col] = px[ch];
            }
        }
    }
    Tensor::new(vec![1, c, ph, pw], data).expect("length")
}

/// Stack equally sized images into one `(N, C, H, W)` tensor.
pub fn images_to_tensor(images: &[&RasterImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("no images to stack".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape("images to stack differ in shape".into()));
        }
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data.push(img.get(r, col, ch));
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
