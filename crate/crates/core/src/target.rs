//! The frozen re-identification embedder.
//!
//! Five conv+ReLU stages followed by generalized mean pooling. Distances
//! between images are Euclidean distances of L2-normalized pooled features.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, AmdError, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::weights::{self, NamedTensors};

pub const STAGE_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub gmp_power: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            input_channels: 3,
            height: 64,
            width: 32,
            widths: vec![8, 16, 32, 32, 64],
            strides: vec![2, 2, 2, 1, 1],
            kernel: 3,
            gmp_power: 3.0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != STAGE_COUNT || self.strides.len() != STAGE_COUNT {
            return Err(AmdError::Config(format!(
                "embedder needs exactly {} stage widths and strides",
                STAGE_COUNT
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0) {
            return Err(AmdError::Config("stage widths and strides must be positive".into()));
        }
        if self.feature_channels() % 8 != 0 {
            return Err(AmdError::Config(format!(
                "last stage width {} must be divisible by 8",
                self.feature_channels()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(AmdError::Config("kernel size must be odd".into()));
        }
        if !(self.gmp_power >= 1.0) {
            return Err(AmdError::Config(format!("pooling power {} must be >= 1", self.gmp_power)));
        }
        let (h, w) = self.stage_dims(STAGE_COUNT);
        if h == 0 || w == 0 {
            return Err(AmdError::Config("input too small for the stage strides".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Spatial size after `n` stages.
    pub fn stage_dims(&self, n: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let mut hw = (self.height, self.width);
        for &s in &self.strides[..n] {
            let step = |x: usize| (x + 2 * pad).checked_sub(self.kernel).map_or(0, |v| v / s + 1);
            hw = (step(hw.0), step(hw.1));
        }
        hw
    }

    pub fn stage_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_channels
        } else {
            self.widths[stage - 1]
        }
    }
}

/// One convolution with per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Real = f64> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvLayer<T> {
    /// He-uniform kernel, constant bias.
    pub fn init(c_out: usize, c_in: usize, k: usize, stride: usize, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvLayer {
            kernel: Tensor::uniform(&[c_out, c_in, k, k], bound, rng),
            bias: Tensor::full(&[c_out], T::of(bias)),
            stride,
            padding: k / 2,
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            kernel: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: k / 2,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    /// Records the layer on `g`. Returns the output and the (kernel, bias) nodes.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let (k, b) = if trainable {
            (g.param(&self.kernel), g.param(&self.bias))
        } else {
            (g.constant(&self.kernel), g.constant(&self.bias))
        };
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        let y = g.channel_bias(y, b)?;
        Ok((y, [k, b]))
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

/// Activations of one embedded image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T: Real = f64> {
    /// Output of each stage, after ReLU.
    pub stages: Vec<Tensor<T>>,
    /// Final `C×h×w` map; the same tensor as the last stage output.
    pub feature_map: Tensor<T>,
    /// Pooled `C`-vector.
    pub feature: Tensor<T>,
}

/// Graph nodes produced by [`Embedder::forward`].
#[derive(Debug, Clone)]
pub struct EmbedNodes {
    pub stages: Vec<Var>,
    pub feature: Var,
    /// Parameter leaves in [`Embedder::tensors`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder<T: Real = f64> {
    config: EmbedderConfig,
    layers: Vec<ConvLayer<T>>,
    frozen: bool,
}

impl<T: Real> Embedder<T> {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..STAGE_COUNT)
            .map(|s| {
                ConvLayer::init(
                    config.widths[s],
                    config.stage_in_channels(s),
                    config.kernel,
                    config.strides[s],
                    0.01,
                    &mut rng,
                )
            })
            .collect();
        Ok(Embedder {
            config,
            layers,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn gmp_power(&self) -> T {
        T::of(self.config.gmp_power)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [c.input_channels, c.height, c.width] {
            return Err(dim_err!(
                "image {:?} does not match embedder input {}×{}×{}",
                shape,
                c.input_channels,
                c.height,
                c.width
            ));
        }
        Ok(())
    }

    /// Runs stages `from..to` starting at `x` (the output of stage `from-1`).
    pub fn forward_stages(
        &self,
        g: &mut Graph<T>,
        x: Var,
        from: usize,
        to: usize,
        trainable: bool,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut outs = Vec::with_capacity(to - from);
        let mut params = Vec::new();
        let mut cur = x;
        for layer in &self.layers[from..to] {
            let (y, p) = layer.forward(g, cur, trainable && !self.frozen)?;
            cur = g.relu(y);
            outs.push(cur);
            params.extend(p);
        }
        Ok((outs, params))
    }

    /// Records the full forward pass. Parameters become gradient leaves only
    /// when the embedder is not frozen.
    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<EmbedNodes> {
        self.check_image(g.value(image).shape())?;
        let (stages, params) = self.forward_stages(g, image, 0, STAGE_COUNT, true)?;
        let feature = g.gmp(*stages.last().unwrap(), self.gmp_power())?;
        Ok(EmbedNodes {
            stages,
            feature,
            params,
        })
    }

    /// Gradient-free forward pass.
    pub fn embed(&self, image: &Tensor<T>) -> Result<FeatureBundle<T>> {
        self.check_image(image.shape())?;
        let mut g = Graph::new();
        let x = g.constant(image);
        let mut cur = x;
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        for layer in &self.layers {
            let (y, _) = layer.forward(&mut g, cur, false)?;
            cur = g.relu(y);
            stages.push(g.value(cur).clone());
        }
        let feature = g.gmp(cur, self.gmp_power())?;
        Ok(FeatureBundle {
            feature_map: stages.last().unwrap().clone(),
            feature: g.value(feature).clone(),
            stages,
        })
    }

    /// Rescales the last stage so the mean pooled-feature norm over `images`
    /// equals one. ReLU and pooling are positively homogeneous, so normalized
    /// distances are unchanged.
    pub fn calibrate_feature_scale<'a>(&mut self, images: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<T> {
        let mut total = T::zero();
        let mut n = 0usize;
        for img in images {
            total = total + ops::norm(self.embed(img)?.feature.data());
            n += 1;
        }
        if n == 0 || !(total > T::zero()) {
            return Err(AmdError::DegenerateFeature("cannot calibrate on zero features".into()));
        }
        let mean = total / crate::scalar::count(n);
        let c = T::one() / mean;
        let last = self.layers.last_mut().unwrap();
        last.kernel.data_mut().iter_mut().for_each(|v| *v = *v * c);
        last.bias.data_mut().iter_mut().for_each(|v| *v = *v * c);
        Ok(c)
    }

    pub fn named_tensors(&self) -> NamedTensors<T> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("stage{}.kernel", i + 1), l.kernel.clone()),
                    (format!("stage{}.bias", i + 1), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.named_tensors())
    }

    /// Loads weights saved by [`Embedder::save`]; the result is frozen.
    pub fn load(config: EmbedderConfig, path: &Path) -> Result<Self> {
        let named = weights::load(path)?;
        Self::from_named(config, named)
    }

    pub fn from_named(config: EmbedderConfig, named: NamedTensors<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != 2 * STAGE_COUNT {
            return Err(AmdError::Format(format!(
                "expected {} tensors, found {}",
                2 * STAGE_COUNT,
                named.len()
            )));
        }
        for ((name, t), (want, slot)) in named
            .into_iter()
            .zip(model.named_tensors().into_iter().map(|(n, _)| n).zip(model.tensors_mut()))
        {
            if name != want || t.shape() != slot.shape() {
                return Err(AmdError::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    name,
                    t.shape(),
                    want,
                    slot.shape()
                )));
            }
            *slot = t;
        }
        model.freeze();
        Ok(model)
    }
}

/// Distance between two pooled features: Euclidean distance of their
/// L2-normalized copies, in `[0, 2]`.
pub fn pair_distance<T: Real>(f_i: &Tensor<T>, f_j: &Tensor<T>) -> Result<T> {
    ops::normalized_distance(f_i.data(), f_j.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims() {
        let c = EmbedderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_dims(5), (8, 4));
        assert_eq!(c.stage_dims(1), (32, 16));
    }

    #[test]
    fn config_rejects_bad_width() {
        let c = EmbedderConfig {
            widths: vec![8, 16, 32, 32, 60],
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(AmdError::Config(_))));
        let c = EmbedderConfig {
            widths: vec![8, 16, 32, 64],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let e = Embedder::<f64>::new(EmbedderConfig::default(), 1).unwrap();
        let b = e.embed(&Tensor::zeros(&[3, 64, 32])).unwrap();
        assert!(b.feature.validate().is_ok());
        assert_eq!(b.feature.len(), 64);
        assert_eq!(b.feature_map.shape(), &[64, 8, 4]);
    }

    #[test]
    fn embedding_is_deterministic_and_nonzero() {
        use rand::Rng;
        let e = Embedder::<f64>::new(EmbedderConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_vec(&[3, 64, 32], (0..3 * 64 * 32).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let a = e.embed(&img).unwrap();
        let b = e.embed(&img).unwrap();
        assert_eq!(a, b);
        assert!(ops::norm(a.feature.data()) > 0.0);
        let pooled = ops::gmp_forward(a.feature_map.data(), 64, 3.0);
        assert_eq!(pooled, a.feature.data());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let e = Embedder::<f64>::new(EmbedderConfig::default(), 1).unwrap();
        assert!(matches!(e.embed(&Tensor::zeros(&[3, 32, 32])), Err(AmdError::Dimension(_))));
    }

    #[test]
    fn pair_distance_properties() {
        let a = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(pair_distance(&a, &a).unwrap(), 0.0);
        assert!((pair_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let c = Tensor::from_vec(&[3], vec![0.3, 0.5, 2.0]).unwrap();
        assert_eq!(pair_distance(&a, &c).unwrap(), pair_distance(&c, &a).unwrap());
        assert!(pair_distance(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn calibration_preserves_distances() {
        use rand::Rng;
        let mut e = Embedder::<f64>::new(EmbedderConfig::default(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_vec(&[3, 64, 32], (0..3 * 64 * 32).map(|_| rng.gen::<f64>()).collect()).unwrap())
            .collect();
        let before: Vec<_> = imgs.iter().map(|i| e.embed(i).unwrap().feature).collect();
        e.calibrate_feature_scale(imgs.iter()).unwrap();
        let after: Vec<_> = imgs.iter().map(|i| e.embed(i).unwrap().feature).collect();
        let mean_norm: f64 = after.iter().map(|f| ops::norm(f.data())).sum::<f64>() / 4.0;
        assert!((mean_norm - 1.0).abs() < 1e-12);
        let d0 = pair_distance(&before[0], &before[1]).unwrap();
        let d1 = pair_distance(&after[0], &after[1]).unwrap();
        assert!((d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let e = Embedder::<f64>::new(EmbedderConfig::default(), 3).unwrap();
        e.save(&path).unwrap();
        let back = Embedder::<f64>::load(EmbedderConfig::default(), &path).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.layers(), e.layers());
    }
}
