//! The interpreter network and attribute decomposition of distances.
//!
//! The interpreter reuses the first `n_shared` stages of the frozen target
//! embedder, owns trainable copies of the remaining stages, and ends in an
//! attribute decomposition head: a `C/8×3×3` conv, an `M×1×1` conv and PePU.
//! Its `M` positive attention maps mask the target's final feature map; the
//! masked maps are pooled and compared per attribute.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::graph::{Graph, Var};
use crate::losses::pairwise_xor;
use crate::ops;
use crate::scalar::{count, Real};
use crate::target::{pair_distance, ConvLayer, Embedder, FeatureBundle, STAGE_COUNT};
use crate::tensor::Tensor;
use crate::weights::{self, NamedTensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterConfig {
    pub n_shared: usize,
    pub m: usize,
    /// PePU scale; `None` means `1/M`.
    pub kappa: Option<f64>,
    pub tau: f64,
    pub seed: u64,
}

impl InterpreterConfig {
    pub fn new(m: usize) -> Self {
        InterpreterConfig {
            n_shared: 3,
            m,
            kappa: None,
            tau: 0.5,
            seed: 0,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(1.0 / self.m as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shared < 1 || self.n_shared > STAGE_COUNT {
            return Err(AmdError::Config(format!(
                "shared stage count {} outside 1..={}",
                self.n_shared, STAGE_COUNT
            )));
        }
        if self.m < 2 {
            return Err(AmdError::Config("interpreter needs at least 2 attributes".into()));
        }
        ops::check_pepu_params(self.kappa(), self.tau)
    }
}

/// `M×h×w` strictly positive attention maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AamStack<T: Real = f64> {
    pub maps: Tensor<T>,
}

impl<T: Real> AamStack<T> {
    pub fn m(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn channel(&self, k: usize) -> &[T] {
        self.maps.outer(k)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

/// Everything the interpreter derives from one image in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExplanation<T: Real = f64> {
    pub feature: Tensor<T>,
    pub aams: AamStack<T>,
    /// Pooled masked features `f^k`, one `C`-vector per attribute.
    pub attribute_features: Vec<Vec<T>>,
}

/// Decomposition of one pair's distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExplanation {
    pub d: f64,
    pub d_hat: f64,
    pub components: Vec<f64>,
    pub ratios: Vec<f64>,
    pub pair_attributes: Vec<u8>,
    pub exclusive_count: usize,
    /// Set when `d̂ = 0`; ratios are then uniform.
    pub degenerate: bool,
}

impl PairExplanation {
    pub fn from_parts<T: Real>(d: T, components: &[T], a_i: &[u8], a_j: &[u8]) -> Result<Self> {
        let (pair_attributes, exclusive_count) = pairwise_xor(a_i, a_j)?;
        if components.len() != pair_attributes.len() {
            return Err(AmdError::Input(format!(
                "{} components for {} attributes",
                components.len(),
                pair_attributes.len()
            )));
        }
        let components: Vec<f64> = components.iter().map(|c| c.as_f64()).collect();
        let d_hat: f64 = components.iter().sum();
        let m = components.len();
        let degenerate = !(d_hat > 0.0);
        let ratios = if degenerate {
            vec![1.0 / m as f64; m]
        } else {
            components.iter().map(|c| c / d_hat).collect()
        };
        Ok(PairExplanation {
            d: d.as_f64(),
            d_hat,
            components,
            ratios,
            pair_attributes,
            exclusive_count,
            degenerate,
        })
    }

    /// Attribute indices sorted by contribution ratio, largest first; ties
    /// keep attribute order.
    pub fn ranked_attributes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ratios.len()).collect();
        idx.sort_by(|&a, &b| self.ratios[b].total_cmp(&self.ratios[a]));
        idx
    }
}

/// Graph nodes of one interpreter forward pass.
#[derive(Debug, Clone)]
pub struct InterpretNodes {
    pub aams: Var,
    /// Trainable parameter leaves in [`Interpreter::tensors`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Interpreter<T: Real = f64> {
    config: InterpreterConfig,
    target: Arc<Embedder<T>>,
    upper: Vec<ConvLayer<T>>,
    head_conv: ConvLayer<T>,
    head_proj: ConvLayer<T>,
}

impl<T: Real> Interpreter<T> {
    /// Builds an interpreter on a frozen target.
    ///
    /// Stages after the shared prefix are freshly initialized from
    /// `config.seed`; the final `1×1` conv starts at zero so every attention
    /// map initially equals `κ`.
    pub fn attach(target: Arc<Embedder<T>>, config: InterpreterConfig) -> Result<Self> {
        config.validate()?;
        if !target.is_frozen() {
            return Err(AmdError::State("target embedder must be frozen before attaching".into()));
        }
        let ec = target.config().clone();
        let c = ec.feature_channels();
        if c % 8 != 0 {
            return Err(AmdError::Config(format!("feature channels {} not divisible by 8", c)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let upper = (config.n_shared..STAGE_COUNT)
            .map(|s| ConvLayer::init(ec.widths[s], ec.stage_in_channels(s), ec.kernel, ec.strides[s], 0.01, &mut rng))
            .collect();
        let head_conv = ConvLayer::init(c / 8, c, 3, 1, 0.0, &mut rng);
        let head_proj = ConvLayer::zeros(config.m, c / 8, 1, 1);
        Ok(Interpreter {
            config,
            target,
            upper,
            head_conv,
            head_proj,
        })
    }

    pub fn config(&self) -> &InterpreterConfig {
        &self.config
    }

    pub fn target(&self) -> &Embedder<T> {
        &self.target
    }

    pub fn target_arc(&self) -> &Arc<Embedder<T>> {
        &self.target
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn head_layers_mut(&mut self) -> (&mut ConvLayer<T>, &mut ConvLayer<T>) {
        (&mut self.head_conv, &mut self.head_proj)
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.upper.iter().chain([&self.head_conv, &self.head_proj])
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.upper
            .iter_mut()
            .chain([&mut self.head_conv, &mut self.head_proj])
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layers().map(ConvLayer::parameter_count).sum()
    }

    /// Output of the last shared stage for a target feature bundle.
    pub fn shared_activation<'a>(&self, bundle: &'a FeatureBundle<T>) -> &'a Tensor<T> {
        &bundle.stages[self.config.n_shared - 1]
    }

    /// Records upper stages and the head on `g`, starting from the shared
    /// activation node.
    pub fn forward_from_shared(&self, g: &mut Graph<T>, shared: Var, trainable: bool) -> Result<InterpretNodes> {
        let mut params = Vec::new();
        let mut cur = shared;
        for layer in &self.upper {
            let (y, p) = layer.forward(g, cur, trainable)?;
            cur = g.relu(y);
            params.extend(p);
        }
        let (h, p) = self.head_conv.forward(g, cur, trainable)?;
        params.extend(p);
        let (x, p) = self.head_proj.forward(g, h, trainable)?;
        params.extend(p);
        let aams = g.pepu(x, T::of(self.config.kappa()), T::of(self.config.tau))?;
        Ok(InterpretNodes { aams, params })
    }

    /// Stage outputs of the interpreter itself (shared prefix from the
    /// target, then its own upper stages).
    pub fn stage_outputs(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let bundle = self.target.embed(image)?;
        let mut out: Vec<Tensor<T>> = bundle.stages[..self.config.n_shared].to_vec();
        let mut g = Graph::new();
        let mut cur = g.constant(self.shared_activation(&bundle));
        for layer in &self.upper {
            let (y, _) = layer.forward(&mut g, cur, false)?;
            cur = g.relu(y);
            out.push(g.value(cur).clone());
        }
        Ok(out)
    }

    pub fn interpret_forward(&self, image: &Tensor<T>) -> Result<AamStack<T>> {
        let bundle = self.target.embed(image)?;
        self.aams_from_bundle(&bundle)
    }

    pub fn aams_from_bundle(&self, bundle: &FeatureBundle<T>) -> Result<AamStack<T>> {
        let mut g = Graph::new();
        let shared = g.constant(self.shared_activation(bundle));
        let nodes = self.forward_from_shared(&mut g, shared, false)?;
        Ok(AamStack {
            maps: g.value(nodes.aams).clone(),
        })
    }

    /// Per-image quantities needed to explain any pair containing the image.
    pub fn explain_bundle(&self, bundle: &FeatureBundle<T>) -> Result<ImageExplanation<T>> {
        let mut g = Graph::new();
        let shared = g.constant(self.shared_activation(bundle));
        let nodes = self.forward_from_shared(&mut g, shared, false)?;
        let fmap = g.constant(&bundle.feature_map);
        let feats = attribute_features(&mut g, fmap, nodes.aams, self.config.m, self.target.gmp_power())?;
        Ok(ImageExplanation {
            feature: bundle.feature.clone(),
            aams: AamStack {
                maps: g.value(nodes.aams).clone(),
            },
            attribute_features: feats.iter().map(|&v| g.value(v).data().to_vec()).collect(),
        })
    }

    pub fn explain_image(&self, image: &Tensor<T>) -> Result<ImageExplanation<T>> {
        self.explain_bundle(&self.target.embed(image)?)
    }

    /// Decomposes the target distance between two images into attribute terms.
    pub fn decompose(
        &self,
        image_i: &Tensor<T>,
        image_j: &Tensor<T>,
        a_i: &[u8],
        a_j: &[u8],
    ) -> Result<(PairExplanation, AamStack<T>, AamStack<T>)> {
        let ei = self.explain_image(image_i)?;
        let ej = self.explain_image(image_j)?;
        let pe = explain_pair(&ei, &ej, a_i, a_j)?;
        Ok((pe, ei.aams, ej.aams))
    }

    pub fn named_tensors(&self) -> NamedTensors<T> {
        let mut out = Vec::new();
        for (i, l) in self.upper.iter().enumerate() {
            let s = self.config.n_shared + i + 1;
            out.push((format!("stage{}.kernel", s), l.kernel.clone()));
            out.push((format!("stage{}.bias", s), l.bias.clone()));
        }
        out.push(("adh.conv.kernel".into(), self.head_conv.kernel.clone()));
        out.push(("adh.conv.bias".into(), self.head_conv.bias.clone()));
        out.push(("adh.proj.kernel".into(), self.head_proj.kernel.clone()));
        out.push(("adh.proj.bias".into(), self.head_proj.bias.clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.named_tensors())
    }

    pub fn load(target: Arc<Embedder<T>>, config: InterpreterConfig, path: &Path) -> Result<Self> {
        let mut interp = Self::attach(target, config)?;
        let named = weights::load::<T>(path)?;
        let expected = interp.named_tensors();
        if named.len() != expected.len() {
            return Err(AmdError::Format(format!(
                "interpreter file has {} tensors, expected {}",
                named.len(),
                expected.len()
            )));
        }
        for ((name, t), ((want, _), slot)) in named.into_iter().zip(expected.into_iter().zip(interp.tensors_mut())) {
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
        Ok(interp)
    }
}

/// `f^k = gmp(F ∘ A^k)` for every attribute `k`.
pub fn attribute_features<T: Real>(g: &mut Graph<T>, feature_map: Var, aams: Var, m: usize, p: T) -> Result<Vec<Var>> {
    (0..m)
        .map(|k| {
            let a = g.channel(aams, k)?;
            let masked = g.mask(feature_map, a)?;
            g.gmp(masked, p)
        })
        .collect()
}

/// Combines two per-image explanations into a pair decomposition.
pub fn explain_pair<T: Real>(
    ei: &ImageExplanation<T>,
    ej: &ImageExplanation<T>,
    a_i: &[u8],
    a_j: &[u8],
) -> Result<PairExplanation> {
    let d = pair_distance(&ei.feature, &ej.feature)?;
    let comps: Vec<T> = ei
        .attribute_features
        .iter()
        .zip(&ej.attribute_features)
        .map(|(u, v)| ops::euclidean(u, v))
        .collect();
    PairExplanation::from_parts(d, &comps, a_i, a_j)
}

/// Mean over records of a set of maps, accumulated in the given order.
pub fn mean_map<T: Real>(maps: &[&[T]]) -> Option<Vec<T>> {
    let first = maps.first()?;
    let mut acc = vec![T::zero(); first.len()];
    for m in maps {
        acc.iter_mut().zip(m.iter()).for_each(|(a, &b)| *a = *a + b);
    }
    let n = count::<T>(maps.len());
    Some(acc.into_iter().map(|v| v / n).collect())
}
