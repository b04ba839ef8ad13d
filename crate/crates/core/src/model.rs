//! The full network: backbone, enhancer, decoder and classification head,
//! all parameters held in one store.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cave::{cave_forward, BatchConceptContext, CaveConfig, CaveParams, DsaMode, GridVar};
use crate::data_synth::Image;
use crate::decoder::{class_logits, decoder_forward, mask_pool, DecoderConfig, DecoderParams};
use crate::embedding::{encode_image, Backbone, BackboneConfig, CategoryEmbeddingTable, FeatureGrid};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub enhancer_layers: usize,
    pub decoder_layers: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub backbone_channels: Vec<usize>,
    pub dsa_mode: DsaMode,
    pub freeze_backbone: bool,
    pub init_seed: u64,
    /// Initial softmax temperature of the classification head (learnable).
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            heads: 8,
            queries: 100,
            enhancer_layers: 6,
            decoder_layers: 9,
            points: 4,
            ffn_hidden: 1024,
            backbone_channels: vec![64, 128],
            dsa_mode: DsaMode::Deformable,
            freeze_backbone: true,
            init_seed: 0,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            queries: 10,
            enhancer_layers: 2,
            decoder_layers: 3,
            points: 4,
            ffn_hidden: 64,
            backbone_channels: vec![16, 32],
            ..Default::default()
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 8,
            heads: 2,
            queries: 2,
            enhancer_layers: 1,
            decoder_layers: 1,
            points: 2,
            ffn_hidden: 16,
            backbone_channels: vec![4, 6],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 || self.dim % 2 != 0 {
            return Err(Error::config("model.dim", format!("must be even and at least 4, got {}", self.dim)));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::config("model.init_temperature", format!("must be positive, got {}", self.init_temperature)));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("model.ffn_hidden", "must be positive"));
        }
        self.cave().validate()?;
        self.decoder().validate()
    }

    pub fn cave(&self) -> CaveConfig {
        CaveConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.enhancer_layers,
            points: self.points,
            ffn_hidden: self.ffn_hidden,
            dsa_mode: self.dsa_mode,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig { dim: self.dim, heads: self.heads, layers: self.decoder_layers, queries: self.queries, ffn_hidden: self.ffn_hidden }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { channels: self.backbone_channels.clone(), dim: self.dim }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub cave: CaveParams,
    pub decoder: DecoderParams,
    pub no_object: ParamId,
    pub logit_scale: ParamId,
}

/// Where the global features of an image come from.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a, T> {
    /// Cached output of a frozen backbone.
    Cached(&'a FeatureGrid<T>),
    /// Run the backbone inside the graph.
    Image(&'a Image),
}

/// Everything needed to run the network on one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageRequest<'a, T> {
    pub features: Features<'a, T>,
    /// Embeddings indexed by category id; supplies the concept rows.
    pub concept_table: &'a CategoryEmbeddingTable<T>,
    /// Category ids named for this image.
    pub members: &'a BTreeSet<usize>,
    /// Classification keys, `[n, dim]`.
    pub class_table: &'a Tensor<T>,
    /// Optional per-class multipliers, length `n + 1`.
    pub weights: Option<&'a [T]>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction {
    /// `[K, H'*W']`.
    pub mask_logits: Var,
    /// `[K, n+1]` pre-softmax.
    pub class_logits: Var,
    /// `[K, D]` mask-pooled global features.
    pub mask_embeddings: Var,
}

#[derive(Debug, Clone)]
pub struct ImageOutputs {
    pub layers: Vec<LayerPrediction>,
    pub global: Var,
    pub enhanced: Var,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone(), &mut rng)?;
        backbone.center(&mut store, &mut rng, 64);
        let cave = CaveParams::new(&mut store, config.cave(), &mut rng)?;
        let decoder = DecoderParams::new(&mut store, config.decoder(), &mut rng)?;
        let no_object = store.add("head.no_object", Tensor::randn(1, config.dim, 0.02, &mut rng));
        let logit_scale = store.add("head.logit_scale", Tensor::scalar(T::lit((1.0 / config.init_temperature).ln())));
        backbone.set_frozen(&mut store, config.freeze_backbone);
        Ok(Model { config, store, backbone, cave, decoder, no_object, logit_scale })
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.config.freeze_backbone = frozen;
        self.backbone.set_frozen(&mut self.store, frozen);
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid<T>> {
        encode_image(image, &self.backbone, &self.store, self.config.dim)
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.store.get(self.logit_scale).get(0, 0).as_f64().exp()
    }

    pub fn forward(&self, g: &mut Graph<T>, req: &ImageRequest<'_, T>) -> Result<ImageOutputs> {
        if req.class_table.cols() != self.config.dim || req.concept_table.dim() != self.config.dim {
            return Err(Error::config("model.dim", format!("text embeddings do not have dimension {}", self.config.dim)));
        }
        if req.class_table.rows() == 0 {
            return Err(Error::invalid("classification vocabulary is empty"));
        }
        let (global, height, width) = match req.features {
            Features::Cached(grid) => {
                if grid.dim() != self.config.dim {
                    return Err(Error::config("model.dim", format!("cached features have dimension {}", grid.dim())));
                }
                (g.constant(grid.features.clone()), grid.height, grid.width)
            }
            Features::Image(img) => {
                img.validate()?;
                self.backbone.forward(g, &self.store, img)
            }
        };
        let ctx = BatchConceptContext::from_memberships(req.concept_table, vec![req.members.clone()])?;
        let grid = GridVar { var: global, height, width };
        let cave = cave_forward(g, &self.store, &self.cave, &ctx, &[grid], &ctx.mask())?;
        let enhanced = cave.enhanced[0];
        let concepts = cave.image_concepts[0];
        let dec = decoder_forward(g, &self.store, &self.decoder, concepts, GridVar { var: enhanced, height, width })?;
        let no_object = g.param(&self.store, self.no_object);
        let scale = g.param(&self.store, self.logit_scale);
        let mut layers = Vec::with_capacity(dec.len());
        for out in dec {
            let pooled = mask_pool(g, out.mask_logits, global)?;
            let logits = class_logits(g, pooled, req.class_table, no_object, scale, req.weights)?;
            layers.push(LayerPrediction { mask_logits: out.mask_logits, class_logits: logits, mask_embeddings: pooled });
        }
        Ok(ImageOutputs { layers, global, enhanced, height, width })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{demo_palette, generate_scene, SceneConfig, Vocabulary};
    use crate::embedding::{encode_text, TextEncoderSpec};

    #[test]
    fn forward_shapes_and_cached_equivalence() {
        let model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let vocab = Vocabulary::demo();
        let (img, seg) = generate_scene(&SceneConfig::new(16, 16, demo_palette(), 3), &vocab).unwrap();
        let table: CategoryEmbeddingTable<f64> = encode_text(&vocab.labels(), &TextEncoderSpec::synthetic(8, 0)).unwrap();
        let members: BTreeSet<usize> = seg.categories_present().into_iter().collect();
        let grid = model.encode(&img).unwrap();
        let run = |features| {
            let mut g = Graph::new();
            let req = ImageRequest { features, concept_table: &table, members: &members, class_table: &table.vectors, weights: None };
            let out = model.forward(&mut g, &req).unwrap();
            let last = out.layers.last().unwrap();
            (g.value(last.mask_logits).clone(), g.value(last.class_logits).clone())
        };
        let (m1, c1) = run(Features::Cached(&grid));
        let (m2, c2) = run(Features::Image(&img));
        assert_eq!(m1.shape(), (2, 16));
        assert_eq!(c1.shape(), (2, vocab.len() + 1));
        assert!(m1.bit_eq(&m2) && c1.bit_eq(&c2));
        assert!((model.temperature() - 0.07).abs() < 1e-12);
    }
}
