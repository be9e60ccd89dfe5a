//! The full grounding network: parameters, the per-image forward pass, and
//! inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::data::{DatasetHeader, QueryView, Scene};
use crate::entity::{
    apply_filter, entity_attention, entity_supervision_loss, pool_context, semantic_similarity,
    FilterMode, WordVectorTable,
};
use crate::error::{Error, Result};
use crate::grounding::{combine, cue_matching, GroundingResult};
use crate::lang::{LangEncoder, LangVars, PhrasePooling};
use crate::nn::{argmax, Linear, PairScorer};
use crate::reconstruct::{
    attentive_pool, attribute_class_weights, attribute_loss, compose_loss_vars, compose_losses,
    AdaptiveVisual, LossBundle, LossTerms, LossWeights, QueryDecoder,
};
use crate::visual::{ContextLocation, ContextMode, CueFeatures, LOCATION_DIM};

/// Which cues take part in grounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueToggles {
    pub subject: bool,
    pub location: bool,
    pub context: bool,
}

impl Default for CueToggles {
    fn default() -> Self {
        Self {
            subject: true,
            location: true,
            context: true,
        }
    }
}

impl CueToggles {
    pub fn as_array(self) -> [bool; 3] {
        [self.subject, self.location, self.context]
    }
}

/// Architecture and inference options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub match_hidden: usize,
    pub context_mode: ContextMode,
    pub context_location: ContextLocation,
    pub phrase_pooling: PhrasePooling,
    pub cues: CueToggles,
    pub entity_enhancement: bool,
    pub filter_mode: FilterMode,
    pub filter_threshold: f64,
    pub distance_penalty: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
            match_hidden: 128,
            context_mode: ContextMode::SoftAll,
            context_location: ContextLocation::Relative,
            phrase_pooling: PhrasePooling::Embeddings,
            cues: CueToggles::default(),
            entity_enhancement: true,
            filter_mode: FilterMode::Hard,
            filter_threshold: 0.6,
            distance_penalty: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.match_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(Error::Config("filter threshold must lie in [0, 1]".into()));
        }
        if !self.cues.as_array().iter().any(|&c| c) {
            return Err(Error::Config("at least one cue must be enabled".into()));
        }
        Ok(())
    }

    /// Filter mode after accounting for disabled entity enhancement.
    pub fn effective_filter(&self) -> FilterMode {
        if self.entity_enhancement {
            self.filter_mode
        } else {
            FilterMode::None
        }
    }
}

/// Sizes fixed by the dataset and the word vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub attribute_count: usize,
    pub subject_dim: usize,
    pub context_dim: usize,
    pub word_vector_dim: usize,
}

/// Word vectors resolved for every vocabulary id and every category.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub token_vectors: Vec<Vec<f64>>,
    pub category_vectors: Vec<Vec<f64>>,
}

impl Lexicon {
    pub fn new(header: &DatasetHeader, table: &WordVectorTable) -> Self {
        Self {
            token_vectors: header.vocab.iter().map(|w| table.lookup(w).to_vec()).collect(),
            category_vectors: header
                .categories
                .iter()
                .map(|c| table.lookup(c).to_vec())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.category_vectors.first().map_or(0, Vec::len)
    }

    fn token(&self, t: Option<usize>) -> Option<&[f64]> {
        t.map(|t| self.token_vectors[t].as_slice())
    }
}

/// Per-scene inputs that do not depend on the query or the parameters.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub cues: CueFeatures,
    /// `N × D_v` raw context features `v_j`.
    pub context_raw: Tensor,
    pub boxes: Vec<crate::data::BBox>,
    pub categories: Vec<usize>,
    pub diagonal: f64,
}

impl SceneFeatures {
    pub fn new(scene: &Scene, config: &ModelConfig) -> Self {
        let dv = scene.proposals[0].context_feature.len();
        let raw: Vec<Vec<f64>> = scene.proposals.iter().map(|p| p.context_feature.clone()).collect();
        let cues = CueFeatures::build(scene, config.context_mode, config.context_location);
        Self {
            cues,
            context_raw: Tensor::from_rows(&raw, dv),
            boxes: scene.boxes(),
            categories: scene.categories(),
            diagonal: scene.width.hypot(scene.height),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Graph handles for one query.
#[derive(Debug, Clone)]
pub struct QueryVars {
    pub lang: LangVars,
    pub subject_scores: Var,
    pub keep_mask: Vec<bool>,
    /// Object attention rows per target (`None` without candidates).
    pub object_scores: Vec<Option<Var>>,
    pub context_features: Var,
    pub cue_scores: [Var; 3],
    pub final_scores: Var,
    pub selected: usize,
}

/// Graph handles for the per-image loss terms, each averaged over the
/// image's queries. `None` marks a term that was not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub loss_sub: Option<Var>,
    pub loss_obj: Option<Var>,
    pub l_x: Option<[Var; 3]>,
    pub loss_avis: Option<Var>,
    pub loss_alan: Option<Var>,
    pub loss_lan: Option<Var>,
    pub loss_att: Option<Var>,
    pub total: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SceneForward {
    pub queries: Vec<QueryVars>,
    pub losses: LossVars,
}

/// Learned components of the network.
#[derive(Debug, Clone, Copy)]
pub struct Modules {
    pub lang: LangEncoder,
    pub subject_attention: PairScorer,
    pub object_attention: PairScorer,
    pub matchers: [PairScorer; 3],
    pub adaptive_visual: AdaptiveVisual,
    pub alan_fc: Linear,
    pub alan_decoder: QueryDecoder,
    pub vis_fc: Linear,
    pub lan_decoder: QueryDecoder,
    pub attribute_head: Linear,
}

#[derive(Debug, Clone)]
pub struct Earn {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub modules: Modules,
    pub lexicon: Lexicon,
    pub attribute_weights: Vec<f64>,
}

impl Earn {
    /// Builds a freshly initialized model. Parameters are drawn from a
    /// ChaCha stream seeded with `seed` in a fixed registration order.
    pub fn new(
        config: ModelConfig,
        dims: ModelDims,
        lexicon: Lexicon,
        attribute_counts: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if lexicon.dim() != dims.word_vector_dim || lexicon.token_vectors.len() != dims.vocab_size {
            return Err(Error::Dimension("lexicon does not match model dimensions".into()));
        }
        if attribute_counts.len() != dims.attribute_count {
            return Err(Error::Dimension("attribute counts do not match attribute vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let lang = LangEncoder::new(
            &mut store,
            dims.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            c.phrase_pooling,
            &mut rng,
        );
        let q = lang.phrase_dim();
        let ctx_dim = dims.context_dim + c.context_location.dim();
        let subject_attention = PairScorer::new(
            &mut store,
            "entity.subject_attn",
            dims.word_vector_dim,
            dims.subject_dim,
            c.match_hidden,
            &mut rng,
        );
        let object_attention = PairScorer::new(
            &mut store,
            "entity.object_attn",
            dims.word_vector_dim,
            dims.context_dim,
            c.match_hidden,
            &mut rng,
        );
        let feature_dims = [dims.subject_dim, LOCATION_DIM, ctx_dim];
        let names = ["ground.match_subject", "ground.match_location", "ground.match_context"];
        let matchers = std::array::from_fn(|k| {
            PairScorer::new(&mut store, names[k], q, feature_dims[k], c.match_hidden, &mut rng)
        });
        let adaptive_visual = AdaptiveVisual::new(&mut store, feature_dims, q, &mut rng);
        let alan_fc = Linear::new(&mut store, "recon.alan_fc", 3 * q, c.embed_dim, &mut rng);
        let alan_decoder = QueryDecoder::new(
            &mut store,
            "recon.alan_decoder",
            dims.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            &mut rng,
        );
        let vis_fc = Linear::new(
            &mut store,
            "recon.vis_fc",
            feature_dims.iter().sum(),
            c.embed_dim,
            &mut rng,
        );
        let lan_decoder = QueryDecoder::new(
            &mut store,
            "recon.lan_decoder",
            dims.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            &mut rng,
        );
        let attribute_head = Linear::new(
            &mut store,
            "recon.attribute",
            dims.subject_dim,
            dims.attribute_count.max(1),
            &mut rng,
        );
        Ok(Self {
            config,
            dims,
            store,
            modules: Modules {
                lang,
                subject_attention,
                object_attention,
                matchers,
                adaptive_visual,
                alan_fc,
                alan_decoder,
                vis_fc,
                lan_decoder,
                attribute_head,
            },
            lexicon,
            attribute_weights: attribute_class_weights(attribute_counts),
        })
    }

    /// Model for a dataset header with the given word vectors.
    pub fn for_dataset(
        config: ModelConfig,
        header: &DatasetHeader,
        table: &WordVectorTable,
        attribute_counts: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let dims = ModelDims {
            vocab_size: header.vocab.len(),
            attribute_count: header.attribute_vocab.len(),
            subject_dim: header.feature_dims.subject,
            context_dim: header.feature_dims.context,
            word_vector_dim: table.dim(),
        };
        Self::new(config, dims, Lexicon::new(header, table), attribute_counts, seed)
    }

    pub fn scene_features(&self, scene: &Scene) -> SceneFeatures {
        SceneFeatures::new(scene, &self.config)
    }

    /// Forward pass over one image's queries. With `with_losses` the
    /// training objective is built as well, using `weights`.
    pub fn forward(
        &self,
        g: &mut Graph,
        feats: &SceneFeatures,
        queries: &[QueryView<'_>],
        weights: LossWeights,
        with_losses: bool,
    ) -> Result<SceneForward> {
        let n = feats.len();
        let m = &self.modules;
        let cfg = &self.config;
        if feats.cues.subject.cols != self.dims.subject_dim
            || feats.context_raw.cols != self.dims.context_dim
        {
            return Err(Error::Dimension("scene features do not match the model".into()));
        }
        let subj = g.constant(feats.cues.subject.clone());
        let loc = g.constant(feats.cues.location.clone());
        let raw_ctx = g.constant(feats.context_raw.clone());
        let ctx_dim = self.dims.context_dim + cfg.context_location.dim();
        let enabled = cfg.cues.as_array();
        let has_context: Vec<bool> = feats.cues.context_pairs.iter().map(|p| !p.is_empty()).collect();
        let filter_mode = cfg.effective_filter();
        let category_vecs: Vec<&[f64]> = feats
            .categories
            .iter()
            .map(|&c| self.lexicon.category_vectors[c].as_slice())
            .collect();

        let mut out = Vec::with_capacity(queries.len());
        let mut sub_terms = Vec::new();
        let mut obj_terms = Vec::new();
        let mut lx_terms: [Vec<Var>; 3] = Default::default();
        let mut avis_terms = Vec::new();
        let mut alan_terms = Vec::new();
        let mut lan_terms = Vec::new();
        let mut att_terms = Vec::new();

        for q in queries {
            let lang = m.lang.forward(g, q.tokens, enabled)?;
            let emb_s = self.lexicon.token(q.subject_word);
            let emb_o = self.lexicon.token(q.object_word);

            // entity enhancement
            let subject_scores = if cfg.entity_enhancement {
                entity_attention(g, &m.subject_attention, subj, emb_s)
            } else {
                g.constant(Tensor::row_vector(vec![1.0 / n as f64; n]))
            };
            if with_losses && cfg.entity_enhancement && emb_s.is_some() {
                let sim = semantic_similarity(&category_vecs, emb_s);
                sub_terms.push(entity_supervision_loss(g, subject_scores, &sim));
            }
            let filter = apply_filter(&g.value(subject_scores).data, filter_mode, cfg.filter_threshold);
            let mask = filter.keep_mask.clone();

            // object attention and context pooling
            let object_logits = match emb_o {
                Some(e) if n > 1 => {
                    let qe = g.constant(Tensor::row_vector(e.to_vec()));
                    let l = m.object_attention.forward(g, qe, raw_ctx);
                    Some(g.reshape(l, n, 1))
                }
                _ => None,
            };
            let sim_o = emb_o.map(|e| semantic_similarity(&category_vecs, Some(e)));
            let mut object_scores = Vec::with_capacity(n);
            let mut pooled_rows = Vec::with_capacity(n);
            let mut obj_rows = Vec::new();
            for (i, pairs) in feats.cues.context_pairs.iter().enumerate() {
                if pairs.is_empty() {
                    object_scores.push(None);
                    pooled_rows.push(pool_context(g, pairs, None, cfg.context_mode, None));
                    continue;
                }
                let k = pairs.len();
                let row = match object_logits {
                    Some(col) => {
                        let sel = g.gather_rows(col, &pairs.indices);
                        let sel = g.reshape(sel, 1, k);
                        g.softmax_rows(sel, None)
                    }
                    None => g.constant(Tensor::row_vector(vec![1.0 / k as f64; k])),
                };
                if with_losses && cfg.entity_enhancement {
                    if let (Some(sim), Some(_)) = (&sim_o, object_logits) {
                        let target: Vec<f64> = pairs.indices.iter().map(|&j| sim[j]).collect();
                        obj_rows.push(entity_supervision_loss(g, row, &target));
                    }
                }
                let cand_boxes: Vec<_> = pairs.indices.iter().map(|&j| feats.boxes[j]).collect();
                let penalty = (cfg.distance_penalty && cfg.context_mode.is_max_pooling())
                    .then_some((&feats.boxes[i], cand_boxes.as_slice(), feats.diagonal));
                pooled_rows.push(pool_context(g, pairs, Some(row), cfg.context_mode, penalty));
                object_scores.push(Some(row));
            }
            if !obj_rows.is_empty() {
                let k = obj_rows.len() as f64;
                let mut acc = obj_rows[0];
                for &r in &obj_rows[1..] {
                    acc = g.add(acc, r);
                }
                obj_terms.push(g.scale(acc, 1.0 / k));
            }
            let context_features = if pooled_rows.is_empty() {
                g.constant(Tensor::zeros(0, ctx_dim))
            } else {
                g.concat_rows(&pooled_rows)
            };

            // adaptive grounding
            let s_s = if enabled[0] {
                cue_matching(g, &m.matchers[0], lang.phrases[0], Some(subj), &mask)
            } else {
                cue_matching(g, &m.matchers[0], lang.phrases[0], None, &mask)
            };
            let s_l = if enabled[1] {
                cue_matching(g, &m.matchers[1], lang.phrases[1], Some(loc), &mask)
            } else {
                cue_matching(g, &m.matchers[1], lang.phrases[1], None, &mask)
            };
            let ctx_mask: Vec<bool> = mask.iter().zip(&has_context).map(|(&a, &b)| a && b).collect();
            let s_c = if enabled[2] && ctx_mask.iter().any(|&b| b) {
                cue_matching(g, &m.matchers[2], lang.phrases[2], Some(context_features), &ctx_mask)
            } else {
                cue_matching(g, &m.matchers[2], lang.phrases[2], None, &mask)
            };
            let soft = filter.soft_weights.as_ref().map(|_| subject_scores);
            let final_scores = combine(g, [s_s, s_l, s_c], lang.weights, soft);
            let selected = argmax(&g.value(final_scores).data);

            if with_losses {
                let pooled = [
                    attentive_pool(g, final_scores, subj),
                    attentive_pool(g, final_scores, loc),
                    attentive_pool(g, final_scores, context_features),
                ];
                if weights.alpha != 0.0 {
                    let av = m.adaptive_visual.loss(g, pooled, lang.phrases, lang.weights);
                    for k in 0..3 {
                        lx_terms[k].push(av.per_cue[k]);
                    }
                    avis_terms.push(av.total);
                }
                if weights.beta != 0.0 {
                    let cat = g.concat_cols(&lang.phrases);
                    let f = m.alan_fc.forward(g, cat);
                    let f = g.relu(f);
                    alan_terms.push(m.alan_decoder.nll(g, f, q.tokens));
                }
                if weights.gamma != 0.0 {
                    let cat = g.concat_cols(&[subj, loc, context_features]);
                    let r = m.vis_fc.forward(g, cat);
                    let r = g.relu(r);
                    let f = attentive_pool(g, final_scores, r);
                    lan_terms.push(m.lan_decoder.nll(g, f, q.tokens));
                }
                if weights.lambda != 0.0 && !q.attribute_labels.is_empty() {
                    let logits = m.attribute_head.forward(g, pooled[0]);
                    let labels: Vec<usize> = q.attribute_labels.iter().copied().collect();
                    if labels.iter().any(|&l| l >= self.dims.attribute_count) {
                        return Err(Error::Dimension("attribute label outside vocabulary".into()));
                    }
                    att_terms.push(attribute_loss(g, logits, &labels, &self.attribute_weights));
                }
            }

            out.push(QueryVars {
                lang,
                subject_scores,
                keep_mask: mask,
                object_scores,
                context_features,
                cue_scores: [s_s, s_l, s_c],
                final_scores,
                selected,
            });
        }

        let mut losses = LossVars::default();
        if with_losses && !queries.is_empty() {
            let b = queries.len() as f64;
            let avg = |g: &mut Graph, terms: &[Var], denom: f64| -> Option<Var> {
                let (&first, rest) = terms.split_first()?;
                let mut acc = first;
                for &t in rest {
                    acc = g.add(acc, t);
                }
                Some(g.scale(acc, 1.0 / denom))
            };
            losses.loss_sub = avg(g, &sub_terms, b);
            losses.loss_obj = avg(g, &obj_terms, b);
            if !avis_terms.is_empty() {
                losses.l_x = Some(std::array::from_fn(|k| avg(g, &lx_terms[k], b).expect("nonempty")));
            }
            losses.loss_avis = avg(g, &avis_terms, b);
            losses.loss_alan = avg(g, &alan_terms, b);
            losses.loss_lan = avg(g, &lan_terms, b);
            losses.loss_att = avg(g, &att_terms, att_terms.len() as f64);
            losses.total = Some(compose_loss_vars(
                g,
                losses.loss_sub,
                losses.loss_obj,
                losses.loss_avis,
                losses.loss_alan,
                losses.loss_lan,
                losses.loss_att,
                weights,
            ));
        }
        Ok(SceneForward {
            queries: out,
            losses,
        })
    }

    /// Reads the loss terms of a forward pass into a bundle.
    pub fn loss_bundle(g: &Graph, losses: &LossVars, weights: LossWeights) -> LossBundle {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        let lx = losses.l_x.map_or([0.0; 3], |l| l.map(|x| g.value(x).item()));
        let terms = LossTerms {
            loss_sub: v(losses.loss_sub),
            loss_obj: v(losses.loss_obj),
            l_s: lx[0],
            l_l: lx[1],
            l_c: lx[2],
            loss_avis: v(losses.loss_avis),
            loss_alan: v(losses.loss_alan),
            loss_lan: v(losses.loss_lan),
            loss_att: v(losses.loss_att),
        };
        compose_losses(&terms, weights)
    }

    /// Inference for every query of a scene; the reconstruction branch is
    /// not evaluated.
    pub fn ground_scene(&self, scene: &Scene) -> Result<Vec<GroundingResult>> {
        let feats = self.scene_features(scene);
        let views = scene.query_views();
        self.ground_views(&feats, &views)
    }

    pub fn ground_views(&self, feats: &SceneFeatures, views: &[QueryView<'_>]) -> Result<Vec<GroundingResult>> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, feats, views, LossWeights::default(), false)?;
        Ok(fwd
            .queries
            .iter()
            .map(|q| {
                let w = &g.value(q.lang.weights).data;
                GroundingResult {
                    cue_scores: q.cue_scores.map(|s| g.value(s).data.clone()),
                    cue_weights: [w[0], w[1], w[2]],
                    final_scores: g.value(q.final_scores).data.clone(),
                    selected: q.selected,
                    subject_scores: g.value(q.subject_scores).data.clone(),
                    keep_mask: q.keep_mask.clone(),
                }
            })
            .collect())
    }

    /// Loss bundle and gradients of the total loss for one image.
    pub fn loss_and_gradients(
        &self,
        feats: &SceneFeatures,
        views: &[QueryView<'_>],
        weights: LossWeights,
    ) -> Result<(LossBundle, crate::autograd::Gradients)> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, feats, views, weights, true)?;
        let bundle = Self::loss_bundle(&g, &fwd.losses, weights);
        let total = fwd.losses.total.expect("losses requested");
        Ok((bundle, g.backward(total)))
    }
}
