//! The full embedding model: encoders, attention pooling, concept consensus
//! and per-modality fusion, plus the four-term batch objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attend_and_pool, MhsaParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Record;
use crate::consensus::{consensus_embed, gcn_forward, ConsensusHead, ConsensusOutput, GcnParams};
use crate::data::{Dataset, InstancePair, RetrievalEmbedding, TrainConfig};
use crate::encoders::{encode_image, encode_text, Caption, EncoderParams, RegionFeatures};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedEmbedding, FusionParams};
use crate::losses::{contrastive_loss, ContrastiveMode, kl_loss, similarity, total_loss, LossTerms};
use crate::params::{Binding, ParamStore};

const ADJACENCY_RECORD: &str = "graph.adjacency";
const EMBED_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct ModelParts {
    pub encoder: EncoderParams,
    pub image_attention: MhsaParams,
    pub text_attention: MhsaParams,
    pub gcn: GcnParams,
    pub image_head: ConsensusHead,
    pub text_head: ConsensusHead,
    pub image_fusion: FusionParams,
    pub text_fusion: FusionParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    /// Normalized `K×K` concept adjacency; fixed during training.
    pub adjacency: Tensor,
    pub parts: ModelParts,
}

/// One modality's embeddings for a batch, all `B×d` (fused may be `B×2d`).
#[derive(Clone, Copy, Debug)]
pub struct SideEmbeddings {
    /// L2-normalized attention pooled instance vectors.
    pub instance: Var,
    pub consensus: ConsensusOutput,
    pub fused: FusedEmbedding,
}

/// Everything a batch forward pass leaves on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    pub image: SideEmbeddings,
    pub text: SideEmbeddings,
    /// `[instance, consensus, fusion, kl]`
    pub terms: [Var; 4],
}

impl Model {
    pub fn new(config: &TrainConfig, vocab_size: usize, adjacency: Tensor) -> Result<Self> {
        config.validate()?;
        let (k, k2) = adjacency.dims2("Model::new")?;
        if k != k2 || k < 2 {
            return Err(Error::Config(format!("adjacency must be square with at least 2 concepts, got {k}x{k2}")));
        }
        if vocab_size < 2 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} entries is too small")));
        }
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, vocab_size, config.word_dim, config.feature_dim, d, &mut rng)?;
        let image_attention = MhsaParams::init(&mut store, "image.mhsa", d, config.heads, &mut rng)?;
        let text_attention = MhsaParams::init(&mut store, "text.mhsa", d, config.heads, &mut rng)?;
        let gcn = GcnParams::init(&mut store, k, d, config.gcn_form, &mut rng)?;
        let image_head = ConsensusHead::init(&mut store, "image.concept_predictor", d, k, &mut rng)?;
        let text_head = ConsensusHead::init(&mut store, "text.concept_predictor", d, k, &mut rng)?;
        let fusion = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            FusionParams::init(store, prefix, d, config.fuse_type, config.global_weight_sum, rng)
        };
        let image_fusion = fusion(&mut store, "image.fusion", &mut rng)?;
        let text_fusion = fusion(&mut store, "text.fusion", &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            adjacency,
            parts: ModelParts {
                encoder,
                image_attention,
                text_attention,
                gcn,
                image_head,
                text_head,
                image_fusion,
                text_fusion,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.parts.encoder.word_embedding).rows()
    }

    pub fn num_concepts(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn gcn_output(&self, tape: &mut Tape, bind: &Binding) -> Result<Var> {
        let adj = tape.leaf(self.adjacency.clone());
        gcn_forward(tape, adj, &self.parts.gcn, bind)
    }

    /// Attention pooled `1×d` image vector (not normalized).
    pub fn image_instance(&self, tape: &mut Tape, bind: &Binding, regions: &RegionFeatures) -> Result<Var> {
        let x = tape.leaf(regions.tensor().clone());
        let projected = encode_image(tape, x, &self.parts.encoder, bind)?;
        attend_and_pool(tape, projected, &self.parts.image_attention, bind)
    }

    /// Attention pooled `1×d` caption vector (not normalized).
    pub fn text_instance(&self, tape: &mut Tape, bind: &Binding, caption: &Caption) -> Result<Var> {
        let enc = encode_text(tape, caption, &self.parts.encoder, bind, &self.store)?;
        attend_and_pool(tape, enc.states, &self.parts.text_attention, bind)
    }

    fn side(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        rows: &[Var],
        gcn_out: Var,
        head: &ConsensusHead,
        fusion: &FusionParams,
    ) -> Result<SideEmbeddings> {
        let stacked = tape.concat_rows(rows)?;
        let instance = tape.l2_normalize_rows(stacked)?;
        let consensus = consensus_embed(tape, instance, gcn_out, head, bind)?;
        let fused = fuse(tape, instance, consensus.embedding, fusion, bind)?;
        Ok(SideEmbeddings { instance, consensus, fused })
    }

    pub fn forward_batch(&self, tape: &mut Tape, bind: &Binding, data: &Dataset, pairs: &[InstancePair]) -> Result<BatchForward> {
        self.forward_batch_with(tape, bind, data, pairs, self.config.contrastive_mode)
    }

    /// [`Model::forward_batch`] with an explicit hinge mode.
    pub fn forward_batch_with(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        data: &Dataset,
        pairs: &[InstancePair],
        mode: ContrastiveMode,
    ) -> Result<BatchForward> {
        if pairs.len() < 2 {
            return Err(Error::Input(format!("a batch needs at least 2 pairs, got {}", pairs.len())));
        }
        let gcn_out = self.gcn_output(tape, bind)?;
        let mut img_rows = Vec::with_capacity(pairs.len());
        let mut txt_rows = Vec::with_capacity(pairs.len());
        for pair in pairs {
            img_rows.push(self.image_instance(tape, bind, &data.images[pair.image].regions)?);
            txt_rows.push(self.text_instance(tape, bind, &data.captions[pair.caption].caption)?);
        }
        let p = &self.parts;
        let image = self.side(tape, bind, &img_rows, gcn_out, &p.image_head, &p.image_fusion)?;
        let text = self.side(tape, bind, &txt_rows, gcn_out, &p.text_head, &p.text_fusion)?;

        let margin = self.config.margin;
        let mut level = |a: Var, b: Var| -> Result<Var> {
            let s = similarity(tape, a, b)?;
            contrastive_loss(tape, s, margin, mode)
        };
        let l_instance = level(image.instance, text.instance)?;
        let l_consensus = level(image.consensus.embedding, text.consensus.embedding)?;
        let l_fusion = level(image.fused.vector, text.fused.vector)?;
        let l_kl = kl_loss(tape, text.consensus.concept_dist, image.consensus.concept_dist)?;
        Ok(BatchForward { image, text, terms: [l_instance, l_consensus, l_fusion, l_kl] })
    }

    /// Builds the weighted objective for one batch on a fresh tape.
    pub fn batch_loss(&self, data: &Dataset, pairs: &[InstancePair]) -> Result<(Tape, Binding, Var, LossTerms)> {
        self.batch_loss_with(data, pairs, self.config.contrastive_mode)
    }

    pub fn batch_loss_with(
        &self,
        data: &Dataset,
        pairs: &[InstancePair],
        mode: ContrastiveMode,
    ) -> Result<(Tape, Binding, Var, LossTerms)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let fwd = self.forward_batch_with(&mut tape, &bind, data, pairs, mode)?;
        let (total, terms) =
            total_loss(&mut tape, fwd.terms, self.config.base_weights, self.config.invert_dynamic_weight)?;
        Ok((tape, bind, total, terms))
    }

    /// `K×d` GCN output computed once for inference.
    fn gcn_tensor(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let out = self.gcn_output(&mut tape, &bind)?;
        Ok(tape.value(out).clone())
    }

    fn embed_chunk<F>(&self, gcn: &Tensor, n: usize, mode: RetrievalEmbedding, image_side: bool, instance: F) -> Result<Tensor>
    where
        F: Fn(&mut Tape, &Binding, usize) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let rows = (0..n).map(|i| instance(&mut tape, &bind, i)).collect::<Result<Vec<_>>>()?;
        let gcn_out = tape.leaf(gcn.clone());
        let p = &self.parts;
        let (head, fusion) =
            if image_side { (&p.image_head, &p.image_fusion) } else { (&p.text_head, &p.text_fusion) };
        let side = self.side(&mut tape, &bind, &rows, gcn_out, head, fusion)?;
        let out = match mode {
            RetrievalEmbedding::Fused => side.fused.vector,
            RetrievalEmbedding::Instance => side.instance,
        };
        Ok(tape.value(out).clone())
    }

    /// L2-normalized image (`N×d'`) and caption (`N_t×d'`) embeddings used
    /// for retrieval, in dataset order.
    pub fn retrieval_embeddings(&self, data: &Dataset) -> Result<(Tensor, Tensor)> {
        let mode = self.config.retrieval;
        let gcn = self.gcn_tensor()?;
        let image_chunks: Vec<&[crate::data::dataset::ImageRecord]> = data.images.chunks(EMBED_CHUNK).collect();
        let images = image_chunks
            .par_iter()
            .map(|chunk| {
                self.embed_chunk(&gcn, chunk.len(), mode, true, |tape, bind, i| {
                    self.image_instance(tape, bind, &chunk[i].regions)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let caption_chunks: Vec<&[crate::data::dataset::CaptionEntry]> = data.captions.chunks(EMBED_CHUNK).collect();
        let texts = caption_chunks
            .par_iter()
            .map(|chunk| {
                self.embed_chunk(&gcn, chunk.len(), mode, false, |tape, bind, i| {
                    self.text_instance(tape, bind, &chunk[i].caption)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((stack_rows(&images)?, stack_rows(&texts)?))
    }

    /// Parameters in store order followed by the adjacency.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> =
            self.store.names().iter().cloned().zip(self.store.values().iter().cloned()).collect();
        out.push((ADJACENCY_RECORD.to_string(), self.adjacency.clone()));
        out
    }

    /// Rebuilds a model from checkpoint records under `config`. Every
    /// parameter the architecture expects must be present with its shape.
    pub fn from_records(config: &TrainConfig, records: &[Record]) -> Result<Self> {
        let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let adjacency = find(ADJACENCY_RECORD)
            .ok_or_else(|| Error::Data(format!("checkpoint has no `{ADJACENCY_RECORD}` record")))?
            .clone();
        let vocab = find("text.word_embedding")
            .ok_or_else(|| Error::Data("checkpoint has no `text.word_embedding` record".into()))?
            .shape()[0];
        let mut model = Self::new(config, vocab, adjacency)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let value = find(&name).ok_or_else(|| Error::Data(format!("checkpoint is missing `{name}`")))?;
            model.store.set(id, value.clone()).map_err(|e| Error::Data(format!("checkpoint does not match config: {e}")))?;
        }
        let known = model.store.names().len() + 1;
        if records.len() != known {
            return Err(Error::Data(format!("checkpoint has {} records, model expects {known}", records.len())));
        }
        Ok(model)
    }
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts.first().map(Tensor::cols).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, cols, data)
}
