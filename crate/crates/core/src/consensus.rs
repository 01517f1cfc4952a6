//! Consensus-level features: a concept co-occurrence graph, GCN propagation of
//! concept embeddings and a per-modality concept predictor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::tokenize::is_stopword;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Concept {
    pub token: String,
    pub frequency: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    pub concepts: Vec<Concept>,
    /// Row-stochastic `K×K` adjacency including self-loops.
    pub adjacency: Tensor,
}

/// Builds the concept graph from tokenized captions.
///
/// Concepts are the `k` most frequent non-stopword tokens (ties broken
/// lexicographically). Off-diagonal weights are the conditional
/// co-occurrence rate `count(i,j) / count(i)` at caption level, each node
/// gets a self-loop of 1, and rows are then normalized. Within a row this
/// keeps off-diagonal entries proportional to raw co-occurrence counts.
pub fn build_graph<S: AsRef<str>>(captions: &[Vec<S>], k: usize) -> Result<ConceptGraph> {
    if captions.is_empty() {
        return Err(Error::Input("cannot build a concept graph from an empty corpus".into()));
    }
    if k < 2 {
        return Err(Error::Input(format!("need at least 2 concepts, got {k}")));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for caption in captions {
        for tok in caption {
            let tok = tok.as_ref();
            if !is_stopword(tok) {
                *freq.entry(tok).or_default() += 1;
            }
        }
    }
    if k > freq.len() {
        return Err(Error::Input(format!("requested {k} concepts but corpus has {} distinct tokens", freq.len())));
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    let index: BTreeMap<&str, usize> = ranked.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();

    let mut cooc = vec![0usize; k * k];
    let mut occurs = vec![0usize; k];
    for caption in captions {
        let present: BTreeSet<usize> = caption.iter().filter_map(|t| index.get(t.as_ref()).copied()).collect();
        for &i in &present {
            occurs[i] += 1;
            for &j in &present {
                if i != j {
                    cooc[i * k + j] += 1;
                }
            }
        }
    }

    let mut adj = vec![0.0; k * k];
    for i in 0..k {
        let row = &mut adj[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] = if i == j {
                1.0
            } else if occurs[i] > 0 {
                cooc[i * k + j] as f64 / occurs[i] as f64
            } else {
                0.0
            };
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }

    Ok(ConceptGraph {
        concepts: ranked.into_iter().map(|(t, f)| Concept { token: t.to_string(), frequency: f }).collect(),
        adjacency: Tensor::matrix(k, k, adj)?,
    })
}

impl ConceptGraph {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// `index,token,frequency`
    pub fn write_concepts_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,token,frequency\n");
        for (i, c) in self.concepts.iter().enumerate() {
            out.push_str(&format!("{i},{},{}\n", c.token, c.frequency));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Dense matrix, one row per line.
    pub fn write_adjacency_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let k = self.len();
        for i in 0..k {
            let line: Vec<String> = self.adjacency.row_slice(i).iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Propagation rule for the GCN layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GcnForm {
    /// `H' = σ(A·H)·W`
    #[default]
    Paper,
    /// `H' = σ(A·H·W)` with no activation after the last layer.
    Conventional,
}

impl FromStr for GcnForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "conventional" => Ok(Self::Conventional),
            other => Err(Error::Config(format!("unknown gcn_form `{other}` (paper|conventional)"))),
        }
    }
}

impl fmt::Display for GcnForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Conventional => "conventional",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GcnParams {
    /// `K×d` initial node features.
    pub node_features: ParamId,
    pub layers: Vec<ParamId>,
    pub form: GcnForm,
}

impl GcnParams {
    pub fn init<R: Rng>(store: &mut ParamStore, concepts: usize, dim: usize, form: GcnForm, rng: &mut R) -> Result<Self> {
        let node_features = store.add_uniform("gcn.node_features", &[concepts, dim], dim, rng)?;
        let layers = (0..2)
            .map(|l| store.add_uniform(format!("gcn.w{l}"), &[dim, dim], dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { node_features, layers, form })
    }
}

/// One propagation layer.
pub fn gcn_layer(tape: &mut Tape, adjacency: Var, h: Var, weight: Var, form: GcnForm, last: bool) -> Result<Var> {
    match form {
        GcnForm::Paper => {
            let ah = tape.matmul(adjacency, h)?;
            let act = tape.relu(ah)?;
            tape.matmul(act, weight)
        }
        GcnForm::Conventional => {
            let ah = tape.matmul(adjacency, h)?;
            let ahw = tape.matmul(ah, weight)?;
            if last { Ok(ahw) } else { tape.relu(ahw) }
        }
    }
}

/// Runs every layer over the node features: `K×d → K×d`.
pub fn gcn_forward(tape: &mut Tape, adjacency: Var, p: &GcnParams, bind: &Binding) -> Result<Var> {
    let (k, k2) = tape.value(adjacency).dims2("gcn_forward")?;
    let h0 = bind.var(p.node_features);
    if k != k2 || tape.value(h0).rows() != k {
        return Err(Error::shape("gcn_forward", format!("adjacency {k}x{k2}, node features {:?}", tape.value(h0).shape())));
    }
    let mut h = h0;
    for (l, &w) in p.layers.iter().enumerate() {
        h = gcn_layer(tape, adjacency, h, bind.var(w), p.form, l + 1 == p.layers.len())?;
    }
    Ok(h)
}

/// Linear concept predictor `d×K`.
#[derive(Clone, Copy, Debug)]
pub struct ConsensusHead {
    pub predictor: ParamId,
}

impl ConsensusHead {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, concepts: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { predictor: store.add_uniform(name, &[dim, concepts], dim, rng)? })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConsensusOutput {
    /// L2-normalized `B×d` mixture of GCN rows.
    pub embedding: Var,
    /// `B×K` concept distribution.
    pub concept_dist: Var,
}

/// `dist = softmax(instance·P)`, `embedding = normalize(dist·G)`.
pub fn consensus_embed(tape: &mut Tape, instance: Var, gcn_out: Var, head: &ConsensusHead, bind: &Binding) -> Result<ConsensusOutput> {
    let logits = tape.matmul(instance, bind.var(head.predictor))?;
    consensus_from_logits(tape, logits, gcn_out)
}

pub fn consensus_from_logits(tape: &mut Tape, logits: Var, gcn_out: Var) -> Result<ConsensusOutput> {
    let concept_dist = tape.softmax_rows(logits)?;
    let mix = tape.matmul(concept_dist, gcn_out)?;
    let embedding = tape.l2_normalize_rows(mix)?;
    Ok(ConsensusOutput { embedding, concept_dist })
}
