//! Instance-level encoders: a linear region projection for images and a
//! bidirectional GRU over learned word embeddings for captions.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};

/// `M×F` detector features for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    regions: Tensor,
}

impl RegionFeatures {
    pub fn new(regions: Tensor) -> Result<Self> {
        let (m, f) = regions.dims2("region_features")?;
        if m == 0 || f == 0 {
            return Err(Error::Input(format!("region features must be non-empty, got {m}x{f}")));
        }
        Ok(Self { regions })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.regions
    }

    pub fn num_regions(&self) -> usize {
        self.regions.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.regions.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    token_ids: Vec<usize>,
}

impl Caption {
    pub fn new(token_ids: Vec<usize>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Input("caption has no tokens".into()));
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self { token_ids: self.token_ids.iter().rev().copied().collect() }
    }
}

/// Update (`z`), reset (`r`) and candidate (`h`) gates of one GRU direction.
/// `w_*` act on the input, `u_*` on the previous hidden state.
#[derive(Clone, Copy, Debug)]
pub struct GruGates {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruGates {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.add_uniform(format!("{prefix}.w_{gate}"), &[input_dim, hidden_dim], hidden_dim, rng)
        };
        let w_z = w("z", store, rng)?;
        let w_r = w("r", store, rng)?;
        let w_h = w("h", store, rng)?;
        let u = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.add_uniform(format!("{prefix}.u_{gate}"), &[hidden_dim, hidden_dim], hidden_dim, rng)
        };
        let u_z = u("z", store, rng)?;
        let u_r = u("r", store, rng)?;
        let u_h = u("h", store, rng)?;
        let b = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.add_uniform(format!("{prefix}.b_{gate}"), &[1, hidden_dim], hidden_dim, rng)
        };
        let b_z = b("z", store, rng)?;
        let b_r = b("r", store, rng)?;
        let b_h = b("h", store, rng)?;
        Ok(Self { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h]
    }

    pub fn hidden_dim(&self, store: &ParamStore) -> usize {
        store.get(self.u_z).rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub word_embedding: ParamId,
    pub gru_forward: GruGates,
    pub gru_backward: GruGates,
    pub image_proj: ParamId,
    pub image_bias: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        word_dim: usize,
        feature_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim {embed_dim} must be even for the Bi-GRU")));
        }
        let hidden = embed_dim / 2;
        let word_embedding = store.add_uniform("text.word_embedding", &[vocab_size, word_dim], word_dim, rng)?;
        let gru_forward = GruGates::init(store, "text.gru_fwd", word_dim, hidden, rng)?;
        let gru_backward = GruGates::init(store, "text.gru_bwd", word_dim, hidden, rng)?;
        let image_proj = store.add_uniform("image.proj", &[feature_dim, embed_dim], feature_dim, rng)?;
        let image_bias = store.add_uniform("image.bias", &[1, embed_dim], feature_dim, rng)?;
        Ok(Self { word_embedding, gru_forward, gru_backward, image_proj, image_bias })
    }
}

/// Projects every region to the joint width: `regions · W + b`, `M×F → M×d`.
pub fn encode_image(tape: &mut Tape, regions: Var, p: &EncoderParams, bind: &Binding) -> Result<Var> {
    let (m, f) = tape.value(regions).dims2("encode_image")?;
    let proj = bind.var(p.image_proj);
    let expected = tape.value(proj).rows();
    if f != expected {
        return Err(Error::Config(format!("region feature dim {f} does not match projection input {expected}")));
    }
    let xw = tape.matmul(regions, proj)?;
    let bias = tape.broadcast_rows(bind.var(p.image_bias), m)?;
    tape.add(xw, bias)
}

/// One GRU step on row vectors:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, g: &GruGates, bind: &Binding) -> Result<Var> {
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, h: Var| -> Result<Var> {
        let xw = tape.matmul(x, bind.var(w))?;
        let hu = tape.matmul(h, bind.var(u))?;
        let s = tape.add(xw, hu)?;
        tape.add(s, bind.var(b))
    };
    let z_pre = gate(tape, g.w_z, g.u_z, g.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, g.w_r, g.u_r, g.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, g.w_h, g.u_h, g.b_h, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let keep = tape.one_minus(z)?;
    let kept = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

#[derive(Clone, Copy, Debug)]
pub struct TextEncoding {
    /// `L×d` per-token forward‖backward states.
    pub states: Var,
    /// `1×d` mean over tokens.
    pub pooled: Var,
}

fn run_direction(
    tape: &mut Tape,
    inputs: &[Var],
    gates: &GruGates,
    hidden: usize,
    bind: &Binding,
    reverse: bool,
) -> Result<Vec<Var>> {
    let mut h = tape.leaf(Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
    for t in order {
        h = gru_step(tape, inputs[t], h, gates, bind)?;
        states[t] = h;
    }
    Ok(states)
}

pub fn encode_text(
    tape: &mut Tape,
    caption: &Caption,
    p: &EncoderParams,
    bind: &Binding,
    store: &ParamStore,
) -> Result<TextEncoding> {
    if caption.is_empty() {
        return Err(Error::Input("caption has no tokens".into()));
    }
    let table = bind.var(p.word_embedding);
    let vocab = tape.value(table).rows();
    if let Some(&bad) = caption.token_ids().iter().find(|&&id| id >= vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let embedded = tape.gather_rows(table, caption.token_ids())?;
    let inputs = (0..caption.len())
        .map(|t| tape.slice_rows(embedded, t, t + 1))
        .collect::<Result<Vec<_>>>()?;

    let hidden = p.gru_forward.hidden_dim(store);
    let fwd = run_direction(tape, &inputs, &p.gru_forward, hidden, bind, false)?;
    let bwd = run_direction(tape, &inputs, &p.gru_backward, hidden, bind, true)?;
    let per_token = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat_cols(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let states = tape.concat_rows(&per_token)?;
    let pooled = tape.mean_rows(states)?;
    Ok(TextEncoding { states, pooled })
}
