//! Shared neural building blocks: the parameter registry, weight init, and
//! the pre-norm transformer layer used by encoder, decoder LM, and speech
//! generator alike.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tinytensor::{masked_attention, AttnMask, Checkpoint64, GradStore};

use crate::error::{PipelineError, Result};
use crate::Tensor;

/// Named parameter buffers. The single source of truth for model weights;
/// every forward pass binds them into fresh leaf tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "parameter {name}: shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> &[f64] {
        let i = self.index[name];
        &self.entries[i].value
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        let i = self.index[name];
        &self.entries[i].shape
    }

    /// Bind every parameter into a leaf tensor. Parameters whose name starts
    /// with one of `trainable_scopes` require gradients; with an empty list
    /// everything is constant (inference).
    pub fn bind(&self, trainable_scopes: &[&str]) -> PBind {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let trainable = trainable_scopes.iter().any(|s| e.name.starts_with(s));
                Tensor::leaf(e.value.clone(), &e.shape, trainable)
                    .expect("stored parameter is valid")
            })
            .collect();
        PBind { tensors }
    }

    /// Pull gradients for every slot out of a backward pass, aligned with
    /// entry order; frozen or unused parameters yield `None`.
    pub fn collect_grads(&self, bind: &PBind, grads: &GradStore<f64>) -> Vec<Option<Vec<f64>>> {
        bind.tensors
            .iter()
            .map(|t| grads.get(t).map(|g| g.to_vec()))
            .collect()
    }

    /// Mutable slot views in entry order, for the optimizer.
    pub fn values_mut(&mut self) -> Vec<&mut [f64]> {
        self.entries
            .iter_mut()
            .map(|e| e.value.as_mut_slice())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint64 {
        let mut ck = Checkpoint64::new();
        for e in &self.entries {
            ck.insert(&e.name, &e.shape, e.value.clone())
                .expect("store entries are unique and well-shaped");
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint64) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in ck.names() {
            let (shape, data) = ck.get(name).expect("name came from the checkpoint");
            store.add(name, shape, data.to_vec());
        }
        Ok(store)
    }

    /// Overwrite entries from another store (names must match exactly).
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(PipelineError::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let Some(&j) = other.index.get(&e.name) else {
                return Err(PipelineError::Config(format!(
                    "checkpoint is missing parameter {}",
                    e.name
                )));
            };
            let o = &other.entries[j];
            if o.shape != e.shape {
                return Err(PipelineError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name, o.shape, e.shape
                )));
            }
            e.value = o.value.clone();
        }
        Ok(())
    }
}

/// Parameters bound as tensors for one forward pass.
pub struct PBind {
    tensors: Vec<Tensor>,
}

impl PBind {
    /// Indexed lookup is by position in the owning store; modules address
    /// parameters by name through [`Scoped`].
    fn at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }
}

/// Name-based access to a binding, borrowing the store for the index.
pub struct Scoped<'a> {
    store: &'a ParamStore,
    bind: &'a PBind,
}

impl<'a> Scoped<'a> {
    pub fn new(store: &'a ParamStore, bind: &'a PBind) -> Self {
        Scoped { store, bind }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let Some(&i) = self.store.index.get(name) else {
            panic!("unknown parameter {name}");
        };
        self.bind.at(i)
    }
}

/// Xavier-uniform weight matrix `[fan_in, fan_out]`.
pub fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

/// Register a full pre-norm transformer layer's parameters under `prefix`.
pub fn register_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    let ffn = 2 * d;
    store.add(&format!("{prefix}.ln1.g"), &[d], vec![1.0; d]);
    store.add(&format!("{prefix}.ln1.b"), &[d], vec![0.0; d]);
    for w in ["wq", "wk", "wv", "wo"] {
        store.add(&format!("{prefix}.att.{w}"), &[d, d], init_linear(rng, d, d));
    }
    store.add(&format!("{prefix}.ln2.g"), &[d], vec![1.0; d]);
    store.add(&format!("{prefix}.ln2.b"), &[d], vec![0.0; d]);
    store.add(&format!("{prefix}.ffn.w1"), &[d, ffn], init_linear(rng, d, ffn));
    store.add(&format!("{prefix}.ffn.b1"), &[ffn], vec![0.0; ffn]);
    store.add(&format!("{prefix}.ffn.w2"), &[ffn, d], init_linear(rng, ffn, d));
    store.add(&format!("{prefix}.ffn.b2"), &[d], vec![0.0; d]);
}

/// Multi-head scaled-dot attention over already-projected q/k/v matrices.
///
/// Heads are contiguous column slices; outputs are re-concatenated in head
/// order, so a single-row query agrees bitwise with the matching row of a
/// batched call.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
    heads: usize,
) -> Result<Tensor> {
    let d = q.cols();
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow_cols(h * dh, dh)?;
        let kh = k.narrow_cols(h * dh, dh)?;
        let vh = v.narrow_cols(h * dh, dh)?;
        outs.push(masked_attention(&qh, &kh, &vh, mask)?);
    }
    Ok(tinytensor::concat_cols(&outs)?)
}

/// One pre-norm transformer layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn transformer_layer(
    x: &Tensor,
    mask: &AttnMask,
    p: &Scoped,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let xn = x.layer_norm(
        p.get(&format!("{prefix}.ln1.g")),
        p.get(&format!("{prefix}.ln1.b")),
    )?;
    let q = xn.matmul(p.get(&format!("{prefix}.att.wq")))?;
    let k = xn.matmul(p.get(&format!("{prefix}.att.wk")))?;
    let v = xn.matmul(p.get(&format!("{prefix}.att.wv")))?;
    let att = multi_head_attention(&q, &k, &v, mask, heads)?;
    let x = x.add(&att.matmul(p.get(&format!("{prefix}.att.wo")))?)?;

    let xn = x.layer_norm(
        p.get(&format!("{prefix}.ln2.g")),
        p.get(&format!("{prefix}.ln2.b")),
    )?;
    let h = xn
        .matmul(p.get(&format!("{prefix}.ffn.w1")))?
        .add_bias(p.get(&format!("{prefix}.ffn.b1")))?
        .relu()?;
    let h = h
        .matmul(p.get(&format!("{prefix}.ffn.w2")))?
        .add_bias(p.get(&format!("{prefix}.ffn.b2")))?;
    Ok(x.add(&h)?)
}

/// Final layer norm for a stack registered as `{scope}.lnf`.
pub fn final_norm(x: &Tensor, p: &Scoped, scope: &str) -> Result<Tensor> {
    Ok(x.layer_norm(
        p.get(&format!("{scope}.lnf.g")),
        p.get(&format!("{scope}.lnf.b")),
    )?)
}

pub fn register_final_norm(store: &mut ParamStore, scope: &str, d: usize) {
    store.add(&format!("{scope}.lnf.g"), &[d], vec![1.0; d]);
    store.add(&format!("{scope}.lnf.b"), &[d], vec![0.0; d]);
}

/// Deterministic sinusoidal position encodings for rows `[offset, offset+n)`.
pub fn sinusoidal_positions(n: usize, d: usize, offset: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for pos in offset..offset + n {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::leaf(data, &[n, d], false).expect("sinusoid values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_store(d: usize) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        register_layer(&mut store, &mut rng, "t.l0", d);
        (store, rng)
    }

    #[test]
    fn binding_marks_scopes_trainable() {
        let (store, _) = toy_store(4);
        let bind = store.bind(&["t.l0.att"]);
        let p = Scoped::new(&store, &bind);
        assert!(p.get("t.l0.att.wq").requires_grad());
        assert!(!p.get("t.l0.ffn.w1").requires_grad());
        let frozen = store.bind(&[]);
        let p = Scoped::new(&store, &frozen);
        assert!(!p.get("t.l0.att.wq").requires_grad());
    }

    #[test]
    fn layer_preserves_shape_and_is_deterministic() {
        let (store, _) = toy_store(4);
        let bind = store.bind(&[]);
        let p = Scoped::new(&store, &bind);
        let x = Tensor::from_vec((0..12).map(|i| i as f64 * 0.1).collect(), &[3, 4]).unwrap();
        let mask = AttnMask::causal(3);
        let a = transformer_layer(&x, &mask, &p, "t.l0", 2).unwrap();
        let b = transformer_layer(&x, &mask, &p, "t.l0", 2).unwrap();
        assert_eq!(a.shape(), &[3, 4]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_row_attention_matches_batched_row() {
        // The KV-cache fast path scores one query against cached keys; it
        // must agree exactly with the same row of a full batched pass.
        let (store, mut rng) = toy_store(4);
        let bind = store.bind(&[]);
        let p = Scoped::new(&store, &bind);
        let x = Tensor::from_vec(
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[5, 4],
        )
        .unwrap();
        let xn = x
            .layer_norm(p.get("t.l0.ln1.g"), p.get("t.l0.ln1.b"))
            .unwrap();
        let q = xn.matmul(p.get("t.l0.att.wq")).unwrap();
        let k = xn.matmul(p.get("t.l0.att.wk")).unwrap();
        let v = xn.matmul(p.get("t.l0.att.wv")).unwrap();
        let batch = multi_head_attention(&q, &k, &v, &AttnMask::causal(5), 2).unwrap();
        for t in 0..5 {
            let qr = q.narrow_rows(t, 1).unwrap();
            let kr = k.narrow_rows(0, t + 1).unwrap();
            let vr = v.narrow_rows(0, t + 1).unwrap();
            let row =
                multi_head_attention(&qr, &kr, &vr, &AttnMask::full(1, t + 1), 2).unwrap();
            for c in 0..4 {
                assert_eq!(row.get2(0, c), batch.get2(t, c), "t={t} c={c}");
            }
        }
    }

    #[test]
    fn sinusoid_offset_is_a_slice() {
        let a = sinusoidal_positions(6, 8, 0);
        let b = sinusoidal_positions(2, 8, 4);
        assert_eq!(&a.data()[4 * 8..], b.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (store, _) = toy_store(4);
        let ck = store.to_checkpoint();
        let back = ParamStore::from_checkpoint(&ck).unwrap();
        assert_eq!(store.len(), back.len());
        for name in store.names() {
            assert_eq!(store.value(name), back.value(name), "{name}");
        }
    }
}
