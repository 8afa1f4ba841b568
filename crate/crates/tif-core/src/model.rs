//! The classifier `f = head ∘ encode`: a fully-connected encoder mapping
//! sparse binary vectors to L2-normalized embeddings, a small affine head
//! producing one logit, and `K` learnable proxy vectors per class living in
//! embedding space.
//!
//! All forward/backward arithmetic is written out by hand so gradients stay
//! exact and auditable; matrix products go through `ndarray`.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envsplit::Granularity;
use crate::error::{Error, Result};

/// Guard added to embedding norms before dividing, so an all-zero encoder
/// output maps to the zero vector instead of NaN.
pub const EMBED_NORM_EPS: f64 = 1e-12;

/// Architecture hyperparameters. `encoder_widths` are the hidden-layer widths
/// (ReLU); the last entry is the embedding dimension. `head_hidden` are the
/// head's hidden widths; a final affine layer to one logit is implied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub encoder_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub proxies_per_class: usize,
}

impl ModelDims {
    pub fn new(dim: usize, k: usize) -> Self {
        ModelDims {
            dim,
            encoder_widths: vec![200, 200, 200],
            head_hidden: vec![100],
            proxies_per_class: k,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_widths.last().expect("non-empty encoder")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::spec("input dimension must be positive"));
        }
        if self.encoder_widths.is_empty() {
            return Err(Error::spec("encoder needs at least one layer"));
        }
        if self.encoder_widths.contains(&0) || self.head_hidden.contains(&0)
        {
            return Err(Error::spec("layer widths must be positive"));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::spec("embedding dimension must be at least 2"));
        }
        if self.proxies_per_class == 0 {
            return Err(Error::spec("need at least one proxy per class"));
        }
        Ok(())
    }

    /// Non-fatal configuration observations.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.proxies_per_class >= self.embedding_dim() {
            w.push(format!(
                "{} proxies per class in a {}-dimensional embedding space; \
                 proxies cannot all be mutually distant",
                self.proxies_per_class,
                self.embedding_dim()
            ));
        }
        w
    }
}

/// Metadata a trainer stamps onto a state so downstream commands can
/// reconstruct the training period and validation split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainedMeta {
    pub train_t_max: Option<NaiveDate>,
    pub granularity: Option<Granularity>,
}

/// One mini-batch of sparse rows. Each row is `(active indices, value)`; the
/// value is 1.0 for real binary samples and an interpolation coefficient for
/// attribution paths.
pub struct InputBatch<'a> {
    pub rows: Vec<(&'a [u32], f64)>,
}

impl<'a> InputBatch<'a> {
    pub fn from_samples(
        samples: &'a [crate::data::Sample],
        idxs: impl IntoIterator<Item = usize>,
    ) -> Self {
        InputBatch {
            rows: idxs
                .into_iter()
                .map(|i| (samples[i].features.as_slice(), 1.0))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Everything the trainer updates: encoder weights, head weights, proxies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    dims: ModelDims,
    seed: u64,
    pub meta: TrainedMeta,
    enc_w: Vec<Array2<f64>>,
    enc_b: Vec<Array1<f64>>,
    head_w: Vec<Array2<f64>>,
    head_b: Vec<Array1<f64>>,
    /// `proxies[c]` has shape `(K, h)`; rows are kept at unit L2 norm.
    proxies: [Array2<f64>; 2],
}

/// Gradient accumulator with the same tensor layout as [`ModelState`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub enc_w: Vec<Array2<f64>>,
    pub enc_b: Vec<Array1<f64>>,
    pub head_w: Vec<Array2<f64>>,
    pub head_b: Vec<Array1<f64>>,
    pub proxies: [Array2<f64>; 2],
}

/// Activations cached by a forward pass, consumed by the backward pass.
pub struct ForwardCache {
    /// Post-ReLU activations of every encoder layer; the last one is the raw
    /// (unnormalized) embedding.
    enc_act: Vec<Array2<f64>>,
    norms: Array1<f64>,
    emb: Array2<f64>,
    head_act: Vec<Array2<f64>>,
    logits: Array1<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array1<f64> {
        &self.logits
    }

    /// Normalized embeddings, one row per input.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.emb
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Renormalizes every row of `a` to unit L2 norm (guarded).
pub fn unit_normalize_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt();
        let scale = 1.0 / (norm + EMBED_NORM_EPS);
        row.mapv_inplace(|v| v * scale);
    }
}

impl ModelState {
    /// Fan-in-scaled Gaussian weights, zero biases, proxies uniform on the
    /// unit sphere. Deterministic in `seed`.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let mut gaussian_matrix = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let z: f64 = normal.sample(&mut rng);
                    z * std
                })
                .collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
        };

        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        let mut fan_in = dims.dim;
        for &width in &dims.encoder_widths {
            enc_w.push(gaussian_matrix(fan_in, width, (2.0 / fan_in as f64).sqrt()));
            // Small positive bias keeps the encoder output nonzero at the
            // all-zeros input, so the normalized embedding varies smoothly
            // along attribution paths instead of jumping at the baseline.
            enc_b.push(Array1::from_elem(width, 0.05));
            fan_in = width;
        }

        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for &width in dims.head_hidden.iter().chain(std::iter::once(&1)) {
            head_w.push(gaussian_matrix(fan_in, width, (2.0 / fan_in as f64).sqrt()));
            head_b.push(Array1::zeros(width));
            fan_in = width;
        }

        let h = dims.embedding_dim();
        let k = dims.proxies_per_class;
        let mut proxies = [
            gaussian_matrix(k, h, 1.0),
            gaussian_matrix(k, h, 1.0),
        ];
        for p in &mut proxies {
            unit_normalize_rows(p);
        }

        Ok(ModelState {
            dims: dims.clone(),
            seed,
            meta: TrainedMeta::default(),
            enc_w,
            enc_b,
            head_w,
            head_b,
            proxies,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// L2 norm of input feature `j`'s first-layer weight row — a cheap
    /// reliance signal used by diagnostics.
    pub fn first_layer_row_norm(&self, j: usize) -> f64 {
        let row = self.enc_w[0].row(j);
        row.dot(&row).sqrt()
    }

    pub fn proxies(&self) -> &[Array2<f64>; 2] {
        &self.proxies
    }

    pub fn proxies_mut(&mut self) -> &mut [Array2<f64>; 2] {
        &mut self.proxies
    }

    /// Forward pass over a sparse batch.
    pub fn forward(&self, inputs: &InputBatch) -> ForwardCache {
        let n = inputs.len();
        let h1 = self.dims.encoder_widths[0];

        // First layer exploits sparsity: sum the weight rows of the active
        // features, scaled by the row value.
        let w1 = self.enc_w[0].as_slice().expect("standard layout");
        let b1 = self.enc_b[0].as_slice().expect("standard layout");
        let mut z1 = Array2::zeros((n, h1));
        {
            let z1s = z1.as_slice_mut().expect("standard layout");
            for (i, (active, value)) in inputs.rows.iter().enumerate() {
                let out = &mut z1s[i * h1..(i + 1) * h1];
                out.copy_from_slice(b1);
                for &j in active.iter() {
                    let wrow = &w1[j as usize * h1..(j as usize + 1) * h1];
                    for (o, w) in out.iter_mut().zip(wrow) {
                        *o += value * w;
                    }
                }
            }
        }
        relu_inplace(&mut z1);

        let mut enc_act = Vec::with_capacity(self.enc_w.len());
        enc_act.push(z1);
        for l in 1..self.enc_w.len() {
            let mut z = enc_act[l - 1].dot(&self.enc_w[l]) + &self.enc_b[l];
            relu_inplace(&mut z);
            enc_act.push(z);
        }

        let raw = enc_act.last().expect("at least one layer");
        let norms: Array1<f64> = raw
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut emb = raw.clone();
        for (mut row, &norm) in emb.rows_mut().into_iter().zip(norms.iter()) {
            let scale = 1.0 / (norm + EMBED_NORM_EPS);
            row.mapv_inplace(|v| v * scale);
        }

        let (head_act, logits) = self.head_forward(&emb);

        ForwardCache {
            enc_act,
            norms,
            emb,
            head_act,
            logits,
        }
    }

    /// Affine head layers (no inner activation: the head is a stack of
    /// affine maps ending in one logit).
    fn head_forward(&self, emb: &Array2<f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let mut head_act = Vec::with_capacity(self.head_w.len());
        let mut cur = emb.clone();
        for (w, b) in self.head_w.iter().zip(&self.head_b) {
            let z = cur.dot(w) + b;
            head_act.push(z.clone());
            cur = z;
        }
        let logits = head_act
            .last()
            .expect("head has a final layer")
            .column(0)
            .to_owned();
        (head_act, logits)
    }

    /// Forward pass where every row shares one support with per-row scale
    /// values (straight-line attribution paths). Equivalent to `forward` on
    /// rows `(support, alpha_i)` but computes the first layer once.
    pub fn forward_scaled_support(&self, support: &[u32], alphas: &[f64]) -> ForwardCache {
        let h1 = self.dims.encoder_widths[0];
        let w1 = self.enc_w[0].as_slice().expect("standard layout");
        let mut colsum = vec![0.0f64; h1];
        for &j in support {
            let wrow = &w1[j as usize * h1..(j as usize + 1) * h1];
            for (o, w) in colsum.iter_mut().zip(wrow) {
                *o += w;
            }
        }
        let n = alphas.len();
        let b1 = self.enc_b[0].as_slice().expect("standard layout");
        let mut z1 = Array2::zeros((n, h1));
        {
            let z1s = z1.as_slice_mut().expect("standard layout");
            for (i, &alpha) in alphas.iter().enumerate() {
                let out = &mut z1s[i * h1..(i + 1) * h1];
                for k in 0..h1 {
                    out[k] = alpha * colsum[k] + b1[k];
                }
            }
        }
        relu_inplace(&mut z1);

        let mut enc_act = Vec::with_capacity(self.enc_w.len());
        enc_act.push(z1);
        for l in 1..self.enc_w.len() {
            let mut z = enc_act[l - 1].dot(&self.enc_w[l]) + &self.enc_b[l];
            relu_inplace(&mut z);
            enc_act.push(z);
        }
        let raw = enc_act.last().expect("at least one layer");
        let norms: Array1<f64> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut emb = raw.clone();
        for (mut row, &norm) in emb.rows_mut().into_iter().zip(norms.iter()) {
            let scale = 1.0 / (norm + EMBED_NORM_EPS);
            row.mapv_inplace(|v| v * scale);
        }
        let (head_act, logits) = self.head_forward(&emb);
        ForwardCache {
            enc_act,
            norms,
            emb,
            head_act,
            logits,
        }
    }

    /// Normalized embedding of one input.
    pub fn embed(&self, features: &[u32]) -> Array1<f64> {
        let batch = InputBatch {
            rows: vec![(features, 1.0)],
        };
        self.forward(&batch).emb.row(0).to_owned()
    }

    /// Raw logit of one input; predicted label is malware iff
    /// `sigmoid(logit) >= 0.5`, i.e. iff the logit is non-negative.
    pub fn logit(&self, features: &[u32]) -> f64 {
        let batch = InputBatch {
            rows: vec![(features, 1.0)],
        };
        self.forward(&batch).logits[0]
    }

    pub fn logits_batch(&self, inputs: &InputBatch) -> Array1<f64> {
        self.forward(inputs).logits
    }

    /// Backpropagates `d_logits` (and optionally a gradient w.r.t. the
    /// normalized embeddings) into parameter gradients. Proxy gradients are
    /// left zero; loss code fills them in.
    pub fn backward(
        &self,
        inputs: &InputBatch,
        cache: &ForwardCache,
        d_logits: &Array1<f64>,
        d_emb_extra: Option<&Array2<f64>>,
    ) -> Gradients {
        let mut grads = Gradients::zeros(&self.dims);
        let d_emb = self.backward_head(cache, d_logits, Some(&mut grads));
        let mut d_emb = d_emb;
        if let Some(extra) = d_emb_extra {
            d_emb += extra;
        }
        let delta1 = self.backward_encoder(cache, d_emb, Some(&mut grads));

        // First-layer weight gradient: scatter each row's delta onto the
        // weight rows of its active features.
        let h1 = self.dims.encoder_widths[0];
        let delta1 = if delta1.is_standard_layout() {
            delta1
        } else {
            Array2::from_shape_vec(delta1.dim(), delta1.iter().copied().collect())
                .expect("shape preserved")
        };
        let g1 = grads.enc_w[0].as_slice_mut().expect("standard layout");
        let d1 = delta1.as_slice().expect("standard layout");
        for (i, (active, value)) in inputs.rows.iter().enumerate() {
            let drow = &d1[i * h1..(i + 1) * h1];
            for &j in active.iter() {
                let grow = &mut g1[j as usize * h1..(j as usize + 1) * h1];
                for (g, d) in grow.iter_mut().zip(drow) {
                    *g += value * d;
                }
            }
        }
        grads.enc_b[0] += &delta1.sum_axis(ndarray::Axis(0));
        grads
    }

    /// Gradient of each logit w.r.t. the input coordinates on `support`,
    /// for a cache produced by [`Self::forward_scaled_support`]. Returns a
    /// `(n, support.len())` matrix.
    pub fn logit_input_gradients(&self, support: &[u32], cache: &ForwardCache) -> Array2<f64> {
        let n = cache.logits.len();
        let ones = Array1::ones(n);
        let d_emb = self.backward_head(cache, &ones, None);
        let delta1 = self.backward_encoder(cache, d_emb, None);

        let h1 = self.dims.encoder_widths[0];
        let delta1 = if delta1.is_standard_layout() {
            delta1
        } else {
            Array2::from_shape_vec(delta1.dim(), delta1.iter().copied().collect())
                .expect("shape preserved")
        };
        let w1 = self.enc_w[0].as_slice().expect("standard layout");
        let d1 = delta1.as_slice().expect("standard layout");
        let mut out = Array2::zeros((n, support.len()));
        for i in 0..n {
            let drow = &d1[i * h1..(i + 1) * h1];
            for (sj, &j) in support.iter().enumerate() {
                let wrow = &w1[j as usize * h1..(j as usize + 1) * h1];
                let mut acc = 0.0;
                for (w, d) in wrow.iter().zip(drow) {
                    acc += w * d;
                }
                out[(i, sj)] = acc;
            }
        }
        out
    }

    /// Head backward; returns the gradient w.r.t. the normalized embeddings.
    /// When `grads` is given, head weight gradients are accumulated.
    fn backward_head(
        &self,
        cache: &ForwardCache,
        d_logits: &Array1<f64>,
        mut grads: Option<&mut Gradients>,
    ) -> Array2<f64> {
        let n = d_logits.len();
        let n_layers = self.head_w.len();
        // delta on the pre-activation of the current head layer
        let mut delta = Array2::from_shape_fn((n, 1), |(i, _)| d_logits[i]);
        for l in (0..n_layers).rev() {
            let input: &Array2<f64> = if l == 0 {
                &cache.emb
            } else {
                &cache.head_act[l - 1]
            };
            if let Some(g) = grads.as_deref_mut() {
                g.head_w[l] += &input.t().dot(&delta);
                g.head_b[l] += &delta.sum_axis(ndarray::Axis(0));
            }
            delta = delta.dot(&self.head_w[l].t());
        }
        delta
    }

    /// Encoder backward from a gradient w.r.t. the *normalized* embeddings;
    /// returns the delta on the first layer's pre-activation. When `grads` is
    /// given, encoder weight gradients for layers 2.. are accumulated (layer
    /// 1 needs the sparse inputs and is handled by the caller).
    fn backward_encoder(
        &self,
        cache: &ForwardCache,
        d_emb: Array2<f64>,
        mut grads: Option<&mut Gradients>,
    ) -> Array2<f64> {
        // Through the row normalization: y = v / (|v| + eps).
        let raw = cache.enc_act.last().expect("at least one layer");
        let mut delta = d_emb;
        for ((mut drow, vrow), &norm) in delta
            .rows_mut()
            .into_iter()
            .zip(raw.rows())
            .zip(cache.norms.iter())
        {
            let scaled = norm + EMBED_NORM_EPS;
            if norm > 1e-300 {
                let vg = vrow.dot(&drow);
                let coeff = vg / (scaled * scaled * norm);
                for (d, &v) in drow.iter_mut().zip(vrow) {
                    *d = *d / scaled - coeff * v;
                }
            } else {
                drow.mapv_inplace(|d| d / scaled);
            }
        }

        // ReLU mask of the last encoder layer.
        delta.zip_mut_with(raw, |d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });

        for l in (1..self.enc_w.len()).rev() {
            if let Some(g) = grads.as_deref_mut() {
                g.enc_w[l] += &cache.enc_act[l - 1].t().dot(&delta);
                g.enc_b[l] += &delta.sum_axis(ndarray::Axis(0));
            }
            let mut d_prev = delta.dot(&self.enc_w[l].t());
            d_prev.zip_mut_with(&cache.enc_act[l - 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_prev;
        }
        delta
    }

    /// Parameter tensors in a fixed order (encoder, head, proxies), as flat
    /// slices. The optimizer and the checkpoint format rely on this order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for (w, b) in self.enc_w.iter_mut().zip(self.enc_b.iter_mut()) {
            v.push(w.as_slice_mut().expect("standard layout"));
            v.push(b.as_slice_mut().expect("standard layout"));
        }
        for (w, b) in self.head_w.iter_mut().zip(self.head_b.iter_mut()) {
            v.push(w.as_slice_mut().expect("standard layout"));
            v.push(b.as_slice_mut().expect("standard layout"));
        }
        for p in self.proxies.iter_mut() {
            v.push(p.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn param_tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for (w, b) in self.enc_w.iter().zip(self.enc_b.iter()) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        for (w, b) in self.head_w.iter().zip(self.head_b.iter()) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        for p in self.proxies.iter() {
            v.push(p.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds `delta` to the parameter at flat index `idx` (finite-difference
    /// probes and tests).
    pub fn perturb_param(&mut self, idx: usize, delta: f64) {
        let mut remaining = idx;
        for t in self.param_tensors_mut() {
            if remaining < t.len() {
                t[remaining] += delta;
                return;
            }
            remaining -= t.len();
        }
        panic!("parameter index {idx} out of range");
    }

    /// FNV fingerprint of all parameter bytes; used to assert bitwise
    /// parameter continuity across training stages.
    pub fn param_fingerprint(&self) -> u64 {
        let mut h = crate::util::Fnv64::new();
        for t in self.param_tensors() {
            for v in t {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.param_tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Writes the checkpoint: a JSON manifest plus every parameter tensor.
    /// Numbers round-trip exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            manifest: CheckpointManifest {
                dim: self.dims.dim,
                h: self.dims.embedding_dim(),
                k: self.dims.proxies_per_class,
                layer_widths: self.dims.encoder_widths.clone(),
                head_widths: self.dims.head_hidden.clone(),
                seed: self.seed,
                train_t_max: self.meta.train_t_max,
                granularity: self.meta.granularity,
            },
            tensors: self.named_tensors(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut bytes = serde_json::to_vec(&file)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let m = &file.manifest;
        let dims = ModelDims {
            dim: m.dim,
            encoder_widths: m.layer_widths.clone(),
            head_hidden: m.head_widths.clone(),
            proxies_per_class: m.k,
        };
        if dims.embedding_dim() != m.h {
            return Err(Error::schema(format!(
                "checkpoint embedding dim {} disagrees with layer widths {:?}",
                m.h, m.layer_widths
            )));
        }
        let mut state = ModelState::init(&dims, m.seed)?;
        state.meta = TrainedMeta {
            train_t_max: m.train_t_max,
            granularity: m.granularity,
        };
        for (name, tensor) in &file.tensors {
            state.assign_tensor(name, tensor)?;
        }
        // every tensor must have been present
        let expected = state.named_tensor_names();
        for name in &expected {
            if !file.tensors.contains_key(name) {
                return Err(Error::schema(format!("checkpoint missing tensor {name}")));
            }
        }
        Ok(state)
    }

    fn named_tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.enc_w.len() {
            names.push(format!("enc_w.{l}"));
            names.push(format!("enc_b.{l}"));
        }
        for l in 0..self.head_w.len() {
            names.push(format!("head_w.{l}"));
            names.push(format!("head_b.{l}"));
        }
        names.push("proxies.0".to_string());
        names.push("proxies.1".to_string());
        names
    }

    fn named_tensors(&self) -> BTreeMap<String, TensorData> {
        let mut out = BTreeMap::new();
        for (l, (w, b)) in self.enc_w.iter().zip(&self.enc_b).enumerate() {
            out.insert(format!("enc_w.{l}"), TensorData::from_mat(w));
            out.insert(format!("enc_b.{l}"), TensorData::from_vec(b));
        }
        for (l, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.insert(format!("head_w.{l}"), TensorData::from_mat(w));
            out.insert(format!("head_b.{l}"), TensorData::from_vec(b));
        }
        out.insert("proxies.0".to_string(), TensorData::from_mat(&self.proxies[0]));
        out.insert("proxies.1".to_string(), TensorData::from_mat(&self.proxies[1]));
        out
    }

    fn assign_tensor(&mut self, name: &str, data: &TensorData) -> Result<()> {
        let (kind, idx) = name
            .split_once('.')
            .ok_or_else(|| Error::schema(format!("bad tensor name {name}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::schema(format!("bad tensor name {name}")))?;
        let target_mat: Option<&mut Array2<f64>> = match kind {
            "enc_w" => self.enc_w.get_mut(idx),
            "head_w" => self.head_w.get_mut(idx),
            "proxies" => self.proxies.get_mut(idx),
            "enc_b" | "head_b" => None,
            _ => return Err(Error::schema(format!("unknown tensor {name}"))),
        };
        if let Some(mat) = target_mat {
            let arr = data.to_mat()?;
            if arr.dim() != mat.dim() {
                return Err(Error::schema(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    mat.dim()
                )));
            }
            *mat = arr;
            return Ok(());
        }
        let target_vec = match kind {
            "enc_b" => self.enc_b.get_mut(idx),
            "head_b" => self.head_b.get_mut(idx),
            _ => None,
        }
        .ok_or_else(|| Error::schema(format!("unknown tensor {name}")))?;
        let arr = data.to_vec1()?;
        if arr.len() != target_vec.len() {
            return Err(Error::schema(format!(
                "tensor {name} has length {}, expected {}",
                arr.len(),
                target_vec.len()
            )));
        }
        *target_vec = arr;
        Ok(())
    }
}

impl Gradients {
    pub fn zeros(dims: &ModelDims) -> Self {
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        let mut fan_in = dims.dim;
        for &width in &dims.encoder_widths {
            enc_w.push(Array2::zeros((fan_in, width)));
            enc_b.push(Array1::zeros(width));
            fan_in = width;
        }
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for &width in dims.head_hidden.iter().chain(std::iter::once(&1)) {
            head_w.push(Array2::zeros((fan_in, width)));
            head_b.push(Array1::zeros(width));
            fan_in = width;
        }
        let h = dims.embedding_dim();
        let k = dims.proxies_per_class;
        Gradients {
            enc_w,
            enc_b,
            head_w,
            head_b,
            proxies: [Array2::zeros((k, h)), Array2::zeros((k, h))],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        fn axpy2(dst: &mut [Array2<f64>], src: &[Array2<f64>], s: f64) {
            for (d, o) in dst.iter_mut().zip(src) {
                d.zip_mut_with(o, |a, &b| *a += s * b);
            }
        }
        fn axpy1(dst: &mut [Array1<f64>], src: &[Array1<f64>], s: f64) {
            for (d, o) in dst.iter_mut().zip(src) {
                d.zip_mut_with(o, |a, &b| *a += s * b);
            }
        }
        axpy2(&mut self.enc_w, &other.enc_w, scale);
        axpy1(&mut self.enc_b, &other.enc_b, scale);
        axpy2(&mut self.head_w, &other.head_w, scale);
        axpy1(&mut self.head_b, &other.head_b, scale);
        for (d, o) in self.proxies.iter_mut().zip(&other.proxies) {
            d.zip_mut_with(o, |a, &b| *a += scale * b);
        }
    }

    /// Same fixed tensor order as [`ModelState::param_tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for (w, b) in self.enc_w.iter().zip(self.enc_b.iter()) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        for (w, b) in self.head_w.iter().zip(self.head_b.iter()) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        for p in self.proxies.iter() {
            v.push(p.as_slice().expect("standard layout"));
        }
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dim: usize,
    h: usize,
    #[serde(rename = "K")]
    k: usize,
    layer_widths: Vec<usize>,
    head_widths: Vec<usize>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    train_t_max: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    granularity: Option<Granularity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    fn from_mat(a: &Array2<f64>) -> Self {
        TensorData {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn from_vec(a: &Array1<f64>) -> Self {
        TensorData {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    fn to_mat(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::schema("expected a rank-2 tensor".to_string()));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::schema(e.to_string()))
    }

    fn to_vec1(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::schema("expected a rank-1 tensor".to_string()));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    manifest: CheckpointManifest,
    tensors: BTreeMap<String, TensorData>,
}
