//! Compact unidirectional transformer over item sequences.
//!
//! Pre-norm blocks with causal single- or multi-head attention; the item
//! embedding table doubles as the classification matrix (weight tying), so
//! row j of the catalog serves both as input embedding and output class
//! vector. Row 0 of the table is the padding embedding: frozen at zero,
//! excluded from gradients, never attended to by other positions.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const PAD_INDEX: usize = 0;
const LN_EPS: f64 = 1e-8;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCERCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Embedding dimension d.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum sequence length l.
    pub max_len: usize,
    /// Catalog size C (dense item ids 1..=C).
    pub catalog: usize,
    pub dropout: f64,
    /// Reuse the item embedding table as the classification matrix.
    pub tied_weights: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 64,
            n_layers: 2,
            n_heads: 1,
            max_len: 50,
            catalog: 1,
            dropout: 0.2,
            tied_weights: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.catalog < 1 {
            return Err(Error::Param("catalog size must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Param("max_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    attn_gain: Tensor,
    attn_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ffn_gain: Tensor,
    ffn_bias: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// All trainable parameters. The item table is (C+1) x d with row 0 the
/// zero-frozen padding row.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: BackboneConfig,
    item_table: Tensor,
    pos_table: Tensor,
    layers: Vec<LayerParams>,
    final_gain: Tensor,
    final_bias: Tensor,
    /// Separate classification matrix (C x d) when weight tying is off.
    output_table: Option<Tensor>,
}

/// Parameters per layer in visit order (keep in sync with `visit_params`).
const LAYER_PARAM_COUNT: usize = 16;

impl ModelState {
    pub fn init(config: BackboneConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let sigma = 1.0 / (d as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, sigma: f64| -> Tensor {
            let data: Vec<f64> = (0..rows * cols).map(|_| sigma * rng.next_normal()).collect();
            if cols == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(rows, cols, data)
            }
        };
        let mut item_table = normal(config.catalog + 1, d, sigma);
        item_table.row_mut(PAD_INDEX).fill(0.0);
        let pos_table = normal(config.max_len, d, sigma);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_gain: Tensor::vector(vec![1.0; d]),
                attn_bias: Tensor::vector(vec![0.0; d]),
                wq: normal(d, d, sigma),
                bq: Tensor::vector(vec![0.0; d]),
                wk: normal(d, d, sigma),
                bk: Tensor::vector(vec![0.0; d]),
                wv: normal(d, d, sigma),
                bv: Tensor::vector(vec![0.0; d]),
                wo: normal(d, d, sigma),
                bo: Tensor::vector(vec![0.0; d]),
                ffn_gain: Tensor::vector(vec![1.0; d]),
                ffn_bias: Tensor::vector(vec![0.0; d]),
                w1: normal(d, d, sigma),
                b1: Tensor::vector(vec![0.0; d]),
                w2: normal(d, d, sigma),
                b2: Tensor::vector(vec![0.0; d]),
            })
            .collect();
        let output_table =
            if config.tied_weights { None } else { Some(normal(config.catalog, d, sigma)) };
        Ok(ModelState {
            config,
            item_table,
            pos_table,
            layers,
            final_gain: Tensor::vector(vec![1.0; d]),
            final_bias: Tensor::vector(vec![0.0; d]),
            output_table,
        })
    }

    /// Raw catalog matrix (rows 1..=C of the table under tying, or the
    /// separate output table). Mutations of the item table are visible
    /// here by construction when weights are tied.
    pub fn catalog_row(&self, item: usize) -> &[f64] {
        debug_assert!((1..=self.config.catalog).contains(&item));
        match &self.output_table {
            None => self.item_table.row(item),
            Some(out) => out.row(item - 1),
        }
    }

    pub fn item_table(&self) -> &Tensor {
        &self.item_table
    }

    pub fn item_table_mut(&mut self) -> &mut Tensor {
        &mut self.item_table
    }

    /// Visit every parameter in a stable, documented order:
    /// item_table, pos_table, per layer (attn LN, Wq/bq, Wk/bk, Wv/bv,
    /// Wo/bo, ffn LN, W1/b1, W2/b2), final LN, and the untied output table
    /// last when present.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("item_table", &self.item_table);
        f("pos_table", &self.pos_table);
        for (i, layer) in self.layers.iter().enumerate() {
            let name = |p: &str| format!("layer{i}.{p}");
            f(&name("attn_gain"), &layer.attn_gain);
            f(&name("attn_bias"), &layer.attn_bias);
            f(&name("wq"), &layer.wq);
            f(&name("bq"), &layer.bq);
            f(&name("wk"), &layer.wk);
            f(&name("bk"), &layer.bk);
            f(&name("wv"), &layer.wv);
            f(&name("bv"), &layer.bv);
            f(&name("wo"), &layer.wo);
            f(&name("bo"), &layer.bo);
            f(&name("ffn_gain"), &layer.ffn_gain);
            f(&name("ffn_bias"), &layer.ffn_bias);
            f(&name("w1"), &layer.w1);
            f(&name("b1"), &layer.b1);
            f(&name("w2"), &layer.w2);
            f(&name("b2"), &layer.b2);
        }
        f("final_gain", &self.final_gain);
        f("final_bias", &self.final_bias);
        if let Some(out) = &self.output_table {
            f("output_table", out);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("item_table", &mut self.item_table);
        f("pos_table", &mut self.pos_table);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = |p: &str| format!("layer{i}.{p}");
            f(&name("attn_gain"), &mut layer.attn_gain);
            f(&name("attn_bias"), &mut layer.attn_bias);
            f(&name("wq"), &mut layer.wq);
            f(&name("bq"), &mut layer.bq);
            f(&name("wk"), &mut layer.wk);
            f(&name("bk"), &mut layer.bk);
            f(&name("wv"), &mut layer.wv);
            f(&name("bv"), &mut layer.bv);
            f(&name("wo"), &mut layer.wo);
            f(&name("bo"), &mut layer.bo);
            f(&name("ffn_gain"), &mut layer.ffn_gain);
            f(&name("ffn_bias"), &mut layer.ffn_bias);
            f(&name("w1"), &mut layer.w1);
            f(&name("b1"), &mut layer.b1);
            f(&name("w2"), &mut layer.w2);
            f(&name("b2"), &mut layer.b2);
        }
        f("final_gain", &mut self.final_gain);
        f("final_bias", &mut self.final_bias);
        if let Some(out) = &mut self.output_table {
            f("output_table", out);
        }
    }

    pub fn n_param_tensors(&self) -> usize {
        2 + self.layers.len() * LAYER_PARAM_COUNT + 2 + self.output_table.is_some() as usize
    }

    pub fn n_scalar_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    // ── checkpointing ────────────────────────────────────────────────
    // Layout: magic, u64 LE header length, JSON header
    // {version, config, arrays: [{name, shape}]}, then raw f64 LE data in
    // header order.

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct ArrayMeta<'a> {
            name: &'a str,
            shape: &'a [usize],
        }
        let mut names: Vec<String> = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut datas: Vec<&[f64]> = Vec::new();
        // Collect raw pointers in visit order via a second pass.
        let mut metas: Vec<(String, Vec<usize>)> = Vec::new();
        self.visit_params(|name, t| {
            metas.push((name.to_string(), t.shape().to_vec()));
        });
        for (name, shape) in &metas {
            names.push(name.clone());
            shapes.push(shape.clone());
        }
        let mut collected: Vec<Vec<f64>> = Vec::new();
        self.visit_params(|_, t| collected.push(t.data().to_vec()));
        for c in &collected {
            datas.push(c);
        }
        let header = serde_json::json!({
            "version": 1,
            "config": self.config,
            "arrays": names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| ArrayMeta { name: n, shape: s })
                .map(|a| serde_json::to_value(a).unwrap())
                .collect::<Vec<_>>(),
        });
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::Checkpoint(format!("create {}: {e}", path.display())))?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for data in datas {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("open {}: {e}", path.display())))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;
        if header["version"] != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", header["version"])));
        }
        let config: BackboneConfig = serde_json::from_value(header["config"].clone())?;
        let arrays = header["arrays"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing arrays".into()))?
            .clone();

        let mut rng = RngState::from_seed(0);
        let mut state = ModelState::init(config, &mut rng)?;
        let mut loaded: Vec<(String, Tensor)> = Vec::new();
        for arr in &arrays {
            let name = arr["name"].as_str().unwrap_or_default().to_string();
            let shape: Vec<usize> = serde_json::from_value(arr["shape"].clone())?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            f.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push((name, Tensor::new(shape, data)));
        }
        let mut idx = 0usize;
        let mut mismatch: Option<String> = None;
        state.visit_params_mut(|name, t| {
            if let Some((lname, lt)) = loaded.get(idx) {
                if lname != name || lt.shape() != t.shape() {
                    mismatch.get_or_insert_with(|| {
                        format!("array {idx}: expected {name}{:?}, got {lname}{:?}", t.shape(), lt.shape())
                    });
                } else {
                    *t = lt.clone();
                }
            } else {
                mismatch.get_or_insert_with(|| format!("missing array for {name}"));
            }
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::Checkpoint(m));
        }
        if idx != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model expects {idx}",
                loaded.len()
            )));
        }
        Ok(state)
    }
}

/// Handles into the tape for one forward pass.
pub struct ForwardPass {
    /// Model outputs X, one row per flattened position (s*l x d).
    pub x: NodeId,
    /// The item-table leaf (gradients accumulate here).
    pub table: NodeId,
    /// Classification matrix Y (C x d): a zero-copy view of table rows
    /// 1..=C under tying, or the separate output-table leaf.
    pub catalog: NodeId,
    /// Every parameter leaf in `visit_params` order.
    pub param_nodes: Vec<NodeId>,
}

/// Dropout mask entries: 0 with probability p, 1/(1-p) otherwise.
fn dropout_mask(n: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.next_f64() < p { 0.0 } else { keep }).collect()
}

/// Causal attention mask for one sequence: position i may attend to j iff
/// j <= i and (j is real or j == i). The diagonal stays open so padded
/// queries have non-empty support.
fn attention_mask(l: usize, real: &[bool]) -> Vec<f64> {
    let mut mask = vec![f64::NEG_INFINITY; l * l];
    for i in 0..l {
        for j in 0..=i {
            if real[j] || j == i {
                mask[i * l + j] = 0.0;
            }
        }
    }
    mask
}

/// Run the backbone on a batch. `dropout_rng` enables training-mode
/// dropout; pass `None` for deterministic evaluation.
pub fn forward(
    tape: &mut Tape,
    state: &ModelState,
    batch: &Batch,
    mut dropout_rng: Option<&mut RngState>,
) -> Result<ForwardPass> {
    let cfg = &state.config;
    cfg.validate()?;
    if batch.l != cfg.max_len {
        return Err(Error::Data(format!(
            "batch length {} does not match model max_len {}",
            batch.l, cfg.max_len
        )));
    }
    for &it in &batch.inputs {
        if it > cfg.catalog {
            return Err(Error::Data(format!(
                "item index {it} out of catalog range [0, {}]",
                cfg.catalog
            )));
        }
    }
    let (s, l, d) = (batch.s, batch.l, cfg.d);
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;

    // Register every parameter as a leaf, in visit order.
    let mut param_nodes: Vec<NodeId> = Vec::with_capacity(state.n_param_tensors());
    state.visit_params(|_, t| {
        param_nodes.push(tape.leaf(t, true));
    });
    let mut cursor = param_nodes.iter().copied();
    let table = cursor.next().unwrap();
    let pos_table = cursor.next().unwrap();
    struct LayerNodes {
        attn_gain: NodeId,
        attn_bias: NodeId,
        wq: NodeId,
        bq: NodeId,
        wk: NodeId,
        bk: NodeId,
        wv: NodeId,
        bv: NodeId,
        wo: NodeId,
        bo: NodeId,
        ffn_gain: NodeId,
        ffn_bias: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    }
    let layers: Vec<LayerNodes> = (0..cfg.n_layers)
        .map(|_| LayerNodes {
            attn_gain: cursor.next().unwrap(),
            attn_bias: cursor.next().unwrap(),
            wq: cursor.next().unwrap(),
            bq: cursor.next().unwrap(),
            wk: cursor.next().unwrap(),
            bk: cursor.next().unwrap(),
            wv: cursor.next().unwrap(),
            bv: cursor.next().unwrap(),
            wo: cursor.next().unwrap(),
            bo: cursor.next().unwrap(),
            ffn_gain: cursor.next().unwrap(),
            ffn_bias: cursor.next().unwrap(),
            w1: cursor.next().unwrap(),
            b1: cursor.next().unwrap(),
            w2: cursor.next().unwrap(),
            b2: cursor.next().unwrap(),
        })
        .collect();
    let final_gain = cursor.next().unwrap();
    let final_bias = cursor.next().unwrap();
    let output_table = cursor.next();

    // Embeddings: scaled item embedding plus slot-position embedding.
    let emb = tape.embed_rows(table, &batch.inputs, Some(PAD_INDEX))?;
    let emb = tape.scale(emb, (d as f64).sqrt());
    let slot_ids: Vec<usize> = (0..s).flat_map(|_| 0..l).collect();
    let pos = tape.embed_rows(pos_table, &slot_ids, None)?;
    let mut h = tape.add(emb, pos)?;
    let apply_dropout = |tape: &mut Tape, node: NodeId, rng: &mut Option<&mut RngState>| -> Result<NodeId> {
        match rng {
            Some(r) if cfg.dropout > 0.0 => {
                let n = tape.numel(node);
                let mask = dropout_mask(n, cfg.dropout, r);
                tape.mul_const_mask(node, &mask)
            }
            _ => Ok(node),
        }
    };
    h = apply_dropout(tape, h, &mut dropout_rng)?;

    // Per-sequence attention masks (constant across layers).
    let seq_masks: Vec<Vec<f64>> = (0..s)
        .map(|u| attention_mask(l, &batch.mask[u * l..(u + 1) * l]))
        .collect();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    for layer in &layers {
        // Attention block (pre-norm).
        let hn = tape.layer_norm_rows(h, layer.attn_gain, layer.attn_bias, LN_EPS)?;
        let q = tape.matmul(hn, layer.wq)?;
        let q = tape.add_row_vec(q, layer.bq)?;
        let k = tape.matmul(hn, layer.wk)?;
        let k = tape.add_row_vec(k, layer.bk)?;
        let v = tape.matmul(hn, layer.wv)?;
        let v = tape.add_row_vec(v, layer.bv)?;
        let mut seq_outputs = Vec::with_capacity(s);
        for u in 0..s {
            let qu = tape.view_rows(q, u * l, l)?;
            let ku = tape.view_rows(k, u * l, l)?;
            let vu = tape.view_rows(v, u * l, l)?;
            let head_out = |tape: &mut Tape, qh: NodeId, kh: NodeId, vh: NodeId| -> Result<NodeId> {
                let scores = tape.matmul_transb(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt_dh);
                let masked = tape.add_const_mask(scores, &seq_masks[u])?;
                let probs = tape.softmax_rows(masked);
                tape.matmul(probs, vh)
            };
            let ou = if n_heads == 1 {
                head_out(tape, qu, ku, vu)?
            } else {
                let mut heads = Vec::with_capacity(n_heads);
                for hd in 0..n_heads {
                    let qh = tape.slice_cols(qu, hd * dh, dh)?;
                    let kh = tape.slice_cols(ku, hd * dh, dh)?;
                    let vh = tape.slice_cols(vu, hd * dh, dh)?;
                    heads.push(head_out(tape, qh, kh, vh)?);
                }
                tape.concat_cols(&heads)?
            };
            seq_outputs.push(ou);
        }
        let attn = tape.concat_rows(&seq_outputs)?;
        let attn = tape.matmul(attn, layer.wo)?;
        let attn = tape.add_row_vec(attn, layer.bo)?;
        let attn = apply_dropout(tape, attn, &mut dropout_rng)?;
        h = tape.add(h, attn)?;

        // Feed-forward block (pre-norm).
        let hn2 = tape.layer_norm_rows(h, layer.ffn_gain, layer.ffn_bias, LN_EPS)?;
        let f1 = tape.matmul(hn2, layer.w1)?;
        let f1 = tape.add_row_vec(f1, layer.b1)?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, layer.w2)?;
        let f2 = tape.add_row_vec(f2, layer.b2)?;
        let f2 = apply_dropout(tape, f2, &mut dropout_rng)?;
        h = tape.add(h, f2)?;
    }

    let x = tape.layer_norm_rows(h, final_gain, final_bias, LN_EPS)?;
    let catalog = match output_table {
        Some(out) => out,
        None => tape.view_rows(table, 1, cfg.catalog)?,
    };
    Ok(ForwardPass { x, table, catalog, param_nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::batch_for_inference;

    fn tiny_state(catalog: usize, l: usize, seed: u64) -> ModelState {
        let config = BackboneConfig {
            d: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: l,
            catalog,
            dropout: 0.0,
            tied_weights: true,
        };
        ModelState::init(config, &mut RngState::from_seed(seed)).unwrap()
    }

    fn run_forward(state: &ModelState, batch: &Batch) -> Vec<f64> {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, state, batch, None).unwrap();
        tape.data(fwd.x).to_vec()
    }

    #[test]
    fn config_invariants_enforced() {
        let bad = BackboneConfig { d: 10, n_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { catalog: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn all_padding_batch_is_fully_masked_and_finite() {
        let state = tiny_state(5, 4, 3);
        let batch = Batch {
            s: 2,
            l: 4,
            inputs: vec![0; 8],
            targets: vec![0; 8],
            mask: vec![false; 8],
        };
        assert_eq!(batch.active_positions(), 0);
        let x = run_forward(&state, &batch);
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(batch.target_rows().iter().all(|&t| t == crate::tape::INACTIVE));
    }

    #[test]
    fn permuting_sequences_permutes_output_blocks() {
        let state = tiny_state(9, 5, 7);
        let seq_a: Vec<usize> = vec![1, 2, 3, 4, 5];
        let seq_b: Vec<usize> = vec![6, 7, 8, 9, 1];
        let b_ab = batch_for_inference(&[&seq_a, &seq_b], 5);
        let b_ba = batch_for_inference(&[&seq_b, &seq_a], 5);
        let x_ab = run_forward(&state, &b_ab);
        let x_ba = run_forward(&state, &b_ba);
        let block = 5 * state.config.d;
        assert_eq!(&x_ab[..block], &x_ba[block..]);
        assert_eq!(&x_ab[block..], &x_ba[..block]);
    }

    #[test]
    fn causality_changing_item_j_only_affects_positions_from_j() {
        let state = tiny_state(12, 6, 11);
        let base: Vec<usize> = vec![1, 2, 3, 4, 5, 6];
        let mut changed = base.clone();
        changed[3] = 9; // perturb position 3
        let xb = run_forward(&state, &batch_for_inference(&[&base], 6));
        let xc = run_forward(&state, &batch_for_inference(&[&changed], 6));
        let d = state.config.d;
        for pos in 0..6 {
            let same = xb[pos * d..(pos + 1) * d] == xc[pos * d..(pos + 1) * d];
            if pos < 3 {
                assert!(same, "position {pos} changed despite causality");
            } else if pos == 3 {
                assert!(!same, "perturbed position must change");
            }
        }
    }

    #[test]
    fn causality_zeroing_suffix_keeps_prefix_bit_identical() {
        // Mask layout is arbitrary, so right-pad manually: the full batch
        // and the suffix-zeroed batch must agree bit for bit on the prefix.
        let state = tiny_state(12, 6, 13);
        let full = Batch {
            s: 1,
            l: 6,
            inputs: vec![3, 1, 4, 1, 5, 9],
            targets: vec![1, 4, 1, 5, 9, 2],
            mask: vec![true; 6],
        };
        let zeroed = Batch {
            s: 1,
            l: 6,
            inputs: vec![3, 1, 4, 0, 0, 0],
            targets: vec![1, 4, 1, 0, 0, 0],
            mask: vec![true, true, true, false, false, false],
        };
        let x_full = run_forward(&state, &full);
        let x_zero = run_forward(&state, &zeroed);
        let d = state.config.d;
        assert_eq!(x_full[..3 * d], x_zero[..3 * d]);
        assert_ne!(x_full[3 * d..], x_zero[3 * d..]);
    }

    #[test]
    fn padded_keys_do_not_influence_real_positions() {
        // Perturbing the positional embeddings of padded slots must leave
        // real positions bit-identical: padded keys are masked out of every
        // real query's attention.
        let state = tiny_state(10, 5, 17);
        let hist: Vec<usize> = vec![2, 4, 6];
        let batch = batch_for_inference(&[&hist], 5);
        let x = run_forward(&state, &batch);
        let mut perturbed = state.clone();
        perturbed.visit_params_mut(|name, t| {
            if name == "pos_table" {
                t.row_mut(0).fill(7.5);
                t.row_mut(1).fill(-3.25);
            }
        });
        let xp = run_forward(&perturbed, &batch);
        let d = state.config.d;
        // Slots 0..2 are padding; slots 2..5 are real and must not move.
        assert_eq!(x[2 * d..], xp[2 * d..]);
        assert_ne!(x[..2 * d], xp[..2 * d]);
    }

    #[test]
    fn tied_catalog_returns_table_rows_and_routes_gradients() {
        let state = tiny_state(5, 4, 19);
        let batch = batch_for_inference(&[&[1usize, 2, 3][..]], 4);
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &state, &batch, None).unwrap();
        assert_eq!(tape.dims(fwd.catalog), (5, 8));
        for item in 1..=5usize {
            assert_eq!(tape.data(fwd.catalog)[(item - 1) * 8..item * 8], *state.catalog_row(item));
        }
        // Gradient of sum(Y) accumulates into table rows 1..=C only.
        let root = tape.sum_all(fwd.catalog);
        tape.backward(root).unwrap();
        let g = tape.grad_tensor(fwd.table);
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        for item in 1..=5 {
            assert!(g.row(item).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn weight_tying_mutation_is_observable_in_catalog() {
        let mut state = tiny_state(4, 3, 23);
        state.item_table_mut().row_mut(2)[0] = 42.0;
        assert_eq!(state.catalog_row(2)[0], 42.0);
    }

    #[test]
    fn untied_mode_has_separate_output_matrix() {
        let config = BackboneConfig {
            d: 4,
            n_layers: 1,
            n_heads: 1,
            max_len: 3,
            catalog: 4,
            dropout: 0.0,
            tied_weights: false,
        };
        let mut state = ModelState::init(config, &mut RngState::from_seed(1)).unwrap();
        let before = state.catalog_row(2).to_vec();
        state.item_table_mut().row_mut(2)[0] += 5.0;
        assert_eq!(state.catalog_row(2), before.as_slice());
    }

    #[test]
    fn dropout_draws_are_deterministic_and_off_in_eval() {
        let config = BackboneConfig {
            d: 8,
            n_layers: 1,
            n_heads: 1,
            max_len: 4,
            catalog: 6,
            dropout: 0.5,
            tied_weights: true,
        };
        let state = ModelState::init(config, &mut RngState::from_seed(2)).unwrap();
        let batch = batch_for_inference(&[&[1usize, 2, 3, 4][..]], 4);
        let run = |seed: Option<u64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = seed.map(RngState::from_seed);
            let fwd = forward(&mut tape, &state, &batch, rng.as_mut()).unwrap();
            tape.data(fwd.x).to_vec()
        };
        assert_eq!(run(Some(9)), run(Some(9)));
        assert_ne!(run(Some(9)), run(None));
        assert_eq!(run(None), run(None));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_every_parameter() {
        let state = tiny_state(7, 5, 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        state.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(state.config, loaded.config);
        let mut pairs: Vec<(String, Tensor)> = Vec::new();
        state.visit_params(|n, t| pairs.push((n.into(), t.clone())));
        let mut idx = 0;
        loaded.visit_params(|n, t| {
            assert_eq!(pairs[idx].0, n);
            assert_eq!(pairs[idx].1, *t);
            idx += 1;
        });
        // Identical forward outputs.
        let batch = batch_for_inference(&[&[1usize, 5, 2][..]], 5);
        assert_eq!(run_forward(&state, &batch), run_forward(&loaded, &batch));
    }

    #[test]
    fn padding_row_stays_zero_with_zero_gradient() {
        let state = tiny_state(5, 4, 31);
        assert!(state.item_table().row(0).iter().all(|&v| v == 0.0));
        let batch = Batch {
            s: 1,
            l: 4,
            inputs: vec![0, 0, 1, 2],
            targets: vec![0, 0, 2, 3],
            mask: vec![false, false, true, true],
        };
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &state, &batch, None).unwrap();
        let root = tape.sum_all(fwd.x);
        tape.backward(root).unwrap();
        let g = tape.grad_tensor(fwd.table);
        assert!(g.row(0).iter().all(|&v| v == 0.0), "padding row must get zero gradient");
    }
}
