//! The full network: shared base encoder, stacked table and sequence
//! encoder layers coupled by table-guided attention (TGA) and sequence
//! feature injection (SFI), classification heads, and the joint loss.
//!
//! Within layer `l` the order is: SFI from the previous layer's sequence
//! output (the base encoding for layer 1), then the table layer, then the
//! TGA-based sequence layer — attention needs the layer's table before the
//! layer's sequence output can exist.

use std::rc::Rc;

use thiserror::Error;

use crate::cells::{gru_step, mdgru_step, BoundMdgru, GruParams, MdgruParams};
use crate::corpus::{Batch, Embeddings, BIO_TAGS, TABLE_LABELS};
use crate::numerics::{Graph, NumericsError, Parameter, RunRng, Tensor, ValueId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sentence has {len} tokens, model max is {max}")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture and training-time hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width.
    pub d_w: usize,
    /// Hidden width shared by the sequence GRU, the MDGRUs, and table cells.
    pub d_h: usize,
    /// Stacked encoder layers.
    pub layers: usize,
    /// Attention heads; must divide `d_h`.
    pub heads: usize,
    /// Dropout probability, applied in training mode to the embedding output
    /// and to each layer's sequence and table outputs.
    pub dropout: f64,
    /// Hard cap on sentence length.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_w: 300,
            d_h: 200,
            layers: 3,
            heads: 8,
            dropout: 0.5,
            max_len: crate::corpus::MAX_SENTENCE_LEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::Config("layers must be at least 1".into()));
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide d_h ({})",
                self.heads, self.d_h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.d_w == 0 || self.d_h == 0 || self.max_len == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// Per-layer weights.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub gru: GruParams,
    /// TGA score vectors, one `d_h×1` per head.
    pub tga_v: Vec<Rc<Parameter>>,
    /// TGA value projections, one `d_h×(d_h/h)` per head.
    pub tga_w: Vec<Rc<Parameter>>,
    pub tga_o: Rc<Parameter>,
    pub sfi_w: Rc<Parameter>,
    pub sfi_b: Rc<Parameter>,
    pub mdgru_fwd: MdgruParams,
    pub mdgru_bwd: MdgruParams,
    pub table_w: Rc<Parameter>,
    pub table_b: Rc<Parameter>,
}

/// Every trainable weight, each under a stable unique name.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub base_w: Rc<Parameter>,
    pub base_b: Rc<Parameter>,
    pub table0_w: Rc<Parameter>,
    pub table0_b: Rc<Parameter>,
    pub layers: Vec<LayerParams>,
    pub seq_head_w: Rc<Parameter>,
    pub seq_head_b: Rc<Parameter>,
    pub table_head_w: Rc<Parameter>,
    pub table_head_b: Rc<Parameter>,
}

impl ModelParameters {
    pub fn init(cfg: &ModelConfig, rng: &mut RunRng) -> Result<ModelParameters, ModelError> {
        let (d_w, d_h) = (cfg.d_w, cfg.d_h);
        let head_dim = d_h / cfg.heads;
        let base_w = Parameter::uniform("base.w", vec![d_w, d_h], d_w, rng)?;
        let base_b = Parameter::zeros("base.b", vec![1, d_h]);
        let table0_w = Parameter::uniform("table_init.w", vec![2 * d_h, d_h], 2 * d_h, rng)?;
        let table0_b = Parameter::zeros("table_init.b", vec![1, d_h]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let gru = GruParams::init(&format!("layer{l}.gru"), d_h, rng)?;
            let mut tga_v = Vec::with_capacity(cfg.heads);
            let mut tga_w = Vec::with_capacity(cfg.heads);
            for i in 1..=cfg.heads {
                tga_v.push(Parameter::uniform(
                    format!("layer{l}.tga.v{i}"),
                    vec![d_h, 1],
                    d_h,
                    rng,
                )?);
                tga_w.push(Parameter::uniform(
                    format!("layer{l}.tga.w{i}"),
                    vec![d_h, head_dim],
                    d_h,
                    rng,
                )?);
            }
            let tga_o = Parameter::uniform(format!("layer{l}.tga.w_o"), vec![d_h, d_h], d_h, rng)?;
            let sfi_w =
                Parameter::uniform(format!("layer{l}.sfi.w"), vec![2 * d_h, d_h], 2 * d_h, rng)?;
            let sfi_b = Parameter::zeros(format!("layer{l}.sfi.b"), vec![1, d_h]);
            let mdgru_fwd = MdgruParams::init(&format!("layer{l}.mdgru_fwd"), d_h, rng)?;
            let mdgru_bwd = MdgruParams::init(&format!("layer{l}.mdgru_bwd"), d_h, rng)?;
            let table_w = Parameter::uniform(
                format!("layer{l}.table.w"),
                vec![2 * d_h, d_h],
                2 * d_h,
                rng,
            )?;
            let table_b = Parameter::zeros(format!("layer{l}.table.b"), vec![1, d_h]);
            layers.push(LayerParams {
                gru,
                tga_v,
                tga_w,
                tga_o,
                sfi_w,
                sfi_b,
                mdgru_fwd,
                mdgru_bwd,
                table_w,
                table_b,
            });
        }
        let seq_head_w = Parameter::uniform("seq_head.w", vec![d_h, BIO_TAGS], d_h, rng)?;
        let seq_head_b = Parameter::zeros("seq_head.b", vec![1, BIO_TAGS]);
        let table_head_w = Parameter::uniform("table_head.w", vec![d_h, TABLE_LABELS], d_h, rng)?;
        let table_head_b = Parameter::zeros("table_head.b", vec![1, TABLE_LABELS]);
        Ok(ModelParameters {
            base_w,
            base_b,
            table0_w,
            table0_b,
            layers,
            seq_head_w,
            seq_head_b,
            table_head_w,
            table_head_b,
        })
    }

    /// Every parameter in a stable order; the checkpoint payload and the
    /// optimizer moment slots follow it.
    pub fn all(&self) -> Vec<Rc<Parameter>> {
        let mut out = vec![
            Rc::clone(&self.base_w),
            Rc::clone(&self.base_b),
            Rc::clone(&self.table0_w),
            Rc::clone(&self.table0_b),
        ];
        for layer in &self.layers {
            out.extend(layer.gru.params());
            for v in &layer.tga_v {
                out.push(Rc::clone(v));
            }
            for w in &layer.tga_w {
                out.push(Rc::clone(w));
            }
            out.push(Rc::clone(&layer.tga_o));
            out.push(Rc::clone(&layer.sfi_w));
            out.push(Rc::clone(&layer.sfi_b));
            out.extend(layer.mdgru_fwd.params());
            out.extend(layer.mdgru_bwd.params());
            out.push(Rc::clone(&layer.table_w));
            out.push(Rc::clone(&layer.table_b));
        }
        out.push(Rc::clone(&self.seq_head_w));
        out.push(Rc::clone(&self.seq_head_b));
        out.push(Rc::clone(&self.table_head_w));
        out.push(Rc::clone(&self.table_head_b));
        out
    }
}

/// Logit handles for one sentence inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct SentenceForward {
    /// `N×5` BIO logits.
    pub seq_logits: ValueId,
    /// `N²×4` cell logits, row-major over `(m, n)`.
    pub table_logits: ValueId,
}

/// Concrete logits for one sentence, outside any graph.
#[derive(Debug, Clone)]
pub struct SentenceLogits {
    pub seq: Tensor,
    pub table: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, rng: &mut RunRng) -> Result<Model, ModelError> {
        config.validate()?;
        let params = ModelParameters::init(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Model, ModelError> {
        config.validate()?;
        Ok(Model { config, params })
    }

    /// `B = XW_b + b_b` over embedded tokens, with embedding dropout in
    /// training mode.
    fn base_encode(
        &self,
        g: &mut Graph,
        embedded: Tensor,
        rng: &mut Option<&mut RunRng>,
    ) -> Result<ValueId, ModelError> {
        let x = g.input(embedded);
        let x = self.maybe_dropout(g, x, rng)?;
        let w = g.param(&self.params.base_w);
        let b = g.param(&self.params.base_b);
        let xw = g.matmul(x, w)?;
        Ok(g.add_bias(xw, b)?)
    }

    /// `T⁰[m][n] = ReLU([B_m; B_n] W + b)`, as an `N²×d_h` matrix.
    fn init_table(&self, g: &mut Graph, base: ValueId) -> Result<ValueId, ModelError> {
        let w = g.param(&self.params.table0_w);
        let b = g.param(&self.params.table0_b);
        pair_projection(g, base, w, b)
    }

    /// `X[m][n] = ReLU([S_m; S_n] W_s + b_s)` for one layer.
    fn sfi(&self, g: &mut Graph, layer: usize, seq: ValueId) -> Result<ValueId, ModelError> {
        let w = g.param(&self.params.layers[layer].sfi_w);
        let b = g.param(&self.params.layers[layer].sfi_b);
        pair_projection(g, seq, w, b)
    }

    /// Two directional MDGRU scans over the cell grid merged by an affine
    /// projection.
    fn table_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        t_prev: ValueId,
        x: ValueId,
        n: usize,
    ) -> Result<ValueId, ModelError> {
        let p = &self.params.layers[layer];
        let fwd = p.mdgru_fwd.bind(g);
        let bwd = p.mdgru_bwd.bind(g);
        let cells_fwd = scan_table(g, &fwd, x, t_prev, n, ScanDirection::TopLeft)?;
        let cells_bwd = scan_table(g, &bwd, x, t_prev, n, ScanDirection::BottomRight)?;
        let fwd_matrix = g.concat(&cells_fwd, 0)?;
        let bwd_matrix = g.concat(&cells_bwd, 0)?;
        let both = g.concat(&[fwd_matrix, bwd_matrix], 1)?;
        let w = g.param(&p.table_w);
        let b = g.param(&p.table_b);
        let merged = g.matmul(both, w)?;
        Ok(g.add_bias(merged, b)?)
    }

    /// GRU over positions followed by table-guided attention.
    fn sequence_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        seq_in: ValueId,
        table: ValueId,
        n: usize,
    ) -> Result<ValueId, ModelError> {
        let p = &self.params.layers[layer];
        let gru = p.gru.bind(g);
        let mut hidden = g.zeros(vec![1, self.config.d_h]);
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let x_i = g.row(seq_in, i)?;
            hidden = gru_step(g, &gru, x_i, hidden)?;
            states.push(hidden);
        }
        let s_bar = g.concat(&states, 0)?;
        self.tga(g, layer, table, s_bar, n)
    }

    /// Table-guided attention: per head `i`, scores over positions come from
    /// table cells, `score[m][n] = (T[m][n] · v_i) / sqrt(d_h)`, normalized
    /// over `n`, and aggregate `S̄ W_i`.
    fn tga(
        &self,
        g: &mut Graph,
        layer: usize,
        table: ValueId,
        s_bar: ValueId,
        n: usize,
    ) -> Result<ValueId, ModelError> {
        let p = &self.params.layers[layer];
        let score_vecs: Vec<ValueId> = p.tga_v.iter().map(|v| g.param(v)).collect();
        let v_all = g.concat(&score_vecs, 1)?; // d_h × heads
        let scores = g.matmul(table, v_all)?; // N² × heads
        let scaled = g.affine_scalar(scores, 1.0 / (self.config.d_h as f64).sqrt(), 0.0)?;
        let per_head = g.transpose(scaled)?; // heads × N²
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let flat = g.row(per_head, i)?;
            let grid = g.reshape(flat, vec![n, n])?;
            let attention = g.softmax(grid, 1)?;
            let w_i = g.param(&p.tga_w[i]);
            let projected = g.matmul(s_bar, w_i)?;
            heads.push(g.matmul(attention, projected)?);
        }
        let cat = g.concat(&heads, 1)?;
        let w_o = g.param(&p.tga_o);
        Ok(g.matmul(cat, w_o)?)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph,
        v: ValueId,
        rng: &mut Option<&mut RunRng>,
    ) -> Result<ValueId, ModelError> {
        match rng {
            Some(r) => Ok(g.dropout(v, self.config.dropout, true, r)?),
            None => Ok(v),
        }
    }

    /// Full forward pass for one sentence of embedded tokens (`N×d_w`).
    /// `dropout_rng` present means training mode.
    pub fn forward_sentence(
        &self,
        g: &mut Graph,
        embedded: Tensor,
        mut dropout_rng: Option<&mut RunRng>,
    ) -> Result<SentenceForward, ModelError> {
        let n = embedded.shape()[0];
        if n > self.config.max_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let base = self.base_encode(g, embedded, &mut dropout_rng)?;
        let mut table = self.init_table(g, base)?;
        let mut seq = base;
        for layer in 0..self.config.layers {
            let injected = self.sfi(g, layer, seq)?;
            table = self.table_layer(g, layer, table, injected, n)?;
            table = self.maybe_dropout(g, table, &mut dropout_rng)?;
            seq = self.sequence_layer(g, layer, seq, table, n)?;
            seq = self.maybe_dropout(g, seq, &mut dropout_rng)?;
        }
        let seq_logits = {
            let w = g.param(&self.params.seq_head_w);
            let b = g.param(&self.params.seq_head_b);
            let sw = g.matmul(seq, w)?;
            g.add_bias(sw, b)?
        };
        let table_logits = {
            let w = g.param(&self.params.table_head_w);
            let b = g.param(&self.params.table_head_b);
            let tw = g.matmul(table, w)?;
            g.add_bias(tw, b)?
        };
        Ok(SentenceForward {
            seq_logits,
            table_logits,
        })
    }

    /// Joint loss for one sentence: summed cross-entropy over unmasked
    /// tokens plus summed cross-entropy over unmasked cells.
    pub fn sentence_loss(
        &self,
        g: &mut Graph,
        fwd: &SentenceForward,
        gold_tags: &[usize],
        gold_table: &[usize],
        token_mask: &[bool],
        cell_mask: &[bool],
    ) -> Result<ValueId, ModelError> {
        let l_seq = g.cross_entropy(fwd.seq_logits, gold_tags, token_mask)?;
        let l_table = g.cross_entropy(fwd.table_logits, gold_table, cell_mask)?;
        Ok(g.add(l_seq, l_table)?)
    }

    /// Forward + loss over a batch: each sentence runs at its true length
    /// inside one graph, losses summed. Padding lives only in the batch
    /// container, so padded positions contribute exactly zero.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        embeddings: &Embeddings,
        mut dropout_rng: Option<&mut RunRng>,
    ) -> Result<ValueId, ModelError> {
        let mut total: Option<ValueId> = None;
        for item in &batch.items {
            let embedded = embeddings.rows_for(&item.ids[..item.len]);
            let fwd = self.forward_sentence(g, embedded, dropout_rng.as_deref_mut())?;
            let all_tokens = vec![true; item.len];
            let all_cells = vec![true; item.len * item.len];
            let loss =
                self.sentence_loss(g, &fwd, &item.tags, &item.table, &all_tokens, &all_cells)?;
            total = Some(match total {
                Some(acc) => g.add(acc, loss)?,
                None => loss,
            });
        }
        Ok(total.expect("batch must not be empty"))
    }

    /// Inference: concrete logits for one tokenized sentence.
    pub fn infer(
        &self,
        embeddings: &Embeddings,
        ids: &[usize],
    ) -> Result<SentenceLogits, ModelError> {
        let mut g = Graph::new();
        let embedded = embeddings.rows_for(ids);
        let fwd = self.forward_sentence(&mut g, embedded, None)?;
        Ok(SentenceLogits {
            seq: g.value(fwd.seq_logits).clone(),
            table: g.value(fwd.table_logits).clone(),
        })
    }
}

/// `ReLU(pair_concat(S) · W + b)` — shared shape of table init and SFI.
fn pair_projection(
    g: &mut Graph,
    seq: ValueId,
    w: ValueId,
    b: ValueId,
) -> Result<ValueId, ModelError> {
    let pairs = g.pair_concat(seq)?;
    let projected = g.matmul(pairs, w)?;
    let biased = g.add_bias(projected, b)?;
    Ok(g.relu(biased)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScanDirection {
    /// Neighbors `(m-1, n)` and `(m, n-1)`; row-major ascending schedule.
    TopLeft,
    /// Neighbors `(m+1, n)` and `(m, n+1)`; row-major descending schedule.
    BottomRight,
}

/// Runs one MDGRU over every cell of the grid. Each cell receives the
/// injected feature, the previous layer's cell, and its two directional
/// neighbors (zero vectors beyond the boundary). Returns cell states in
/// row-major order. Any schedule where the neighbors precede the cell gives
/// identical values; this one is row-major.
fn scan_table(
    g: &mut Graph,
    cell: &BoundMdgru,
    x: ValueId,
    t_prev: ValueId,
    n: usize,
    direction: ScanDirection,
) -> Result<Vec<ValueId>, ModelError> {
    let d = g.value(t_prev).shape()[1];
    let zero = g.zeros(vec![1, d]);
    let mut states: Vec<Option<ValueId>> = vec![None; n * n];
    let coords: Vec<(usize, usize)> = match direction {
        ScanDirection::TopLeft => (0..n).flat_map(|m| (0..n).map(move |k| (m, k))).collect(),
        ScanDirection::BottomRight => (0..n)
            .rev()
            .flat_map(|m| (0..n).rev().map(move |k| (m, k)))
            .collect(),
    };
    for (m, k) in coords {
        let idx = m * n + k;
        let x_cell = g.row(x, idx)?;
        let prev_cell = g.row(t_prev, idx)?;
        let (vertical, horizontal) = match direction {
            ScanDirection::TopLeft => (
                if m > 0 { states[(m - 1) * n + k] } else { None },
                if k > 0 { states[m * n + k - 1] } else { None },
            ),
            ScanDirection::BottomRight => (
                if m + 1 < n {
                    states[(m + 1) * n + k]
                } else {
                    None
                },
                if k + 1 < n {
                    states[m * n + k + 1]
                } else {
                    None
                },
            ),
        };
        let h2 = vertical.unwrap_or(zero);
        let h3 = horizontal.unwrap_or(zero);
        states[idx] = Some(mdgru_step(g, cell, x_cell, prev_cell, h2, h3)?);
    }
    Ok(states
        .into_iter()
        .map(|s| s.expect("cell visited"))
        .collect())
}
