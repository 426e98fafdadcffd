//! Desk-scale pre-norm encoder-decoder transformer with sparsifiable
//! feed-forward layers.
//!
//! Only the two matrices of each feed-forward block are ever registered for
//! sparsification; attention, projection and embedding weights stay dense.
//! Positional encodings are sinusoidal (stateless, deterministic).

use crate::error::{Error, Result};
use crate::nm::{masked_forward, NmPattern, SparsityMask};
use crate::task::{Example, BOS, EOS, PAD};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Fixed true: only feed-forward weights are registered for masking.
    pub sparsify_ff_only: bool,
}

impl ModelConfig {
    /// Desk-scale default; d_ff = 256 keeps every pattern up to M = 16
    /// trainable (16 surviving weights per group at 1:16).
    pub fn desk() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            vocab: 32,
            max_len: 32,
            sparsify_ff_only: true,
        }
    }

    /// Reference configuration used for the analytic cost comparison.
    pub fn paper_reference() -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 1024,
            d_ff: 4096,
            heads: 16,
            vocab: 32_000,
            max_len: 256,
            sparsify_ff_only: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 4 {
            return Err(Error::Config(format!(
                "vocab must be >= 4 (PAD=0, BOS=1, EOS=2 reserved), got {}",
                self.vocab
            )));
        }
        if !self.sparsify_ff_only {
            return Err(Error::Config(
                "sparsify_ff_only is fixed true in this build".into(),
            ));
        }
        Ok(())
    }
}

/// One sparsifiable weight: parameter name plus its grouping axis (the
/// matmul reduction dimension, axis 0 of the stored [in, out] matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: String,
    pub axis: usize,
}

pub type MaskSet = BTreeMap<String, SparsityMask>;

#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub registry: Vec<RegistryEntry>,
    pos: Tensor,
}

fn sinusoidal(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for p in 0..max_len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = (p as f64 * rate).sin();
            data[p * d + 2 * i + 1] = (p as f64 * rate).cos();
        }
    }
    Tensor::new(vec![max_len, d], data).unwrap()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Transformer> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let mut params = BTreeMap::new();
    let mut registry = Vec::new();

    let insert_ln = |params: &mut BTreeMap<String, Tensor>, name: &str| {
        params.insert(
            format!("{name}.g"),
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        );
        params.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    };

    params.insert("enc.embed".into(), xavier(&mut rng, cfg.vocab, d));
    params.insert("dec.embed".into(), xavier(&mut rng, cfg.vocab, d));

    let attn_block = |params: &mut BTreeMap<String, Tensor>,
                          rng: &mut ChaCha8Rng,
                          prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{prefix}.{w}"), xavier(rng, d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{prefix}.{b}"), Tensor::zeros(&[d]));
        }
    };
    let ff_block = |params: &mut BTreeMap<String, Tensor>,
                        registry: &mut Vec<RegistryEntry>,
                        rng: &mut ChaCha8Rng,
                        prefix: &str| {
        params.insert(format!("{prefix}.w1"), xavier(rng, d, ff));
        params.insert(format!("{prefix}.b1"), Tensor::zeros(&[ff]));
        params.insert(format!("{prefix}.w2"), xavier(rng, ff, d));
        params.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        registry.push(RegistryEntry {
            name: format!("{prefix}.w1"),
            axis: 0,
        });
        registry.push(RegistryEntry {
            name: format!("{prefix}.w2"),
            axis: 0,
        });
    };

    for i in 0..cfg.enc_layers {
        insert_ln(&mut params, &format!("enc.{i}.ln1"));
        attn_block(&mut params, &mut rng, &format!("enc.{i}.attn"));
        insert_ln(&mut params, &format!("enc.{i}.ln2"));
        ff_block(&mut params, &mut registry, &mut rng, &format!("enc.{i}.ff"));
    }
    insert_ln(&mut params, "enc.final_ln");
    for i in 0..cfg.dec_layers {
        insert_ln(&mut params, &format!("dec.{i}.ln1"));
        attn_block(&mut params, &mut rng, &format!("dec.{i}.self"));
        insert_ln(&mut params, &format!("dec.{i}.ln2"));
        attn_block(&mut params, &mut rng, &format!("dec.{i}.cross"));
        insert_ln(&mut params, &format!("dec.{i}.ln3"));
        ff_block(&mut params, &mut registry, &mut rng, &format!("dec.{i}.ff"));
    }
    insert_ln(&mut params, "dec.final_ln");
    params.insert("out.w".into(), xavier(&mut rng, d, cfg.vocab));
    params.insert("out.b".into(), Tensor::zeros(&[cfg.vocab]));

    Ok(Transformer {
        cfg: *cfg,
        params,
        registry,
        pos: sinusoidal(cfg.max_len, d),
    })
}

impl Transformer {
    /// Check every registered weight can carry `pattern` along its grouping
    /// axis.
    pub fn validate_pattern(&self, pattern: NmPattern) -> Result<()> {
        let m = pattern.m() as usize;
        for entry in &self.registry {
            let w = &self.params[&entry.name];
            let axis_len = w.shape[entry.axis];
            if axis_len % m != 0 {
                return Err(Error::Config(format!(
                    "layer {}: axis {} length {} not divisible by M={} of pattern {}",
                    entry.name, entry.axis, axis_len, m, pattern
                )));
            }
        }
        Ok(())
    }
}

/// Model parameters bound onto a tape for one forward/backward pass.
/// `effective` maps registered weight names to their mask-product nodes,
/// whose gradients are the straight-through (dense) gradients.
pub struct Bound {
    leaves: BTreeMap<String, NodeId>,
    used: BTreeMap<String, NodeId>,
    pub effective: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn leaf(&self, name: &str) -> NodeId {
        self.leaves[name]
    }

    fn get(&self, name: &str) -> NodeId {
        self.used[name]
    }
}

impl Transformer {
    /// Place parameters on the tape. With `masks`, registered weights are
    /// replaced by their masked products in the forward pass; a dense-phase
    /// run passes None and never touches the mask machinery.
    pub fn bind(
        &self,
        tape: &mut Tape,
        masks: Option<&MaskSet>,
        trainable: bool,
    ) -> Result<Bound> {
        let mut leaves = BTreeMap::new();
        let mut used = BTreeMap::new();
        let mut effective = BTreeMap::new();
        for (name, value) in &self.params {
            let id = if trainable {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            leaves.insert(name.clone(), id);
            let use_id = match masks.and_then(|m| m.get(name)) {
                Some(mask) => {
                    let eff = masked_forward(tape, id, mask)?;
                    effective.insert(name.clone(), eff);
                    eff
                }
                None => id,
            };
            used.insert(name.clone(), use_id);
        }
        Ok(Bound {
            leaves,
            used,
            effective,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dk = d / h;
        let q = tape.matmul(q_in, bound.get(&format!("{prefix}.wq")))?;
        let q = tape.add_bias(q, bound.get(&format!("{prefix}.bq")))?;
        let k = tape.matmul(kv_in, bound.get(&format!("{prefix}.wk")))?;
        let k = tape.add_bias(k, bound.get(&format!("{prefix}.bk")))?;
        let v = tape.matmul(kv_in, bound.get(&format!("{prefix}.wv")))?;
        let v = tape.add_bias(v, bound.get(&format!("{prefix}.bv")))?;
        let lq = tape.value(q).dims2()?.0;
        let lk = tape.value(k).dims2()?.0;
        let causal_mask = if causal {
            let mut m = vec![0.0; lq * lk];
            for i in 0..lq {
                for j in 0..lk {
                    if j > i {
                        m[i * lk + j] = -1e9;
                    }
                }
            }
            Some(tape.constant(Tensor::new(vec![lq, lk], m)?))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = tape.slice_cols(q, head * dk, dk)?;
            let kh = tape.slice_cols(k, head * dk, dk)?;
            let vh = tape.slice_cols(v, head * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(cm) = causal_mask {
                scores = tape.add(scores, cm)?;
            }
            let probs = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let out = tape.matmul(cat, bound.get(&format!("{prefix}.wo")))?;
        tape.add_bias(out, bound.get(&format!("{prefix}.bo")))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = tape.matmul(x, bound.get(&format!("{prefix}.w1")))?;
        let h = tape.add_bias(h, bound.get(&format!("{prefix}.b1")))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, bound.get(&format!("{prefix}.w2")))?;
        tape.add_bias(h, bound.get(&format!("{prefix}.b2")))
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        tape.layer_norm(
            x,
            bound.get(&format!("{prefix}.g")),
            bound.get(&format!("{prefix}.b")),
        )
    }

    fn embed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: &str,
        ids: &[usize],
    ) -> Result<NodeId> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let e = tape.embedding_lookup(bound.get(table), ids)?;
        let e = tape.scale(e, (self.cfg.d_model as f64).sqrt());
        let d = self.cfg.d_model;
        let pos = Tensor::new(
            vec![ids.len(), d],
            self.pos.data[..ids.len() * d].to_vec(),
        )?;
        let p = tape.constant(pos);
        tape.add(e, p)
    }

    /// Encoder stack output for one source sequence.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, src: &[usize]) -> Result<NodeId> {
        let mut x = self.embed(tape, bound, "enc.embed", src)?;
        for i in 0..self.cfg.enc_layers {
            let n1 = self.layer_norm(tape, bound, &format!("enc.{i}.ln1"), x)?;
            let a = self.attention(tape, bound, &format!("enc.{i}.attn"), n1, n1, false)?;
            x = tape.add(x, a)?;
            let n2 = self.layer_norm(tape, bound, &format!("enc.{i}.ln2"), x)?;
            let f = self.feed_forward(tape, bound, &format!("enc.{i}.ff"), n2)?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, bound, "enc.final_ln", x)
    }

    /// Decoder logits [tgt_len, vocab] given encoder memory.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: NodeId,
        tgt_in: &[usize],
    ) -> Result<NodeId> {
        let mut y = self.embed(tape, bound, "dec.embed", tgt_in)?;
        for i in 0..self.cfg.dec_layers {
            let n1 = self.layer_norm(tape, bound, &format!("dec.{i}.ln1"), y)?;
            let a = self.attention(tape, bound, &format!("dec.{i}.self"), n1, n1, true)?;
            y = tape.add(y, a)?;
            let n2 = self.layer_norm(tape, bound, &format!("dec.{i}.ln2"), y)?;
            let c = self.attention(tape, bound, &format!("dec.{i}.cross"), n2, memory, false)?;
            y = tape.add(y, c)?;
            let n3 = self.layer_norm(tape, bound, &format!("dec.{i}.ln3"), y)?;
            let f = self.feed_forward(tape, bound, &format!("dec.{i}.ff"), n3)?;
            y = tape.add(y, f)?;
        }
        let y = self.layer_norm(tape, bound, "dec.final_ln", y)?;
        let logits = tape.matmul(y, bound.get("out.w"))?;
        tape.add_bias(logits, bound.get("out.b"))
    }

    /// Teacher-forced logits for one example.
    pub fn forward_example(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ex: &Example,
    ) -> Result<NodeId> {
        let memory = self.encode(tape, bound, &ex.source)?;
        self.decode(tape, bound, memory, &ex.target[..ex.target.len() - 1])
    }

    /// Token-weighted mean cross entropy over a batch. Also returns the
    /// per-example logits for metric extraction.
    pub fn loss_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Example],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let total_tokens: usize = batch.iter().map(|ex| ex.target.len() - 1).sum();
        let mut loss: Option<NodeId> = None;
        let mut all_logits = Vec::with_capacity(batch.len());
        for ex in batch {
            let logits = self.forward_example(tape, bound, ex)?;
            all_logits.push(logits);
            let ce = tape.cross_entropy(logits, &ex.target[1..], PAD)?;
            let w = (ex.target.len() - 1) as f64 / total_tokens as f64;
            let weighted = tape.scale(ce, w);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok((loss.unwrap(), all_logits))
    }

    /// Greedy decode of one source sequence (validation-time sequence
    /// accuracy). Returns generated ids without BOS, up to and excluding EOS.
    pub fn greedy_decode(&self, masks: Option<&MaskSet>, src: &[usize]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, masks, false)?;
        let memory = self.encode(&mut tape, &bound, src)?;
        let mut tgt = vec![BOS];
        let max_out = (src.len() + 2).min(self.cfg.max_len);
        while tgt.len() < max_out {
            let logits = self.decode(&mut tape, &bound, memory, &tgt)?;
            let v = self.cfg.vocab;
            let last = &tape.value(logits).data[(tgt.len() - 1) * v..tgt.len() * v];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if next == EOS {
                break;
            }
            tgt.push(next);
        }
        Ok(tgt[1..].to_vec())
    }
}

/// Count argmax token matches against targets, excluding PAD positions.
pub fn token_matches(logits: &Tensor, targets: &[usize]) -> (usize, usize) {
    let (t, v) = logits.dims2().expect("logits are rank 2");
    debug_assert_eq!(t, targets.len());
    let mut correct = 0;
    let mut counted = 0;
    for (i, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        counted += 1;
        let row = &logits.data[i * v..(i + 1) * v];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    (correct, counted)
}
