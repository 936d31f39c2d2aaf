//! Stateful encoder-decoder assembly and generation.

mod beam;
mod config;

pub use beam::{beam_search, BeamConfig, Hypothesis, ModelScorer, TokenScorer};
pub use config::{ModelConfig, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ResetFlags, StepBatch, TokenBatch};
use crate::error::{Error, Result};
use crate::memory::{
    dual_stream_layer, gated_memory_update, memformer_read, memformer_write, reset_and_normalize, DualLayer,
    GateParams, MemformerRead, MemformerWriter, MemoryGlobals, MemoryState,
};
use crate::nn::{encoder_layer, DecoderLayer, Initializer, Norm, StreamParams};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Token embeddings start with standard deviation `1/√d` and are scaled by
/// `√d` on input and `1/√d` on output, so inputs start at unit scale and the
/// untrained output distribution is close to uniform.
fn token_embed_bound(d: usize) -> f64 {
    (3.0 / d as f64).sqrt()
}

/// Position embeddings start at unit standard deviation.
const POSITION_BOUND: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone)]
enum EncoderLayout {
    Plain(Vec<StreamParams>),
    Dual {
        layers: Vec<DualLayer>,
        globals: MemoryGlobals,
        final_norm: Norm,
        gate: GateParams,
    },
    Memformer {
        layers: Vec<(StreamParams, MemformerRead)>,
        globals: MemoryGlobals,
        writer: MemformerWriter,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    token_embedding: ParamId,
    enc_positions: ParamId,
    dec_positions: ParamId,
    encoder: EncoderLayout,
    enc_final: Norm,
    decoder: Vec<DecoderLayer>,
    dec_final: Norm,
}

fn memory_globals<F: Scalar>(init: &mut Initializer<'_, F>, k: usize, d: usize) -> MemoryGlobals {
    MemoryGlobals {
        v_b: init.uniform("mem.v_b", &[k, d], 1.0),
        reset_norm: init.norm("mem.reset_norm", d),
    }
}

/// Encoder output for one timestep.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Final normalized token states `[B×n×d]`.
    pub states: Var,
    /// Memory for the next timestep `[B×k×d]`.
    pub next_memory: Var,
    /// Per-slot update gates `[B×k×1]` for the gated variants.
    pub gates: Option<Var>,
}

/// Loss and carried state of one training timestep.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Weighted cross-entropy divided by the caller's normalizer.
    pub loss: Var,
    pub logits: Var,
    pub encoded: Encoded,
}

/// Model parameters together with the layout that gives them meaning.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> Model<F> {
    /// Deterministic initialization. Backbone weights come from one random
    /// stream and memory weights from another, so every variant shares the
    /// same backbone for a given seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let hidden = config.ffn_hidden();
        let k = config.slots();
        let mut params = ParamStore::new();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut params,
            rng: &mut rng,
        };
        let token_embedding = init.uniform("embed.token", &[config.vocab_size, d], token_embed_bound(d));
        let enc_positions = init.uniform("embed.enc_pos", &[config.max_positions, d], POSITION_BOUND);
        let dec_positions = init.uniform("embed.dec_pos", &[config.max_positions, d], POSITION_BOUND);
        let inputs: Vec<StreamParams> = (0..config.encoder_layers)
            .map(|l| init.stream(&format!("enc.{l}"), d, hidden))
            .collect();
        let enc_final = init.norm("enc.final", d);
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer::init(&mut init, &format!("dec.{l}"), d, hidden))
            .collect();
        let dec_final = init.norm("dec.final", d);

        let mut mem_rng = ChaCha8Rng::seed_from_u64(seed);
        mem_rng.set_stream(1);
        let mut init = Initializer {
            store: &mut params,
            rng: &mut mem_rng,
        };
        let encoder = match config.variant {
            Variant::Stateless => EncoderLayout::Plain(inputs),
            Variant::Membart | Variant::MembartShared => {
                let globals = memory_globals(&mut init, k, d);
                let final_norm = init.norm("mem.final", d);
                let gate = GateParams {
                    candidate: init.ffn("mem.candidate", d, hidden),
                    gate: init.linear("mem.gate", d, 1),
                };
                let layers = inputs
                    .into_iter()
                    .enumerate()
                    .map(|(l, input)| DualLayer {
                        input,
                        memory: if config.variant == Variant::MembartShared {
                            input
                        } else {
                            init.stream(&format!("mem.{l}"), d, hidden)
                        },
                    })
                    .collect();
                EncoderLayout::Dual {
                    layers,
                    globals,
                    final_norm,
                    gate,
                }
            }
            Variant::MemformerInsert | Variant::MemformerRezero => {
                let globals = memory_globals(&mut init, k, d);
                let writer = MemformerWriter {
                    q: init.linear("mem.writer.q", d, d),
                    k: init.linear("mem.writer.k", d, d),
                    v: init.linear("mem.writer.v", d, d),
                };
                let layers = inputs
                    .into_iter()
                    .enumerate()
                    .map(|(l, input)| {
                        let read = MemformerRead {
                            ln: init.norm(&format!("mem.{l}.ln_read"), d),
                            attn: init.attn(&format!("mem.{l}.read"), d),
                            alpha: (config.variant == Variant::MemformerRezero)
                                .then(|| init.constant(&format!("mem.{l}.alpha"), &[1], 0.0)),
                        };
                        (input, read)
                    })
                    .collect();
                EncoderLayout::Memformer {
                    layers,
                    globals,
                    writer,
                }
            }
        };
        Ok(Self {
            config,
            params,
            layout: Layout {
                token_embedding,
                enc_positions,
                dec_positions,
                encoder,
                enc_final,
                decoder,
                dec_final,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Memory slots carried per lane (zero for the stateless variant).
    pub fn slots(&self) -> usize {
        self.config.slots()
    }

    /// Placeholder memory; the first segment of every document resets it.
    pub fn initial_memory(&self, batch: usize) -> MemoryState<F> {
        MemoryState::zeros(batch, self.slots(), self.config.hidden_size)
    }

    /// `layer_norm(v_b)`, the memory every document starts from.
    pub fn reset_memory(&self, batch: usize) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad();
        let m = g.constant(self.initial_memory(batch).slots)?;
        let m = match &self.layout.encoder {
            EncoderLayout::Plain(_) => m,
            EncoderLayout::Dual { globals, .. } | EncoderLayout::Memformer { globals, .. } => {
                reset_and_normalize(&mut g, &self.params, globals, m, &ResetFlags::all(batch, true))?
            }
        };
        Ok(g.value(m).clone())
    }

    /// Ids of every parameter that belongs to the memory path.
    pub fn memory_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("mem."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Parameter id pairs `(input stream, memory stream)` per dual layer.
    pub fn stream_param_pairs(&self) -> Vec<(StreamParams, StreamParams)> {
        match &self.layout.encoder {
            EncoderLayout::Dual { layers, .. } => layers.iter().map(|l| (l.input, l.memory)).collect(),
            _ => Vec::new(),
        }
    }

    fn check_tokens(&self, batch: &TokenBatch, what: &str) -> Result<()> {
        if batch.len > self.config.max_positions {
            return Err(Error::Input(format!(
                "{what} length {} exceeds max_positions {}",
                batch.len, self.config.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "{what} token id {bad} out of range for vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<F>, tokens: &TokenBatch, positions: ParamId) -> Result<Var> {
        let (b, n) = (tokens.batch, tokens.len);
        let table = g.param(&self.params, self.layout.token_embedding);
        let x = g.embedding(table, &tokens.ids, &[b, n])?;
        let x = g.scale(x, (self.config.hidden_size as f64).sqrt())?;
        let pos = g.param(&self.params, positions);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let p = g.embedding(pos, &ids, &[b, n])?;
        let x = g.add(x, p)?;
        Ok(g.dropout(x)?)
    }

    /// Runs the encoder for one timestep. `memory` is the carried state
    /// `[B×k×d]` before reset and normalization.
    pub fn encode(&self, g: &mut Graph<F>, src: &TokenBatch, memory: Var, reset: &ResetFlags) -> Result<Encoded> {
        self.check_tokens(src, "source")?;
        let (b, n, d, k) = (src.batch, src.len, self.config.hidden_size, self.slots());
        if g.shape(memory) != [b, k, d] {
            return Err(Error::Input(format!(
                "memory shape {:?} does not match [{b}, {k}, {d}]",
                g.shape(memory)
            )));
        }
        if reset.len() != b {
            return Err(Error::Input(format!("{} reset flags for {b} lanes", reset.len())));
        }
        let heads = self.config.heads;
        let p = &self.params;
        let mut h = self.embed(g, src, self.layout.enc_positions)?;
        let stateful = k > 0;
        let (next_memory, gates) = match &self.layout.encoder {
            EncoderLayout::Plain(layers) => {
                let mask = AttnMask::key_padding(&src.valid, b, n, n);
                for layer in layers {
                    h = encoder_layer(g, p, layer, h, heads, Some(&mask))?;
                }
                (memory, None)
            }
            EncoderLayout::Dual { layers, .. } if !stateful => {
                let mask = AttnMask::key_padding(&src.valid, b, n, n);
                for layer in layers {
                    h = encoder_layer(g, p, &layer.input, h, heads, Some(&mask))?;
                }
                (memory, None)
            }
            EncoderLayout::Memformer { layers, .. } if !stateful => {
                let mask = AttnMask::key_padding(&src.valid, b, n, n);
                for (layer, _) in layers {
                    h = encoder_layer(g, p, layer, h, heads, Some(&mask))?;
                }
                (memory, None)
            }
            EncoderLayout::Dual {
                layers,
                globals,
                final_norm,
                gate,
            } => {
                let m_in = reset_and_normalize(g, p, globals, memory, reset)?;
                let mut m = m_in;
                for layer in layers {
                    (h, m) = dual_stream_layer(g, p, layer, h, m, heads, &src.valid, self.config.memory_attention)?;
                }
                let h_m = final_norm.forward(g, p, m)?;
                let (next, z) = gated_memory_update(g, p, gate, h_m, m_in)?;
                (next, Some(z))
            }
            EncoderLayout::Memformer {
                layers,
                globals,
                writer,
            } => {
                let m_in = reset_and_normalize(g, p, globals, memory, reset)?;
                let mask = AttnMask::key_padding(&src.valid, b, n, n);
                for (layer, read) in layers {
                    let hn = layer.ln_attn.forward(g, p, h)?;
                    let a = layer.attn.forward(g, p, hn, hn, heads, Some(&mask))?;
                    let a = g.dropout(a)?;
                    h = g.add(h, a)?;
                    h = memformer_read(g, p, read, h, m_in, heads)?;
                    h = layer.ffn_block(g, p, h)?;
                }
                let states = self.layout.enc_final.forward(g, p, h)?;
                let next = memformer_write(g, p, writer, m_in, states, heads, &src.valid)?;
                return Ok(Encoded {
                    states,
                    next_memory: next,
                    gates: None,
                });
            }
        };
        let states = self.layout.enc_final.forward(g, p, h)?;
        Ok(Encoded {
            states,
            next_memory,
            gates,
        })
    }

    /// Causal decoder over `tgt` attending to the encoder states; returns
    /// logits `[B×m×V]` through the tied token embedding.
    pub fn decode(&self, g: &mut Graph<F>, tgt: &TokenBatch, enc: Var, src_valid: &[bool]) -> Result<Var> {
        self.check_tokens(tgt, "target")?;
        let (b, m) = (tgt.batch, tgt.len);
        let n = g.shape(enc)[1];
        if g.shape(enc)[0] != b || src_valid.len() != b * n {
            return Err(Error::Input(format!(
                "encoder states {:?} do not match {b} target lanes and {} mask entries",
                g.shape(enc),
                src_valid.len()
            )));
        }
        let p = &self.params;
        let self_mask = AttnMask::causal(m);
        let cross_mask = AttnMask::key_padding(src_valid, b, m, n);
        let mut y = self.embed(g, tgt, self.layout.dec_positions)?;
        for layer in &self.layout.decoder {
            y = layer.forward(g, p, y, enc, self.config.heads, &self_mask, &cross_mask)?;
        }
        let y = self.layout.dec_final.forward(g, p, y)?;
        let table = g.param(p, self.layout.token_embedding);
        let logits = g.matmul_t(y, table)?;
        Ok(g.scale(logits, 1.0 / (self.config.hidden_size as f64).sqrt())?)
    }

    /// Encoder, decoder and weighted cross-entropy for one timestep; the loss
    /// is the masked token NLL sum divided by `norm`.
    pub fn forward_step(&self, g: &mut Graph<F>, batch: &StepBatch, memory: Var, norm: f64) -> Result<StepOutput> {
        let encoded = self.encode(g, &batch.src, memory, &batch.reset)?;
        let logits = self.decode(g, &batch.tgt_in, encoded.states, &batch.src.valid)?;
        let weights: Vec<F> = batch.target_mask.iter().map(|&w| F::from_f64(w)).collect();
        let loss = g.cross_entropy(logits, &batch.tgt_out.ids, &weights, F::from_f64(norm))?;
        Ok(StepOutput {
            loss,
            logits,
            encoded,
        })
    }

    /// Encoder, decoder on the given memory and reset flags; returns logits
    /// and the next memory.
    pub fn seq2seq_forward(
        &self,
        g: &mut Graph<F>,
        src: &TokenBatch,
        tgt: &TokenBatch,
        memory: Var,
        reset: &ResetFlags,
    ) -> Result<(Var, Var)> {
        let encoded = self.encode(g, src, memory, reset)?;
        let logits = self.decode(g, tgt, encoded.states, &src.valid)?;
        Ok((logits, encoded.next_memory))
    }

    /// Next memory only, without recording gradients.
    pub fn advance_memory(&self, src: &TokenBatch, memory: &Tensor<F>, reset: &ResetFlags) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad();
        let m = g.constant(memory.clone())?;
        let enc = self.encode(&mut g, src, m, reset)?;
        Ok(g.value(enc.next_memory).clone())
    }
}
