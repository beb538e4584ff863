use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::linear::GradSink;
use super::ops::{
    attention_apply, attention_backward, attention_scores, rmsnorm_cols, rmsnorm_cols_backward, rope_cols, silu,
    silu_grad,
};
use super::{Arch, LayerKind, LayerSpecs, Linear, LinearId, MatrixName, ModelConfig};
pub use super::linear::ParamRef;
use crate::error::{Error, Result};
use crate::linalg::{seeded_random, Dist, Scalar, TensorGrid};
use crate::lowrank::{AlphaSchedule, BlendLayer, LoraAdapter, LoraBase, LowRankFactors, INIT_STD};
use crate::quant::QuantizedMatrix;

/// Parameter gradients keyed by parameter name.
pub type Gradients<T = f32> = BTreeMap<String, TensorGrid<T>>;

/// Intermediate values of one decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapeVar {
    /// Layer input.
    Xe,
    /// Normalized layer input.
    XeNorm,
    K,
    Q,
    V,
    /// Scaled causal scores, all heads stacked.
    Qk,
    /// Softmax of the scores.
    S,
    /// Concatenated head outputs (input of the output projection).
    Heads,
    /// Output projection of the attention block.
    Xo,
    /// Normalized residual stream entering the FFN.
    XoNorm,
    Xu,
    Xg,
    /// FFN output.
    Xd,
}

impl TapeVar {
    pub const ALL: [TapeVar; 13] = [
        TapeVar::Xe,
        TapeVar::XeNorm,
        TapeVar::K,
        TapeVar::Q,
        TapeVar::V,
        TapeVar::Qk,
        TapeVar::S,
        TapeVar::Heads,
        TapeVar::Xo,
        TapeVar::XoNorm,
        TapeVar::Xu,
        TapeVar::Xg,
        TapeVar::Xd,
    ];

    /// Entries the layer backward pass reads. `Qk` and `Xd` are never
    /// read, so dropping them costs nothing.
    pub const NEEDED: [TapeVar; 11] = [
        TapeVar::Xe,
        TapeVar::XeNorm,
        TapeVar::K,
        TapeVar::Q,
        TapeVar::V,
        TapeVar::S,
        TapeVar::Heads,
        TapeVar::Xo,
        TapeVar::XoNorm,
        TapeVar::Xu,
        TapeVar::Xg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TapeVar::Xe => "x_e",
            TapeVar::XeNorm => "x_e_norm",
            TapeVar::K => "k",
            TapeVar::Q => "q",
            TapeVar::V => "v",
            TapeVar::Qk => "qk",
            TapeVar::S => "s",
            TapeVar::Heads => "heads",
            TapeVar::Xo => "x_o",
            TapeVar::XoNorm => "x_o_norm",
            TapeVar::Xu => "x_u",
            TapeVar::Xg => "x_g",
            TapeVar::Xd => "x_d",
        }
    }
}

/// Which per-layer intermediates the forward pass keeps for backward.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RecomputePolicy {
    /// Keep everything.
    #[default]
    StoreAll,
    /// Keep only each layer's input and recompute the layer during backward.
    PerLayer,
    /// Keep everything except `drop`.
    Selective { drop: BTreeSet<TapeVar> },
}

impl RecomputePolicy {
    /// Drops the attention scores and their softmax.
    pub fn selective_scores() -> Self {
        RecomputePolicy::Selective {
            drop: [TapeVar::Qk, TapeVar::S].into_iter().collect(),
        }
    }

    pub fn keeps(&self, var: TapeVar) -> bool {
        match self {
            RecomputePolicy::StoreAll => true,
            RecomputePolicy::PerLayer => var == TapeVar::Xe,
            RecomputePolicy::Selective { drop } => !drop.contains(&var),
        }
    }

    pub fn keep_set(&self) -> BTreeSet<TapeVar> {
        TapeVar::ALL.into_iter().filter(|&v| self.keeps(v)).collect()
    }
}

type LayerTape<T> = BTreeMap<TapeVar, TensorGrid<T>>;

fn tape_bytes<T: Scalar>(tape: &LayerTape<T>) -> usize {
    tape.values().map(TensorGrid::nbytes).sum()
}

/// Activation tape of one forward pass.
#[derive(Clone, Debug)]
pub struct DecoderState<T = f32> {
    policy: RecomputePolicy,
    tokens: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    final_hidden: TensorGrid<T>,
    final_normed: TensorGrid<T>,
    peak_bytes: usize,
}

impl<T: Scalar> DecoderState<T> {
    pub fn policy(&self) -> &RecomputePolicy {
        &self.policy
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, layer: usize, var: TapeVar) -> Option<&TensorGrid<T>> {
        self.layers.get(layer)?.get(&var)
    }

    pub fn stored_vars(&self, layer: usize) -> BTreeSet<TapeVar> {
        self.layers[layer].keys().copied().collect()
    }

    /// Discards a tape entry, as if it had never been stored.
    pub fn remove(&mut self, layer: usize, var: TapeVar) -> Option<TensorGrid<T>> {
        self.layers.get_mut(layer)?.remove(&var)
    }

    /// Bytes currently held by the tape.
    pub fn stored_bytes(&self) -> usize {
        self.layers.iter().map(tape_bytes).sum::<usize>() + self.final_hidden.nbytes() + self.final_normed.nbytes()
    }

    /// Largest tape footprint seen during the forward pass, counting the
    /// full working set of the layer being computed.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}

/// Bookkeeping from a backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Layers re-run in full from their stored input.
    pub layers_recomputed: usize,
    /// Layers where only the attention scores were re-derived.
    pub scores_recomputed: usize,
    /// Largest tape footprint during backward, including recomputed values.
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer<T> {
    attn_norm: TensorGrid<T>,
    ffn_norm: TensorGrid<T>,
    mats: Vec<Linear<T>>,
}

/// Decoder-only transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    specs: LayerSpecs,
    embed: Linear<T>,
    layers: Vec<DecoderLayer<T>>,
    final_norm: TensorGrid<T>,
    head: Linear<T>,
    frozen: BTreeSet<String>,
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the seed bytes and the name.
    seed.to_le_bytes()
        .into_iter()
        .chain(name.bytes())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

fn init_linear<T: Scalar>(kind: LayerKind, shape: (usize, usize), seed: u64) -> Result<Linear<T>> {
    let (fan_out, fan_in) = shape;
    let dense = || seeded_random::<T>(fan_out, fan_in, seed, Dist::Gaussian { std: INIT_STD });
    Ok(match kind {
        LayerKind::Dense => Linear::Dense(dense()),
        LayerKind::Lowrank { rank } => Linear::LowRank(LowRankFactors::random(fan_out, fan_in, rank, seed)?),
        LayerKind::Lora { rank } => Linear::Lora(LoraAdapter::new(LoraBase::Dense(dense()), rank, seed ^ 0x5A)?),
        LayerKind::Quantized { bits } => Linear::Quantized(QuantizedMatrix::quantize_rows(&dense(), bits)?),
        LayerKind::Blend { rank, schedule } => Linear::Blend(BlendLayer::new(
            dense(),
            LowRankFactors::random(fan_out, fan_in, rank, seed ^ 0xB1)?,
            schedule,
        )?),
    })
}

/// `vocab × l` grid with a single 1 per column.
fn one_hot<T: Scalar>(tokens: &[usize], vocab: usize) -> TensorGrid<T> {
    let mut g = TensorGrid::zeros(vocab, tokens.len());
    for (j, &t) in tokens.iter().enumerate() {
        g.set(t, j, T::one());
    }
    g
}

fn gated<T: Scalar>(xu: &TensorGrid<T>, xg: &TensorGrid<T>) -> TensorGrid<T> {
    TensorGrid::from_fn(xu.rows(), xu.cols(), |i, j| {
        T::from_f64(xu.get(i, j).to_f64() * silu(xg.get(i, j).to_f64()))
    })
}

fn need<'a, T>(tape: &'a LayerTape<T>, layer: usize, var: TapeVar) -> Result<&'a TensorGrid<T>> {
    tape.get(&var)
        .ok_or_else(|| Error::MissingTape(format!("layers.{layer}.{}", var.as_str())))
}

impl<T: Scalar> Model<T> {
    /// Fresh model: dense weights gaussian with std 0.02, norm gains 1,
    /// every tensor seeded from `seed` and its name.
    pub fn new(config: ModelConfig, specs: LayerSpecs, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.arch != Arch::Llama {
            return Err(Error::Unsupported(format!("{:?} layout is accounting-only", config.arch)));
        }
        specs.validate(&config)?;
        let n = config.dim;
        let mk = |id: LinearId| init_linear(specs.kind(id.matrix), config.matrix_shape(id.matrix), tensor_seed(seed, &id.to_string()));
        let embed = mk(LinearId { layer: None, matrix: MatrixName::Embed })?;
        let head = mk(LinearId { layer: None, matrix: MatrixName::Head })?;
        let layers = (0..config.layers)
            .map(|i| {
                Ok(DecoderLayer {
                    attn_norm: TensorGrid::from_fn(n, 1, |_, _| T::one()),
                    ffn_norm: TensorGrid::from_fn(n, 1, |_, _| T::one()),
                    mats: MatrixName::PER_LAYER
                        .iter()
                        .map(|&m| mk(LinearId { layer: Some(i), matrix: m }))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            final_norm: TensorGrid::from_fn(n, 1, |_, _| T::one()),
            config,
            specs,
            embed,
            layers,
            head,
            frozen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &LayerSpecs {
        &self.specs
    }

    pub(crate) fn set_specs(&mut self, specs: LayerSpecs) {
        self.specs = specs;
    }

    /// Every linear layer with its location, embedding first and head last.
    pub fn linears(&self) -> Vec<(LinearId, &Linear<T>)> {
        let mut out = vec![(LinearId { layer: None, matrix: MatrixName::Embed }, &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (m, lin) in MatrixName::PER_LAYER.iter().zip(&layer.mats) {
                out.push((LinearId { layer: Some(i), matrix: *m }, lin));
            }
        }
        out.push((LinearId { layer: None, matrix: MatrixName::Head }, &self.head));
        out
    }

    pub fn linear(&self, id: LinearId) -> &Linear<T> {
        match id.layer {
            Some(i) => &self.layers[i].mats[id.matrix.layer_index()],
            None if id.matrix == MatrixName::Embed => &self.embed,
            None => &self.head,
        }
    }

    /// Mutable access to a linear layer. Replacing it with a different
    /// shape or kind is the caller's responsibility to keep consistent
    /// with the specs.
    pub fn linear_mut(&mut self, id: LinearId) -> &mut Linear<T> {
        match id.layer {
            Some(i) => &mut self.layers[i].mats[id.matrix.layer_index()],
            None if id.matrix == MatrixName::Embed => &mut self.embed,
            None => &mut self.head,
        }
    }

    fn linear_ids(&self, targets: &[MatrixName]) -> Vec<LinearId> {
        self.linears()
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| targets.contains(&id.matrix))
            .collect()
    }

    /// All float tensors, in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.embed.params("embed", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(ParamRef {
                name: format!("layers.{i}.attn_norm"),
                tensor: &layer.attn_norm,
                trainable: true,
            });
            for (m, lin) in MatrixName::PER_LAYER.iter().zip(&layer.mats) {
                lin.params(&format!("layers.{i}.{m}"), &mut out);
            }
            out.push(ParamRef {
                name: format!("layers.{i}.ffn_norm"),
                tensor: &layer.ffn_norm,
                trainable: true,
            });
        }
        out.push(ParamRef {
            name: "final_norm".into(),
            tensor: &self.final_norm,
            trainable: true,
        });
        self.head.params("head", &mut out);
        out
    }

    /// Mutable access to a trainable-by-kind tensor by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut TensorGrid<T>> {
        if name == "final_norm" {
            return Some(&mut self.final_norm);
        }
        let (owner, suffix) = name.rsplit_once('.')?;
        match owner {
            "embed" => return self.embed.param_mut(suffix),
            "head" => return self.head.param_mut(suffix),
            _ => {}
        }
        let rest = owner.strip_prefix("layers.")?;
        let (idx, mat) = match rest.split_once('.') {
            Some((i, m)) => (i, Some(m)),
            None => (rest, None),
        };
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        match (mat, suffix) {
            (None, "attn_norm") => Some(&mut layer.attn_norm),
            (None, "ffn_norm") => Some(&mut layer.ffn_norm),
            (Some(m), s) => {
                let m: MatrixName = m.parse().ok()?;
                layer.mats.get_mut(m.layer_index())?.param_mut(s)
            }
            _ => None,
        }
    }

    /// Names of tensors that receive gradients and optimizer updates.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params()
            .into_iter()
            .filter(|p| p.trainable && !self.frozen.contains(&p.name))
            .map(|p| p.name)
            .collect()
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    /// Freezes every tensor that is not a LoRA `down`/`up` factor.
    pub fn freeze_all_but_adapters(&mut self) {
        let adapter: BTreeSet<String> = self
            .linears()
            .into_iter()
            .filter(|(_, l)| matches!(l, Linear::Lora(_)))
            .flat_map(|(id, _)| [format!("{id}.down"), format!("{id}.up")])
            .collect();
        let names: Vec<String> = self.params().into_iter().map(|p| p.name).collect();
        for name in names {
            if !adapter.contains(&name) {
                self.frozen.insert(name);
            }
        }
    }

    /// Stored weights: linear layers plus norm gains.
    pub fn param_count(&self) -> usize {
        let norms = (2 * self.layers.len() + 1) * self.config.dim;
        self.linears().iter().map(|(_, l)| l.param_count()).sum::<usize>() + norms
    }

    pub fn trainable_count(&self) -> usize {
        let names = self.trainable_names();
        self.params()
            .iter()
            .filter(|p| names.contains(&p.name))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Converts storage precision; quantized matrices are kept as they are.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        fn lin<T: Scalar, U: Scalar>(l: &Linear<T>) -> Linear<U> {
            let f = |f: &LowRankFactors<T>| LowRankFactors::new(f.down().cast(), f.up().cast()).expect("same shapes");
            match l {
                Linear::Dense(w) => Linear::Dense(w.cast()),
                Linear::LowRank(x) => Linear::LowRank(f(x)),
                Linear::Lora(a) => {
                    let base = match a.base() {
                        LoraBase::Dense(w) => LoraBase::Dense(w.cast()),
                        LoraBase::Quantized(q) => LoraBase::Quantized(q.clone()),
                    };
                    Linear::Lora(LoraAdapter::from_parts(base, f(a.delta()), a.is_merged()).expect("same shapes"))
                }
                Linear::Quantized(q) => Linear::Quantized(q.clone()),
                Linear::Blend(b) => {
                    let mut nb = BlendLayer::new(b.base().cast(), f(b.delta()), b.schedule()).expect("same shapes");
                    nb.set_alpha(b.alpha()).expect("alpha already in range");
                    Linear::Blend(nb)
                }
            }
        }
        Model {
            config: self.config.clone(),
            specs: self.specs.clone(),
            embed: lin(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| DecoderLayer {
                    attn_norm: l.attn_norm.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    mats: l.mats.iter().map(lin).collect(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: lin(&self.head),
            frozen: self.frozen.clone(),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Runs decoder layer `i` on `xe`, returning every intermediate and
    /// the layer output.
    fn layer_forward(&self, i: usize, xe: TensorGrid<T>) -> Result<(LayerTape<T>, TensorGrid<T>)> {
        let layer = &self.layers[i];
        let (h, base) = (self.config.heads, self.config.rope_base);
        let mat = |m: MatrixName| &layer.mats[m.layer_index()];
        let xn = rmsnorm_cols(&xe, &layer.attn_norm);
        let mut q = mat(MatrixName::Q).forward(&xn)?;
        let mut k = mat(MatrixName::K).forward(&xn)?;
        let v = mat(MatrixName::V).forward(&xn)?;
        rope_cols(&mut q, h, 0, base, false);
        rope_cols(&mut k, h, 0, base, false);
        let (qk, s) = attention_scores(&q, &k, h);
        let heads = attention_apply(&s, &v, h);
        let xo = mat(MatrixName::O).forward(&heads)?;
        let resid = xe.add(&xo)?;
        let xon = rmsnorm_cols(&resid, &layer.ffn_norm);
        let xu = mat(MatrixName::Up).forward(&xon)?;
        let xg = mat(MatrixName::Gate).forward(&xon)?;
        let xd = mat(MatrixName::Down).forward(&gated(&xu, &xg))?;
        let out = resid.add(&xd)?;
        let tape = BTreeMap::from([
            (TapeVar::Xe, xe),
            (TapeVar::XeNorm, xn),
            (TapeVar::K, k),
            (TapeVar::Q, q),
            (TapeVar::V, v),
            (TapeVar::Qk, qk),
            (TapeVar::S, s),
            (TapeVar::Heads, heads),
            (TapeVar::Xo, xo),
            (TapeVar::XoNorm, xon),
            (TapeVar::Xu, xu),
            (TapeVar::Xg, xg),
            (TapeVar::Xd, xd),
        ]);
        Ok((tape, out))
    }

    /// Logits (`vocab × l`) and the activation tape kept under `policy`.
    pub fn forward(&self, tokens: &[usize], policy: &RecomputePolicy) -> Result<(TensorGrid<T>, DecoderState<T>)> {
        self.check_tokens(tokens)?;
        let mut x = self.embed.forward(&one_hot(tokens, self.config.vocab))?;
        let mut tapes = Vec::with_capacity(self.layers.len());
        let (mut kept, mut peak) = (0usize, 0usize);
        for i in 0..self.layers.len() {
            let (full, out) = self.layer_forward(i, x)?;
            peak = peak.max(kept + tape_bytes(&full) + out.nbytes());
            let tape: LayerTape<T> = full.into_iter().filter(|(v, _)| policy.keeps(*v)).collect();
            kept += tape_bytes(&tape);
            tapes.push(tape);
            x = out;
        }
        let normed = rmsnorm_cols(&x, &self.final_norm);
        let logits = self.head.forward(&normed)?;
        peak = peak.max(kept + x.nbytes() + normed.nbytes());
        Ok((
            logits,
            DecoderState {
                policy: policy.clone(),
                tokens: tokens.to_vec(),
                layers: tapes,
                final_hidden: x,
                final_normed: normed,
                peak_bytes: peak,
            },
        ))
    }

    /// Logits only, keeping no per-layer tape beyond layer inputs.
    pub fn logits(&self, tokens: &[usize]) -> Result<TensorGrid<T>> {
        Ok(self.forward(tokens, &RecomputePolicy::PerLayer)?.0)
    }

    /// Re-runs layer `i` from its stored input.
    pub fn recompute_layer(&self, state: &DecoderState<T>, i: usize) -> Result<BTreeMap<TapeVar, TensorGrid<T>>> {
        let xe = need(&state.layers[i], i, TapeVar::Xe)?.clone();
        Ok(self.layer_forward(i, xe)?.0)
    }

    /// Gradients of every trainable tensor given `d loss / d logits`.
    pub fn backward(&self, state: &DecoderState<T>, dlogits: &TensorGrid<T>) -> Result<Gradients<T>> {
        Ok(self.backward_with_stats(state, dlogits)?.0)
    }

    pub fn backward_with_stats(
        &self,
        state: &DecoderState<T>,
        dlogits: &TensorGrid<T>,
    ) -> Result<(Gradients<T>, BackwardStats)> {
        if dlogits.shape() != (self.config.vocab, state.tokens.len()) || state.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "model_backward",
                format!("logit gradient {:?} for {} tokens", dlogits.shape(), state.tokens.len()),
            ));
        }
        let wanted = self.trainable_names();
        let mut grads = Gradients::new();
        let mut sink = GradSink {
            grads: &mut grads,
            wanted: &wanted,
        };
        let mut stats = BackwardStats::default();
        let boundary = state.final_hidden.nbytes() + state.final_normed.nbytes();
        let mut held: usize = state.layers.iter().map(tape_bytes).sum::<usize>() + boundary;
        stats.peak_bytes = held;

        let dnormed = self
            .head
            .backward("head", &state.final_normed, dlogits, true, &mut sink)?
            .expect("requested");
        let (mut dx, dgain) = rmsnorm_cols_backward(&state.final_hidden, &self.final_norm, &dnormed);
        if sink.wants("final_norm") {
            sink.add("final_norm".into(), dgain)?;
        }
        held -= boundary;

        for i in (0..self.layers.len()).rev() {
            let stored = &state.layers[i];
            let missing: Vec<TapeVar> = TapeVar::NEEDED.into_iter().filter(|v| !stored.contains_key(v)).collect();
            let mut extra = LayerTape::new();
            if !missing.is_empty() {
                if state.policy == RecomputePolicy::StoreAll {
                    return Err(Error::MissingTape(format!("layers.{i}.{}", missing[0].as_str())));
                }
                if missing == [TapeVar::S] && stored.contains_key(&TapeVar::Q) && stored.contains_key(&TapeVar::K) {
                    let (qk, s) = attention_scores(&stored[&TapeVar::Q], &stored[&TapeVar::K], self.config.heads);
                    extra.insert(TapeVar::Qk, qk);
                    extra.insert(TapeVar::S, s);
                    stats.scores_recomputed += 1;
                } else {
                    let xe = need(stored, i, TapeVar::Xe)?.clone();
                    let (full, _) = self.layer_forward(i, xe)?;
                    extra = full.into_iter().filter(|(v, _)| !stored.contains_key(v)).collect();
                    stats.layers_recomputed += 1;
                }
            }
            stats.peak_bytes = stats.peak_bytes.max(held + tape_bytes(&extra));
            let get = |v: TapeVar| extra.get(&v).or_else(|| stored.get(&v)).ok_or_else(|| Error::MissingTape(format!("layers.{i}.{}", v.as_str())));
            dx = self.layer_backward(i, &get, dx, &mut sink)?;
            held -= tape_bytes(stored);
        }

        let onehot = one_hot(&state.tokens, self.config.vocab);
        self.embed.backward("embed", &onehot, &dx, false, &mut sink)?;
        Ok((grads, stats))
    }

    fn layer_backward<'a>(
        &self,
        i: usize,
        get: &dyn Fn(TapeVar) -> Result<&'a TensorGrid<T>>,
        dout: TensorGrid<T>,
        sink: &mut GradSink<'_, T>,
    ) -> Result<TensorGrid<T>> {
        let layer = &self.layers[i];
        let h = self.config.heads;
        let mat = |m: MatrixName| &layer.mats[m.layer_index()];
        let prefix = |m: MatrixName| format!("layers.{i}.{m}");
        let (xe, xn, q, k, v, s) = (
            get(TapeVar::Xe)?,
            get(TapeVar::XeNorm)?,
            get(TapeVar::Q)?,
            get(TapeVar::K)?,
            get(TapeVar::V)?,
            get(TapeVar::S)?,
        );
        let (heads, xo, xon, xu, xg) = (
            get(TapeVar::Heads)?,
            get(TapeVar::Xo)?,
            get(TapeVar::XoNorm)?,
            get(TapeVar::Xu)?,
            get(TapeVar::Xg)?,
        );

        // FFN block.
        let d_gated = mat(MatrixName::Down)
            .backward(&prefix(MatrixName::Down), &gated(xu, xg), &dout, true, sink)?
            .expect("requested");
        let dxu = TensorGrid::from_fn(xu.rows(), xu.cols(), |r, c| {
            T::from_f64(d_gated.get(r, c).to_f64() * silu(xg.get(r, c).to_f64()))
        });
        let dxg = TensorGrid::from_fn(xg.rows(), xg.cols(), |r, c| {
            T::from_f64(d_gated.get(r, c).to_f64() * xu.get(r, c).to_f64() * silu_grad(xg.get(r, c).to_f64()))
        });
        let mut dxon = mat(MatrixName::Up)
            .backward(&prefix(MatrixName::Up), xon, &dxu, true, sink)?
            .expect("requested");
        dxon.add_assign(
            &mat(MatrixName::Gate)
                .backward(&prefix(MatrixName::Gate), xon, &dxg, true, sink)?
                .expect("requested"),
        )?;
        let resid = xe.add(xo)?;
        let (dres, dgain) = rmsnorm_cols_backward(&resid, &layer.ffn_norm, &dxon);
        let gain_name = format!("layers.{i}.ffn_norm");
        if sink.wants(&gain_name) {
            sink.add(gain_name, dgain)?;
        }
        let mut dresid = dout;
        dresid.add_assign(&dres)?;

        // Attention block.
        let dheads = mat(MatrixName::O)
            .backward(&prefix(MatrixName::O), heads, &dresid, true, sink)?
            .expect("requested");
        let (mut dq, mut dk, dv) = attention_backward(q, k, v, s, &dheads, h);
        rope_cols(&mut dq, h, 0, self.config.rope_base, true);
        rope_cols(&mut dk, h, 0, self.config.rope_base, true);
        let mut dxn = TensorGrid::zeros(xn.rows(), xn.cols());
        for (m, d) in [(MatrixName::Q, &dq), (MatrixName::K, &dk), (MatrixName::V, &dv)] {
            dxn.add_assign(&mat(m).backward(&prefix(m), xn, d, true, sink)?.expect("requested"))?;
        }
        let (dxe, dgain) = rmsnorm_cols_backward(xe, &layer.attn_norm, &dxn);
        let gain_name = format!("layers.{i}.attn_norm");
        if sink.wants(&gain_name) {
            sink.add(gain_name, dgain)?;
        }
        dresid.add_assign(&dxe)?;
        Ok(dresid)
    }

    /// Wraps the dense (or quantized) matrices named in `targets` with
    /// fresh LoRA adapters of rank `r`.
    pub fn attach_lora(&mut self, r: usize, targets: &[MatrixName], seed: u64) -> Result<()> {
        let mut specs = self.specs.clone();
        for &m in targets {
            specs.set(m, LayerKind::Lora { rank: r });
        }
        specs.validate(&self.config)?;
        for id in self.linear_ids(targets) {
            let lin = self.linear_mut(id);
            let base = match lin {
                Linear::Dense(w) => LoraBase::Dense(w.clone()),
                Linear::Quantized(q) => LoraBase::Quantized(q.clone()),
                other => {
                    return Err(Error::Matrix {
                        name: id.to_string(),
                        source: Box::new(Error::Unsupported(format!("LoRA over a {} layer", other.kind_name()))),
                    })
                }
            };
            *lin = Linear::Lora(LoraAdapter::new(base, r, tensor_seed(seed, &format!("{id}.lora")))?);
        }
        self.specs = specs;
        Ok(())
    }

    /// Quantizes dense matrices and dense LoRA bases named in `targets`.
    /// Specs record the quantized kind for plain matrices; adapters keep
    /// their LoRA kind.
    pub fn quantize(&mut self, bits: u8, targets: &[MatrixName]) -> Result<()> {
        for id in self.linear_ids(targets) {
            let lin = self.linear_mut(id);
            match lin {
                Linear::Dense(w) => {
                    *lin = Linear::Quantized(QuantizedMatrix::quantize_rows(w, bits)?);
                    self.specs.set(id.matrix, LayerKind::Quantized { bits });
                }
                Linear::Lora(a) => {
                    if let LoraBase::Dense(w) = a.base() {
                        let q = QuantizedMatrix::quantize_rows(w, bits)?;
                        *a = LoraAdapter::from_parts(LoraBase::Quantized(q), a.delta().clone(), a.is_merged())?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Merges every LoRA adapter into a dense matrix. Quantized bases are
    /// dequantized first when `dequantize` is set and rejected otherwise.
    pub fn merge_lora(&mut self, dequantize: bool) -> Result<usize> {
        let ids: Vec<LinearId> = self
            .linears()
            .into_iter()
            .filter(|(_, l)| matches!(l, Linear::Lora(_)))
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            let lin = self.linear_mut(id);
            let Linear::Lora(a) = lin else { unreachable!() };
            if dequantize {
                a.dequantize_base();
            }
            let merged = a.lora_merge().map_err(|e| Error::Matrix {
                name: id.to_string(),
                source: Box::new(e),
            })?;
            *lin = Linear::Dense(merged);
            self.specs.set(id.matrix, LayerKind::Dense);
        }
        for id in &ids {
            for part in ["down", "up", "base"] {
                self.frozen.remove(&format!("{id}.{part}"));
            }
        }
        Ok(ids.len())
    }

    /// Turns dense matrices named in `targets` into blend layers whose
    /// frozen base is the current weight.
    pub fn attach_blend(&mut self, r: usize, schedule: AlphaSchedule, targets: &[MatrixName], seed: u64) -> Result<()> {
        let mut specs = self.specs.clone();
        for &m in targets {
            specs.set(m, LayerKind::Blend { rank: r, schedule });
        }
        specs.validate(&self.config)?;
        for id in self.linear_ids(targets) {
            let lin = self.linear_mut(id);
            let Linear::Dense(w) = lin else {
                return Err(Error::Matrix {
                    name: id.to_string(),
                    source: Box::new(Error::Unsupported(format!("blend over a {} layer", lin.kind_name()))),
                });
            };
            let (o, i) = w.shape();
            let delta = LowRankFactors::random(o, i, r, tensor_seed(seed, &format!("{id}.blend")))?;
            *lin = Linear::Blend(BlendLayer::new(w.clone(), delta, schedule)?);
        }
        self.specs = specs;
        Ok(())
    }

    /// Advances every blend layer's α to its value at `step`.
    pub fn set_step(&mut self, step: u64) {
        for layer in &mut self.layers {
            for lin in &mut layer.mats {
                if let Linear::Blend(b) = lin {
                    b.set_step(step);
                }
            }
        }
        for lin in [&mut self.embed, &mut self.head] {
            if let Linear::Blend(b) = lin {
                b.set_step(step);
            }
        }
    }

    /// α of the first blend layer, if any.
    pub fn blend_alpha(&self) -> Option<f64> {
        self.linears().into_iter().find_map(|(_, l)| match l {
            Linear::Blend(b) => Some(b.alpha()),
            _ => None,
        })
    }

    /// Drops the frozen bases of blend layers whose α reached 0, leaving
    /// plain low-rank layers.
    pub fn finalize_blend(&mut self) -> Result<()> {
        for id in self.linears().into_iter().map(|(id, _)| id).collect::<Vec<_>>() {
            let lin = self.linear_mut(id);
            if let Linear::Blend(b) = lin {
                if b.alpha() > 0.0 {
                    return Err(Error::InvalidArgument(format!("{id}: blend weight is still {}", b.alpha())));
                }
                let rank = b.delta().rank();
                *lin = Linear::LowRank(b.delta().clone());
                self.specs.set(id.matrix, LayerKind::Lowrank { rank });
            }
        }
        Ok(())
    }

    /// Kinds present among the linear layers.
    pub fn has_kind(&self, pred: impl Fn(&Linear<T>) -> bool) -> bool {
        self.linears().into_iter().any(|(_, l)| pred(l))
    }

    /// Zeroes every attention and FFN weight, leaving norms, embedding
    /// and head untouched. Quantized matrices become all-zero codes.
    pub fn zero_blocks(&mut self) {
        for layer in &mut self.layers {
            for lin in &mut layer.mats {
                let (o, i) = lin.shape();
                *lin = Linear::Dense(TensorGrid::zeros(o, i));
            }
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Norm gain tensors: `(attn_norm, ffn_norm)` of a layer.
    pub fn layer_norms(&self, i: usize) -> (&TensorGrid<T>, &TensorGrid<T>) {
        (&self.layers[i].attn_norm, &self.layers[i].ffn_norm)
    }

    pub fn final_norm(&self) -> &TensorGrid<T> {
        &self.final_norm
    }

    pub(crate) fn decode_layer(&self, i: usize) -> (&TensorGrid<T>, &TensorGrid<T>, &[Linear<T>]) {
        let l = &self.layers[i];
        (&l.attn_norm, &l.ffn_norm, &l.mats)
    }

    pub(crate) fn embed_tokens(&self, tokens: &[usize]) -> Result<TensorGrid<T>> {
        self.check_vocab(tokens)?;
        self.embed.forward(&one_hot(tokens, self.config.vocab))
    }

    pub(crate) fn head_linear(&self) -> &Linear<T> {
        &self.head
    }

    fn check_vocab(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&t) => Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }
}

