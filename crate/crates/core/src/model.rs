//! Word-level tokenizer and a tiny pre-LN causal transformer whose weights are
//! frozen at construction. Trainable capacity comes only from adapters that
//! are added at the injection points of each linear projection.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{BoundAdapter, InjectionPoint, LoraAdapter, Projection, FF_MULT};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{Matrix, Tape, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Reserved tokens, in id order. The `<…>` markers delimit instruction parts.
pub const RESERVED: [&str; 8] = [
    "<pad>",
    "<unk>",
    "<bos>",
    "<eos>",
    "<instruction>",
    "<input>",
    "<aspect>",
    "<response>",
];

const PUNCT: &[char] = &[':', ';', ',', '.', '!', '?', '"', '(', ')'];
const ATTACH_LEFT: &[&str] = &[":", ";", ",", ".", "!", "?", ")"];

/// Splits text into word and punctuation pieces. `<name>` markers stay whole.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        if c.is_whitespace() {
            i += c.len_utf8();
        } else if c == '<' {
            let end = text[i..].find(|ch: char| ch == '>' || ch.is_whitespace());
            match end {
                Some(e) if bytes[i + e] == b'>' => {
                    out.push(&text[i..i + e + 1]);
                    i += e + 1;
                }
                _ => {
                    let e = word_end(text, i + 1);
                    out.push(&text[i..e]);
                    i = e;
                }
            }
        } else if PUNCT.contains(&c) {
            out.push(&text[i..i + c.len_utf8()]);
            i += c.len_utf8();
        } else {
            let e = word_end(text, i);
            out.push(&text[i..e]);
            i = e;
        }
    }
    out
}

fn word_end(text: &str, start: usize) -> usize {
    text[start..]
        .find(|ch: char| ch.is_whitespace() || PUNCT.contains(&ch) || ch == '<')
        .map_or(text.len(), |e| start + e)
}

/// Closed word-level vocabulary built from a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Most frequent words first (ties alphabetical), after the reserved
    /// tokens, capped at `max_size` entries in total.
    pub fn build<'t>(corpus: impl IntoIterator<Item = &'t str>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().take(room).map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("distinct tokens")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate vocabulary entry `{t}` on line {}", i + 1)));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::format(format!("vocabulary line {} must be `{r}`", i + 1)));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word-level ids; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, attaching closing punctuation to the
    /// previous word. PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id).unwrap_or(RESERVED[UNK]);
            if !out.is_empty() && !ATTACH_LEFT.contains(&tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        io::write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::from_tokens(tokens)
    }
}

/// Architecture hyperparameters of the frozen base.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 128,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

impl Block {
    fn weight_mut(&mut self, proj: Projection) -> &mut Matrix {
        match proj {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
            Projection::FfUp => &mut self.w_up,
            Projection::FfDown => &mut self.w_down,
        }
    }

    fn weight(&self, proj: Projection) -> &Matrix {
        match proj {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::FfUp => &self.w_up,
            Projection::FfDown => &self.w_down,
        }
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `T × V` next-token logits.
    pub logits: Matrix,
    /// `T × d_model` residual stream after the final block.
    pub hidden: Matrix,
}

/// Frozen transformer weights. Embeddings are tied with the output layer.
#[derive(Clone, Debug)]
pub struct BaseModel {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
}

impl BaseModel {
    /// Deterministically initializes every weight from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d = config.d_model;
        if d == 0 || config.n_heads == 0 || !d.is_multiple_of(config.n_heads) {
            return Err(Error::usage(format!(
                "d_model {d} must be a positive multiple of n_heads {}",
                config.n_heads
            )));
        }
        if config.vocab_size <= RESERVED.len() || config.max_len == 0 || config.n_layers == 0 {
            return Err(Error::usage("model needs a vocabulary, layers and a positive max_len"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Matrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
        };
        let tok_emb = gauss(config.vocab_size, d, 1.0);
        let pos_emb = gauss(config.max_len, d, 0.5);
        let s_in = 1.0 / (d as f64).sqrt();
        let s_ff = 1.0 / ((FF_MULT * d) as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: gauss(d, d, s_in),
                wk: gauss(d, d, s_in),
                wv: gauss(d, d, s_in),
                wo: gauss(d, d, s_in),
                w_up: gauss(FF_MULT * d, d, s_in),
                w_down: gauss(d, FF_MULT * d, s_ff),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A new frozen model with `W + BA` at every point of `adapter`.
    pub fn merged(&self, adapter: &LoraAdapter) -> Result<BaseModel> {
        self.check_adapter(adapter)?;
        let mut out = self.clone();
        for (point, pair) in adapter.pairs() {
            let w = out.blocks[point.layer].weight_mut(point.proj);
            *w = w.add(&pair.b.matmul(&pair.a)?)?;
        }
        Ok(out)
    }

    /// Base weight of a projection, `d_out × d_in`.
    pub fn weight(&self, point: InjectionPoint) -> Option<&Matrix> {
        self.blocks.get(point.layer).map(|b| b.weight(point.proj))
    }

    /// `vocab × d_model` token embeddings, shared with the output layer.
    pub fn token_embedding(&self) -> &Matrix {
        &self.tok_emb
    }

    pub fn position_embedding(&self) -> &Matrix {
        &self.pos_emb
    }

    /// All frozen matrices, for bitwise comparisons.
    pub fn weights(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down]);
        }
        v
    }

    pub fn injection_points(&self, projs: &[Projection]) -> Vec<InjectionPoint> {
        InjectionPoint::grid(self.config.n_layers, projs)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::degenerate("empty token sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::usage(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        if adapter.width() != self.config.d_model {
            return Err(Error::usage(format!(
                "adapter width {} does not match d_model {}",
                adapter.width(),
                self.config.d_model
            )));
        }
        if let Some(p) = adapter.points().find(|p| p.layer >= self.config.n_layers) {
            return Err(Error::usage(format!("adapter point {p} beyond the model's layers")));
        }
        Ok(())
    }

    /// Binds adapters as constants and records a forward pass.
    pub fn forward(&self, adapters: &[&LoraAdapter], tokens: &[usize]) -> Result<ForwardTrace> {
        for a in adapters {
            self.check_adapter(a)?;
        }
        let mut tape = Tape::new();
        let bound: Vec<BoundAdapter> = adapters.iter().map(|a| a.bind(&mut tape, None)).collect();
        let refs: Vec<&BoundAdapter> = bound.iter().collect();
        let (logits, hidden) = self.forward_on_tape(&mut tape, &refs, tokens)?;
        Ok(ForwardTrace {
            logits: tape.value(logits).clone(),
            hidden: tape.value(hidden).clone(),
        })
    }

    fn linear<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        adapters: &[&BoundAdapter],
        point: InjectionPoint,
        x: Var,
    ) -> Result<Var> {
        let w = tape.constant(self.blocks[point.layer].weight(point.proj));
        let mut y = tape.matmul_nt(x, w)?;
        for ad in adapters {
            if let Some(delta) = ad.delta(tape, point, x)? {
                y = tape.add(y, delta)?;
            }
        }
        Ok(y)
    }

    /// Records the forward pass on `tape`; returns `(logits, hidden)`.
    ///
    /// Every injected linear layer computes `x Wᵀ + Σ_adapters x Aᵀ Bᵀ`.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        adapters: &[&BoundAdapter],
        tokens: &[usize],
    ) -> Result<(Var, Var)> {
        let hidden = self.forward_batch_on_tape(tape, adapters, &[tokens])?;
        let logits = self.logits_on_tape(tape, hidden, None)?;
        Ok((logits, hidden))
    }

    /// Forward pass over independent sequences stacked row-wise. Returns the
    /// `Σ len × d_model` final residual stream; sequences never attend to
    /// each other.
    pub fn forward_batch_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        adapters: &[&BoundAdapter],
        seqs: &[&[usize]],
    ) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::degenerate("empty batch"));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_tokens(s)?;
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            segments.push(s.len());
        }

        let emb = tape.constant(&self.tok_emb);
        let pos = tape.constant(&self.pos_emb);
        let tok = tape.gather_rows(emb, &ids)?;
        let p = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(tok, p)?;

        for layer in 0..self.config.n_layers {
            let pt = |proj| InjectionPoint { layer, proj };
            let h = tape.layer_norm(x);
            let q = self.linear(tape, adapters, pt(Projection::Q), h)?;
            let k = self.linear(tape, adapters, pt(Projection::K), h)?;
            let v = self.linear(tape, adapters, pt(Projection::V), h)?;
            let att = tape.attention(q, k, v, &segments, self.config.n_heads)?;
            let att = self.linear(tape, adapters, pt(Projection::O), att)?;
            x = tape.add(x, att)?;

            let h = tape.layer_norm(x);
            let up = self.linear(tape, adapters, pt(Projection::FfUp), h)?;
            let act = tape.gelu(up);
            let down = self.linear(tape, adapters, pt(Projection::FfDown), act)?;
            x = tape.add(x, down)?;
        }
        Ok(x)
    }

    /// Next-token logits `LN(hidden) · Eᵀ / sqrt(d_model)`, optionally for
    /// selected rows only.
    pub fn logits_on_tape<'a>(&'a self, tape: &mut Tape<'a>, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.gather_rows(hidden, r)?,
            None => hidden,
        };
        let normed = tape.layer_norm(h);
        let emb = tape.constant(&self.tok_emb);
        let logits = tape.matmul_nt(normed, emb)?;
        Ok(tape.scale(logits, 1.0 / (self.config.d_model as f64).sqrt()))
    }

    /// Greedy decoding of up to `max_new` tokens after `prompt`. Returns the
    /// decoded completion only.
    pub fn generate(
        &self,
        tokenizer: &Tokenizer,
        adapters: &[&LoraAdapter],
        prompt: &[usize],
        max_new: usize,
    ) -> Result<String> {
        let ids = self.generate_ids(adapters, prompt, max_new)?;
        Ok(tokenizer.decode(&ids))
    }

    pub fn generate_ids(&self, adapters: &[&LoraAdapter], prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(Error::usage("max_new must be at least 1"));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_len {
                break;
            }
            let trace = self.forward(adapters, &seq)?;
            let last = trace.logits.row(trace.logits.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Mean of the final block's hidden states over non-PAD positions,
    /// computed without any adapter.
    pub fn hidden_repr(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let n = tokens.iter().filter(|&&t| t != PAD).count();
        if n == 0 {
            return Err(Error::degenerate("hidden representation of an empty sequence"));
        }
        let trace = self.forward(&[], tokens)?;
        let mut mean = vec![0.0; self.config.d_model];
        for (t, &tok) in tokens.iter().enumerate() {
            if tok == PAD {
                continue;
            }
            for (m, v) in mean.iter_mut().zip(trace.hidden.row(t)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(mean)
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A teacher-forced training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    /// `true` where the target is part of the response (loss is taken there).
    pub mask: Vec<bool>,
}

impl Example {
    /// `<bos> prompt target <eos>`, shifted by one, with the loss restricted to
    /// the target and the closing `<eos>`.
    pub fn new(prompt: &[usize], target: &[usize]) -> Self {
        let mut full = Vec::with_capacity(prompt.len() + target.len() + 2);
        full.push(BOS);
        full.extend_from_slice(prompt);
        full.extend_from_slice(target);
        full.push(EOS);
        let input = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let first_target = prompt.len();
        let mask = (0..targets.len()).map(|i| i >= first_target).collect();
        Self { input, targets, mask }
    }
}

/// `<bos>` followed by the prompt, ready for generation.
pub fn generation_prefix(prompt: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(prompt.len() + 1);
    v.push(BOS);
    v.extend_from_slice(prompt);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterRole};

    fn tiny() -> (Tokenizer, BaseModel) {
        let tok = Tokenizer::build(["the food is good", "the cpu is hot ; pizza : positive"], 100);
        let cfg = ModelConfig {
            vocab_size: tok.len(),
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_len: 32,
            seed: 3,
        };
        (tok, BaseModel::new(cfg).unwrap())
    }

    #[test]
    fn splitting() {
        assert_eq!(
            split_words("The format is \"terms1: polarity1; terms2\" <input> x<y"),
            vec!["The", "format", "is", "\"", "terms1", ":", "polarity1", ";", "terms2", "\"", "<input>", "x", "<y"]
        );
        assert!(split_words("").is_empty());
    }

    #[test]
    fn tokenize_examples() {
        let (tok, _) = tiny();
        assert!(tok.encode("").is_empty());
        let g = tok.encode("good good");
        assert_eq!(g.len(), 2);
        assert_eq!(g[0], g[1]);
        assert_ne!(g[0], UNK);
        assert_eq!(tok.encode("zzzunknownzzz"), vec![UNK]);
    }

    #[test]
    fn reserved_ids_are_distinct_and_fixed() {
        let (tok, _) = tiny();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(tok.id(r), Some(i));
        }
    }

    #[test]
    fn decode_attaches_punctuation() {
        let (tok, _) = tiny();
        let ids = tok.encode("pizza: positive; cpu: positive");
        assert_eq!(tok.decode(&ids), "pizza: positive; cpu: positive");
    }

    #[test]
    fn vocab_file_round_trip() {
        let (tok, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), tok);
    }

    #[test]
    fn vocab_cap_is_respected() {
        let tok = Tokenizer::build(["a b c d e f g h i j"], 12);
        assert_eq!(tok.len(), 12);
    }

    #[test]
    fn forward_errors() {
        let (tok, m) = tiny();
        assert!(matches!(m.forward(&[], &[tok.len()]), Err(Error::Usage(_))));
        assert!(matches!(m.forward(&[], &vec![4; 33]), Err(Error::Length { .. })));
        assert!(matches!(m.forward(&[], &[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fresh_adapter_is_invisible() {
        let (tok, m) = tiny();
        let pts = m.injection_points(&[Projection::Q, Projection::V]);
        let ad = init_adapter(4, 16, &pts, 1, AdapterRole::Invariant).unwrap();
        let ids = tok.encode("the food is good");
        let base = m.forward(&[], &ids).unwrap();
        let with = m.forward(&[&ad], &ids).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn merged_base_matches_active_adapter() {
        let (tok, m) = tiny();
        let pts = m.injection_points(&Projection::ALL);
        let mut ad = init_adapter(3, 16, &pts, 2, AdapterRole::Pretraining).unwrap();
        for (k, p) in pts.iter().enumerate() {
            let pair = ad.pair_mut(*p).unwrap();
            pair.b = Matrix::from_fn(pair.b.rows(), pair.b.cols(), |i, j| ((i * 7 + j * 3 + k) % 5) as f64 * 0.01);
        }
        let ids = tok.encode("the cpu is hot");
        let with = m.forward(&[&ad], &ids).unwrap();
        let merged = m.merged(&ad).unwrap().forward(&[], &ids).unwrap();
        for (a, b) in with.logits.data().iter().zip(merged.logits.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_ne!(with, m.forward(&[], &ids).unwrap());
    }

    #[test]
    fn causality() {
        let (tok, m) = tiny();
        let a = tok.encode("the food is good");
        let mut b = a.clone();
        b[3] = tok.id("hot").unwrap();
        let ta = m.forward(&[], &a).unwrap();
        let tb = m.forward(&[], &b).unwrap();
        for t in 0..3 {
            assert_eq!(ta.logits.row(t), tb.logits.row(t));
        }
        assert_ne!(ta.logits.row(3), tb.logits.row(3));
    }

    #[test]
    fn hidden_repr_single_token_and_pad() {
        let (tok, m) = tiny();
        let ids = tok.encode("food");
        let h = m.hidden_repr(&ids).unwrap();
        let trace = m.forward(&[], &ids).unwrap();
        assert_eq!(h, trace.hidden.row(0));

        let two = tok.encode("food is");
        let trace = m.forward(&[], &two).unwrap();
        let manual: Vec<f64> = (0..16).map(|j| (trace.hidden.get(0, j) + trace.hidden.get(1, j)) / 2.0).collect();
        let h2 = m.hidden_repr(&two).unwrap();
        for (a, b) in h2.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut padded = two.clone();
        padded.extend([PAD, PAD]);
        assert_eq!(m.hidden_repr(&padded).unwrap(), h2);
        assert!(matches!(m.hidden_repr(&[PAD]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (tok, m) = tiny();
        let prompt = generation_prefix(&tok.encode("the food is"));
        let a = m.generate_ids(&[], &prompt, 1).unwrap();
        assert!(a.len() <= 1);
        let x = m.generate(&tok, &[], &prompt, 5).unwrap();
        let y = m.generate(&tok, &[], &prompt, 5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn example_masks_response_only() {
        let ex = Example::new(&[10, 11], &[12]);
        assert_eq!(ex.input, vec![BOS, 10, 11, 12]);
        assert_eq!(ex.targets, vec![10, 11, 12, EOS]);
        assert_eq!(ex.mask, vec![false, false, true, true]);
    }
}
