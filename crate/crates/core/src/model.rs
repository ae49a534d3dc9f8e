//! Three-class scorer `p(· | a, b) = softmax(score(a, b))` and its training
//! objective.
//!
//! The built-in scorer averages token embeddings of each sentence into `u`
//! and `v`, combines them as `[u; v; u⊙v; |u−v|]`, and applies one ReLU
//! hidden layer followed by a linear layer to three logits. Gradients are
//! written out by hand; `relu'(0)` and `d|x|/dx` at zero are both 0.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::corpus::{Instance, Sentence, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::rules::{argmin_atom, ground, Rule, Substitution};
use crate::scalar::Scalar;
use crate::seed;

pub const NUM_CLASSES: usize = 3;

/// Anything that maps a sentence pair to a distribution over
/// (entailment, contradiction, neutral).
pub trait Scorer {
    type Scalar: Scalar;

    fn predict(&self, premise: &Sentence, hypothesis: &Sentence)
        -> Result<Prediction<Self::Scalar>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    type Scalar = S::Scalar;

    fn predict(&self, p: &Sentence, h: &Sentence) -> Result<Prediction<S::Scalar>> {
        (**self).predict(p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub probs: [T; NUM_CLASSES],
}

impl<T: Scalar> Prediction<T> {
    /// Softmax with max-subtraction.
    pub fn from_logits(logits: [T; NUM_CLASSES]) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exp = logits.map(|z| (z - max).exp());
        let total: T = exp.iter().copied().sum();
        Ok(Prediction {
            probs: exp.map(|e| e / total),
        })
    }

    pub fn uniform() -> Self {
        let third = T::one() / T::of(3.0);
        Prediction {
            probs: [third; NUM_CLASSES],
        }
    }

    /// Most probable class; the lowest index among tied maxima.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub rng_seed: u64,
    pub init_scale: f64,
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Argument("scorer dimensions must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Argument("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Θ. Biases are stored as single-row matrices so every block shares one
/// shape type.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams<T> {
    pub embeddings: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

/// ∇Θ, shape-congruent with [`ScorerParams`].
pub type Gradient<T> = ScorerParams<T>;

pub const BLOCK_NAMES: [&str; 5] = ["embeddings", "W1", "b1", "W2", "b2"];

impl<T: Scalar> ScorerParams<T> {
    pub fn zeros(vocab_size: usize, embedding_dim: usize, hidden_dim: usize) -> Self {
        ScorerParams {
            embeddings: Matrix::zeros(vocab_size, embedding_dim),
            w1: Matrix::zeros(4 * embedding_dim, hidden_dim),
            b1: Matrix::zeros(1, hidden_dim),
            w2: Matrix::zeros(hidden_dim, NUM_CLASSES),
            b2: Matrix::zeros(1, NUM_CLASSES),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.embedding_dim(), self.hidden_dim())
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.cols
    }

    /// Blocks in checkpoint order.
    pub fn blocks(&self) -> [&Matrix<T>; 5] {
        [&self.embeddings, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix<T>; 5] {
        [
            &mut self.embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|m| m.data.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x = *x + *y);
        }
    }

    /// `Θ ← Θ − η g`, then re-zero the PAD row.
    pub fn sgd_step(&mut self, grad: &Gradient<T>, eta: T) {
        assert!(self.same_shape(grad), "gradient shape mismatch");
        for (p, g) in self.blocks_mut().into_iter().zip(grad.blocks()) {
            p.data
                .iter_mut()
                .zip(&g.data)
                .for_each(|(x, d)| *x = *x - eta * *d);
        }
        self.embeddings.row_mut(PAD_ID).fill(T::zero());
    }
}

/// Uniform `[-init_scale, init_scale]` draws from a ChaCha stream keyed by
/// `rng_seed`, in checkpoint block order. The PAD row is zero.
pub fn init_params<T: Scalar>(config: &ScorerConfig) -> Result<ScorerParams<T>> {
    config.validate()?;
    let mut params =
        ScorerParams::zeros(config.vocab_size, config.embedding_dim, config.hidden_dim);
    let mut rng = seed::rng(config.rng_seed);
    let s = config.init_scale;
    for block in params.blocks_mut() {
        for x in &mut block.data {
            *x = T::of(rng.gen_range(-s..=s));
        }
    }
    params.embeddings.row_mut(PAD_ID).fill(T::zero());
    Ok(params)
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub premise_ids: Vec<usize>,
    pub hypothesis_ids: Vec<usize>,
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub features: Vec<T>,
    pub pre_hidden: Vec<T>,
    pub hidden: Vec<T>,
    pub logits: [T; NUM_CLASSES],
    pub prediction: Prediction<T>,
}

/// Vocabulary plus parameters: the built-in trainable scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct NliModel<T> {
    pub vocab: Vocab,
    pub params: ScorerParams<T>,
}

impl<T: Scalar> Scorer for NliModel<T> {
    type Scalar = T;

    fn predict(&self, premise: &Sentence, hypothesis: &Sentence) -> Result<Prediction<T>> {
        Ok(self.forward(premise, hypothesis)?.prediction)
    }
}

impl<T: Scalar> NliModel<T> {
    pub fn new(vocab: Vocab, params: ScorerParams<T>) -> Result<Self> {
        if vocab.len() != params.vocab_size() {
            return Err(Error::Contract(format!(
                "vocabulary has {} entries but embeddings have {} rows",
                vocab.len(),
                params.vocab_size()
            )));
        }
        Ok(NliModel { vocab, params })
    }

    pub fn token_ids(&self, s: &Sentence) -> Vec<usize> {
        s.tokens.iter().map(|t| self.vocab.lookup(t)).collect()
    }

    fn mean_embedding(&self, ids: &[usize]) -> Result<Vec<T>> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty sentence".into()));
        }
        let k = self.params.embedding_dim();
        let mut out = vec![T::zero(); k];
        for &id in ids {
            for (o, e) in out.iter_mut().zip(self.params.embeddings.row(id)) {
                *o = *o + *e;
            }
        }
        let n = T::of(ids.len() as f64);
        out.iter_mut().for_each(|x| *x = *x / n);
        Ok(out)
    }

    /// Mean of the embedding rows of the sentence's tokens (OOV → UNK).
    pub fn encode(&self, s: &Sentence) -> Result<Vec<T>> {
        self.mean_embedding(&self.token_ids(s))
    }

    pub fn forward(&self, premise: &Sentence, hypothesis: &Sentence) -> Result<Forward<T>> {
        let p = &self.params;
        let (k, h) = (p.embedding_dim(), p.hidden_dim());
        let premise_ids = self.token_ids(premise);
        let hypothesis_ids = self.token_ids(hypothesis);
        let u = self.mean_embedding(&premise_ids)?;
        let v = self.mean_embedding(&hypothesis_ids)?;

        let mut features = Vec::with_capacity(4 * k);
        features.extend_from_slice(&u);
        features.extend_from_slice(&v);
        features.extend(u.iter().zip(&v).map(|(a, b)| *a * *b));
        features.extend(u.iter().zip(&v).map(|(a, b)| (*a - *b).abs()));

        let mut pre_hidden = p.b1.data.clone();
        for (i, &f) in features.iter().enumerate() {
            if f == T::zero() {
                continue;
            }
            for (z, w) in pre_hidden.iter_mut().zip(p.w1.row(i)) {
                *z = *z + f * *w;
            }
        }
        let hidden: Vec<T> = pre_hidden.iter().map(|z| z.pos()).collect();

        let mut logits = [p.b2.data[0], p.b2.data[1], p.b2.data[2]];
        for (j, &a) in hidden.iter().enumerate().take(h) {
            if a == T::zero() {
                continue;
            }
            for (z, w) in logits.iter_mut().zip(p.w2.row(j)) {
                *z = *z + a * *w;
            }
        }
        let prediction = Prediction::from_logits(logits)?;
        Ok(Forward {
            premise_ids,
            hypothesis_ids,
            u,
            v,
            features,
            pre_hidden,
            hidden,
            logits,
            prediction,
        })
    }

    /// Accumulate into `grad` the gradient of a scalar whose derivative with
    /// respect to the logits of `fwd` is `dlogits`.
    pub fn backward(&self, fwd: &Forward<T>, dlogits: [T; NUM_CLASSES], grad: &mut Gradient<T>) {
        let p = &self.params;
        let (k, h) = (p.embedding_dim(), p.hidden_dim());

        for (g, d) in grad.b2.data.iter_mut().zip(dlogits) {
            *g = *g + d;
        }
        let mut dpre = vec![T::zero(); h];
        for (j, dp) in dpre.iter_mut().enumerate() {
            let w2 = p.w2.row(j);
            let a = fwd.hidden[j];
            let gw2 = grad.w2.row_mut(j);
            let mut dh = T::zero();
            for c in 0..NUM_CLASSES {
                gw2[c] = gw2[c] + a * dlogits[c];
                dh = dh + w2[c] * dlogits[c];
            }
            if fwd.pre_hidden[j] > T::zero() {
                *dp = dh;
            }
        }
        for (g, d) in grad.b1.data.iter_mut().zip(&dpre) {
            *g = *g + *d;
        }
        let mut dfeat = vec![T::zero(); 4 * k];
        for (i, df) in dfeat.iter_mut().enumerate() {
            let f = fwd.features[i];
            let w1 = p.w1.row(i);
            let gw1 = grad.w1.row_mut(i);
            let mut acc = T::zero();
            for j in 0..h {
                gw1[j] = gw1[j] + f * dpre[j];
                acc = acc + w1[j] * dpre[j];
            }
            *df = acc;
        }
        let mut du = vec![T::zero(); k];
        let mut dv = vec![T::zero(); k];
        for d in 0..k {
            let sign = (fwd.u[d] - fwd.v[d]).sign0();
            let abs_term = dfeat[3 * k + d] * sign;
            du[d] = dfeat[d] + dfeat[2 * k + d] * fwd.v[d] + abs_term;
            dv[d] = dfeat[k + d] + dfeat[2 * k + d] * fwd.u[d] - abs_term;
        }
        for (ids, dvec) in [(&fwd.premise_ids, &du), (&fwd.hypothesis_ids, &dv)] {
            let scale = T::one() / T::of(ids.len() as f64);
            for &id in ids.iter() {
                for (g, d) in grad.embeddings.row_mut(id).iter_mut().zip(dvec.iter()) {
                    *g = *g + *d * scale;
                }
            }
        }
    }

    /// Cross-entropy `Σ −ln p(gold)` over the batch.
    pub fn data_loss(&self, batch: &[Instance]) -> Result<T> {
        let mut total = T::zero();
        for inst in batch {
            let gold = gold_class(inst)?;
            let pred = self.predict(&inst.premise, &inst.hypothesis)?;
            total = total - pred.probs[gold].ln();
        }
        Ok(total)
    }

    /// `L_D(batch) + λ Σ_k L_I(rule_k, S_k)` and its gradient.
    ///
    /// The Gödel minimum routes its subgradient to the first minimal body
    /// atom, and the hinge contributes nothing unless strictly positive.
    pub fn loss_and_grad(
        &self,
        batch: &[Instance],
        adversarial: &[(Rule, Substitution)],
        lambda: T,
    ) -> Result<(T, Gradient<T>)> {
        let mut grad = self.params.zeros_like();
        let mut value = T::zero();
        for inst in batch {
            let gold = gold_class(inst)?;
            let fwd = self.forward(&inst.premise, &inst.hypothesis)?;
            let probs = fwd.prediction.probs;
            value = value - probs[gold].ln();
            let mut dz = probs;
            dz[gold] = dz[gold] - T::one();
            self.backward(&fwd, dz, &mut grad);
        }
        if lambda != T::zero() {
            for (rule, subst) in adversarial {
                value = value + lambda * self.accumulate_inconsistency(rule, subst, lambda, &mut grad)?;
            }
        }
        if !value.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok((value, grad))
    }

    /// Adds `weight · ∇ L_I` to `grad` and returns `L_I`.
    fn accumulate_inconsistency(
        &self,
        rule: &Rule,
        subst: &Substitution,
        weight: T,
        grad: &mut Gradient<T>,
    ) -> Result<T> {
        let mut body = Vec::with_capacity(rule.body.len());
        for atom in &rule.body {
            let (a, b) = ground(atom, subst)?;
            body.push(self.forward(a, b)?);
        }
        let body_probs: Vec<T> = body
            .iter()
            .zip(&rule.body)
            .map(|(f, atom)| f.prediction.probs[atom.predicate.class()])
            .collect();
        let argmin = argmin_atom(&body_probs);
        let body_p = argmin.map_or(T::one(), |i| body_probs[i]);

        let (a, b) = ground(&rule.head.atom, subst)?;
        let head_fwd = self.forward(a, b)?;
        let head_class = rule.head.atom.predicate.class();
        let atom_p = head_fwd.prediction.probs[head_class];
        let head_p = if rule.head.negated {
            T::one() - atom_p
        } else {
            atom_p
        };

        let loss = body_p - head_p;
        if loss <= T::zero() {
            return Ok(T::zero());
        }
        if let Some(i) = argmin {
            let class = rule.body[i].predicate.class();
            self.backward(&body[i], prob_logit_grad(&body[i], class, weight), grad);
        }
        // d(−head)/dp = −1 for a plain head and +1 for a negated one
        let head_weight = if rule.head.negated { weight } else { -weight };
        self.backward(&head_fwd, prob_logit_grad(&head_fwd, head_class, head_weight), grad);
        Ok(loss)
    }

    pub fn sgd_step(&mut self, grad: &Gradient<T>, eta: T) {
        self.params.sgd_step(grad, eta);
    }

    /// Overwrite embedding rows from a `token v1 … vk` text file. Returns the
    /// number of rows replaced; tokens outside the vocabulary are ignored.
    pub fn load_pretrained_embeddings(&mut self, path: &Path) -> Result<usize> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let k = self.params.embedding_dim();
        let mut loaded = 0;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    source_name: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("bad embedding value: {e}"),
                })?;
            if values.len() != k {
                return Err(Error::Format {
                    source_name: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected {k} values, found {}", values.len()),
                });
            }
            if let Some(id) = self.vocab.id(token).filter(|&id| id != PAD_ID) {
                for (x, v) in self.params.embeddings.row_mut(id).iter_mut().zip(&values) {
                    *x = T::of(*v);
                }
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Checkpoint: a text header, `token<TAB>count` vocabulary lines, then
    /// each parameter block as `BLOCK <name> <rows> <cols>` followed by
    /// row-major little-endian f64 values.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let p = &self.params;
        writeln!(
            w,
            "NLICKPT 1 {} {} {}",
            p.vocab_size(),
            p.embedding_dim(),
            p.hidden_dim()
        )?;
        for (token, count) in self.vocab.entries() {
            writeln!(w, "{token}\t{count}")?;
        }
        for (name, block) in BLOCK_NAMES.iter().zip(p.blocks()) {
            writeln!(w, "BLOCK {name} {} {}", block.rows, block.cols)?;
            let mut bytes = Vec::with_capacity(block.data.len() * 8);
            for x in &block.data {
                bytes.extend_from_slice(&x.as_f64().to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl BufRead) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let header = read_line(&mut r)?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[0] != "NLICKPT" || fields[1] != "1" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let dims: Vec<usize> = fields[2..]
            .iter()
            .map(|f| f.parse().map_err(|_| bad(format!("bad dimension {f:?}"))))
            .collect::<Result<_>>()?;
        let (nv, k, h) = (dims[0], dims[1], dims[2]);
        let mut entries = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = read_line(&mut r)?;
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad vocabulary line {line:?}")))?;
            let count = count
                .parse()
                .map_err(|_| bad(format!("bad count in {line:?}")))?;
            entries.push((token.to_owned(), count));
        }
        let vocab = Vocab::from_entries(entries)?;
        let mut params = ScorerParams::zeros(nv, k, h);
        for (name, block) in BLOCK_NAMES.iter().zip(params.blocks_mut()) {
            let line = read_line(&mut r)?;
            let expected = format!("BLOCK {name} {} {}", block.rows, block.cols);
            if line != expected {
                return Err(bad(format!("expected {expected:?}, found {line:?}")));
            }
            let mut buf = vec![0u8; block.data.len() * 8];
            r.read_exact(&mut buf)
                .map_err(|e| bad(format!("truncated block {name}: {e}")))?;
            for (x, chunk) in block.data.iter_mut().zip(buf.chunks_exact(8)) {
                *x = T::of(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        NliModel::new(vocab, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(file))
    }
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if line.pop() != Some(b'\n') {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    String::from_utf8(line).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn gold_class(inst: &Instance) -> Result<usize> {
    inst.label
        .class()
        .ok_or_else(|| Error::Contract("unlabeled instance in a training batch".into()))
}

/// `weight · ∂p_c/∂z = weight · p_c (e_c − p)`.
fn prob_logit_grad<T: Scalar>(fwd: &Forward<T>, class: usize, weight: T) -> [T; NUM_CLASSES] {
    let p = fwd.prediction.probs;
    let pc = p[class];
    let mut out = [T::zero(); NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let delta = if c == class { T::one() } else { T::zero() };
        *o = weight * pc * (delta - p[c]);
    }
    out
}

type PairKey = (Vec<String>, Vec<String>);

/// Memoizes another scorer by token sequences. Not thread-safe; intended
/// for one search or audit pass over a frozen scorer.
pub struct CachedScorer<'a, S: ?Sized> {
    inner: &'a S,
    cache: RefCell<HashMap<PairKey, [f64; NUM_CLASSES]>>,
}

impl<'a, S: Scorer + ?Sized> CachedScorer<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        CachedScorer {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.borrow().is_empty()
    }
}

impl<S: Scorer + ?Sized> Scorer for CachedScorer<'_, S> {
    type Scalar = S::Scalar;

    fn predict(&self, p: &Sentence, h: &Sentence) -> Result<Prediction<S::Scalar>> {
        let key = (p.tokens.clone(), h.tokens.clone());
        if let Some(probs) = self.cache.borrow().get(&key) {
            return Ok(Prediction {
                probs: probs.map(S::Scalar::of),
            });
        }
        let pred = self.inner.predict(p, h)?;
        self.cache
            .borrow_mut()
            .insert(key, pred.probs.map(Scalar::as_f64));
        Ok(pred)
    }
}

/// Stub scorers with hand-set distributions, for tests and examples.
pub mod testing {
    use super::*;

    /// Looks pairs up by their space-joined text; unknown pairs get `default`.
    #[derive(Debug, Clone)]
    pub struct TableScorer {
        pub default: [f64; NUM_CLASSES],
        pub table: HashMap<(String, String), [f64; NUM_CLASSES]>,
    }

    impl TableScorer {
        pub fn uniform() -> Self {
            TableScorer {
                default: [1.0 / 3.0; NUM_CLASSES],
                table: HashMap::new(),
            }
        }

        pub fn constant(probs: [f64; NUM_CLASSES]) -> Self {
            TableScorer {
                default: probs,
                table: HashMap::new(),
            }
        }

        pub fn with(mut self, premise: &str, hypothesis: &str, probs: [f64; NUM_CLASSES]) -> Self {
            self.table
                .insert((premise.to_owned(), hypothesis.to_owned()), probs);
            self
        }
    }

    impl Scorer for TableScorer {
        type Scalar = f64;

        fn predict(&self, p: &Sentence, h: &Sentence) -> Result<Prediction<f64>> {
            let probs = self
                .table
                .get(&(p.text(), h.text()))
                .copied()
                .unwrap_or(self.default);
            Ok(Prediction { probs })
        }
    }

    /// Any closure over the pair.
    pub struct FnScorer<F>(pub F);

    impl<F> Scorer for FnScorer<F>
    where
        F: Fn(&Sentence, &Sentence) -> [f64; NUM_CLASSES],
    {
        type Scalar = f64;

        fn predict(&self, p: &Sentence, h: &Sentence) -> Result<Prediction<f64>> {
            Ok(Prediction {
                probs: (self.0)(p, h),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, Label, UNK_ID};
    use crate::rules::RuleSet;

    fn fixture_corpus() -> Corpus {
        let pairs = [
            ("a dog runs", "an animal moves", Label::Entailment),
            ("a cat sleeps", "a dog runs", Label::Contradiction),
            ("the man eats", "the man eats food", Label::Neutral),
        ];
        Corpus::new(
            pairs
                .iter()
                .map(|(p, h, l)| Instance {
                    premise: Sentence::from_text(p),
                    hypothesis: Sentence::from_text(h),
                    label: *l,
                })
                .collect(),
            "fixture",
        )
    }

    fn model(scale: f64, seed: u64) -> NliModel<f64> {
        let vocab = build_vocab(&fixture_corpus(), 1, true);
        let cfg = ScorerConfig {
            embedding_dim: 4,
            hidden_dim: 5,
            vocab_size: vocab.len(),
            rng_seed: seed,
            init_scale: scale,
        };
        NliModel::new(vocab, init_params(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ScorerConfig {
            embedding_dim: 8,
            hidden_dim: 16,
            vocab_size: 50,
            rng_seed: 3,
            init_scale: 0.1,
        };
        let a: ScorerParams<f64> = init_params(&cfg).unwrap();
        let b: ScorerParams<f64> = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.embeddings.rows, a.embeddings.cols), (50, 8));
        assert_eq!((a.w1.rows, a.w1.cols), (32, 16));
        assert_eq!((a.w2.rows, a.w2.cols), (16, 3));
        assert!(a.embeddings.row(PAD_ID).iter().all(|x| *x == 0.0));
        assert!(a.w1.data.iter().all(|x| x.abs() <= 0.1));
        let f: ScorerParams<f32> = init_params(&cfg).unwrap();
        assert_eq!(f.w1.data[0], a.w1.data[0] as f32);
    }

    #[test]
    fn zero_params_predict_uniform() {
        let m = model(0.0, 1);
        let c = fixture_corpus();
        for i in &c.instances {
            let p = m.predict(&i.premise, &i.hypothesis).unwrap();
            for x in p.probs {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let loss = m.data_loss(&c.instances[..2]).unwrap();
        assert!((loss - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_fixed_logits() {
        let p = Prediction::from_logits([2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((p.probs[0] - 0.5).abs() < 1e-15);
        assert!((p.probs[1] - 0.25).abs() < 1e-15);
        let shifted = Prediction::from_logits([2f64.ln() + 700.0, 700.0, 700.0]).unwrap();
        for c in 0..3 {
            assert!((p.probs[c] - shifted.probs[c]).abs() < 1e-12);
        }
        assert!(Prediction::<f64>::from_logits([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let p = Prediction::from_logits([800.0f64, 0.0, 0.0]).unwrap();
        assert_eq!(-p.probs[0].ln(), 0.0);
    }

    #[test]
    fn encode_is_mean_of_rows() {
        let m = model(0.5, 2);
        let dog = m.vocab.id("dog").unwrap();
        let runs = m.vocab.id("runs").unwrap();
        assert_eq!(m.encode(&Sentence::from_text("dog")).unwrap(), m.params.embeddings.row(dog));
        let two = m.encode(&Sentence::from_text("Dog runs")).unwrap();
        for (d, got) in two.iter().enumerate() {
            let want = (m.params.embeddings.row(dog)[d] + m.params.embeddings.row(runs)[d]) / 2.0;
            assert!((got - want).abs() < 1e-15);
        }
        let oov = m.encode(&Sentence::from_text("zzz qqq")).unwrap();
        assert_eq!(oov, m.params.embeddings.row(UNK_ID));
        assert!(m.encode(&Sentence::from_text("")).is_err());
    }

    #[test]
    fn identical_inputs_zero_the_difference_block() {
        let m = model(0.5, 4);
        let s = Sentence::from_text("a dog runs");
        let f = m.forward(&s, &s).unwrap();
        assert!(f.features[12..16].iter().all(|x| *x == 0.0));
        assert_eq!(f.features[0..4], f.features[4..8]);
    }

    #[test]
    fn nonfinite_parameters_are_reported() {
        let mut m = model(0.5, 4);
        m.params.w2.data[0] = f64::NAN;
        let s = Sentence::from_text("a dog");
        assert!(matches!(m.predict(&s, &s), Err(Error::Numeric(_))));
    }

    #[test]
    fn lambda_zero_is_pure_data_loss() {
        let m = model(0.5, 5);
        let c = fixture_corpus();
        let rules = RuleSet::nli();
        let r2 = rules.get("r2").unwrap().clone();
        let s = r2.bind(&[&c.instances[0].premise, &c.instances[1].premise]).unwrap();
        let (v0, g0) = m.loss_and_grad(&c.instances, &[(r2.clone(), s.clone())], 0.0).unwrap();
        let (v1, g1) = m.loss_and_grad(&c.instances, &[], 0.0).unwrap();
        assert_eq!(v0, m.data_loss(&c.instances).unwrap());
        assert_eq!((v0, &g0), (v1, &g1));
    }

    #[test]
    fn satisfied_rule_contributes_nothing() {
        let m = model(0.5, 6);
        let rules = RuleSet::nli();
        let r2 = rules.get("r2").unwrap().clone();
        let s = Sentence::from_text("a dog runs");
        // body and head ground to the same pair, so the hinge is exactly 0
        let subst = r2.bind(&[&s, &s]).unwrap();
        let (v, g) = m.loss_and_grad(&[], &[(r2, subst)], 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, m.params.zeros_like());
    }

    #[test]
    fn unlabeled_batch_is_rejected() {
        let m = model(0.5, 6);
        let mut inst = fixture_corpus().instances[0].clone();
        inst.label = Label::Unlabeled;
        assert!(matches!(m.data_loss(&[inst.clone()]), Err(Error::Contract(_))));
        assert!(m.loss_and_grad(&[inst], &[], 0.0).is_err());
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = model(0.5, 7);
        let before = m.params.clone();
        m.sgd_step(&before.zeros_like(), 0.1);
        assert_eq!(m.params, before);
        m.sgd_step(&before, 1.0);
        assert!(m.params.blocks().iter().all(|b| b.data.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = model(0.5, 8);
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        let back = NliModel::<f64>::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(NliModel::<f64>::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let header = String::from_utf8_lossy(&bytes[..40]).to_string();
        assert!(header.starts_with(&format!("NLICKPT 1 {} 4 5\n<pad>\t0\n", m.vocab.len())));
    }

    #[test]
    fn pretrained_rows_replace_known_tokens() {
        let mut m = model(0.5, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "dog 1 2 3 4\nunknownword 0 0 0 0\n").unwrap();
        let cat_before = m.params.embeddings.row(m.vocab.id("cat").unwrap()).to_vec();
        assert_eq!(m.load_pretrained_embeddings(&path).unwrap(), 1);
        assert_eq!(m.params.embeddings.row(m.vocab.id("dog").unwrap()), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.params.embeddings.row(m.vocab.id("cat").unwrap()), cat_before);
        std::fs::write(&path, "dog 1 2\n").unwrap();
        assert!(m.load_pretrained_embeddings(&path).is_err());
    }
}
