//! Tabular softmax policies over windowed token contexts.
//!
//! A context is `(query, answer feature, last w tokens, residue, position)`.
//! Only the answer-free rows are parameters; a row with the answer feature
//! set is the matching plain row plus a frozen per-answer bias, so a
//! self-scoring student sees its own logits shifted by a fixed hint.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};
use crate::synth::env::{EnvSpec, RewardRule};

/// Anything that can score the next token given a prefix.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;

    /// Natural-log next-token probabilities at `prefix`, optionally with the
    /// answer feature switched on.
    fn log_probs(&self, query: usize, answer: Option<usize>, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Which side of the training loop a table plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Student,
    FrozenTeacher,
}

/// Hint strengths that build the frozen answer bias.
///
/// `completion` favours the token that would make the running residue hit
/// the answer right now, `local` the token that sums with the previous token
/// to the answer, `surface` the token whose id matches the answer mod M.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnswerHint {
    pub completion: f64,
    pub local: f64,
    pub surface: f64,
    /// Strengths are scaled by `((t + 1) / T)^focus`; a non-zero focus needs
    /// the position feature.
    pub focus: f64,
}

/// Context features of a tabular policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// Number of trailing tokens in the context; defaults to `min(T, 3)`.
    pub window: Option<usize>,
    /// Include the reward accumulator; defaults to on for parity chains.
    pub residue_feature: Option<bool>,
    /// Include the absolute position.
    pub position_feature: bool,
    pub hint: AnswerHint,
}

/// Resolved context layout for one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub vocab_size: usize,
    pub answer_space: usize,
    pub num_queries: usize,
    pub window: usize,
    pub residue: bool,
    pub position: bool,
    pub horizon: usize,
}

impl Layout {
    pub fn new(env: &EnvSpec, spec: &PolicySpec) -> Self {
        Self {
            vocab_size: env.vocab_size,
            answer_space: env.answer_space,
            num_queries: env.num_queries,
            window: spec.window.unwrap_or(env.horizon.min(3)),
            residue: spec
                .residue_feature
                .unwrap_or(matches!(env.reward_rule, RewardRule::ParityChain)),
            position: spec.position_feature,
            horizon: env.horizon,
        }
    }

    fn base(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn window_codes(&self) -> usize {
        self.base().pow(self.window as u32)
    }

    /// Code of the all-padding window.
    pub fn empty_window(&self) -> usize {
        self.window_codes() - 1
    }

    #[inline]
    pub fn push_window(&self, code: usize, token: usize) -> usize {
        if self.window == 0 {
            0
        } else {
            (code * self.base() + token) % self.window_codes()
        }
    }

    fn residues(&self) -> usize {
        if self.residue {
            self.answer_space
        } else {
            1
        }
    }

    fn positions(&self) -> usize {
        if self.position {
            self.horizon
        } else {
            1
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.num_queries * self.window_codes() * self.residues() * self.positions()
    }

    /// Index of the plain context for a decoded state.
    #[inline]
    pub fn context(&self, query: usize, window_code: usize, acc: usize, t: usize) -> usize {
        let r = if self.residue { acc } else { 0 };
        let p = if self.position { t } else { 0 };
        ((query * self.window_codes() + window_code) * self.residues() + r) * self.positions() + p
    }

    fn decode(&self, ctx: usize) -> (usize, usize, usize, usize) {
        let p = ctx % self.positions();
        let rest = ctx / self.positions();
        let r = rest % self.residues();
        let rest = rest / self.residues();
        let w = rest % self.window_codes();
        (rest / self.window_codes(), w, r, p)
    }

    /// Window tokens oldest first; `None` marks padding.
    fn window_tokens(&self, code: usize) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.window);
        let mut c = code;
        for _ in 0..self.window {
            let d = c % self.base();
            c /= self.base();
            out.push((d < self.vocab_size).then_some(d));
        }
        out.reverse();
        out
    }

    fn window_code_of(&self, tokens: &[Option<usize>]) -> usize {
        tokens
            .iter()
            .fold(0, |c, t| c * self.base() + t.unwrap_or(self.vocab_size))
    }

    /// Context key in the text table format.
    pub fn key(&self, ctx: usize, answer: Option<usize>) -> String {
        let (q, w, r, p) = self.decode(ctx);
        let mut s = format!("q{q}|a");
        match answer {
            Some(y) => write!(s, "{y}").unwrap(),
            None => s.push('-'),
        }
        s.push_str("|w");
        let toks: Vec<String> = self
            .window_tokens(w)
            .into_iter()
            .map(|t| t.map_or("_".to_string(), |t| t.to_string()))
            .collect();
        s.push_str(&toks.join(","));
        s.push_str("|r");
        if self.residue {
            write!(s, "{r}").unwrap();
        } else {
            s.push('-');
        }
        s.push_str("|p");
        if self.position {
            write!(s, "{p}").unwrap();
        } else {
            s.push('-');
        }
        s
    }

    /// Inverse of [`Layout::key`].
    pub fn parse_key(&self, key: &str) -> Result<(usize, Option<usize>)> {
        let bad = || CreditError::Config(format!("malformed context key `{key}`"));
        let parts: Vec<&str> = key.split('|').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let field = |s: &str, tag: char| -> Result<Option<usize>> {
            let v = s.strip_prefix(tag).ok_or_else(bad)?;
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad())
            }
        };
        let q = field(parts[0], 'q')?.ok_or_else(bad)?;
        let a = field(parts[1], 'a')?;
        let r = field(parts[3], 'r')?.unwrap_or(0);
        let p = field(parts[4], 'p')?.unwrap_or(0);
        let w = parts[2].strip_prefix('w').ok_or_else(bad)?;
        let toks: Vec<Option<usize>> = if w.is_empty() {
            Vec::new()
        } else {
            w.split(',')
                .map(|t| {
                    if t == "_" {
                        Ok(None)
                    } else {
                        t.parse().map(Some).map_err(|_| bad())
                    }
                })
                .collect::<Result<_>>()?
        };
        if toks.len() != self.window
            || q >= self.num_queries
            || a.is_some_and(|a| a >= self.answer_space)
            || r >= self.residues()
            || p >= self.positions()
            || toks.iter().flatten().any(|&t| t >= self.vocab_size)
        {
            return Err(bad());
        }
        let w = self.window_code_of(&toks);
        Ok((self.context(q, w, r, p), a))
    }
}

/// Tabular softmax policy with tied answer-conditioned rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub layout: Layout,
    pub role: Role,
    /// Answer-free logits, `num_contexts x K`.
    pub logits: Vec<f64>,
    /// Frozen answer offsets, `num_contexts x M x K`.
    pub answer_bias: Vec<f64>,
    /// Reward rule used to compute the residue feature.
    env: EnvSpec,
}

impl TabularPolicy {
    /// Uniform policy with the hint-derived answer bias.
    pub fn uniform(env: &EnvSpec, spec: &PolicySpec) -> Self {
        let layout = Layout::new(env, spec);
        let n = layout.num_contexts();
        let k = layout.vocab_size;
        let m = layout.answer_space;
        let mut answer_bias = vec![0.0; n * m * k];
        let hint = spec.hint;
        if hint != AnswerHint::default() {
            for ctx in 0..n {
                let (_, w, r, p) = layout.decode(ctx);
                let last = layout.window_tokens(w).last().copied().flatten();
                let scale = if hint.focus == 0.0 {
                    1.0
                } else {
                    ((p + 1) as f64 / layout.horizon as f64).powf(hint.focus)
                };
                for y in 0..m {
                    for tok in 0..k {
                        let mut b = 0.0;
                        if layout.residue && (r + tok) % m == y {
                            b += hint.completion;
                        }
                        if let Some(prev) = last {
                            if (prev + tok) % m == y {
                                b += hint.local;
                            }
                        }
                        if tok % m == y {
                            b += hint.surface;
                        }
                        answer_bias[(ctx * m + y) * k + tok] = scale * b;
                    }
                }
            }
        }
        Self {
            layout,
            role: Role::Student,
            logits: vec![0.0; n * k],
            answer_bias,
            env: env.clone(),
        }
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn vocab(&self) -> usize {
        self.layout.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    /// Fill the answer-free logits with `N(0, scale^2)`-ish uniform noise.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for x in &mut self.logits {
            *x = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
    }

    /// Copy tagged as a frozen teacher.
    pub fn frozen(&self) -> Self {
        Self {
            role: Role::FrozenTeacher,
            ..self.clone()
        }
    }

    /// Plain context index of a prefix.
    pub fn context_of(&self, query: usize, prefix: &[usize]) -> usize {
        let mut code = self.layout.empty_window();
        let mut acc = 0;
        for (t, &tok) in prefix.iter().enumerate() {
            code = self.layout.push_window(code, tok);
            acc = self.env.step_acc(acc, t, tok);
        }
        self.layout.context(query, code, acc, prefix.len())
    }

    /// Logit row of a plain context, shifted by the answer bias if given.
    pub fn row_logits(&self, ctx: usize, answer: Option<usize>) -> Vec<f64> {
        let k = self.vocab();
        let mut row = self.logits[ctx * k..(ctx + 1) * k].to_vec();
        if let Some(y) = answer {
            let off = (ctx * self.layout.answer_space + y) * k;
            for (x, b) in row.iter_mut().zip(&self.answer_bias[off..off + k]) {
                *x += b;
            }
        }
        row
    }

    pub fn row_log_probs(&self, ctx: usize, answer: Option<usize>) -> Vec<f64> {
        log_softmax(&self.row_logits(ctx, answer))
    }

    pub fn row_probs(&self, ctx: usize, answer: Option<usize>) -> Vec<f64> {
        self.row_log_probs(ctx, answer)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    /// Write the table in the line-oriented text format.
    ///
    /// A `#`-prefixed JSON header line carries the layout and role; every
    /// other line is `context_key<TAB>token<TAB>logit`. Answer rows are
    /// written with their full logits and only where the bias is non-zero.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let header = TableHeader {
            layout: self.layout,
            role: self.role,
            env: self.env.clone(),
        };
        writeln!(w, "# {}", serde_json::to_string(&header)?)?;
        let k = self.vocab();
        let m = self.layout.answer_space;
        for ctx in 0..self.layout.num_contexts() {
            let key = self.layout.key(ctx, None);
            for (tok, x) in self.row_logits(ctx, None).iter().enumerate() {
                writeln!(w, "{key}\t{tok}\t{x}")?;
            }
            for y in 0..m {
                let off = (ctx * m + y) * k;
                if self.answer_bias[off..off + k].iter().all(|&b| b == 0.0) {
                    continue;
                }
                let key = self.layout.key(ctx, Some(y));
                for (tok, x) in self.row_logits(ctx, Some(y)).iter().enumerate() {
                    writeln!(w, "{key}\t{tok}\t{x}")?;
                }
            }
        }
        Ok(())
    }

    /// Read a table written by [`TabularPolicy::write_text`].
    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines
            .next()
            .ok_or_else(|| CreditError::Empty("policy table".into()))??;
        let header: TableHeader = serde_json::from_str(
            first
                .strip_prefix("# ")
                .ok_or_else(|| CreditError::Record {
                    line: 1,
                    message: "missing header".into(),
                })?,
        )?;
        let layout = header.layout;
        let k = layout.vocab_size;
        let m = layout.answer_space;
        let n = layout.num_contexts();
        let mut logits = vec![0.0; n * k];
        let mut answer_rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let rec = |message: String| CreditError::Record {
                line: lineno,
                message,
            };
            let mut parts = line.split('\t');
            let (Some(key), Some(tok), Some(x), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(rec("expected three tab-separated fields".into()));
            };
            let (ctx, ans) = layout.parse_key(key).map_err(|e| rec(e.to_string()))?;
            let tok = usize::from_str(tok)
                .ok()
                .filter(|&t| t < k)
                .ok_or_else(|| rec(format!("bad token `{tok}`")))?;
            let x = f64::from_str(x)
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| rec(format!("bad logit `{x}`")))?;
            match ans {
                None => logits[ctx * k + tok] = x,
                Some(y) => answer_rows.push((ctx, y, tok, x)),
            }
        }
        let mut answer_bias = vec![0.0; n * m * k];
        for (ctx, y, tok, x) in answer_rows {
            answer_bias[(ctx * m + y) * k + tok] = x - logits[ctx * k + tok];
        }
        Ok(Self {
            layout,
            role: header.role,
            logits,
            answer_bias,
            env: header.env,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    layout: Layout,
    role: Role,
    env: EnvSpec,
}

impl Scorer for TabularPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab()
    }

    fn log_probs(&self, query: usize, answer: Option<usize>, prefix: &[usize]) -> Result<Vec<f64>> {
        if query >= self.layout.num_queries {
            return Err(CreditError::Domain(format!("unknown query {query}")));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.vocab()) {
            return Err(CreditError::Domain(format!("token {bad} outside vocabulary")));
        }
        if answer.is_some_and(|y| y >= self.layout.answer_space) {
            return Err(CreditError::Domain("answer outside answer space".into()));
        }
        Ok(self.row_log_probs(self.context_of(query, prefix), answer))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Shannon entropy of a probability row, in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
