//! Frozen policies: JSON format, finalization, sampling and table rendering.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{apply_aug_value, AugOpKind, AugmentConfig, NUM_OPS};
use super::policy::PolicyParams;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const POLICY_VERSION: u32 = 1;

/// Slack above one on per-sub-policy probability sums. Hand-written
/// policies rounded to whole percents may also sum slightly below one.
const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Categorical,
    Argmax,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Self::Categorical),
            "argmax" => Ok(Self::Argmax),
            other => Err(Error::invalid(format!("unknown sampling mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Categorical => "categorical",
            Self::Argmax => "argmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployedOp {
    pub kind: AugOpKind,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// Upper end when the magnitude is an interval sampled uniformly per use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude_high: Option<f64>,
}

impl DeployedOp {
    pub fn new(kind: AugOpKind, prob: f64, magnitude: Option<f64>) -> Self {
        Self {
            kind,
            prob,
            magnitude,
            magnitude_high: None,
        }
    }

    pub fn interval(kind: AugOpKind, prob: f64, low: f64, high: f64) -> Self {
        Self {
            kind,
            prob,
            magnitude: Some(low),
            magnitude_high: Some(high),
        }
    }

    fn draw_magnitude<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match (self.magnitude, self.magnitude_high) {
            (Some(lo), Some(hi)) if hi > lo => rng.random_range(lo..=hi),
            (Some(m), _) => m,
            (None, _) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployedSubpolicy {
    pub ops: Vec<DeployedOp>,
}

impl DeployedSubpolicy {
    pub fn total_prob(&self) -> f64 {
        self.ops.iter().map(|o| o.prob).sum()
    }

    /// Highest probability; ties go to the lowest operation index.
    pub fn argmax(&self) -> &DeployedOp {
        self.ops
            .iter()
            .fold(None::<&DeployedOp>, |best, op| match best {
                Some(b) if b.prob > op.prob || (b.prob == op.prob && b.kind <= op.kind) => Some(b),
                _ => Some(op),
            })
            .expect("validated sub-policies are nonempty")
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &DeployedOp {
        let u = rng.random::<f64>() * self.total_prob();
        let mut acc = 0.0;
        for op in &self.ops {
            acc += op.prob;
            if u < acc {
                return op;
            }
        }
        // rounding left u at the very top
        self.ops.iter().rev().find(|o| o.prob > 0.0).unwrap_or(&self.ops[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployedPolicy {
    pub version: u32,
    pub mode: SamplingMode,
    pub subpolicies: Vec<DeployedSubpolicy>,
}

impl DeployedPolicy {
    pub fn new(mode: SamplingMode, subpolicies: Vec<DeployedSubpolicy>) -> Result<Self> {
        let p = Self {
            version: POLICY_VERSION,
            mode,
            subpolicies,
        };
        p.validate()?;
        Ok(p)
    }

    /// `n` sub-policies that always pick Identical.
    pub fn identity(n: usize) -> Self {
        let sub = DeployedSubpolicy {
            ops: vec![DeployedOp::new(AugOpKind::Identical, 1.0, None)],
        };
        Self {
            version: POLICY_VERSION,
            mode: SamplingMode::Categorical,
            subpolicies: vec![sub; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(|_| PROB_SUM_TOL)
    }

    /// `excess(n_ops)` is how far above one a sub-policy sum may go.
    fn validate_with(&self, excess: impl Fn(usize) -> f64) -> Result<()> {
        if self.version != POLICY_VERSION {
            return Err(Error::invalid(format!("unsupported policy version {}", self.version)));
        }
        if self.subpolicies.is_empty() {
            return Err(Error::invalid("policy has no sub-policies"));
        }
        for (i, sub) in self.subpolicies.iter().enumerate() {
            let ctx = |msg: String| Error::invalid(format!("sub-policy {}: {msg}", i + 1));
            if sub.ops.is_empty() {
                return Err(ctx("no operations".into()));
            }
            let mut seen = [false; NUM_OPS];
            for op in &sub.ops {
                if std::mem::replace(&mut seen[op.kind.index()], true) {
                    return Err(ctx(format!("{} listed twice", op.kind)));
                }
                if !(0.0..=1.0).contains(&op.prob) {
                    return Err(ctx(format!("{} probability {} outside [0, 1]", op.kind, op.prob)));
                }
                let spec = op.kind.magnitude_spec();
                match (spec.has_magnitude(), op.magnitude, op.magnitude_high) {
                    (false, None, None) => {}
                    (false, _, _) => return Err(ctx(format!("{} takes no magnitude", op.kind))),
                    (true, None, _) => return Err(ctx(format!("{} needs a magnitude", op.kind))),
                    (true, Some(lo), hi) => {
                        spec.check(lo)?;
                        if let Some(hi) = hi {
                            spec.check(hi)?;
                            if hi < lo {
                                return Err(ctx(format!("{} interval [{lo}, {hi}] is reversed", op.kind)));
                            }
                        }
                    }
                }
            }
            let total = sub.total_prob();
            if !(total > 0.0 && total <= 1.0 + excess(sub.ops.len())) {
                return Err(ctx(format!("probabilities sum to {total}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serialization is infallible")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialization is infallible")
    }

    /// The operation used by sub-policy `n` for one application.
    pub fn choose<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> &DeployedOp {
        let sub = &self.subpolicies[n];
        match self.mode {
            SamplingMode::Categorical => sub.sample(rng),
            SamplingMode::Argmax => sub.argmax(),
        }
    }
}

/// Freezes learned parameters. Categorical keeps the whole distribution with
/// the mapped magnitudes; argmax keeps only the most probable operation.
pub fn finalize_policy<F: Element>(
    params: &PolicyParams<F>,
    mode: SamplingMode,
    config: &AugmentConfig,
) -> Result<DeployedPolicy> {
    let mut subpolicies = Vec::with_capacity(params.n_subpolicies());
    for n in 0..params.n_subpolicies() {
        if params.logits_row(n)?.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanLogits { subpolicy: n });
        }
        let weights = params.detach().weights(n)?.cast::<f64>();
        let mags = params.detach().magnitudes(n, config)?.cast::<f64>();
        let op = |kind: AugOpKind, prob: f64| {
            let m = kind.magnitude_spec().has_magnitude().then(|| {
                let spec = kind.magnitude_spec();
                mags.data()[kind.index()].clamp(spec.low, spec.high)
            });
            DeployedOp::new(kind, prob, m)
        };
        let ops = match mode {
            SamplingMode::Categorical => {
                let total: f64 = weights.data().iter().sum();
                AugOpKind::ALL
                    .into_iter()
                    .map(|k| op(k, weights.data()[k.index()] / total))
                    .collect()
            }
            SamplingMode::Argmax => {
                let mut best = 0;
                for (k, &w) in weights.data().iter().enumerate() {
                    if w > weights.data()[best] {
                        best = k;
                    }
                }
                vec![op(AugOpKind::ALL[best], 1.0)]
            }
        };
        subpolicies.push(DeployedSubpolicy { ops });
    }
    DeployedPolicy::new(mode, subpolicies)
}

/// Applies a frozen policy image by image: for each image, each sub-policy
/// in order picks an operation and applies it.
pub fn apply_deployed<F: Element, R: Rng + ?Sized>(
    images: &Tensor<F>,
    policy: &DeployedPolicy,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<Tensor<F>> {
    if images.ndim() != 4 {
        return Err(Error::shape("apply_deployed", images.shape(), &[0, 3, 0, 0]));
    }
    let images = images.detach();
    let mut out = Vec::with_capacity(images.shape()[0]);
    for i in 0..images.shape()[0] {
        let mut x = images.narrow(i, 1)?;
        for n in 0..policy.subpolicies.len() {
            let op = policy.choose(n, rng);
            let m = op.draw_magnitude(rng);
            if op.kind != AugOpKind::Identical {
                x = apply_aug_value(&x, op.kind, m, config)?;
            }
        }
        out.push(x);
    }
    if out.is_empty() {
        return Ok(images);
    }
    Tensor::concat(&out.iter().collect::<Vec<_>>())
}

fn pct(p: f64) -> String {
    format!("{:.0}", p * 100.0)
}

fn fmt_magnitude(op: &DeployedOp) -> String {
    match (op.magnitude, op.magnitude_high) {
        (None, _) => "N/A".into(),
        (Some(lo), Some(hi)) => format!("[{lo:.2}, {hi:.2}]"),
        (Some(m), None) => format!("{m:.2}"),
    }
}

/// Human-readable table: one row per sub-policy, operations by descending
/// probability in whole percents, operations rounding to 0% left out.
pub fn render_policy(policy: &DeployedPolicy) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Policy ({})", policy.mode);
    for (i, sub) in policy.subpolicies.iter().enumerate() {
        let mut ops: Vec<&DeployedOp> = sub.ops.iter().filter(|o| pct(o.prob) != "0").collect();
        ops.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.kind.cmp(&b.kind)));
        let names: Vec<String> = ops
            .iter()
            .map(|o| format!("{} ({}%)", o.kind, pct(o.prob)))
            .collect();
        let mags: Vec<String> = ops.iter().map(|o| fmt_magnitude(o)).collect();
        let _ = writeln!(s, "Operation No.{} | {} | {}", i + 1, names.join(", "), mags.join(", "));
    }
    s
}

/// Splits on commas that are not inside brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in s.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(s[start..].trim());
    parts
}

fn parse_number(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad number {s:?} in rendered policy")))
}

/// Reads back the output of [`render_policy`]. Values come back at the
/// printed precision.
pub fn parse_rendered_policy(text: &str) -> Result<DeployedPolicy> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::invalid("empty rendered policy"))?;
    let mode = header
        .strip_prefix("Policy (")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::invalid(format!("bad header {header:?}")))?
        .parse()?;
    let mut subpolicies = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        let [_, names, mags] = cols[..] else {
            return Err(Error::invalid(format!("bad policy row {line:?}")));
        };
        let names = split_top_level(names);
        let mags = split_top_level(mags);
        if names.len() != mags.len() {
            return Err(Error::invalid(format!("operation/magnitude count mismatch in {line:?}")));
        }
        let mut ops = Vec::with_capacity(names.len());
        for (name, mag) in names.iter().zip(&mags) {
            let (kind, pct) = name
                .strip_suffix("%)")
                .and_then(|r| r.split_once('('))
                .ok_or_else(|| Error::invalid(format!("bad operation {name:?}")))?;
            let kind = AugOpKind::from_name(kind.trim())
                .ok_or_else(|| Error::invalid(format!("unknown operation {kind:?}")))?;
            let prob = parse_number(pct)? / 100.0;
            let op = if *mag == "N/A" {
                DeployedOp::new(kind, prob, None)
            } else if let Some(inner) = mag.strip_prefix('[').and_then(|m| m.strip_suffix(']')) {
                let (lo, hi) = inner
                    .split_once(',')
                    .ok_or_else(|| Error::invalid(format!("bad interval {mag:?}")))?;
                DeployedOp::interval(kind, prob, parse_number(lo)?, parse_number(hi)?)
            } else {
                DeployedOp::new(kind, prob, Some(parse_number(mag)?))
            };
            ops.push(op);
        }
        subpolicies.push(DeployedSubpolicy { ops });
    }
    let policy = DeployedPolicy {
        version: POLICY_VERSION,
        mode,
        subpolicies,
    };
    // whole-percent rounding can push a row total above 100%
    policy.validate_with(|n| 0.005 * n as f64 + PROB_SUM_TOL)?;
    Ok(policy)
}
