//! Trajectory bundles: one prompt's K sampled generations with every per-step
//! statistic the scorers need, plus the little-endian `HGB1` container.
//!
//! Layout (all integers little-endian, all floats IEEE-754 binary32):
//!
//! ```text
//! "HGB1" | u32 version=1 | u32 K | u32 d | u32 ref_count | u8 has_label | u8 label
//! | f32 rouge_to_ref (NaN = absent)
//! | str prompt_id | str prompt_text | ref_count x str | u32 meta_count | meta_count x (str, str)
//! | K x { u32 T | u8 has_states | T x u32 tokens | T x f32 logprob | T x f32 step_entropy
//!         | T x f32 step_lse | str text | d x f32 sent_embed | [T*d x f32 step_states] }
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HGB1";
pub const VERSION: u32 = 1;

/// One sampled continuation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Chosen-token log-probability under the sampler's (truncated) distribution, nats.
    pub logprob: Vec<f32>,
    /// Entropy of the full next-token distribution, nats.
    pub step_entropy: Vec<f32>,
    /// Log-sum-exp of the raw logits.
    pub step_lse: Vec<f32>,
    pub text: String,
    /// Final-token, mid-layer representation.
    pub sent_embed: Vec<f32>,
    /// Optional per-step mid-layer states, `T x d` row-major.
    pub step_states: Option<Vec<f32>>,
}

impl Generation {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row `t` of the step-state matrix, if states were recorded.
    pub fn step_state(&self, t: usize, dim: usize) -> Option<&[f32]> {
        self.step_states
            .as_ref()
            .map(|s| &s[t * dim..(t + 1) * dim])
    }
}

/// A prompt with its K sampled generations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub prompt_id: String,
    pub prompt_text: String,
    pub references: Vec<String>,
    pub generations: Vec<Generation>,
    /// 1 = hallucinated.
    pub label: Option<u8>,
    pub rouge_to_ref: Option<f32>,
    pub embed_dim: usize,
    pub meta: BTreeMap<String, String>,
}

impl TrajectoryBundle {
    pub fn k(&self) -> usize {
        self.generations.len()
    }

    pub fn has_step_states(&self) -> bool {
        self.generations.iter().any(|g| g.step_states.is_some())
    }
}

/// Outcome of [`validate_bundle`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a bundle and names each violation.
pub fn validate_bundle(bundle: &TrajectoryBundle) -> ValidationReport {
    let mut v = Vec::new();
    let d = bundle.embed_dim;
    if bundle.k() < 2 {
        v.push(format!("K < 2 (K = {})", bundle.k()));
    }
    if d == 0 {
        v.push("embed_dim must be positive".to_string());
    }
    if let Some(label) = bundle.label {
        if label > 1 {
            v.push(format!("label must be 0 or 1, got {label}"));
        }
    }
    if let Some(r) = bundle.rouge_to_ref {
        if !(0.0..=1.0).contains(&r) {
            v.push(format!("rouge_to_ref {r} outside [0, 1]"));
        }
    }
    for (g, gen) in bundle.generations.iter().enumerate() {
        let t_k = gen.tokens.len();
        if t_k == 0 {
            v.push(format!("empty generation (T = 0) at gen {g}"));
        }
        for (name, series) in [
            ("logprob", &gen.logprob),
            ("step_entropy", &gen.step_entropy),
            ("step_lse", &gen.step_lse),
        ] {
            if series.len() != t_k {
                v.push(format!(
                    "{name} length {} != T = {t_k} at gen {g}",
                    series.len()
                ));
            }
        }
        for (t, &lp) in gen.logprob.iter().enumerate() {
            if !lp.is_finite() {
                v.push(format!("non-finite logprob at (gen {g}, t {t})"));
            } else if lp > 0.0 {
                v.push(format!("logprob > 0 at (gen {g}, t {t})"));
            }
        }
        for (t, &h) in gen.step_entropy.iter().enumerate() {
            if !h.is_finite() {
                v.push(format!("non-finite step_entropy at (gen {g}, t {t})"));
            } else if h < 0.0 {
                v.push(format!("step_entropy < 0 at (gen {g}, t {t})"));
            }
        }
        for (t, &x) in gen.step_lse.iter().enumerate() {
            if !x.is_finite() {
                v.push(format!("non-finite step_lse at (gen {g}, t {t})"));
            }
        }
        if gen.sent_embed.len() != d {
            v.push(format!(
                "sent_embed length {} != d = {d} at gen {g}",
                gen.sent_embed.len()
            ));
        }
        if let Some(i) = gen.sent_embed.iter().position(|x| !x.is_finite()) {
            v.push(format!("non-finite sent_embed at (gen {g}, i {i})"));
        }
        if let Some(states) = &gen.step_states {
            if d == 0 || states.len() != t_k * d {
                let rows = if d == 0 { 0 } else { states.len() / d };
                v.push(format!("step_states rows {rows} != T = {t_k} at gen {g}"));
            }
            if let Some(i) = states.iter().position(|x| !x.is_finite()) {
                v.push(format!("non-finite step_states at (gen {g}, i {i})"));
            }
        }
    }
    ValidationReport { violations: v }
}

/// Serializes `bundle` into `sink`; returns the number of bytes written.
pub fn write_bundle<W: Write>(bundle: &TrajectoryBundle, sink: &mut W) -> Result<usize> {
    let report = validate_bundle(bundle);
    if !report.ok() {
        return Err(Error::InvalidBundle(report.violations));
    }
    let mut w = CountingWriter { inner: sink, n: 0 };
    w.bytes(&MAGIC)?;
    w.u32(VERSION)?;
    w.u32(len_u32(bundle.k())?)?;
    w.u32(len_u32(bundle.embed_dim)?)?;
    w.u32(len_u32(bundle.references.len())?)?;
    w.bytes(&[u8::from(bundle.label.is_some()), bundle.label.unwrap_or(0)])?;
    w.f32(bundle.rouge_to_ref.unwrap_or(f32::NAN))?;
    w.str(&bundle.prompt_id)?;
    w.str(&bundle.prompt_text)?;
    for r in &bundle.references {
        w.str(r)?;
    }
    w.u32(len_u32(bundle.meta.len())?)?;
    for (k, v) in &bundle.meta {
        w.str(k)?;
        w.str(v)?;
    }
    for gen in &bundle.generations {
        w.u32(len_u32(gen.tokens.len())?)?;
        w.bytes(&[u8::from(gen.step_states.is_some())])?;
        for &tok in &gen.tokens {
            w.u32(tok)?;
        }
        w.f32s(&gen.logprob)?;
        w.f32s(&gen.step_entropy)?;
        w.f32s(&gen.step_lse)?;
        w.str(&gen.text)?;
        w.f32s(&gen.sent_embed)?;
        if let Some(states) = &gen.step_states {
            w.f32s(states)?;
        }
    }
    Ok(w.n)
}

/// Serializes into a fresh byte vector.
pub fn to_bytes(bundle: &TrajectoryBundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_bundle(bundle, &mut out)?;
    Ok(out)
}

/// Parses one bundle from `source` and validates it.
pub fn read_bundle<R: Read>(source: &mut R) -> Result<TrajectoryBundle> {
    let mut r = Reader { inner: source };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("header.version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let k = r.u32("header.K")? as usize;
    let d = r.u32("header.d")? as usize;
    let ref_count = r.u32("header.ref_count")? as usize;
    let mut flags = [0u8; 2];
    r.exact(&mut flags, "header.label")?;
    let label = (flags[0] != 0).then_some(flags[1]);
    let rouge = r.f32("header.rouge_to_ref")?;
    let rouge_to_ref = (!rouge.is_nan()).then_some(rouge);
    let prompt_id = r.str("prompt_id")?;
    let prompt_text = r.str("prompt_text")?;
    let mut references = Vec::new();
    for i in 0..ref_count {
        references.push(r.str(&format!("references[{i}]"))?);
    }
    let meta_count = r.u32("meta_count")? as usize;
    let mut meta = BTreeMap::new();
    for i in 0..meta_count {
        let key = r.str(&format!("meta[{i}].key"))?;
        let value = r.str(&format!("meta[{i}].value"))?;
        meta.insert(key, value);
    }
    let mut generations = Vec::new();
    for g in 0..k {
        let t_k = r.u32(&format!("gen[{g}].T"))? as usize;
        let mut has_states = [0u8; 1];
        r.exact(&mut has_states, &format!("gen[{g}].has_states"))?;
        let raw = r.chunk(t_k, 4, &format!("gen[{g}].tokens"))?;
        let tokens = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let logprob = r.f32s(t_k, &format!("gen[{g}].logprob"))?;
        let step_entropy = r.f32s(t_k, &format!("gen[{g}].step_entropy"))?;
        let step_lse = r.f32s(t_k, &format!("gen[{g}].step_lse"))?;
        let text = r.str(&format!("gen[{g}].text"))?;
        let sent_embed = r.f32s(d, &format!("gen[{g}].sent_embed"))?;
        let step_states = if has_states[0] != 0 {
            Some(r.f32s(t_k * d, &format!("gen[{g}].step_states"))?)
        } else {
            None
        };
        generations.push(Generation {
            tokens,
            logprob,
            step_entropy,
            step_lse,
            text,
            sent_embed,
            step_states,
        });
    }
    let bundle = TrajectoryBundle {
        prompt_id,
        prompt_text,
        references,
        generations,
        label,
        rouge_to_ref,
        embed_dim: d,
        meta,
    };
    let report = validate_bundle(&bundle);
    if !report.ok() {
        return Err(Error::InvalidBundle(report.violations));
    }
    Ok(bundle)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<TrajectoryBundle> {
    read_bundle(&mut bytes)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Malformed(format!("length {n} exceeds u32")))
}

struct CountingWriter<'a, W: Write> {
    inner: &'a mut W,
    n: usize,
}

impl<W: Write> CountingWriter<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)?;
        self.n += b.len();
        Ok(())
    }

    fn u32(&mut self, x: u32) -> io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    fn f32(&mut self, x: f32) -> io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }

    fn f32s(&mut self, xs: &[f32]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(xs.len() * 4);
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(len_u32(s.len())?)?;
        self.bytes(s.as_bytes())?;
        Ok(())
    }
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn exact(&mut self, buf: &mut [u8], section: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated {
                section: section.to_string(),
            },
            _ => Error::Io(e),
        })
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, section)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, section: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, section)?;
        Ok(f32::from_le_bytes(b))
    }

    /// Reads `count * width` bytes without trusting `count` for the allocation.
    fn chunk(&mut self, count: usize, width: usize, section: &str) -> Result<Vec<u8>> {
        let want = count
            .checked_mul(width)
            .ok_or_else(|| Error::Malformed(format!("{section}: length overflow")))?;
        let mut buf = Vec::new();
        (&mut *self.inner)
            .take(want as u64)
            .read_to_end(&mut buf)?;
        if buf.len() != want {
            return Err(Error::Truncated {
                section: section.to_string(),
            });
        }
        Ok(buf)
    }

    fn f32s(&mut self, count: usize, section: &str) -> Result<Vec<f32>> {
        let raw = self.chunk(count, 4, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn str(&mut self, section: &str) -> Result<String> {
        let len = self.u32(&format!("{section}.len"))? as usize;
        let raw = self.chunk(len, 1, section)?;
        String::from_utf8(raw).map_err(|_| Error::Malformed(format!("{section}: invalid UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gen(t: usize, d: usize, states: bool, seed: f32) -> Generation {
        Generation {
            tokens: (0..t as u32).collect(),
            logprob: (0..t).map(|i| -0.1 * (i as f32 + seed)).collect(),
            step_entropy: vec![0.5; t],
            step_lse: vec![1.25; t],
            text: format!("gen {seed}"),
            sent_embed: (0..d).map(|i| (i as f32 + seed).sin()).collect(),
            step_states: states.then(|| (0..t * d).map(|i| i as f32 * 0.01 + seed).collect()),
        }
    }

    fn minimal(k: usize, d: usize, t: usize) -> TrajectoryBundle {
        TrajectoryBundle {
            prompt_id: "p0".into(),
            prompt_text: "what is 2+2".into(),
            references: vec!["4".into()],
            generations: (0..k).map(|g| gen(t, d, false, g as f32)).collect(),
            label: Some(0),
            rouge_to_ref: None,
            embed_dim: d,
            meta: BTreeMap::from([("backbone".to_string(), "tiny".to_string())]),
        }
    }

    #[test]
    fn minimal_round_trip() {
        let b = minimal(2, 2, 3);
        let bytes = to_bytes(&b).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn states_on_one_generation_only() {
        let mut b = minimal(3, 4, 5);
        b.generations[1] = gen(5, 4, true, 1.0);
        b.label = None;
        b.rouge_to_ref = Some(0.25);
        let back = from_bytes(&to_bytes(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        assert!(back.generations[0].step_states.is_none());
        assert!(back.generations[1].step_states.is_some());
    }

    #[test]
    fn size_matches_layout_arithmetic() {
        // K=10, d=16, T=12, empty strings, no refs/meta/states.
        let mut b = minimal(10, 16, 12);
        b.prompt_id.clear();
        b.prompt_text.clear();
        b.references.clear();
        b.meta.clear();
        for g in &mut b.generations {
            g.text.clear();
        }
        // header 26 + prompt_id 4 + prompt_text 4 + meta_count 4 = 38
        // per generation: 4 + 1 + 12*4*4 + 4 + 16*4 = 265
        let expected = 38 + 10 * 265;
        assert_eq!(expected, 2688);
        let n = write_bundle(&b, &mut Vec::new()).unwrap();
        assert_eq!(n, expected);
        assert_eq!(to_bytes(&b).unwrap().len(), expected);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = to_bytes(&minimal(2, 2, 2)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&minimal(2, 2, 2)).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_names_section() {
        let b = minimal(2, 2, 3);
        let bytes = to_bytes(&b).unwrap();
        // header 26, "p0" 6, prompt text 4+11, ref "4" 5, meta 4 + (4+8) + (4+4) = 76;
        // gen 0: T (4) + flag (1) + tokens (12) -> logprob begins at 93.
        let cut = 93 + 5;
        match from_bytes(&bytes[..cut]) {
            Err(Error::Truncated { section }) => assert_eq!(section, "gen[0].logprob"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn validation_reports_fields() {
        let mut b = minimal(2, 2, 5);
        assert!(validate_bundle(&b).ok());
        b.generations[0].logprob[3] = 0.5;
        let r = validate_bundle(&b);
        assert_eq!(r.violations, vec!["logprob > 0 at (gen 0, t 3)".to_string()]);

        let one = minimal(1, 2, 5);
        let r = validate_bundle(&one);
        assert!(r.violations.iter().any(|v| v.starts_with("K < 2")));
    }

    #[test]
    fn writer_rejects_invalid() {
        let mut b = minimal(2, 2, 2);
        b.generations[1].sent_embed[0] = f32::NAN;
        assert!(matches!(to_bytes(&b), Err(Error::InvalidBundle(_))));
        assert!(matches!(to_bytes(&minimal(1, 2, 2)), Err(Error::InvalidBundle(_))));
    }

    #[test]
    fn states_row_mismatch_flagged() {
        let mut b = minimal(2, 3, 4);
        b.generations[0].step_states = Some(vec![0.0; 9]);
        let r = validate_bundle(&b);
        assert!(r.violations[0].contains("step_states rows 3 != T = 4"));
    }
}
