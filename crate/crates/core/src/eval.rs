//! Cosine scoring, EER and minimum detection cost.
//!
//! A trial is accepted when its score is at least the threshold. Operating
//! points are taken at `-inf`, at every midpoint between adjacent distinct
//! scores and at `+inf`. The EER is the point where the miss and
//! false-alarm curves cross, linearly interpolated between the two
//! bracketing operating points. The detection cost is left unnormalized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{read_wav_checked, FeatureExtractor};
use crate::head::SpeakerEmbedding;
use crate::model::SpeakerModel;
use crate::par;
use crate::synth::Manifest;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            what: "trial list",
            line: i + 1,
            reason,
        };
        if cols.len() != 3 {
            return Err(bad(format!("expected <1|0> <enroll> <test>, got {line:?}")));
        }
        let target = match cols[0] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label must be 1 or 0, got {other:?}"))),
        };
        out.push(Trial {
            target,
            enroll: cols[1].to_string(),
            test: cols[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path)?)
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfConfig {
    pub c_fa: f64,
    pub c_m: f64,
    pub p_t: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        DcfConfig {
            c_fa: 1.0,
            c_m: 1.0,
            p_t: 0.01,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_fa > 0.0 && self.c_m > 0.0) {
            return Err(Error::invalid("detection costs must be positive"));
        }
        if !(self.p_t > 0.0 && self.p_t < 1.0) {
            return Err(Error::invalid(format!("target prior must be in (0, 1), got {}", self.p_t)));
        }
        Ok(())
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", format!("{} vs {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cannot score a zero embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Miss and false-alarm rates at every operating point, ordered by
/// increasing threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoints {
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<f64>,
}

pub fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<OperatingPoints> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(format!(
            "need target and nontarget scores, got {} and {}",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let (mut misses, mut fas) = (0usize, nontargets.len());
    let mut p_miss = vec![0.0];
    let mut p_fa = vec![1.0];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                misses += 1;
            } else {
                fas -= 1;
            }
            i += 1;
        }
        p_miss.push(misses as f64 / nt);
        p_fa.push(fas as f64 / nn);
    }
    Ok(OperatingPoints { p_miss, p_fa })
}

/// Crossing of two monotone curves, interpolated between points `a` and `b`.
pub fn interpolate_crossing(pm_a: f64, pfa_a: f64, pm_b: f64, pfa_b: f64) -> f64 {
    let alpha = (pfa_a - pm_a) / ((pm_b - pm_a) - (pfa_b - pfa_a));
    pm_a + alpha * (pm_b - pm_a)
}

pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    let op = operating_points(targets, nontargets)?;
    let k = op
        .p_miss
        .iter()
        .zip(&op.p_fa)
        .position(|(m, f)| m >= f)
        .expect("p_miss reaches 1 at +inf");
    if op.p_miss[k] == op.p_fa[k] {
        return Ok(op.p_miss[k]);
    }
    Ok(interpolate_crossing(op.p_miss[k - 1], op.p_fa[k - 1], op.p_miss[k], op.p_fa[k]))
}

pub fn compute_min_dcf(targets: &[f64], nontargets: &[f64], cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    let op = operating_points(targets, nontargets)?;
    Ok(op
        .p_miss
        .iter()
        .zip(&op.p_fa)
        .map(|(m, f)| cfg.c_m * cfg.p_t * m + cfg.c_fa * (1.0 - cfg.p_t) * f)
        .fold(f64::INFINITY, f64::min))
}

/// Embeddings keyed by utterance id, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    items: Vec<SpeakerEmbedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(items: Vec<SpeakerEmbedding>) -> Result<Self> {
        let mut set = EmbeddingSet::default();
        for e in items {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, e: SpeakerEmbedding) -> Result<()> {
        if let Some(first) = self.items.first() {
            if first.vector.len() != e.vector.len() {
                return Err(Error::shape(
                    "embedding set",
                    format!("{} has dim {}, expected {}", e.id, e.vector.len(), first.vector.len()),
                ));
            }
        }
        if self.index.insert(e.id.clone(), self.items.len()).is_some() {
            return Err(Error::invalid(format!("duplicate embedding id {}", e.id)));
        }
        self.items.push(e);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.items[i].vector.as_slice())
    }

    pub fn items(&self) -> &[SpeakerEmbedding] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |e| e.vector.len())
    }

    /// Header `dim=<d> count=<n>`, then `<id> <v1> ... <vd>` per line with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("dim={} count={}\n", self.dim(), self.len());
        for e in &self.items {
            s.push_str(&e.id);
            for v in &e.vector {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: String| Error::Parse {
            what: "embedding file",
            line,
            reason,
        };
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let mut dim = None;
        let mut count = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (dim, count) = dim
            .zip(count)
            .ok_or_else(|| bad(1, format!("expected dim=<d> count=<n>, got {header:?}")))?;
        let mut set = EmbeddingSet::default();
        for (i, line) in lines {
            let mut cols = line.split_whitespace();
            let Some(id) = cols.next() else { continue };
            let vector = cols
                .map(|c| c.parse::<f64>().map_err(|_| bad(i + 1, format!("bad value {c:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(bad(i + 1, format!("{} values, expected {dim}", vector.len())));
            }
            set.push(SpeakerEmbedding {
                id: id.to_string(),
                vector,
            })?;
        }
        if set.len() != count {
            return Err(bad(1, format!("header says {count} embeddings, found {}", set.len())));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// Utterance ids referenced by `trials`, first occurrence order.
pub fn trial_ids(trials: &[Trial]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for t in trials {
        for id in [&t.enroll, &t.test] {
            if seen.insert(id.as_str()) {
                out.push(id.clone());
            }
        }
    }
    out
}

pub fn score_trials(trials: &[Trial], embeddings: &EmbeddingSet) -> Result<Vec<ScoredTrial>> {
    if trials.is_empty() {
        return Err(Error::invalid("empty trial list"));
    }
    let missing: Vec<String> = trial_ids(trials)
        .into_iter()
        .filter(|id| embeddings.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingUtterances(missing));
    }
    par::map_slice(trials, |t| {
        let score = cosine_score(
            embeddings.get(&t.enroll).expect("checked"),
            embeddings.get(&t.test).expect("checked"),
        )?;
        Ok(ScoredTrial {
            trial: t.clone(),
            score,
        })
    })
    .into_iter()
    .collect()
}

pub fn scores_to_text(scores: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for st in scores {
        let _ = writeln!(s, "{} {} {:.9}", st.trial.enroll, st.trial.test, st.score);
    }
    s
}

/// Reads a score file, taking labels from the matching trial lines.
pub fn parse_scores(text: &str, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            what: "score file",
            line: i + 1,
            reason,
        };
        if cols.len() != 3 {
            return Err(bad(format!("expected <enroll> <test> <score>, got {line:?}")));
        }
        let score: f64 = cols[2].parse().map_err(|_| bad(format!("bad score {:?}", cols[2])))?;
        let trial = trials
            .get(out.len())
            .filter(|t| t.enroll == cols[0] && t.test == cols[1])
            .ok_or_else(|| bad(format!("{} {} does not match trial {}", cols[0], cols[1], out.len() + 1)))?;
        out.push(ScoredTrial {
            trial: trial.clone(),
            score,
        });
    }
    if out.len() != trials.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} trials",
            out.len(),
            trials.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub eer: f64,
    pub min_dcf: f64,
    pub num_trials: usize,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub dcf: DcfConfig,
}

impl Report {
    pub fn from_scores(scores: &[ScoredTrial], dcf: &DcfConfig) -> Result<Self> {
        let (t, n): (Vec<&ScoredTrial>, Vec<&ScoredTrial>) = scores.iter().partition(|s| s.trial.target);
        let t: Vec<f64> = t.iter().map(|s| s.score).collect();
        let n: Vec<f64> = n.iter().map(|s| s.score).collect();
        Ok(Report {
            eer: compute_eer(&t, &n)?,
            min_dcf: compute_min_dcf(&t, &n, dcf)?,
            num_trials: scores.len(),
            num_target: t.len(),
            num_nontarget: n.len(),
            dcf: *dcf,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "EER {:.4}% minDCF {:.4} over {} trials ({} target, {} nontarget)",
            100.0 * self.eer,
            self.min_dcf,
            self.num_trials,
            self.num_target,
            self.num_nontarget
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "eer = {:.12}\nmin_dcf = {:.12}\nnum_trials = {}\nnum_target = {}\nnum_nontarget = {}\nc_fa = {}\nc_m = {}\np_t = {}\n",
            self.eer,
            self.min_dcf,
            self.num_trials,
            self.num_target,
            self.num_nontarget,
            self.dcf.c_fa,
            self.dcf.c_m,
            self.dcf.p_t
        )
    }
}

pub fn evaluate(trials: &[Trial], embeddings: &EmbeddingSet, dcf: &DcfConfig) -> Result<(Vec<ScoredTrial>, Report)> {
    let scores = score_trials(trials, embeddings)?;
    let report = Report::from_scores(&scores, dcf)?;
    Ok((scores, report))
}

/// Embeds the listed utterances once each, in the given order.
pub fn extract_embeddings(
    model: &SpeakerModel,
    fx: &FeatureExtractor,
    manifest: &Manifest,
    ids: &[String],
) -> Result<EmbeddingSet> {
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| manifest.find(id).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingUtterances(missing));
    }
    let items = par::map_slice(ids, |id| {
        let entry = manifest.find(id).expect("checked");
        let audio = read_wav_checked(&entry.path, fx.config())?;
        model.extract_embedding(fx, &audio, fx.config().sample_rate, id)
    });
    EmbeddingSet::new(items.into_iter().collect::<Result<_>>()?)
}

/// Scores a trial list straight from audio: each referenced utterance is
/// embedded once.
pub fn evaluate_model(
    model: &SpeakerModel,
    fx: &FeatureExtractor,
    manifest: &Manifest,
    trials: &[Trial],
    dcf: &DcfConfig,
) -> Result<(EmbeddingSet, Vec<ScoredTrial>, Report)> {
    if trials.is_empty() {
        return Err(Error::invalid("empty trial list"));
    }
    let emb = extract_embeddings(model, fx, manifest, &trial_ids(trials))?;
    let (scores, report) = evaluate(trials, &emb, dcf)?;
    Ok((emb, scores, report))
}
