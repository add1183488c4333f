//! Identification accuracy, template enrollment, cosine verification and EER.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{DatasetSplit, TokenizedSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::Network;

const EVAL_BATCH: usize = 32;

/// Exact-match fraction.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy over no predictions".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pooled embeddings and logits for every sample, in order, without dropout.
pub fn infer<S: Scalar, N: Network<S>>(net: &N, samples: &[&TokenizedSequence]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut pooled = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let (p, l) = net.forward_batch(&mut tape, chunk, None)?;
        for (var, out) in [(p, &mut pooled), (l, &mut logits)] {
            let width = tape.shape(var)[1];
            out.extend(tape.value(var).chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
        }
    }
    Ok((pooled, logits))
}

pub fn predict<S: Scalar, N: Network<S>>(net: &N, samples: &[&TokenizedSequence]) -> Result<Vec<usize>> {
    let (_, logits) = infer(net, samples)?;
    Ok(logits.iter().map(|r| argmax(r)).collect())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTemplate {
    pub user_id: String,
    /// Unit-norm mean of the enrollment embeddings.
    pub centroid: Vec<f64>,
    pub enrollment_count: usize,
}

/// Template from precomputed embeddings.
pub fn enroll_embeddings(user_id: &str, embeddings: &[Vec<f64>]) -> Result<UserTemplate> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Empty(format!("enrollment set of `{user_id}`")))?;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != mean.len() {
            return Err(Error::shape("enroll", &[mean.len()], &[e.len()]));
        }
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(UserTemplate {
        user_id: user_id.to_string(),
        centroid: normalized(&mean)?,
        enrollment_count: embeddings.len(),
    })
}

pub fn enroll<S: Scalar, N: Network<S>>(net: &N, user_id: &str, samples: &[&TokenizedSequence]) -> Result<UserTemplate> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("enrollment set of `{user_id}`")));
    }
    let (pooled, _) = infer(net, samples)?;
    enroll_embeddings(user_id, &pooled)
}

pub fn verify<S: Scalar, N: Network<S>>(net: &N, sample: &TokenizedSequence, template: &UserTemplate) -> Result<f64> {
    let (pooled, _) = infer(net, &[sample])?;
    cosine(&pooled[0], &template.centroid)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Equal error rate and its threshold.
///
/// Candidate thresholds are every distinct score, the midpoints between
/// neighbours, and one value below and above the range. A sample is accepted
/// when its score is `>= t`. The chosen threshold minimises `|FAR - FRR|`
/// (compared exactly on counts), ties going to the lower threshold, and the
/// EER is `(FAR + FRR) / 2` there.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let (ng, ni) = (scores.genuine.len(), scores.impostor.len());
    if ng == 0 || ni == 0 {
        return Err(Error::Empty("EER needs genuine and impostor scores".into()));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|s| s.is_nan()) {
        return Err(Error::Config("NaN similarity score".into()));
    }
    let mut gen = scores.genuine.clone();
    let mut imp = scores.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let mut candidates = Vec::with_capacity(2 * distinct.len() + 1);
    candidates.push(distinct[0] - 1.0);
    for (i, &s) in distinct.iter().enumerate() {
        if i > 0 {
            candidates.push(distinct[i - 1] + (s - distinct[i - 1]) / 2.0);
        }
        candidates.push(s);
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);

    // counts below t via a moving pointer over the sorted lists
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut best: Option<(u128, usize, usize, f64)> = None;
    for &t in &candidates {
        while gi < ng && gen[gi] < t {
            gi += 1;
        }
        while ii < ni && imp[ii] < t {
            ii += 1;
        }
        let false_rejects = gi;
        let false_accepts = ni - ii;
        // |FA/ni - FR/ng| scaled by ni*ng
        let diff = (false_accepts as i128 * ng as i128 - false_rejects as i128 * ni as i128).unsigned_abs();
        if best.is_none_or(|(d, ..)| diff < d) {
            best = Some((diff, false_accepts, false_rejects, t));
        }
    }
    let (_, fa, fr, t) = best.expect("candidates are never empty");
    let far = fa as f64 / ni as f64;
    let frr = fr as f64 / ng as f64;
    Ok(((far + frr) / 2.0, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthProtocol {
    pub version: String,
    pub score: String,
    pub enrollment: String,
    pub pooling: String,
}

impl Default for AuthProtocol {
    fn default() -> Self {
        Self {
            version: "1".into(),
            score: "cosine(pooled embedding, unit-mean train template)".into(),
            enrollment: "all train-split samples of the user".into(),
            pooling: "global over all test samples and all templates".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserBreakdown {
    pub test_samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_genuine_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub num_genuine: usize,
    pub num_impostor: usize,
    pub per_user: BTreeMap<String, UserBreakdown>,
    /// `confusion[true][pred]` over roster indices.
    pub confusion: Vec<Vec<usize>>,
    pub protocol: AuthProtocol,
}

/// Scores every test embedding against every template: own user genuine,
/// others impostor.
pub fn score_all(templates: &[UserTemplate], test: &[(usize, Vec<f64>)]) -> Result<ScoreSet> {
    let mut s = ScoreSet::default();
    for (label, emb) in test {
        for (u, t) in templates.iter().enumerate() {
            let c = cosine(emb, &t.centroid)?;
            if u == *label {
                s.genuine.push(c);
            } else {
                s.impostor.push(c);
            }
        }
    }
    Ok(s)
}

/// Identification plus authentication from precomputed embeddings and predictions.
pub fn report_from_outputs(
    split: &DatasetSplit,
    train_emb: &[Vec<f64>],
    test_emb: &[Vec<f64>],
    test_preds: &[usize],
) -> Result<EvalReport> {
    if split.test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let test_labels = split.test_labels();
    let acc = accuracy(test_preds, &test_labels)?;
    let train_labels = split.train_labels();
    let mut templates = Vec::with_capacity(split.num_users());
    for (u, user) in split.roster.iter().enumerate() {
        let own: Vec<Vec<f64>> = train_labels
            .iter()
            .zip(train_emb)
            .filter(|(l, _)| **l == u)
            .map(|(_, e)| e.clone())
            .collect();
        if own.is_empty() {
            return Err(Error::MissingUser(user.clone()));
        }
        templates.push(enroll_embeddings(user, &own)?);
    }
    let labelled: Vec<(usize, Vec<f64>)> = test_labels.iter().copied().zip(test_emb.iter().cloned()).collect();
    let scores = score_all(&templates, &labelled)?;
    let (eer, eer_threshold) = if split.num_users() > 1 {
        compute_eer(&scores)?
    } else {
        (0.0, f64::NAN)
    };

    let k = split.num_users();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in test_labels.iter().zip(test_preds) {
        confusion[t][p] += 1;
    }
    let mut per_user = BTreeMap::new();
    for (u, user) in split.roster.iter().enumerate() {
        let n: usize = confusion[u].iter().sum();
        if n == 0 {
            continue;
        }
        let own: Vec<f64> = labelled
            .iter()
            .filter(|(l, _)| *l == u)
            .map(|(_, e)| cosine(e, &templates[u].centroid))
            .collect::<Result<_>>()?;
        per_user.insert(
            user.clone(),
            UserBreakdown {
                test_samples: n,
                correct: confusion[u][u],
                accuracy: confusion[u][u] as f64 / n as f64,
                mean_genuine_score: own.iter().sum::<f64>() / own.len() as f64,
            },
        );
    }
    Ok(EvalReport {
        accuracy: acc,
        eer,
        eer_threshold,
        num_genuine: scores.genuine.len(),
        num_impostor: scores.impostor.len(),
        per_user,
        confusion,
        protocol: AuthProtocol::default(),
    })
}

/// Test accuracy, and EER with train-split enrollment.
pub fn evaluate<S: Scalar, N: Network<S>>(net: &N, split: &DatasetSplit) -> Result<EvalReport> {
    let train: Vec<&TokenizedSequence> = split.train.iter().collect();
    let test: Vec<&TokenizedSequence> = split.test.iter().collect();
    if test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let (train_emb, _) = infer(net, &train)?;
    let (test_emb, test_logits) = infer(net, &test)?;
    let preds: Vec<usize> = test_logits.iter().map(|r| argmax(r)).collect();
    report_from_outputs(split, &train_emb, &test_emb, &preds)
}

/// CSV of `user_id,e0,e1,...`, one row per sample.
pub fn export_embeddings<S: Scalar, N: Network<S>>(net: &N, samples: &[&TokenizedSequence], path: &Path) -> Result<usize> {
    let (pooled, _) = infer(net, samples)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = pooled.first().map_or(0, Vec::len);
    let mut header = vec!["user_id".to_string()];
    header.extend((0..width).map(|i| format!("e{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (s, e) in samples.iter().zip(&pooled) {
        let cells: Vec<String> = e.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{},{}", csv_field(&s.user_id), cells.join(","))?;
    }
    out.flush()?;
    Ok(pooled.len())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
