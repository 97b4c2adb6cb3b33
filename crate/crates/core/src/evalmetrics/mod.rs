//! Embedding-space evaluation metrics and their report format.
//!
//! Every embedding metric here is computed with the in-repo recognizer as the
//! evaluator, so absolute values are only comparable within this project.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::dataset::Bands;
use crate::recognizer::{cosine, dot};
use crate::{Error, Result};
use diffcore::Rng;

pub mod plot;

/// Header written at the top of every report file.
pub const REPORT_HEADER: &str = "# embedding metrics use the in-repo recognizer as evaluator; \
absolute values are not comparable with externally evaluated numbers";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// 95% half-width, present when `runs ≥ 2`.
    pub ci: Option<f64>,
    pub runs: usize,
}

impl MetricReport {
    pub fn single(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            ci: None,
            runs: 1,
        }
    }

    /// Mean over repeated runs with half-width `1.96·s/√R`.
    pub fn from_runs(name: impl Into<String>, values: &[f64]) -> Result<Self> {
        let (value, ci) = mean_ci(values)?;
        Ok(Self {
            name: name.into(),
            value,
            ci,
            runs: values.len(),
        })
    }

    pub fn line(&self) -> String {
        let ci = self.ci.map_or_else(|| "na".to_string(), |h| format!("{h:.6}"));
        format!("metric={} value={:.6} ci={ci} runs={}", self.name, self.value, self.runs)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = [None; 4];
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::format(format!("bad report field `{part}`")))?;
            let slot = ["metric", "value", "ci", "runs"]
                .iter()
                .position(|&n| n == k)
                .ok_or_else(|| Error::format(format!("unknown report key `{k}`")))?;
            fields[slot] = Some(v);
        }
        let get = |i: usize| fields[i].ok_or_else(|| Error::format(format!("report line lacks a field: {line}")));
        let bad = |_| Error::format(format!("bad number in report line: {line}"));
        let ci = get(2)?;
        Ok(Self {
            name: get(0)?.to_string(),
            value: get(1)?.parse().map_err(bad)?,
            ci: if ci == "na" { None } else { Some(ci.parse().map_err(bad)?) },
            runs: get(3)?.parse().map_err(|_| Error::format(format!("bad run count in: {line}")))?,
        })
    }
}

/// Report file text: header, then one line per metric.
pub fn report_text(reports: &[MetricReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        s.push_str(&r.line());
        s.push('\n');
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<MetricReport>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(MetricReport::parse_line)
        .collect()
}

pub fn mean_ci(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::invalid("no runs to summarize"));
    }
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok((mean, Some(1.96 * var.sqrt() / r.sqrt())))
}

fn check_paired<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} motion embeddings but {} text embeddings", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("no embeddings"));
    }
    Ok(())
}

/// Top-k retrieval rates within shuffled batches of `batch` pairs (remainder
/// dropped), one value per entry of `ks`.
pub fn r_precision<V: AsRef<[f32]>>(
    motion: &[V],
    text: &[V],
    batch: usize,
    ks: &[usize],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_paired(motion, text)?;
    if batch == 0 || motion.len() < batch {
        return Err(Error::invalid(format!("R-precision needs at least {batch} pairs, got {}", motion.len())));
    }
    let mut order: Vec<usize> = (0..motion.len()).collect();
    rng.shuffle(&mut order);
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    for chunk in order.chunks_exact(batch) {
        for &i in chunk {
            let s = cosine(motion[i].as_ref(), text[i].as_ref());
            let rank = 1 + chunk.iter().filter(|&&j| cosine(motion[i].as_ref(), text[j].as_ref()) > s).count();
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += usize::from(rank <= k);
            }
            total += 1;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / total as f64).collect())
}

/// Mean and covariance of an embedding population.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// Unbiased covariance; `1e-6·I` is added when there are no more samples
    /// than dimensions.
    pub fn fit<V: AsRef<[f32]>>(embs: &[V]) -> Result<Self> {
        let n = embs.len();
        let d = embs.first().map_or(0, |e| e.as_ref().len());
        if n < 2 || d == 0 {
            return Err(Error::invalid("a Gaussian fit needs at least two non-empty embeddings"));
        }
        if embs.iter().any(|e| e.as_ref().len() != d) {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| embs[i].as_ref()[j] as f64);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        if n <= d {
            cov += DMatrix::identity(d, d) * 1e-6;
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let r1 = psd_sqrt(&a.cov);
    let m = &r1 * &b.cov * &r1;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn fid<V: AsRef<[f32]>>(real: &[V], generated: &[V]) -> Result<f64> {
    frechet_distance(&GaussianSummary::fit(real)?, &GaussianSummary::fit(generated)?)
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn mm_dist<V: AsRef<[f32]>>(motion: &[V], text: &[V]) -> Result<f64> {
    check_paired(motion, text)?;
    Ok(motion.iter().zip(text).map(|(m, t)| euclidean(m.as_ref(), t.as_ref())).sum::<f64>() / motion.len() as f64)
}

/// Mean over prompts of the mean pairwise distance among that prompt's
/// generations.
pub fn m_modality<V: AsRef<[f32]>>(per_prompt: &[Vec<V>]) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let mut total = 0.0;
    for (p, group) in per_prompt.iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::invalid(format!("prompt {p} has {} generations; at least 2 are needed", group.len())));
        }
        let (mut sum, mut pairs) = (0.0, 0usize);
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                sum += euclidean(group[i].as_ref(), group[j].as_ref());
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

/// Mean paired dot product of unit embeddings.
pub fn clip_score<V: AsRef<[f32]>>(motion: &[V], text: &[V]) -> Result<f64> {
    check_paired(motion, text)?;
    Ok(motion.iter().zip(text).map(|(m, t)| dot(m.as_ref(), t.as_ref())).sum::<f64>() / motion.len() as f64)
}

/// Top-1 accuracy in percent, overall and per frequency band. A band is
/// `None` when no sample's labels fall in it.
#[derive(Clone, Debug, PartialEq)]
pub struct BandAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl BandAccuracy {
    pub fn reports(&self, prefix: &str) -> Vec<MetricReport> {
        let mut out = vec![MetricReport::single(format!("{prefix}overall"), self.overall)];
        for (name, v) in [("many", self.many), ("medium", self.medium), ("few", self.few)] {
            if let Some(v) = v {
                out.push(MetricReport::single(format!("{prefix}{name}"), v));
            }
        }
        out
    }
}

pub fn recognition_accuracy(predictions: &[usize], labels: &[Vec<usize>], bands: &Bands) -> Result<BandAccuracy> {
    check_paired(predictions, labels)?;
    let classes = bands.head.len() + bands.medium.len() + bands.tail.len();
    for (&p, ls) in predictions.iter().zip(labels) {
        if p >= classes || ls.iter().any(|&l| l >= classes) {
            return Err(Error::invalid(format!("class id outside the {classes} known classes")));
        }
    }
    let correct: Vec<bool> = predictions.iter().zip(labels).map(|(p, ls)| ls.contains(p)).collect();
    let rate = |pick: &dyn Fn(&[usize]) -> bool| {
        let (mut n, mut c) = (0usize, 0usize);
        for (ls, &ok) in labels.iter().zip(&correct) {
            if pick(ls) {
                n += 1;
                c += usize::from(ok);
            }
        }
        (n > 0).then(|| 100.0 * c as f64 / n as f64)
    };
    let band = |members: &[usize]| rate(&|ls: &[usize]| ls.iter().any(|l| members.contains(l)));
    Ok(BandAccuracy {
        overall: rate(&|_| true).expect("non-empty"),
        many: band(&bands.head),
        medium: band(&bands.medium),
        few: band(&bands.tail),
    })
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(wins as u64 - 1)
}

/// Paired comparison summary: wins, losses and ties of `a` over `b`.
pub fn paired_counts(a: &[f64], b: &[f64]) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => out.0 += 1,
            Some(std::cmp::Ordering::Less) => out.1 += 1,
            _ => out.2 += 1,
        }
    }
    out
}
