//! Action classes from clustered phrases, and head/medium/tail frequency bands.

use super::extract::{embed_phrase, extract_action_phrases};
use super::kmeans::balanced_kmeans;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub canonical: String,
    pub members: Vec<String>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Bands {
    pub head: Vec<usize>,
    pub medium: Vec<usize>,
    pub tail: Vec<usize>,
}

impl Bands {
    pub fn of(counts: &[usize]) -> Self {
        let c = counts.len();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let head = ((c as f64 * 0.1).round() as usize).clamp(usize::from(c > 0), c);
        let medium = ((c as f64 * 0.4).round() as usize).clamp(head, c) - head;
        let mut bands = Self {
            head: order[..head].to_vec(),
            medium: order[head..head + medium].to_vec(),
            tail: order[head + medium..].to_vec(),
        };
        for b in [&mut bands.head, &mut bands.medium, &mut bands.tail] {
            b.sort();
        }
        bands
    }

    pub fn named(&self) -> [(&'static str, &[usize]); 3] {
        [("many", &self.head), ("medium", &self.medium), ("few", &self.tail)]
    }
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, phrase: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.members.iter().any(|m| m == phrase))
    }

    /// Sorted, de-duplicated class ids of the phrases found in `caption`.
    pub fn labels_for(&self, caption: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = extract_action_phrases(caption)
            .iter()
            .filter_map(|p| self.class_of(p))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(&format!("{i}\t{}\t{}\t{}\n", c.canonical, c.count, c.members.join("|")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(format!("class table line {}", i + 1));
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad());
            }
            classes.push(ClassEntry {
                canonical: f[1].to_string(),
                count: f[2].parse().map_err(|_| bad())?,
                members: f[3].split('|').map(str::to_string).collect(),
            });
        }
        Ok(Self { classes })
    }
}

/// Extracts phrases from every caption, clusters the distinct phrases into
/// `min(max_classes, distinct)` balanced groups and orders classes by
/// descending sample count.
pub fn build_class_table<S: AsRef<str>>(captions: &[S], max_classes: usize, seed: u64) -> Result<(ClassTable, Bands)> {
    if captions.is_empty() {
        return Err(Error::invalid("cannot build classes from an empty corpus"));
    }
    let per_caption: Vec<Vec<String>> = captions.iter().map(|c| extract_action_phrases(c.as_ref())).collect();
    let mut distinct: Vec<String> = per_caption.iter().flatten().cloned().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.is_empty() {
        return Err(Error::invalid("no action phrases found in any caption"));
    }
    let k = max_classes.min(distinct.len());
    let vectors: Vec<Vec<f64>> = distinct.iter().map(|p| embed_phrase(p)).collect();
    let clustering = balanced_kmeans(&vectors, k, 100, seed)?;

    let mut groups: Vec<ClassEntry> = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..distinct.len()).filter(|&i| clustering.assignments[i] == c).collect();
            let canonical = members
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da: f64 = sq(&vectors[a], &clustering.centroids[c]);
                    let db: f64 = sq(&vectors[b], &clustering.centroids[c]);
                    da.total_cmp(&db).then(distinct[a].cmp(&distinct[b]))
                })
                .expect("balanced clusters are non-empty");
            let names: Vec<String> = members.iter().map(|&i| distinct[i].clone()).collect();
            let count = per_caption
                .iter()
                .filter(|ps| ps.iter().any(|p| names.contains(p)))
                .count();
            ClassEntry {
                canonical: distinct[canonical].clone(),
                members: names,
                count,
            }
        })
        .collect();
    groups.sort_by(|a, b| b.count.cmp(&a.count).then(a.canonical.cmp(&b.canonical)));
    let table = ClassTable { classes: groups };
    let bands = Bands::of(&table.counts());
    Ok((table, bands))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_phrases_three_classes() {
        let caps = ["a person jumps", "someone waves then jumps", "a man squats"];
        let (t, bands) = build_class_table(&caps, 3, 0).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.classes.iter().all(|c| c.members.len() == 1));
        assert_eq!(t.classes[0].canonical, "jump");
        assert_eq!(t.classes[0].count, 2);
        assert_eq!(bands.head, vec![0]);
        assert_eq!(t.labels_for("someone waves then jumps").len(), 2);
    }

    #[test]
    fn band_sizes() {
        let b = Bands::of(&(0..10).rev().collect::<Vec<_>>());
        assert_eq!((b.head.len(), b.medium.len(), b.tail.len()), (1, 3, 6));
        assert_eq!(b.head, vec![0]);
        let b = Bands::of(&[5; 20]);
        assert_eq!(b.head, vec![0, 1]);
        assert_eq!(b.medium, (2..8).collect::<Vec<_>>());
        let b = Bands::of(&[3]);
        assert_eq!((b.head.len(), b.medium.len(), b.tail.len()), (1, 0, 0));
    }

    #[test]
    fn table_text_roundtrip() {
        let caps = ["a person walks forward, then turns", "someone turns"];
        let (t, _) = build_class_table(&caps, 32, 1).unwrap();
        assert_eq!(ClassTable::parse(&t.to_text()).unwrap(), t);
        assert!(ClassTable::parse("x\ty\n").is_err());
    }

    #[test]
    fn no_phrases_is_an_error() {
        assert!(build_class_table(&["nothing here"], 4, 0).is_err());
        assert!(build_class_table::<&str>(&[], 4, 0).is_err());
    }
}
