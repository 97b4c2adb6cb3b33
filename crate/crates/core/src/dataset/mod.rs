//! Synthetic motion-caption corpus and the annotation pipeline that turns
//! captions into multi-label action classes.

pub mod classes;
pub mod extract;
pub mod kmeans;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

pub use classes::{build_class_table, Bands, ClassEntry, ClassTable};
pub use extract::{embed_phrase, extract_action_phrases};
pub use kmeans::{balanced_kmeans, Clustering};
pub use synth::{Primitive, Sample, SynthConfig};

use crate::motion_repr::Motion;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const CLASS_TABLE: &str = "classes.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub motion: Motion,
    pub caption: String,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<Item>,
    pub classes: ClassTable,
    pub bands: Bands,
}

impl Corpus {
    /// Generates `n` samples and labels them through the extraction and
    /// clustering pipeline.
    pub fn synthesize(config: &SynthConfig, n: usize, seed: u64, max_classes: usize) -> Result<Self> {
        let samples = synth::generate(config, n, seed)?;
        let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
        let (classes, bands) = build_class_table(&captions, max_classes, seed)?;
        let items = samples
            .into_iter()
            .map(|s| Item {
                labels: classes.labels_for(&s.caption),
                id: s.id,
                motion: s.motion,
                caption: s.caption,
            })
            .collect();
        Ok(Self { items, classes, bands })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Every eighth sample (ids ≡ 7 mod 8) is held out.
    pub fn is_held_out(id: usize) -> bool {
        id % 8 == 7
    }

    pub fn train(&self) -> Vec<&Item> {
        self.items.iter().filter(|i| !Self::is_held_out(i.id)).collect()
    }

    pub fn held_out(&self) -> Vec<&Item> {
        self.items.iter().filter(|i| Self::is_held_out(i.id)).collect()
    }

    fn motion_path(id: usize) -> String {
        format!("motions/{id:06}.motion")
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            let labels: Vec<String> = it.labels.iter().map(usize::to_string).collect();
            writeln!(s, "{}\t{}\t{}\t{}", it.id, Self::motion_path(it.id), it.caption, labels.join(","))
                .expect("writing to a string");
        }
        s
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("motions"))?;
        for it in &self.items {
            it.motion.save(dir.join(Self::motion_path(it.id)))?;
        }
        std::fs::write(dir.join(MANIFEST), self.manifest_text())?;
        std::fs::write(dir.join(CLASS_TABLE), self.classes.to_text())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::format(format!("{}: {e}", dir.join(name).display())))
        };
        let classes = ClassTable::parse(&read(CLASS_TABLE)?)?;
        let mut items = Vec::new();
        for (n, line) in read(MANIFEST)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::format(format!("manifest line {}: {what}", n + 1));
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let labels = if f[3].is_empty() {
                Vec::new()
            } else {
                f[3].split(',')
                    .map(|v| v.parse::<usize>().map_err(|_| bad("label id")))
                    .collect::<Result<Vec<_>>>()?
            };
            if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
                return Err(bad(&format!("label {l} not in the class table")));
            }
            if f[2].is_empty() {
                return Err(bad("empty caption"));
            }
            items.push(Item {
                id: f[0].parse().map_err(|_| bad("id"))?,
                motion: Motion::load(dir.join(f[1]))?,
                caption: f[2].to_string(),
                labels,
            });
        }
        let bands = Bands::of(&classes.counts());
        Ok(Self { items, classes, bands })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_segments() {
        let cfg = SynthConfig::default();
        let samples = synth::generate(&cfg, 300, 4).unwrap();
        let corpus = Corpus::synthesize(&cfg, 300, 4, 32).unwrap();
        for (s, it) in samples.iter().zip(&corpus.items) {
            let mut want: Vec<usize> = s
                .segments
                .iter()
                .map(|p| corpus.classes.class_of(p.phrase()).expect("phrase has a class"))
                .collect();
            want.sort();
            want.dedup();
            assert_eq!(it.labels, want, "{}", it.caption);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = Corpus::synthesize(&SynthConfig::default(), 12, 5, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn held_out_fraction() {
        let corpus = Corpus::synthesize(&SynthConfig::default(), 80, 6, 32).unwrap();
        assert_eq!(corpus.held_out().len(), 10);
        assert_eq!(corpus.train().len(), 70);
    }
}
