//! Deterministic synthetic articles.
//!
//! Words are built from syllables. Background text follows a Zipf law over a
//! few thousand words; each article also belongs to one of four topics and
//! draws a fraction of its tokens from that topic's own word list, which is
//! what makes the label learnable.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::classifier::LabeledExample;
use crate::error::Result;
use crate::ingest::{
    stage_article, ArticleDoc, Author, CordAffiliation, CordArticle, CordAuthor, CordMetadata, CordParagraph,
    DatasetSource, METADATA_COLUMNS,
};
use crate::store::{sha1_key, Store};

pub const TOPICS: [&str; 4] = ["population_spread", "vaccine", "ppe_effectiveness", "risk_factors"];
const BACKGROUND_WORDS: usize = 4000;
const TOPIC_WORDS: usize = 40;
const TOPIC_RATE: f64 = 0.2;
const MIN_TOKENS: usize = 200;
const MAX_TOKENS: usize = 2000;

const COUNTRIES: [(&str, u32); 8] = [
    ("United States", 30),
    ("China", 22),
    ("United Kingdom", 12),
    ("Italy", 9),
    ("Germany", 8),
    ("Australia", 7),
    ("India", 7),
    ("Brazil", 5),
];
const SOURCES: [&str; 4] = ["cord19", "pmc", "biorxiv", "medrxiv"];
const SYLLABLES: [&str; 24] = [
    "ba", "ke", "lo", "mi", "nu", "ra", "se", "ti", "vo", "za", "pe", "do", "gu", "ha", "ji", "ko", "la", "me", "no",
    "pu", "ri", "so", "ta", "ve",
];

/// Word lists shared by every generator instance.
pub struct Vocabulary {
    background: Vec<String>,
    topics: Vec<Vec<String>>,
}

fn word(mut i: usize, prefix: &str) -> String {
    let mut w = String::from(prefix);
    loop {
        w.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
        if i == 0 {
            break;
        }
        i -= 1;
    }
    w
}

impl Vocabulary {
    pub fn new() -> Vocabulary {
        Vocabulary {
            background: (0..BACKGROUND_WORDS).map(|i| word(i, "")).collect(),
            topics: (0..TOPICS.len())
                .map(|t| {
                    (0..TOPIC_WORDS)
                        .map(|i| word(i, &format!("{}x", SYLLABLES[t])))
                        .collect()
                })
                .collect(),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

pub struct CorpusGenerator {
    vocab: Vocabulary,
    zipf: Zipf<f64>,
    rng: ChaCha8Rng,
    seed: u64,
    next: u64,
}

impl CorpusGenerator {
    pub fn new(seed: u64) -> CorpusGenerator {
        CorpusGenerator {
            vocab: Vocabulary::new(),
            zipf: Zipf::new(BACKGROUND_WORDS as f64, 1.07).expect("valid zipf parameters"),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            next: 0,
        }
    }

    fn words(&mut self, topic: usize, count: usize, rate: f64) -> String {
        let mut out = String::with_capacity(count * 7);
        for i in 0..count {
            if i > 0 {
                out.push(if self.rng.random_bool(0.08) { '.' } else { ' ' });
                if out.ends_with('.') {
                    out.push(' ');
                }
            }
            let w = if self.rng.random_bool(rate) {
                self.vocab.topics[topic].choose(&mut self.rng).expect("non-empty")
            } else {
                let r = self.zipf.sample(&mut self.rng) as usize;
                &self.vocab.background[r.clamp(1, BACKGROUND_WORDS) - 1]
            };
            out.push_str(w);
        }
        out
    }

    /// Next article and its topic label.
    pub fn article(&mut self) -> (ArticleDoc, &'static str) {
        let id = self.next;
        self.next += 1;
        let topic = self.rng.random_range(0..TOPICS.len());
        let tokens = self.rng.random_range(MIN_TOKENS..=MAX_TOKENS);
        let title_len = self.rng.random_range(6..=12);
        let abstract_len = (tokens / 8).min(150);
        let body_len = tokens - title_len - abstract_len;
        let title = self.words(topic, title_len, 2.0 * TOPIC_RATE);
        let abstract_text = self.words(topic, abstract_len, TOPIC_RATE);
        let body_text = self.words(topic, body_len, TOPIC_RATE);

        let total: u32 = COUNTRIES.iter().map(|(_, w)| w).sum();
        let authors = (0..self.rng.random_range(1..=4))
            .map(|a| {
                let mut pick = self.rng.random_range(0..total);
                let country = COUNTRIES
                    .iter()
                    .find(|(_, w)| {
                        if pick < *w {
                            true
                        } else {
                            pick -= w;
                            false
                        }
                    })
                    .map(|(c, _)| (*c).to_owned());
                Author {
                    name: format!("Author {id}-{a}"),
                    country,
                }
            })
            .collect();
        let day = self.rng.random_range(0..365);
        let doc = ArticleDoc {
            sha: sha1_key(format!("litmine-synthetic:{}:{id}", self.seed).as_bytes()),
            title,
            abstract_text,
            body_text,
            authors,
            publish_time: NaiveDate::from_ymd_opt(2020, 1, 1).map(|d| d + chrono::Days::new(day)),
            source: SOURCES[self.rng.random_range(0..SOURCES.len())].to_owned(),
        };
        (doc, TOPICS[topic])
    }
}

/// `n` articles for `seed`.
pub fn gen_articles(n: usize, seed: u64) -> Vec<(ArticleDoc, &'static str)> {
    let mut g = CorpusGenerator::new(seed);
    (0..n).map(|_| g.article()).collect()
}

/// Stages `n` synthetic articles and returns their staging keys in
/// generation order.
pub fn gen_corpus(store: &Store, n: usize, seed: u64) -> Result<Vec<String>> {
    let mut g = CorpusGenerator::new(seed);
    let mut keys = Vec::with_capacity(n);
    for _ in 0..n {
        let (doc, _) = g.article();
        keys.push(stage_article(store, &doc)?.object.key);
    }
    Ok(keys)
}

/// Writes `n` synthetic articles as a dataset under `dir`: `metadata.csv`
/// plus one CORD-style `articles/<sha>.json` per article. A larger `n` with
/// the same seed extends the same dataset.
pub fn write_dataset(dir: &Path, n: usize, seed: u64) -> Result<DatasetSource> {
    let articles = dir.join("articles");
    fs::create_dir_all(&articles)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(METADATA_COLUMNS).map_err(std::io::Error::from)?;
    let mut g = CorpusGenerator::new(seed);
    for i in 0..n {
        let (doc, _) = g.article();
        let cord = CordArticle {
            paper_id: format!("syn-{seed}-{i}"),
            metadata: CordMetadata {
                title: doc.title.clone(),
                authors: doc
                    .authors
                    .iter()
                    .map(|a| {
                        let (first, last) = a.name.split_once(' ').unwrap_or((&a.name, ""));
                        CordAuthor {
                            first: first.to_owned(),
                            last: last.to_owned(),
                            affiliation: CordAffiliation {
                                country: a.country.clone(),
                            },
                        }
                    })
                    .collect(),
            },
            abstract_paragraphs: vec![CordParagraph {
                text: doc.abstract_text.clone(),
            }],
            body_text: doc
                .body_text
                .split(". ")
                .map(|p| CordParagraph { text: p.to_owned() })
                .collect(),
        };
        let bytes = serde_json::to_vec(&cord)?;
        let sha = sha1_key(&bytes);
        fs::write(articles.join(format!("{sha}.json")), &bytes)?;
        let authors: Vec<&str> = doc.authors.iter().map(|a| a.name.as_str()).collect();
        csv.write_record([
            cord.paper_id.as_str(),
            sha.as_str(),
            doc.title.as_str(),
            "",
            &doc.publish_time.map(|d| d.to_string()).unwrap_or_default(),
            &authors.join("; "),
            doc.source.as_str(),
        ])
        .map_err(std::io::Error::from)?;
    }
    let metadata = dir.join("metadata.csv");
    fs::write(&metadata, csv.into_inner().map_err(|e| e.into_error())?)?;
    Ok(DatasetSource::local(&metadata, &articles))
}

/// Labeled training text drawn from the same distribution as the corpus.
pub fn training_examples(n: usize, seed: u64) -> Vec<LabeledExample> {
    gen_articles(n, seed)
        .into_iter()
        .map(|(doc, label)| LabeledExample {
            text: format!("{} {} {}", doc.title, doc.abstract_text, doc.body_text),
            label: label.to_owned(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::BucketId;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_articles(20, 7);
        let b = gen_articles(20, 7);
        assert_eq!(a, b);
        assert_ne!(a, gen_articles(20, 8));
        for (doc, _) in &a {
            doc.validate().unwrap();
            let n = doc.title.split_whitespace().count()
                + doc.abstract_text.split_whitespace().count()
                + doc.body_text.split_whitespace().count();
            assert!((MIN_TOKENS..=MAX_TOKENS).contains(&n), "{n} tokens");
            assert!(!doc.countries().is_empty());
        }
    }

    #[test]
    fn topic_words_are_disjoint_from_background() {
        let v = Vocabulary::new();
        for t in &v.topics {
            for w in t {
                assert!(!v.background.contains(w));
            }
        }
        let mut all: Vec<&String> = v.topics.iter().flatten().chain(&v.background).collect();
        let len = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), len);
    }

    #[test]
    fn written_datasets_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let source = write_dataset(dir.path(), 12, 3).unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        let report = crate::ingest::ingest_dataset(&store, &source).unwrap();
        assert_eq!((report.seen, report.new, report.rejected), (12, 12, 0), "{report:?}");
        let source = write_dataset(dir.path(), 15, 3).unwrap();
        let report = crate::ingest::ingest_dataset(&store, &source).unwrap();
        assert_eq!((report.new, report.skipped_existing), (3, 12));
    }

    #[test]
    fn staging_key_sets_match_across_stores() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = Store::open(a.path()).unwrap();
        let sb = Store::open(b.path()).unwrap();
        gen_corpus(&sa, 30, 7).unwrap();
        gen_corpus(&sb, 30, 7).unwrap();
        assert_eq!(
            sa.list_all(BucketId::Staging).unwrap(),
            sb.list_all(BucketId::Staging).unwrap()
        );
        let one = tempfile::tempdir().unwrap();
        let s1 = Store::open(one.path()).unwrap();
        gen_corpus(&s1, 1, 7).unwrap();
        assert_eq!(s1.count(BucketId::Staging).unwrap(), 1);
    }
}
