//! Generated corpora with planted relevance.
//!
//! Every topic has a keyword and a small set of topic words. A query is its
//! topic's keyword plus some topic words. Documents come in three kinds:
//!
//! - relevant: the keyword, a few topic words, general filler;
//! - distractor: topic words repeated many times, general filler, no keyword;
//! - background: general filler only.
//!
//! A document is relevant to a query exactly when it contains the query's
//! keyword. Distractors share more query terms than relevant documents do,
//! so lexical scoring tends to rank them first.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::data::{Document, DocumentStore, Qrels, Query, QueryStore};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng, SeedStream};

const KEYWORDS: &[&str] = &[
    "glacier", "violin", "falcon", "copper", "orchid", "tundra", "lantern", "saffron", "quartz", "harbor",
    "meteor", "cactus", "walrus", "pepper", "canyon", "marble", "thistle", "beacon", "coral", "nebula",
    "juniper", "piston", "lagoon", "ember", "sequoia", "trumpet", "basalt", "otter", "comet", "willow",
];

const FILLERS: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "for", "on", "with", "as", "by", "at", "from", "this", "that", "it",
    "are", "was", "be", "or", "an", "which", "new", "more", "about", "other", "many", "some", "time", "year",
    "people", "way", "day", "part", "place", "case", "group", "number", "world", "area", "state", "work",
    "system", "program", "question", "point", "home", "water", "room", "fact",
];

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ne", "pu", "ro", "si", "tu", "va", "ze"];

/// Distinct three-syllable pseudo-word for `i < 1000`.
fn pseudo_word(i: usize) -> String {
    [i % 10, (i / 10) % 10, (i / 100) % 10]
        .iter()
        .map(|&s| SYLLABLES[s])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_topics: usize,
    pub queries_per_topic: usize,
    pub relevant_per_topic: usize,
    pub distractors_per_topic: usize,
    pub background_docs: usize,
    pub topic_words: usize,
    pub doc_len: usize,
    pub keyword_mentions: usize,
    /// Topic-word occurrences in a relevant document.
    pub relevant_topic_mentions: usize,
    /// Topic-word occurrences in a distractor.
    pub distractor_topic_mentions: usize,
    pub query_topic_words: usize,
    /// Held-out queries, taken as the last query of each of the first
    /// topics; every held-out topic keeps at least one training query.
    pub held_out: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_topics: 20,
            queries_per_topic: 2,
            relevant_per_topic: 4,
            distractors_per_topic: 3,
            background_docs: 60,
            topic_words: 4,
            doc_len: 24,
            keyword_mentions: 2,
            relevant_topic_mentions: 3,
            distractor_topic_mentions: 8,
            query_topic_words: 3,
            held_out: 10,
        }
    }
}

impl SyntheticConfig {
    pub fn num_docs(&self) -> usize {
        self.num_topics * (self.relevant_per_topic + self.distractors_per_topic) + self.background_docs
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_topics == 0 || self.num_topics > KEYWORDS.len() {
            return Err(Error::Config(format!("num_topics must be in 1..={}", KEYWORDS.len())));
        }
        if self.num_topics * self.topic_words > 1000 {
            return fail("too many topic words");
        }
        if self.held_out > self.num_topics || (self.held_out > 0 && self.queries_per_topic < 2) {
            return fail("held-out queries need at most one per topic and two queries per topic");
        }
        if self.topic_words == 0 || self.query_topic_words > self.topic_words {
            return fail("query_topic_words must not exceed topic_words");
        }
        if self.keyword_mentions == 0
            || self.keyword_mentions + self.relevant_topic_mentions > self.doc_len
            || self.distractor_topic_mentions > self.doc_len
        {
            return fail("planted mentions must fit in doc_len");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub docs: DocumentStore,
    pub queries: QueryStore,
    pub qrels: Qrels,
    pub train_queries: Vec<String>,
    pub held_out_queries: Vec<String>,
}

impl SyntheticCorpus {
    pub fn query_subset(&self, ids: &[String]) -> QueryStore {
        ids.iter().filter_map(|q| self.queries.get(q).cloned()).collect()
    }
}

fn fillers(n: usize, rng: &mut Rng) -> Vec<String> {
    (0..n).map(|_| FILLERS.choose(rng).expect("non-empty").to_string()).collect()
}

fn scatter(words: &mut Vec<String>, planted: impl IntoIterator<Item = String>, rng: &mut Rng) {
    for w in planted {
        let at = rng.random_range(0..=words.len());
        words.insert(at, w);
    }
}

pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = SeedStream::new(seed).derive(Purpose::Synthetic, 0);
    let vocab: Vec<Vec<String>> = (0..config.num_topics)
        .map(|t| (0..config.topic_words).map(|i| pseudo_word(t * config.topic_words + i)).collect())
        .collect();
    let topic_draws = |t: usize, n: usize, rng: &mut Rng| -> Vec<String> {
        (0..n).map(|_| vocab[t].choose(rng).expect("non-empty").clone()).collect()
    };

    let mut bodies: Vec<(Vec<String>, Option<usize>)> = Vec::with_capacity(config.num_docs());
    for t in 0..config.num_topics {
        for _ in 0..config.relevant_per_topic {
            let planted = config.keyword_mentions + config.relevant_topic_mentions;
            let mut words = fillers(config.doc_len - planted, &mut rng);
            let topical = topic_draws(t, config.relevant_topic_mentions, &mut rng);
            let keyword = std::iter::repeat_n(KEYWORDS[t].to_string(), config.keyword_mentions);
            scatter(&mut words, keyword.chain(topical), &mut rng);
            bodies.push((words, Some(t)));
        }
        for _ in 0..config.distractors_per_topic {
            let mut words = fillers(config.doc_len - config.distractor_topic_mentions, &mut rng);
            let topical = topic_draws(t, config.distractor_topic_mentions, &mut rng);
            scatter(&mut words, topical, &mut rng);
            bodies.push((words, None));
        }
    }
    for _ in 0..config.background_docs {
        bodies.push((fillers(config.doc_len, &mut rng), None));
    }
    bodies.shuffle(&mut rng);

    let mut docs = DocumentStore::new();
    let mut topic_docs = vec![Vec::new(); config.num_topics];
    for (i, (words, topic)) in bodies.into_iter().enumerate() {
        let doc_id = format!("D{i:04}");
        if let Some(t) = topic {
            topic_docs[t].push(doc_id.clone());
        }
        docs.insert(Document {
            doc_id,
            url: format!("http://synthetic.example/{i}"),
            title: String::new(),
            body: words.join(" "),
        })?;
    }

    let mut queries = QueryStore::new();
    let mut qrels = Qrels::new();
    let mut train_queries = Vec::new();
    let mut held_out_queries = Vec::new();
    for t in 0..config.num_topics {
        for k in 0..config.queries_per_topic {
            let query_id = format!("Q{t:02}{k}");
            let mut words: Vec<String> = vocab[t]
                .choose_multiple(&mut rng, config.query_topic_words)
                .cloned()
                .collect();
            scatter(&mut words, [KEYWORDS[t].to_string()], &mut rng);
            queries.insert(Query {
                query_id: query_id.clone(),
                text: words.join(" "),
            })?;
            for d in &topic_docs[t] {
                qrels.insert(&query_id, d, 1);
            }
            if t < config.held_out && k == config.queries_per_topic - 1 {
                held_out_queries.push(query_id);
            } else {
                train_queries.push(query_id);
            }
        }
    }
    Ok(SyntheticCorpus {
        docs,
        queries,
        qrels,
        train_queries,
        held_out_queries,
    })
}
