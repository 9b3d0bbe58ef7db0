//! Templated synthetic corpora with known section structure.
//!
//! Each article is a Markov chain over section types; each sentence fills a
//! section template from lexicons that no other section uses, so the
//! sentence encoder separates sections.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actions::{ActionSequence, ActionSet};
use crate::corpus::Article;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::planner::PlannerArticle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionTemplate {
    pub name: String,
    /// Sentences with `{slot}` placeholders.
    pub templates: Vec<String>,
    pub lexicons: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateGrammar {
    pub sections: Vec<SectionTemplate>,
    pub initial: Vec<f64>,
    /// Row-stochastic section transition matrix.
    pub transitions: Vec<Vec<f64>>,
    pub seed: u64,
}

fn section(name: &str, templates: &[&str], lexicons: &[(&str, &[&str])]) -> SectionTemplate {
    SectionTemplate {
        name: name.to_string(),
        templates: templates.iter().map(|t| t.to_string()).collect(),
        lexicons: lexicons.iter().map(|(k, v)| (k.to_string(), v.iter().map(|w| w.to_string()).collect())).collect(),
    }
}

/// Six biography-style sections. Every template of a section contains the
/// section's two signature words, so sections dominate template identity in
/// n-gram space.
pub fn biography_sections() -> Vec<SectionTemplate> {
    vec![
        section(
            "origin",
            &[
                "He was born in {city} to a family of {trade}.",
                "He was born the {ordinal} child in a family of {trade}.",
                "In {city} he was born to a family of {trade}.",
                "He was born into a family of {trade} in {city}.",
            ],
            &[
                ("city", &["Lyon", "Porto", "Krakow", "Toledo", "Bergen", "Ghent", "Turin", "Leeds"]),
                ("trade", &["farmers", "weavers", "bakers", "tailors", "masons", "fishers", "millers", "potters"]),
                ("ordinal", &["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "youngest"]),
            ],
        ),
        section(
            "education",
            &[
                "He studied {subject} at the university.",
                "At the university of {ucity} he studied {subject}.",
                "He studied {subject} with {prof} at the university.",
                "At the university he studied {subject} and {subject}.",
            ],
            &[
                ("subject", &["chemistry", "physics", "geology", "botany", "algebra", "astronomy", "anatomy", "optics"]),
                ("ucity", &["Padua", "Leiden", "Uppsala", "Bologna", "Salamanca", "Heidelberg", "Coimbra", "Tartu"]),
                ("prof", &["Keller", "Moreau", "Novak", "Rossi", "Jansen", "Larsen", "Duval", "Brandt"]),
            ],
        ),
        section(
            "career",
            &[
                "His career began at the {company} company.",
                "His career at the {company} company made him a {role}.",
                "He spent his career as a {role} at the company.",
                "His career at the company ended after the {project}.",
            ],
            &[
                ("company", &["railway", "shipyard", "foundry", "brewery", "banking", "mining", "telegraph", "refinery"]),
                ("role", &["engineer", "manager", "director", "clerk", "inspector", "foreman", "treasurer", "surveyor"]),
                ("project", &["merger", "expansion", "tender", "contract", "venture", "launch", "takeover", "relocation"]),
            ],
        ),
        section(
            "awards",
            &[
                "He received the {award} medal for his research.",
                "His research on {topic} earned him a medal.",
                "The {society} gave him a medal for research on {topic}.",
                "He won the {award} medal for research on {topic}.",
            ],
            &[
                ("award", &["Copley", "Rumford", "Wollaston", "Lyell", "Davy", "Hughes", "Darwin", "Buchanan"]),
                ("topic", &["magnetism", "crystals", "glaciers", "fossils", "tides", "comets", "enzymes", "volcanoes"]),
                ("society", &["guild", "fellowship", "consortium", "syndicate", "federation", "lodge", "assembly", "chapter"]),
            ],
        ),
        section(
            "personal",
            &[
                "He married {spouse}, and they had {number} children.",
                "He married {spouse}; their {number} children loved {hobby}.",
                "After he married {spouse}, their children grew up near the {place}.",
                "He married {spouse} and raised {number} children near the {place}.",
            ],
            &[
                ("spouse", &["Anna", "Clara", "Elise", "Marta", "Sofia", "Helena", "Ingrid", "Lucia"]),
                ("number", &["two", "three", "four", "five", "six", "seven", "eight", "nine"]),
                ("hobby", &["chess", "sailing", "gardening", "fencing", "painting", "fishing", "hiking", "cycling"]),
                ("place", &["harbor", "river", "lake", "forest", "meadow", "castle", "bridge", "vineyard"]),
            ],
        ),
        section(
            "legacy",
            &[
                "He died in {deathplace}, and a {memorial} keeps his memory alive.",
                "He died at {deathage}; a {memorial} keeps his memory alive.",
                "When he died in {deathplace}, a {memorial} kept his memory alive.",
                "He died at {deathage} in {deathplace}, and his memory stays alive.",
            ],
            &[
                ("deathplace", &["Vienna", "Geneva", "Bruges", "Seville", "Dublin", "Munich", "Florence", "Oslo"]),
                ("deathage", &["seventy", "eighty", "ninety", "sixty", "fifty", "forty", "hundred", "thirty"]),
                ("memorial", &["museum", "library", "statue", "plaque", "foundation", "scholarship", "garden", "archive"]),
            ],
        ),
    ]
}

impl TemplateGrammar {
    /// Cycle through sections with probability `cycle_prob`; the remaining
    /// mass is spread uniformly over the other sections. Articles start in
    /// section 0 with the same probability.
    pub fn cyclic(sections: Vec<SectionTemplate>, cycle_prob: f64, seed: u64) -> Result<Self> {
        let s = sections.len();
        if s == 0 {
            return Err(invalid("grammar needs at least one section"));
        }
        let off = if s > 1 { (1.0 - cycle_prob) / (s - 1) as f64 } else { 0.0 };
        let row = |target: usize| -> Vec<f64> {
            if s == 1 {
                return vec![1.0];
            }
            (0..s).map(|j| if j == target { cycle_prob } else { off }).collect()
        };
        let transitions = (0..s).map(|i| row((i + 1) % s)).collect();
        let g = Self { sections, initial: row(0), transitions, seed };
        g.validate()?;
        Ok(g)
    }

    pub fn biography(cycle_prob: f64, seed: u64) -> Result<Self> {
        Self::cyclic(biography_sections(), cycle_prob, seed)
    }

    pub fn num_sections(&self) -> usize {
        self.sections.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sections.len();
        let stochastic = |r: &[f64]| r.len() == s && r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !stochastic(&self.initial) || self.transitions.len() != s || !self.transitions.iter().all(|r| stochastic(r)) {
            return Err(invalid("grammar distributions must be stochastic over the sections"));
        }
        for sec in &self.sections {
            if sec.templates.is_empty() {
                return Err(invalid(format!("section {} has no templates", sec.name)));
            }
            for t in &sec.templates {
                let skeleton = fill(t, &sec.lexicons, &mut |n| n - 1)?;
                if crate::corpus::word_tokens(&skeleton).len() < 3 {
                    return Err(invalid(format!("template {t:?} yields fewer than 3 tokens")));
                }
            }
        }
        Ok(())
    }
}

fn fill(template: &str, lexicons: &BTreeMap<String, Vec<String>>, pick: &mut impl FnMut(usize) -> usize) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').ok_or_else(|| invalid(format!("unclosed slot in {template:?}")))? + open;
        let slot = &rest[open + 1..close];
        let words = lexicons.get(slot).filter(|w| !w.is_empty()).ok_or_else(|| invalid(format!("unknown slot {slot}")))?;
        out.push_str(&words[pick(words.len())]);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    /// Ground-truth section index of every sentence.
    pub labels: Vec<ActionSequence>,
}

/// Samples `n_articles` articles of `sentences_per_article` sentences each.
pub fn generate_corpus(grammar: &TemplateGrammar, n_articles: usize, sentences_per_article: usize) -> Result<SyntheticCorpus> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(grammar.seed);
    let width = n_articles.max(1).to_string().len();
    let mut articles = Vec::with_capacity(n_articles);
    let mut labels = Vec::with_capacity(n_articles);
    for i in 0..n_articles {
        let id = format!("synth-{i:0width$}");
        let mut state = sample_categorical(&grammar.initial, &mut rng);
        let mut sentences = Vec::with_capacity(sentences_per_article);
        let mut seq = Vec::with_capacity(sentences_per_article);
        for j in 0..sentences_per_article {
            if j > 0 {
                state = sample_categorical(&grammar.transitions[state], &mut rng);
            }
            let sec = &grammar.sections[state];
            let t = &sec.templates[rng.random_range(0..sec.templates.len())];
            sentences.push(fill(t, &sec.lexicons, &mut |n| rng.random_range(0..n))?);
            seq.push(state);
        }
        articles.push(Article { id: id.clone(), title: format!("Synthetic biography {i}"), text: sentences.join(" ") });
        labels.push(ActionSequence { article_id: id, actions: seq });
    }
    Ok(SyntheticCorpus { articles, labels })
}

impl SyntheticCorpus {
    pub fn write(&self, corpus_path: &Path, labels_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        crate::corpus::write_jsonl(&self.articles, &mut buf)?;
        std::fs::write(corpus_path, buf)?;
        let mut lab = Vec::new();
        crate::actions::write_sequences(&self.labels, &mut lab)?;
        lab.flush()?;
        std::fs::write(labels_path, lab)?;
        Ok(())
    }
}

/// Empirical transition matrix of label sequences.
pub fn empirical_transitions(labels: &[ActionSequence], s: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; s]; s];
    for l in labels {
        for w in l.actions.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
    }
    for row in &mut counts {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    counts
}

/// Fraction of items whose cluster maps to their label under the best
/// one-to-one cluster/label matching (exhaustive for up to 8 labels,
/// greedy beyond).
pub fn matching_agreement(labels: &[usize], clusters: &[usize]) -> f64 {
    assert_eq!(labels.len(), clusters.len());
    if labels.is_empty() {
        return 1.0;
    }
    let nl = labels.iter().max().unwrap() + 1;
    let nc = clusters.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; nc]; nl];
    for (&l, &c) in labels.iter().zip(clusters) {
        table[l][c] += 1;
    }
    let best = if nl <= 8 && nc <= 12 {
        best_matching(&table, 0, &mut vec![false; nc])
    } else {
        greedy_matching(&table)
    };
    best as f64 / labels.len() as f64
}

fn best_matching(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
    if row == table.len() {
        return 0;
    }
    let mut best = best_matching(table, row + 1, used);
    for c in 0..used.len() {
        if !used[c] && table[row][c] > 0 {
            used[c] = true;
            best = best.max(table[row][c] + best_matching(table, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn greedy_matching(table: &[Vec<usize>]) -> usize {
    let mut cells: Vec<(usize, usize, usize)> =
        table.iter().enumerate().flat_map(|(l, r)| r.iter().enumerate().map(move |(c, &n)| (n, l, c))).collect();
    cells.sort_by(|a, b| b.cmp(a));
    let (mut ul, mut uc) = (vec![false; table.len()], vec![false; table[0].len()]);
    let mut total = 0;
    for (n, l, c) in cells {
        if !ul[l] && !uc[c] {
            ul[l] = true;
            uc[c] = true;
            total += n;
        }
    }
    total
}

/// Action sequences following `a_{i+1} = (a_i + 1) mod K` from a random
/// start. Each sentence embedding is its action's centroid plus Gaussian
/// noise, renormalized. Centroids are random unit vectors.
pub fn cyclic_action_corpus(
    n_articles: usize,
    len: usize,
    k: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> (ActionSet<f32>, Vec<PlannerArticle>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng, base: Option<&[f32]>, scale: f64| -> Vec<f32> {
        let mut v: Vec<f64> = (0..dim)
            .map(|i| base.map_or(0.0, |b| b[i] as f64) + scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v.into_iter().map(|x| x as f32).collect()
    };
    let centroids: Vec<Vec<f32>> = (0..k).map(|_| unit(&mut rng, None, 1.0)).collect();
    let set = ActionSet::from_centroids(Matrix::from_rows(&centroids).expect("uniform"));
    let mut out = Vec::with_capacity(n_articles);
    for i in 0..n_articles {
        let start = rng.random_range(0..k);
        let actions: Vec<usize> = (0..len).map(|j| (start + j) % k).collect();
        let rows: Vec<Vec<f32>> = actions.iter().map(|&a| unit(&mut rng, Some(&centroids[a]), noise / (dim as f64).sqrt())).collect();
        out.push(PlannerArticle { id: format!("cyc-{i}"), embeddings: Matrix::from_rows(&rows).expect("uniform"), actions });
    }
    (set, out)
}
