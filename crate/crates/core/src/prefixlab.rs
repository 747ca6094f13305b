//! Offline typology of truncated cache keys over a labeled series corpus.
//!
//! For a prefix length `delta`, every prefix `σ` groups the distinct series
//! that start with it. A group of one series is non-profitable: caching it
//! never produces a hit for another series. A larger group is safe when all
//! its series share a label and dangerous otherwise. A dangerous prefix is
//! toxic when its most popular label covers less than `beta` of the flows
//! behind the group.

use std::collections::HashMap;
use std::io::Read;

use serde::Serialize;

use crate::accelerator::{HashOracle, LabelOracle};
use crate::model::{FiveTuple, Label, Series};
use crate::traffic::Catalog;

pub const DEFAULT_BETA: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("series on line {line} repeats an earlier series with a different label")]
    ConflictingLabel { line: usize },
    #[error("all series must have the same length")]
    Ragged,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub features: Vec<i32>,
    pub label: Label,
    /// Flows that produced this series.
    pub flows: u64,
}

/// Distinct labeled series with their flow popularity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    k: usize,
}

impl Corpus {
    /// Merges repeated series, summing their flow counts.
    pub fn new(rows: impl IntoIterator<Item = CorpusEntry>) -> Result<Self, CorpusError> {
        let mut entries: Vec<CorpusEntry> = Vec::new();
        let mut at: HashMap<Vec<i32>, usize> = HashMap::new();
        let mut k = None;
        for (i, row) in rows.into_iter().enumerate() {
            if *k.get_or_insert(row.features.len()) != row.features.len() {
                return Err(CorpusError::Ragged);
            }
            match at.get(&row.features) {
                Some(&j) if entries[j].label != row.label => {
                    return Err(CorpusError::ConflictingLabel { line: i + 1 })
                }
                Some(&j) => entries[j].flows += row.flows,
                None => {
                    at.insert(row.features.clone(), entries.len());
                    entries.push(row);
                }
            }
        }
        Ok(Self {
            entries,
            k: k.unwrap_or(0),
        })
    }

    /// One flow per catalog shape whose explicit head holds at least `k`
    /// packets. Unlabeled shapes are labeled by feature hash.
    pub fn from_catalog(catalog: &Catalog, k: usize) -> Result<Self, CorpusError> {
        let oracle = HashOracle::default();
        let rows = catalog.shapes().iter().filter(|s| s.packets.len() >= k).map(|s| {
            let features = s.features()[..k].to_vec();
            let label = s
                .label
                .unwrap_or_else(|| oracle.label(&Series::new(FiveTuple::default(), features.clone(), 0)));
            CorpusEntry {
                features,
                label,
                flows: 1,
            }
        });
        Self::new(rows)
    }

    /// Reads `feature_1..feature_K,label,flow_count` rows. A first row whose
    /// first field is not a number is taken as a header.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i + 1, |p| p.line() as usize);
            let bad = |m: String| CorpusError::Parse { line, message: m };
            if i == 0 && rec.get(0).is_some_and(|f| f.parse::<i64>().is_err()) {
                continue;
            }
            if rec.len() < 3 {
                return Err(bad(format!("expected at least 3 columns, found {}", rec.len())));
            }
            let n = rec.len();
            let features = rec
                .iter()
                .take(n - 2)
                .map(|f| f.parse::<i32>().map_err(|_| bad(format!("invalid feature {f:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let label = rec[n - 2]
                .parse::<u32>()
                .map_err(|_| bad(format!("invalid label {:?}", &rec[n - 2])))?;
            let flows = rec[n - 1]
                .parse::<u64>()
                .map_err(|_| bad(format!("invalid flow count {:?}", &rec[n - 1])))?;
            if flows == 0 {
                return Err(bad("flow count must be positive".into()));
            }
            if rows.first().is_some_and(|r: &CorpusEntry| r.features.len() != features.len()) {
                return Err(bad("row length differs from the first row".into()));
            }
            rows.push(CorpusEntry {
                features,
                label: Label(label),
                flows,
            });
        }
        Self::new(rows)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), CorpusError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.k).map(|i| format!("feature_{i}")).collect();
        header.push("label".into());
        header.push("flow_count".into());
        out.write_record(&header)?;
        for e in &self.entries {
            let mut row: Vec<String> = e.features.iter().map(i32::to_string).collect();
            row.push(e.label.0.to_string());
            row.push(e.flows.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_flows(&self) -> u64 {
        self.entries.iter().map(|e| e.flows).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "class")]
pub enum PrefixClass {
    NonProfitable,
    Safe,
    Dangerous { toxic: bool },
}

/// Members of one prefix group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixGroup {
    pub series: u64,
    pub flows: u64,
    /// Flows per label.
    pub label_flows: HashMap<Label, u64>,
}

impl PrefixGroup {
    fn add(&mut self, e: &CorpusEntry) {
        self.series += 1;
        self.flows += e.flows;
        *self.label_flows.entry(e.label).or_default() += e.flows;
    }
}

/// `D(σ)` for every prefix of one length.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub delta: usize,
    pub groups: HashMap<Vec<i32>, PrefixGroup>,
}

impl CorpusIndex {
    pub fn build(corpus: &Corpus, delta: usize) -> Self {
        assert!(delta >= 1 && delta <= corpus.k().max(1), "delta {delta} outside 1..=K");
        let mut groups: HashMap<Vec<i32>, PrefixGroup> = HashMap::new();
        for e in corpus.entries() {
            groups.entry(e.features[..delta].to_vec()).or_default().add(e);
        }
        Self { delta, groups }
    }

    pub fn classify(&self, sigma: &[i32], beta: f64) -> Option<PrefixClass> {
        self.groups.get(sigma).map(|g| classify_group(g, beta))
    }
}

pub fn classify_group(g: &PrefixGroup, beta: f64) -> PrefixClass {
    if g.series == 1 {
        PrefixClass::NonProfitable
    } else if g.label_flows.len() == 1 {
        PrefixClass::Safe
    } else {
        let top = g.label_flows.values().copied().max().unwrap_or(0);
        PrefixClass::Dangerous {
            toxic: (top as f64) < beta * g.flows as f64,
        }
    }
}

/// Class of `sigma` within `index`; `None` when no series has that prefix.
pub fn classify_prefix(sigma: &[i32], index: &CorpusIndex, beta: f64) -> Option<PrefixClass> {
    index.classify(sigma, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "camelCase")]
pub enum Weighting {
    /// Each distinct series counts once.
    #[default]
    BySeries,
    /// Each flow counts once.
    ByFlows,
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bySeries" | "by-series" | "series" => Ok(Weighting::BySeries),
            "byFlows" | "by-flows" | "flows" => Ok(Weighting::ByFlows),
            _ => Err(format!("unknown weighting {s:?}; expected bySeries or byFlows")),
        }
    }
}

/// Weighted class totals for one prefix length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TypologyCounts {
    pub delta: usize,
    pub prefixes: u64,
    pub total: u64,
    pub non_profitable: u64,
    pub safe: u64,
    pub dangerous: u64,
    /// Subset of `dangerous`.
    pub toxic: u64,
}

impl TypologyCounts {
    fn add(&mut self, class: PrefixClass, w: u64) {
        self.prefixes += 1;
        self.total += w;
        match class {
            PrefixClass::NonProfitable => self.non_profitable += w,
            PrefixClass::Safe => self.safe += w,
            PrefixClass::Dangerous { toxic } => {
                self.dangerous += w;
                if toxic {
                    self.toxic += w;
                }
            }
        }
    }

    pub fn fractions(&self) -> TypologyRow {
        let f = |x: u64| if self.total == 0 { 0.0 } else { x as f64 / self.total as f64 };
        TypologyRow {
            delta: self.delta,
            prefixes: self.prefixes,
            non_profitable: f(self.non_profitable),
            safe: f(self.safe),
            dangerous: f(self.dangerous),
            toxic: f(self.toxic),
            safe_or_likely_good: f(self.safe + self.dangerous - self.toxic),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypologyRow {
    pub delta: usize,
    pub prefixes: u64,
    pub non_profitable: f64,
    pub safe: f64,
    pub dangerous: f64,
    pub toxic: f64,
    /// Safe plus dangerous-but-not-toxic.
    pub safe_or_likely_good: f64,
}

fn weight(g: &PrefixGroup, w: Weighting) -> u64 {
    match w {
        Weighting::BySeries => g.series,
        Weighting::ByFlows => g.flows,
    }
}

pub fn typology_counts(corpus: &Corpus, delta: usize, beta: f64, weighting: Weighting) -> TypologyCounts {
    let mut out = TypologyCounts {
        delta,
        ..TypologyCounts::default()
    };
    if corpus.is_empty() {
        return out;
    }
    for g in CorpusIndex::build(corpus, delta).groups.values() {
        out.add(classify_group(g, beta), weight(g, weighting));
    }
    out
}

/// Class totals for every prefix length in `deltas`.
pub fn typology_report(
    corpus: &Corpus,
    deltas: impl IntoIterator<Item = usize>,
    beta: f64,
    weighting: Weighting,
) -> Vec<TypologyCounts> {
    deltas
        .into_iter()
        .map(|d| typology_counts(corpus, d, beta, weighting))
        .collect()
}

/// Quadratic recount of [`typology_counts`] by pairwise comparison.
pub fn brute_force_recount(corpus: &Corpus, delta: usize, beta: f64, weighting: Weighting) -> TypologyCounts {
    let entries = corpus.entries();
    let mut out = TypologyCounts {
        delta,
        ..TypologyCounts::default()
    };
    let mut done = vec![false; entries.len()];
    for i in 0..entries.len() {
        if done[i] {
            continue;
        }
        let sigma = &entries[i].features[..delta];
        let mut members = vec![i];
        for (j, e) in entries.iter().enumerate().skip(i + 1) {
            if !done[j] && &e.features[..delta] == sigma {
                members.push(j);
            }
        }
        for &j in &members {
            done[j] = true;
        }
        let flows: u64 = members.iter().map(|&j| entries[j].flows).sum();
        let first_label = entries[i].label;
        let class = if members.len() == 1 {
            PrefixClass::NonProfitable
        } else if members.iter().all(|&j| entries[j].label == first_label) {
            PrefixClass::Safe
        } else {
            let mut best = 0u64;
            for &a in &members {
                let mut with_label = 0;
                for &b in &members {
                    if entries[b].label == entries[a].label {
                        with_label += entries[b].flows;
                    }
                }
                best = best.max(with_label);
            }
            PrefixClass::Dangerous {
                toxic: (best as f64) < beta * flows as f64,
            }
        };
        let w = match weighting {
            Weighting::BySeries => members.len() as u64,
            Weighting::ByFlows => flows,
        };
        out.add(class, w);
    }
    out
}
