//! Per-image visibility categories and the case-study test battery.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{AccountType, Corpus, ItemType};
use crate::counting::{CountBucket, CountSource};
use crate::facematch::PresenceSource;
use crate::stats::{bonferroni, independence_test, StatTestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VisibilityCategory {
    /// No candidate.
    C0,
    /// Candidate only.
    C1,
    /// Candidate with others.
    #[serde(rename = "C+")]
    Cplus,
}

impl VisibilityCategory {
    pub const ALL: [VisibilityCategory; 3] = [VisibilityCategory::C0, VisibilityCategory::C1, VisibilityCategory::Cplus];

    pub fn as_str(self) -> &'static str {
        match self {
            VisibilityCategory::C0 => "C0",
            VisibilityCategory::C1 => "C1",
            VisibilityCategory::Cplus => "C+",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            VisibilityCategory::C0 => "No Candidate",
            VisibilityCategory::C1 => "Candidate Only",
            VisibilityCategory::Cplus => "Candidate + Others",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for VisibilityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Categorized {
    pub category: VisibilityCategory,
    /// The candidate was recognized but nobody is pictured (posters, screens).
    pub inconsistent: bool,
}

pub fn categorize(present: bool, count: CountBucket) -> Categorized {
    let (category, inconsistent) = match (present, count) {
        (false, _) => (VisibilityCategory::C0, false),
        (true, CountBucket::Zero) => (VisibilityCategory::C0, true),
        (true, CountBucket::One) => (VisibilityCategory::C1, false),
        (true, CountBucket::Two | CountBucket::ThreeOrMore) => (VisibilityCategory::Cplus, false),
    };
    Categorized { category, inconsistent }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityRow {
    pub image_id: String,
    pub party: String,
    pub account_type: AccountType,
    pub item_type: ItemType,
    pub category: VisibilityCategory,
    pub inconsistent: bool,
    pub presence_source: PresenceSource,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub count_source: Option<CountSource>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<CountSource>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    match s.as_deref() {
        None | Some("") => Ok(None),
        Some(v) => serde_json::from_value(serde_json::Value::String(v.to_string()))
            .map(Some)
            .map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VisibilityError {
    #[error("image {0:?} is not in the corpus")]
    UnknownImage(String),
    #[error("image {0:?} shows the candidate but has no person count")]
    MissingCount(String),
    #[error("no rows to tabulate")]
    EmptyGroups,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Presence and count signals for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signals {
    pub present: bool,
    pub presence_source: PresenceSource,
}

/// Joins presence and count per image over every image of the corpus.
///
/// Images without a presence entry count as not present. An image marked present
/// must have a count; absent images keep their count source when one exists.
pub fn build_rows(
    corpus: &Corpus,
    presence: &BTreeMap<String, Signals>,
    counts: &BTreeMap<String, (CountBucket, CountSource)>,
    default_presence_source: PresenceSource,
) -> Result<Vec<VisibilityRow>, VisibilityError> {
    for id in presence.keys().chain(counts.keys()) {
        if corpus.image(id).is_none() {
            return Err(VisibilityError::UnknownImage(id.clone()));
        }
    }
    let mut rows = Vec::new();
    for image in corpus.images() {
        let item = corpus
            .item_of_image(&image.image_id)
            .ok_or_else(|| VisibilityError::UnknownImage(image.image_id.clone()))?;
        let signals = presence.get(&image.image_id).copied().unwrap_or(Signals {
            present: false,
            presence_source: default_presence_source,
        });
        let count = counts.get(&image.image_id).copied();
        let categorized = match (signals.present, count) {
            (false, _) => categorize(false, CountBucket::Zero),
            (true, Some((b, _))) => categorize(true, b),
            (true, None) => return Err(VisibilityError::MissingCount(image.image_id.clone())),
        };
        rows.push(VisibilityRow {
            image_id: image.image_id.clone(),
            party: item.party.clone(),
            account_type: item.account_type,
            item_type: item.item_type,
            category: categorized.category,
            inconsistent: categorized.inconsistent,
            presence_source: signals.presence_source,
            count_source: count.map(|(_, s)| s),
        });
    }
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[VisibilityRow], w: W) -> Result<(), VisibilityError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<VisibilityRow>, VisibilityError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(VisibilityError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Party,
    AccountType,
    ItemType,
}

impl GroupField {
    fn value(self, row: &VisibilityRow) -> String {
        match self {
            GroupField::Party => row.party.clone(),
            GroupField::AccountType => row.account_type.as_str().to_string(),
            GroupField::ItemType => row.item_type.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstabGroup {
    pub key: Vec<String>,
    pub n: u64,
    /// Counts in C0, C1, C+ order.
    pub counts: [u64; 3],
    pub percentages: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crosstab {
    pub by: Vec<GroupField>,
    pub categories: Vec<VisibilityCategory>,
    pub groups: Vec<CrosstabGroup>,
}

/// `100 · count / n` rounded half-up to one decimal, computed in integer tenths.
pub fn percentage(count: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let tenths = (2000 * count + n) / (2 * n);
    tenths as f64 / 10.0
}

pub fn crosstab(rows: &[VisibilityRow], by: &[GroupField]) -> Result<Crosstab, VisibilityError> {
    if rows.is_empty() {
        return Err(VisibilityError::EmptyGroups);
    }
    let mut counts: BTreeMap<Vec<String>, [u64; 3]> = BTreeMap::new();
    for row in rows {
        let key: Vec<String> = by.iter().map(|f| f.value(row)).collect();
        counts.entry(key).or_default()[row.category.index()] += 1;
    }
    let groups = counts
        .into_iter()
        .map(|(key, c)| {
            let n = c.iter().sum();
            CrosstabGroup {
                key,
                n,
                counts: c,
                percentages: c.map(|x| percentage(x, n)),
            }
        })
        .collect();
    Ok(Crosstab {
        by: by.to_vec(),
        categories: VisibilityCategory::ALL.to_vec(),
        groups,
    })
}

/// Which tests a Bonferroni family counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonferroniFamily {
    /// Only tests that were run.
    #[default]
    Executed,
    /// Every test in the family, including skipped ones.
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatterySpec {
    /// A factor level with fewer rows than this skips the test.
    pub min_group_size: u64,
    pub yates: bool,
    pub bonferroni: BonferroniFamily,
}

impl Default for BatterySpec {
    fn default() -> Self {
        BatterySpec {
            min_group_size: 5,
            yates: false,
            bonferroni: BonferroniFamily::Executed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryTest {
    pub test_id: String,
    /// Tests sharing a family share a Bonferroni correction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    /// Two rows (the factor levels) by C0, C1, C+.
    pub levels: [String; 2],
    pub table: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<StatTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl BatteryTest {
    pub fn is_executed(&self) -> bool {
        self.result.is_some()
    }
}

pub const INSUFFICIENT_DATA: &str = "insufficient data";

fn tally<'a>(rows: impl Iterator<Item = &'a VisibilityRow>) -> [u64; 3] {
    let mut c = [0u64; 3];
    for r in rows {
        c[r.category.index()] += 1;
    }
    c
}

/// Runs one 2 × 3 test, dropping all-zero category columns with a warning.
fn two_level_test(
    test_id: String,
    family: Option<String>,
    levels: [&str; 2],
    a: [u64; 3],
    b: [u64; 3],
    spec: &BatterySpec,
) -> BatteryTest {
    let table = vec![a.to_vec(), b.to_vec()];
    let mut test = BatteryTest {
        test_id: test_id.clone(),
        family,
        levels: levels.map(str::to_string),
        table: table.clone(),
        result: None,
        skipped: None,
    };
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let min_n = spec.min_group_size.max(1);
    if na < min_n || nb < min_n {
        test.skipped = Some(INSUFFICIENT_DATA.to_string());
        return test;
    }
    let keep: Vec<usize> = (0..3).filter(|&j| a[j] + b[j] > 0).collect();
    if keep.len() < 2 {
        test.skipped = Some(INSUFFICIENT_DATA.to_string());
        return test;
    }
    let reduced: Vec<Vec<u64>> = table.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect();
    match independence_test(&test_id, &reduced, spec.yates) {
        Ok(mut r) => {
            for j in (0..3).filter(|j| !keep.contains(j)) {
                r.warnings.push(format!("category {} is empty in both groups and was dropped", VisibilityCategory::ALL[j]));
            }
            r.table = table;
            test.result = Some(r);
        }
        Err(e) => test.skipped = Some(format!("{INSUFFICIENT_DATA}: {e}")),
    }
    test
}

fn apply_bonferroni(tests: &mut [BatteryTest], mode: BonferroniFamily) {
    let mut families: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in tests.iter() {
        if let Some(f) = &t.family {
            let e = families.entry(f.clone()).or_default();
            e.0 += 1;
            if t.is_executed() {
                e.1 += 1;
            }
        }
    }
    for t in tests.iter_mut() {
        let (Some(f), Some(r)) = (&t.family, t.result.as_mut()) else { continue };
        let (planned, executed) = families[f];
        let m = match mode {
            BonferroniFamily::Executed => executed,
            BonferroniFamily::Planned => planned,
        };
        r.p_adjusted = Some(bonferroni(r.p, m));
    }
}

/// The full battery:
/// party vs candidate accounts per item type and per party within item type,
/// then stories vs posts overall, per account type and per party.
pub fn run_battery(rows: &[VisibilityRow], spec: &BatterySpec) -> Vec<BatteryTest> {
    let parties: BTreeSet<&str> = rows.iter().map(|r| r.party.as_str()).collect();
    let mut tests = Vec::new();
    let party_acct = AccountType::Party.as_str();
    let cand_acct = AccountType::Candidate.as_str();
    let story = ItemType::Story.as_str();
    let post = ItemType::Post.as_str();

    let by_account = |it: ItemType, party: Option<&str>| {
        let sel = |at: AccountType| {
            tally(rows.iter().filter(|r| {
                r.item_type == it && r.account_type == at && party.is_none_or(|p| r.party == p)
            }))
        };
        (sel(AccountType::Party), sel(AccountType::Candidate))
    };
    for it in [ItemType::Story, ItemType::Post] {
        let (a, b) = by_account(it, None);
        tests.push(two_level_test(
            format!("account_type/{}", it.as_str()),
            None,
            [party_acct, cand_acct],
            a,
            b,
            spec,
        ));
        for p in &parties {
            let (a, b) = by_account(it, Some(p));
            tests.push(two_level_test(
                format!("account_type/{}/{p}", it.as_str()),
                Some(format!("account_type/{}/by_party", it.as_str())),
                [party_acct, cand_acct],
                a,
                b,
                spec,
            ));
        }
    }

    let by_item = |filter: &dyn Fn(&VisibilityRow) -> bool| {
        let sel = |it: ItemType| tally(rows.iter().filter(|r| r.item_type == it && filter(r)));
        (sel(ItemType::Story), sel(ItemType::Post))
    };
    let (a, b) = by_item(&|_| true);
    tests.push(two_level_test("item_type/overall".into(), None, [story, post], a, b, spec));
    for at in [AccountType::Party, AccountType::Candidate] {
        let (a, b) = by_item(&|r| r.account_type == at);
        tests.push(two_level_test(format!("item_type/{}", at.as_str()), None, [story, post], a, b, spec));
    }
    for p in &parties {
        let (a, b) = by_item(&|r| r.party == *p);
        tests.push(two_level_test(
            format!("item_type/party/{p}"),
            Some("item_type/by_party".into()),
            [story, post],
            a,
            b,
            spec,
        ));
    }

    apply_bonferroni(&mut tests, spec.bonferroni);
    tests
}
