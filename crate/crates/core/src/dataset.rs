//! Sample records, score annotations and the dataset manifest.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::skeleton::LayoutVariant;

pub const NUM_ITEMS: usize = 10;
pub const MAX_ITEM: u8 = 5;
pub const MAX_TOTAL: u8 = 50;
pub const NUM_CLASSES: u8 = 15;

/// Participant cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "ND")]
    Nd,
    Stroke,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Nd => "ND",
            Group::Stroke => "Stroke",
        })
    }
}

/// Hand-use category of an exercise class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    Uni,
    Bia,
    Bis,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Uni => "UNI",
            Category::Bia => "BIA",
            Category::Bis => "BIS",
        }
    }

    pub const ALL: [Category; 3] = [Category::Uni, Category::Bia, Category::Bis];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const CLASS_NAMES: [&str; 15] = [
    "LiftCupHandle",
    "HairBrush",
    "BrushTeeth",
    "Remotecon",
    "MovingCan",
    "Writing",
    "FoldingPaper",
    "FoldupTowel",
    "WashFace",
    "Smartphone",
    "RightShoulderFrontal",
    "LeftShoulderFrontal",
    "RightShoulderSide",
    "LeftShoulderSide",
    "LateralRotation",
];

/// Category of exercise class `label` (1–15).
pub fn category_of(label: u8) -> Result<Category> {
    match label {
        1..=5 => Ok(Category::Uni),
        6..=8 | 11..=14 => Ok(Category::Bia),
        9 | 10 | 15 => Ok(Category::Bis),
        _ => Err(Error::Data(format!("class label {label} outside 1..=15"))),
    }
}

pub fn class_name(label: u8) -> Option<&'static str> {
    CLASS_NAMES.get(usize::from(label).checked_sub(1)?).copied()
}

/// Ten Likert items (0–5 each) and their total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotation", into = "RawAnnotation")]
pub struct ScoreAnnotation {
    items: [u8; NUM_ITEMS],
    total: u8,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    items: Vec<u8>,
    total: u8,
}

impl TryFrom<RawAnnotation> for ScoreAnnotation {
    type Error = Error;

    fn try_from(raw: RawAnnotation) -> Result<Self> {
        ScoreAnnotation::new(&raw.items, raw.total)
    }
}

impl From<ScoreAnnotation> for RawAnnotation {
    fn from(a: ScoreAnnotation) -> Self {
        RawAnnotation {
            items: a.items.to_vec(),
            total: a.total,
        }
    }
}

impl ScoreAnnotation {
    pub fn new(items: &[u8], total: u8) -> Result<Self> {
        if items.len() != NUM_ITEMS {
            return Err(Error::Data(format!(
                "expected {NUM_ITEMS} items, found {}",
                items.len()
            )));
        }
        if let Some(i) = items.iter().position(|&v| v > MAX_ITEM) {
            return Err(Error::Data(format!("item{} = {} exceeds {MAX_ITEM}", i + 1, items[i])));
        }
        let sum: u32 = items.iter().map(|&v| u32::from(v)).sum();
        if sum != u32::from(total) {
            return Err(Error::Data(format!("total {total} does not equal item sum {sum}")));
        }
        let mut arr = [0; NUM_ITEMS];
        arr.copy_from_slice(items);
        Ok(Self { items: arr, total })
    }

    /// Spreads `total` over the items, earliest items taking the remainder.
    pub fn from_total(total: u8) -> Result<Self> {
        if total > MAX_TOTAL {
            return Err(Error::Data(format!("total {total} exceeds {MAX_TOTAL}")));
        }
        let base = total / NUM_ITEMS as u8;
        let rem = usize::from(total % NUM_ITEMS as u8);
        let mut items = [base; NUM_ITEMS];
        items.iter_mut().take(rem).for_each(|v| *v += 1);
        Ok(Self { items, total })
    }

    pub fn items(&self) -> &[u8; NUM_ITEMS] {
        &self.items
    }

    pub fn total(&self) -> u8 {
        self.total
    }
}

/// Calendar date of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date {
    pub year: u16,
    pub month: u8,
    pub day: u8,
}

fn days_in_month(year: u16, month: u8) -> u8 {
    match month {
        4 | 6 | 9 | 11 => 30,
        2 if (year % 4 == 0 && year % 100 != 0) || year % 400 == 0 => 29,
        2 => 28,
        _ => 31,
    }
}

impl Date {
    pub fn new(year: u16, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::Data(format!("invalid date {year:04}-{month:02}-{day:02}")));
        }
        Ok(Self { year, month, day })
    }

    /// Days since 0000-03-01 in the proleptic Gregorian calendar.
    pub fn ordinal(self) -> i64 {
        let (y, m) = if self.month <= 2 {
            (i64::from(self.year) - 1, i64::from(self.month) + 12)
        } else {
            (i64::from(self.year), i64::from(self.month))
        };
        365 * y + y / 4 - y / 100 + y / 400 + (153 * (m - 3) + 2) / 5 + i64::from(self.day) - 1
    }

    pub fn from_ordinal(days: i64) -> Self {
        // inverse of `ordinal`, civil-from-days over 400-year eras
        let era = days.div_euclid(146_097);
        let doe = days.rem_euclid(146_097);
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let day = (doy - (153 * mp + 2) / 5 + 1) as u8;
        let month = if mp < 10 { mp + 3 } else { mp - 9 } as u8;
        let year = era * 400 + yoe + i64::from(month <= 2);
        Self {
            year: year as u16,
            month,
            day,
        }
    }

    pub fn add_days(self, days: i64) -> Self {
        Self::from_ordinal(self.ordinal() + days)
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for Date {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("date `{s}` is not YYYY-MM-DD"));
        let mut parts = s.split('-');
        let (Some(y), Some(m), Some(d), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        if y.len() != 4 || m.len() != 2 || d.len() != 2 {
            return Err(bad());
        }
        Date::new(
            y.parse().map_err(|_| bad())?,
            m.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
        )
    }
}

impl Serialize for Date {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Date {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One recorded trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject: String,
    pub group: Group,
    pub class_label: u8,
    pub category: Category,
    /// Sequence file, relative to the manifest's directory.
    pub file: String,
    pub annotation: ScoreAnnotation,
    pub session: Date,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = category_of(self.class_label)
            .map_err(|e| Error::Data(format!("record `{}`: field class_label: {e}", self.id)))?;
        if expected != self.category {
            return Err(Error::Data(format!(
                "record `{}`: field category: class {} is {expected}, not {}",
                self.id, self.class_label, self.category
            )));
        }
        if self.id.is_empty() {
            return Err(Error::Data("record with empty id".into()));
        }
        Ok(())
    }

    pub fn score(&self) -> f64 {
        f64::from(self.annotation.total())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout: LayoutVariant,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(layout: LayoutVariant, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self { layout, records };
        m.validate()?;
        Ok(m)
    }

    /// Record invariants plus id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts_by_group(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.group).or_insert(0) += 1;
        }
        out
    }

    /// Records whose ids appear in `ids`, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            layout: self.layout,
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(r.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Records of one exercise class.
    pub fn filter_class(&self, label: u8) -> Self {
        Self {
            layout: self.layout,
            records: self
                .records
                .iter()
                .filter(|r| r.class_label == label)
                .cloned()
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.to_string()).collect()
    }
}
