//! The 3-level land-use class hierarchy.
//!
//! Classes are addressed by 0-based indices that follow the enumeration
//! order of the built-in hierarchy (top classes in order, then middle
//! classes in order within each top class, and so on). Names are stored
//! verbatim and matched case-sensitively.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Granularity of a class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fine,
    Middle,
    Top,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Fine, Level::Middle, Level::Top];

    /// Depth in the hierarchy, 0 for the root-most level.
    fn depth(self) -> usize {
        match self {
            Level::Top => 0,
            Level::Middle => 1,
            Level::Fine => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Fine => "fine",
            Level::Middle => "middle",
            Level::Top => "top",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fine" | "bottom" | "45" => Ok(Level::Fine),
            "middle" | "16" => Ok(Level::Middle),
            "top" | "5" => Ok(Level::Top),
            other => Err(Error::Config(format!(
                "unknown level '{other}' (expected fine, middle or top)"
            ))),
        }
    }
}

/// Built-in hierarchy: (top, [(middle, [fine...])...]).
const BUILTIN: &[(&str, &[(&str, &[&str])])] = &[
    (
        "Residence or accommodation functions",
        &[("Hotels, motels, or other accommodation services", &["lodging"])],
    ),
    (
        "General sales or services",
        &[
            (
                "Retail sales or service",
                &[
                    "bicycle_store",
                    "car_service",
                    "department_store",
                    "home_goods_store",
                    "book_store",
                    "clothing_store",
                    "jewelry_store",
                    "shoe_store",
                    "bakery",
                    "pharmacy",
                    "shopping_mall",
                ],
            ),
            ("Finance and Insurance", &["bank"]),
            (
                "Business, professional, scientific, and technical services",
                &["post_office", "travel_agency", "veterinary_care"],
            ),
            ("Food services", &["restaurant", "coffee_house", "night_club", "bar"]),
            ("Personal services", &["hair_care"]),
        ],
    ),
    (
        "Transportation, communication, information, and utilities",
        &[
            (
                "Transportation service",
                &["bus_station", "subway_station", "train_station", "parking"],
            ),
            ("Communications and information", &["library"]),
        ],
    ),
    (
        "Arts, entertainment and recreation",
        &[
            (
                "Performing arts or supporting establishment",
                &["art_gallery", "movie_theater", "stadium"],
            ),
            (
                "Museums and other special purpose recreational institutions",
                &["aquarium", "museum", "zoo"],
            ),
            (
                "Amusement, sports, or recreation establishment",
                &["park", "amusement_park", "gym"],
            ),
        ],
    ),
    (
        "Education, public admin, health care and other institution",
        &[
            ("Educational services", &["school", "university"]),
            (
                "Public administration",
                &["city_hall", "courthouse", "local_government_office"],
            ),
            ("Public safety", &["fire_station", "police_station"]),
            ("Health and human services", &["hospital"]),
            ("Religious institutions", &["church", "temple"]),
        ],
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    fine: Vec<String>,
    middle: Vec<String>,
    top: Vec<String>,
    fine_to_middle: Vec<usize>,
    middle_to_top: Vec<usize>,
    index: [HashMap<String, usize>; 3],
}

impl Taxonomy {
    /// The compiled-in 45/16/5 hierarchy.
    pub fn builtin() -> Self {
        let mut b = Builder::default();
        for (top, middles) in BUILTIN {
            b.push_top(top);
            for (middle, fines) in *middles {
                b.push_middle(middle).expect("builtin hierarchy is well formed");
                for fine in *fines {
                    b.push_fine(fine).expect("builtin hierarchy is well formed");
                }
            }
        }
        b.finish().expect("builtin hierarchy is well formed")
    }

    pub fn len(&self, level: Level) -> usize {
        self.names(level).len()
    }

    pub fn names(&self, level: Level) -> &[String] {
        match level {
            Level::Fine => &self.fine,
            Level::Middle => &self.middle,
            Level::Top => &self.top,
        }
    }

    pub fn name(&self, level: Level, index: usize) -> Result<&str> {
        self.names(level)
            .get(index)
            .map(String::as_str)
            .ok_or_else(|| domain(format!("{level} class index {index} out of range")))
    }

    /// Case-sensitive exact-name lookup.
    pub fn index_of(&self, level: Level, name: &str) -> Option<usize> {
        self.index[level.depth()].get(name).copied()
    }

    pub fn fine_to_middle(&self) -> &[usize] {
        &self.fine_to_middle
    }

    pub fn middle_to_top(&self) -> &[usize] {
        &self.middle_to_top
    }

    /// Ancestor of a fine class at `target`.
    pub fn roll_up(&self, fine_index: usize, target: Level) -> Result<usize> {
        self.lift(fine_index, Level::Fine, target)
    }

    /// Maps an index at `from` to its ancestor at `to`. Rolling down is an error.
    pub fn lift(&self, index: usize, from: Level, to: Level) -> Result<usize> {
        if index >= self.len(from) {
            return Err(domain(format!(
                "{from} class index {index} out of range (0..{})",
                self.len(from)
            )));
        }
        if to.depth() > from.depth() {
            return Err(domain(format!("cannot roll {from} index down to {to}")));
        }
        let mut idx = index;
        let mut level = from;
        while level != to {
            (idx, level) = match level {
                Level::Fine => (self.fine_to_middle[idx], Level::Middle),
                Level::Middle => (self.middle_to_top[idx], Level::Top),
                Level::Top => unreachable!(),
            };
        }
        Ok(idx)
    }

    pub fn relabel(&self, labels: &[usize], target: Level) -> Result<Vec<usize>> {
        labels.iter().map(|&i| self.roll_up(i, target)).collect()
    }

    /// Indented text form: two spaces per depth, one class per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, top) in self.top.iter().enumerate() {
            out.push_str(top);
            out.push('\n');
            for (m, middle) in self.middle.iter().enumerate() {
                if self.middle_to_top[m] != t {
                    continue;
                }
                out.push_str("  ");
                out.push_str(middle);
                out.push('\n');
                for (f, fine) in self.fine.iter().enumerate() {
                    if self.fine_to_middle[f] == m {
                        out.push_str("    ");
                        out.push_str(fine);
                        out.push('\n');
                    }
                }
            }
        }
        out
    }

    /// Parses the indented text form. Depth is measured in tabs or pairs of
    /// spaces; blank lines and lines starting with `#` are ignored.
    ///
    /// Indices follow line order, so the file must list each level's classes
    /// grouped under their parents.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut b = Builder::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indent = &line[..line.len() - trimmed.len()];
            let depth = if indent.chars().all(|c| c == '\t') {
                indent.len()
            } else if indent.chars().all(|c| c == ' ') && indent.len() % 2 == 0 {
                indent.len() / 2
            } else {
                return Err(taxonomy_err(lineno, "indentation must be tabs or pairs of spaces"));
            };
            let pushed = match depth {
                0 => {
                    b.push_top(trimmed);
                    Ok(())
                }
                1 => b.push_middle(trimmed),
                2 => b.push_fine(trimmed),
                _ => Err("indentation deeper than 3 levels".to_string()),
            };
            pushed.map_err(|m| taxonomy_err(lineno, &m))?;
        }
        b.finish().map_err(|m| Error::Load(format!("taxonomy: {m}")))
    }
}

fn taxonomy_err(lineno: usize, msg: &str) -> Error {
    Error::Load(format!("taxonomy line {}: {msg}", lineno + 1))
}

#[derive(Default)]
struct Builder {
    fine: Vec<String>,
    middle: Vec<String>,
    top: Vec<String>,
    fine_to_middle: Vec<usize>,
    middle_to_top: Vec<usize>,
}

impl Builder {
    fn push_top(&mut self, name: &str) {
        self.top.push(name.to_string());
    }

    fn push_middle(&mut self, name: &str) -> Result<(), String> {
        let parent = self.top.len().checked_sub(1).ok_or("middle class before any top class")?;
        self.middle.push(name.to_string());
        self.middle_to_top.push(parent);
        Ok(())
    }

    fn push_fine(&mut self, name: &str) -> Result<(), String> {
        let parent = self.middle.len().checked_sub(1).ok_or("fine class before any middle class")?;
        if self.middle_to_top[parent] + 1 != self.top.len() {
            return Err(format!("fine class '{name}' has no middle parent under the current top class"));
        }
        self.fine.push(name.to_string());
        self.fine_to_middle.push(parent);
        Ok(())
    }

    fn finish(self) -> Result<Taxonomy, String> {
        if self.fine.is_empty() {
            return Err("no fine classes".into());
        }
        for t in 0..self.top.len() {
            if !self.middle_to_top.contains(&t) {
                return Err(format!("top class '{}' has no middle classes", self.top[t]));
            }
        }
        for m in 0..self.middle.len() {
            if !self.fine_to_middle.contains(&m) {
                return Err(format!("middle class '{}' has no fine classes", self.middle[m]));
            }
        }
        let mut index: [HashMap<String, usize>; 3] = Default::default();
        for (level, names) in [(Level::Top, &self.top), (Level::Middle, &self.middle), (Level::Fine, &self.fine)] {
            let map = &mut index[level.depth()];
            for (i, n) in names.iter().enumerate() {
                if map.insert(n.clone(), i).is_some() {
                    return Err(format!("duplicate {level} class '{n}'"));
                }
            }
        }
        Ok(Taxonomy {
            fine: self.fine,
            middle: self.middle,
            top: self.top,
            fine_to_middle: self.fine_to_middle,
            middle_to_top: self.middle_to_top,
            index,
        })
    }
}
