//! Reference results fixture, BLURB reproduction and comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{blurb, format_pct, round2, Metric};
use crate::tasks::TaskFamily;

const BUNDLED: &str = include_str!("../data/reference_results.json");
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub sota: f64,
    /// One score per variant column.
    pub scores: Vec<f64>,
    /// Printed difference over the state of the art.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDataset {
    pub name: String,
    #[serde(flatten)]
    pub row: ReferenceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFamily {
    pub family: TaskFamily,
    pub title: String,
    pub metric: Metric,
    pub datasets: Vec<ReferenceDataset>,
    /// Printed summary row; absent for single-dataset families.
    pub blurb: Option<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub version: u32,
    pub variants: Vec<String>,
    pub families: Vec<ReferenceFamily>,
}

impl ReferenceTable {
    pub fn bundled() -> Result<Self> {
        Self::parse(BUNDLED)
    }

    pub fn parse(json: &str) -> Result<Self> {
        let table: ReferenceTable = serde_json::from_str(json)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FIXTURE_VERSION {
            return Err(Error::invalid(format!(
                "reference fixture version {} is not supported",
                self.version
            )));
        }
        let n = self.variants.len();
        if n == 0 {
            return Err(Error::invalid("reference fixture lists no variants"));
        }
        for fam in &self.families {
            if fam.datasets.is_empty() {
                return Err(Error::invalid(format!("family {} has no datasets", fam.family)));
            }
            let rows = fam.datasets.iter().map(|d| (d.name.as_str(), &d.row));
            for (name, row) in rows.chain(fam.blurb.iter().map(|b| ("BLURB", b))) {
                if row.scores.len() != n {
                    return Err(Error::invalid(format!(
                        "{} row {name:?} has {} scores for {n} variants",
                        fam.family,
                        row.scores.len()
                    )));
                }
                if row.scores.iter().chain([&row.sota, &row.delta]).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("reference fixture"));
                }
            }
        }
        Ok(())
    }

    pub fn family(&self, family: TaskFamily) -> Option<&ReferenceFamily> {
        self.families.iter().find(|f| f.family == family)
    }

    pub fn dataset(&self, name: &str) -> Option<(&ReferenceFamily, &ReferenceDataset)> {
        self.families
            .iter()
            .find_map(|f| f.datasets.iter().find(|d| d.name == name).map(|d| (f, d)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Flat,
}

/// Difference rounded to two decimals with its direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub value: f64,
    pub direction: Direction,
}

impl Delta {
    pub fn new(candidate: f64, reference: f64) -> Self {
        let value = round2(candidate - reference);
        let direction = if value > 0.0 {
            Direction::Up
        } else if value < 0.0 {
            Direction::Down
        } else {
            Direction::Flat
        };
        Delta {
            value: if value == 0.0 { 0.0 } else { value },
            direction,
        }
    }

    /// `+19.44 ↑`, `-7.56 ↓`, `0.00`.
    pub fn render(&self) -> String {
        match self.direction {
            Direction::Up => format!("+{} \u{2191}", format_pct(self.value)),
            Direction::Down => format!("{} \u{2193}", format_pct(self.value)),
            Direction::Flat => "0.00".to_string(),
        }
    }
}

/// One reproduced summary or delta cell next to its printed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub computed: f64,
    pub printed: f64,
    pub matches: bool,
}

impl Check {
    fn new(computed: f64, printed: f64) -> Self {
        let computed = round2(computed);
        Check {
            computed,
            printed,
            matches: format_pct(computed) == format_pct(printed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReproduction {
    pub name: String,
    pub sota: f64,
    pub scores: Vec<f64>,
    pub best_variant: String,
    pub delta: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReproduction {
    pub family: TaskFamily,
    pub title: String,
    pub metric: Metric,
    pub datasets: Vec<DatasetReproduction>,
    /// Per-variant BLURB mean against the printed row.
    pub blurb: Option<Vec<Check>>,
    pub blurb_sota: Option<Check>,
    pub blurb_delta: Option<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproduction {
    pub variants: Vec<String>,
    pub families: Vec<FamilyReproduction>,
}

impl Reproduction {
    /// Every cell that fails to match its printed value, as
    /// `(family, row, column)`.
    pub fn mismatches(&self) -> Vec<(TaskFamily, String, String)> {
        let mut out = Vec::new();
        for f in &self.families {
            for d in &f.datasets {
                if !d.delta.matches {
                    out.push((f.family, d.name.clone(), "delta".to_string()));
                }
            }
            for (v, c) in self.variants.iter().zip(f.blurb.iter().flatten()) {
                if !c.matches {
                    out.push((f.family, "BLURB".to_string(), v.clone()));
                }
            }
            for (col, c) in [("SOTA", &f.blurb_sota), ("delta", &f.blurb_delta)] {
                if c.as_ref().is_some_and(|c| !c.matches) {
                    out.push((f.family, "BLURB".to_string(), col.to_string()));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned text table: dataset rows, the computed BLURB row and the
    /// difference column. A `*` marks a printed summary that is not the mean
    /// of its column, or a computed one that differs from the printed value.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Dataset".to_string(), "SOTA".to_string()];
        header.extend(self.variants.iter().cloned());
        header.push("Difference".to_string());
        let mut rows: Vec<Option<Vec<String>>> = Vec::new();
        let mark = |c: &Check, s: String| if c.matches { s } else { format!("{s}*") };
        for (i, f) in self.families.iter().enumerate() {
            if i > 0 {
                rows.push(None);
            }
            rows.push(Some(vec![format!("{} ({})", f.title, f.metric)]));
            rows.push(None);
            for d in &f.datasets {
                let mut r = vec![d.name.clone(), format_pct(d.sota)];
                r.extend(d.scores.iter().map(|&s| format_pct(s)));
                r.push(mark(&d.delta, Delta::new(d.delta.computed, 0.0).render()));
                rows.push(Some(r));
            }
            if let (Some(b), Some(sota), Some(delta)) = (&f.blurb, &f.blurb_sota, &f.blurb_delta) {
                let mut r = vec!["BLURB".to_string(), mark(sota, format_pct(sota.printed))];
                r.extend(b.iter().map(|c| mark(c, format_pct(c.computed))));
                r.push(mark(delta, Delta::new(delta.computed, 0.0).render()));
                rows.push(Some(r));
            }
        }

        let ncol = header.len();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in rows.iter().flatten().filter(|r| r.len() == ncol) {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let total: usize = widths.iter().sum::<usize>() + 2 * (ncol - 1);
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                let pad = w - c.chars().count();
                if i == 0 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str("  ");
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&header));
        let _ = writeln!(out, "{}", "=".repeat(total));
        for r in &rows {
            match r {
                None => {
                    let _ = writeln!(out, "{}", "-".repeat(total));
                }
                Some(cells) if cells.len() == 1 => {
                    let _ = writeln!(out, "{}", cells[0]);
                }
                Some(cells) => {
                    let _ = writeln!(out, "{}", line(cells));
                }
            }
        }
        if !self.mismatches().is_empty() {
            out.push_str("\n* computed value differs from the reference table\n");
        }
        out
    }
}

fn best(scores: &[f64]) -> (usize, f64) {
    scores.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, s)| if s > acc.1 { (i, s) } else { acc },
    )
}

/// Recomputes every summary row and difference cell of the fixture from
/// its dataset scores.
pub fn reproduce(table: &ReferenceTable) -> Result<Reproduction> {
    table.validate()?;
    let mut families = Vec::with_capacity(table.families.len());
    for fam in &table.families {
        let datasets: Vec<DatasetReproduction> = fam
            .datasets
            .iter()
            .map(|d| {
                let (i, top) = best(&d.row.scores);
                DatasetReproduction {
                    name: d.name.clone(),
                    sota: d.row.sota,
                    scores: d.row.scores.clone(),
                    best_variant: table.variants[i].clone(),
                    delta: Check::new(top - d.row.sota, d.row.delta),
                }
            })
            .collect();
        let (blurb_row, blurb_sota, blurb_delta) = match &fam.blurb {
            Some(printed) => {
                let mut computed = Vec::with_capacity(table.variants.len());
                for v in 0..table.variants.len() {
                    let col: Vec<(TaskFamily, f64)> =
                        fam.datasets.iter().map(|d| (fam.family, d.row.scores[v])).collect();
                    computed.push(round2(blurb(&col)?[0].1));
                }
                let sotas: Vec<(TaskFamily, f64)> = fam.datasets.iter().map(|d| (fam.family, d.row.sota)).collect();
                let checks: Vec<Check> = computed
                    .iter()
                    .zip(&printed.scores)
                    .map(|(&c, &p)| Check::new(c, p))
                    .collect();
                let (_, top) = best(&computed);
                (
                    Some(checks),
                    Some(Check::new(blurb(&sotas)?[0].1, printed.sota)),
                    Some(Check::new(top - printed.sota, printed.delta)),
                )
            }
            None => (None, None, None),
        };
        families.push(FamilyReproduction {
            family: fam.family,
            title: fam.title.clone(),
            metric: fam.metric,
            datasets,
            blurb: blurb_row,
            blurb_sota,
            blurb_delta,
        });
    }
    Ok(Reproduction {
        variants: table.variants.clone(),
        families,
    })
}

/// A measured score in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub family: TaskFamily,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<DatasetScore>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for s in &self.scores {
            if !(-100.0..=100.0).contains(&s.value) {
                return Err(Error::invalid(format!(
                    "{}: score {} is outside [-100, 100]",
                    s.dataset, s.value
                )));
            }
            if s.metric != Metric::for_family(s.family) {
                return Err(Error::invalid(format!(
                    "{}: {} is not the metric for {}",
                    s.dataset, s.metric, s.family
                )));
            }
        }
        Ok(())
    }

    pub fn blurb(&self) -> Result<Vec<(TaskFamily, f64)>> {
        let v: Vec<(TaskFamily, f64)> = self.scores.iter().map(|s| (s.family, s.value)).collect();
        blurb(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub family: TaskFamily,
    pub value: f64,
    pub sota: f64,
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub datasets: Vec<DeltaRow>,
    /// Per-family mean against the printed summary (or the single dataset's
    /// state of the art).
    pub blurb: Vec<DeltaRow>,
}

impl Comparison {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 4]> = self
            .datasets
            .iter()
            .chain(&self.blurb)
            .map(|r| {
                [
                    r.name.clone(),
                    format_pct(r.value),
                    format_pct(r.sota),
                    r.delta.render(),
                ]
            })
            .collect();
        let header = ["Dataset", "Score", "SOTA", "Difference"].map(String::from);
        let mut widths = header.clone().map(|h| h.chars().count());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for (i, r) in std::iter::once(&header).chain(&rows).enumerate() {
            if i == self.datasets.len() + 1 && !self.blurb.is_empty() {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 6));
            }
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        }
        out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }
}

/// Deltas of measured scores against the reference state of the art.
pub fn compare_to_reference(report: &EvalReport, table: &ReferenceTable) -> Result<Comparison> {
    report.validate()?;
    let mut datasets = Vec::with_capacity(report.scores.len());
    for s in &report.scores {
        let (fam, d) = table
            .dataset(&s.dataset)
            .ok_or_else(|| Error::invalid(format!("dataset {:?} is not in the reference table", s.dataset)))?;
        if fam.family != s.family {
            return Err(Error::invalid(format!(
                "dataset {:?} belongs to {}, not {}",
                s.dataset, fam.family, s.family
            )));
        }
        datasets.push(DeltaRow {
            name: s.dataset.clone(),
            family: s.family,
            value: s.value,
            sota: d.row.sota,
            delta: Delta::new(s.value, d.row.sota),
        });
    }
    let mut blurb_rows = Vec::new();
    if !report.scores.is_empty() {
        for (family, mean) in report.blurb()? {
            let fam = table
                .family(family)
                .ok_or_else(|| Error::invalid(format!("family {family} is not in the reference table")))?;
            let sota = fam.blurb.as_ref().map_or(fam.datasets[0].row.sota, |b| b.sota);
            blurb_rows.push(DeltaRow {
                name: format!("BLURB {family}"),
                family,
                value: mean,
                sota,
                delta: Delta::new(mean, sota),
            });
        }
    }
    Ok(Comparison {
        datasets,
        blurb: blurb_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(r: &Reproduction, f: TaskFamily) -> &FamilyReproduction {
        r.families.iter().find(|x| x.family == f).unwrap()
    }

    #[test]
    fn bundled_fixture_loads() {
        let t = ReferenceTable::bundled().unwrap();
        assert_eq!(t.variants.len(), 8);
        assert_eq!(t.families.len(), 6);
        assert_eq!(t.families.iter().map(|f| f.datasets.len()).sum::<usize>(), 20);
        for f in &t.families {
            assert_eq!(f.metric, Metric::for_family(f.family));
        }
    }

    #[test]
    fn reproduces_summary_rows() {
        let r = reproduce(&ReferenceTable::bundled().unwrap()).unwrap();
        let ner = fam(&r, TaskFamily::Ner).blurb.as_ref().unwrap();
        assert_eq!(
            (ner[0].computed, ner[1].computed, ner[2].computed),
            (95.41, 95.40, 95.70)
        );
        assert!(ner.iter().enumerate().all(|(i, c)| c.matches == (i != 1)));
        assert_eq!(fam(&r, TaskFamily::Re).blurb.as_ref().unwrap()[2].computed, 79.94);
        assert_eq!(fam(&r, TaskFamily::Qa).blurb.as_ref().unwrap()[2].computed, 58.03);
        assert_eq!(fam(&r, TaskFamily::Sts).blurb.as_ref().unwrap()[0].computed, 83.99);
    }

    #[test]
    fn reproduces_difference_column() {
        let r = reproduce(&ReferenceTable::bundled().unwrap()).unwrap();
        for f in &r.families {
            for d in &f.datasets {
                assert!(d.delta.matches, "{}", d.name);
            }
            if let Some(d) = &f.blurb_delta {
                assert!(d.matches, "{}", f.family);
            }
        }
        let ner = fam(&r, TaskFamily::Ner);
        assert_eq!(
            Delta::new(ner.datasets[0].delta.computed, 0.0).render(),
            "+19.44 \u{2191}"
        );
        assert_eq!(ner.datasets[0].best_variant, "Base3");
        let gad = &fam(&r, TaskFamily::Re).datasets[4];
        assert_eq!(Delta::new(gad.delta.computed, 0.0).render(), "-7.56 \u{2193}");
    }

    #[test]
    fn known_inconsistent_rows_are_flagged() {
        let r = reproduce(&ReferenceTable::bundled().unwrap()).unwrap();
        let mut m = r.mismatches();
        m.sort();
        let expect = [
            (TaskFamily::Ner, "BLURB", "Base2"),
            (TaskFamily::Ner, "BLURB", "SOTA"),
            (TaskFamily::Re, "BLURB", "Base1"),
            (TaskFamily::Re, "BLURB", "Large3"),
            (TaskFamily::Re, "BLURB", "SOTA"),
            (TaskFamily::Sts, "BLURB", "SOTA"),
        ];
        let mut expect: Vec<(TaskFamily, String, String)> = expect
            .iter()
            .map(|&(f, a, b)| (f, a.to_string(), b.to_string()))
            .collect();
        expect.sort();
        assert_eq!(m, expect);
        let re = fam(&r, TaskFamily::Re).blurb.as_ref().unwrap();
        assert_eq!((re[0].computed, re[6].computed), (78.65, 70.48));
    }

    #[test]
    fn delta_rendering() {
        assert_eq!(Delta::new(94.84, 75.40).render(), "+19.44 \u{2191}");
        assert_eq!(Delta::new(76.74, 84.30).render(), "-7.56 \u{2193}");
        let flat = Delta::new(50.0, 50.0);
        assert_eq!((flat.direction, flat.render().as_str()), (Direction::Flat, "0.00"));
        assert_eq!(Delta::new(50.001, 50.0).direction, Direction::Flat);
    }

    #[test]
    fn text_table_layout() {
        let r = reproduce(&ReferenceTable::bundled().unwrap()).unwrap();
        let text = r.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Dataset"));
        assert!(lines[0].ends_with("Difference"));
        let share = lines.iter().find(|l| l.starts_with("Share/Clefe")).unwrap();
        assert!(share.contains("94.84") && share.ends_with("+19.44 \u{2191}"));
        assert!(text.contains("78.65*"));
        let back: Reproduction = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn comparison_against_reference() {
        let t = ReferenceTable::bundled().unwrap();
        let score = |d: &str, f, v| DatasetScore {
            dataset: d.into(),
            family: f,
            metric: Metric::for_family(f),
            value: v,
        };
        let report = EvalReport {
            scores: vec![
                score("GAD", TaskFamily::Re, 76.74),
                score("DDI", TaskFamily::Re, 82.36),
                score("MedNLI", TaskFamily::Nli, 85.0),
            ],
        };
        let c = compare_to_reference(&report, &t).unwrap();
        assert_eq!(c.datasets[0].delta.render(), "-7.56 \u{2193}");
        assert_eq!(c.datasets[1].delta.render(), "0.00");
        assert_eq!(c.blurb[0].sota, 79.14);
        assert_eq!(c.blurb[1].delta.render(), "+1.00 \u{2191}");
        assert!(c.to_text().contains("GAD"));

        let missing = EvalReport {
            scores: vec![score("CoNLL", TaskFamily::Ner, 90.0)],
        };
        assert!(compare_to_reference(&missing, &t).is_err());
        let wrong_family = EvalReport {
            scores: vec![score("GAD", TaskFamily::Nli, 90.0)],
        };
        assert!(compare_to_reference(&wrong_family, &t).is_err());
    }

    #[test]
    fn rejects_malformed_fixture() {
        let mut t = ReferenceTable::bundled().unwrap();
        t.families[0].datasets[0].row.scores.pop();
        assert!(t.validate().is_err());
        let mut t = ReferenceTable::bundled().unwrap();
        t.version = 2;
        assert!(ReferenceTable::parse(&serde_json::to_string(&t).unwrap()).is_err());
    }
}
