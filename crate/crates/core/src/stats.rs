//! Pearson chi-square on 2×2 tables, frequency tabulation and descriptive
//! summaries, plus the fixture formats the `stats` CLI reads.

use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

/// Significance level for the association verdict.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("table has a zero margin: {0}")]
    DegenerateMargin(&'static str),
    #[error("chi-square statistic must be non-negative and finite, got {0}")]
    Domain(f64),
    #[error("degrees of freedom must be at least 1")]
    ZeroDf,
    #[error("no counts to tabulate")]
    Empty,
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("value at index {0} is not finite")]
    NonFinite(usize),
    #[error("count {count} exceeds base {base} for {label:?}")]
    CountAboveBase { label: String, count: u64, base: u64 },
    #[error("counts overflow")]
    Overflow,
    #[error("fixture: {0}")]
    Fixture(String),
}

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Lower regularized gamma P(a, x) by its power series; converges fast for x < a + 1.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut denom = a;
    for _ in 0..GAMMA_MAX_ITER {
        denom += 1.0;
        term *= x / denom;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper regularized gamma Q(a, x) by Lentz's continued fraction; for x ≥ a + 1.
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Upper regularized incomplete gamma Q(a, x) = Γ(a, x) / Γ(a).
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

/// Upper-tail probability of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: u32) -> Result<f64, StatsError> {
    if df == 0 {
        return Err(StatsError::ZeroDf);
    }
    if x.is_nan() || x < 0.0 || x.is_infinite() {
        return Err(StatsError::Domain(x));
    }
    Ok(regularized_gamma_q(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable2x2 {
    /// Row 1: (a, b); row 2: (c, d).
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
    pub row_labels: [String; 2],
    pub col_labels: [String; 2],
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            row_labels: ["row 1".into(), "row 2".into()],
            col_labels: ["col 1".into(), "col 2".into()],
        }
    }

    pub fn with_labels(mut self, rows: [&str; 2], cols: [&str; 2]) -> Self {
        self.row_labels = rows.map(String::from);
        self.col_labels = cols.map(String::from);
        self
    }

    pub fn total(&self) -> u128 {
        [self.a, self.b, self.c, self.d].iter().map(|&x| x as u128).sum()
    }

    pub fn transpose(&self) -> Self {
        Self {
            a: self.a,
            b: self.c,
            c: self.b,
            d: self.d,
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

impl ChiSquareResult {
    pub fn significant(&self) -> bool {
        self.p_value <= ALPHA
    }
}

/// Pearson's X² for a 2×2 table, without continuity correction, df = 1.
pub fn pearson_chi_square(t: &ContingencyTable2x2) -> Result<ChiSquareResult, StatsError> {
    let (a, b, c, d) = (t.a as f64, t.b as f64, t.c as f64, t.d as f64);
    let margins = [
        (t.a as u128 + t.b as u128, "first row"),
        (t.c as u128 + t.d as u128, "second row"),
        (t.a as u128 + t.c as u128, "first column"),
        (t.b as u128 + t.d as u128, "second column"),
    ];
    if let Some((_, which)) = margins.iter().find(|(m, _)| *m == 0) {
        return Err(StatsError::DegenerateMargin(which));
    }
    let n = a + b + c + d;
    let cross = a * d - b * c;
    let denom = (a + b) * (c + d) * (a + c) * (b + d);
    let statistic = n * cross * cross / denom;
    Ok(ChiSquareResult {
        statistic,
        df: 1,
        p_value: chi_square_sf(statistic, 1)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyRow {
    pub label: String,
    pub count: u64,
    pub percent: f64,
}

impl FrequencyRow {
    /// Percentage in tenths, rounded half-up: `round(1000·n / N)`.
    fn tenths(count: u64, base: u64) -> u64 {
        ((2000 * count as u128 + base as u128) / (2 * base as u128)) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub base: u64,
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyTable {
    /// Percentages formatted to one decimal.
    pub fn percent_strings(&self) -> Vec<String> {
        self.rows.iter().map(|r| format!("{:.1}", r.percent)).collect()
    }
}

/// Percentages of the total count, one decimal, half-up.
pub fn tabulate<S: AsRef<str>>(counts: &[(S, u64)]) -> Result<FrequencyTable, StatsError> {
    let total = counts
        .iter()
        .try_fold(0u64, |acc, (_, n)| acc.checked_add(*n))
        .ok_or(StatsError::Overflow)?;
    tabulate_with_base(counts, total)
}

/// Percentages of an explicit base `N`. Multi-response questions pass the
/// respondent count, so shares may add up to more than 100%.
pub fn tabulate_with_base<S: AsRef<str>>(
    counts: &[(S, u64)],
    base: u64,
) -> Result<FrequencyTable, StatsError> {
    if counts.is_empty() || base == 0 {
        return Err(StatsError::Empty);
    }
    let rows = counts
        .iter()
        .map(|(label, n)| {
            if *n > base {
                return Err(StatsError::CountAboveBase {
                    label: label.as_ref().to_owned(),
                    count: *n,
                    base,
                });
            }
            Ok(FrequencyRow {
                label: label.as_ref().to_owned(),
                count: *n,
                percent: FrequencyRow::tenths(*n, base) as f64 / 10.0,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(FrequencyTable { base, rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptiveSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (N − 1 denominator).
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, sample sd, min and max in a single Welford pass.
pub fn describe(values: &[f64]) -> Result<DescriptiveSummary, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewValues(values.len()));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(StatsError::NonFinite(i));
        }
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
        min = min.min(x);
        max = max.max(x);
    }
    Ok(DescriptiveSummary {
        n: values.len(),
        mean: mean.clamp(min, max),
        sd: (m2.max(0.0) / (values.len() - 1) as f64).sqrt(),
        min,
        max,
    })
}

// ---------------------------------------------------------------------------
// Fixtures

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Reported {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossTab {
    pub factor: String,
    pub rows: [String; 2],
    pub counts: [[u64; 2]; 2],
    #[serde(default)]
    pub reported: Option<Reported>,
}

impl CrossTab {
    pub fn table(&self, columns: &[String; 2]) -> ContingencyTable2x2 {
        let [[a, b], [c, d]] = self.counts;
        ContingencyTable2x2 {
            a,
            b,
            c,
            d,
            row_labels: self.rows.clone(),
            col_labels: columns.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossTabGroup {
    pub title: String,
    pub column_factor: String,
    pub columns: [String; 2],
    #[serde(rename = "table")]
    pub tables: Vec<CrossTab>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContingencyFixture {
    #[serde(rename = "group", default)]
    pub groups: Vec<CrossTabGroup>,
}

pub fn parse_contingency_fixture(text: &str) -> Result<ContingencyFixture, StatsError> {
    toml::from_str(text).map_err(|e| StatsError::Fixture(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossTabResult {
    pub group: String,
    pub factor: String,
    pub table: ContingencyTable2x2,
    pub result: ChiSquareResult,
    pub reported: Option<Reported>,
}

impl CrossTabResult {
    /// True when the computed pair, rounded to 3 decimals, equals the reported pair.
    pub fn matches_reported(&self) -> Option<bool> {
        self.reported.as_ref().map(|r| {
            format!("{:.3}", self.result.statistic) == format!("{:.3}", r.statistic)
                && format!("{:.3}", self.result.p_value) == format!("{:.3}", r.p_value)
        })
    }
}

pub fn analyze(fixture: &ContingencyFixture) -> Result<Vec<CrossTabResult>, StatsError> {
    let mut out = Vec::new();
    for g in &fixture.groups {
        for t in &g.tables {
            let table = t.table(&g.columns);
            let result = pearson_chi_square(&table)?;
            out.push(CrossTabResult {
                group: g.title.clone(),
                factor: t.factor.clone(),
                table,
                result,
                reported: t.reported.clone(),
            });
        }
    }
    Ok(out)
}

/// Text report laid out as one block per group: both rows of counts, X² and p
/// on the first row, and the association verdict at α = 0.05.
pub fn render_chi_square_report(fixture: &ContingencyFixture) -> Result<String, StatsError> {
    let results = analyze(fixture)?;
    let mut s = String::new();
    let mut idx = 0;
    for g in &fixture.groups {
        let _ = writeln!(s, "{}", g.title);
        let _ = writeln!(
            s,
            "  {:<44} {:<8} {:>22} {:>22} {:>8} {:>7}  verdict",
            "", "", g.columns[0], g.columns[1], "X2", "p"
        );
        let _ = writeln!(s, "  {:<44} {:<8} ({})", "", "", g.column_factor);
        for t in &g.tables {
            let r = &results[idx];
            idx += 1;
            let verdict = if r.result.significant() {
                "associated *"
            } else {
                "independent"
            };
            let check = match r.matches_reported() {
                Some(true) => "  [matches reported]",
                Some(false) => "  [DIFFERS from reported]",
                None => "",
            };
            let _ = writeln!(
                s,
                "  {:<44} {:<8} {:>22} {:>22} {:>8.3} {:>7.3}  {}{}",
                t.factor, t.rows[0], t.counts[0][0], t.counts[0][1], r.result.statistic,
                r.result.p_value, verdict, check
            );
            let _ = writeln!(
                s,
                "  {:<44} {:<8} {:>22} {:>22}",
                "", t.rows[1], t.counts[1][0], t.counts[1][1]
            );
        }
        s.push('\n');
    }
    let _ = writeln!(s, "* p <= {ALPHA}: null hypothesis of independence rejected");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountOption {
    pub label: String,
    pub n: u64,
    #[serde(default)]
    pub reported: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountQuestion {
    pub title: String,
    /// Respondent count for multi-response questions; defaults to the sum.
    #[serde(default)]
    pub base: Option<u64>,
    #[serde(rename = "option")]
    pub options: Vec<CountOption>,
}

impl CountQuestion {
    pub fn tabulate(&self) -> Result<FrequencyTable, StatsError> {
        let counts: Vec<(&str, u64)> = self.options.iter().map(|o| (o.label.as_str(), o.n)).collect();
        match self.base {
            Some(base) => tabulate_with_base(&counts, base),
            None => tabulate(&counts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountSection {
    pub title: String,
    #[serde(rename = "question")]
    pub questions: Vec<CountQuestion>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountFixture {
    #[serde(rename = "section", default)]
    pub sections: Vec<CountSection>,
}

pub fn parse_count_fixture(text: &str) -> Result<CountFixture, StatsError> {
    toml::from_str(text).map_err(|e| StatsError::Fixture(e.to_string()))
}

pub fn render_tabulation_report(fixture: &CountFixture) -> Result<String, StatsError> {
    let mut s = String::new();
    for sec in &fixture.sections {
        let _ = writeln!(s, "{}", sec.title);
        let _ = writeln!(s, "  {:<70} {:>6} {:>7}", "", "N", "%");
        for q in &sec.questions {
            let table = q.tabulate()?;
            let _ = writeln!(s, "  {}  (base {})", q.title, table.base);
            for (row, opt) in table.rows.iter().zip(&q.options) {
                let flag = match opt.reported {
                    Some(r) if format!("{r:.1}") == format!("{:.1}", row.percent) => "",
                    Some(_) => "  [DIFFERS from reported]",
                    None => "",
                };
                let _ = writeln!(s, "    {:<68} {:>6} {:>7.1}{flag}", row.label, row.count, row.percent);
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.1) - 2.252_712_651_734_206).abs() < 1e-12);
    }

    #[test]
    fn sf_edges() {
        for df in 1..=10 {
            assert_eq!(chi_square_sf(0.0, df), Ok(1.0));
        }
        assert_eq!(chi_square_sf(-1.0, 1), Err(StatsError::Domain(-1.0)));
        assert!(chi_square_sf(f64::NAN, 1).is_err());
        assert_eq!(chi_square_sf(1.0, 0), Err(StatsError::ZeroDf));
        // df = 2 has the closed form exp(-x/2)
        for x in [0.5, 3.0, 17.0, 90.0] {
            assert!((chi_square_sf(x, 2).unwrap() - (-x / 2.0f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn age_and_difficulty_crosstab() {
        let r = pearson_chi_square(&ContingencyTable2x2::new(19, 32, 31, 18)).unwrap();
        assert_eq!(format!("{:.3}", r.statistic), "6.763");
        assert_eq!(format!("{:.3}", r.p_value), "0.009");
        assert_eq!(r.df, 1);
        assert!(r.significant());
    }

    #[test]
    fn independent_table() {
        let r = pearson_chi_square(&ContingencyTable2x2::new(10, 10, 10, 10)).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant());
    }

    #[test]
    fn degenerate_margins() {
        assert_eq!(
            pearson_chi_square(&ContingencyTable2x2::new(0, 0, 3, 4)),
            Err(StatsError::DegenerateMargin("first row"))
        );
        assert_eq!(
            pearson_chi_square(&ContingencyTable2x2::new(1, 0, 3, 0)),
            Err(StatsError::DegenerateMargin("second column"))
        );
    }

    #[test]
    fn tabulate_examples() {
        let t = tabulate(&[("No", 171), ("Yes", 100)]).unwrap();
        assert_eq!(t.percent_strings(), ["63.1", "36.9"]);
        assert_eq!(tabulate(&[("x", 1)]).unwrap().percent_strings(), ["100.0"]);
        let t = tabulate(&[("Some", 39), ("High", 54), ("Low", 6), ("None", 1)]).unwrap();
        assert_eq!(t.percent_strings(), ["39.0", "54.0", "6.0", "1.0"]);
        assert_eq!(tabulate::<&str>(&[]), Err(StatsError::Empty));
        assert_eq!(tabulate(&[("a", 0)]), Err(StatsError::Empty));
    }

    #[test]
    fn half_up_rounding_is_exact() {
        // 1/8 = 12.5% exactly, 1/16 = 6.25% → 6.3, 3/16 = 18.75% → 18.8
        let t = tabulate_with_base(&[("a", 1), ("b", 3)], 16).unwrap();
        assert_eq!(t.percent_strings(), ["6.3", "18.8"]);
        let t = tabulate_with_base(&[("a", 1)], 2000).unwrap();
        assert_eq!(t.percent_strings(), ["0.1"]); // 0.05 → 0.1
        assert!(matches!(
            tabulate_with_base(&[("a", 5)], 4),
            Err(StatsError::CountAboveBase { .. })
        ));
    }

    #[test]
    fn multi_response_base() {
        let t = tabulate_with_base(&[("FS", 42), ("FP", 34), ("Other", 3)], 54).unwrap();
        assert_eq!(t.percent_strings(), ["77.8", "63.0", "5.6"]);
    }

    #[test]
    fn describe_examples() {
        let d = describe(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((d.mean, d.sd), (5.0, 0.0));
        let d = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.mean, 2.5);
        // sqrt(5/3)
        assert!((d.sd - 1.290_994_448_735_805_6).abs() < 1e-15);
        assert_eq!((d.min, d.max), (1.0, 4.0));
        assert_eq!(describe(&[1.0]), Err(StatsError::TooFewValues(1)));
        assert_eq!(describe(&[1.0, f64::NAN]), Err(StatsError::NonFinite(1)));
    }

    #[test]
    fn fixture_parsing() {
        let text = r#"
[[group]]
title = "Influence of age"
column_factor = "Age"
columns = ["<= 23", "> 23"]

[[group.table]]
factor = "Difficulty in obtaining drugs"
rows = ["Yes", "No"]
counts = [[19, 32], [31, 18]]
reported = { statistic = 6.763, p_value = 0.009 }
"#;
        let f = parse_contingency_fixture(text).unwrap();
        let rs = analyze(&f).unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].matches_reported(), Some(true));
        let report = render_chi_square_report(&f).unwrap();
        assert!(report.contains("6.763"), "{report}");
        assert!(report.contains("0.009"), "{report}");
        assert!(report.contains("associated *"), "{report}");
        assert!(parse_contingency_fixture("[[group]]\ntitle = 3").is_err());
        assert!(parse_contingency_fixture("").unwrap().groups.is_empty());
    }

    #[test]
    fn count_fixture_parsing() {
        let text = r#"
[[section]]
title = "Searching for pharmacies"

[[section.question]]
title = "Difficulty to find a pharmacy"
option = [
  { label = "No", n = 171, reported = 63.1 },
  { label = "Yes", n = 100, reported = 36.9 },
]
"#;
        let f = parse_count_fixture(text).unwrap();
        let t = f.sections[0].questions[0].tabulate().unwrap();
        assert_eq!(t.percent_strings(), ["63.1", "36.9"]);
        let report = render_tabulation_report(&f).unwrap();
        assert!(!report.contains("DIFFERS"), "{report}");
    }
}
