//! Clustered panel data, hypotheses, and groupings of clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClusterId = i64;

/// Largest q̄ for which all q̄! pairings are materialized.
pub const MAX_ENUMERATED_PAIRS: usize = 9;

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub cluster: ClusterId,
    /// Unit or time index; row order within a cluster is taken as time order.
    pub time: i64,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Clustered regression data with an explicit control/treated split.
///
/// Immutable after construction. Rows keep their input order, and the rows
/// of each cluster are indexed in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcome_name: String,
    covariate_names: Vec<String>,
    has_time: bool,
    cluster: Vec<ClusterId>,
    time: Vec<i64>,
    y: Vec<f64>,
    x: Vec<f64>,
    cluster_rows: BTreeMap<ClusterId, Vec<usize>>,
    controls: BTreeSet<ClusterId>,
    treated: BTreeSet<ClusterId>,
}

impl PanelDataset {
    /// Builds a dataset and checks the partition and shape invariants.
    pub fn new(
        outcome_name: impl Into<String>,
        covariate_names: Vec<String>,
        has_time: bool,
        rows: Vec<PanelRow>,
        controls: BTreeSet<ClusterId>,
        treated: BTreeSet<ClusterId>,
    ) -> Result<Self> {
        let d_x = covariate_names.len();
        if d_x == 0 {
            return Err(Error::Schema("at least one covariate is required".into()));
        }
        if rows.is_empty() {
            return Err(Error::Schema("dataset has no rows".into()));
        }
        let n = rows.len();
        let mut cluster = Vec::with_capacity(n);
        let mut time = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * d_x);
        let mut cluster_rows: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
        for (i, row) in rows.into_iter().enumerate() {
            if row.x.len() != d_x {
                return Err(Error::Schema(format!(
                    "row {i} has {} covariates, expected {d_x}",
                    row.x.len()
                )));
            }
            cluster_rows.entry(row.cluster).or_default().push(i);
            cluster.push(row.cluster);
            time.push(row.time);
            y.push(row.y);
            x.extend_from_slice(&row.x);
        }
        check_partition(cluster_rows.keys().copied(), &controls, &treated)?;
        Ok(PanelDataset {
            outcome_name: outcome_name.into(),
            covariate_names,
            has_time,
            cluster,
            time,
            y,
            x,
            cluster_rows,
            controls,
            treated,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_x(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Whether rows carry an explicit time/unit column.
    pub fn has_time(&self) -> bool {
        self.has_time
    }

    pub fn controls(&self) -> &BTreeSet<ClusterId> {
        &self.controls
    }

    pub fn treated(&self) -> &BTreeSet<ClusterId> {
        &self.treated
    }

    /// All cluster ids in ascending order.
    pub fn cluster_ids(&self) -> impl Iterator<Item = ClusterId> + '_ {
        self.cluster_rows.keys().copied()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_rows.len()
    }

    pub fn contains_cluster(&self, id: ClusterId) -> bool {
        self.cluster_rows.contains_key(&id)
    }

    /// n_j, or 0 for an unknown cluster.
    pub fn cluster_size(&self, id: ClusterId) -> usize {
        self.cluster_rows.get(&id).map_or(0, Vec::len)
    }

    pub fn cluster_sizes(&self) -> BTreeMap<ClusterId, usize> {
        self.cluster_rows
            .iter()
            .map(|(&id, rows)| (id, rows.len()))
            .collect()
    }

    /// Row indices of a cluster in input order.
    pub fn rows_of(&self, id: ClusterId) -> &[usize] {
        self.cluster_rows.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn cluster_of(&self, row: usize) -> ClusterId {
        self.cluster[row]
    }

    pub fn time(&self, row: usize) -> i64 {
        self.time[row]
    }

    pub fn y(&self, row: usize) -> f64 {
        self.y[row]
    }

    pub fn x_row(&self, row: usize) -> &[f64] {
        let d = self.d_x();
        &self.x[row * d..(row + 1) * d]
    }

    pub fn x(&self, row: usize, col: usize) -> f64 {
        self.x[row * self.d_x() + col]
    }

    /// Materializes the rows, e.g. for writing or rebuilding.
    pub fn rows(&self) -> Vec<PanelRow> {
        (0..self.n())
            .map(|i| PanelRow {
                cluster: self.cluster[i],
                time: self.time[i],
                y: self.y[i],
                x: self.x_row(i).to_vec(),
            })
            .collect()
    }

    /// Same rows with a different control/treated split.
    pub fn with_partition(
        &self,
        controls: BTreeSet<ClusterId>,
        treated: BTreeSet<ClusterId>,
    ) -> Result<Self> {
        check_partition(self.cluster_ids(), &controls, &treated)?;
        Ok(PanelDataset {
            controls,
            treated,
            ..self.clone()
        })
    }
}

fn check_partition(
    clusters: impl Iterator<Item = ClusterId>,
    controls: &BTreeSet<ClusterId>,
    treated: &BTreeSet<ClusterId>,
) -> Result<()> {
    if controls.is_empty() || treated.is_empty() {
        return Err(Error::Partition(
            "both the control and the treated set must be nonempty".into(),
        ));
    }
    if let Some(both) = controls.intersection(treated).next() {
        return Err(Error::Partition(format!(
            "cluster {both} is listed as both control and treated"
        )));
    }
    let present: BTreeSet<ClusterId> = clusters.collect();
    for id in &present {
        if !controls.contains(id) && !treated.contains(id) {
            return Err(Error::Partition(format!(
                "cluster {id} is neither control nor treated"
            )));
        }
    }
    for id in controls.iter().chain(treated) {
        if !present.contains(id) {
            return Err(Error::Partition(format!("cluster {id} has no rows")));
        }
    }
    Ok(())
}

/// Column mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub cluster: String,
    pub time: Option<String>,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub delimiter: u8,
}

impl Schema {
    pub fn new(cluster: &str, time: Option<&str>, outcome: &str, covariates: &[&str]) -> Self {
        Schema {
            cluster: cluster.to_string(),
            time: time.map(str::to_string),
            outcome: outcome.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            delimiter: b',',
        }
    }

    /// The layout `write_panel` produces for `d`.
    pub fn for_dataset(d: &PanelDataset) -> Self {
        Schema {
            cluster: "cluster".into(),
            time: Some("time".into()),
            outcome: d.outcome_name().to_string(),
            covariates: d.covariate_names().to_vec(),
            delimiter: b',',
        }
    }
}

struct RawTable {
    rows: Vec<PanelRow>,
    extra: Vec<f64>,
}

fn read_table(path: &Path, schema: &Schema, extra_col: Option<&str>) -> Result<RawTable> {
    if schema.covariates.is_empty() {
        return Err(Error::Schema("schema names no covariate columns".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let cluster_idx = find(&schema.cluster)?;
    let time_idx = schema.time.as_deref().map(find).transpose()?;
    let y_idx = find(&schema.outcome)?;
    let x_idx = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let extra_idx = extra_col.map(find).transpose()?;

    let mut rows = Vec::new();
    let mut extra = Vec::new();
    let mut position: BTreeMap<ClusterId, i64> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            match record.get(idx) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::Parse {
                    row: row_no,
                    column: name.to_string(),
                    message: "missing value".into(),
                }),
            }
        };
        let int = |idx: usize, name: &str| -> Result<i64> {
            let s = cell(idx, name)?;
            s.parse::<i64>().or_else(|_| {
                // Accept integral floats such as "3.0".
                match s.parse::<f64>() {
                    Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
                    _ => Err(Error::Parse {
                        row: row_no,
                        column: name.to_string(),
                        message: format!("`{s}` is not an integer id"),
                    }),
                }
            })
        };
        let real = |idx: usize, name: &str| -> Result<f64> {
            let s = cell(idx, name)?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row: row_no,
                    column: name.to_string(),
                    message: format!("`{s}` is not a finite number"),
                }),
            }
        };
        let cluster = int(cluster_idx, &schema.cluster)?;
        let time = match (time_idx, &schema.time) {
            (Some(idx), Some(name)) => int(idx, name)?,
            _ => {
                let p = position.entry(cluster).or_insert(0);
                *p += 1;
                *p
            }
        };
        let y = real(y_idx, &schema.outcome)?;
        let x = x_idx
            .iter()
            .zip(&schema.covariates)
            .map(|(&idx, name)| real(idx, name))
            .collect::<Result<Vec<_>>>()?;
        if let (Some(idx), Some(name)) = (extra_idx, extra_col) {
            extra.push(real(idx, name)?);
        }
        rows.push(PanelRow {
            cluster,
            time,
            y,
            x,
        });
    }
    Ok(RawTable { rows, extra })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let position = e.position().map(|p| p.record() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: position.unwrap_or(0),
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a CSV panel and validates it against the given split.
pub fn load_panel(
    path: impl AsRef<Path>,
    schema: &Schema,
    controls: &BTreeSet<ClusterId>,
    treated: &BTreeSet<ClusterId>,
) -> Result<PanelDataset> {
    let table = read_table(path.as_ref(), schema, None)?;
    PanelDataset::new(
        schema.outcome.clone(),
        schema.covariates.clone(),
        schema.time.is_some(),
        table.rows,
        controls.clone(),
        treated.clone(),
    )
}

/// Reads a CSV panel and infers the split from a 0/1 column: a cluster is
/// treated when the column is ever 1 in it. The caller should echo the
/// inferred sets back to the user.
pub fn load_panel_inferred(
    path: impl AsRef<Path>,
    schema: &Schema,
    treatment_column: &str,
) -> Result<PanelDataset> {
    let table = read_table(path.as_ref(), schema, Some(treatment_column))?;
    let mut treated = BTreeSet::new();
    let mut all = BTreeSet::new();
    for (row, flag) in table.rows.iter().zip(&table.extra) {
        all.insert(row.cluster);
        if *flag != 0.0 {
            treated.insert(row.cluster);
        }
    }
    let controls = all.difference(&treated).copied().collect();
    PanelDataset::new(
        schema.outcome.clone(),
        schema.covariates.clone(),
        schema.time.is_some(),
        table.rows,
        controls,
        treated,
    )
}

/// Writes `d` as CSV with columns `cluster,time,<outcome>,<covariates...>`.
/// Values use the shortest round-tripping float representation.
pub fn write_panel(d: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_to(d, file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// As [`write_panel`], to any writer. Lines starting with `#` before the
/// header are skipped by the loaders, so callers may prepend comments.
pub fn write_panel_to<W: std::io::Write>(d: &PanelDataset, out: W) -> Result<()> {
    let path = Path::new("<output>");
    let mut writer = csv::Writer::from_writer(out);
    let schema = Schema::for_dataset(d);
    let mut header = vec![schema.cluster.clone(), "time".to_string(), schema.outcome];
    header.extend(schema.covariates);
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;
    for i in 0..d.n() {
        let mut record = vec![
            d.cluster_of(i).to_string(),
            d.time(i).to_string(),
            format!("{:?}", d.y(i)),
        ];
        record.extend(d.x_row(i).iter().map(|v| format!("{v:?}")));
        writer
            .write_record(&record)
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// A scalar linear restriction c′β = λ tested at level α, with the local
/// drift δ used for power calculations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub c: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Hypothesis {
    pub fn new(c: Vec<f64>, lambda: f64, alpha: f64, delta: f64) -> Result<Self> {
        if c.is_empty() || c.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("c must have a nonzero entry".into()));
        }
        if c.iter().any(|v| !v.is_finite()) || !lambda.is_finite() || !delta.is_finite() {
            return Err(Error::InvalidArgument("c, lambda and delta must be finite".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Hypothesis {
            c,
            lambda,
            alpha,
            delta,
        })
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Hypothesis {
            delta,
            ..self.clone()
        }
    }
}

/// One combined cluster.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Group {
    pub controls: BTreeSet<ClusterId>,
    pub treated: BTreeSet<ClusterId>,
}

impl Group {
    pub fn pair(control: ClusterId, treated: ClusterId) -> Self {
        Group {
            controls: BTreeSet::from([control]),
            treated: BTreeSet::from([treated]),
        }
    }

    pub fn members(&self) -> BTreeSet<ClusterId> {
        self.controls.union(&self.treated).copied().collect()
    }

    pub fn label(&self) -> String {
        let ids: Vec<String> = self.members().iter().map(|c| c.to_string()).collect();
        format!("{{{}}}", ids.join(","))
    }
}

/// A partition of the clusters into combined groups.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Group>,
}

impl Grouping {
    pub fn new(groups: Vec<Group>) -> Self {
        Grouping { groups }
    }

    /// Pairs `(control, treated)`.
    pub fn from_pairs(pairs: &[(ClusterId, ClusterId)]) -> Self {
        Grouping {
            groups: pairs.iter().map(|&(c, t)| Group::pair(c, t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Every group has exactly one control and one treated cluster.
    pub fn is_paired(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.controls.len() == 1 && g.treated.len() == 1)
    }

    /// Parses `c1:t1,c2:t2` or `c1:{t1,t2},c2:t3`. The left side of each
    /// group may also be a braced set.
    pub fn parse(literal: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidArgument(format!("grouping `{literal}`: {msg}"));
        let mut groups = Vec::new();
        let chars: Vec<char> = literal.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let parse_side = |pos: &mut usize| -> Result<BTreeSet<ClusterId>> {
            let mut ids = BTreeSet::new();
            if chars.get(*pos) == Some(&'{') {
                *pos += 1;
                let start = *pos;
                while *pos < chars.len() && chars[*pos] != '}' {
                    *pos += 1;
                }
                if *pos >= chars.len() {
                    return Err(bad("unclosed `{`"));
                }
                let inner: String = chars[start..*pos].iter().collect();
                *pos += 1;
                for tok in inner.split(',') {
                    let id = tok
                        .parse::<ClusterId>()
                        .map_err(|_| bad(&format!("`{tok}` is not a cluster id")))?;
                    if !ids.insert(id) {
                        return Err(bad(&format!("cluster {id} repeated")));
                    }
                }
            } else {
                let start = *pos;
                while *pos < chars.len() && (chars[*pos] == '-' || chars[*pos].is_ascii_digit()) {
                    *pos += 1;
                }
                let tok: String = chars[start..*pos].iter().collect();
                let id = tok
                    .parse::<ClusterId>()
                    .map_err(|_| bad(&format!("expected a cluster id at `{tok}`")))?;
                ids.insert(id);
            }
            Ok(ids)
        };
        while pos < chars.len() {
            let controls = parse_side(&mut pos)?;
            if chars.get(pos) != Some(&':') {
                return Err(bad("expected `:` between control and treated members"));
            }
            pos += 1;
            let treated = parse_side(&mut pos)?;
            groups.push(Group { controls, treated });
            match chars.get(pos) {
                None => {}
                Some(',') => pos += 1,
                Some(c) => return Err(bad(&format!("unexpected `{c}`"))),
            }
        }
        if groups.is_empty() {
            return Err(bad("no groups"));
        }
        Ok(Grouping { groups })
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn side(ids: &BTreeSet<ClusterId>) -> String {
            if ids.len() == 1 {
                ids.iter().next().unwrap().to_string()
            } else {
                let v: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                format!("{{{}}}", v.join(","))
            }
        }
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| format!("{}:{}", side(&g.controls), side(&g.treated)))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// A structural problem with a grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LacksControl { group: usize },
    LacksTreated { group: usize },
    Unassigned { cluster: ClusterId },
    Repeated { cluster: ClusterId },
    Unknown { cluster: ClusterId },
    WrongSide { cluster: ClusterId, group: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LacksControl { group } => write!(f, "group {group} lacks control member"),
            Violation::LacksTreated { group } => write!(f, "group {group} lacks treated member"),
            Violation::Unassigned { cluster } => write!(f, "cluster {cluster} unassigned"),
            Violation::Repeated { cluster } => {
                write!(f, "cluster {cluster} appears in more than one group")
            }
            Violation::Unknown { cluster } => write!(f, "cluster {cluster} is not in the data"),
            Violation::WrongSide { cluster, group } => {
                write!(f, "cluster {cluster} is on the wrong side of group {group}")
            }
        }
    }
}

/// Checks `g` against the cluster sets of `d`. An empty list means valid.
/// Group numbers in the violations are 1-based.
pub fn validate_grouping(g: &Grouping, d: &PanelDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, group) in g.groups.iter().enumerate() {
        let number = i + 1;
        let (mut has_control, mut has_treated) = (false, false);
        for (&id, listed_control) in group
            .controls
            .iter()
            .map(|id| (id, true))
            .chain(group.treated.iter().map(|id| (id, false)))
        {
            if !seen.insert(id) {
                out.push(Violation::Repeated { cluster: id });
            }
            if d.controls().contains(&id) {
                has_control = true;
                if !listed_control {
                    out.push(Violation::WrongSide {
                        cluster: id,
                        group: number,
                    });
                }
            } else if d.treated().contains(&id) {
                has_treated = true;
                if listed_control {
                    out.push(Violation::WrongSide {
                        cluster: id,
                        group: number,
                    });
                }
            } else {
                out.push(Violation::Unknown { cluster: id });
            }
        }
        if !has_control {
            out.push(Violation::LacksControl { group: number });
        }
        if !has_treated {
            out.push(Violation::LacksTreated { group: number });
        }
    }
    for id in d.cluster_ids() {
        if !seen.contains(&id) {
            out.push(Violation::Unassigned { cluster: id });
        }
    }
    out
}

/// Advances `perm` to the next permutation in lexicographic order.
pub fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// All q̄! pairings of sorted controls with permutations of the sorted
/// treated clusters, in lexicographic order.
pub fn enumerate_pairings(
    controls: &BTreeSet<ClusterId>,
    treated: &BTreeSet<ClusterId>,
) -> Result<Vec<Grouping>> {
    if controls.len() != treated.len() {
        return Err(Error::InvalidArgument(format!(
            "pairing needs equal set sizes, got {} controls and {} treated",
            controls.len(),
            treated.len()
        )));
    }
    let q_bar = controls.len();
    if q_bar == 0 {
        return Err(Error::InvalidArgument("no clusters to pair".into()));
    }
    if q_bar > MAX_ENUMERATED_PAIRS {
        return Err(Error::Bound {
            what: "q_bar for pairing enumeration",
            value: q_bar,
            bound: MAX_ENUMERATED_PAIRS,
        });
    }
    let c: Vec<ClusterId> = controls.iter().copied().collect();
    let t: Vec<ClusterId> = treated.iter().copied().collect();
    let mut perm: Vec<usize> = (0..q_bar).collect();
    let mut out = Vec::new();
    loop {
        let pairs: Vec<(ClusterId, ClusterId)> =
            perm.iter().enumerate().map(|(i, &p)| (c[i], t[p])).collect();
        out.push(Grouping::from_pairs(&pairs));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> PanelDataset {
        let mut rows = Vec::new();
        for j in 1..=6 {
            for t in 1..=4 {
                let d = if j >= 4 { 1.0 } else { 0.0 };
                rows.push(PanelRow {
                    cluster: j,
                    time: t,
                    y: j as f64 + 0.1 * t as f64,
                    x: vec![1.0, d],
                });
            }
        }
        PanelDataset::new(
            "y",
            vec!["x".into(), "d".into()],
            true,
            rows,
            BTreeSet::from([1, 2, 3]),
            BTreeSet::from([4, 5, 6]),
        )
        .unwrap()
    }

    #[test]
    fn sizes_and_partition() {
        let d = fixture();
        assert_eq!(d.n(), 24);
        assert_eq!(d.num_clusters(), 6);
        assert_eq!(d.cluster_sizes().values().sum::<usize>(), d.n());
        let err = d
            .with_partition(BTreeSet::from([1, 2, 3]), BTreeSet::from([4, 5]))
            .unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
        let err = d
            .with_partition(BTreeSet::from([1, 2, 3, 4]), BTreeSet::from([4, 5, 6]))
            .unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }

    #[test]
    fn validate_examples() {
        let d = fixture();
        let ok = Grouping::parse("1:4,2:5,3:6").unwrap();
        assert!(validate_grouping(&ok, &d).is_empty());

        let two_controls = Grouping::new(vec![
            Group {
                controls: BTreeSet::from([1, 2]),
                treated: BTreeSet::new(),
            },
            Group {
                controls: BTreeSet::from([3]),
                treated: BTreeSet::from([4, 5, 6]),
            },
        ]);
        let v = validate_grouping(&two_controls, &d);
        assert!(v.iter().any(|e| e.to_string() == "group 1 lacks treated member"));

        let missing = Grouping::parse("1:4,2:5").unwrap();
        let v = validate_grouping(&missing, &d);
        assert!(v.contains(&Violation::Unassigned { cluster: 3 }));
        assert!(v.iter().any(|e| e.to_string() == "cluster 6 unassigned"));

        let swapped = Grouping::parse("4:1,2:5,3:6").unwrap();
        assert!(!validate_grouping(&swapped, &d).is_empty());
    }

    #[test]
    fn parse_and_display() {
        let g = Grouping::parse("1:{3,4}, 2:5").unwrap();
        assert_eq!(g.groups[0].treated, BTreeSet::from([3, 4]));
        assert!(!g.is_paired());
        assert_eq!(g.to_string(), "1:{3,4},2:5");
        assert_eq!(Grouping::parse(&g.to_string()).unwrap(), g);
        assert!(Grouping::parse("1:").is_err());
        assert!(Grouping::parse("1-4").is_err());
        assert!(Grouping::parse("1:{4,5").is_err());
    }

    #[test]
    fn pairing_enumeration() {
        let all = enumerate_pairings(&BTreeSet::from([1, 2, 3]), &BTreeSet::from([4, 5, 6])).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], Grouping::from_pairs(&[(1, 4), (2, 5), (3, 6)]));
        let distinct: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(distinct.len(), 6);
        let d = fixture();
        assert!(all.iter().all(|g| validate_grouping(g, &d).is_empty()));

        let single = enumerate_pairings(&BTreeSet::from([1]), &BTreeSet::from([2])).unwrap();
        assert_eq!(single, vec![Grouping::from_pairs(&[(1, 2)])]);

        assert!(enumerate_pairings(&BTreeSet::from([1, 2]), &BTreeSet::from([3, 4, 5])).is_err());
        let big: BTreeSet<ClusterId> = (0..10).collect();
        let big_t: BTreeSet<ClusterId> = (10..20).collect();
        assert!(matches!(
            enumerate_pairings(&big, &big_t),
            Err(Error::Bound { bound: 9, .. })
        ));
    }

    #[test]
    fn pairing_count_is_factorial() {
        for q in 1..=6usize {
            let c: BTreeSet<ClusterId> = (0..q as i64).collect();
            let t: BTreeSet<ClusterId> = (100..100 + q as i64).collect();
            let fact: usize = (1..=q).product();
            assert_eq!(enumerate_pairings(&c, &t).unwrap().len(), fact);
        }
    }

    #[test]
    fn hypothesis_validation() {
        assert!(Hypothesis::new(vec![0.0, 0.0], 0.0, 0.05, 0.0).is_err());
        assert!(Hypothesis::new(vec![1.0], 0.0, 1.0, 0.0).is_err());
        assert!(Hypothesis::new(vec![1.0], 0.0, 0.0, 0.0).is_err());
        assert!(Hypothesis::new(vec![0.0, 1.0], 0.0, 0.05, -2.0).is_ok());
    }
}
