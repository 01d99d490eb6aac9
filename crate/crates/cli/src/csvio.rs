//! CSV schemas read and written by the command-line tool.
//!
//! loads `substation,day,time,load`; market `substation,type,count`;
//! temperature `location,day,time,temp` with a `substation,location` map;
//! covariates `substation,day,time,name,value` (day and time blank for
//! scalar covariates). Times are decimal hours in `[0, horizon)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csv::{ReaderBuilder, StringRecord, Writer};
use loadgp::{fit_interpolating_spline, Covariate, CovariateValues, LoadPanel, MarketTable, TimeGrid};
use nalgebra::DVector;

use crate::error::{CliError, Result};

pub const LOADS_HEADER: [&str; 4] = ["substation", "day", "time", "load"];
pub const MARKET_HEADER: [&str; 3] = ["substation", "type", "count"];
pub const TEMPERATURE_HEADER: [&str; 4] = ["location", "day", "time", "temp"];
pub const LOCATIONS_HEADER: [&str; 2] = ["substation", "location"];
pub const COVARIATES_HEADER: [&str; 5] = ["substation", "day", "time", "name", "value"];

/// Input files of one panel.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub loads: PathBuf,
    pub market: PathBuf,
    pub temperature: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub horizon: f64,
}

/// Reads and validates every input file.
pub fn ingest(inputs: &Inputs) -> Result<(LoadPanel, MarketTable)> {
    let mut panel = read_loads(&inputs.loads, inputs.horizon)?;
    let market = read_market(&inputs.market, panel.substations())?;
    match (&inputs.temperature, &inputs.locations) {
        (Some(t), Some(l)) => {
            let temp = read_temperature(t, l, &panel)?;
            panel = panel.with_temperature(temp)?;
        }
        (None, None) => {}
        _ => {
            return Err(CliError::Usage(
                "temperature and locations files must be given together".into(),
            ))
        }
    }
    if let Some(c) = &inputs.covariates {
        for cov in read_covariates(c, &panel)? {
            panel = panel.with_covariate(cov)?;
        }
    }
    Ok((panel, market))
}

struct Table {
    path: PathBuf,
    rows: Vec<(u64, StringRecord)>,
}

impl Table {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut rdr = ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
        let found = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        if found.iter().ne(header.iter().copied()) {
            return Err(CliError::Header {
                path: path.into(),
                expected: header.join(","),
                found: found.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.into(),
            rows,
        })
    }

    fn cell<'r>(&self, line: u64, rec: &'r StringRecord, header: &[&str], col: usize) -> Result<&'r str> {
        match rec.get(col) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(CliError::MissingCell {
                path: self.path.clone(),
                line,
                column: header[col].into(),
            }),
        }
    }

    fn optional<'r>(&self, rec: &'r StringRecord, col: usize) -> Option<&'r str> {
        rec.get(col).filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&self, line: u64, header: &[&str], col: usize, value: &str) -> Result<T> {
        value.parse().map_err(|_| CliError::Parse {
            path: self.path.clone(),
            line,
            column: header[col].into(),
            value: value.into(),
        })
    }

    fn number(&self, line: u64, rec: &StringRecord, header: &[&str], col: usize) -> Result<f64> {
        let v: f64 = self.parse(line, header, col, self.cell(line, rec, header, col)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Parse {
                path: self.path.clone(),
                line,
                column: header[col].into(),
                value: v.to_string(),
            })
        }
    }

    fn incomplete(&self, message: String) -> CliError {
        CliError::Incomplete {
            path: self.path.clone(),
            message,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::Parse {
        path: path.into(),
        line,
        column: String::new(),
        value: e.to_string(),
    }
}

/// Day-indexed curves on a grid: `(substation or location) -> day -> [(time, value, line)]`.
type Groups = Vec<BTreeMap<i64, Vec<(f64, f64, u64)>>>;

fn push_point(
    t: &Table,
    groups: &mut Groups,
    names: &mut Vec<String>,
    index: &mut HashMap<String, usize>,
    key: &str,
    day: i64,
    point: (f64, f64, u64),
) -> Result<()> {
    let k = *index.entry(key.to_string()).or_insert_with(|| {
        names.push(key.to_string());
        groups.push(BTreeMap::new());
        names.len() - 1
    });
    let curve = groups[k].entry(day).or_default();
    if let Some(&(prev, _, _)) = curve.last() {
        if !(point.0 > prev) {
            return Err(CliError::NonMonotoneTime {
                path: t.path.clone(),
                line: point.2,
                substation: key.into(),
                day,
            });
        }
    }
    curve.push(point);
    Ok(())
}

pub fn read_loads(path: &Path, horizon: f64) -> Result<LoadPanel> {
    let h = &LOADS_HEADER;
    let t = Table::open(path, h)?;
    let mut groups: Groups = Vec::new();
    let mut names = Vec::new();
    let mut index = HashMap::new();
    for (line, rec) in &t.rows {
        let sub = t.cell(*line, rec, h, 0)?;
        let day: i64 = t.parse(*line, h, 1, t.cell(*line, rec, h, 1)?)?;
        let time = t.number(*line, rec, h, 2)?;
        let load = t.number(*line, rec, h, 3)?;
        push_point(&t, &mut groups, &mut names, &mut index, sub, day, (time, load, *line))?;
    }
    if names.is_empty() {
        return Err(t.incomplete("no load rows".into()));
    }
    let days: Vec<i64> = groups[0].keys().copied().collect();
    let times: Vec<f64> = groups[0][&days[0]].iter().map(|p| p.0).collect();
    let grid = TimeGrid::new(times.clone(), horizon)?;
    let mut loads = Vec::with_capacity(names.len());
    for (name, g) in names.iter().zip(&groups) {
        if g.keys().ne(days.iter()) {
            return Err(t.incomplete(format!("substation {name} does not cover the same days as {}", names[0])));
        }
        let mut block = Vec::with_capacity(days.len());
        for (day, curve) in g {
            if curve.len() != times.len() || curve.iter().zip(&times).any(|(p, t)| p.0 != *t) {
                return Err(t.incomplete(format!(
                    "substation {name}, day {day} is not observed on the common grid of {} points",
                    times.len()
                )));
            }
            block.push(DVector::from_iterator(curve.len(), curve.iter().map(|p| p.1)));
        }
        loads.push(block);
    }
    Ok(LoadPanel::new(grid, names, days, loads)?)
}

/// Market table aligned with `substations`; types in order of first appearance.
pub fn read_market(path: &Path, substations: &[String]) -> Result<MarketTable> {
    let h = &MARKET_HEADER;
    let t = Table::open(path, h)?;
    let pos: HashMap<&str, usize> = substations.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let mut types: Vec<String> = Vec::new();
    let mut entries: HashMap<(usize, usize), u32> = HashMap::new();
    for (line, rec) in &t.rows {
        let sub = t.cell(*line, rec, h, 0)?;
        let ty = t.cell(*line, rec, h, 1)?;
        let count: i64 = t.parse(*line, h, 2, t.cell(*line, rec, h, 2)?)?;
        let j = *pos.get(sub).ok_or_else(|| CliError::UnknownSubstation {
            path: t.path.clone(),
            line: *line,
            substation: sub.into(),
        })?;
        if count < 0 {
            return Err(CliError::NegativeCount {
                path: t.path.clone(),
                line: *line,
                substation: sub.into(),
                count,
            });
        }
        let c = match types.iter().position(|x| x == ty) {
            Some(c) => c,
            None => {
                types.push(ty.into());
                types.len() - 1
            }
        };
        let count = u32::try_from(count).map_err(|_| CliError::Parse {
            path: t.path.clone(),
            line: *line,
            column: h[2].into(),
            value: count.to_string(),
        })?;
        if entries.insert((j, c), count).is_some() {
            return Err(CliError::Duplicate {
                path: t.path.clone(),
                line: *line,
            });
        }
    }
    let mut counts = vec![vec![0u32; types.len()]; substations.len()];
    let mut seen = vec![false; substations.len()];
    for ((j, c), v) in entries {
        counts[j][c] = v;
        seen[j] = true;
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(t.incomplete(format!("no market rows for substation {}", substations[j])));
    }
    Ok(MarketTable::new(substations.to_vec(), types, counts)?)
}

fn read_locations(path: &Path, substations: &[String]) -> Result<Vec<String>> {
    let h = &LOCATIONS_HEADER;
    let t = Table::open(path, h)?;
    let mut map = HashMap::new();
    for (line, rec) in &t.rows {
        let sub = t.cell(*line, rec, h, 0)?;
        let loc = t.cell(*line, rec, h, 1)?;
        if !substations.iter().any(|s| s == sub) {
            return Err(CliError::UnknownSubstation {
                path: t.path.clone(),
                line: *line,
                substation: sub.into(),
            });
        }
        if map.insert(sub.to_string(), loc.to_string()).is_some() {
            return Err(CliError::Duplicate {
                path: t.path.clone(),
                line: *line,
            });
        }
    }
    substations
        .iter()
        .map(|s| {
            map.remove(s)
                .ok_or_else(|| t.incomplete(format!("substation {s} has no location")))
        })
        .collect()
}

/// Temperature curves `[j][i][t]` on the panel grid. Readings that already
/// sit on the grid are used as they are; otherwise each location's readings
/// are joined across days, interpolated with a cubic spline and held
/// constant beyond the first and last reading.
pub fn read_temperature(path: &Path, locations_path: &Path, panel: &LoadPanel) -> Result<Vec<Vec<Vec<f64>>>> {
    let locations = read_locations(locations_path, panel.substations())?;
    let h = &TEMPERATURE_HEADER;
    let t = Table::open(path, h)?;
    let mut groups: Groups = Vec::new();
    let mut names = Vec::new();
    let mut index = HashMap::new();
    for (line, rec) in &t.rows {
        let loc = t.cell(*line, rec, h, 0)?;
        let day: i64 = t.parse(*line, h, 1, t.cell(*line, rec, h, 1)?)?;
        let time = t.number(*line, rec, h, 2)?;
        let temp = t.number(*line, rec, h, 3)?;
        push_point(&t, &mut groups, &mut names, &mut index, loc, day, (time, temp, *line))?;
    }
    let grid = panel.grid().times();
    let horizon = panel.grid().horizon();
    let mut per_location: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for loc in locations.iter().collect::<BTreeSet<_>>() {
        let k = *index
            .get(loc.as_str())
            .ok_or_else(|| t.incomplete(format!("no readings for location {loc}")))?;
        let g = &groups[k];
        let on_grid = panel.days().iter().all(|d| {
            g.get(d)
                .is_some_and(|c| c.len() == grid.len() && c.iter().zip(grid).all(|(p, t)| p.0 == *t))
        });
        let curves = if on_grid {
            panel
                .days()
                .iter()
                .map(|d| g[d].iter().map(|p| p.1).collect())
                .collect()
        } else {
            let first = *g.keys().next().unwrap();
            let points: Vec<(f64, f64)> = g
                .iter()
                .flat_map(|(d, c)| c.iter().map(move |p| ((d - first) as f64 * horizon + p.0, p.1)))
                .collect();
            for d in panel.days() {
                if !g.contains_key(d) {
                    return Err(t.incomplete(format!("location {loc} has no readings on day {d}")));
                }
            }
            let spline = fit_interpolating_spline(&points)?;
            panel
                .days()
                .iter()
                .map(|d| {
                    grid.iter()
                        .map(|&s| spline.eval_clamped((d - first) as f64 * horizon + s))
                        .collect()
                })
                .collect()
        };
        per_location.insert(loc.as_str(), curves);
    }
    Ok(locations.iter().map(|l| per_location[l.as_str()].clone()).collect())
}

fn grid_index(grid: &[f64], t: f64) -> Option<usize> {
    grid.iter().position(|g| (g - t).abs() <= 1e-9 * (1.0 + g.abs()))
}

/// Scalar and functional covariates in order of first appearance.
pub fn read_covariates(path: &Path, panel: &LoadPanel) -> Result<Vec<Covariate>> {
    let h = &COVARIATES_HEADER;
    let t = Table::open(path, h)?;
    let pos: HashMap<&str, usize> = panel.substations().iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let day_pos: HashMap<i64, usize> = panel.days().iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let grid = panel.grid().times();
    let (j, d, n) = (panel.num_substations(), panel.num_days(), grid.len());
    enum Acc {
        Scalar(Vec<Option<f64>>),
        Functional(Vec<Vec<Vec<Option<f64>>>>),
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();
    for (line, rec) in &t.rows {
        let sub = t.cell(*line, rec, h, 0)?;
        let name = t.cell(*line, rec, h, 3)?;
        let value = t.number(*line, rec, h, 4)?;
        let s = *pos.get(sub).ok_or_else(|| CliError::UnknownSubstation {
            path: t.path.clone(),
            line: *line,
            substation: sub.into(),
        })?;
        let scalar = t.optional(rec, 1).is_none() && t.optional(rec, 2).is_none();
        if !acc.contains_key(name) {
            order.push(name.into());
            acc.insert(
                name.into(),
                if scalar {
                    Acc::Scalar(vec![None; j])
                } else {
                    Acc::Functional(vec![vec![vec![None; n]; d]; j])
                },
            );
        }
        let slot = match acc.get_mut(name).unwrap() {
            Acc::Scalar(v) if scalar => &mut v[s],
            Acc::Functional(v) if !scalar => {
                let day: i64 = t.parse(*line, h, 1, t.cell(*line, rec, h, 1)?)?;
                let time = t.number(*line, rec, h, 2)?;
                let (Some(&i), Some(k)) = (day_pos.get(&day), grid_index(grid, time)) else {
                    return Err(t.incomplete(format!(
                        "line {line}: covariate {name} at day {day}, time {time} is off the load grid"
                    )));
                };
                &mut v[s][i][k]
            }
            _ => {
                return Err(t.incomplete(format!(
                    "line {line}: covariate {name} mixes scalar and functional rows"
                )))
            }
        };
        if slot.replace(value).is_some() {
            return Err(CliError::Duplicate {
                path: t.path.clone(),
                line: *line,
            });
        }
    }
    let missing = |name: &str| t.incomplete(format!("covariate {name} is missing values"));
    order
        .into_iter()
        .map(|name| {
            let values = match acc.remove(&name).unwrap() {
                Acc::Scalar(v) => CovariateValues::Scalar(
                    v.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing(&name))?,
                ),
                Acc::Functional(v) => CovariateValues::Functional(
                    v.into_iter()
                        .map(|b| b.into_iter().map(|c| c.into_iter().collect::<Option<Vec<_>>>()).collect())
                        .collect::<Option<Vec<Vec<Vec<f64>>>>>()
                        .ok_or_else(|| missing(&name))?,
                ),
            };
            Ok(Covariate { name, values })
        })
        .collect()
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path, header: &[&str]) -> Result<Writer<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = Writer::from_writer(file);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    Ok(w)
}

fn finish(path: &Path, mut w: Writer<File>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn row<const K: usize>(path: &Path, w: &mut Writer<File>, fields: [&str; K]) -> Result<()> {
    w.write_record(fields).map_err(|e| csv_error(path, e))
}

pub fn write_loads(path: &Path, panel: &LoadPanel) -> Result<()> {
    let mut w = writer(path, &LOADS_HEADER)?;
    for (j, name) in panel.substations().iter().enumerate() {
        for (i, day) in panel.days().iter().enumerate() {
            for (t, v) in panel.grid().times().iter().zip(panel.load(j, i).iter()) {
                row(path, &mut w, [name, &day.to_string(), &t.to_string(), &fmt_f64(*v)])?;
            }
        }
    }
    finish(path, w)
}

pub fn write_market(path: &Path, market: &MarketTable) -> Result<()> {
    let mut w = writer(path, &MARKET_HEADER)?;
    for (name, counts) in market.substations().iter().zip(market.counts()) {
        for (ty, c) in market.types().iter().zip(counts) {
            row(path, &mut w, [name, ty, &c.to_string()])?;
        }
    }
    finish(path, w)
}

/// Writes the panel's temperature curves once per location, using the first
/// substation at each location.
pub fn write_temperature(path: &Path, locations_path: &Path, panel: &LoadPanel, locations: &[String]) -> Result<()> {
    let temp = panel
        .temperature()
        .ok_or_else(|| CliError::Usage("panel has no temperature curves".into()))?;
    let mut lw = writer(locations_path, &LOCATIONS_HEADER)?;
    for (name, loc) in panel.substations().iter().zip(locations) {
        row(locations_path, &mut lw, [name, loc])?;
    }
    finish(locations_path, lw)?;
    let mut w = writer(path, &TEMPERATURE_HEADER)?;
    let mut done = BTreeSet::new();
    for (j, loc) in locations.iter().enumerate() {
        if !done.insert(loc) {
            continue;
        }
        for (i, day) in panel.days().iter().enumerate() {
            for (t, v) in panel.grid().times().iter().zip(&temp[j][i]) {
                row(path, &mut w, [loc, &day.to_string(), &t.to_string(), &fmt_f64(*v)])?;
            }
        }
    }
    finish(path, w)
}

pub fn write_covariates(path: &Path, panel: &LoadPanel) -> Result<()> {
    let mut w = writer(path, &COVARIATES_HEADER)?;
    for cov in panel.covariates() {
        for (j, name) in panel.substations().iter().enumerate() {
            match &cov.values {
                CovariateValues::Scalar(v) => row(path, &mut w, [name, "", "", &cov.name, &fmt_f64(v[j])])?,
                CovariateValues::Functional(v) => {
                    for (i, day) in panel.days().iter().enumerate() {
                        for (t, x) in panel.grid().times().iter().zip(&v[j][i]) {
                            row(path, &mut w, [name, &day.to_string(), &t.to_string(), &cov.name, &fmt_f64(*x)])?;
                        }
                    }
                }
            }
        }
    }
    finish(path, w)
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| CliError::Json {
        path: path.into(),
        source: e,
    })?;
    file.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| CliError::Json {
        path: path.into(),
        source: e,
    })
}
