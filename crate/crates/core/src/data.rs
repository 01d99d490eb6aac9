//! Observed load panels and customer market tables.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covariance::TimeGrid;
use crate::error::{Error, Result};

/// Known number of customers of each type at each substation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketTable {
    substations: Vec<String>,
    types: Vec<String>,
    /// `counts[j][c]`
    counts: Vec<Vec<u32>>,
}

impl MarketTable {
    pub fn new(substations: Vec<String>, types: Vec<String>, counts: Vec<Vec<u32>>) -> Result<Self> {
        if counts.len() != substations.len() {
            return Err(Error::Data(format!(
                "{} market rows for {} substations",
                counts.len(),
                substations.len()
            )));
        }
        if types.is_empty() {
            return Err(Error::Data("market has no customer types".into()));
        }
        for (name, row) in substations.iter().zip(&counts) {
            if row.len() != types.len() {
                return Err(Error::Data(format!(
                    "substation {name} has {} counts for {} types",
                    row.len(),
                    types.len()
                )));
            }
            if row.iter().all(|c| *c == 0) {
                return Err(Error::Data(format!("substation {name} has no customers")));
            }
        }
        Ok(Self {
            substations,
            types,
            counts,
        })
    }

    /// Table with substations and types labelled `1, 2, ...`.
    pub fn from_counts(counts: Vec<Vec<u32>>) -> Result<Self> {
        let c = counts.first().map_or(0, |r| r.len());
        Self::new(
            (1..=counts.len()).map(|j| j.to_string()).collect(),
            (1..=c).map(|c| c.to_string()).collect(),
            counts,
        )
    }

    pub fn num_substations(&self) -> usize {
        self.substations.len()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn substations(&self) -> &[String] {
        &self.substations
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.counts[j].iter().map(|&c| c as f64).collect()
    }

    pub fn total(&self, j: usize) -> u32 {
        self.counts[j].iter().sum()
    }

    /// Pairs of substations whose markets are scalar multiples of each other
    /// (absolute cosine above `1 - 1e-10`).
    pub fn proportional_pairs(&self) -> Vec<(usize, usize)> {
        let rows: Vec<Vec<f64>> = (0..self.num_substations()).map(|j| self.row(j)).collect();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = Vec::new();
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
                let cos = dot / (norm(&rows[a]) * norm(&rows[b]));
                if cos.abs() > 1.0 - 1e-10 {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            substations: idx.iter().map(|&j| self.substations[j].clone()).collect(),
            types: self.types.clone(),
            counts: idx.iter().map(|&j| self.counts[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateValues {
    /// One value per substation, replicated over days and times.
    Scalar(Vec<f64>),
    /// `values[j][i][t]`.
    Functional(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub values: CovariateValues,
}

impl Covariate {
    pub fn value(&self, j: usize, i: usize, t: usize) -> f64 {
        match &self.values {
            CovariateValues::Scalar(v) => v[j],
            CovariateValues::Functional(v) => v[j][i][t],
        }
    }

    pub fn is_functional(&self) -> bool {
        matches!(self.values, CovariateValues::Functional(_))
    }
}

/// Aggregated loads `y_ij(t)` of `J` substations over `I` days on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadPanel {
    grid: TimeGrid,
    substations: Vec<String>,
    days: Vec<i64>,
    /// `loads[j][i]`, each of length N.
    loads: Vec<Vec<DVector<f64>>>,
    /// Functional covariate of the typical surface, `temperature[j][i][t]`.
    temperature: Option<Vec<Vec<Vec<f64>>>>,
    covariates: Vec<Covariate>,
}

impl LoadPanel {
    pub fn new(
        grid: TimeGrid,
        substations: Vec<String>,
        days: Vec<i64>,
        loads: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let n = grid.len();
        if substations.is_empty() || days.is_empty() {
            return Err(Error::Data("panel needs at least one substation and one day".into()));
        }
        if loads.len() != substations.len() {
            return Err(Error::Data(format!(
                "{} load blocks for {} substations",
                loads.len(),
                substations.len()
            )));
        }
        for (name, block) in substations.iter().zip(&loads) {
            if block.len() != days.len() {
                return Err(Error::Data(format!(
                    "substation {name} has {} days, expected {}",
                    block.len(),
                    days.len()
                )));
            }
            for curve in block {
                if curve.len() != n {
                    return Err(Error::Data(format!(
                        "substation {name} has a curve with {} points, grid has {n}",
                        curve.len()
                    )));
                }
                if curve.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("substation {name} has non-finite loads")));
                }
            }
        }
        Ok(Self {
            grid,
            substations,
            days,
            loads,
            temperature: None,
            covariates: Vec::new(),
        })
    }

    fn check_curves(&self, what: &str, v: &[Vec<Vec<f64>>]) -> Result<()> {
        let ok = v.len() == self.num_substations()
            && v.iter().all(|b| {
                b.len() == self.num_days()
                    && b.iter().all(|c| c.len() == self.grid.len() && c.iter().all(|x| x.is_finite()))
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("{what} curves do not match the panel shape")))
        }
    }

    pub fn with_temperature(mut self, temperature: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        self.check_curves("temperature", &temperature)?;
        self.temperature = Some(temperature);
        Ok(self)
    }

    pub fn with_covariate(mut self, cov: Covariate) -> Result<Self> {
        match &cov.values {
            CovariateValues::Scalar(v) => {
                if v.len() != self.num_substations() || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!("scalar covariate {} has wrong length", cov.name)));
                }
            }
            CovariateValues::Functional(v) => self.check_curves(&cov.name, v)?,
        }
        if self.covariates.iter().any(|c| c.name == cov.name) {
            return Err(Error::Data(format!("duplicate covariate {}", cov.name)));
        }
        self.covariates.push(cov);
        Ok(self)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_substations(&self) -> usize {
        self.substations.len()
    }

    pub fn num_days(&self) -> usize {
        self.days.len()
    }

    pub fn num_points(&self) -> usize {
        self.grid.len()
    }

    pub fn substations(&self) -> &[String] {
        &self.substations
    }

    pub fn days(&self) -> &[i64] {
        &self.days
    }

    pub fn load(&self, j: usize, i: usize) -> &DVector<f64> {
        &self.loads[j][i]
    }

    pub fn loads(&self) -> &[Vec<DVector<f64>>] {
        &self.loads
    }

    pub fn temperature(&self) -> Option<&[Vec<Vec<f64>>]> {
        self.temperature.as_deref()
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// Range of the temperature curves, if present.
    pub fn temperature_range(&self) -> Option<(f64, f64)> {
        let t = self.temperature.as_ref()?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in t.iter().flatten().flatten() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        Some((lo, hi))
    }

    /// Panel restricted to the given substations (in the given order).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<Vec<f64>>>| idx.iter().map(|&j| v[j].clone()).collect::<Vec<_>>();
        Self {
            grid: self.grid.clone(),
            substations: idx.iter().map(|&j| self.substations[j].clone()).collect(),
            days: self.days.clone(),
            loads: idx.iter().map(|&j| self.loads[j].clone()).collect(),
            temperature: self.temperature.as_ref().map(pick),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: match &c.values {
                        CovariateValues::Scalar(v) => {
                            CovariateValues::Scalar(idx.iter().map(|&j| v[j]).collect())
                        }
                        CovariateValues::Functional(v) => CovariateValues::Functional(pick(v)),
                    },
                })
                .collect(),
        }
    }

    /// Panel keeping only the first `days` days.
    pub fn first_days(&self, days: usize) -> Self {
        let d = days.min(self.num_days());
        let cut = |v: &Vec<Vec<Vec<f64>>>| v.iter().map(|b| b[..d].to_vec()).collect::<Vec<_>>();
        Self {
            grid: self.grid.clone(),
            substations: self.substations.clone(),
            days: self.days[..d].to_vec(),
            loads: self.loads.iter().map(|b| b[..d].to_vec()).collect(),
            temperature: self.temperature.as_ref().map(cut),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: match &c.values {
                        CovariateValues::Scalar(v) => CovariateValues::Scalar(v.clone()),
                        CovariateValues::Functional(v) => CovariateValues::Functional(cut(v)),
                    },
                })
                .collect(),
        }
    }
}
