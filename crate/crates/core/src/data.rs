//! Clustered data, model specification, CSV ingestion and validation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convolution::ConvolutionKind;
use crate::covparam::{CovSpec, CovStructure};
use crate::error::{Error, Result};

/// Name given to a column of ones added by the mapping.
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub known_var: Option<DVector<f64>>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `M` clusters sharing the same fixed (`p`) and random (`q`) designs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredData {
    clusters: Vec<Cluster>,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
}

impl ClusteredData {
    pub fn new(clusters: Vec<Cluster>, fixed_names: Vec<String>, random_names: Vec<String>) -> Result<Self> {
        let p = fixed_names.len();
        let q = random_names.len();
        if clusters.is_empty() {
            return Err(Error::Data("at least one cluster is required".into()));
        }
        if p == 0 || q == 0 {
            return Err(Error::Data("need at least one fixed and one random column".into()));
        }
        let with_var = clusters[0].known_var.is_some();
        for c in &clusters {
            let n = c.y.len();
            if n == 0 {
                return Err(Error::Data(format!("cluster `{}` is empty", c.id)));
            }
            if c.x.shape() != (n, p) {
                return Err(Error::Dimension {
                    context: "fixed-effect design",
                    expected: p,
                    got: c.x.ncols(),
                });
            }
            if c.z.shape() != (n, q) {
                return Err(Error::Dimension {
                    context: "random-effect design",
                    expected: q,
                    got: c.z.ncols(),
                });
            }
            if c.known_var.is_some() != with_var {
                return Err(Error::Data(
                    "known variances must be given for all clusters or none".into(),
                ));
            }
            if let Some(v) = &c.known_var {
                if v.len() != n {
                    return Err(Error::Dimension {
                        context: "known variances",
                        expected: n,
                        got: v.len(),
                    });
                }
            }
            let finite = c.y.iter().chain(c.x.iter()).chain(c.z.iter()).all(|v| v.is_finite())
                && c.known_var.as_ref().map_or(true, |v| v.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::Data(format!("cluster `{}` contains non-finite values", c.id)));
            }
        }
        Ok(Self {
            clusters,
            fixed_names,
            random_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn p(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn q(&self) -> usize {
        self.random_names.len()
    }

    pub fn has_known_var(&self) -> bool {
        self.clusters[0].known_var.is_some()
    }

    /// Clusters sorted by id (stable), the canonical order used for resampling.
    pub fn sorted_by_id(&self) -> Self {
        let mut clusters = self.clusters.clone();
        clusters.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            clusters,
            ..self.clone()
        }
    }

    /// New data set made of the clusters at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let clusters = indices
            .iter()
            .map(|&i| {
                self.clusters.get(i).cloned().ok_or_else(|| {
                    Error::Data(format!("cluster index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clusters, self.fixed_names.clone(), self.random_names.clone())
    }

    /// Copy with the response replaced cluster by cluster.
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<Self> {
        if ys.len() != self.clusters.len() {
            return Err(Error::Dimension {
                context: "responses",
                expected: self.clusters.len(),
                got: ys.len(),
            });
        }
        let clusters = self
            .clusters
            .iter()
            .zip(ys)
            .map(|(c, y)| Cluster { y, ..c.clone() })
            .collect();
        Self::new(clusters, self.fixed_names.clone(), self.random_names.clone())
    }

    /// All fixed-effect rows stacked into an `N x p` matrix.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let mut x = DMatrix::zeros(n, self.p());
        let mut r = 0;
        for c in &self.clusters {
            x.rows_mut(r, c.len()).copy_from(&c.x);
            r += c.len();
        }
        x
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_obs(), self.clusters.iter().flat_map(|c| c.y.iter().copied()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Residual scale `sigma2` is estimated.
    EstimatedScale,
    /// Per-observation residual variances are known; `sigma2` is fixed at 1.
    KnownVariances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ConvolutionKind,
    pub fixed_cols: Vec<String>,
    pub random_cols: Vec<String>,
    pub cov_structure: CovStructure,
    pub residual_mode: ResidualMode,
}

impl ModelSpec {
    /// Spec whose column lists are taken from `data`.
    pub fn for_data(
        kind: ConvolutionKind,
        cov_structure: CovStructure,
        residual_mode: ResidualMode,
        data: &ClusteredData,
    ) -> Self {
        Self {
            kind,
            fixed_cols: data.fixed_names.clone(),
            random_cols: data.random_names.clone(),
            cov_structure,
            residual_mode,
        }
    }

    pub fn cov_spec(&self) -> Result<CovSpec> {
        CovSpec::new(self.cov_structure, self.random_cols.len())
    }

    pub fn known_variances(&self) -> bool {
        self.residual_mode == ResidualMode::KnownVariances
    }

    pub fn with_kind(&self, kind: ConvolutionKind) -> Self {
        Self { kind, ..self.clone() }
    }
}

/// Which CSV columns feed the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub cluster: String,
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub known_var: Option<String>,
    pub intercept_fixed: bool,
    pub intercept_random: bool,
}

impl ColumnMapping {
    fn fixed_names(&self) -> Vec<String> {
        with_intercept(self.intercept_fixed, &self.fixed)
    }

    fn random_names(&self) -> Vec<String> {
        with_intercept(self.intercept_random, &self.random)
    }
}

fn with_intercept(intercept: bool, cols: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(cols.len() + 1);
    if intercept {
        out.push(INTERCEPT.to_string());
    }
    out.extend(cols.iter().cloned());
    out
}

pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<ClusteredData> {
    let file = std::fs::File::open(path)?;
    read_csv(file, mapping)
}

/// Reads long-format CSV (one row per observation). Clusters appear in the
/// order their ids are first seen; rows keep file order within a cluster.
pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<ClusteredData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&mapping.cluster)?;
    let y_col = col(&mapping.response)?;
    let fixed_cols = mapping.fixed.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let random_cols = mapping.random.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let var_col = mapping.known_var.as_deref().map(col).transpose()?;
    let fixed_names = mapping.fixed_names();
    let random_names = mapping.random_names();
    let p = fixed_names.len();
    let q = random_names.len();

    struct Rows {
        id: String,
        y: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        v: Vec<f64>,
    }
    let mut order: Vec<Rows> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let row = r + 2;
        let num = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    value: raw.to_string(),
                })
        };
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: mapping.cluster.clone(),
                value: String::new(),
            });
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Rows {
                id,
                y: Vec::new(),
                x: Vec::new(),
                z: Vec::new(),
                v: Vec::new(),
            });
            order.len() - 1
        });
        let y = num(y_col)?;
        let mut xs = Vec::with_capacity(p);
        if mapping.intercept_fixed {
            xs.push(1.0);
        }
        for &c in &fixed_cols {
            xs.push(num(c)?);
        }
        let mut zs = Vec::with_capacity(q);
        if mapping.intercept_random {
            zs.push(1.0);
        }
        for &c in &random_cols {
            zs.push(num(c)?);
        }
        let v = match var_col {
            Some(c) => {
                let v = num(c)?;
                if v <= 0.0 {
                    return Err(Error::Data(format!(
                        "row {row}: known variance must be positive, got {v}"
                    )));
                }
                Some(v)
            }
            None => None,
        };
        let rows = &mut order[slot];
        rows.y.push(y);
        rows.x.extend(xs);
        rows.z.extend(zs);
        rows.v.extend(v);
    }
    if order.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }
    let clusters = order
        .into_iter()
        .map(|r| {
            let n = r.y.len();
            Cluster {
                id: r.id,
                y: DVector::from_vec(r.y),
                x: DMatrix::from_row_slice(n, p, &r.x),
                z: DMatrix::from_row_slice(n, q, &r.z),
                known_var: var_col.map(|_| DVector::from_vec(r.v)),
            }
        })
        .collect();
    ClusteredData::new(clusters, fixed_names, random_names)
}

/// Mapping that reads back what [`write_csv`] writes.
pub fn mapping_for(data: &ClusteredData) -> ColumnMapping {
    let strip = |names: &[String]| -> (bool, Vec<String>) {
        let intercept = names.first().map_or(false, |n| n == INTERCEPT);
        let rest = names.iter().filter(|n| *n != INTERCEPT).cloned().collect();
        (intercept, rest)
    };
    let (intercept_fixed, fixed) = strip(&data.fixed_names);
    let (intercept_random, random) = strip(&data.random_names);
    ColumnMapping {
        cluster: "cluster".into(),
        response: "y".into(),
        fixed,
        random,
        known_var: data.has_known_var().then(|| "known_var".into()),
        intercept_fixed,
        intercept_random,
    }
}

/// Writes long-format CSV with columns `cluster, y`, each distinct covariate
/// once, and `known_var` when present. Numbers use shortest round-trip form.
pub fn write_csv<W: Write>(data: &ClusteredData, writer: W) -> Result<()> {
    let mapping = mapping_for(data);
    // covariate name -> (from X?, column index)
    let mut cols: Vec<(String, bool, usize)> = Vec::new();
    for (j, name) in data.fixed_names.iter().enumerate() {
        if name != INTERCEPT {
            cols.push((name.clone(), true, j));
        }
    }
    for (j, name) in data.random_names.iter().enumerate() {
        if name != INTERCEPT && !cols.iter().any(|(n, _, _)| n == name) {
            cols.push((name.clone(), false, j));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![mapping.cluster.clone(), mapping.response.clone()];
    header.extend(cols.iter().map(|(n, _, _)| n.clone()));
    if data.has_known_var() {
        header.push("known_var".into());
    }
    w.write_record(&header)?;
    for c in &data.clusters {
        for i in 0..c.len() {
            let mut rec = vec![c.id.clone(), c.y[i].to_string()];
            for (_, from_x, j) in &cols {
                let v = if *from_x { c.x[(i, *j)] } else { c.z[(i, *j)] };
                rec.push(v.to_string());
            }
            if let Some(v) = &c.known_var {
                rec.push(v[i].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outcome of [`validate`] when no hard error was found.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
}

/// Checks data against a model. Hard problems are returned as errors;
/// soft ones are collected as warnings.
pub fn validate(data: &ClusteredData, spec: &ModelSpec) -> Result<ValidationReport> {
    let mut warnings = Vec::new();
    if spec.fixed_cols != data.fixed_names {
        return Err(Error::Data(format!(
            "model fixed columns {:?} do not match data columns {:?}",
            spec.fixed_cols, data.fixed_names
        )));
    }
    if spec.random_cols != data.random_names {
        return Err(Error::Data(format!(
            "model random columns {:?} do not match data columns {:?}",
            spec.random_cols, data.random_names
        )));
    }
    spec.cov_spec()?;
    let p = data.p();
    let x = data.stacked_x();
    if x.nrows() < p {
        return Err(Error::Data(format!(
            "{} observations cannot identify {p} fixed effects",
            x.nrows()
        )));
    }
    let sv = x.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > smax * 1e-10 * (x.nrows().max(p) as f64)).count();
    if rank < p {
        return Err(Error::Data(format!(
            "fixed-effect design has rank {rank} < {p} columns (duplicated or collinear covariates)"
        )));
    }
    let min_n = data.clusters.iter().map(Cluster::len).min().unwrap_or(0);
    if data.q() > min_n {
        warnings.push(format!(
            "q = {} random effects exceeds the smallest cluster size {min_n}",
            data.q()
        ));
    }
    match spec.residual_mode {
        ResidualMode::KnownVariances => {
            if !data.has_known_var() {
                return Err(Error::Data(
                    "known-variance mode requires a known-variance column".into(),
                ));
            }
            for c in &data.clusters {
                if let Some(v) = &c.known_var {
                    if v.iter().any(|&s| !(s > 0.0)) {
                        return Err(Error::Data(format!(
                            "cluster `{}` has a non-positive known variance",
                            c.id
                        )));
                    }
                }
            }
        }
        ResidualMode::EstimatedScale => {
            if data.has_known_var() {
                warnings.push("known variances are ignored when sigma2 is estimated".into());
            }
        }
    }
    Ok(ValidationReport { warnings })
}

/// Marginal log-likelihood at given parameters: exact for NN, numerically
/// integrated with [`crate::quadrature::default_nodes`] nodes per dimension
/// otherwise. In known-variance mode `sigma2` must be 1.
pub fn loglik_marginal(
    data: &ClusteredData,
    spec: &ModelSpec,
    beta: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    if spec.known_variances() && sigma2 != 1.0 {
        return Err(Error::domain("sigma2 is fixed at 1 with known variances"));
    }
    match spec.kind {
        ConvolutionKind::NN => crate::lme::nn_loglik(data, beta, sigma1, sigma2),
        kind => crate::quadrature::marginal_loglik_numeric(
            data,
            kind,
            beta,
            sigma1,
            sigma2,
            &crate::quadrature::QuadratureOptions::default(),
        ),
    }
}
