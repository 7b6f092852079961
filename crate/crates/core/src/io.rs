//! File formats: CSV datasets with a JSON task sidecar, model JSON, and
//! plain numeric CSV tables.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{HermitError, Result};
use crate::expfamily::Family;
use crate::model::{Dataset, MixtureModel};
use crate::moe::GatingModel;

/// Column split of a dataset CSV: the first `n_features` columns are
/// features, the remaining columns are targets with the listed families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_features: usize,
    pub families: Vec<Family>,
}

impl TaskSpec {
    pub fn of(data: &Dataset) -> Self {
        TaskSpec { n_features: data.d(), families: data.tasks().to_vec() }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    Ok(())
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
        .map_err(|_| HermitError::InvalidData(format!("row {row}, column {col}: cannot parse '{t}'")))
}

/// Numeric CSV with a header row; empty cells and `NaN` read as NaN.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(HermitError::InvalidData(format!("row {i} has {} cells, header has {}", rec.len(), header.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            values.push(parse_cell(cell, i, j)?);
        }
        rows += 1;
    }
    let table = Array2::from_shape_vec((rows, header.len()), values).expect("row lengths checked");
    Ok((header, table))
}

/// Write a numeric table; NaN is written as an empty cell.
pub fn write_table(path: &Path, header: &[String], table: &Array2<f64>) -> Result<()> {
    if header.len() != table.ncols() {
        return Err(HermitError::Dimension(format!("{} names for {} columns", header.len(), table.ncols())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in table.rows() {
        w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }))?;
    }
    w.flush()?;
    Ok(())
}

/// Load a dataset CSV (features then targets) described by `spec`.
pub fn read_dataset(path: &Path, spec: &TaskSpec) -> Result<Dataset> {
    let (header, table) = read_table(path)?;
    let want = spec.n_features + spec.families.len();
    if header.len() != want {
        return Err(HermitError::Dimension(format!(
            "{} has {} columns, task spec expects {} features + {} targets",
            path.display(),
            header.len(),
            spec.n_features,
            spec.families.len()
        )));
    }
    let x = table.slice(ndarray::s![.., ..spec.n_features]).to_owned();
    if let Some(pos) = x.iter().position(|v| v.is_nan()) {
        let (i, j) = (pos / spec.n_features, pos % spec.n_features);
        return Err(HermitError::InvalidData(format!("missing feature value at row {i}, column '{}'", header[j])));
    }
    let y = table.slice(ndarray::s![.., spec.n_features..]).to_owned();
    Dataset::from_nan_targets(x, y, spec.families.clone())
}

pub fn load_dataset(csv: &Path, tasks: &Path) -> Result<Dataset> {
    read_dataset(csv, &read_json(tasks)?)
}

/// Default column names: `x0..` for features and `y0..` for targets.
pub fn default_header(d: usize, m: usize) -> Vec<String> {
    (0..d).map(|f| format!("x{f}")).chain((0..m).map(|j| format!("y{j}"))).collect()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let table = ndarray::concatenate(ndarray::Axis(1), &[data.x().view(), data.y_with_nan().view()])
        .expect("same row count");
    write_table(path, &default_header(data.d(), data.m()), &table)
}

pub fn nested3(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter().map(|m| m.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

pub fn nested2(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn from_nested3(v: &[Vec<Vec<f64>>]) -> Result<Array3<f64>> {
    let d = v.len();
    let m = v.first().map_or(0, Vec::len);
    let k = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut out = Array3::zeros((d, m, k));
    for (f, rows) in v.iter().enumerate() {
        if rows.len() != m {
            return Err(HermitError::Dimension(format!("beta row {f} has {} tasks, expected {m}", rows.len())));
        }
        for (j, comps) in rows.iter().enumerate() {
            if comps.len() != k {
                return Err(HermitError::Dimension(format!("beta[{f}][{j}] has {} components, expected {k}", comps.len())));
            }
            for (r, &val) in comps.iter().enumerate() {
                out[[f, j, r]] = val;
            }
        }
    }
    Ok(out)
}

pub fn from_nested2(v: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != cols) {
        return Err(HermitError::Dimension("ragged matrix".into()));
    }
    Ok(Array2::from_shape_fn((v.len(), cols), |(i, j)| v[i][j]))
}

/// On-disk model: `beta[f][j][r]`, weights, task families, penalty
/// exponent and, for gated models, `alpha[f][r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub beta: Vec<Vec<Vec<f64>>>,
    pub pi: Vec<f64>,
    pub families: Vec<Family>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<Vec<f64>>>,
}

impl ModelDoc {
    pub fn new(model: &MixtureModel, gate: Option<&GatingModel>) -> Self {
        ModelDoc {
            beta: nested3(model.beta()),
            pi: model.pi().to_vec(),
            families: model.families().to_vec(),
            gamma: model.gamma(),
            alpha: gate.map(|g| nested2(&g.alpha)),
        }
    }

    pub fn into_parts(self) -> Result<(MixtureModel, Option<GatingModel>)> {
        let model = MixtureModel::new(from_nested3(&self.beta)?, Array1::from(self.pi), self.families, self.gamma)?;
        let gate = match self.alpha {
            Some(a) => {
                let g = GatingModel::new(from_nested2(&a)?)?;
                if g.alpha.dim() != (model.d(), model.k()) {
                    return Err(HermitError::Dimension(format!(
                        "alpha is {:?}, model has d={} and k={}",
                        g.alpha.dim(),
                        model.d(),
                        model.k()
                    )));
                }
                Some(g)
            }
            None => None,
        };
        Ok((model, gate))
    }
}

/// Mean shifts are sample-specific and are not stored.
pub fn save_model(path: &Path, model: &MixtureModel, gate: Option<&GatingModel>) -> Result<()> {
    write_json(path, &ModelDoc::new(model, gate))
}

pub fn load_model(path: &Path) -> Result<(MixtureModel, Option<GatingModel>)> {
    read_json::<ModelDoc>(path)?.into_parts()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthSpec};

    #[test]
    fn dataset_round_trip_keeps_missingness() {
        let dir = tempfile::tempdir().unwrap();
        let syn = generate(&SynthSpec { n: 40, ..SynthSpec::varying_k(2, 3) }).unwrap();
        let csv = dir.path().join("d.csv");
        let tasks = dir.path().join("t.json");
        write_dataset(&csv, &syn.data).unwrap();
        write_json(&tasks, &TaskSpec::of(&syn.data)).unwrap();
        let back = load_dataset(&csv, &tasks).unwrap();
        assert_eq!(back.x(), syn.data.x());
        assert_eq!(back.y(), syn.data.y());
        assert_eq!(back.observed(), syn.data.observed());
        assert_eq!(back.tasks(), syn.data.tasks());
    }

    #[test]
    fn nan_and_empty_cells_are_missing() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        std::fs::write(&csv, "one,a,y1,y2\n1,0.5,1.5,\n1,-0.2,NaN,1\n1,0.1,2.0,0\n").unwrap();
        let spec = TaskSpec { n_features: 2, families: vec![Family::gaussian(), Family::bernoulli()] };
        let data = read_dataset(&csv, &spec).unwrap();
        assert_eq!(data.observed().row(0).to_vec(), vec![true, false]);
        assert_eq!(data.observed().row(1).to_vec(), vec![false, true]);
        assert!(data.has_intercept());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        let spec = TaskSpec { n_features: 1, families: vec![Family::bernoulli()] };
        std::fs::write(&csv, "x,y\n1,0.5\n").unwrap();
        assert!(read_dataset(&csv, &spec).is_err());
        std::fs::write(&csv, "x,y\n,1\n").unwrap();
        assert!(read_dataset(&csv, &spec).is_err());
        std::fs::write(&csv, "x,y\n1,abc\n").unwrap();
        assert!(read_dataset(&csv, &spec).is_err());
        std::fs::write(&csv, "x,y,z\n1,1,1\n").unwrap();
        assert!(read_dataset(&csv, &spec).is_err());
        let bad: std::result::Result<TaskSpec, _> = serde_json::from_str(r#"{"n_features":1,"families":["gamma"]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn model_round_trip_with_gate() {
        let syn = generate(&SynthSpec::low_dim(4)).unwrap();
        let model = syn.true_model();
        let gate = GatingModel::new(Array2::from_shape_fn((15, 2), |(f, r)| (f as f64) - r as f64)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model, Some(&gate)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"alpha\"") && text.contains("\"bernoulli\""));
        let (back, g) = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(g.unwrap().alpha, gate.alpha);
        save_model(&path, &model, None).unwrap();
        assert!(load_model(&path).unwrap().1.is_none());
    }

    #[test]
    fn mismatched_gate_shape_rejected() {
        let syn = generate(&SynthSpec::low_dim(4)).unwrap();
        let mut doc = ModelDoc::new(&syn.true_model(), None);
        doc.alpha = Some(vec![vec![0.0; 3]; 15]);
        assert!(doc.into_parts().is_err());
    }
}
