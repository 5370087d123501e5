//! Dataset files: JSON `{inputs, outputs}` or the long-form CSV
//! `voltage,t,u,y` written by `gen-hh` (one experiment per voltage, rows in
//! time order).

use std::path::Path;

use lipkern::estimator::Dataset;
use lipkern::hodgkin::{HHParams, ReproductionReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct LongRow {
    voltage: f64,
    t: f64,
    u: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct FigureRow {
    voltage: f64,
    t: f64,
    y_data: f64,
    y_model: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn write_hh_csv(path: &Path, data: &Dataset, params: &HHParams) -> Result<(), String> {
    let err = |e: csv::Error| format!("cannot write {}: {e}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let grid = params.time_grid();
    for ((v, u), y) in params.voltages.iter().zip(&data.inputs).zip(&data.outputs) {
        for ((t, u), y) in grid.iter().zip(u).zip(y) {
            w.serialize(LongRow {
                voltage: *v,
                t: *t,
                u: *u,
                y: *y,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn read_long_csv(path: &Path) -> Result<Dataset, String> {
    let err = |e: csv::Error| format!("cannot read {}: {e}", path.display());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<f64> = None;
    for row in r.deserialize() {
        let row: LongRow = row.map_err(err)?;
        if current != Some(row.voltage) {
            current = Some(row.voltage);
            inputs.push(Vec::new());
            outputs.push(Vec::new());
        }
        inputs.last_mut().unwrap().push(row.u);
        outputs.last_mut().unwrap().push(row.y);
    }
    Dataset::new(inputs, outputs).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, String> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_long_csv(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let data: Dataset = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    data.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(data)
}

/// `voltage,t,y_data,y_model` for every sample of every experiment.
pub fn write_figure_csv(path: &Path, report: &ReproductionReport) -> Result<(), String> {
    let err = |e: csv::Error| format!("cannot write {}: {e}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for f in &report.per_voltage {
        for ((t, yd), ym) in f.t.iter().zip(&f.y_data).zip(&f.y_model) {
            w.serialize(FigureRow {
                voltage: f.voltage,
                t: *t,
                y_data: *yd,
                y_model: *ym,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| format!("cannot write {}: {e}", path.display()))
}
