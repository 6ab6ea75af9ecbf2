//! Output records. JSON goes through serde structs with fixed field
//! order, so the same run produces the same bytes.

use serde::Serialize;

use qrn_core::liouville::DensityState;

/// Dense complex matrix, row-major, split into real and imaginary parts.
#[derive(Debug, Serialize)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl MatrixDump {
    pub fn from_state(state: &DensityState) -> MatrixDump {
        let m = state.mat();
        let (rows, cols) = m.dim();
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                re.push(m[(r, c)].re);
                im.push(m[(r, c)].im);
            }
        }
        MatrixDump { rows, cols, re, im }
    }
}

#[derive(Debug, Serialize)]
pub struct LevelRecord {
    pub level: u32,
    pub fidelity: f64,
    pub t_avg_s: f64,
    pub p_merge: f64,
    pub p_nofilter: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2: Option<f64>,
    pub trace: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<MatrixDump>,
}

/// One simulate pass: a fixed filter schedule, all levels.
#[derive(Debug, Serialize)]
pub struct SimulateRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau1_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2_s: Option<f64>,
    pub levels: Vec<LevelRecord>,
}

#[derive(Debug, Serialize)]
pub struct SimulateOutput {
    pub protocol: String,
    pub levels: u32,
    pub n_max: usize,
    pub records: Vec<SimulateRecord>,
}

#[derive(Debug, Serialize)]
pub struct EngineReference {
    pub fidelity: Option<f64>,
    pub t_avg_s: f64,
}

#[derive(Debug, Serialize)]
pub struct ZScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
    pub time: f64,
}

#[derive(Debug, Serialize)]
pub struct McOutput {
    pub protocol: String,
    pub levels: u32,
    pub n_max: usize,
    pub n_traj: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr_fidelity: Option<f64>,
    pub mean_time_s: f64,
    pub stderr_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_state: Option<MatrixDump>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineReference>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_scores: Option<ZScores>,
}

/// One optimizer result row for the CSV table; shared by optimize
/// (single row) and sweep (one row per grid point).
pub struct OptimumRow {
    pub l_km: f64,
    pub t_coh_s: f64,
    pub levels: u32,
    pub eps: f64,
    pub eps_b: Option<f64>,
    pub nu_tau: Option<f64>,
    pub nu_tau2: Option<f64>,
    pub value: f64,
    pub evaluations: usize,
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn write_optimum_csv<W: std::io::Write>(
    out: W,
    objective: &str,
    rows: &[OptimumRow],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "objective",
        "l_km",
        "t_coh_s",
        "levels",
        "eps",
        "eps_b",
        "nu_tau",
        "nu_tau2",
        "value",
        "evaluations",
    ])?;
    for r in rows {
        w.write_record([
            objective.to_string(),
            format!("{}", r.l_km),
            format!("{}", r.t_coh_s),
            format!("{}", r.levels),
            format!("{}", r.eps),
            opt_cell(r.eps_b),
            opt_cell(r.nu_tau),
            opt_cell(r.nu_tau2),
            format!("{}", r.value),
            format!("{}", r.evaluations),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct PdfRow {
    pub t_s: f64,
    pub density: f64,
    pub cdf: f64,
    pub reference_density: f64,
}

pub fn write_pdf_csv<W: std::io::Write>(out: W, rows: &[PdfRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_s", "density", "cdf", "reference_density"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.t_s),
            format!("{}", r.density),
            format!("{}", r.cdf),
            format!("{}", r.reference_density),
        ])?;
    }
    w.flush()?;
    Ok(())
}
