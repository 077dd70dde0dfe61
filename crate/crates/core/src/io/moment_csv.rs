//! Moment-table CSV: one row per `(grid point, layer)`.

use crate::error::{Error, Result};
use crate::moments::{Domain, MomentVector};
use crate::trajectory::{HyperparameterGrid, Trajectory};

pub const HEADER: [&str; 8] = ["checkpoint_index", "omega", "domain", "layer", "m1", "m2", "m3", "m4"];

/// 17 significant digits, enough to round-trip any `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_moment_csv(traj: &Trajectory) -> Result<String> {
    write_moment_csv_many(std::slice::from_ref(traj))
}

/// One table row.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub index: usize,
    pub omega: f64,
    pub domain: Domain,
    pub layer: String,
    pub moments: MomentVector,
}

pub fn write_moment_rows(rows: &[MomentRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        let m = &r.moments;
        w.write_record([
            r.index.to_string(),
            num(r.omega),
            r.domain.tag(),
            r.layer.clone(),
            num(m.m1),
            num(m.m2),
            num(m.m3),
            num(m.m4),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

/// Several trajectories (typically one per domain) in a single table.
pub fn write_moment_csv_many(trajs: &[Trajectory]) -> Result<String> {
    let mut rows = Vec::new();
    for traj in trajs {
        for (i, (omega, row)) in traj.grid().values().iter().zip(traj.rows()).enumerate() {
            for (layer, m) in traj.layers().iter().zip(row) {
                rows.push(MomentRow {
                    index: i,
                    omega: *omega,
                    domain: traj.domain().clone(),
                    layer: layer.clone(),
                    moments: *m,
                });
            }
        }
    }
    write_moment_rows(&rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Parses a moment table back into one trajectory per domain, in order of
/// first appearance.
pub fn read_moment_csv(text: &str, grid_name: &str) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Invalid(format!("unexpected moment CSV header {header:?}")));
    }
    struct Acc {
        domain: Domain,
        omegas: Vec<f64>,
        layers: Vec<String>,
        rows: Vec<Vec<MomentVector>>,
    }
    let mut accs: Vec<Acc> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::Invalid(format!("field {}: {e}", HEADER[k])))
        };
        let index: usize = rec[0]
            .parse()
            .map_err(|e| Error::Invalid(format!("checkpoint_index: {e}")))?;
        let domain = Domain::parse(&rec[2])?;
        let pos = match accs.iter().position(|a| a.domain == domain) {
            Some(p) => p,
            None => {
                accs.push(Acc {
                    domain,
                    omegas: Vec::new(),
                    layers: Vec::new(),
                    rows: Vec::new(),
                });
                accs.len() - 1
            }
        };
        let acc = &mut accs[pos];
        if index == acc.rows.len() {
            acc.rows.push(Vec::new());
            acc.omegas.push(f(1)?);
        } else if index + 1 != acc.rows.len() {
            return Err(Error::Invalid(format!("rows out of order at checkpoint {index}")));
        }
        if index == 0 {
            acc.layers.push(rec[3].to_string());
        }
        let mut mv = MomentVector::new(f(4)?, f(5)?, f(6)?, f(7)?);
        mv.single_feature = false;
        acc.rows[index].push(mv);
    }
    accs.into_iter()
        .map(|a| {
            let grid = HyperparameterGrid::new(grid_name, a.omegas)?;
            Trajectory::from_table(a.domain, grid, a.layers, a.rows)
        })
        .collect()
}
