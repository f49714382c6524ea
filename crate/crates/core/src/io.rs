//! CSV files for matrices, tube tables, traces and batch envelopes.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{MpcError, Result};
use crate::sim::{Envelope, StepRecord, StepStatus, Trace};
use crate::tubes::TubeSystem;

/// Decimals of the published tables.
pub const TABLE_DECIMALS: usize = 4;

fn csv_err(e: csv::Error) -> MpcError {
    MpcError::InvalidParameter(format!("csv: {e}"))
}

fn parse(field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| MpcError::InvalidParameter(format!("not a number: {field:?}")))
}

fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    // Avoid "-0.0000" so that files re-emit identically.
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Row-labelled matrix, one row per output dimension.
pub fn write_matrix_csv<W: Write>(out: W, m: &DMatrix<f64>, decimals: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string()];
    header.extend((1..=m.ncols()).map(|c| format!("c{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.nrows() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend((0..m.ncols()).map(|j| fixed(m[(i, j)], decimals)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().skip(1).map(parse).collect::<Result<_>>()?);
    }
    crate::linalg::from_rows(&rows)
}

/// `F(j)` and `R(j)` half-widths, one row per sequence and dimension.
pub fn write_tubes_csv<W: Write>(out: W, tubes: &TubeSystem, decimals: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sequence".to_string(), "dim".to_string()];
    header.extend((0..=tubes.horizon).map(|j| format!("j{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (name, seq) in [("F", &tubes.f), ("R", &tubes.r)] {
        for i in 0..tubes.state_dim() {
            let mut rec = vec![name.to_string(), (i + 1).to_string()];
            rec.extend(seq.iter().map(|b| fixed(b.half_widths()[i], decimals)));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(F, R)` half-width tables indexed `[dim][j]`.
pub type TubeTables = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn read_tubes_csv<R: Read>(input: R) -> Result<TubeTables> {
    let mut r = csv::Reader::from_reader(input);
    let (mut f, mut rr) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec.iter().skip(2).map(parse).collect::<Result<_>>()?;
        match rec.get(0) {
            Some("F") => f.push(vals),
            Some("R") => rr.push(vals),
            other => {
                return Err(MpcError::InvalidParameter(format!("unknown tube sequence {other:?}")))
            }
        }
    }
    Ok((f, rr))
}

pub const TRACE_HEADER: [&str; 20] = [
    "k", "t_min", "x1", "x2", "x3", "x4", "u1", "u2", "y1", "y2", "yt1", "yt2", "ys1", "ys2", "cost",
    "W", "status", "min_slack", "w1", "w2",
];

/// One row per step; numbers use the shortest representation that parses
/// back to the same `f64`.
pub fn write_trace_csv<W: Write>(out: W, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in &trace.records {
        let mut rec = vec![r.k.to_string(), r.t_min.to_string()];
        for v in r.x.iter().chain(&r.u).chain(&r.y).chain(&r.y_t).chain(&r.y_s) {
            rec.push(v.to_string());
        }
        rec.push(r.cost.to_string());
        rec.push(r.w_value.to_string());
        rec.push(r.status.to_string());
        rec.push(r.min_slack.to_string());
        rec.extend(r.disturbance.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Records of a four-tank trace file (the final state is not stored).
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != TRACE_HEADER.len() {
            return Err(MpcError::InvalidParameter(format!(
                "trace row has {} fields, expected {}",
                rec.len(),
                TRACE_HEADER.len()
            )));
        }
        let num = |i: usize| parse(&rec[i]);
        let vec = |a: usize, b: usize| (a..b).map(num).collect::<Result<Vec<f64>>>();
        out.push(StepRecord {
            k: rec[0]
                .parse()
                .map_err(|_| MpcError::InvalidParameter(format!("bad step index {:?}", &rec[0])))?,
            t_min: num(1)?,
            x: vec(2, 6)?,
            u: vec(6, 8)?,
            y: vec(8, 10)?,
            y_t: vec(10, 12)?,
            y_s: vec(12, 14)?,
            cost: num(14)?,
            w_value: num(15)?,
            status: rec[16].parse::<StepStatus>()?,
            min_slack: num(17)?,
            disturbance: vec(18, 20)?,
        });
    }
    Ok(out)
}

pub fn write_envelope_csv<W: Write>(out: W, env: &Envelope) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = env.x_min.first().map_or(0, |v| v.len());
    let m = env.u_min.first().map_or(0, |v| v.len());
    let mut header = vec!["t_min".to_string()];
    for i in 1..=n {
        header.push(format!("x{i}_min"));
        header.push(format!("x{i}_max"));
    }
    for i in 1..=m {
        header.push(format!("u{i}_min"));
        header.push(format!("u{i}_max"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..env.t_min.len() {
        let mut rec = vec![env.t_min[k].to_string()];
        for i in 0..n {
            rec.push(env.x_min[k][i].to_string());
            rec.push(env.x_max[k][i].to_string());
        }
        for i in 0..m {
            rec.push(env.u_min[k][i].to_string());
            rec.push(env.u_max[k][i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_zero_is_normalised() {
        assert_eq!(fixed(-0.00001, 4), "0.0000");
        assert_eq!(fixed(-0.5, 4), "-0.5000");
    }

    #[test]
    fn matrix_round_trip_is_a_fixed_point() {
        let m = DMatrix::from_row_slice(2, 2, &[0.93884, -0.02501, 1.0, 0.00006]);
        let mut first = Vec::new();
        write_matrix_csv(&mut first, &m, 4).unwrap();
        let back = read_matrix_csv(first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_matrix_csv(&mut second, &back, 4).unwrap();
        assert_eq!(first, second);
        assert_eq!(back[(0, 0)], 0.9388);
    }
}
