//! Figure builders for traces and batch envelopes.

use tubempc::model::Plant;
use tubempc::sim::{Envelope, StepRecord};
use tubempc::svg::{Band, Chart, Series, PALETTE};

fn bands(lower: &[f64], upper: &[f64], name: &str) -> Vec<Band> {
    let mut out: Vec<Band> = Vec::new();
    for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
        for (v, tag) in [(*l, "min"), (*u, "max")] {
            if !out.iter().any(|b| b.y == v) {
                out.push(Band {
                    y: v,
                    label: format!("{name}{} {tag}", i + 1),
                });
            }
        }
    }
    out
}

/// Levels over time with the target steps and the level bounds.
pub fn states_chart(records: &[StepRecord], plant: &dyn Plant) -> Chart {
    let mut c = Chart::new("Tank levels", "t [min]", "h [m]");
    let n = records.first().map_or(0, |r| r.x.len());
    for i in 0..n {
        let pts = records.iter().map(|r| (r.t_min, r.x[i])).collect();
        c.series.push(Series::new(format!("h{}", i + 1), pts, PALETTE[i % PALETTE.len()]));
    }
    for i in 0..records.first().map_or(0, |r| r.y_t.len()) {
        let pts = records.iter().map(|r| (r.t_min, r.y_t[i])).collect();
        c.series.push(Series::new(format!("target {}", i + 1), pts, PALETTE[i % PALETTE.len()]).dashed());
    }
    let b = plant.state_box();
    c.bands = bands(b.lower(), b.upper(), "h");
    c
}

/// Pump flows over time with the input bounds.
pub fn inputs_chart(records: &[StepRecord], plant: &dyn Plant) -> Chart {
    let mut c = Chart::new("Pump flows", "t [min]", "q [m3/h]");
    let m = records.first().map_or(0, |r| r.u.len());
    for i in 0..m {
        let pts = records.iter().map(|r| (r.t_min, r.u[i])).collect();
        c.series.push(Series::new(format!("q{}", i + 1), pts, PALETTE[i % PALETTE.len()]));
    }
    let b = plant.input_box();
    c.bands = bands(b.lower(), b.upper(), "q");
    c
}

/// Per-step minimum and maximum of every level over a batch.
pub fn envelope_chart(env: &Envelope, plant: &dyn Plant) -> Chart {
    let mut c = Chart::new("Tank levels over the batch", "t [min]", "h [m]");
    let n = env.x_min.first().map_or(0, |v| v.len());
    for i in 0..n {
        let color = PALETTE[i % PALETTE.len()];
        let lo = env.t_min.iter().zip(&env.x_min).map(|(t, x)| (*t, x[i])).collect();
        let hi = env.t_min.iter().zip(&env.x_max).map(|(t, x)| (*t, x[i])).collect();
        c.series.push(Series::new(format!("h{}", i + 1), lo, color));
        c.series.push(Series::new(format!("h{}", i + 1), hi, color));
    }
    let b = plant.state_box();
    c.bands = bands(b.lower(), b.upper(), "h");
    c
}

pub fn input_envelope_chart(env: &Envelope, plant: &dyn Plant) -> Chart {
    let mut c = Chart::new("Pump flows over the batch", "t [min]", "q [m3/h]");
    let m = env.u_min.first().map_or(0, |v| v.len());
    for i in 0..m {
        let color = PALETTE[i % PALETTE.len()];
        let lo = env.t_min.iter().zip(&env.u_min).map(|(t, u)| (*t, u[i])).collect();
        let hi = env.t_min.iter().zip(&env.u_max).map(|(t, u)| (*t, u[i])).collect();
        c.series.push(Series::new(format!("q{}", i + 1), lo, color));
        c.series.push(Series::new(format!("q{}", i + 1), hi, color));
    }
    let b = plant.input_box();
    c.bands = bands(b.lower(), b.upper(), "q");
    c
}
