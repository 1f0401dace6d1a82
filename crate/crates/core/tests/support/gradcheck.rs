//! Central finite-difference gradient checking in `f64`.

#![allow(dead_code)]

use sci_core::autodiff::{Graph, Var};
use sci_core::{Result, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Builds a scalar loss from parameter leaves.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates whose ±step evaluation crossed a non-smooth branch.
    pub skipped: usize,
    pub max_rel: f64,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < TOLERANCE
    }

    pub fn merge(&mut self, other: &Report) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>) -> (f64, Vec<i8>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("loss builds");
    (g.scalar(loss), g.branch_pattern())
}

/// `|a − n| / max(|a|, |n|)`, with an absolute floor for gradients that
/// vanish on both sides.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        return (analytic - numeric).abs() / 1e-9;
    }
    (analytic - numeric).abs() / scale
}

/// Checks the coordinates in `coords` (`(input, element)`), or every
/// coordinate of every input when `None`.
pub fn check(inputs: &[Tensor<f64>], coords: Option<&[(usize, usize)]>, build: &Build<'_>) -> Report {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("loss builds");
    let base_pattern = g.branch_pattern();
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let mut report = Report::default();
    for &(i, e) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[e] += STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[e] -= STEP;
        let (fp, pp) = evaluate(&plus, build);
        let (fm, pm) = evaluate(&minus, build);
        if pp != base_pattern || pm != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let a = analytic[i].data()[e];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if rel > report.max_rel || report.worst.is_none() {
            report.max_rel = report.max_rel.max(rel);
            report.worst = Some((i, e, a, numeric));
        }
    }
    report
}
