//! Rendering of metric reports, uncertainty summaries and traces.

use rulens_core::ensemble::UnitUncertainty;
use rulens_core::metrics::{kde, DensityCurve, MetricReport, TestEvaluation};
use serde::{Deserialize, Serialize};

use crate::config::ReferenceRow;
use crate::util::{Provenance, Tsv};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Flat `key = value` report.
pub fn metric_report_text(p: &Provenance, r: &MetricReport, reference: Option<&ReferenceRow>) -> String {
    let mut s = p.comment_block();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("n", r.n.to_string());
    kv("alpha", r.alpha.to_string());
    kv("scored_steps", if r.last_step_only { "last" } else { "all" }.to_string());
    kv("rmse", r.rmse.to_string());
    kv("score", r.score.to_string());
    kv("score_convention", r.score_convention.name().to_string());
    kv("picp", r.picp.to_string());
    kv("nmpiw", opt(r.nmpiw));
    if let Some(row) = reference {
        kv("reference.label", row.label.clone());
        kv("reference.rmse", opt(row.rmse));
        kv("reference.score", opt(row.score));
        kv("reference.picp", opt(row.picp));
        kv("reference.nmpiw", opt(row.nmpiw));
    }
    s
}

pub fn predictions_table(p: &Provenance, ev: &TestEvaluation) -> Tsv {
    let mut t = Tsv::new(
        p,
        &["unit", "cycle", "rul_true", "mu_star", "sigma_star", "lower", "upper", "u_al", "u_ep", "u_tot"],
    );
    for q in &ev.predictions {
        let s = &q.summary;
        t.row(&[
            q.unit_id.to_string(),
            q.cycle.to_string(),
            q.true_rul.to_string(),
            s.mu_star.to_string(),
            s.var_star.sqrt().to_string(),
            q.interval.lower.to_string(),
            q.interval.upper.to_string(),
            s.uncertainty.u_al.to_string(),
            s.uncertainty.u_ep.to_string(),
            s.uncertainty.u_tot.to_string(),
        ]);
    }
    t
}

pub fn profile_table(p: &Provenance, profile: &[UnitUncertainty]) -> Tsv {
    let mut t = Tsv::new(p, &["unit", "cycle", "mu_star", "sigma_star", "u_al", "u_ep", "u_tot"]);
    for e in profile {
        let s = &e.summary;
        t.row(&[
            e.unit_id.to_string(),
            e.cycle.to_string(),
            s.mu_star.to_string(),
            s.var_star.sqrt().to_string(),
            s.uncertainty.u_al.to_string(),
            s.uncertainty.u_ep.to_string(),
            s.uncertainty.u_tot.to_string(),
        ]);
    }
    t
}

pub fn density_table(p: &Provenance, curve: &DensityCurve) -> Tsv {
    let mut t = Tsv::new(p, &["grid", "density"]);
    for (x, d) in curve.grid.iter().zip(&curve.density) {
        t.row(&[x.to_string(), d.to_string()]);
    }
    t
}

/// Per-dataset means and density bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetUncertainty {
    pub name: String,
    pub samples: usize,
    pub mean_u_al: f64,
    pub mean_u_ep: f64,
    pub mean_u_tot: f64,
    pub bandwidth_u_al: Option<f64>,
    pub bandwidth_u_ep: Option<f64>,
}

pub struct DatasetCurves {
    pub summary: DatasetUncertainty,
    pub aleatoric: Option<DensityCurve>,
    pub epistemic: Option<DensityCurve>,
}

/// Summarizes a profile; a density is omitted, with a warning, when its
/// values are all equal (for instance `u_ep` of a one-member ensemble).
pub fn summarize(name: &str, profile: &[UnitUncertainty], grid: usize) -> DatasetCurves {
    let n = profile.len();
    let mean = |f: fn(&UnitUncertainty) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            profile.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let curve = |what: &str, f: fn(&UnitUncertainty) -> f64| {
        let values: Vec<f64> = profile.iter().map(f).collect();
        match kde(&values, grid) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("{name}: no {what} density: {e}");
                None
            }
        }
    };
    let aleatoric = curve("aleatoric", |e| e.summary.uncertainty.u_al);
    let epistemic = curve("epistemic", |e| e.summary.uncertainty.u_ep);
    DatasetCurves {
        summary: DatasetUncertainty {
            name: name.to_string(),
            samples: n,
            mean_u_al: mean(|e| e.summary.uncertainty.u_al),
            mean_u_ep: mean(|e| e.summary.uncertainty.u_ep),
            mean_u_tot: mean(|e| e.summary.uncertainty.u_tot),
            bandwidth_u_al: aleatoric.as_ref().map(|c| c.bandwidth),
            bandwidth_u_ep: epistemic.as_ref().map(|c| c.bandwidth),
        },
        aleatoric,
        epistemic,
    }
}

pub fn summary_table(p: &Provenance, rows: &[DatasetUncertainty]) -> Tsv {
    let mut t = Tsv::new(
        p,
        &["dataset", "samples", "mean_u_al", "mean_u_ep", "mean_u_tot", "bandwidth_u_al", "bandwidth_u_ep"],
    );
    for r in rows {
        t.row(&[
            r.name.clone(),
            r.samples.to_string(),
            r.mean_u_al.to_string(),
            r.mean_u_ep.to_string(),
            r.mean_u_tot.to_string(),
            opt(r.bandwidth_u_al),
            opt(r.bandwidth_u_ep),
        ]);
    }
    t
}

fn find<'a>(rows: &'a [DatasetUncertainty], subset: &str) -> Option<&'a DatasetUncertainty> {
    rows.iter().find(|r| r.name.to_ascii_uppercase().contains(subset))
}

/// Cross-dataset comparison of mean epistemic uncertainty. Empty for fewer
/// than two datasets. When FD001 and FD002 (and FD003) are among the names,
/// also states whether FD002 > FD003 ≥ FD001 holds with the FD002 gap the
/// larger one.
pub fn ordering_lines(rows: &[DatasetUncertainty]) -> Vec<String> {
    if rows.len() < 2 {
        return Vec::new();
    }
    let mut sorted: Vec<&DatasetUncertainty> = rows.iter().collect();
    sorted.sort_by(|a, b| b.mean_u_ep.total_cmp(&a.mean_u_ep));
    let chain: Vec<String> = sorted.iter().map(|r| format!("{} ({})", r.name, r.mean_u_ep)).collect();
    let mut lines = vec![format!("mean u_ep, high to low: {}", chain.join(" > "))];
    let verdict = |ok: bool| if ok { "holds" } else { "does not hold" };
    match (find(rows, "FD001"), find(rows, "FD002"), find(rows, "FD003")) {
        (Some(a), Some(b), Some(c)) => {
            let ok = b.mean_u_ep > c.mean_u_ep
                && c.mean_u_ep >= a.mean_u_ep
                && b.mean_u_ep - a.mean_u_ep > c.mean_u_ep - a.mean_u_ep;
            lines.push(format!(
                "check FD002 > FD003 >= FD001 with the FD002-FD001 gap larger: {}",
                verdict(ok)
            ));
        }
        (Some(a), Some(b), None) => {
            lines.push(format!("check FD002 > FD001: {}", verdict(b.mean_u_ep > a.mean_u_ep)));
        }
        _ => {}
    }
    lines
}
