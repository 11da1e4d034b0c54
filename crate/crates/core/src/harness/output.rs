//! CSV, JSON and SVG export of an experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiment::{mean_curve, CurvePoint, DiagnosticsRow, ExperimentResult, Selection};

const CURVE_HEADER: [&str; 6] = ["method", "seed", "T", "lambda", "gamma", "test_error"];
const MEAN_HEADER: [&str; 5] = ["method", "T", "test_error", "test_error_se", "seeds"];
const DIAG_HEADER: [&str; 11] = [
    "seed",
    "method",
    "feature",
    "tasks",
    "var_itl",
    "var_uncond",
    "var_best_linear",
    "gap_itl_vs_uncond",
    "gap_itl_vs_uncond_se",
    "gap_uncond_vs_linear",
    "gap_uncond_vs_linear_se",
];

/// Creates `dir` and checks that it accepts files.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::Config(format!("cannot write to {}: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn method_rank(cfg: &ExperimentConfig, name: &str) -> usize {
    cfg.methods.iter().position(|m| m.name == name).unwrap_or(usize::MAX)
}

/// Rows ordered by configured method order, then seed, then `T`.
pub fn sorted_curves(cfg: &ExperimentConfig, curves: &[CurvePoint]) -> Vec<CurvePoint> {
    let mut rows = curves.to_vec();
    rows.sort_by(|a, b| {
        (method_rank(cfg, &a.method), a.seed, a.t).cmp(&(method_rank(cfg, &b.method), b.seed, b.t))
    });
    rows
}

pub fn write_curves<W: std::io::Write>(writer: W, cfg: &ExperimentConfig, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for p in sorted_curves(cfg, curves) {
        w.serialize(&p)?;
    }
    w.flush().map_err(|e| Error::io("curves", e))?;
    Ok(())
}

pub fn write_mean_curves<W: std::io::Write>(writer: W, cfg: &ExperimentConfig, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(MEAN_HEADER)?;
    for m in &cfg.methods {
        let seeds = {
            let mut s: Vec<u64> = curves.iter().filter(|p| p.method == m.name).map(|p| p.seed).collect();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        for (t, mean, se) in mean_curve(curves, &m.name) {
            w.serialize((&m.name, t, mean, se, seeds))?;
        }
    }
    w.flush().map_err(|e| Error::io("mean curves", e))?;
    Ok(())
}

pub fn write_diagnostics<W: std::io::Write>(writer: W, rows: &[DiagnosticsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(DIAG_HEADER)?;
    for row in rows {
        let r = &row.report;
        w.serialize((
            row.seed,
            &row.method,
            &r.feature,
            r.tasks,
            r.var_itl,
            r.var_uncond,
            r.var_best_linear,
            r.gap_itl_vs_uncond,
            r.gap_itl_vs_uncond_se,
            r.gap_uncond_vs_linear,
            r.gap_uncond_vs_linear_se,
        ))?;
    }
    w.flush().map_err(|e| Error::io("diagnostics", e))?;
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
    lambda_grid: Vec<f64>,
    gamma_grid: Vec<f64>,
    checkpoints: Vec<usize>,
    seeds: &'a [u64],
    selections: &'a [Selection],
    warnings: &'a [String],
    design: Design,
}

#[derive(Serialize)]
struct Design {
    validation: &'static str,
    online_gradient_point: &'static str,
    online_update: &'static str,
    meta_output: &'static str,
    evaluation_loss: &'static str,
    rff_sigma: &'static str,
    snr: &'static str,
    circle_inputs: &'static str,
    batch_solver: &'static str,
}

impl Design {
    fn current() -> Self {
        Self {
            validation: "one (lambda, gamma) per method and seed, chosen at T = T_tr and reused at every checkpoint",
            online_gradient_point: "last iterate w_{n+1}",
            online_update: "w_{i+1} = w_i - (s_i x_i + lambda (w_i - theta)) / (lambda i)",
            meta_output: "average of the iterates (M_t, b_t), t = 1..T",
            evaluation_loss: "run.loss on the held-out split of each task",
            rff_sigma: "standard deviation of the frequencies",
            snr: "per task, noise std = population std of the noiseless outputs / snr",
            circle_inputs: "Gaussian N(input_mean * 1, I) inputs, per-task snr as for the clusters",
            batch_solver: "absolute loss: run.batch_solver (dual coordinate ascent by default, stopped at duality gap <= batch_tol)",
        }
    }
}

pub fn run_meta_json(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<String> {
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        lambda_grid: cfg.lambda_grid(),
        gamma_grid: cfg.gamma_grid(),
        checkpoints: cfg.checkpoints(),
        seeds: &cfg.run.seeds,
        selections: &result.selections,
        warnings: &result.warnings,
        design: Design::current(),
    };
    Ok(serde_json::to_string_pretty(&meta)?)
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `curves.csv`, `curves_mean.csv`, `diagnostics.csv`,
/// `run_meta.json` and `curves.svg` into `dir`; returns their paths.
pub fn emit_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare_output_dir(dir)?;
    let paths: Vec<PathBuf> = ["curves.csv", "curves_mean.csv", "diagnostics.csv", "run_meta.json", "curves.svg"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_file(&paths[0], |b| write_curves(b, cfg, &result.curves))?;
    write_file(&paths[1], |b| write_mean_curves(b, cfg, &result.curves))?;
    write_file(&paths[2], |b| write_diagnostics(b, &result.diagnostics))?;
    write_file(&paths[3], |b| {
        b.extend_from_slice(run_meta_json(cfg, result)?.as_bytes());
        b.push(b'\n');
        Ok(())
    })?;
    write_file(&paths[4], |b| {
        b.extend_from_slice(render_svg(cfg, &result.curves).as_bytes());
        Ok(())
    })?;
    Ok(paths)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Seed-averaged test error against the number of training tasks, one
/// polyline per method.
pub fn render_svg(cfg: &ExperimentConfig, curves: &[CurvePoint]) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
    let series: Vec<(String, Vec<(usize, f64, f64)>)> = cfg
        .methods
        .iter()
        .map(|m| (m.name.clone(), mean_curve(curves, &m.name)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let finite = |v: f64| v.is_finite();
    let ts: Vec<f64> = series.iter().flat_map(|(_, c)| c.iter().map(|p| p.0 as f64)).collect();
    let es: Vec<f64> = series.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)).filter(|e| finite(*e)).collect();
    let (t_min, t_max) = bounds(&ts, 1.0);
    let (e_min, e_max) = bounds(&es, 1.0);
    let pad = 0.05 * (e_max - e_min).max(1e-12);
    let (e_lo, e_hi) = (e_min - pad, e_max + pad);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |t: f64| left + plot_w * if t_max > t_min { (t - t_min) / (t_max - t_min) } else { 0.5 };
    let y_of = |e: f64| top + plot_h * (1.0 - (e - e_lo) / (e_hi - e_lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let e = e_lo + (e_hi - e_lo) * i as f64 / 4.0;
        let y = y_of(e);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0,
            tick_label(e)
        );
        let t = t_min + (t_max - t_min) * i as f64 / 4.0;
        let x = x_of(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            top + plot_h,
            top + plot_h + 5.0,
            top + plot_h + 20.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">number of training tasks T</text>"#,
        left + plot_w / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">test error</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .filter(|p| finite(p.1))
            .map(|p| format!("{:.2},{:.2}", x_of(p.0 as f64), y_of(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = width - right + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 25.0,
            lx + 32.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: &[f64], fallback: f64) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        (lo, hi)
    } else {
        (0.0, fallback)
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
