//! Deterministic SVG rendering of sweep results: one polyline per method
//! over a log-scale MSE axis, with decade ticks and a legend.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::ResultTable;

const WIDTH: f64 = 660.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 500.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 390.0;
/// Floor applied before taking logs; exact zeros would otherwise blow up.
const MSE_FLOOR: f64 = 1e-12;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders the table to an SVG string. Identical tables produce identical
/// bytes. Fails on an empty table.
pub fn render_svg(table: &ResultTable) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::contract("cannot plot an empty result table"));
    }
    let axis_name = table.rows[0].axis.clone();

    let mut methods: Vec<String> = table.rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let mut values: Vec<f64> = table.rows.iter().map(|r| r.value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values.dedup();

    let (vmin, vmax) = (values[0], *values.last().expect("non-empty"));
    let vspan = if vmax > vmin { vmax - vmin } else { 1.0 };
    let x_of = |v: f64| LEFT + (v - vmin) / vspan * (RIGHT - LEFT);

    let logs: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.mse.max(MSE_FLOOR).log10())
        .collect();
    let mut lo_dec = logs.iter().cloned().fold(f64::INFINITY, f64::min).floor() as i32;
    let mut hi_dec = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as i32;
    if hi_dec <= lo_dec {
        hi_dec = lo_dec + 1;
    }
    if (hi_dec - lo_dec) < 1 {
        lo_dec -= 1;
    }
    let y_of = |mse: f64| {
        let l = mse.max(MSE_FLOOR).log10();
        BOTTOM - (l - lo_dec as f64) / (hi_dec - lo_dec) as f64 * (BOTTOM - TOP)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    // axes
    svg.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));

    // decade ticks on the MSE axis
    for dec in lo_dec..=hi_dec {
        let y = y_of(10f64.powi(dec));
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            fmt2(LEFT),
            fmt2(y),
            fmt2(RIGHT),
            fmt2(y)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">1e{}</text>\n",
            fmt2(LEFT - 6.0),
            fmt2(y + 4.0),
            dec
        ));
    }

    // x ticks at grid values
    for v in &values {
        let x = x_of(*v);
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt2(x),
            fmt2(BOTTOM),
            fmt2(x),
            fmt2(BOTTOM + 5.0)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt2(x),
            fmt2(BOTTOM + 18.0),
            v
        ));
    }

    // axis labels
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{axis_name}</text>\n",
        fmt2((LEFT + RIGHT) / 2.0),
        fmt2(BOTTOM + 36.0)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">MSE (log scale)</text>\n",
        fmt2((TOP + BOTTOM) / 2.0),
        fmt2((TOP + BOTTOM) / 2.0)
    ));

    // one polyline per method
    for (mi, method) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| &r.method == method)
            .map(|r| (r.value, r.mse))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));
        let coords: Vec<String> = pts
            .iter()
            .map(|(v, m)| format!("{},{}", fmt2(x_of(*v)), fmt2(y_of(*m))))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
        // legend entry
        let ly = TOP + 18.0 * mi as f64;
        svg.push_str(&format!(
            "  <rect x=\"{}\" y=\"{}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n",
            fmt2(RIGHT + 12.0),
            fmt2(ly)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{method}</text>\n",
            fmt2(RIGHT + 32.0),
            fmt2(ly + 6.0)
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the rendered SVG to `path`.
pub fn emit_plot(table: &ResultTable, path: &Path) -> Result<()> {
    let svg = render_svg(table)?;
    std::fs::write(path, svg)?;
    Ok(())
}
