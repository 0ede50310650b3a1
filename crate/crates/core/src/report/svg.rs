//! Static SVG figures: layer × task heatmaps and per-layer perplexity curves.

use std::fmt::Write;

use super::table::format_2dp;
use super::ReportError;

/// Colour of the scale minimum.
pub const RAMP_LOW: [u8; 3] = [0xf7, 0xfb, 0xff];
/// Colour of the scale maximum.
pub const RAMP_HIGH: [u8; 3] = [0x08, 0x30, 0x6b];
const MISSING: &str = "#dddddd";

const CELL_W: usize = 72;
const CELL_H: usize = 28;
const LEFT: usize = 110;
const TOP: usize = 70;

/// Linear interpolation between [`RAMP_LOW`] and [`RAMP_HIGH`] at `t ∈ [0, 1]`,
/// channels rounded half away from zero.
pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c: Vec<u8> =
        (0..3).map(|i| (RAMP_LOW[i] as f64 + t * (RAMP_HIGH[i] as f64 - RAMP_LOW[i] as f64)).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scale position of `v`; a degenerate range maps everything to the top.
pub fn scale_position(v: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (v - min) / (max - min)
    } else {
        1.0
    }
}

/// Heatmap with one `class="cell"` rect per matrix entry (rows = layers,
/// columns = tasks). NaN entries are drawn grey and excluded from the scale.
pub fn emit_heatmap(
    title: &str,
    values: &[Vec<f64>],
    row_labels: &[String],
    col_labels: &[String],
) -> Result<String, ReportError> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(ReportError::Data("empty heatmap matrix".into()));
    }
    if values.iter().any(|r| r.len() != cols) {
        return Err(ReportError::Data("heatmap matrix is not rectangular".into()));
    }
    if row_labels.len() != rows || col_labels.len() != cols {
        return Err(ReportError::Data(format!(
            "{} row and {} column labels for a {rows}x{cols} matrix",
            row_labels.len(),
            col_labels.len()
        )));
    }
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = LEFT + cols * CELL_W + 20;
    let legend_y = TOP + rows * CELL_H + 20;
    let height = legend_y + 50;

    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"##)?;
    writeln!(w, r##"<defs><linearGradient id="ramp" x1="0" x2="1" y1="0" y2="0"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##, ramp(0.0), ramp(1.0))?;
    writeln!(w, r##"<text x="{LEFT}" y="20" font-size="13">{}</text>"##, escape(title))?;
    for (c, label) in col_labels.iter().enumerate() {
        let x = LEFT + c * CELL_W + CELL_W / 2;
        writeln!(w, r##"<text class="col-label" x="{x}" y="{}" text-anchor="middle">{}</text>"##, TOP - 8, escape(label))?;
    }
    for (r, row) in values.iter().enumerate() {
        let y = TOP + r * CELL_H;
        writeln!(w, r##"<text class="row-label" x="{}" y="{}" text-anchor="end">{}</text>"##, LEFT - 8, y + CELL_H / 2 + 4, escape(&row_labels[r]))?;
        for (c, &v) in row.iter().enumerate() {
            let x = LEFT + c * CELL_W;
            let (fill, text, ink) = if v.is_finite() {
                let t = scale_position(v, min, max);
                (ramp(t), format_2dp(v), if t > 0.5 { "#ffffff" } else { "#000000" })
            } else {
                (MISSING.to_string(), "n/a".to_string(), "#000000")
            };
            writeln!(w, r##"<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#ffffff"/>"##)?;
            writeln!(w, r##"<text class="value" x="{}" y="{}" text-anchor="middle" fill="{ink}">{text}</text>"##, x + CELL_W / 2, y + CELL_H / 2 + 4)?;
        }
    }
    let bar_w = (cols * CELL_W).min(240).max(CELL_W);
    writeln!(w, r##"<rect class="legend" x="{LEFT}" y="{legend_y}" width="{bar_w}" height="12" fill="url(#ramp)"/>"##)?;
    let (lo, hi) = if finite.is_empty() { ("n/a".into(), "n/a".into()) } else { (format_2dp(min), format_2dp(max)) };
    writeln!(w, r##"<text class="scale-min" x="{LEFT}" y="{}">min {lo}</text>"##, legend_y + 28)?;
    writeln!(w, r##"<text class="scale-max" x="{}" y="{}" text-anchor="end">max {hi}</text>"##, LEFT + bar_w, legend_y + 28)?;
    writeln!(w, "</svg>")?;
    Ok(s)
}

/// Line chart of one or more per-layer perplexity series (x = layer).
pub fn emit_perplexity_curves(title: &str, series: &[(String, Vec<f64>)]) -> Result<String, ReportError> {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    if n == 0 {
        return Err(ReportError::Data("no perplexity values".into()));
    }
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    if all.is_empty() {
        return Err(ReportError::Data("no finite perplexity values".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (pw, ph, left, top) = (360.0, 200.0, 60.0, 40.0);
    let x = |i: usize| left + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| top + ph * (1.0 - scale_position(v, lo, hi));
    let colors = ["#08306b", "#d94801", "#238b45", "#6a51a3"];

    let mut s = String::new();
    let w = &mut s;
    let (width, height) = (left + pw + 150.0, top + ph + 50.0);
    writeln!(w, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"##)?;
    writeln!(w, r##"<text x="{left}" y="20" font-size="13">{}</text>"##, escape(title))?;
    writeln!(w, r##"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>"##, top + ph, left + pw, top + ph)?;
    writeln!(w, r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#000000"/>"##, top + ph)?;
    writeln!(w, r##"<text x="{}" y="{}" text-anchor="end">{}</text>"##, left - 6.0, top + 4.0, format_2dp(hi))?;
    writeln!(w, r##"<text x="{}" y="{}" text-anchor="end">{}</text>"##, left - 6.0, top + ph + 4.0, format_2dp(lo))?;
    for i in 0..n {
        writeln!(w, r##"<text x="{:.2}" y="{}" text-anchor="middle">{i}</text>"##, x(i), top + ph + 16.0)?;
    }
    writeln!(w, r##"<text x="{:.2}" y="{}" text-anchor="middle">layer</text>"##, left + pw / 2.0, top + ph + 34.0)?;
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        writeln!(w, r##"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##, pts.join(" "))?;
        for (i, &v) in vals.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            writeln!(w, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{}</title></circle>"##, x(i), y(v), format_2dp(v))?;
        }
        let ly = top + 14.0 * k as f64;
        writeln!(w, r##"<text x="{}" y="{ly}" fill="{color}">{}</text>"##, left + pw + 12.0, escape(name))?;
    }
    writeln!(w, "</svg>")?;
    Ok(s)
}
