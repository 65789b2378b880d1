//! Minimal SVG scatter and path plots.

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use vsdm::io::read_samples;
use vsdm::{Result, VsdmError};

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;

pub fn plot(samples: &Path, trajectories: Option<&Path>, max_paths: usize, out: &Path) -> Result<ExitCode> {
    let s = read_samples(samples)?;
    if s.dim < 2 {
        return Err(VsdmError::domain("plotting needs at least two coordinates"));
    }
    let pts = s.terminal();
    let paths = trajectories.map(read_samples).transpose()?;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut grow = |x: f64, y: f64| {
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    };
    for r in pts.outer_iter() {
        grow(r[0], r[1]);
    }
    if let Some(p) = &paths {
        for st in &p.states {
            for r in st.outer_iter().take(max_paths) {
                grow(r[0], r[1]);
            }
        }
    }
    // equal aspect so stretched axes stay visible as such
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let map = |x: f64, y: f64| {
        (
            PAD + (x - lo[0]) / span * (SIZE - 2.0 * PAD),
            SIZE - PAD - (y - lo[1]) / span * (SIZE - 2.0 * PAD),
        )
    };
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(p) = &paths {
        for c in 0..p.states[0].nrows().min(max_paths) {
            let pts: Vec<String> = p
                .states
                .iter()
                .map(|st| {
                    let (x, y) = map(st[(c, 0)], st[(c, 1)]);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="steelblue" stroke-opacity="0.4" stroke-width="0.8" points="{}"/>"#,
                pts.join(" ")
            );
        }
    }
    for r in pts.outer_iter() {
        let (x, y) = map(r[0], r[1]);
        let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.2" fill="black" fill-opacity="0.5"/>"#);
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg).map_err(|e| VsdmError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(ExitCode::SUCCESS)
}
