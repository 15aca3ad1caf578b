//! Diagnostics over composed fields: profile grids, stick regions,
//! equilibria, quasi-static opening force, and a deterministic SVG plot.

use crate::field::ComposedField;

/// Uniformly sampled channel profiles plus derived balance quantities.
///
/// `gravity_balance` is the conservative force that would exactly cancel
/// gravity (`−gravity(s)`); where the conservative curve sits above it the
/// net drive is positive, below it negative. `band_lo`/`band_hi` widen that
/// line by the friction cap: conservative values inside the band cannot move
/// the joint from rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileGrid {
    pub s: Vec<f64>,
    pub f_cons: Vec<f64>,
    pub f_fric_max: Vec<f64>,
    pub c_damp: Vec<f64>,
    pub gravity_balance: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    /// Unit of the force axis, from the joint type.
    pub force_unit: &'static str,
}

impl ProfileGrid {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,f_cons,f_fric_max,c_damp,gravity_balance,band_lo,band_hi\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.s[i],
                self.f_cons[i],
                self.f_fric_max[i],
                self.c_damp[i],
                self.gravity_balance[i],
                self.band_lo[i],
                self.band_hi[i],
            ));
        }
        out
    }
}

/// Sample the field and its gravity balance on `n_points` uniform points.
///
/// `n_points` must be at least 2; the endpoints are exactly 0 and 1.
pub fn profile_grid(field: &ComposedField, n_points: usize) -> ProfileGrid {
    let n = n_points.max(2);
    let mut grid = ProfileGrid {
        s: Vec::with_capacity(n),
        f_cons: Vec::with_capacity(n),
        f_fric_max: Vec::with_capacity(n),
        c_damp: Vec::with_capacity(n),
        gravity_balance: Vec::with_capacity(n),
        band_lo: Vec::with_capacity(n),
        band_hi: Vec::with_capacity(n),
        force_unit: field.joint.joint_type.force_unit(),
    };
    for i in 0..n {
        let s = i as f64 / (n - 1) as f64;
        let sample = field.eval(s);
        let balance = -field.joint.gravity(s);
        grid.s.push(s);
        grid.f_cons.push(sample.conservative);
        grid.f_fric_max.push(sample.friction_max);
        grid.c_damp.push(sample.damping);
        grid.gravity_balance.push(balance);
        grid.band_lo.push(balance - sample.friction_max);
        grid.band_hi.push(balance + sample.friction_max);
    }
    grid
}

/// Maximal s-intervals where the conservative force lies within the friction
/// band, i.e. `|F_cons + gravity| ≤ F_fric,max`. Crossing points between
/// grid samples are refined linearly; zero-length intervals are dropped.
pub fn stick_regions(grid: &ProfileGrid) -> Vec<(f64, f64)> {
    let n = grid.len();
    // d(s) ≤ 0 inside the band.
    let d: Vec<f64> = (0..n)
        .map(|i| (grid.f_cons[i] - grid.gravity_balance[i]).abs() - grid.f_fric_max[i])
        .collect();
    let crossing = |i: usize, j: usize| -> f64 {
        // d changes sign between samples i and j = i+1.
        let (di, dj) = (d[i], d[j]);
        if di == dj {
            return grid.s[i];
        }
        let t = di / (di - dj);
        grid.s[i] + t * (grid.s[j] - grid.s[i])
    };
    let mut regions = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &di) in d.iter().enumerate() {
        let inside = di <= 0.0;
        if inside && run_start.is_none() {
            run_start = Some(i);
        }
        let run_ends = run_start.is_some() && (!inside || i == n - 1);
        if run_ends {
            let start = run_start.take().unwrap();
            let end = if inside { i } else { i - 1 };
            let lo = if start == 0 {
                grid.s[0]
            } else {
                crossing(start - 1, start)
            };
            let hi = if end == n - 1 {
                grid.s[n - 1]
            } else {
                crossing(end + 1, end)
            };
            if hi > lo {
                regions.push((lo, hi));
            }
        }
    }
    regions
}

/// A root of `F_cons(s) + gravity(s)` with its local stability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub s: f64,
    pub q: f64,
    /// True when the net conservative force decreases through the root.
    pub stable: bool,
}

fn net_force(field: &ComposedField, s: f64) -> f64 {
    field.eval(s).conservative + field.joint.gravity(s)
}

fn net_slope(field: &ComposedField, s: f64) -> f64 {
    field.conservative_slope(s) + field.joint.gravity_curve.eval_dx_clamped(s)
}

/// Locate equilibria by sign changes of the net conservative force on the
/// grid, bisected to 1e-9 in s. Runs of two or more exact zeros are neutral
/// plateaus and are not reported; an isolated zero sample between opposite
/// signs is.
pub fn equilibria(grid: &ProfileGrid, field: &ComposedField) -> Vec<Equilibrium> {
    let ctx = &field.joint;
    let h: Vec<f64> = (0..grid.len())
        .map(|i| grid.f_cons[i] - grid.gravity_balance[i])
        .collect();
    let mut roots = Vec::new();
    let mut push_root = |s: f64| {
        let q = ctx.q_min + s * ctx.delta_q();
        roots.push(Equilibrium {
            s,
            q,
            stable: net_slope(field, s) < 0.0,
        });
    };

    // Indices of strictly signed samples.
    let signed: Vec<usize> = (0..grid.len()).filter(|&i| h[i] != 0.0).collect();
    for pair in signed.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        if h[i].signum() == h[j].signum() {
            continue;
        }
        match j - i {
            1 => {
                // Strict sign change: bisect.
                let (mut lo, mut hi) = (grid.s[i], grid.s[j]);
                let mut f_lo = net_force(field, lo);
                while hi - lo > 1e-9 {
                    let mid = 0.5 * (lo + hi);
                    let f_mid = net_force(field, mid);
                    if f_mid == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if f_lo.signum() == f_mid.signum() {
                        lo = mid;
                        f_lo = f_mid;
                    } else {
                        hi = mid;
                    }
                }
                push_root(0.5 * (lo + hi));
            }
            2 => push_root(grid.s[i + 1]),
            _ => {} // neutral plateau between opposite signs
        }
    }
    roots
}

/// Quasi-static external force needed to advance the joint at each s.
///
/// With opening in the +q direction the force must cancel the conservative
/// and gravity loads and overcome the friction cap:
/// `F_open = −F_cons − gravity + F_fric,max`. `flip` measures opening in the
/// −q direction instead.
pub fn quasi_static_open_force(grid: &ProfileGrid, flip: bool) -> Vec<f64> {
    (0..grid.len())
        .map(|i| {
            let net = grid.f_cons[i] - grid.gravity_balance[i];
            let signed = if flip { net } else { -net };
            signed + grid.f_fric_max[i]
        })
        .collect()
}

/// Affinely map a curve onto [0, 1]; a constant curve maps to all zeros.
pub fn normalize_curve(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Linearly resample `(xs, ys)` onto `new_xs`, clamping outside the span.
pub fn resample_linear(xs: &[f64], ys: &[f64], new_xs: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    new_xs
        .iter()
        .map(|&x| {
            if x <= xs[0] {
                return ys[0];
            }
            if x >= xs[xs.len() - 1] {
                return ys[ys.len() - 1];
            }
            let j = xs.partition_point(|&p| p <= x);
            let (x0, x1) = (xs[j - 1], xs[j]);
            let t = (x - x0) / (x1 - x0);
            ys[j - 1] + t * (ys[j] - ys[j - 1])
        })
        .collect()
}

/// Optional overlays for [`render_svg`].
#[derive(Debug, Clone, Default)]
pub struct RenderAnnotations {
    pub title: Option<String>,
    pub equilibria: Vec<Equilibrium>,
    pub stick_regions: Vec<(f64, f64)>,
    /// Shade `stick_regions` when set.
    pub shade_stick_regions: bool,
}

/// Analysis summary as a JSON value with sorted keys.
pub fn analysis_json(
    grid: &ProfileGrid,
    field: &ComposedField,
    flip_open_direction: bool,
) -> serde_json::Value {
    let eqs = equilibria(grid, field);
    let regions = stick_regions(grid);
    let open = quasi_static_open_force(grid, flip_open_direction);
    let (mut i_min, mut i_max) = (0usize, 0usize);
    for (i, v) in open.iter().enumerate() {
        if *v < open[i_min] {
            i_min = i;
        }
        if *v > open[i_max] {
            i_max = i;
        }
    }
    serde_json::json!({
        "equilibria": eqs
            .iter()
            .map(|e| serde_json::json!({ "q": e.q, "s": e.s, "stable": e.stable }))
            .collect::<Vec<_>>(),
        "force_unit": grid.force_unit,
        "open_force": {
            "flip_direction": flip_open_direction,
            "max": { "s": grid.s[i_max], "value": open[i_max] },
            "min": { "s": grid.s[i_min], "value": open[i_min] },
        },
        "stick_regions": regions
            .iter()
            .map(|(a, b)| serde_json::json!([a, b]))
            .collect::<Vec<_>>(),
    })
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

struct Mapper {
    y_lo: f64,
    y_hi: f64,
}

impl Mapper {
    fn x(&self, s: f64) -> f64 {
        MARGIN_L + s * (SVG_W - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_lo) / (self.y_hi - self.y_lo);
        SVG_H - MARGIN_B - t * (SVG_H - MARGIN_T - MARGIN_B)
    }
}

fn polyline(grid: &ProfileGrid, values: &[f64], map: &Mapper) -> String {
    let mut points = String::new();
    for (s, v) in grid.s.iter().zip(values) {
        if !points.is_empty() {
            points.push(' ');
        }
        points.push_str(&format!("{:.2},{:.2}", map.x(*s), map.y(*v)));
    }
    points
}

/// Render the profile as a deterministic standalone SVG document.
///
/// Solid red: conservative force. Dashed blue: gravity balance. Gray band:
/// friction range around the balance line. Dotted green: damping (same
/// axis). Output bytes depend only on the inputs.
pub fn render_svg(grid: &ProfileGrid, annotations: &RenderAnnotations) -> String {
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for series in [&grid.f_cons, &grid.band_lo, &grid.band_hi, &grid.c_damp] {
        for v in series.iter() {
            y_lo = y_lo.min(*v);
            y_hi = y_hi.max(*v);
        }
    }
    y_lo = y_lo.min(0.0);
    y_hi = y_hi.max(0.0);
    if y_hi <= y_lo {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let map = Mapper {
        y_lo: y_lo - pad,
        y_hi: y_hi + pad,
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    if let Some(title) = &annotations.title {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            0.5 * SVG_W,
            xml_escape(title)
        ));
    }

    if annotations.shade_stick_regions {
        for (a, b) in &annotations.stick_regions {
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#f5e6c8\"/>\n",
                map.x(*a),
                MARGIN_T,
                map.x(*b) - map.x(*a),
                SVG_H - MARGIN_T - MARGIN_B,
            ));
        }
    }

    // Friction band: band_hi forward, band_lo reversed.
    let mut band = polyline(grid, &grid.band_hi, &map);
    for (s, v) in grid.s.iter().zip(&grid.band_lo).rev() {
        band.push_str(&format!(" {:.2},{:.2}", map.x(*s), map.y(*v)));
    }
    svg.push_str(&format!(
        "<polygon points=\"{band}\" fill=\"#c8c8c8\" fill-opacity=\"0.5\" stroke=\"none\"/>\n"
    ));

    // Axes and ticks.
    let x0 = map.x(0.0);
    let x1 = map.x(1.0);
    let y_axis_bottom = SVG_H - MARGIN_B;
    svg.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{MARGIN_T:.2}\" x2=\"{x0:.2}\" y2=\"{y_axis_bottom:.2}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{y_axis_bottom:.2}\" x2=\"{x1:.2}\" y2=\"{y_axis_bottom:.2}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=5 {
        let s = i as f64 / 5.0;
        let x = map.x(s);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y_axis_bottom:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y_axis_bottom + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{s:.1}</text>\n",
            y_axis_bottom + 20.0
        ));
    }
    for i in 0..=4 {
        let v = map.y_lo + (map.y_hi - map.y_lo) * i as f64 / 4.0;
        let y = map.y(v);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{x0:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{v:.3}</text>\n",
            x0 - 8.0,
            y + 4.0
        ));
    }
    // Zero line.
    let y_zero = map.y(0.0);
    svg.push_str(&format!(
        "<line x1=\"{x0:.2}\" y1=\"{y_zero:.2}\" x2=\"{x1:.2}\" y2=\"{y_zero:.2}\" stroke=\"#888888\" stroke-width=\"0.5\"/>\n"
    ));

    // Curves.
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#2060c0\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"/>\n",
        polyline(grid, &grid.gravity_balance, &map)
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#208040\" stroke-width=\"1.0\" stroke-dasharray=\"2,3\"/>\n",
        polyline(grid, &grid.c_damp, &map)
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c02020\" stroke-width=\"2.0\"/>\n",
        polyline(grid, &grid.f_cons, &map)
    ));

    // Equilibrium markers at the net-zero crossing height.
    for eq in &annotations.equilibria {
        let y = map.y(resample_linear(&grid.s, &grid.f_cons, &[eq.s])[0]);
        let fill = if eq.stable { "#208040" } else { "#e08020" };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{fill}\" stroke=\"black\"/>\n",
            map.x(eq.s)
        ));
    }

    // Labels and legend.
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\">s (normalized position)</text>\n",
        0.5 * (x0 + x1),
        SVG_H - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">force [{}]</text>\n",
        0.5 * SVG_H,
        0.5 * SVG_H,
        grid.force_unit
    ));
    let legend_x = x1 - 230.0;
    let entries = [
        ("#c02020", "conservative force"),
        ("#2060c0", "gravity balance"),
        ("#208040", "damping coefficient"),
        ("#c8c8c8", "friction band"),
    ];
    for (i, (color, label)) in entries.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{legend_x:.2}\" y=\"{:.2}\" width=\"18\" height=\"4\" fill=\"{color}\"/>\n",
            y - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{y:.2}\" font-family=\"monospace\" font-size=\"12\">{label}</text>\n",
            legend_x + 24.0
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
