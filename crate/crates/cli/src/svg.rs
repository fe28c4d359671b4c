//! Self-contained SVG emission: line charts and heatmaps with inline
//! styling only, no external assets or fonts.

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi - lo).is_finite() || hi <= lo {
        return vec![lo];
    }
    (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect()
}

/// Multi-series line chart with axes, ticks and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
    }
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if y_hi == y_lo {
        y_hi = y_lo + 1.0;
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - y_lo) / (y_hi - y_lo) * ph;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"monospace\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        escape(title)
    ));
    // axes
    out.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_T + ph,
        MARGIN_L + pw,
        MARGIN_T + ph
    ));
    out.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_T + ph
    ));
    for t in nice_ticks(x_lo, x_hi, 5) {
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
            fmt(sx(t)),
            MARGIN_T + ph,
            MARGIN_T + ph + 5.0,
            MARGIN_T + ph + 20.0,
            fmt(t)
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\">{5}</text>\n",
            MARGIN_L - 5.0,
            fmt(sy(t)),
            MARGIN_L,
            MARGIN_L - 8.0,
            fmt(sy(t) + 4.0),
            fmt(t)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        escape(y_label)
    ));
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * i as f64 + 10.0;
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{4}</text>\n",
            MARGIN_L + pw + 10.0,
            MARGIN_L + pw + 30.0,
            MARGIN_L + pw + 36.0,
            ly + 4.0,
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Three-stop color ramp for heatmap cells, v in [0, 1].
fn heat_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v * 2.0;
        lerp3((68, 1, 84), (33, 145, 140), t)
    } else {
        let t = (v - 0.5) * 2.0;
        lerp3((33, 145, 140), (253, 231, 37), t)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn lerp3(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> (u8, u8, u8) {
    let l = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    (l(a.0, b.0), l(a.1, b.1), l(a.2, b.2))
}

/// Heatmap of a rows x cols value grid in [0, 1], one labeled row per
/// series (e.g. expert weights across sampling steps).
pub fn heatmap(title: &str, x_label: &str, row_labels: &[String], grid: &[Vec<f64>]) -> String {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let cw = pw / cols.max(1) as f64;
    let ch = ph / rows.max(1) as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"monospace\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        escape(title)
    ));
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                fmt(MARGIN_L + c as f64 * cw),
                fmt(MARGIN_T + r as f64 * ch),
                fmt(cw + 0.5),
                fmt(ch + 0.5),
                heat_color(v)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            fmt(MARGIN_T + (r as f64 + 0.5) * ch + 4.0),
            escape(&row_labels[r])
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    // color scale legend
    for i in 0..=20 {
        let v = i as f64 / 20.0;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"16\" height=\"{}\" fill=\"{}\"/>\n",
            fmt(MARGIN_L + pw + 20.0),
            fmt(MARGIN_T + ph - (i as f64 + 1.0) / 21.0 * ph),
            fmt(ph / 21.0 + 0.5),
            heat_color(v)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">1.0</text>\n<text x=\"{}\" y=\"{}\">0.0</text>\n",
        MARGIN_L + pw + 42.0,
        MARGIN_T + 10.0,
        MARGIN_L + pw + 42.0,
        MARGIN_T + ph
    ));
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
