//! Minimal dependency-free SVG line plots. Presentation only: every number
//! shown here also lives in a CSV or JSON artifact.

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

pub struct LinePlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
    /// Shade the area between the first two series.
    pub shade_between: bool,
    pub annotation: Option<String>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 60.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;

impl<'a> LinePlot<'a> {
    pub fn render(&self) -> String {
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
        if !x_lo.is_finite() {
            x_lo = 0.0;
            x_hi = 1.0;
            y_lo = 0.0;
            y_hi = 1.0;
        }
        if x_hi == x_lo {
            x_hi = x_lo + 1.0;
        }
        if y_hi == y_lo {
            y_hi = y_lo + 1.0;
        }
        let pad = (y_hi - y_lo) * 0.05;
        let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
        let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        ));
        out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        out.push_str(&format!(
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" font-family=\"sans-serif\">{}</text>\n",
            W / 2.0,
            escape(self.title)
        ));

        if self.shade_between && self.series.len() >= 2 {
            let a = &self.series[0].points;
            let b = &self.series[1].points;
            let mut path = String::from("M");
            for &(x, y) in a {
                path.push_str(&format!(" {:.2},{:.2}", px(x), py(y)));
            }
            for &(x, y) in b.iter().rev() {
                path.push_str(&format!(" L {:.2},{:.2}", px(x), py(y)));
            }
            path.push_str(" Z");
            out.push_str(&format!(
                "<path d=\"{}\" fill=\"#bbbbbb\" fill-opacity=\"0.4\" stroke=\"none\"/>\n",
                path
            ));
        }

        // axes
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB,
            W - MR,
            H - MB
        ));
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB
        ));
        for (v, anchor) in [(x_lo, "start"), (x_hi, "end")] {
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{}\" font-size=\"11\" font-family=\"sans-serif\">{:.3}</text>\n",
                px(v),
                H - MB + 16.0,
                anchor,
                v
            ));
        }
        for v in [y_lo + pad, y_hi - pad] {
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">{:.3}</text>\n",
                ML - 6.0,
                py(v) + 4.0,
                v
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            (ML + W - MR) / 2.0,
            H - 12.0,
            escape(self.x_label)
        ));
        out.push_str(&format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {})\">{}</text>\n",
            (MT + H - MB) / 2.0,
            (MT + H - MB) / 2.0,
            escape(self.y_label)
        ));

        for s in &self.series {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                pts.join(" "),
                s.color
            ));
        }
        // legend for labeled series
        let mut ly = MT + 8.0;
        for s in &self.series {
            if s.label.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "<line x1=\"{}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                W - MR - 120.0,
                ly,
                W - MR - 96.0,
                ly,
                s.color
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
                W - MR - 90.0,
                ly + 4.0,
                escape(s.label)
            ));
            ly += 16.0;
        }
        if let Some(note) = &self.annotation {
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{:.2}\" font-size=\"13\" font-family=\"sans-serif\">{}</text>\n",
                ML + 10.0,
                MT + 14.0,
                escape(note)
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
