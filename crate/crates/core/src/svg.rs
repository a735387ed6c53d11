//! Dependency-free SVG figures: scatter plots, histograms and horizontal
//! bar charts for the evaluation reports.

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        self.margin + (v - self.x_min) / span * (self.width - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        self.height - self.margin - (v - self.y_min) / span * (self.height - 2.0 * self.margin)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let m = self.margin;
        out.push_str(&format!(
            "<rect x='{m}' y='{m}' width='{}' height='{}' fill='none' stroke='#444'/>\n",
            self.width - 2.0 * m,
            self.height - 2.0 * m
        ));
        for i in 0..=4 {
            let fx = self.x_min + (self.x_max - self.x_min) * i as f64 / 4.0;
            let fy = self.y_min + (self.y_max - self.y_min) * i as f64 / 4.0;
            out.push_str(&format!(
                "<text x='{:.1}' y='{:.1}' font-size='10' text-anchor='middle' fill='#333'>{:.1}</text>\n",
                self.x(fx),
                self.height - m + 14.0,
                fx
            ));
            out.push_str(&format!(
                "<text x='{:.1}' y='{:.1}' font-size='10' text-anchor='end' fill='#333'>{:.1}</text>\n",
                m - 4.0,
                self.y(fy) + 3.0,
                fy
            ));
        }
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='11' text-anchor='middle' fill='#111'>{}</text>\n",
            self.width / 2.0,
            self.height - 4.0,
            esc(x_label)
        ));
        out.push_str(&format!(
            "<text x='12' y='{:.1}' font-size='11' text-anchor='middle' fill='#111' transform='rotate(-90 12 {:.1})'>{}</text>\n",
            self.height / 2.0,
            self.height / 2.0,
            esc(y_label)
        ));
    }
}

fn header(width: f64, height: f64, title: &str) -> String {
    format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}' viewBox='0 0 {width} {height}'>\n\
         <rect width='100%' height='100%' fill='white'/>\n\
         <text x='{:.1}' y='16' font-size='13' text-anchor='middle' fill='#000'>{}</text>\n",
        width / 2.0,
        esc(title)
    )
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Scatter of (x, y) points with a y = x guide line.
pub fn scatter_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> String {
    let (width, height) = (420.0, 420.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let all: Vec<f64> = xs.iter().chain(&ys).cloned().collect();
    let (lo, hi) = if all.is_empty() { (0.0, 1.0) } else { bounds(&all) };
    let frame = Frame {
        width,
        height,
        margin: 44.0,
        x_min: lo,
        x_max: hi,
        y_min: lo,
        y_max: hi,
    };
    let mut out = header(width, height, title);
    frame.axes(&mut out, x_label, y_label);
    out.push_str(&format!(
        "<line x1='{:.1}' y1='{:.1}' x2='{:.1}' y2='{:.1}' stroke='#999' stroke-dasharray='4 3'/>\n",
        frame.x(lo),
        frame.y(lo),
        frame.x(hi),
        frame.y(hi)
    ));
    for (x, y) in points {
        out.push_str(&format!(
            "<circle cx='{:.1}' cy='{:.1}' r='2.4' fill='#2b6cb0' fill-opacity='0.6'/>\n",
            frame.x(*x),
            frame.y(*y)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram with a fixed number of equal-width bins.
pub fn histogram(title: &str, x_label: &str, values: &[f64], bins: usize) -> String {
    let (width, height) = (420.0, 300.0);
    let bins = bins.max(1);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else {
        bounds(values)
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let f = ((v - lo) / (hi - lo) * bins as f64).floor();
        let b = (f as usize).min(bins - 1);
        counts[b] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1);
    let frame = Frame {
        width,
        height,
        margin: 44.0,
        x_min: lo,
        x_max: hi,
        y_min: 0.0,
        y_max: peak as f64,
    };
    let mut out = header(width, height, title);
    frame.axes(&mut out, x_label, "count");
    let bar_w = (frame.x(hi) - frame.x(lo)) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let x = frame.x(lo) + i as f64 * bar_w;
        let y = frame.y(c as f64);
        out.push_str(&format!(
            "<rect x='{:.1}' y='{:.1}' width='{:.1}' height='{:.1}' fill='#38a169' fill-opacity='0.8' stroke='white'/>\n",
            x,
            y,
            bar_w,
            frame.y(0.0) - y
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal bar chart, one bar per labeled value, ordered as given.
pub fn bar_chart(title: &str, x_label: &str, rows: &[(String, f64)]) -> String {
    let (width, row_h) = (480.0, 20.0);
    let height = 60.0 + rows.len() as f64 * row_h;
    let max = rows.iter().map(|r| r.1).fold(0.0, f64::max).max(1e-12);
    let (label_w, margin) = (150.0, 16.0);
    let span = width - label_w - 2.0 * margin;
    let mut out = header(width, height, title);
    for (i, (label, value)) in rows.iter().enumerate() {
        let y = 32.0 + i as f64 * row_h;
        let w = (value / max).max(0.0) * span;
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='10' text-anchor='end' fill='#111'>{}</text>\n",
            label_w - 6.0,
            y + row_h * 0.65,
            esc(label)
        ));
        out.push_str(&format!(
            "<rect x='{label_w}' y='{:.1}' width='{w:.1}' height='{:.1}' fill='#b05a2b'/>\n",
            y + 3.0,
            row_h - 6.0
        ));
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='9' fill='#333'>{:.4}</text>\n",
            label_w + w + 4.0,
            y + row_h * 0.65,
            value
        ));
    }
    out.push_str(&format!(
        "<text x='{:.1}' y='{:.1}' font-size='11' text-anchor='middle' fill='#111'>{}</text>\n",
        width / 2.0,
        height - 6.0,
        esc(x_label)
    ));
    out.push_str("</svg>\n");
    out
}
