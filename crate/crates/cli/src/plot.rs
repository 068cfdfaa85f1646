//! Static before/after distribution plots: one CSV and one SVG per cell.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

pub const BINS: usize = 20;

/// Counts over `bins` equal-width bins spanning `[lo, hi]`; the top edge
/// falls in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let idx = if width > 0.0 {
            ((v - lo) / width).floor() as isize
        } else {
            0
        };
        counts[idx.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

fn range(baseline: &[f64], post: &[f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in baseline.iter().chain(post) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.05, hi + 0.05);
    }
    (lo, hi)
}

pub fn write_cell_plot(dir: &Path, name: &str, title: &str, baseline: &[f64], post: &[f64]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let (lo, hi) = range(baseline, post);
    let b = histogram(baseline, lo, hi, BINS);
    let p = histogram(post, lo, hi, BINS);
    let width = (hi - lo) / BINS as f64;

    let mut csv = String::from("bin_low,bin_high,baseline,post\n");
    for i in 0..BINS {
        let a = lo + width * i as f64;
        writeln!(csv, "{a:.6},{:.6},{},{}", a + width, b[i], p[i]).expect("string write");
    }
    fs::write(dir.join(format!("{name}.csv")), csv)?;
    fs::write(
        dir.join(format!("{name}.svg")),
        svg(title, lo, hi, &b, &p, baseline.len(), post.len()),
    )
}

fn svg(title: &str, lo: f64, hi: f64, b: &[usize], p: &[usize], nb: usize, np: usize) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let share = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let top = b
        .iter()
        .map(|c| share(*c, nb))
        .chain(p.iter().map(|c| share(*c, np)))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let step = (W - 2.0 * M) / b.len() as f64;
    let line = |counts: &[usize], n: usize| {
        let mut pts = String::new();
        for (i, c) in counts.iter().enumerate() {
            let y = H - M - share(*c, n) / top * (H - 2.0 * M);
            let x0 = M + step * i as f64;
            write!(pts, "{x0:.1},{y:.1} {:.1},{y:.1} ", x0 + step).expect("string write");
        }
        pts
    };
    let mut s = String::new();
    writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"##
    )
    .unwrap();
    writeln!(s, r##"<rect width="{W}" height="{H}" fill="white"/>"##).unwrap();
    writeln!(s, r##"<text x="{M}" y="24" font-size="14">{}</text>"##, escape(title)).unwrap();
    writeln!(
        s,
        r##"<line x1="{M}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"##,
        H - M,
        W - M
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"##,
        H - M
    )
    .unwrap();
    writeln!(s, r##"<text x="{M}" y="{}">{lo:.3}</text>"##, H - M + 16.0).unwrap();
    writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"##,
        W - M,
        H - M + 16.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="middle">similarity</text>"##,
        W / 2.0,
        H - 8.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        line(b, nb)
    )
    .unwrap();
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="2" points="{}"/>"##,
        line(p, np)
    )
    .unwrap();
    writeln!(
        s,
        r##"<text x="{}" y="44" fill="#1f77b4" text-anchor="end">baseline (n={nb})</text>"##,
        W - M
    )
    .unwrap();
    writeln!(
        s,
        r##"<text x="{}" y="60" fill="#d62728" text-anchor="end">post (n={np})</text>"##,
        W - M
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
