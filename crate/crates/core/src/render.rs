//! Self-contained SVG heatmaps.

use std::fmt::Write as _;

use crate::grid::{Heatmap, Metric, TrendReport};
use crate::uncertainty::format_sig6;

// ColorBrewer RdBu, 9 classes, red for low values.
const DIVERGING: [&str; 9] = [
    "#b2182b", "#d6604d", "#f4a582", "#fddbc7", "#f7f7f7", "#d1e5f0", "#92c5de", "#4393c3", "#2166ac",
];
// ColorBrewer YlOrRd, 9 classes.
const SEQUENTIAL: [&str; 9] = [
    "#ffffcc", "#ffeda0", "#fed976", "#feb24c", "#fd8d3c", "#fc4e2a", "#e31a1c", "#bd0026", "#800026",
];

/// Value range and palette for a metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorScale {
    pub lo: f64,
    pub hi: f64,
    pub diverging: bool,
}

impl ColorScale {
    /// AUC is centered at chance (0.5) and delta at 0; uncertainties and
    /// accuracy use a sequential scale over [0, 1].
    pub fn for_metric(metric: Metric, values: &[f64]) -> Self {
        match metric {
            Metric::Auc => ColorScale {
                lo: 0.0,
                hi: 1.0,
                diverging: true,
            },
            Metric::Delta => {
                let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                ColorScale {
                    lo: -m,
                    hi: m,
                    diverging: true,
                }
            }
            _ => ColorScale {
                lo: 0.0,
                hi: 1.0,
                diverging: false,
            },
        }
    }

    pub fn color(&self, v: f64) -> &'static str {
        let palette = if self.diverging { &DIVERGING } else { &SEQUENTIAL };
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        let i = ((t * palette.len() as f64) as usize).min(palette.len() - 1);
        palette[i]
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Widths on the x axis, train sizes on the y axis with the smallest at the
/// bottom. Cells carry their value as text; absent cells are hatched grey.
pub fn heatmap_svg(map: &Heatmap, title: &str, trend: Option<&TrendReport>) -> String {
    const CELL: usize = 64;
    const LEFT: usize = 90;
    const TOP: usize = 40;
    let cols = map.widths.len();
    let rows = map.train_sizes.len();
    let grid_w = cols * CELL;
    let grid_h = rows * CELL;
    let legend_x = LEFT + grid_w + 30;
    let trend_lines = trend.map(|t| t.summary_lines()).unwrap_or_default();
    let width = legend_x + 90;
    let height = TOP + grid_h + 60 + trend_lines.len() * 16;
    let scale = ColorScale::for_metric(map.metric, &map.defined_values());

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="22" font-size="14" font-weight="bold">{}</text>"#,
        escape(title)
    );
    for (r, (n, row)) in map.train_sizes.iter().zip(&map.values).enumerate() {
        let y = TOP + (rows - 1 - r) * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{n}</text>"#,
            LEFT - 6,
            y + CELL / 2 + 4
        );
        for (c, v) in row.iter().enumerate() {
            let x = LEFT + c * CELL;
            match v {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="white"/>"#,
                        scale.color(*v)
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{v:.3}</text>"#,
                        x + CELL / 2,
                        y + CELL / 2 + 3,
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#cccccc" stroke="white"/>"##
                    );
                }
            }
        }
    }
    for (c, w) in map.widths.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{w}</text>"#,
            LEFT + c * CELL + CELL / 2,
            TOP + grid_h + 16
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">hidden width</text>"#,
        LEFT + grid_w / 2,
        TOP + grid_h + 34
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">train size</text>"#,
        TOP + grid_h / 2,
        TOP + grid_h / 2
    );

    // legend, high values on top
    let steps = 9;
    let step_h = grid_h.max(CELL * 2) / steps;
    for i in 0..steps {
        let t = (steps - 1 - i) as f64 / (steps - 1) as f64;
        let v = scale.lo + t * (scale.hi - scale.lo);
        let y = TOP + i * step_h;
        let _ = writeln!(
            s,
            r#"<rect x="{legend_x}" y="{y}" width="18" height="{step_h}" fill="{}"/>"#,
            scale.color(v)
        );
        if i == 0 || i == steps / 2 || i == steps - 1 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                legend_x + 24,
                y + step_h / 2 + 4,
                format_sig6(v)
            );
        }
    }

    for (i, line) in trend_lines.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="{}">{}</text>"#,
            TOP + grid_h + 56 + i * 16,
            escape(line)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(metric: Metric) -> Heatmap {
        Heatmap {
            metric,
            widths: vec![8, 32],
            train_sizes: vec![100, 1000],
            values: vec![vec![Some(0.1), None], vec![Some(0.9), Some(0.5)]],
        }
    }

    #[test]
    fn auc_scale_is_centered_at_chance() {
        let s = ColorScale::for_metric(Metric::Auc, &[0.9]);
        assert_eq!(s.color(0.5), "#f7f7f7");
        assert_eq!(s.color(0.0), DIVERGING[0]);
        assert_eq!(s.color(1.0), DIVERGING[8]);
    }

    #[test]
    fn delta_scale_is_symmetric() {
        let s = ColorScale::for_metric(Metric::Delta, &[-0.2, 0.05]);
        assert_eq!((s.lo, s.hi), (-0.2, 0.2));
        assert_eq!(s.color(0.0), "#f7f7f7");
    }

    #[test]
    fn smallest_train_size_drawn_lowest() {
        let svg = heatmap_svg(&map(Metric::EpistemicId), "epistemic <id>", None);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("epistemic &lt;id&gt;"));
        let y_of = |label: &str| {
            let key = format!(">{label}</text>");
            let at = svg.find(&key).unwrap();
            let line_start = svg[..at].rfind('\n').unwrap();
            let line = &svg[line_start..at];
            let y = line.split("y=\"").nth(1).unwrap();
            y[..y.find('"').unwrap()].parse::<usize>().unwrap()
        };
        assert!(y_of("100") > y_of("1000"));
        assert!(svg.contains("#cccccc"));
    }
}
