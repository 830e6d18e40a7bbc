//! Static SVG bar charts with confidence whiskers. No external references,
//! no scripting; one bar per group with the CI drawn as a vertical whisker.

use anyhow::{bail, Result};

use recon_core::analysis::GroupStat;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 90.0;
const BAR_FILL: &str = "#4878a8";
const WHISKER_STROKE: &str = "#222222";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one comparison's group statistics as a bar chart. Bars are drawn
/// in input order; value 0 always falls on a drawn axis line.
pub fn render_bar_chart(title: &str, y_label: &str, stats: &[GroupStat]) -> Result<String> {
    if stats.is_empty() {
        bail!("no groups to plot");
    }
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for s in stats {
        lo = lo.min(s.ci_low).min(s.mean_lor);
        hi = hi.max(s.ci_high).max(s.mean_lor);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        bail!("non-finite statistics");
    }
    let span = (hi - lo).max(1e-9);
    let pad = span * 0.08;
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_of = |v: f64| MARGIN_TOP + (hi - v) / (hi - lo) * plot_h;
    let slot = plot_w / stats.len() as f64;
    let bar_w = slot * 0.6;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" \
         font-family=\"sans-serif\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        esc(y_label)
    ));
    // Y axis with ticks at lo, 0 (when inside) and hi.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{}\" \
         stroke=\"{WHISKER_STROKE}\"/>\n",
        MARGIN_TOP + plot_h
    ));
    let mut ticks = vec![lo, hi];
    if lo < 0.0 && hi > 0.0 {
        ticks.push(0.0);
    }
    for t in ticks {
        let y = y_of(t);
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y:.3}\" x2=\"{}\" y2=\"{y:.3}\" stroke=\"#999999\"/>\n",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT + plot_w
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.3}\" text-anchor=\"end\" font-size=\"11\" \
             font-family=\"sans-serif\">{t:.3}</text>\n",
            MARGIN_LEFT - 9.0,
            y + 4.0
        ));
    }
    let base = y_of(0.0f64.clamp(lo, hi));
    for (i, s) in stats.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let x = cx - bar_w / 2.0;
        let top = y_of(s.mean_lor.max(0.0f64.clamp(lo, hi)));
        let bottom = y_of(s.mean_lor.min(0.0f64.clamp(lo, hi)));
        svg.push_str(&format!(
            "  <rect x=\"{x:.3}\" y=\"{top:.3}\" width=\"{bar_w:.3}\" height=\"{:.3}\" \
             fill=\"{BAR_FILL}\" data-mean=\"{}\" data-y=\"{:.6}\"/>\n",
            (bottom - top).max(0.0),
            crate::formats::fmt_f64(s.mean_lor),
            y_of(s.mean_lor)
        ));
        let (wy1, wy2) = (y_of(s.ci_high), y_of(s.ci_low));
        svg.push_str(&format!(
            "  <line x1=\"{cx:.3}\" y1=\"{wy1:.3}\" x2=\"{cx:.3}\" y2=\"{wy2:.3}\" \
             stroke=\"{WHISKER_STROKE}\"/>\n"
        ));
        for wy in [wy1, wy2] {
            svg.push_str(&format!(
                "  <line x1=\"{:.3}\" y1=\"{wy:.3}\" x2=\"{:.3}\" y2=\"{wy:.3}\" \
                 stroke=\"{WHISKER_STROKE}\"/>\n",
                cx - bar_w * 0.25,
                cx + bar_w * 0.25
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{cx:.3}\" y=\"{:.3}\" text-anchor=\"end\" font-size=\"11\" \
             font-family=\"sans-serif\" transform=\"rotate(-35 {cx:.3} {:.3})\">{} (n={})</text>\n",
            MARGIN_TOP + plot_h + 16.0,
            MARGIN_TOP + plot_h + 16.0,
            esc(&s.key.value),
            s.count
        ));
    }
    let _ = base;
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{base:.3}\" x2=\"{}\" y2=\"{base:.3}\" \
         stroke=\"{WHISKER_STROKE}\"/>\n",
        MARGIN_LEFT + plot_w
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use recon_core::analysis::{GroupDimension, GroupKey};

    fn stat(value: &str, mean: f64, lo: f64, hi: f64) -> GroupStat {
        GroupStat {
            key: GroupKey { dimension: GroupDimension::RelationCategory, value: value.into() },
            comparison: "c".into(),
            count: 10,
            mean_lor: mean,
            ci_low: lo,
            ci_high: hi,
        }
    }

    /// Minimal well-formedness check: tags balance and attributes are quoted.
    fn assert_well_formed_xml(text: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched close");
            } else if !tag.ends_with('/') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
                assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in {tag}");
            }
        }
        assert!(stack.is_empty(), "unclosed tags {stack:?}");
        assert!(!rest.contains('>'), "stray closing bracket");
    }

    #[test]
    fn single_group_has_one_bar_and_whiskers() {
        let svg = render_bar_chart("t", "LOR", &[stat("a", 1.0, 0.8, 1.2)]).unwrap();
        assert_eq!(svg.matches("<rect").count(), 1);
        // axis + three ticks + whisker stem + two caps + baseline
        assert_eq!(svg.matches("<line").count(), 8);
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn output_is_well_formed_and_self_contained() {
        let stats = vec![
            stat("a&b", 1.0, 0.8, 1.2),
            stat("c<d>", -0.5, -0.9, -0.1),
            stat("e", 0.0, -0.05, 0.05),
        ];
        let svg = render_bar_chart("demo <chart>", "LOR", &stats).unwrap();
        assert_well_formed_xml(&svg);
        assert!(!svg.contains("href"));
        assert!(!svg.contains("script"));
    }

    #[test]
    fn bar_positions_are_proportional_to_means() {
        let stats = vec![
            stat("a", 0.0, -0.1, 0.1),
            stat("b", 1.0, 0.9, 1.1),
            stat("c", 2.0, 1.9, 2.1),
        ];
        let svg = render_bar_chart("t", "LOR", &stats).unwrap();
        let ys: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("<rect"))
            .map(|l| {
                let i = l.find("data-y=\"").unwrap() + 8;
                let j = l[i..].find('"').unwrap() + i;
                l[i..j].parse().unwrap()
            })
            .collect();
        assert_eq!(ys.len(), 3);
        // Equal mean increments must give equal pixel decrements.
        let d1 = ys[0] - ys[1];
        let d2 = ys[1] - ys[2];
        assert!(d1 > 10.0);
        assert!((d1 - d2).abs() < 0.5, "d1={d1} d2={d2}");
    }

    #[test]
    fn empty_stats_rejected() {
        assert!(render_bar_chart("t", "LOR", &[]).is_err());
    }
}
