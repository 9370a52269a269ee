//! Self-contained HTML heatmaps of per-token scores.

use std::fmt::Write as _;

use crate::labelers::{Method, TokenPrediction};

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Background colour for an intensity in `[0, 1]`: white at 0, pure blue at 1.
pub fn intensity_color(x: f64) -> String {
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    let rg = (255.0 * (1.0 - x)).round() as u8;
    format!("rgb({rg},{rg},255)")
}

/// Min-max normalization to `[0, 1]`; a constant row maps to zeros.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Rendering intensities: attention and probabilities as-is, gradient
/// magnitudes rescaled per sentence.
pub fn intensities(preds: &[TokenPrediction]) -> Vec<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    match preds.first().map(|p| p.method) {
        Some(Method::Backprop) => min_max(&scores),
        _ => scores,
    }
}

pub fn render_sentence(tokens: &[String], preds: &[TokenPrediction]) -> String {
    let mut out = String::from("<p class=\"s\">");
    for (tok, (p, x)) in tokens.iter().zip(preds.iter().zip(intensities(preds))) {
        let fg = if x > 0.6 { "#fff" } else { "#000" };
        let _ = write!(
            out,
            "<span style=\"background:{};color:{fg}\" title=\"{:.4}\">{}</span> ",
            intensity_color(x),
            p.score,
            escape_html(tok)
        );
    }
    out.push_str("</p>\n");
    out
}

pub fn render_page(title: &str, sentences: &[(&[String], &[TokenPrediction])]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title>\n\
         <style>body{{font-family:sans-serif;max-width:60em;margin:2em auto}}\
         .s span{{padding:1px 3px;border-radius:3px;line-height:1.9}}</style>\n\
         </head><body>\n<h1>{t}</h1>\n",
        t = escape_html(title)
    );
    for (tokens, preds) in sentences {
        out.push_str(&render_sentence(tokens, preds));
    }
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(score: f64, method: Method) -> TokenPrediction {
        TokenPrediction { score, label: 0, method }
    }

    #[test]
    fn endpoints() {
        assert_eq!(intensity_color(0.0), "rgb(255,255,255)");
        assert_eq!(intensity_color(1.0), "rgb(0,0,255)");
        assert_eq!(intensity_color(2.0), "rgb(0,0,255)");
        assert_eq!(intensity_color(f64::NAN), "rgb(255,255,255)");
    }

    #[test]
    fn escapes_tokens() {
        let html = render_sentence(&["<b>&\"".to_string()], &[pred(0.5, Method::Attention)]);
        assert!(html.contains("&lt;b&gt;&amp;&quot;"));
        assert!(!html.contains("<b>"));
    }

    #[test]
    fn backprop_is_rescaled() {
        let p = [pred(2.0, Method::Backprop), pred(4.0, Method::Backprop), pred(3.0, Method::Backprop)];
        assert_eq!(intensities(&p), vec![0.0, 1.0, 0.5]);
        let flat = [pred(2.0, Method::Backprop), pred(2.0, Method::Backprop)];
        assert_eq!(intensities(&flat), vec![0.0, 0.0]);
        let att = [pred(0.25, Method::Attention)];
        assert_eq!(intensities(&att), vec![0.25]);
    }

    #[test]
    fn page_is_self_contained() {
        let toks = vec!["a".to_string()];
        let p = vec![pred(1.0, Method::Attention)];
        let html = render_page("x", &[(&toks, &p)]);
        assert!(!html.contains("http"));
        assert!(!html.contains("src="));
        assert!(html.contains("rgb(0,0,255)"));
    }
}
