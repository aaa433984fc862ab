//! Text forms of a metric report.

use std::fmt::Write;

use capcore::metrics::MetricReport;

fn header(r: &MetricReport) -> Vec<(&'static str, String)> {
    let c = &r.config;
    vec![
        ("bleu", format!("pooled,smoothing={}", if c.bleu_smoothing { "add-one" } else { "off" })),
        ("cider", "original,idf=ln(N/(1+df)),x10".into()),
        ("meteor", format!("exact{},no-synonyms", if c.stemming { "+stem" } else { "" })),
        ("rouge_l", format!("lcs,beta={:?}", c.rouge_beta)),
        ("pairs", r.pairs.to_string()),
        ("references", r.references.to_string()),
        ("hypothesis_tokens", r.hypothesis_tokens.to_string()),
    ]
}

/// Header block of variant flags and corpus sizes, then one line per metric.
/// Scores are printed with enough digits to round-trip.
pub fn render_text(r: &MetricReport) -> String {
    let mut s = String::from("# caption metrics\n");
    for (k, v) in header(r) {
        let _ = writeln!(s, "# {k}: {v}");
    }
    for (k, v) in r.scores() {
        let _ = writeln!(s, "{k:<8} {v:?}");
    }
    s
}

/// `key=value` lines; header entries carry a `variant.` or `corpus.` prefix.
pub fn render_machine(r: &MetricReport) -> String {
    let mut s = String::new();
    for (i, (k, v)) in header(r).into_iter().enumerate() {
        let prefix = if i < 4 { "variant" } else { "corpus" };
        let _ = writeln!(s, "{prefix}.{k}={v}");
    }
    for (k, v) in r.scores() {
        let _ = writeln!(s, "{k}={v:?}");
    }
    s
}

/// Tab-separated `key value` rows: corpus scores, then per-video series.
pub fn plot_data(r: &MetricReport, ids: &[String]) -> String {
    let mut s = String::from("key\tvalue\n");
    for (k, v) in r.scores() {
        let _ = writeln!(s, "corpus.{k}\t{v:?}");
    }
    for (id, sc) in ids.iter().zip(&r.sentences) {
        for (n, b) in sc.bleu.iter().enumerate() {
            let _ = writeln!(s, "{id}.bleu_{}\t{b:?}", n + 1);
        }
        let _ = writeln!(s, "{id}.cider\t{:?}", sc.cider);
        let _ = writeln!(s, "{id}.meteor\t{:?}", sc.meteor);
        let _ = writeln!(s, "{id}.rouge_l\t{:?}", sc.rouge_l);
    }
    s
}
