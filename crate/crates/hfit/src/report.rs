//! Plain-text and key-value renderings of metric, ablation and parameter
//! reports. Metrics are printed as percentages with two decimals.

use std::fmt::Write as _;

use hfit_core::metrics::MetricsReport;
use hfit_core::model::COMPONENTS;
use hfit_core::Hfit;

use crate::ablation::AblationMode;

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn metrics_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<8} {:>8} {:>8} {:>8} {:>8}",
        "class", "IoU", "F1", "Pre", "Rec"
    )
    .unwrap();
    for (i, m) in r.per_class.iter().enumerate() {
        if m.valid {
            writeln!(
                s,
                "{:<8} {:>8} {:>8} {:>8} {:>8}",
                i,
                pct(m.iou),
                pct(m.f1),
                pct(m.precision),
                pct(m.recall)
            )
            .unwrap();
        } else {
            writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8}", i, "-", "-", "-", "-").unwrap();
        }
    }
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:>8} {:>8} {:>8} {:>8} {:>8}",
        "mFsc", "mIoU", "aAcc", "mPre", "mRec"
    )
    .unwrap();
    writeln!(
        s,
        "{:>8} {:>8} {:>8} {:>8} {:>8}",
        pct(r.m_fsc),
        pct(r.m_iou),
        pct(r.a_acc),
        pct(r.m_pre),
        pct(r.m_rec)
    )
    .unwrap();
    s
}

/// `key=value` lines, one per metric.
pub fn metrics_kv(r: &MetricsReport) -> String {
    r.entries()
        .into_iter()
        .map(|(k, v)| format!("{k}={}\n", pct(v)))
        .collect()
}

/// Parse a `key=value` report back into pairs.
pub fn parse_kv(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|v| (k.trim().to_string(), v)))
        .collect()
}

pub fn ablation_table(rows: &[(AblationMode, MetricsReport)]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<6} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "group", "mode", "mFsc", "mIoU", "aAcc", "mPre", "mRec"
    )
    .unwrap();
    for (mode, r) in rows {
        writeln!(
            s,
            "{:<6} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
            mode.group(),
            mode.as_str(),
            pct(r.m_fsc),
            pct(r.m_iou),
            pct(r.a_acc),
            pct(r.m_pre),
            pct(r.m_rec)
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub total: usize,
    pub frozen: usize,
    pub trainable: usize,
}

/// Learned-parameter counts per component; normalization running statistics
/// are not counted.
pub fn parameter_counts(model: &Hfit) -> Vec<(&'static str, ParamCounts)> {
    COMPONENTS
        .iter()
        .map(|&(name, prefix)| {
            let mut c = ParamCounts::default();
            for (_, e) in model
                .params
                .entries()
                .filter(|(_, e)| e.name.starts_with(prefix))
            {
                if e.kind != hfit_core::params::ParamKind::Weight {
                    continue;
                }
                let n = e.value.numel();
                c.total += n;
                if e.frozen {
                    c.frozen += n;
                } else {
                    c.trainable += n;
                }
            }
            (name, c)
        })
        .collect()
}

pub fn parameter_table(model: &Hfit) -> String {
    let rows = parameter_counts(model);
    let mut s = String::new();
    writeln!(
        s,
        "{:<10} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9}",
        "module", "total", "frozen", "trainable", "total(M)", "frozen(M)", "train(M)"
    )
    .unwrap();
    let m = |n: usize| format!("{:.2}", n as f64 / 1e6);
    let mut sum = ParamCounts::default();
    let row = |s: &mut String, name: &str, c: ParamCounts| {
        writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9}",
            name,
            c.total,
            c.frozen,
            c.trainable,
            m(c.total),
            m(c.frozen),
            m(c.trainable)
        )
        .unwrap();
    };
    for &(name, c) in &rows {
        row(&mut s, name, c);
        sum.total += c.total;
        sum.frozen += c.frozen;
        sum.trainable += c.trainable;
    }
    row(&mut s, "all", sum);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use hfit_core::metrics::ConfusionMatrix;

    #[test]
    fn kv_has_two_decimals_and_round_trips() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).unwrap();
        let kv = metrics_kv(&cm.compute().unwrap());
        assert!(kv.contains("mIoU=58.33\n"), "{kv}");
        assert!(kv.contains("aAcc=75.00\n"));
        assert!(kv.contains("per_class.1.f1=80.00\n"));
        let parsed = parse_kv(&kv);
        assert_eq!(parsed[0], ("mFsc".to_string(), 73.33));
    }
}
