//! Held-out accuracy and the Ovis-vs-connector comparison table.

use std::fmt;
use std::str::FromStr;

use crate::data::{Dataset, QuestionKind};
use crate::error::{Error, Result};
use crate::model::{BridgeKind, OvisModel};
use crate::tensor::Scalar;

/// Average margin of the probabilistic-token bridge over the MLP connector
/// reported at 7B scale, in percentage points.
pub const REFERENCE_MARGIN: f64 = 8.8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, (c, t): (usize, usize)) {
        self.correct += c;
        self.total += t;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Teacher-forced next-token accuracy over all target tokens.
    pub overall: Accuracy,
    pub per_question: Vec<(QuestionKind, Accuracy)>,
}

pub fn evaluate<T: Scalar>(model: &OvisModel<T>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut overall = Accuracy::default();
    let mut per: Vec<(QuestionKind, Accuracy)> = Vec::new();
    for (s, q) in data.samples.iter().zip(&data.questions) {
        let hits = model.token_hits(s)?;
        overall.add(hits);
        if let Some(q) = q {
            match per.iter_mut().find(|(k, _)| k == q) {
                Some((_, a)) => a.add(hits),
                None => {
                    let mut a = Accuracy::default();
                    a.add(hits);
                    per.push((*q, a));
                }
            }
        }
    }
    per.sort_by_key(|(k, _)| *k);
    Ok(EvalReport {
        overall,
        per_question: per,
    })
}

pub fn token_accuracy<T: Scalar>(model: &OvisModel<T>, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data)?.overall.value())
}

/// One line of a comparison: a trained bridge and its held-out scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub arch: BridgeKind,
    pub seed: u64,
    pub bridge_params: usize,
    pub accuracy: f64,
    /// Indexed like [`QuestionKind::ALL`].
    pub per_question: [f64; 4],
    pub final_loss: f64,
}

impl CompareRow {
    pub fn new(arch: BridgeKind, seed: u64, bridge_params: usize, report: &EvalReport, final_loss: f64) -> Self {
        let mut per_question = [0.0; 4];
        for (i, q) in QuestionKind::ALL.iter().enumerate() {
            if let Some((_, a)) = report.per_question.iter().find(|(k, _)| k == q) {
                per_question[i] = a.value();
            }
        }
        Self {
            arch,
            seed,
            bridge_params,
            accuracy: report.overall.value(),
            per_question,
            final_loss,
        }
    }

    pub const HEADER: &'static str = "arch\tseed\tbridge_params\taccuracy\tcount\tcolor\tshape\tposition\tfinal_loss";
}

impl fmt::Display for CompareRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{:.6}", self.arch, self.seed, self.bridge_params, self.accuracy)?;
        for a in self.per_question {
            write!(f, "\t{a:.6}")?;
        }
        write!(f, "\t{:.6}", self.final_loss)
    }
}

impl FromStr for CompareRow {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed comparison row: {line}"));
        let f: Vec<&str> = line.trim().split('\t').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            arch: f[0].parse()?,
            seed: f[1].parse().map_err(|_| bad())?,
            bridge_params: f[2].parse().map_err(|_| bad())?,
            accuracy: num(f[3])?,
            per_question: [num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?],
            final_loss: num(f[8])?,
        })
    }
}

/// Reads rows from TSV text, skipping headers and blank lines.
pub fn parse_rows(text: &str) -> Result<Vec<CompareRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with("arch\t"))
        .map(str::parse)
        .collect()
}

/// Renders rows as a method × task table with an average column, followed
/// by the Ovis-minus-connector margin when both are present. Multiple rows
/// of the same architecture are averaged.
pub fn compare_report(rows: &[CompareRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no comparison rows"));
    }
    let mut out = String::new();
    out.push_str("| Method    | Visual params | Runs |");
    for q in QuestionKind::ALL {
        out.push_str(&format!(" {:>8} |", q.name()));
    }
    out.push_str("  Avg.  | Token acc. |\n");
    out.push_str("|-----------|---------------|------|");
    for _ in QuestionKind::ALL {
        out.push_str("----------|");
    }
    out.push_str("--------|------------|\n");

    let mut averages = Vec::new();
    for arch in [BridgeKind::Connector, BridgeKind::Ovis] {
        let group: Vec<&CompareRow> = rows.iter().filter(|r| r.arch == arch).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let mut per = [0.0; 4];
        for r in &group {
            for (p, v) in per.iter_mut().zip(r.per_question) {
                *p += 100.0 * v / n;
            }
        }
        let acc = group.iter().map(|r| 100.0 * r.accuracy).sum::<f64>() / n;
        let avg = per.iter().sum::<f64>() / 4.0;
        let label = match arch {
            BridgeKind::Connector => "Connector",
            BridgeKind::Ovis => "Ovis",
        };
        out.push_str(&format!("| {label:<9} | {:>13} | {:>4} |", group[0].bridge_params, group.len()));
        for p in per {
            out.push_str(&format!(" {p:>8.2} |"));
        }
        out.push_str(&format!(" {avg:>6.2} | {acc:>10.2} |\n"));
        averages.push((arch, avg, acc));
    }
    if let [(BridgeKind::Connector, c_avg, c_acc), (BridgeKind::Ovis, o_avg, o_acc)] = averages[..] {
        out.push_str(&format!(
            "\nOvis - Connector: {:+.2} avg points, {:+.2} token-accuracy points (reference margin at 7B scale: {:+.1})\n",
            o_avg - c_avg,
            o_acc - c_acc,
            REFERENCE_MARGIN
        ));
    }
    Ok(out)
}
