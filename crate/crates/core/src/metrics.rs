//! VQA accuracy, copy rate and per-(strategy, shots) aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_answer, NUM_GT_ANSWERS};
use crate::error::{Error, Result};

/// Number of ground-truth answers equal to `prediction`.
pub fn match_count(prediction: &str, gt_answers: &[String]) -> usize {
    gt_answers.iter().filter(|g| g.as_str() == prediction).count()
}

/// `min(1, 3 * matches / 10)` over exactly ten ground-truth answers. Inputs
/// are compared verbatim; normalize them first.
pub fn vqa_accuracy(prediction: &str, gt_answers: &[String]) -> Result<f64> {
    if gt_answers.len() != NUM_GT_ANSWERS {
        return Err(Error::Metric(format!(
            "expected {NUM_GT_ANSWERS} ground-truth answers, got {}",
            gt_answers.len()
        )));
    }
    // Integer arithmetic first so every result is the nearest f64 to k/10.
    let tenths = (3 * match_count(prediction, gt_answers)).min(10);
    Ok(tenths as f64 / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Arm label, e.g. `SQ` or `SI+mismatch(MA)`.
    pub strategy: String,
    pub shots: usize,
    pub query_id: u64,
    pub prediction: String,
    pub raw_prediction: String,
    pub demo_ids: Vec<u64>,
    pub demo_answers: Vec<String>,
    pub accuracy: Option<f64>,
    pub copied: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryResult {
    pub fn key(&self) -> (String, usize, u64) {
        (self.strategy.clone(), self.shots, self.query_id)
    }

    pub fn failed(&self) -> bool {
        self.accuracy.is_none()
    }
}

/// Scores one prediction. With `normalize` the prediction, ground truth and
/// demonstration answers all go through [`normalize_answer`].
#[allow(clippy::too_many_arguments)]
pub fn score(
    strategy: &str,
    shots: usize,
    query_id: u64,
    raw_prediction: &str,
    gt_answers: &[String],
    demo_ids: Vec<u64>,
    demo_answers: &[String],
    normalize: bool,
) -> Result<QueryResult> {
    let norm = |s: &str| {
        if normalize {
            normalize_answer(s)
        } else {
            s.to_string()
        }
    };
    let prediction = norm(raw_prediction);
    let gt: Vec<String> = gt_answers.iter().map(|g| norm(g)).collect();
    let demo_answers: Vec<String> = demo_answers.iter().map(|a| norm(a)).collect();
    let accuracy = vqa_accuracy(&prediction, &gt)?;
    let copied = demo_answers.contains(&prediction);
    Ok(QueryResult {
        strategy: strategy.to_string(),
        shots,
        query_id,
        prediction,
        raw_prediction: raw_prediction.to_string(),
        demo_ids,
        demo_answers,
        accuracy: Some(accuracy),
        copied: Some(copied),
        error: None,
    })
}

/// A row for a query whose generation failed.
pub fn failed_row(strategy: &str, shots: usize, query_id: u64, error: String) -> QueryResult {
    QueryResult {
        strategy: strategy.to_string(),
        shots,
        query_id,
        prediction: String::new(),
        raw_prediction: String::new(),
        demo_ids: vec![],
        demo_answers: vec![],
        accuracy: None,
        copied: None,
        error: Some(error),
    }
}

/// Fraction of rows whose prediction appears among their demo answers.
/// Failed rows are skipped.
pub fn copy_rate(results: &[QueryResult]) -> Result<f64> {
    let (copied, total) = copy_counts(results);
    if total == 0 {
        return Err(Error::Metric("copy rate of an empty result list".into()));
    }
    Ok(copied as f64 / total as f64)
}

fn copy_counts<'a>(results: impl IntoIterator<Item = &'a QueryResult>) -> (usize, usize) {
    results
        .into_iter()
        .filter_map(|r| r.copied)
        .fold((0, 0), |(c, t), x| (c + x as usize, t + 1))
}

/// Percentage rounded to two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub shots: usize,
    /// Scored rows.
    pub n: usize,
    pub failed: usize,
    /// Mean accuracy ×100, two decimals.
    pub accuracy: f64,
    /// Copy rate ×100, two decimals.
    pub copy_rate: f64,
    /// Unrounded means in [0, 1], kept so averages are not built from
    /// rounded values.
    pub mean_accuracy: f64,
    pub mean_copy_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    /// Cells present in the data; missing shot counts are absent.
    pub cells: Vec<Cell>,
    /// Mean over the grid of unrounded cell means ×100; absent unless every
    /// grid cell is present.
    pub average_accuracy: Option<f64>,
    pub average_copy_rate: Option<f64>,
}

impl StrategyRow {
    pub fn cell(&self, shots: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.shots == shots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub grid: Vec<usize>,
    pub strategies: Vec<StrategyRow>,
    pub failed: usize,
}

/// Folds rows into per-(strategy, shots) cells. Strategies keep their order
/// of first appearance; within a cell rows are summed in `query_id` order so
/// the result does not depend on row order.
pub fn aggregate(rows: &[QueryResult], grid: &[usize]) -> Aggregates {
    let mut order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, usize), Vec<&QueryResult>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
        cells.entry((&r.strategy, r.shots)).or_default().push(r);
    }
    let mut failed_total = 0;
    let strategies = order
        .iter()
        .map(|&name| {
            let mut out = Vec::new();
            let mut shot_keys: Vec<usize> = cells
                .keys()
                .filter(|(s, _)| *s == name)
                .map(|&(_, k)| k)
                .collect();
            shot_keys.sort_unstable();
            for shots in shot_keys {
                let mut rs = cells[&(name, shots)].clone();
                rs.sort_by_key(|r| r.query_id);
                let failed = rs.iter().filter(|r| r.failed()).count();
                failed_total += failed;
                let acc: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
                if acc.is_empty() {
                    continue;
                }
                let n = acc.len();
                let mean_accuracy = acc.iter().sum::<f64>() / n as f64;
                let (copied, scored) = copy_counts(rs.iter().copied());
                let mean_copy_rate = if scored == 0 { 0.0 } else { copied as f64 / scored as f64 };
                out.push(Cell {
                    shots,
                    n,
                    failed,
                    accuracy: percent(mean_accuracy),
                    copy_rate: percent(mean_copy_rate),
                    mean_accuracy,
                    mean_copy_rate,
                });
            }
            let grid_cells: Option<Vec<&Cell>> = grid
                .iter()
                .map(|&g| out.iter().find(|c| c.shots == g))
                .collect();
            let avg = |f: fn(&Cell) -> f64| {
                grid_cells
                    .as_ref()
                    .filter(|c| !c.is_empty())
                    .map(|c| percent(c.iter().map(|x| f(x)).sum::<f64>() / c.len() as f64))
            };
            StrategyRow {
                strategy: name.to_string(),
                average_accuracy: avg(|c| c.mean_accuracy),
                average_copy_rate: avg(|c| c.mean_copy_rate),
                cells: out,
            }
        })
        .collect();
    Aggregates {
        grid: grid.to_vec(),
        strategies,
        failed: failed_total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub rows: Vec<QueryResult>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    CopyRate,
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

impl EvalReport {
    pub fn new(fingerprint: String, rows: Vec<QueryResult>, grid: &[usize]) -> Self {
        let aggregates = aggregate(&rows, grid);
        Self {
            fingerprint,
            rows,
            aggregates,
        }
    }

    /// Re-derives aggregates from the rows.
    pub fn recompute(&self) -> Aggregates {
        aggregate(&self.rows, &self.aggregates.grid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Metric(format!("report json: {e}")))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Grid table: `strategy, 4-shot, 8-shot, 16-shot, average`. Missing cells
    /// are empty fields.
    pub fn write_csv<W: Write>(&self, w: W, metric: Metric) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["strategy".to_string()];
        header.extend(self.aggregates.grid.iter().map(|g| format!("{g}-shot")));
        header.push("average".into());
        out.write_record(&header).map_err(csv_err)?;
        for s in &self.aggregates.strategies {
            let mut rec = vec![s.strategy.clone()];
            for g in &self.aggregates.grid {
                rec.push(s.cell(*g).map_or(String::new(), |c| {
                    fmt2(match metric {
                        Metric::Accuracy => c.accuracy,
                        Metric::CopyRate => c.copy_rate,
                    })
                }));
            }
            let avg = match metric {
                Metric::Accuracy => s.average_accuracy,
                Metric::CopyRate => s.average_copy_rate,
            };
            rec.push(avg.map_or(String::new(), fmt2));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Metric(format!("csv: {e}")))
    }

    /// Long form: `strategy, shots, metric, value`; cross-shot averages use
    /// `shots = average`.
    pub fn write_plotdata<W: Write>(&self, w: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["strategy", "shots", "metric", "value"])
            .map_err(csv_err)?;
        for s in &self.aggregates.strategies {
            for c in &s.cells {
                let shots = c.shots.to_string();
                out.write_record([s.strategy.as_str(), &shots, "accuracy", &fmt2(c.accuracy)])
                    .map_err(csv_err)?;
                out.write_record([s.strategy.as_str(), &shots, "copy_rate", &fmt2(c.copy_rate)])
                    .map_err(csv_err)?;
            }
            if let Some(a) = s.average_accuracy {
                out.write_record([s.strategy.as_str(), "average", "accuracy", &fmt2(a)])
                    .map_err(csv_err)?;
            }
            if let Some(a) = s.average_copy_rate {
                out.write_record([s.strategy.as_str(), "average", "copy_rate", &fmt2(a)])
                    .map_err(csv_err)?;
            }
        }
        out.flush().map_err(|e| Error::Metric(format!("csv: {e}")))
    }

    /// Writes `report.json`, `accuracy.csv`, `copy_rate.csv` and
    /// `plotdata.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        self.write_csv(create("accuracy.csv")?, Metric::Accuracy)?;
        self.write_csv(create("copy_rate.csv")?, Metric::CopyRate)?;
        self.write_plotdata(create("plotdata.csv")?)
    }
}

/// Parses an aggregate CSV back into `(strategy, column) -> value`.
pub fn read_csv_table(text: &str) -> Result<BTreeMap<(String, String), f64>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Metric(format!("csv: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Metric(format!("csv: {e}")))?;
        let name = rec.get(0).unwrap_or_default().to_string();
        for (col, field) in header.iter().zip(rec.iter()).skip(1) {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|e| Error::Metric(format!("csv value {field:?}: {e}")))?;
            out.insert((name.clone(), col.clone()), v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(matches: usize) -> Vec<String> {
        (0..10)
            .map(|i| if i < matches { "cat".into() } else { format!("x{i}") })
            .collect()
    }

    fn row(strategy: &str, shots: usize, id: u64, acc: f64, copied: bool) -> QueryResult {
        QueryResult {
            strategy: strategy.into(),
            shots,
            query_id: id,
            prediction: "p".into(),
            raw_prediction: "p".into(),
            demo_ids: vec![],
            demo_answers: vec![],
            accuracy: Some(acc),
            copied: Some(copied),
            error: None,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(vqa_accuracy("cat", &gt(0)).unwrap(), 0.0);
        assert_eq!(vqa_accuracy("cat", &gt(2)).unwrap(), 0.6);
        assert_eq!(vqa_accuracy("cat", &gt(10)).unwrap(), 1.0);
        assert_eq!(vqa_accuracy("cat", &gt(3)).unwrap(), 0.9);
        assert!(vqa_accuracy("cat", &gt(3)[..9]).is_err());
    }

    #[test]
    fn copy_rate_examples() {
        let rows: Vec<_> = (0..16).map(|i| row("SQ", 16, i, 1.0, i % 2 == 0)).collect();
        assert_eq!(copy_rate(&rows).unwrap(), 0.5);
        assert!(copy_rate(&[]).is_err());
    }

    #[test]
    fn average_over_shots() {
        let rows = vec![row("SI", 4, 1, 0.4, false), row("SI", 8, 1, 0.5, false)];
        let a = aggregate(&rows, &[4, 8]);
        assert_eq!(a.strategies[0].average_accuracy, Some(45.0));
        let a = aggregate(&rows, &[4, 8, 16]);
        assert_eq!(a.strategies[0].average_accuracy, None);
        assert!(a.strategies[0].cell(16).is_none());
    }

    #[test]
    fn single_row_aggregate() {
        let a = aggregate(&[row("RS", 4, 9, 0.6, true)], &[4]);
        let c = &a.strategies[0].cells[0];
        assert_eq!((c.n, c.accuracy, c.copy_rate), (1, 60.0, 100.0));
    }

    #[test]
    fn failed_rows_excluded_and_counted() {
        let rows = vec![
            row("RS", 4, 1, 1.0, false),
            failed_row("RS", 4, 2, "timeout".into()),
        ];
        let a = aggregate(&rows, &[4]);
        assert_eq!(a.failed, 1);
        assert_eq!(a.strategies[0].cells[0].accuracy, 100.0);
        assert_eq!(a.strategies[0].cells[0].n, 1);
    }

    #[test]
    fn score_normalizes_both_sides() {
        let gts: Vec<String> = vec!["Two".to_string(); 10];
        let r = score("SQ", 4, 1, " 2 ", &gts, vec![5], &["two".into()], true).unwrap();
        assert_eq!(r.accuracy, Some(0.0));
        let r = score("SQ", 4, 1, "The Two.", &gts, vec![5], &["two".into()], true).unwrap();
        assert_eq!((r.prediction.as_str(), r.accuracy, r.copied), ("two", Some(1.0), Some(true)));
        let r = score("SQ", 4, 1, "The Two.", &gts, vec![5], &["two".into()], false).unwrap();
        assert_eq!(r.accuracy, Some(0.0));
    }

    #[test]
    fn empty_report_csv_is_header_only() {
        let rep = EvalReport::new("f".into(), vec![], &[4, 8, 16]);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf, Metric::Accuracy).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "strategy,4-shot,8-shot,16-shot,average\n");
    }

    #[test]
    fn json_csv_roundtrip_agrees() {
        let rows: Vec<_> = (0..30)
            .map(|i| row(["RS", "SI"][i % 2], [4, 8, 16][i % 3], i as u64, (i % 11) as f64 / 10.0, i % 3 == 0))
            .collect();
        let rep = EvalReport::new("f".into(), rows, &[4, 8, 16]);
        let back = EvalReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.recompute(), rep.aggregates);
        let mut buf = Vec::new();
        back.write_csv(&mut buf, Metric::Accuracy).unwrap();
        let table = read_csv_table(std::str::from_utf8(&buf).unwrap()).unwrap();
        for s in &rep.aggregates.strategies {
            for c in &s.cells {
                assert_eq!(table[&(s.strategy.clone(), format!("{}-shot", c.shots))], c.accuracy);
            }
            assert_eq!(table[&(s.strategy.clone(), "average".into())], s.average_accuracy.unwrap());
        }
    }

    proptest! {
        #[test]
        fn accuracy_monotone_and_saturating(s in 0usize..=10) {
            let a = vqa_accuracy("cat", &gt(s)).unwrap();
            if s > 0 {
                prop_assert!(a >= vqa_accuracy("cat", &gt(s - 1)).unwrap());
            }
            if s >= 4 {
                prop_assert_eq!(a, 1.0);
            }
        }

        #[test]
        fn accuracy_permutation_invariant(s in 0usize..=10, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut g = gt(s);
            let base = vqa_accuracy("cat", &g).unwrap();
            g.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(vqa_accuracy("cat", &g).unwrap(), base);
        }

        #[test]
        fn copy_counts_additive(a in prop::collection::vec(any::<bool>(), 1..40),
                                b in prop::collection::vec(any::<bool>(), 1..40)) {
            let ra: Vec<_> = a.iter().enumerate().map(|(i, &c)| row("X", 4, i as u64, 0.0, c)).collect();
            let rb: Vec<_> = b.iter().enumerate().map(|(i, &c)| row("X", 4, i as u64, 0.0, c)).collect();
            let all: Vec<_> = ra.iter().chain(&rb).cloned().collect();
            let ca = copy_rate(&ra).unwrap() * ra.len() as f64;
            let cb = copy_rate(&rb).unwrap() * rb.len() as f64;
            let call = copy_rate(&all).unwrap() * all.len() as f64;
            prop_assert_eq!(call.round(), (ca + cb).round());
            prop_assert!((call - (ca + cb)).abs() < 1e-9);
        }

        #[test]
        fn aggregate_independent_of_row_order(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rows: Vec<_> = (0..60u64)
                .map(|i| row("SQ", [4, 8][i as usize % 2], i, (i % 4) as f64 * 0.3, i % 5 == 0))
                .collect();
            let a = aggregate(&rows, &[4, 8]);
            rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate(&rows, &[4, 8]), a);
        }
    }
}
