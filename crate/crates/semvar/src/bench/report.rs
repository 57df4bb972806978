//! Report files and run-to-run comparison.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use semvar_core::service::Outcome;
use serde::Serialize;
use thiserror::Error;

use super::driver::RunOutput;
use super::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("reports come from different workload specs or seeds")]
    SpecMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Higher,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub metric: String,
    pub better: Direction,
    pub a: f64,
    pub b: f64,
    /// Above 1 means `a` is better than `b`.
    pub improvement: f64,
}

fn ratio(better: Direction, a: f64, b: f64) -> f64 {
    let (num, den) = match better {
        Direction::Lower => (b, a),
        Direction::Higher => (a, b),
    };
    if num == den {
        1.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Metric-by-metric ratios of `a` over `b`.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<RatioRow>, CompareError> {
    if a.spec != b.spec {
        return Err(CompareError::SpecMismatch);
    }
    let mut rows = Vec::new();
    let mut push = |metric: String, better, x: Option<f64>, y: Option<f64>| {
        if let (Some(x), Some(y)) = (x, y) {
            rows.push(RatioRow { improvement: ratio(better, x, y), metric, better, a: x, b: y });
        }
    };
    use Direction::{Higher, Lower};
    push("makespan_ms".into(), Lower, Some(a.makespan_ms), Some(b.makespan_ms));
    push("request_rate_per_s".into(), Higher, Some(a.request_rate_per_s), Some(b.request_rate_per_s));
    push("mean_normalized_latency_ms".into(), Lower, a.mean_normalized_latency_ms, b.mean_normalized_latency_ms);
    push("p90_normalized_latency_ms".into(), Lower, a.p90_normalized_latency_ms, b.p90_normalized_latency_ms);
    push("mean_decode_ms_per_token".into(), Lower, a.mean_decode_ms_per_token, b.mean_decode_ms_per_token);
    push("peak_blocks".into(), Lower, Some(a.peak_blocks as f64), Some(b.peak_blocks as f64));
    push("utilization".into(), Higher, Some(a.utilization), Some(b.utilization));
    for (kind, ka) in &a.kinds {
        let Some(kb) = b.kinds.get(kind) else { continue };
        push(format!("{kind}.mean_e2e_ms"), Lower, ka.mean_e2e_ms, kb.mean_e2e_ms);
        push(format!("{kind}.p90_e2e_ms"), Lower, ka.p90_e2e_ms, kb.p90_e2e_ms);
        push(format!("{kind}.makespan_ms"), Lower, ka.makespan_ms, kb.makespan_ms);
        push(format!("{kind}.mean_normalized_latency_ms"), Lower, ka.mean_normalized_latency_ms, kb.mean_normalized_latency_ms);
        push(format!("{kind}.mean_decode_ms_per_token"), Lower, ka.mean_decode_ms_per_token, kb.mean_decode_ms_per_token);
    }
    Ok(rows)
}

pub fn format_comparison(rows: &[RatioRow]) -> String {
    let mut s = format!("{:<44} {:>6} {:>14} {:>14} {:>9}\n", "metric", "better", "a", "b", "a_vs_b");
    for r in rows {
        let dir = match r.better {
            Direction::Lower => "lower",
            Direction::Higher => "higher",
        };
        let _ = writeln!(s, "{:<44} {:>6} {:>14.3} {:>14.3} {:>8.3}x", r.metric, dir, r.a, r.b, r.improvement);
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

pub fn format_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "workload         {}", r.spec.kind.name());
    let _ = writeln!(s, "mode             {}", r.mode);
    let _ = writeln!(s, "seed             {}", r.spec.seed);
    let _ = writeln!(s, "engines          {}", r.engines);
    let _ = writeln!(s, "makespan_ms      {:.3}", r.makespan_ms);
    let _ = writeln!(s, "requests         {} completed, {} failed", r.completed_requests, r.failed_requests);
    let _ = writeln!(s, "request_rate     {:.3} /s", r.request_rate_per_s);
    let _ = writeln!(s, "norm_latency     mean {} p90 {} ms/token", opt(r.mean_normalized_latency_ms), opt(r.p90_normalized_latency_ms));
    let _ = writeln!(s, "decode_latency   mean {} ms/token", opt(r.mean_decode_ms_per_token));
    let _ = writeln!(s, "peak_blocks      {} {:?}", r.peak_blocks, r.peak_blocks_per_engine);
    let _ = writeln!(s, "utilization      {:.3}", r.utilization);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>10} {:>10}", "kind", "apps", "failed", "e2e_mean", "e2e_p90", "makespan", "norm_mean", "decode");
    for (k, ks) in &r.kinds {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>10} {:>10}",
            k,
            ks.apps,
            ks.failed_apps,
            opt(ks.mean_e2e_ms),
            opt(ks.p90_e2e_ms),
            opt(ks.makespan_ms),
            opt(ks.mean_normalized_latency_ms),
            opt(ks.mean_decode_ms_per_token)
        );
    }
    s
}

#[derive(Serialize)]
struct Row<'a> {
    request: u64,
    kind: &'a str,
    session: &'a str,
    engine: Option<u32>,
    label: &'a str,
    group: Option<u64>,
    outcome: &'a str,
    submitted_ms: f64,
    ready_ms: Option<f64>,
    dispatched_ms: Option<f64>,
    first_token_ms: Option<f64>,
    finished_ms: Option<f64>,
    prompt_tokens: usize,
    output_tokens: usize,
}

pub fn requests_csv(run: &RunOutput) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (r, kind) in &run.records {
        w.serialize(Row {
            request: r.id.0,
            kind,
            session: r.session.as_str(),
            engine: r.engine.map(|e| e.0),
            label: r.label.as_str(),
            group: r.group,
            outcome: match r.outcome {
                Outcome::Pending => "pending",
                Outcome::Completed => "completed",
                Outcome::Failed(k) => k.as_str(),
            },
            submitted_ms: r.submitted_at.as_ms(),
            ready_ms: r.ready_at.map(|t| t.as_ms()),
            dispatched_ms: r.dispatched_at.map(|t| t.as_ms()),
            first_token_ms: r.first_token_at.map(|t| t.as_ms()),
            finished_ms: r.finished_at.map(|t| t.as_ms()),
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes report.json, report.txt, requests.csv, engine_trace.log and decisions.log.
pub fn write_outputs(dir: &Path, report: &MetricsReport, run: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(io::Error::other)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("report.txt"), format_report(report))?;
    fs::write(dir.join("requests.csv"), requests_csv(run).map_err(io::Error::other)?)?;
    fs::write(dir.join("engine_trace.log"), lines(&run.trace))?;
    fs::write(dir.join("decisions.log"), lines(&run.decisions))?;
    Ok(())
}

fn lines(v: &[String]) -> String {
    let mut s = v.join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s
}

/// Per-engine totals of an engine trace log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub engine: u32,
    pub steps: usize,
    pub fill_tokens: u64,
    pub emitted: u64,
    pub max_batch: u64,
    pub last_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct TraceParseError {
    pub line: usize,
    pub reason: String,
}

pub fn summarize_trace(text: &str) -> Result<Vec<TraceSummary>, TraceParseError> {
    let mut out: Vec<TraceSummary> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |reason: &str| TraceParseError { line: n + 1, reason: reason.into() };
        let mut fields = std::collections::BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| err("expected key=value"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(&format!("missing `{k}`")));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| err(&format!("bad `{k}`")));
        let t: f64 = get("t")?.parse().map_err(|_| err("bad `t`"))?;
        let engine = num("engine")? as u32;
        let e = match out.iter_mut().position(|s| s.engine == engine) {
            Some(i) => &mut out[i],
            None => {
                out.push(TraceSummary { engine, ..Default::default() });
                out.last_mut().expect("pushed")
            }
        };
        e.steps += 1;
        e.fill_tokens += num("fill")?;
        e.emitted += num("emitted")?;
        e.max_batch = e.max_batch.max(num("batch")?);
        e.last_step_ms = e.last_step_ms.max(t);
    }
    out.sort_by_key(|s| s.engine);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_directions() {
        assert_eq!(ratio(Direction::Lower, 1.0, 2.0), 2.0);
        assert_eq!(ratio(Direction::Higher, 1.0, 2.0), 0.5);
        assert_eq!(ratio(Direction::Lower, 0.0, 0.0), 1.0);
    }

    #[test]
    fn trace_summary() {
        let log = "t=0.000 engine=0 fill=100 batch=100 emitted=1\nt=8.000 engine=0 fill=0 batch=101 emitted=1\nt=0.000 engine=1 fill=0 batch=0 emitted=0\n";
        let s = summarize_trace(log).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].steps, 2);
        assert_eq!(s[0].emitted, 2);
        assert_eq!(s[0].max_batch, 101);
        assert_eq!(s[0].last_step_ms, 8.0);
        assert!(summarize_trace("t=1 engine=x").is_err());
        assert!(summarize_trace("garbage").is_err());
    }
}
