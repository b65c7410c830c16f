//! JSON-lines sidecar: score externally produced per-token log-probabilities.
//!
//! Each input line is one trajectory carrying its plain and answer-conditioned
//! log-probabilities. Records are grouped by `group_id`, pushed through the
//! same advantage pipeline the trainer uses, and written back with
//! `advantage` and `v_trace` fields appended.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::baselines::{spectrum_advantage, GroupData};
use crate::batch::GroupBatch;
use crate::config::EstimatorConfig;
use crate::error::{CreditError, Result};
use crate::evidence::TokenEvidence;
use crate::par::Exec;

/// One trajectory of an external log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub query_id: String,
    pub traj_id: String,
    pub group_id: String,
    pub tokens: Vec<u64>,
    pub logp_plain: Vec<f64>,
    pub logp_oracle: Vec<f64>,
    pub reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<Vec<f64>>,
    /// Beliefs `V_1 .. V_{T+1}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_trace: Option<Vec<f64>>,
}

/// Wire shape before validation; the reward is read wide so that values
/// outside `{0, 1}` get a precise diagnostic.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    query_id: String,
    traj_id: String,
    group_id: String,
    tokens: Vec<u64>,
    logp_plain: Vec<f64>,
    logp_oracle: Vec<f64>,
    reward: f64,
    #[serde(default)]
    advantage: Option<Vec<f64>>,
    #[serde(default)]
    v_trace: Option<Vec<f64>>,
}

impl TrajectoryRecord {
    /// Parse and validate one JSON line.
    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let rec = |message: String| CreditError::Record {
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| rec(e.to_string()))?;
        let n = raw.tokens.len();
        if n == 0 {
            return Err(rec("trajectory has no tokens".into()));
        }
        if raw.logp_plain.len() != n || raw.logp_oracle.len() != n {
            return Err(rec(format!(
                "length mismatch: {n} tokens, {} plain, {} oracle log-probabilities",
                raw.logp_plain.len(),
                raw.logp_oracle.len()
            )));
        }
        let reward = if raw.reward == 0.0 {
            0
        } else if raw.reward == 1.0 {
            1
        } else {
            return Err(rec(format!("reward {} is not 0 or 1", raw.reward)));
        };
        for (name, xs) in [("logp_plain", &raw.logp_plain), ("logp_oracle", &raw.logp_oracle)] {
            if let Some(x) = xs.iter().find(|x| !x.is_finite() || **x > 0.0) {
                return Err(rec(format!("{name} entry {x} is not a log-probability")));
            }
        }
        Ok(Self {
            query_id: raw.query_id,
            traj_id: raw.traj_id,
            group_id: raw.group_id,
            tokens: raw.tokens,
            logp_plain: raw.logp_plain,
            logp_oracle: raw.logp_oracle,
            reward,
            advantage: raw.advantage,
            v_trace: raw.v_trace,
        })
    }

    fn clear_scores(&mut self) {
        self.advantage = None;
        self.v_trace = None;
    }
}

/// Records sharing one `group_id`, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordGroup {
    pub group_id: String,
    pub records: Vec<TrajectoryRecord>,
}

/// Parsed log plus per-line diagnostics for rejected records.
#[derive(Debug, Default)]
pub struct ParsedLog {
    pub groups: Vec<RecordGroup>,
    pub rejected: Vec<CreditError>,
}

/// Read a JSON-lines log and group it by `group_id`, preserving the order of
/// first appearance. With `skip_bad`, malformed lines are collected in
/// `rejected` instead of aborting.
pub fn read_trajectory_log(path: &Path, skip_bad: bool) -> Result<ParsedLog> {
    parse_records(BufReader::new(File::open(path)?), skip_bad)
}

pub fn parse_records<R: BufRead>(reader: R, skip_bad: bool) -> Result<ParsedLog> {
    let mut groups: IndexMap<String, Vec<TrajectoryRecord>> = IndexMap::new();
    let mut rejected = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match TrajectoryRecord::parse_line(&line, i + 1) {
            Ok(r) => groups.entry(r.group_id.clone()).or_default().push(r),
            Err(e) if skip_bad => rejected.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(ParsedLog {
        groups: groups
            .into_iter()
            .map(|(group_id, records)| RecordGroup { group_id, records })
            .collect(),
        rejected,
    })
}

/// Score one group in place.
///
/// Singleton groups are left unscored and reported as an error.
pub fn score_group(group: &mut RecordGroup, cfg: &EstimatorConfig) -> Result<()> {
    for r in &mut group.records {
        r.clear_scores();
    }
    if group.records.len() < 2 {
        return Err(CreditError::Domain(format!(
            "group `{}` has a single trajectory; group advantage undefined",
            group.group_id
        )));
    }
    let clip = cfg.effective_clip();
    let rewards: Vec<u8> = group.records.iter().map(|r| r.reward).collect();
    let counts: Vec<usize> = group.records.iter().map(|r| r.tokens.len()).collect();
    let ratios = group
        .records
        .iter()
        .map(|r| {
            r.logp_plain
                .iter()
                .zip(&r.logp_oracle)
                .map(|(&s, &o)| TokenEvidence::new(s, o, clip).map(|e| e.log_ratio))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let out = spectrum_advantage(
        cfg.variant,
        GroupData {
            rewards: &rewards,
            token_counts: &counts,
            log_ratios: Some(&ratios),
        },
        cfg,
    )?;
    let traces = out.traces.unwrap_or_default();
    for (i, (r, adv)) in group.records.iter_mut().zip(out.advantages).enumerate() {
        r.advantage = Some(adv);
        r.v_trace = traces.get(i).map(|t| t.values.clone());
    }
    Ok(())
}

/// Outcome of [`score_log`].
#[derive(Debug, Default)]
pub struct ScoredLog {
    pub groups: Vec<RecordGroup>,
    /// One diagnostic per group left unscored.
    pub skipped: Vec<String>,
}

/// Score every group; groups are independent and may run in parallel, and
/// the output keeps input group order.
pub fn score_log(groups: Vec<RecordGroup>, cfg: &EstimatorConfig, exec: Exec) -> Result<ScoredLog> {
    cfg.validate()?;
    let results = exec.map(groups.len(), |i| {
        let mut g = groups[i].clone();
        let r = score_group(&mut g, cfg);
        (g, r)
    });
    let mut out = ScoredLog::default();
    for (g, r) in results {
        match r {
            Ok(()) => {}
            Err(CreditError::Domain(msg)) => out.skipped.push(msg),
            Err(e) => return Err(e),
        }
        out.groups.push(g);
    }
    Ok(out)
}

/// Write records as JSON lines, shortest round-trip float formatting.
pub fn write_records<W: Write>(groups: &[RecordGroup], mut w: W) -> Result<()> {
    for r in groups.iter().flat_map(|g| &g.records) {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_advantage_log(groups: &[RecordGroup], path: &Path) -> Result<()> {
    write_records(groups, BufWriter::new(File::create(path)?))
}

/// Counters from [`score_stream`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StreamReport {
    pub records: usize,
    pub groups: usize,
    pub skipped_groups: Vec<String>,
    pub rejected: Vec<String>,
}

/// Score a log whose groups occupy contiguous runs of lines, holding at most
/// one group in memory. A `group_id` that reappears after its run ended is an
/// error.
pub fn score_stream<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    cfg: &EstimatorConfig,
    skip_bad: bool,
) -> Result<StreamReport> {
    cfg.validate()?;
    let mut report = StreamReport::default();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<RecordGroup> = None;
    let flush = |g: RecordGroup, report: &mut StreamReport, w: &mut W| -> Result<()> {
        let mut g = g;
        match score_group(&mut g, cfg) {
            Ok(()) => {}
            Err(CreditError::Domain(msg)) => report.skipped_groups.push(msg),
            Err(e) => return Err(e),
        }
        report.groups += 1;
        report.records += g.records.len();
        write_records(std::slice::from_ref(&g), &mut *w)
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match TrajectoryRecord::parse_line(&line, i + 1) {
            Ok(r) => r,
            Err(e) if skip_bad => {
                report.rejected.push(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        match &mut current {
            Some(g) if g.group_id == rec.group_id => g.records.push(rec),
            _ => {
                if !seen.insert(rec.group_id.clone()) {
                    return Err(CreditError::Record {
                        line: i + 1,
                        message: format!("group `{}` is not contiguous", rec.group_id),
                    });
                }
                if let Some(done) = current.take() {
                    flush(done, &mut report, &mut writer)?;
                }
                current = Some(RecordGroup {
                    group_id: rec.group_id.clone(),
                    records: vec![rec],
                });
            }
        }
    }
    if let Some(done) = current.take() {
        flush(done, &mut report, &mut writer)?;
    }
    writer.flush()?;
    Ok(report)
}

/// Export a scored in-process batch as external records.
pub fn batch_to_records(batch: &GroupBatch, group_id: &str) -> Result<RecordGroup> {
    let evidence = batch
        .evidence
        .as_ref()
        .ok_or_else(|| CreditError::Config("batch has no evidence to export".into()))?;
    let records = batch
        .tokens
        .iter()
        .zip(evidence)
        .zip(&batch.rewards)
        .enumerate()
        .map(|(i, ((toks, ev), &reward))| TrajectoryRecord {
            query_id: format!("q{}", batch.query),
            traj_id: format!("{group_id}-{i}"),
            group_id: group_id.to_string(),
            tokens: toks.iter().map(|&t| t as u64).collect(),
            logp_plain: ev.iter().map(|e| e.plain_logp).collect(),
            logp_oracle: ev.iter().map(|e| e.oracle_logp).collect(),
            reward,
            advantage: None,
            v_trace: None,
        })
        .collect();
    Ok(RecordGroup {
        group_id: group_id.to_string(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn rec(group: &str, id: usize, reward: u8, plain: Vec<f64>, oracle: Vec<f64>) -> TrajectoryRecord {
        TrajectoryRecord {
            query_id: "q".into(),
            traj_id: format!("t{id}"),
            group_id: group.into(),
            tokens: (0..plain.len() as u64).collect(),
            logp_plain: plain,
            logp_oracle: oracle,
            reward,
            advantage: None,
            v_trace: None,
        }
    }

    #[test]
    fn empty_input_is_empty() {
        let log = parse_records("".as_bytes(), false).unwrap();
        assert!(log.groups.is_empty());
    }

    #[test]
    fn one_line_one_group() {
        let line = r#"{"query_id":"a","traj_id":"b","group_id":"g","tokens":[1],"logp_plain":[-0.5],"logp_oracle":[-0.25],"reward":1}"#;
        let log = parse_records(line.as_bytes(), false).unwrap();
        assert_eq!(log.groups.len(), 1);
        assert_eq!(log.groups[0].records[0].reward, 1);
    }

    #[test]
    fn rejects_bad_records_with_line_numbers() {
        let text = "\n{\"query_id\":\"a\",\"traj_id\":\"b\",\"group_id\":\"g\",\"tokens\":[1,2],\"logp_plain\":[-0.5],\"logp_oracle\":[-0.2,-0.1],\"reward\":1}\n";
        match parse_records(text.as_bytes(), false) {
            Err(CreditError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_reward = r#"{"query_id":"a","traj_id":"b","group_id":"g","tokens":[1],"logp_plain":[-0.5],"logp_oracle":[-0.25],"reward":2}"#;
        let log = parse_records(bad_reward.as_bytes(), true).unwrap();
        assert!(log.groups.is_empty());
        assert_eq!(log.rejected.len(), 1);
    }

    #[test]
    fn zero_evidence_gives_zero_advantages() {
        let mut g = RecordGroup {
            group_id: "g".into(),
            records: vec![
                rec("g", 0, 1, vec![-1.0, -2.0], vec![-1.0, -2.0]),
                rec("g", 1, 0, vec![-0.5], vec![-0.5]),
            ],
        };
        score_group(&mut g, &EstimatorConfig::default()).unwrap();
        for r in &g.records {
            assert!(r.advantage.as_ref().unwrap().iter().all(|&a| a == 0.0));
            assert_eq!(r.v_trace.as_ref().unwrap().len(), r.tokens.len() + 1);
        }
    }

    #[test]
    fn all_correct_group_is_zero() {
        let mut g = RecordGroup {
            group_id: "g".into(),
            records: vec![
                rec("g", 0, 1, vec![-1.0], vec![-0.1]),
                rec("g", 1, 1, vec![-0.5], vec![-2.0]),
            ],
        };
        score_group(&mut g, &EstimatorConfig::default()).unwrap();
        for r in &g.records {
            assert_eq!(r.advantage.as_deref(), Some(&[0.0][..]));
        }
    }

    #[test]
    fn singleton_groups_are_skipped() {
        let groups = vec![RecordGroup {
            group_id: "solo".into(),
            records: vec![rec("solo", 0, 1, vec![-1.0], vec![-0.1])],
        }];
        let out = score_log(groups, &EstimatorConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert!(out.groups[0].records[0].advantage.is_none());
    }

    #[test]
    fn stream_matches_batch_scoring() {
        let groups = vec![
            RecordGroup {
                group_id: "a".into(),
                records: vec![
                    rec("a", 0, 1, vec![-1.0, -0.3], vec![-0.2, -0.9]),
                    rec("a", 1, 0, vec![-0.5, -0.1, -2.0], vec![-0.7, -0.1, -0.4]),
                ],
            },
            RecordGroup {
                group_id: "b".into(),
                records: vec![
                    rec("b", 0, 0, vec![-1.5], vec![-0.2]),
                    rec("b", 1, 1, vec![-0.5], vec![-0.6]),
                    rec("b", 2, 1, vec![-0.25], vec![-0.6]),
                ],
            },
        ];
        let mut input = Vec::new();
        write_records(&groups, &mut input).unwrap();
        let cfg = EstimatorConfig::default().with_variant(Variant::OppoNoAnchor);
        let mut streamed = Vec::new();
        let report = score_stream(input.as_slice(), &mut streamed, &cfg, false).unwrap();
        assert_eq!(report.groups, 2);
        let scored = score_log(groups, &cfg, Exec::Parallel).unwrap();
        let mut batch_out = Vec::new();
        write_records(&scored.groups, &mut batch_out).unwrap();
        assert_eq!(streamed, batch_out);
    }

    #[test]
    fn stream_rejects_split_groups() {
        let groups = vec![
            RecordGroup { group_id: "a".into(), records: vec![rec("a", 0, 1, vec![-1.0], vec![-1.0])] },
            RecordGroup { group_id: "b".into(), records: vec![rec("b", 0, 1, vec![-1.0], vec![-1.0])] },
            RecordGroup { group_id: "a".into(), records: vec![rec("a", 1, 0, vec![-1.0], vec![-1.0])] },
        ];
        let mut input = Vec::new();
        write_records(&groups, &mut input).unwrap();
        let err = score_stream(input.as_slice(), Vec::new(), &EstimatorConfig::default(), false);
        assert!(matches!(err, Err(CreditError::Record { line: 3, .. })));
    }
}
