//! Aggregation of episode and one-step records into a report.

use crate::harness::{Bucket, EpisodeRecord, OneStepRecord, Outcome, SuiteResult, TargetKind};
use crate::tasks::TaskVariant;
use crate::warehouse::ExecutionMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const REPORT_SCHEMA_VERSION: &str = "boxbench-report/1";
pub const IOU_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no records in bucket {0}")]
    EmptyBucket(Bucket),
    #[error("no records")]
    Empty,
    #[error("reports differ in structure: {0}")]
    StructureMismatch(String),
}

/// A success count and its percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: u64,
    pub total: u64,
    pub percent: f64,
}

impl Rate {
    pub fn new(hits: u64, total: u64) -> Option<Rate> {
        (total > 0).then(|| Rate {
            hits,
            total,
            percent: 100.0 * hits as f64 / total as f64,
        })
    }

    fn of<T>(items: &[T], hit: impl Fn(&T) -> bool) -> Option<Rate> {
        Rate::new(
            items.iter().filter(|x| hit(x)).count() as u64,
            items.len() as u64,
        )
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: u64,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            n: values.len() as u64,
            mean,
            std: var.sqrt(),
        })
    }
}

/// A rate per box-count bucket plus the pooled rate. Buckets without
/// records are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedRate {
    pub by_bucket: BTreeMap<Bucket, Rate>,
    pub aggregate: Rate,
}

fn bucketed<T>(
    items: &[T],
    bucket: impl Fn(&T) -> Bucket,
    hit: impl Fn(&T) -> bool,
) -> Option<BucketedRate> {
    let aggregate = Rate::of(items, &hit)?;
    let mut by_bucket = BTreeMap::new();
    for b in Bucket::ALL {
        let (total, hits) = items
            .iter()
            .filter(|x| bucket(x) == b)
            .fold((0u64, 0u64), |(t, h), x| (t + 1, h + hit(x) as u64));
        if let Some(r) = Rate::new(hits, total) {
            by_bucket.insert(b, r);
        }
    }
    Some(BucketedRate {
        by_bucket,
        aggregate,
    })
}

fn require_all_buckets(r: BucketedRate) -> Result<BucketedRate, MetricsError> {
    match Bucket::ALL
        .into_iter()
        .find(|b| !r.by_bucket.contains_key(b))
    {
        Some(b) => Err(MetricsError::EmptyBucket(b)),
        None => Ok(r),
    }
}

/// Share of valid one-step predictions. Every bucket must be populated.
pub fn one_step_validity(records: &[OneStepRecord]) -> Result<BucketedRate, MetricsError> {
    bucketed(records, OneStepRecord::bucket, |r| r.valid)
        .ok_or(MetricsError::Empty)
        .and_then(require_all_buckets)
}

/// Placement error over valid free-form predictions, per target kind.
pub fn placement_error(records: &[OneStepRecord]) -> BTreeMap<TargetKind, Stat> {
    TargetKind::ALL
        .into_iter()
        .filter_map(|k| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.target_kind == k)
                .filter_map(|r| r.placement_error)
                .collect();
            Stat::of(&errs).map(|s| (k, s))
        })
        .collect()
}

pub fn joint_hit(r: &OneStepRecord, tau: f64) -> bool {
    r.pick_iou.min(r.target_iou) >= tau
}

/// Share of predictions whose pick and target masks both reach IoU `tau`.
pub fn joint_iou_accuracy(
    records: &[OneStepRecord],
    tau: f64,
) -> Result<BucketedRate, MetricsError> {
    bucketed(records, OneStepRecord::bucket, |r| joint_hit(r, tau)).ok_or(MetricsError::Empty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub tau: f64,
    pub accuracy: BucketedRate,
    pub by_target_kind: BTreeMap<TargetKind, Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSuccess {
    pub aggregate: Rate,
    pub by_bucket: BTreeMap<Bucket, Rate>,
    pub by_variant: BTreeMap<TaskVariant, Rate>,
    /// Variant, then bucket. Empty cells are absent.
    pub cells: BTreeMap<TaskVariant, BTreeMap<Bucket, Rate>>,
    pub outcomes: BTreeMap<Outcome, u64>,
}

/// Plan success per execution mode, bucket and variant.
pub fn plan_success(records: &[EpisodeRecord]) -> BTreeMap<ExecutionMode, ModeSuccess> {
    let mut by_mode: BTreeMap<ExecutionMode, Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        by_mode.entry(r.mode).or_default().push(r);
    }
    let success = |r: &&EpisodeRecord| r.outcome == Outcome::Success;
    by_mode
        .into_iter()
        .map(|(mode, recs)| {
            let b = bucketed(&recs, |r| r.bucket(), success).expect("mode has records");
            let mut by_variant = BTreeMap::new();
            let mut cells: BTreeMap<TaskVariant, BTreeMap<Bucket, Rate>> = BTreeMap::new();
            for v in TaskVariant::ALL {
                let vr: Vec<&EpisodeRecord> =
                    recs.iter().copied().filter(|r| r.variant() == v).collect();
                if let Some(vb) = bucketed(&vr, |r| r.bucket(), success) {
                    by_variant.insert(v, vb.aggregate);
                    cells.insert(v, vb.by_bucket);
                }
            }
            let mut outcomes = BTreeMap::new();
            for r in &recs {
                *outcomes.entry(r.outcome).or_insert(0) += 1;
            }
            (
                mode,
                ModeSuccess {
                    aggregate: b.aggregate,
                    by_bucket: b.by_bucket,
                    by_variant,
                    cells,
                    outcomes,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: String,
    pub policy: String,
    pub privileged: bool,
    pub episodes: u64,
    pub one_step_samples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_step_validity: Option<BucketedRate>,
    /// Mean and population std in meters.
    pub placement_error: BTreeMap<TargetKind, Stat>,
    pub joint_iou: Vec<IouRow>,
    pub plan_success: BTreeMap<ExecutionMode, ModeSuccess>,
}

impl MetricsReport {
    pub fn from_suite(result: &SuiteResult) -> MetricsReport {
        let one = &result.one_step;
        let joint_iou = if one.is_empty() {
            Vec::new()
        } else {
            IOU_THRESHOLDS
                .iter()
                .map(|&tau| IouRow {
                    tau,
                    accuracy: joint_iou_accuracy(one, tau).expect("records present"),
                    by_target_kind: TargetKind::ALL
                        .into_iter()
                        .filter_map(|k| {
                            let kr: Vec<&OneStepRecord> =
                                one.iter().filter(|r| r.target_kind == k).collect();
                            Rate::of(&kr, |r| joint_hit(r, tau)).map(|rate| (k, rate))
                        })
                        .collect(),
                })
                .collect()
        };
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION.into(),
            policy: result.policy.clone(),
            privileged: result.privileged,
            episodes: result.episodes.len() as u64,
            one_step_samples: one.len() as u64,
            one_step_validity: bucketed(one, OneStepRecord::bucket, |r| r.valid),
            placement_error: placement_error(one),
            joint_iou,
            plan_success: plan_success(&result.episodes),
        }
    }

    pub fn to_canonical_json(&self) -> String {
        crate::canon::to_line(self).expect("report serializes")
    }

    /// Every percentage in the report keyed by a stable path.
    pub fn percentage_cells(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let put_bucketed = |prefix: &str, b: &BucketedRate, out: &mut BTreeMap<String, f64>| {
            out.insert(format!("{prefix}/aggregate"), b.aggregate.percent);
            for (k, r) in &b.by_bucket {
                out.insert(format!("{prefix}/{k}"), r.percent);
            }
        };
        if let Some(v) = &self.one_step_validity {
            put_bucketed("one-step-validity", v, &mut out);
        }
        for row in &self.joint_iou {
            let prefix = format!("joint-iou@{}", row.tau);
            put_bucketed(&prefix, &row.accuracy, &mut out);
            for (k, r) in &row.by_target_kind {
                out.insert(format!("{prefix}/{}", k.name()), r.percent);
            }
        }
        for (mode, m) in &self.plan_success {
            let prefix = format!("plan-success/{}", mode.name());
            out.insert(format!("{prefix}/aggregate"), m.aggregate.percent);
            for (b, r) in &m.by_bucket {
                out.insert(format!("{prefix}/{b}"), r.percent);
            }
            for (v, cells) in &m.cells {
                out.insert(format!("{prefix}/{v}/aggregate"), m.by_variant[v].percent);
                for (b, r) in cells {
                    out.insert(format!("{prefix}/{v}/{b}"), r.percent);
                }
            }
        }
        out
    }

    /// Fixed-layout plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct =
            |r: Option<&Rate>| r.map_or_else(|| "-".to_string(), |r| format!("{:.1}", r.percent));
        let _ = writeln!(
            s,
            "policy: {}{}",
            self.policy,
            if self.privileged { " (privileged)" } else { "" }
        );
        let _ = writeln!(
            s,
            "episodes: {}  one-step samples: {}",
            self.episodes, self.one_step_samples
        );

        let _ = writeln!(s, "\nOne-step validity (%)");
        let _ = writeln!(
            s,
            "{:<12}{:>8}{:>8}{:>8}{:>10}",
            "", "1-10", "11-20", "21-30", "Aggregate"
        );
        if let Some(v) = &self.one_step_validity {
            let _ = writeln!(
                s,
                "{:<12}{:>8}{:>8}{:>8}{:>10}",
                "valid",
                pct(v.by_bucket.get(&Bucket::Small)),
                pct(v.by_bucket.get(&Bucket::Medium)),
                pct(v.by_bucket.get(&Bucket::Large)),
                pct(Some(&v.aggregate))
            );
        }

        let _ = writeln!(
            s,
            "\nPutdown placement error (m, mean +/- population std, valid free-form predictions)"
        );
        for k in TargetKind::ALL {
            let cell = self.placement_error.get(&k).map_or_else(
                || "-".to_string(),
                |st| format!("{:.3} +/- {:.3}  (n={})", st.mean, st.std, st.n),
            );
            let _ = writeln!(s, "{:<12}{}", k.name(), cell);
        }

        let _ = writeln!(s, "\nJoint IoU accuracy (%)");
        let _ = writeln!(
            s,
            "{:<8}{:>8}{:>8}{:>8}{:>8}{:>13}{:>12}{:>8}",
            "tau", "1-10", "11-20", "21-30", "all", "pallet-cell", "shelf-cell", "box"
        );
        for row in &self.joint_iou {
            let a = &row.accuracy;
            let _ = writeln!(
                s,
                "{:<8}{:>8}{:>8}{:>8}{:>8}{:>13}{:>12}{:>8}",
                format!("{:.2}", row.tau),
                pct(a.by_bucket.get(&Bucket::Small)),
                pct(a.by_bucket.get(&Bucket::Medium)),
                pct(a.by_bucket.get(&Bucket::Large)),
                pct(Some(&a.aggregate)),
                pct(row.by_target_kind.get(&TargetKind::PalletCell)),
                pct(row.by_target_kind.get(&TargetKind::ShelfCell)),
                pct(row.by_target_kind.get(&TargetKind::Box)),
            );
        }

        for (mode, m) in &self.plan_success {
            let _ = writeln!(s, "\nPlan success (%), {}", mode.name());
            let _ = writeln!(
                s,
                "{:<24}{:>8}{:>8}{:>8}{:>8}",
                "variant", "1-10", "11-20", "21-30", "all"
            );
            for (v, cells) in &m.cells {
                let _ = writeln!(
                    s,
                    "{:<24}{:>8}{:>8}{:>8}{:>8}",
                    v.name(),
                    pct(cells.get(&Bucket::Small)),
                    pct(cells.get(&Bucket::Medium)),
                    pct(cells.get(&Bucket::Large)),
                    pct(m.by_variant.get(v)),
                );
            }
            let _ = writeln!(
                s,
                "{:<24}{:>8}{:>8}{:>8}{:>8}",
                "average",
                pct(m.by_bucket.get(&Bucket::Small)),
                pct(m.by_bucket.get(&Bucket::Medium)),
                pct(m.by_bucket.get(&Bucket::Large)),
                pct(Some(&m.aggregate)),
            );
            let outcomes: Vec<String> = m
                .outcomes
                .iter()
                .map(|(o, n)| format!("{}={n}", o.name()))
                .collect();
            let _ = writeln!(s, "outcomes: {}", outcomes.join(" "));
        }
        s
    }
}

/// Per-cell differences `a - b` in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub deltas: BTreeMap<String, f64>,
}

pub fn ablation_delta(a: &MetricsReport, b: &MetricsReport) -> Result<AblationTable, MetricsError> {
    let ca = a.percentage_cells();
    let cb = b.percentage_cells();
    if let Some(k) = ca
        .keys()
        .find(|k| !cb.contains_key(*k))
        .or_else(|| cb.keys().find(|k| !ca.contains_key(*k)))
    {
        return Err(MetricsError::StructureMismatch(format!(
            "cell {k} present in only one report"
        )));
    }
    Ok(AblationTable {
        deltas: ca.iter().map(|(k, v)| (k.clone(), v - cb[k])).collect(),
    })
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut s = String::from("cell                                              delta (pp)\n");
        for (k, v) in &self.deltas {
            let _ = writeln!(s, "{k:<50}{v:>+10.1}");
        }
        s
    }
}
