//! Metrics and the evaluation harness: task-wise BLEU, closeness to the
//! initial translation (TER), and size/speed benchmarks.

pub mod bleu;
pub mod ter;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, BeamConfig, InferenceModel, OutputFilter};
use crate::protocol::{encode_bti, encode_trn, encode_update, split_fillers, TaskKind, Triplet};
use crate::subword::BpeModel;
use crate::{Error, Result};

/// Held-out triplets per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSets {
    pub sets: BTreeMap<TaskKind, Vec<Triplet>>,
}

impl TestSets {
    pub fn get(&self, task: TaskKind) -> Result<&[Triplet]> {
        match self.sets.get(&task) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::MissingTask(task.name().to_string())),
        }
    }
}

/// How a model is driven at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Decodes every task with its own control-token layout.
    BiSync,
    /// Translation only: update tasks are served by retranslating `x'`,
    /// infilling is unsupported.
    Baseline,
}

impl SystemKind {
    pub fn supports(self, task: TaskKind) -> bool {
        self == SystemKind::BiSync || task != TaskKind::Bti
    }
}

/// Decodes one test triplet. Returns `ŷ'` for TRN and update tasks and the
/// filler text for BTI.
pub fn decode_triplet(
    model: &InferenceModel,
    bpe: &BpeModel,
    t: &Triplet,
    system: SystemKind,
    beam: &BeamConfig,
) -> Result<String> {
    if !system.supports(t.task) {
        return Err(Error::Config(format!("{system:?} cannot decode {}", t.task)));
    }
    let (source, filter) = match (t.task, system) {
        (TaskKind::Bti, _) => {
            let (gapped, _) = t.bti_parts()?;
            let ex = encode_bti(bpe, &t.x_prime, &gapped, &t.tgt_lang, None)?;
            (ex.source_ids, OutputFilter::fillers(bpe, 1))
        }
        (TaskKind::Trn, _) | (_, SystemKind::Baseline) => {
            (encode_trn(bpe, &t.x_prime, &t.tgt_lang, None)?.source_ids, OutputFilter::text(bpe))
        }
        (kind, SystemKind::BiSync) => {
            let y = t.y.as_deref().ok_or_else(|| Error::Protocol(format!("{kind} triplet without y")))?;
            let ex = encode_update(bpe, &t.x_prime, y, kind, &t.tgt_lang, None)?;
            (ex.source_ids, OutputFilter::text(bpe))
        }
    };
    let hyps = beam_search(model, &source, beam, &filter)?;
    let best = hyps.first().map(|h| h.output_ids()).unwrap_or_default();
    if t.task == TaskKind::Bti {
        Ok(split_fillers(bpe, best)?.join(" "))
    } else {
        bpe.decode(best)
    }
}

/// Decodes of every supported requested task, in test-set order.
pub type Decodes = BTreeMap<TaskKind, Vec<String>>;

pub fn decode_test_sets(
    model: &InferenceModel,
    bpe: &BpeModel,
    tests: &TestSets,
    tasks: &[TaskKind],
    system: SystemKind,
    beam: &BeamConfig,
) -> Result<Decodes> {
    let mut out = Decodes::new();
    for &task in tasks {
        let set = tests.get(task)?;
        if !system.supports(task) {
            continue;
        }
        let decodes = set
            .iter()
            .map(|t| decode_triplet(model, bpe, t, system, beam))
            .collect::<Result<Vec<_>>>()?;
        out.insert(task, decodes);
    }
    Ok(out)
}

/// BLEU of each decoded task against `y'` (BTI: against the gold filler).
pub fn bleu_from_decodes(tests: &TestSets, decodes: &Decodes) -> Result<BTreeMap<TaskKind, f64>> {
    decodes
        .iter()
        .map(|(&task, hyps)| {
            let refs = tests
                .get(task)?
                .iter()
                .map(|t| if task == TaskKind::Bti { t.bti_parts().map(|p| p.1) } else { Ok(t.y_prime.clone()) })
                .collect::<Result<Vec<_>>>()?;
            Ok((task, bleu::bleu(hyps, &refs)?))
        })
        .collect()
}

/// Row label of the `TER(y, y)` sanity entry in closeness maps.
pub const IDENTITY_ROW: &str = "y=y";

/// Lowercased corpus TER of each update task's `ŷ'` measured against the
/// initial `y`, plus the `TER(y, y)` sanity row.
pub fn ter_from_decodes(tests: &TestSets, decodes: &Decodes) -> Result<BTreeMap<String, f64>> {
    let cfg = ter::TerConfig::default();
    let mut out = BTreeMap::new();
    let mut all_y = Vec::new();
    for (&task, hyps) in decodes.iter().filter(|(t, _)| t.is_update()) {
        let ys = tests
            .get(task)?
            .iter()
            .map(|t| t.y.clone().ok_or_else(|| Error::Protocol(format!("{task} triplet without y"))))
            .collect::<Result<Vec<_>>>()?;
        out.insert(task.name().to_string(), ter::corpus_ter(hyps, &ys, &cfg)?);
        all_y.extend(ys);
    }
    if !all_y.is_empty() {
        out.insert(IDENTITY_ROW.to_string(), ter::corpus_ter(&all_y, &all_y, &cfg)?);
    }
    Ok(out)
}

/// Size and steady-state batch-1 speed of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub size_bytes: u64,
    /// Median over runs.
    pub tokens_per_sec: f64,
    pub runs: Vec<f64>,
    pub generated_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub bleu: BTreeMap<TaskKind, f64>,
    /// Closeness `TER(y, ŷ')` per update task, plus [`IDENTITY_ROW`].
    pub ter: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchResult>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn validate(&self, tasks: &[TaskKind], system: SystemKind) -> Result<()> {
        for &t in tasks.iter().filter(|&&t| system.supports(t)) {
            if !self.bleu.contains_key(&t) {
                return Err(Error::MissingTask(t.name().to_string()));
            }
        }
        if let Some(bad) = self.bleu.values().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Metric(format!("BLEU {bad} outside [0, 100]")));
        }
        // TER is unbounded above when hypotheses are much longer than y.
        if let Some(bad) = self.ter.values().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Metric(format!("TER {bad} is not a non-negative number")));
        }
        Ok(())
    }
}

/// BLEU on each requested task.
pub fn evaluate_tasks(
    model: &InferenceModel,
    bpe: &BpeModel,
    tests: &TestSets,
    tasks: &[TaskKind],
    system: SystemKind,
    beam: &BeamConfig,
) -> Result<BTreeMap<TaskKind, f64>> {
    let decodes = decode_test_sets(model, bpe, tests, tasks, system, beam)?;
    bleu_from_decodes(tests, &decodes)
}

/// Closeness: how far synchronization moves away from the initial target.
pub fn evaluate_closeness(
    model: &InferenceModel,
    bpe: &BpeModel,
    tests: &TestSets,
    system: SystemKind,
    beam: &BeamConfig,
) -> Result<BTreeMap<String, f64>> {
    let decodes = decode_test_sets(model, bpe, tests, &TaskKind::UPDATES, system, beam)?;
    ter_from_decodes(tests, &decodes)
}

/// Both tables from a single decoding pass.
pub fn evaluate(
    model: &InferenceModel,
    bpe: &BpeModel,
    tests: &TestSets,
    system: SystemKind,
    beam: &BeamConfig,
) -> Result<EvalReport> {
    let decodes = decode_test_sets(model, bpe, tests, &TaskKind::ALL, system, beam)?;
    let report = EvalReport {
        system: match system {
            SystemKind::BiSync => "BiSync".into(),
            SystemKind::Baseline => "base".into(),
        },
        bleu: bleu_from_decodes(tests, &decodes)?,
        ter: ter_from_decodes(tests, &decodes)?,
        bench: None,
        config: serde_json::json!({ "beam": beam, "system": system }),
    };
    report.validate(&TaskKind::ALL, system)?;
    Ok(report)
}

/// Serialized size plus the median batch-1 decoding throughput over `runs`
/// passes through `sources` (at least 3). One untimed pass over the first
/// sources warms caches up first.
pub fn benchmark(
    model: &InferenceModel,
    size_bytes: u64,
    sources: &[Vec<u32>],
    beam: &BeamConfig,
    filter: &OutputFilter,
    runs: usize,
) -> Result<BenchResult> {
    if sources.is_empty() {
        return Err(Error::Config("benchmark needs at least one source".into()));
    }
    for src in sources.iter().take(8) {
        beam_search(model, src, beam, filter)?;
    }
    let mut speeds = Vec::new();
    let mut generated = 0;
    for _ in 0..runs.max(3) {
        let start = Instant::now();
        let mut tokens = 0;
        for src in sources {
            tokens += beam_search(model, src, beam, filter)?.first().map_or(0, |h| h.token_ids.len());
        }
        speeds.push(tokens as f64 / start.elapsed().as_secs_f64());
        generated = tokens;
    }
    let mut sorted = speeds.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchResult { size_bytes, tokens_per_sec: sorted[sorted.len() / 2], runs: speeds, generated_tokens: generated })
}

/// Task BLEU and closeness TER side by side, unsupported cells shown as `-`.
pub fn format_tables(reports: &[&EvalReport]) -> String {
    let mut s = String::new();
    let cell = |v: Option<&f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
    let _ = writeln!(s, "{:<8}|{:>7}{:>7}{:>7}{:>7}{:>7}", "BLEU", "TRN", "INS", "DEL", "SUB", "BTI");
    for r in reports {
        let _ = write!(s, "{:<8}|", r.system);
        for t in TaskKind::ALL {
            let _ = write!(s, "{:>7}", cell(r.bleu.get(&t)));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\n{:<8}|{:>7}{:>7}{:>7}{:>7}", "TER", "INS", "DEL", "SUB", IDENTITY_ROW);
    for r in reports {
        let _ = write!(s, "{:<8}|", r.system);
        for k in ["INS", "DEL", "SUB", IDENTITY_ROW] {
            let _ = write!(s, "{:>7}", cell(r.ter.get(k)));
        }
        s.push('\n');
    }
    s
}

/// Size and speed, one row per (model, precision).
pub fn format_bench(rows: &[(&str, &BenchResult)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16}|{:>12}{:>14}", "model", "size (B)", "tokens/sec");
    for (name, b) in rows {
        let _ = writeln!(s, "{name:<16}|{:>12}{:>14.1}", b.size_bytes, b.tokens_per_sec);
    }
    s
}
