//! Ablation sweeps: the module grid, frame-count sweeps and the loss grid.
//! Every entry trains from the same seeds for the same number of steps.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::synth::{BlindMode, SynthSplit, TEST, TRAIN};
use crate::train::{StepMetrics, Trainer};

/// One configuration of a sweep, as overrides of the base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub group: String,
    pub label: String,
    pub overrides: Map<String, Value>,
}

fn entry(group: &str, label: impl Into<String>, overrides: Value) -> SweepEntry {
    let Value::Object(overrides) = overrides else {
        unreachable!("overrides are objects")
    };
    SweepEntry {
        group: group.into(),
        label: label.into(),
        overrides,
    }
}

fn module_overrides(v: Variant) -> Value {
    let m = v.apply(&Default::default());
    json!({ "sampler": m.sampler, "refiner": m.refiner, "fusion": m.fusion })
}

/// Module grid rows (a)–(f).
pub fn module_grid() -> Vec<SweepEntry> {
    Variant::ALL
        .iter()
        .map(|&v| entry("modules", v.label(), module_overrides(v)))
        .collect()
}

/// Sparse (f) against uniform (b) as the video grows at fixed `K`.
pub fn frame_sweep(frames: &[usize]) -> Vec<SweepEntry> {
    let mut out = Vec::new();
    for &n in frames {
        for v in [Variant::F, Variant::B] {
            let mut o = module_overrides(v);
            o["frames"] = json!(n);
            out.push(entry("frames", format!("{}@N={n}", v.label()), o));
        }
    }
    out
}

/// Sparse (f) against no sampler (a) over the number of selected frames.
/// The video is made long enough for the largest `K`.
pub fn select_sweep(select: &[usize], frames: usize) -> Vec<SweepEntry> {
    let n = frames.max(2 * select.iter().copied().max().unwrap_or(0));
    let mut out = Vec::new();
    for &k in select {
        for v in [Variant::F, Variant::A] {
            let mut o = module_overrides(v);
            o["frames"] = json!(n);
            o["select"] = json!(k);
            out.push(entry("select", format!("{}@K={k}", v.label()), o));
        }
    }
    out
}

/// Objective grid rows (a)–(f) on the full model.
pub fn loss_grid() -> Vec<SweepEntry> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let (mlm, vtm, cl) = v.loss_weights();
            entry(
                "losses",
                v.label(),
                json!({ "w_vgmlm": mlm, "w_vtm": vtm, "w_cl": cl }),
            )
        })
        .collect()
}

/// Named sweeps: `modules`, `frames`, `select`, `losses`, `all`.
pub fn named_sweep(name: &str, base: &RunConfig) -> Result<Vec<SweepEntry>> {
    Ok(match name {
        "modules" => module_grid(),
        "frames" => frame_sweep(&[base.model.frames, 3 * base.model.frames]),
        "select" => select_sweep(&[4, 8, 16, 32], base.model.frames),
        "losses" => loss_grid(),
        "all" => {
            let mut v = module_grid();
            v.extend(frame_sweep(&[base.model.frames, 3 * base.model.frames]));
            v.extend(select_sweep(&[4, 8, 16, 32], base.model.frames));
            v.extend(loss_grid());
            v
        }
        other => return Err(Error::InvalidConfig(format!("unknown sweep `{other}`"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub label: String,
    pub frames: usize,
    pub select: usize,
    pub sampler: String,
    pub fusion: String,
    pub refiner: bool,
    pub w_vgmlm: f64,
    pub w_vtm: f64,
    pub w_cl: f64,
    pub steps: usize,
    pub qa_accuracy: f64,
    pub hit_rate: f64,
    pub blind_static: Option<f64>,
    pub blind_gaussian: Option<f64>,
    pub vtm_accuracy: Option<f64>,
    pub mcq_accuracy: Option<f64>,
}

fn name_of<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

impl AblationRow {
    pub fn new(entry: &SweepEntry, run: &RunConfig, report: &EvalReport) -> Self {
        Self {
            group: entry.group.clone(),
            label: entry.label.clone(),
            frames: run.model.frames,
            select: run.model.select,
            sampler: name_of(&run.model.sampler),
            fusion: name_of(&run.model.fusion),
            refiner: run.model.refiner,
            w_vgmlm: run.w_vgmlm,
            w_vtm: run.w_vtm,
            w_cl: run.w_cl,
            steps: run.total_steps(),
            qa_accuracy: report.qa_accuracy,
            hit_rate: report.hit_rate,
            blind_static: report.blind_accuracy(BlindMode::Static),
            blind_gaussian: report.blind_accuracy(BlindMode::Gaussian),
            vtm_accuracy: report.vtm_accuracy,
            mcq_accuracy: report.mcq_accuracy,
        }
    }
}

/// Trains `run` on its synthetic train split and evaluates on the test split.
pub fn train_and_eval<F>(run: &RunConfig, opts: &EvalOptions, log: F) -> Result<EvalReport>
where
    F: FnMut(&StepMetrics) -> Result<()>,
{
    let m = &run.model;
    let train = SynthSplit::new(
        run.data_seed,
        TRAIN,
        m.dim,
        run.train_episodes,
        m.frames,
        m.patches(),
    );
    let test = SynthSplit::new(
        run.data_seed,
        TEST,
        m.dim,
        run.test_episodes,
        m.frames,
        m.patches(),
    );
    let mut trainer = Trainer::new(run.clone(), train.world.clone())?;
    trainer.train(&train, usize::MAX, log)?;
    evaluate(&trainer.model, &test, opts)
}

/// Runs every entry; `done` sees each row as soon as it is finished.
pub fn run_ablation<F>(
    base: &RunConfig,
    entries: &[SweepEntry],
    opts: &EvalOptions,
    mut done: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow) -> Result<()>,
{
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let run = base.with_json_overrides(Value::Object(e.overrides.clone()))?;
        let report = train_and_eval(&run, opts, |_| Ok(()))?;
        let row = AblationRow::new(e, &run, &report);
        done(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn find<'a>(rows: &'a [AblationRow], group: &str, label: &str) -> Option<&'a AblationRow> {
    rows.iter().find(|r| r.group == group && r.label == label)
}

/// Directional claims the module grid and frame sweep should satisfy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

pub fn ordering_checks(rows: &[AblationRow]) -> Vec<OrderingCheck> {
    let mut out = Vec::new();
    for other in ["a", "d"] {
        if let (Some(f), Some(o)) = (find(rows, "modules", "f"), find(rows, "modules", other)) {
            out.push(OrderingCheck {
                claim: format!("(f) beats ({other}) on QA"),
                holds: f.qa_accuracy > o.qa_accuracy,
                detail: format!("{:.3} vs {:.3}", f.qa_accuracy, o.qa_accuracy),
            });
        }
    }
    let mut frames: Vec<usize> = rows
        .iter()
        .filter(|r| r.group == "frames")
        .map(|r| r.frames)
        .collect();
    frames.sort_unstable();
    frames.dedup();
    if let (Some(&lo), Some(&hi)) = (frames.first(), frames.last()) {
        let get = |v: &str, n: usize| find(rows, "frames", &format!("{v}@N={n}"));
        if let (Some(f0), Some(f1), Some(b0), Some(b1)) =
            (get("f", lo), get("f", hi), get("b", lo), get("b", hi))
        {
            let (df, db) = (
                f0.qa_accuracy - f1.qa_accuracy,
                b0.qa_accuracy - b1.qa_accuracy,
            );
            out.push(OrderingCheck {
                claim: format!("(f) degrades less than (b) from N={lo} to N={hi}"),
                holds: df < db,
                detail: format!("drop {df:.3} vs {db:.3}"),
            });
        }
    }
    out
}
