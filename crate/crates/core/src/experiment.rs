//! Method roster and the continual fine-tuning comparison: pretrain a base on
//! copy_reverse, then fine-tune it on sort under each method and track how
//! much of the first task survives.

use std::fmt;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::expansion::{
    apply_trainable, build_expansion_plan, expand_model, trainable_set, ExpansionPlan, Strategy,
    TrainMode,
};
use crate::interpolators::{DivergenceConfig, DivergenceKind, InterpolatorConfig, InterpolatorKind};
use crate::training::{train, MetricLog, Record, TaskKind, TrainConfig, TrainTarget};
use crate::transformer::{init_model, ModelSpec, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullParam,
    PartialParam,
    Stack,
    ConcatLerp,
    ConcatLerpMse,
    ConcatDlerp,
    ConcatDlerpMse,
    ConcatDlerpin,
    ConcatPlerp,
    ConcatMoe,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::FullParam,
        Method::PartialParam,
        Method::Stack,
        Method::ConcatLerp,
        Method::ConcatLerpMse,
        Method::ConcatDlerp,
        Method::ConcatDlerpMse,
        Method::ConcatDlerpin,
        Method::ConcatPlerp,
        Method::ConcatMoe,
        Method::Hybrid,
    ];

    /// The four methods of the forgetting comparison.
    pub const CF: [Method; 4] = [
        Method::FullParam,
        Method::PartialParam,
        Method::Stack,
        Method::ConcatLerpMse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullParam => "full_param",
            Method::PartialParam => "partial_param",
            Method::Stack => "stack",
            Method::ConcatLerp => "concat_lerp",
            Method::ConcatLerpMse => "concat_lerp_mse",
            Method::ConcatDlerp => "concat_dlerp",
            Method::ConcatDlerpMse => "concat_dlerp_mse",
            Method::ConcatDlerpin => "concat_dlerpin",
            Method::ConcatPlerp => "concat_plerp",
            Method::ConcatMoe => "concat_moe",
            Method::Hybrid => "hybrid",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Method::FullParam => TrainMode::FullParam,
            Method::PartialParam => TrainMode::PartialParam,
            _ => TrainMode::Control,
        }
    }

    /// Expansion plan behind the method. Partial-param uses the plan only to
    /// pick which base layers train; full-param has none.
    pub fn plan(self, n_layers: usize, period: usize) -> Result<Option<ExpansionPlan>> {
        use InterpolatorKind as K;
        let (strategy, kind, div) = match self {
            Method::FullParam => return Ok(None),
            Method::PartialParam => (Strategy::Concat, K::Lerp, DivergenceKind::None),
            Method::Stack => (Strategy::Stack, K::Lerp, DivergenceKind::None),
            Method::ConcatLerp => (Strategy::Concat, K::Lerp, DivergenceKind::None),
            Method::ConcatLerpMse => (Strategy::Concat, K::Lerp, DivergenceKind::Mse),
            Method::ConcatDlerp => (Strategy::Concat, K::Dlerp, DivergenceKind::None),
            Method::ConcatDlerpMse => (Strategy::Concat, K::Dlerp, DivergenceKind::Mse),
            Method::ConcatDlerpin => (Strategy::Concat, K::DlerpIn, DivergenceKind::None),
            Method::ConcatPlerp => (Strategy::Concat, K::Plerp, DivergenceKind::None),
            Method::ConcatMoe => (Strategy::Concat, K::Moe, DivergenceKind::None),
            Method::Hybrid => (Strategy::Hybrid, K::Lerp, DivergenceKind::Mse),
        };
        let divergence = match div {
            DivergenceKind::None => DivergenceConfig::none(),
            d => DivergenceConfig::for_interpolator(d, kind),
        };
        build_expansion_plan(n_layers, period, strategy, InterpolatorConfig::new(kind), divergence).map(Some)
    }

    /// Whether the forward pass runs through the expansion.
    pub fn is_expanded(self) -> bool {
        !matches!(self, Method::FullParam | Method::PartialParam)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A model ready for fine-tuning under one method.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub method: Method,
    pub spec: ModelSpec,
    /// Plan used by the forward pass; `None` for plain models.
    pub plan: Option<ExpansionPlan>,
    pub store: ParameterStore,
}

impl Prepared {
    pub fn new(method: Method, spec: &ModelSpec, base: &ParameterStore, period: usize) -> Result<Self> {
        let plan = method.plan(spec.n_layers, period)?;
        let mut store = match (&plan, method.is_expanded()) {
            (Some(p), true) => expand_model(spec, base, p)?.store,
            _ => base.clone(),
        };
        let trainable = trainable_set(&store, plan.as_ref(), method.mode())?;
        apply_trainable(&mut store, &trainable);
        Ok(Prepared {
            method,
            spec: spec.clone(),
            plan: plan.filter(|_| method.is_expanded()),
            store,
        })
    }

    /// Tensors this method updates.
    pub fn trainable(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn train(
        &mut self,
        task: TaskKind,
        cfg: &TrainConfig,
        on_record: &mut dyn FnMut(&Record, &ParameterStore) -> Result<()>,
    ) -> Result<MetricLog> {
        let trainable = self.trainable().into_iter().collect();
        let mut target = TrainTarget {
            spec: &self.spec,
            store: &mut self.store,
            plan: self.plan.as_ref(),
            trainable: &trainable,
        };
        train(&mut target, task, cfg, self.method.as_str(), on_record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::plain(self.spec.clone(), self.store.clone());
        c.plan = self.plan.clone();
        c.meta.insert("method".into(), self.method.to_string());
        c
    }
}

/// Full-param training of a freshly initialised model on `task`.
pub fn pretrain(
    spec: &ModelSpec,
    task: TaskKind,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&Record, &ParameterStore) -> Result<()>,
) -> Result<(ParameterStore, MetricLog)> {
    let mut store = init_model(spec)?;
    let trainable = store.names().cloned().collect();
    let mut target = TrainTarget {
        spec,
        store: &mut store,
        plan: None,
        trainable: &trainable,
    };
    let log = train(&mut target, task, cfg, "pretrain", on_record)?;
    Ok((store, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfRow {
    pub step: usize,
    pub method: String,
    pub seed: u64,
    pub task_a_acc: f64,
    pub task_b_acc: f64,
}

/// Accuracy curves of every method and seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CfCurve {
    pub rows: Vec<CfRow>,
}

impl CfCurve {
    pub fn push_log(&mut self, seed: u64, log: &MetricLog) {
        self.rows.extend(log.records.iter().map(|r| CfRow {
            step: r.step,
            method: r.method.clone(),
            seed,
            task_a_acc: r.task_a_acc,
            task_b_acc: r.task_b_acc,
        }));
    }

    pub fn write_csv(&self, w: impl io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record(["step", "method", "seed", "task_a_acc", "task_b_acc"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(CfCurve { rows })
    }

    /// Methods in first-appearance order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Mean over seeds of each method's accuracies at every step.
    pub fn seed_mean(&self, method: &str) -> Vec<(usize, f64, f64)> {
        let mut steps: Vec<usize> = self.rows.iter().filter(|r| r.method == method).map(|r| r.step).collect();
        steps.sort_unstable();
        steps.dedup();
        steps
            .into_iter()
            .map(|s| {
                let at: Vec<&CfRow> = self.rows.iter().filter(|r| r.method == method && r.step == s).collect();
                let n = at.len() as f64;
                (
                    s,
                    at.iter().map(|r| r.task_a_acc).sum::<f64>() / n,
                    at.iter().map(|r| r.task_b_acc).sum::<f64>() / n,
                )
            })
            .collect()
    }

    /// Final row of `method` under `seed`.
    pub fn last(&self, method: &str, seed: u64) -> Option<&CfRow> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.seed == seed)
            .max_by_key(|r| r.step)
    }

    /// Two side-by-side panels, task A retention and task B acquisition, one
    /// polyline per method averaged over seeds.
    pub fn to_svg(&self) -> String {
        const W: f64 = 420.0;
        const H: f64 = 260.0;
        const PAD: f64 = 40.0;
        const PALETTE: [&str; 11] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf", "#000000",
        ];
        let colour = |m: &str| {
            let i = Method::ALL.iter().position(|x| x.as_str() == m).unwrap_or(10);
            PALETTE[i]
        };
        let max_step = self.rows.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
        let methods = self.methods();
        let legend_h = 16.0 * methods.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
            2.0 * W,
            H + legend_h + 10.0
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (panel, title) in ["task A accuracy (copy_reverse)", "task B accuracy (sort)"].iter().enumerate() {
            let x0 = panel as f64 * W;
            let px = |step: usize| x0 + PAD + (W - 2.0 * PAD) * step as f64 / max_step;
            let py = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc.clamp(0.0, 1.0);
            let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, x0 + W / 2.0);
            let _ = writeln!(
                s,
                r#"<polyline points="{},{} {},{} {},{}" fill="none" stroke="black"/>"#,
                px(0),
                py(1.0),
                px(0),
                py(0.0),
                x0 + W - PAD,
                py(0.0)
            );
            for tick in [0.0, 0.5, 1.0] {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="end">{tick:.1}</text>"#,
                    px(0) - 4.0,
                    py(tick) + 4.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                x0 + W - PAD,
                H - PAD + 16.0,
                max_step
            );
            for m in &methods {
                let pts: Vec<String> = self
                    .seed_mean(m)
                    .into_iter()
                    .map(|(step, a, b)| format!("{:.1},{:.1}", px(step), py(if panel == 0 { a } else { b })))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                    pts.join(" "),
                    colour(m)
                );
            }
        }
        for (i, m) in methods.iter().enumerate() {
            let y = H + 10.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"/><text x="{}" y="{}">{m}</text>"#,
                PAD,
                PAD + 20.0,
                colour(m),
                PAD + 26.0,
                y + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, csv_path: &Path, svg_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(csv_path, &buf)?;
        write_atomic(svg_path, self.to_svg().as_bytes())
    }
}

/// Fine-tunes `base` on sort under every method and seed. A failing run
/// stops the experiment; rows gathered so far are returned with the error.
pub fn run_cf(
    spec: &ModelSpec,
    base: &ParameterStore,
    methods: &[Method],
    seeds: &[u64],
    period: usize,
    cfg: &TrainConfig,
    mut progress: impl FnMut(Method, u64, &Record),
) -> (CfCurve, Result<()>) {
    let mut curve = CfCurve::default();
    for &seed in seeds {
        for &method in methods {
            let run = TrainConfig { seed, ..cfg.clone() };
            let result = Prepared::new(method, spec, base, period).and_then(|mut p| {
                p.train(TaskKind::Sort, &run, &mut |r, _| {
                    progress(method, seed, r);
                    Ok(())
                })
            });
            match result {
                Ok(log) => curve.push_log(seed, &log),
                Err(e) => return (curve, Err(e)),
            }
        }
    }
    (curve, Ok(()))
}
