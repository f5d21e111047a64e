//! Expanded models built from a frozen base: layer selection, branch
//! construction, freezing and weight-space merging.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolators::{DivergenceConfig, InterpolatorConfig, InterpolatorKind, InterpolatorState};
use crate::tensor::Tensor;
use crate::transformer::{
    branch_name, check_store, layer_name, BlockForm, BranchKind, ModelSpec, ModelView,
    ParameterStore, BLOCK_TENSORS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Concat,
    Stack,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Concat, Strategy::Stack, Strategy::Hybrid];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Concat => "concat",
            Strategy::Stack => "stack",
            Strategy::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Strategy::Concat),
            "stack" => Ok(Strategy::Stack),
            "hybrid" => Ok(Strategy::Hybrid),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Which layers get an expanded branch, of which kind, fused how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub n_layers: usize,
    pub period: usize,
    pub strategy: Strategy,
    pub expanded: Vec<usize>,
    pub interpolator: InterpolatorConfig,
    pub divergence: DivergenceConfig,
}

/// Expands the last layer of every group of `period` layers.
pub fn build_expansion_plan(
    n_layers: usize,
    period: usize,
    strategy: Strategy,
    interpolator: InterpolatorConfig,
    divergence: DivergenceConfig,
) -> Result<ExpansionPlan> {
    if period == 0 || period > n_layers {
        return Err(Error::Plan(format!(
            "period {period} must be in 1..={n_layers}"
        )));
    }
    interpolator.validate()?;
    if divergence.lambda < 0.0 || !divergence.lambda.is_finite() {
        return Err(Error::Plan(format!(
            "divergence weight {} must be non-negative",
            divergence.lambda
        )));
    }
    Ok(ExpansionPlan {
        n_layers,
        period,
        strategy,
        expanded: (0..n_layers).filter(|i| (i + 1) % period == 0).collect(),
        interpolator,
        divergence,
    })
}

impl ExpansionPlan {
    /// Branch kind at `layer`, if it is expanded. Hybrid plans alternate,
    /// starting with concat.
    pub fn branch_at(&self, layer: usize) -> Option<BranchKind> {
        let rank = self.expanded.iter().position(|&i| i == layer)?;
        Some(match self.strategy {
            Strategy::Concat => BranchKind::Concat,
            Strategy::Stack => BranchKind::Stack,
            Strategy::Hybrid if rank % 2 == 0 => BranchKind::Concat,
            Strategy::Hybrid => BranchKind::Stack,
        })
    }

    pub fn concat_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.expanded
            .iter()
            .copied()
            .filter(|&i| self.branch_at(i) == Some(BranchKind::Concat))
    }

    pub fn has_stack(&self) -> bool {
        self.expanded
            .iter()
            .any(|&i| self.branch_at(i) == Some(BranchKind::Stack))
    }
}

/// A frozen base plus trainable branches and their fusion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlModel {
    pub spec: ModelSpec,
    pub plan: ExpansionPlan,
    /// Base tensors under canonical names, branches as `branch.<layer>.<kind>`,
    /// fusion tensors as `interp.<layer>.<name>`.
    pub store: ParameterStore,
}

/// Copies the expanded layers into branches and freezes the base. Concat
/// branches are exact copies; stack branches have their output projections
/// zeroed so the inserted layer starts as an identity map.
pub fn expand_model(spec: &ModelSpec, base: &ParameterStore, plan: &ExpansionPlan) -> Result<ControlModel> {
    check_store(spec, base)?;
    if plan.n_layers != spec.n_layers {
        return Err(Error::Plan(format!(
            "plan covers {} layers, base has {}",
            plan.n_layers, spec.n_layers
        )));
    }
    let mut store = ParameterStore::new();
    for name in spec.tensor_shapes().into_iter().map(|(n, _)| n) {
        store.insert(name.clone(), base.tensor(&name)?.clone(), true);
    }
    for &i in &plan.expanded {
        let kind = plan.branch_at(i).expect("expanded layer");
        for t in BLOCK_TENSORS {
            let mut w = base.tensor(&layer_name(t, i))?.clone();
            if kind == BranchKind::Stack && matches!(t, "o_proj" | "down_proj") {
                w.data_mut().fill(0.0);
            }
            store.insert(branch_name(t, i), w, false);
        }
        if kind == BranchKind::Concat {
            InterpolatorState::identity(&plan.interpolator, spec.d_model)?.install(&mut store, i);
        }
    }
    Ok(ControlModel {
        spec: spec.clone(),
        plan: plan.clone(),
        store,
    })
}

impl ControlModel {
    pub fn view(&self) -> ModelView<'_> {
        ModelView::base(&self.spec, &self.store).with_plan(Some(&self.plan))
    }

    /// The same model evaluated with every lerp blend weight replaced by
    /// `alpha`. Nothing is copied or modified.
    pub fn alpha_sweep(&self, alpha: f64) -> Result<ModelView<'_>> {
        if self.plan.interpolator.kind != InterpolatorKind::Lerp {
            return Err(Error::Interpolator(format!(
                "alpha sweep needs a lerp interpolator, plan uses {}",
                self.plan.interpolator.kind
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Interpolator(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(ModelView {
            alpha_override: Some(alpha),
            ..self.view()
        })
    }

    pub fn with_form(&self, form: BlockForm) -> ModelView<'_> {
        ModelView { form, ..self.view() }
    }
}

/// How a model is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Branches and unfrozen fusion tensors only.
    Control,
    /// Every tensor of a plain model.
    FullParam,
    /// Only the base blocks at the plan's expanded indices, trained in place.
    PartialParam,
}

/// Names of the tensors `mode` may update.
pub fn trainable_set(store: &ParameterStore, plan: Option<&ExpansionPlan>, mode: TrainMode) -> Result<BTreeSet<String>> {
    Ok(match mode {
        TrainMode::FullParam => store.names().cloned().collect(),
        TrainMode::Control => store
            .iter()
            .filter(|(n, e)| {
                n.starts_with("branch.") || (n.starts_with("interp.") && !e.frozen)
            })
            .map(|(n, _)| n.clone())
            .collect(),
        TrainMode::PartialParam => {
            let plan = plan.ok_or_else(|| Error::Plan("partial-param training needs a plan".into()))?;
            let mut set = BTreeSet::new();
            for &i in &plan.expanded {
                for t in BLOCK_TENSORS {
                    let name = layer_name(t, i);
                    store.tensor(&name)?;
                    set.insert(name);
                }
            }
            set
        }
    })
}

/// Sets every frozen flag so exactly `trainable` is unfrozen.
pub fn apply_trainable(store: &mut ParameterStore, trainable: &BTreeSet<String>) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        store
            .set_frozen(&name, !trainable.contains(&name))
            .expect("name taken from store");
    }
}

/// Plain model whose expanded layers hold `(1 - alpha) * base + alpha * branch`.
pub fn merge_blocks(model: &ControlModel, alpha: f64) -> Result<ParameterStore> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Merge(format!("alpha {alpha} outside [0, 1]")));
    }
    if model.plan.has_stack() {
        return Err(Error::Merge(
            "stacked layers have no pre-trained counterpart to blend with; only concat branches merge"
                .into(),
        ));
    }
    let mut out = ParameterStore::new();
    for name in model.spec.tensor_shapes().into_iter().map(|(n, _)| n) {
        out.insert(name.clone(), model.store.tensor(&name)?.clone(), false);
    }
    let a = alpha as f32;
    for &i in &model.plan.expanded {
        for t in BLOCK_TENSORS {
            let base = model.store.tensor(&layer_name(t, i))?;
            let branch = model.store.tensor(&branch_name(t, i))?;
            let merged = if alpha == 0.0 {
                base.clone()
            } else if alpha == 1.0 {
                branch.clone()
            } else {
                Tensor::from_fn(base.shape(), |j| {
                    (1.0 - a) * base.data()[j] + a * branch.data()[j]
                })
            };
            *out.tensor_mut(&layer_name(t, i))? = merged;
        }
    }
    Ok(out)
}
