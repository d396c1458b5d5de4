//! Where language features are cut from the trace, how MIM targets are
//! produced, and the executable check that the cuts hold.

mod step;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoders::{Bound, FeatureSequence, Image, ParamGroup, XfmModel};
use crate::error::{Error, Result};
use crate::objectives::Objective;

pub use step::{
    forward_pretraining, ImageInputs, MaskingConfig, MimTargets, NegativeChoice, PairInputs, PairSample, StepInputs,
    StepOutput, TextInputs,
};

/// The ablation switchboard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Stop language gradients on IMLM, ITM and BBP; MIM on.
    #[serde(rename = "all")]
    All,
    /// Stop only on IMLM.
    #[serde(rename = "s-mlm")]
    SMlm,
    /// Stop only on ITM and BBP.
    #[serde(rename = "s-itm")]
    SItm,
    /// No stopping.
    #[serde(rename = "wostop")]
    Wostop,
    /// As `All`, without MIM.
    #[serde(rename = "womim")]
    Womim,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::All, Self::SMlm, Self::SItm, Self::Wostop, Self::Womim];

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::SMlm => "s-mlm",
            Self::SItm => "s-itm",
            Self::Wostop => "wostop",
            Self::Womim => "womim",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected all|s-mlm|s-itm|wostop|womim")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradFlowConfig {
    pub variant: Variant,
    pub detach_for_imlm: bool,
    /// ITM and BBP always share one decision.
    pub detach_for_itm_bbp: bool,
    pub mim_enabled: bool,
}

impl GradFlowConfig {
    pub fn new(variant: Variant) -> Self {
        let (imlm, itm_bbp, mim) = match variant {
            Variant::All => (true, true, true),
            Variant::SMlm => (true, false, true),
            Variant::SItm => (false, true, true),
            Variant::Wostop => (false, false, true),
            Variant::Womim => (true, true, false),
        };
        Self {
            variant,
            detach_for_imlm: imlm,
            detach_for_itm_bbp: itm_bbp,
            mim_enabled: mim,
        }
    }

    /// Whether language features are cut on the path of `objective`. MLM
    /// and ITC are never cut; MIM has no language path.
    pub fn detaches(&self, objective: Objective) -> bool {
        match objective {
            Objective::Imlm => self.detach_for_imlm,
            Objective::Itm | Objective::Bbp => self.detach_for_itm_bbp,
            Objective::Mlm | Objective::Itc | Objective::Mim => false,
        }
    }
}

impl Default for GradFlowConfig {
    fn default() -> Self {
        Self::new(Variant::All)
    }
}

/// Objectives that read language features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutedObjective {
    Itc,
    Itm,
    Imlm,
    Bbp,
}

impl From<RoutedObjective> for Objective {
    fn from(r: RoutedObjective) -> Self {
        match r {
            RoutedObjective::Itc => Objective::Itc,
            RoutedObjective::Itm => Objective::Itm,
            RoutedObjective::Imlm => Objective::Imlm,
            RoutedObjective::Bbp => Objective::Bbp,
        }
    }
}

/// The whole sequence is detached when the config cuts this objective,
/// otherwise it is returned as is.
pub fn route_language_features<'g>(
    text: &FeatureSequence<'g>,
    objective: RoutedObjective,
    config: &GradFlowConfig,
) -> FeatureSequence<'g> {
    if config.detaches(objective.into()) {
        text.detach()
    } else {
        text.clone()
    }
}

/// Unmasked encoding by the live vision parameters, cut from the trace.
pub fn compute_mim_targets<'g>(model: &XfmModel, p: &Bound<'g>, images: &[Image]) -> Result<FeatureSequence<'g>> {
    Ok(model.encode_image(p, images, None)?.detach())
}

/// What a row of the report requires of one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Zero,
    NonZero,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub max_abs_grad: f64,
    pub expect: Expect,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopGradRow {
    pub objective: Objective,
    pub groups: BTreeMap<ParamGroup, GroupCheck>,
}

/// Per-objective, per-group maximum absolute gradient against the pattern
/// the configuration demands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopGradReport {
    pub variant: Variant,
    pub rows: Vec<StopGradRow>,
    /// One line per violated expectation, naming objective and group.
    pub failures: Vec<String>,
    pub pass: bool,
}

impl StopGradReport {
    pub fn row(&self, o: Objective) -> Option<&StopGradRow> {
        self.rows.iter().find(|r| r.objective == o)
    }

    pub fn max_abs(&self, o: Objective, g: ParamGroup) -> Option<f64> {
        self.row(o).and_then(|r| r.groups.get(&g)).map(|c| c.max_abs_grad)
    }
}

/// The expected zero pattern of `objective`'s gradient on `group`.
pub fn expected_pattern(config: &GradFlowConfig, objective: Objective, group: ParamGroup) -> Expect {
    use Expect::*;
    use Objective as O;
    use ParamGroup as G;
    match (objective, group) {
        (O::Mlm, G::Text) => NonZero,
        (O::Mlm, G::Vision | G::Fusion) => Zero,
        (O::Itc, G::Text | G::Vision) => NonZero,
        (O::Itc, G::Fusion) => Zero,
        (O::Itm | O::Imlm | O::Bbp, G::Text) => {
            if config.detaches(objective) {
                Zero
            } else {
                NonZero
            }
        }
        (O::Itm | O::Imlm | O::Bbp, G::Vision | G::Fusion) => NonZero,
        (O::Mim, G::Text | G::Fusion) => Zero,
        (O::Mim, G::Vision) => NonZero,
        (_, G::Heads) => Any,
    }
}

/// Runs one forward pass and one backward pass per present objective, and
/// compares every group's gradient against [`expected_pattern`]. Zero means
/// exactly zero.
pub fn verify_stop_gradient(model: &XfmModel, inputs: &StepInputs, config: &GradFlowConfig) -> Result<StopGradReport> {
    let pair = inputs
        .pair
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("stop-gradient check needs a pair batch".into()))?;
    if pair.images.len() < 2 || pair.boxes.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(
            "stop-gradient check needs at least two pairs and one boxed pair".into(),
        ));
    }
    let g = Graph::new();
    let p = model.bind(&g, true)?;
    let out = forward_pretraining(model, &p, inputs, config, MimTargets::Live)?;
    let store = model.params();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (objective, loss) in out.bundle.present() {
        g.backward(loss)?;
        let mut maxima: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|&gr| (gr, 0.0)).collect();
        for (id, var) in store.ids().zip(p.vars()) {
            let m = g.grad(*var).map_or(0.0, |t| t.max_abs());
            let slot = maxima.get_mut(&store.group(id)).expect("every group is listed");
            *slot = slot.max(m);
        }
        let mut groups = BTreeMap::new();
        for (group, max_abs_grad) in maxima {
            let expect = expected_pattern(config, objective, group);
            let pass = match expect {
                Expect::Zero => max_abs_grad == 0.0,
                Expect::NonZero => max_abs_grad > 0.0,
                Expect::Any => true,
            };
            if !pass {
                failures.push(format!(
                    "{objective}: {group} gradient max |g| = {max_abs_grad:e}, expected {}",
                    if expect == Expect::Zero { "exactly zero" } else { "non-zero" }
                ));
            }
            groups.insert(
                group,
                GroupCheck {
                    max_abs_grad,
                    expect,
                    pass,
                },
            );
        }
        rows.push(StopGradRow { objective, groups });
    }
    if !config.mim_enabled && out.bundle.mim.is_some() {
        failures.push("mim: present although the variant disables it".into());
    }
    Ok(StopGradReport {
        variant: config.variant,
        pass: failures.is_empty(),
        rows,
        failures,
    })
}
