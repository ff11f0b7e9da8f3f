use super::*;
use crate::nets::Role;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    PseudoOnly,
    SpKd,
    SelfDistillNoVfm,
    FullySupervised,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::PseudoOnly, Self::SpKd, Self::SelfDistillNoVfm, Self::FullySupervised];

    pub fn name(self) -> &'static str {
        match self {
            Self::PseudoOnly => "pseudo_only",
            Self::SpKd => "sp_kd",
            Self::SelfDistillNoVfm => "self_distill_no_vfm",
            Self::FullySupervised => "fully_supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| PipelineError::UnknownBaseline(s.to_string()))
    }
}

/// Whatever a baseline may read. `real_upper` is only touched by
/// [`BaselineKind::FullySupervised`].
#[derive(Clone, Copy, Debug)]
pub struct BaselineInputs<'a> {
    pub teacher: Option<&'a ModelBundle>,
    /// Synthetic-pretrained student; required by the distillation baselines
    /// and used as the starting point of the upper bound.
    pub student_init: Option<&'a ModelBundle>,
    pub syn: &'a [Sample],
    pub real_train: &'a [Sample],
    pub real_upper: &'a [Sample],
}

fn need<'a>(v: Option<&'a ModelBundle>, what: &'static str) -> Result<&'a ModelBundle> {
    v.ok_or(PipelineError::MissingSplit(what))
}

pub fn run_baseline(kind: BaselineKind, inputs: BaselineInputs<'_>, cfg: &RunConfig) -> Result<Trained> {
    let mut out = match kind {
        BaselineKind::PseudoOnly => stage2_with(Stage2Variant::PseudoOnly, need(inputs.teacher, "teacher")?, need(inputs.student_init, "student init")?, inputs.real_train, cfg)?,
        BaselineKind::SpKd => stage2_with(Stage2Variant::Sp, need(inputs.teacher, "teacher")?, need(inputs.student_init, "student init")?, inputs.real_train, cfg)?,
        BaselineKind::SelfDistillNoVfm => {
            let dims = inputs.student_init.map(|b| b.dims).unwrap_or_default();
            let fresh = ModelBundle::new(Tier::Student, dims, Role::Student, &mut RngStream::new(cfg.seed, stream_id(&[PURPOSE_INIT, 3])));
            let mut t = stage1_optimize(&fresh, inputs.syn, inputs.real_train, cfg)?;
            t.bundle = t.bundle.with_role(Role::Student);
            t
        }
        BaselineKind::FullySupervised => fully_supervised(need(inputs.student_init, "student init")?, inputs.real_upper, cfg)?,
    };
    out.report.stage = kind.name().to_string();
    Ok(out)
}
