//! Command-line orchestration: a namespaced `key = value` config, argument
//! parsing and one runner per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::eyegen::{DatasetSpec, DomainShift, EyeGenError, ImageDims, Split};
use crate::kv;
use crate::losses::{DinoHeadConfig, GazeLossConfig, VicConfig};
use crate::nets::{EmaConfig, NetError, Tier};
use crate::pipeline::{AblationFlags, BaselineKind, PipelineError, RunConfig, PROBE_RIDGE};

mod commands;

pub use commands::{execute, reproduce, ReproduceOutput, ABLATION_METHODS, MAIN_METHODS, REFERENCE_METHODS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: expected {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("config file: {0}")]
    Kv(#[from] kv::KvError),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Data(#[from] EyeGenError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// What a key's value must parse as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Int,
    Float,
    Bool,
    /// Free text; empty means unset.
    Text,
    /// Comma-separated non-negative integers.
    IntList,
    /// Integer or empty.
    OptInt,
    Tier,
    Baseline,
    Split,
    /// One of a fixed set of words.
    Choice(&'static [&'static str]),
}

impl ValueKind {
    fn expected(self) -> &'static str {
        match self {
            ValueKind::Int => "a non-negative integer",
            ValueKind::Float => "a finite number",
            ValueKind::Bool => "true or false",
            ValueKind::Text => "text",
            ValueKind::IntList => "comma-separated integers",
            ValueKind::OptInt => "an integer or nothing",
            ValueKind::Tier => "teacher_l, teacher_s or student",
            ValueKind::Baseline => "pseudo_only, sp_kd, self_distill_no_vfm or fully_supervised",
            ValueKind::Split => "pretrain, syn, real_train, real_eval or real_upper",
            ValueKind::Choice(_) => "one of the listed words",
        }
    }

    fn accepts(self, v: &str) -> bool {
        match self {
            ValueKind::Int => v.parse::<u64>().is_ok(),
            ValueKind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
            ValueKind::Bool => v == "true" || v == "false",
            ValueKind::Text => true,
            ValueKind::IntList => !v.is_empty() && v.split(',').all(|p| p.trim().parse::<u64>().is_ok()),
            ValueKind::OptInt => v.is_empty() || v.parse::<u64>().is_ok(),
            ValueKind::Tier => Tier::parse(v).is_some(),
            ValueKind::Baseline => BaselineKind::parse(v).is_ok(),
            ValueKind::Split => Split::ALL.iter().any(|s| s.name() == v),
            ValueKind::Choice(words) => words.contains(&v),
        }
    }
}

/// One documented config key.
#[derive(Clone, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: String,
    pub kind: ValueKind,
    pub doc: &'static str,
}

fn k(key: &'static str, default: impl ToString, kind: ValueKind, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: default.to_string(),
        kind,
        doc,
    }
}

/// Every key the config understands, with desk-scale defaults.
pub fn key_table() -> Vec<KeySpec> {
    use ValueKind::*;
    let d = DatasetSpec::default();
    let sh = DomainShift::default();
    let a = AugmentConfig::default();
    let g = GazeLossConfig::default();
    let v = VicConfig::default();
    let dn = DinoHeadConfig::default();
    let lens = a.motion_lengths.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
    vec![
        k("data.seed", d.seed, Int, "Dataset seed; subjects and frames are a pure function of it."),
        k("data.n_subjects_pretrain", d.n_subjects_pretrain, Int, "Subjects in the identity-pretraining pool."),
        k("data.n_subjects_syn", d.n_subjects_syn, Int, "Labeled synthetic subjects."),
        k("data.n_subjects_real_train", d.n_subjects_real_train, Int, "Unlabeled real training subjects."),
        k("data.n_subjects_real_eval", d.n_subjects_real_eval, Int, "Real evaluation subjects."),
        k("data.n_subjects_real_upper", d.n_subjects_real_upper, Int, "Labeled real subjects reserved for the upper bound."),
        k("data.frames_per_recording", d.frames_per_recording, Int, "Frames per recording."),
        k("data.recordings_per_subject", d.recordings_per_subject, Int, "Recordings per subject."),
        k("data.width", d.dims.width, Int, "Eye image width in pixels."),
        k("data.height", d.dims.height, Int, "Eye image height in pixels."),
        k("data.tone_gamma", sh.tone_gamma, Float, "Exponent of the real-domain tone curve."),
        k("data.vignette", sh.vignette, Float, "Real-domain radial darkening."),
        k("data.sensor_noise_sigma", sh.sensor_noise_sigma, Float, "Pixel noise in both domains."),
        k("data.real_noise_sigma", sh.real_noise_sigma, Float, "Extra pixel noise in real frames."),
        k("data.warp_amplitude", sh.warp_amplitude, Float, "Peak real-domain warp displacement, pixels."),
        k("data.warp_seed", sh.warp_seed, Int, "Seed of the fixed warp field."),
        k("aug.gamma_min", a.gamma.0, Float, "Gamma jitter range, both views."),
        k("aug.gamma_max", a.gamma.1, Float, ""),
        k("aug.scale_min", a.scale.0, Float, "Random rescale range, both views."),
        k("aug.scale_max", a.scale.1, Float, ""),
        k("aug.p", a.p, Float, "Probability of each strong op."),
        k("aug.blur_sigma_min", a.blur_sigma.0, Float, "Gaussian blur sigma range."),
        k("aug.blur_sigma_max", a.blur_sigma.1, Float, ""),
        k("aug.motion_lengths", lens, IntList, "Motion-blur kernel lengths."),
        k("aug.quant_levels", a.quant_levels, Int, "Block quantization levels."),
        k("aug.quant_block", a.quant_block, Int, "Block quantization tile size."),
        k("aug.brightness", a.brightness, Float, "Brightness jitter half-range."),
        k("aug.contrast_min", a.contrast.0, Float, "Contrast factor range."),
        k("aug.contrast_max", a.contrast.1, Float, ""),
        k("aug.shadow_min", a.shadow.0, Float, "Linear shadow strength range."),
        k("aug.shadow_max", a.shadow.1, Float, ""),
        k("aug.dropout_max_rects", a.dropout_max_rects, Int, "Most dropout rectangles per image."),
        k("aug.dropout_max_area", a.dropout_max_area, Float, "Largest dropout rectangle, fraction of the image."),
        k("net.teacher_tier", crate::nets::Tier::TeacherL.name(), Tier, "Architecture of the foundation and teacher."),
        k("loss.gaze_beta_deg", g.beta * 45.0, Float, "Quadratic-to-linear switch of the gaze loss, degrees."),
        k("loss.gaze_gamma_deg", g.gamma * 45.0, Float, "Outlier threshold of the gaze loss, degrees."),
        k("loss.gaze_k", g.k, Float, "Slope factor beyond the outlier threshold."),
        k("loss.vic_inv", v.lambda_inv, Float, "Invariance weight of the teacher feature loss."),
        k("loss.vic_var", v.lambda_var, Float, "Variance weight."),
        k("loss.vic_cov", v.lambda_cov, Float, "Covariance weight."),
        k("loss.vic_gamma", v.gamma_v, Float, "Target per-dimension standard deviation."),
        k("loss.vic_eps", v.eps, Float, "Variance stabilizer inside the square root."),
        k("loss.sd_scale", 0.01, Float, "Weight of the stage-1 feature matching term."),
        k("loss.feature_weight", 1.0, Float, "Weight of the stage-2 teacher feature term."),
        k("loss.lambda_e_end", 1.0, Float, "Final value of the stage-2 EMA-student weight."),
        k("loss.teacher_objective", "mse", Choice(&["mse", "dino"]), "Stage-1 self-distillation objective."),
        k("loss.dino_prototypes", dn.prototypes, Int, "Prototype count for the dino objective."),
        k("loss.dino_teacher_temp", dn.teacher_temp, Float, ""),
        k("loss.dino_student_temp", dn.student_temp, Float, ""),
        k("loss.dino_center_momentum", dn.center_momentum, Float, ""),
        k("loss.probe_ridge", PROBE_RIDGE, Float, "Ridge strength of the linear probe."),
        k("sched.lr", 1e-3, Float, "Peak learning rate after warmup."),
        k("sched.min_lr", 1e-5, Float, "Final learning rate of the cosine decay."),
        k("sched.weight_decay", 0.01, Float, "AdamW decoupled weight decay."),
        k("sched.ema_momentum", 0.5, Float, "Momentum of every EMA mirror."),
        k("sched.ema_interval", 50, Int, "Steps between EMA updates."),
        k("sched.loss_scheduler", true, Bool, "Cosine hand-off from synthetic supervision to self-distillation in stage 1."),
        k("sched.syn_fraction", 0.5, Float, "Share of each stage-1 batch drawn from synthetic data."),
        k("run.iterations", "", OptInt, "Overrides the stage-specific iteration count below."),
        k("run.pretrain_iterations", 400, Int, "Identity pretraining steps."),
        k("run.teacher_iterations", 400, Int, "Steps of every teacher-tier run."),
        k("run.student_iterations", 600, Int, "Steps of every student-tier run."),
        k("run.batch", 32, Int, "Mini-batch size."),
        k("run.seed", 0, Int, "Training seed."),
        k("run.seeds", "0,1,2", IntList, "Seeds swept by reproduce."),
        k("run.synsup_only", false, Bool, "Stage 1 with synthetic supervision only."),
        k("run.sd_pl_only", false, Bool, "Stage 1 with self-distillation and pseudo-labels only."),
        k("run.synft_tier", "teacher", Choice(&["teacher", "student"]), "Which model synft trains."),
        k("run.baseline", BaselineKind::PseudoOnly.name(), Baseline, "Baseline run by the baseline subcommand."),
        k("run.data", "", Text, "Dataset directory; empty means <out>/data."),
        k("run.foundation", "", Text, "Foundation checkpoint; empty means <out>/foundation.gdck."),
        k("run.teacher", "", Text, "Stage-2 teacher; empty means <out>/stage1.gdck."),
        k("run.student", "", Text, "Stage-2 student init; empty means <out>/synft_student.gdck."),
        k("run.checkpoint", "", Text, "Checkpoint read by eval and export-embeddings."),
        k("eval.bootstrap_iters", crate::evalkit::BOOTSTRAP_ITERS, Int, "Hierarchical bootstrap replicates."),
        k("eval.seed", 0, Int, "Seed of calibration-frame draws and bootstrap."),
        k("eval.split", crate::eyegen::Split::RealEval.name(), Split, "Pool evaluated or exported."),
        k("eval.embed_subjects", 32, Int, "Subjects in the embedding-distance check."),
        k("eval.embed_frames", 16, Int, "Frames per subject in the embedding-distance check."),
    ]
}

/// Effective configuration: defaults overlaid with a file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
    kinds: BTreeMap<String, ValueKind>,
}

impl Default for Config {
    fn default() -> Self {
        let table = key_table();
        Self {
            values: table.iter().map(|s| (s.key.to_string(), s.default.clone())).collect(),
            kinds: table.iter().map(|s| (s.key.to_string(), s.kind)).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = *self.kinds.get(key).ok_or_else(|| CliError::UnknownKey(key.to_string()))?;
        let value = value.trim();
        if !kind.accepts(value) {
            return Err(CliError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected: kind.expected(),
            });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply every `key = value` line of a config file.
    pub fn merge_kv(&mut self, text: &str) -> Result<()> {
        for (key, value) in kv::parse(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        let mut c = Self::default();
        c.merge_kv(&text)?;
        Ok(c)
    }

    /// All keys with their effective values, sorted.
    pub fn to_kv(&self) -> String {
        kv::render(self.values.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    // Values were validated on entry, so the parses below cannot fail.

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().unwrap()
    }

    pub fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().unwrap()
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().unwrap()
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn opt_u64(&self, key: &str) -> Option<u64> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| v.parse().unwrap())
    }

    pub fn u64_list(&self, key: &str) -> Vec<u64> {
        self.raw(key).split(',').map(|p| p.trim().parse().unwrap()).collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn tier(&self, key: &str) -> Tier {
        Tier::parse(self.raw(key)).unwrap()
    }

    pub fn baseline(&self, key: &str) -> BaselineKind {
        BaselineKind::parse(self.raw(key)).unwrap()
    }

    pub fn split(&self, key: &str) -> Split {
        *Split::ALL.iter().find(|s| s.name() == self.raw(key)).unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.u64("run.seed")
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.usize("data.width"),
            height: self.usize("data.height"),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_subjects_pretrain: self.u64("data.n_subjects_pretrain") as u32,
            n_subjects_syn: self.u64("data.n_subjects_syn") as u32,
            n_subjects_real_train: self.u64("data.n_subjects_real_train") as u32,
            n_subjects_real_eval: self.u64("data.n_subjects_real_eval") as u32,
            n_subjects_real_upper: self.u64("data.n_subjects_real_upper") as u32,
            frames_per_recording: self.u64("data.frames_per_recording") as u32,
            recordings_per_subject: self.u64("data.recordings_per_subject") as u32,
            dims: self.dims(),
            seed: self.u64("data.seed"),
            shift: DomainShift {
                tone_gamma: self.f64("data.tone_gamma"),
                vignette: self.f64("data.vignette"),
                sensor_noise_sigma: self.f64("data.sensor_noise_sigma"),
                real_noise_sigma: self.f64("data.real_noise_sigma"),
                warp_amplitude: self.f64("data.warp_amplitude"),
                warp_seed: self.u64("data.warp_seed"),
            },
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            gamma: (self.f64("aug.gamma_min"), self.f64("aug.gamma_max")),
            scale: (self.f64("aug.scale_min"), self.f64("aug.scale_max")),
            p: self.f64("aug.p"),
            blur_sigma: (self.f64("aug.blur_sigma_min"), self.f64("aug.blur_sigma_max")),
            motion_lengths: self.u64_list("aug.motion_lengths").into_iter().map(|v| v as usize).collect(),
            quant_levels: self.usize("aug.quant_levels"),
            quant_block: self.usize("aug.quant_block"),
            brightness: self.f64("aug.brightness"),
            contrast: (self.f64("aug.contrast_min"), self.f64("aug.contrast_max")),
            shadow: (self.f64("aug.shadow_min"), self.f64("aug.shadow_max")),
            dropout_max_rects: self.usize("aug.dropout_max_rects"),
            dropout_max_area: self.f64("aug.dropout_max_area"),
        }
    }

    /// Trainer settings for a run of the given length class, honoring
    /// `run.iterations` when set.
    pub fn run_config(&self, length: RunLength) -> RunConfig {
        let default_iters = match length {
            RunLength::Pretrain => self.u64("run.pretrain_iterations"),
            RunLength::Teacher => self.u64("run.teacher_iterations"),
            RunLength::Student => self.u64("run.student_iterations"),
        };
        RunConfig {
            iterations: self.opt_u64("run.iterations").unwrap_or(default_iters),
            batch: self.usize("run.batch"),
            lr: self.f64("sched.lr"),
            min_lr: self.f64("sched.min_lr"),
            weight_decay: self.f64("sched.weight_decay"),
            ema: EmaConfig {
                momentum: self.f64("sched.ema_momentum"),
                interval: self.u64("sched.ema_interval"),
            },
            gaze: GazeLossConfig {
                beta: self.f64("loss.gaze_beta_deg") / 45.0,
                gamma: self.f64("loss.gaze_gamma_deg") / 45.0,
                k: self.f64("loss.gaze_k"),
            },
            vic: VicConfig {
                lambda_inv: self.f64("loss.vic_inv"),
                lambda_var: self.f64("loss.vic_var"),
                lambda_cov: self.f64("loss.vic_cov"),
                gamma_v: self.f64("loss.vic_gamma"),
                eps: self.f64("loss.vic_eps"),
            },
            dino: DinoHeadConfig {
                prototypes: self.usize("loss.dino_prototypes"),
                teacher_temp: self.f64("loss.dino_teacher_temp"),
                student_temp: self.f64("loss.dino_student_temp"),
                center_momentum: self.f64("loss.dino_center_momentum"),
            },
            aug: self.augment(),
            syn_fraction: self.f64("sched.syn_fraction"),
            sd_scale: self.f64("loss.sd_scale"),
            lambda_e_end: self.f64("loss.lambda_e_end"),
            feature_weight: self.f64("loss.feature_weight"),
            flags: AblationFlags {
                synsup_only: self.bool("run.synsup_only"),
                sd_pl_only: self.bool("run.sd_pl_only"),
                scheduler_off: !self.bool("sched.loss_scheduler"),
                dino_loss_teacher: self.raw("loss.teacher_objective") == "dino",
                teacher_tier: self.tier("net.teacher_tier"),
            },
            seed: self.seed(),
        }
    }

    /// Markdown reference of every key, its default and meaning.
    pub fn reference_markdown() -> String {
        let mut out = String::from("# Configuration keys\n\nOne `key = value` per line, `#` starts a comment. Unknown keys are rejected.\n\n| key | default | type | meaning |\n|---|---|---|---|\n");
        for s in key_table() {
            let default = if s.default.is_empty() { "(unset)".to_string() } else { format!("`{}`", s.default) };
            out += &format!("| `{}` | {} | {} | {} |\n", s.key, default, s.kind.expected(), s.doc);
        }
        out
    }
}

/// Which iteration default a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunLength {
    Pretrain,
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Pretrain,
    Probe,
    Synft,
    Stage1,
    Stage2,
    Baseline,
    Eval,
    ExportEmbeddings,
    Reproduce,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Gen,
        Command::Pretrain,
        Command::Probe,
        Command::Synft,
        Command::Stage1,
        Command::Stage2,
        Command::Baseline,
        Command::Eval,
        Command::ExportEmbeddings,
        Command::Reproduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Pretrain => "pretrain",
            Command::Probe => "probe",
            Command::Synft => "synft",
            Command::Stage1 => "stage1",
            Command::Stage2 => "stage2",
            Command::Baseline => "baseline",
            Command::Eval => "eval",
            Command::ExportEmbeddings => "export-embeddings",
            Command::Reproduce => "reproduce",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: Config,
    pub out: PathBuf,
}

pub const USAGE: &str = "usage: gazedistill <command> [--config PATH] [--set key=value]... [--seed N] [--out DIR]
commands: gen pretrain probe synft stage1 stage2 baseline eval export-embeddings reproduce";

/// Parse arguments (without the program name). The config file is applied
/// first, then every `--set` in order, then `--seed`.
pub fn parse_cli<S: AsRef<str>>(args: &[S]) -> Result<Invocation> {
    let mut it = args.iter().map(AsRef::as_ref);
    let name = it.next().ok_or_else(|| CliError::Usage(USAGE.into()))?;
    let command = Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{name}`\n{USAGE}")))?;
    let (mut file, mut sets, mut seed, mut out) = (None, Vec::new(), None, PathBuf::from("out"));
    while let Some(flag) = it.next() {
        let mut value = |f: &str| it.next().ok_or_else(|| CliError::Usage(format!("{f} needs a value")));
        match flag {
            "--config" => file = Some(PathBuf::from(value(flag)?)),
            "--set" => {
                let kv = value(flag)?;
                let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{kv}`")))?;
                sets.push((k.trim().to_string(), v.to_string()));
            }
            "--seed" => seed = Some(value(flag)?.to_string()),
            "--out" => out = PathBuf::from(value(flag)?),
            other => return Err(CliError::Usage(format!("unknown flag `{other}`\n{USAGE}"))),
        }
    }
    let mut config = match file {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    };
    for (k, v) in sets {
        config.set(&k, &v)?;
    }
    if let Some(s) = seed {
        config.set("run.seed", &s)?;
    }
    Ok(Invocation { command, config, out })
}

/// Size the worker pool from `GD_THREADS` (unset or 0 means one worker per
/// core). Returns the worker count in effect.
pub fn init_threads() -> Result<usize> {
    let n = match std::env::var("GD_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| CliError::BadValue {
            key: "GD_THREADS".into(),
            value: v.clone(),
            expected: "a non-negative integer",
        })?,
        Err(_) => 0,
    };
    // A second call finds the pool already built; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests;
