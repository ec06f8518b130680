//! Closed-form parameter counts, memory accounting and efficiency ratios.
//!
//! Nothing here reads weights; every figure comes from shapes.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub const BYTES_PER_PARAM: u64 = 4;
pub const MEGABYTE: f64 = 1_048_576.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    /// Bottleneck language adapters on every layer, without the invertible adapter.
    LanguageAdapters,
    InvertibleAdapter,
    TaskAdapters,
    PairHead,
}

/// Geometry needed for counting. Fields are optional so that partially
/// specified configs can be reported precisely.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub num_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub ffn: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_positions: Option<usize>,
    pub language_reduction: Option<usize>,
    pub task_reduction: Option<usize>,
    pub invertible_reduction: Option<usize>,
    pub coupling_steps: Option<usize>,
}

impl BudgetSpec {
    pub fn from_configs(encoder: &EncoderConfig, adapters: &AdapterConfig) -> Self {
        BudgetSpec {
            num_layers: Some(encoder.num_layers),
            hidden: Some(encoder.hidden),
            ffn: Some(encoder.ffn),
            vocab_size: Some(encoder.vocab_size),
            max_positions: Some(encoder.max_positions),
            language_reduction: Some(adapters.language_reduction),
            task_reduction: Some(adapters.task_reduction),
            invertible_reduction: Some(adapters.invertible_reduction),
            coupling_steps: Some(adapters.coupling_steps),
        }
    }

    pub fn paper_scale() -> Self {
        Self::from_configs(&EncoderConfig::paper_scale(), &AdapterConfig::default())
    }
}

struct Fields<'a> {
    spec: &'a BudgetSpec,
    missing: Vec<String>,
}

impl Fields<'_> {
    fn need(&mut self, name: &str, v: Option<usize>) -> u64 {
        match v {
            Some(v) => v as u64,
            None => {
                self.missing.push(name.to_string());
                0
            }
        }
    }

    fn finish(self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFields(self.missing))
        }
    }
}

fn bottleneck_adapter(h: u64, d: u64) -> u64 {
    2 * h * d + d + h
}

fn reduced(width: u64, r: u64, what: &str) -> Result<u64> {
    if r == 0 || width / r == 0 {
        return Err(Error::Config(format!("{what} reduction {r} leaves no bottleneck for width {width}")));
    }
    Ok(width / r)
}

/// Exact parameter count of one component.
pub fn count_parameters(spec: &BudgetSpec, component: Component) -> Result<u64> {
    let mut f = Fields { spec, missing: Vec::new() };
    let s = f.spec;
    match component {
        Component::Backbone => {
            let l = f.need("num_layers", s.num_layers);
            let h = f.need("hidden", s.hidden);
            let ff = f.need("ffn", s.ffn);
            let v = f.need("vocab_size", s.vocab_size);
            let p = f.need("max_positions", s.max_positions);
            f.finish()?;
            let embeddings = v * h + p * h + 2 * h;
            let attention = 4 * (h * h + h) + 2 * h;
            let feed_forward = h * ff + ff + ff * h + h + 2 * h;
            let mlm_head = h * h + h + 2 * h + v;
            Ok(embeddings + l * (attention + feed_forward) + mlm_head)
        }
        Component::LanguageAdapters | Component::TaskAdapters => {
            let l = f.need("num_layers", s.num_layers);
            let h = f.need("hidden", s.hidden);
            let (field, r) = if component == Component::LanguageAdapters {
                ("language_reduction", s.language_reduction)
            } else {
                ("task_reduction", s.task_reduction)
            };
            let r = f.need(field, r);
            f.finish()?;
            Ok(l * bottleneck_adapter(h, reduced(h, r, field)?))
        }
        Component::InvertibleAdapter => {
            let h = f.need("hidden", s.hidden);
            let r = f.need("invertible_reduction", s.invertible_reduction);
            let k = f.need("coupling_steps", s.coupling_steps);
            f.finish()?;
            let half = h / 2;
            Ok(k * bottleneck_adapter(half, reduced(half, r, "invertible")?))
        }
        Component::PairHead => {
            let h = f.need("hidden", s.hidden);
            f.finish()?;
            Ok(4 * h + 1)
        }
    }
}

/// Published totals for the base-size model that the efficiency ratios are
/// measured against. Used only for ratio reproduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBudgets {
    pub backbone_pretrain: f64,
    pub finetuned_retrieval_total: f64,
    pub finetuned_pair_total: f64,
    pub adapted_pair_total: f64,
    pub full_model_megabytes: f64,
    pub invertible_target: f64,
}

impl Default for ReferenceBudgets {
    fn default() -> Self {
        ReferenceBudgets {
            backbone_pretrain: 124.65e6,
            finetuned_retrieval_total: 249.3e6,
            finetuned_pair_total: 250.48e6,
            adapted_pair_total: 9.46e6,
            full_model_megabytes: 477.98,
            invertible_target: 0.30e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioTask {
    Retrieval,
    PairClassification,
    Cloze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSet {
    pub task: RatioTask,
    /// Extra parameters of full fine-tuning over the pretrained model,
    /// divided by the extra parameters the task needs with adapters.
    pub task_specific: Option<f64>,
    /// Total fine-tuned parameters divided by total adapter parameters.
    pub overall: f64,
}

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::Numeric(format!("zero denominator in {what} ratio")));
    }
    Ok(num / den)
}

/// `language` is the L-adapter stack including the invertible adapter;
/// `task` the T-adapter stack.
pub fn efficiency_ratios(reference: &ReferenceBudgets, language: u64, task: u64, kind: RatioTask) -> Result<RatioSet> {
    let (l, t) = (language as f64, task as f64);
    let r = reference;
    let (task_specific, overall) = match kind {
        RatioTask::Retrieval => (
            Some(ratio(r.finetuned_retrieval_total - r.backbone_pretrain, t, "retrieval")?),
            ratio(r.finetuned_retrieval_total, l + t, "retrieval overall")?,
        ),
        RatioTask::PairClassification => (
            Some(ratio(r.finetuned_pair_total - r.backbone_pretrain, r.adapted_pair_total - l, "pair")?),
            ratio(r.finetuned_pair_total, r.adapted_pair_total, "pair overall")?,
        ),
        RatioTask::Cloze => (None, ratio(r.backbone_pretrain, l, "cloze overall")?),
    };
    Ok(RatioSet {
        task: kind,
        task_specific,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentBudget {
    pub name: String,
    pub parameters: u64,
    pub megabytes: f64,
    pub percent_of_model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub bytes_per_param: u64,
    pub megabyte_bytes: u64,
    pub components: Vec<ComponentBudget>,
    pub ratios: Vec<RatioSet>,
    pub reference: ReferenceBudgets,
    pub notes: Vec<String>,
}

impl BudgetReport {
    pub fn component(&self, name: &str) -> Option<&ComponentBudget> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn ratio(&self, task: RatioTask) -> Option<&RatioSet> {
        self.ratios.iter().find(|r| r.task == task)
    }

    /// Plain-text table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<18} {:>14} {:>10} {:>9}\n",
            "component", "parameters", "MB", "% model"
        );
        for c in &self.components {
            s += &format!(
                "{:<18} {:>14} {:>10.2} {:>9.2}\n",
                c.name, c.parameters, c.megabytes, c.percent_of_model
            );
        }
        s += &format!("({} bytes/param, 1 MB = {} bytes)\n", self.bytes_per_param, self.megabyte_bytes);
        for r in &self.ratios {
            match r.task_specific {
                Some(t) => s += &format!("{:?}: task-specific {t:.2}x, overall {:.2}x\n", r.task, r.overall),
                None => s += &format!("{:?}: overall {:.2}x\n", r.task, r.overall),
            }
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s
    }
}

pub fn megabytes(count: u64, bytes_per_param: u64) -> f64 {
    (count * bytes_per_param) as f64 / MEGABYTE
}

/// Memory table for `(name, count)` rows, percentages relative to `model`.
pub fn memory_report(rows: &[(&str, u64)], model: u64, bytes_per_param: u64) -> Vec<ComponentBudget> {
    let model_mb = megabytes(model, bytes_per_param);
    rows.iter()
        .map(|&(name, n)| {
            let mb = megabytes(n, bytes_per_param);
            ComponentBudget {
                name: name.to_string(),
                parameters: n,
                megabytes: mb,
                percent_of_model: if model_mb == 0.0 { 0.0 } else { 100.0 * mb / model_mb },
            }
        })
        .collect()
}

/// Full report: component counts, memory and all ratio sets.
pub fn budget_report(spec: &BudgetSpec, reference: &ReferenceBudgets) -> Result<BudgetReport> {
    let backbone = count_parameters(spec, Component::Backbone)?;
    let language = count_parameters(spec, Component::LanguageAdapters)?;
    let invertible = count_parameters(spec, Component::InvertibleAdapter)?;
    let task = count_parameters(spec, Component::TaskAdapters)?;
    let head = count_parameters(spec, Component::PairHead)?;
    let l_stack = language + invertible;
    let rows = [
        ("backbone", backbone),
        ("l_adapters", language),
        ("invertible", invertible),
        ("l_adapter_stack", l_stack),
        ("t_adapter_stack", task),
        ("mode_x", l_stack + task),
        ("pair_head", head),
    ];
    let components = memory_report(&rows, backbone, BYTES_PER_PARAM);
    let ratios = [RatioTask::Retrieval, RatioTask::PairClassification, RatioTask::Cloze]
        .into_iter()
        .map(|k| efficiency_ratios(reference, l_stack, task, k))
        .collect::<Result<_>>()?;
    let notes = vec![
        format!(
            "backbone memory {:.2} MB from {backbone} counted parameters; reference full-model figure is {:.2} MB, which implies {:.0} parameters",
            megabytes(backbone, BYTES_PER_PARAM),
            reference.full_model_megabytes,
            reference.full_model_megabytes * MEGABYTE / BYTES_PER_PARAM as f64
        ),
        format!(
            "ratios use the reference table totals (pretrained {:.2}M, fine-tuned {:.2}M / {:.2}M, adapted pair model {:.2}M)",
            reference.backbone_pretrain / 1e6,
            reference.finetuned_retrieval_total / 1e6,
            reference.finetuned_pair_total / 1e6,
            reference.adapted_pair_total / 1e6
        ),
    ];
    Ok(BudgetReport {
        bytes_per_param: BYTES_PER_PARAM,
        megabyte_bytes: MEGABYTE as u64,
        components,
        ratios,
        reference: reference.clone(),
        notes,
    })
}
