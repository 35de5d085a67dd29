//! Side-by-side runs of several noise settings from one base configuration.
//!
//! Every setting trains from the same initial parameters over the same batch
//! order, then reports final clean eval loss, the median curvature probe on
//! the eval set, and length and 2-gram repetition of greedy generations for
//! the eval prompts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, TokenizedExample};
use crate::model::{self, Decoding, ModelConfig, ModelParams};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::probe::{self, ProbeConfig};
use crate::textmetrics;
use crate::trainer::{self, StepSink, TrainConfig};
use crate::Error as CrateError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSetting {
    pub kind: NoiseKind,
    pub alpha: f64,
}

impl NoiseSetting {
    /// Row label in the style of the usual ablation tables.
    pub fn label(&self) -> String {
        let name = match self.kind {
            NoiseKind::None => return "baseline (no noise)".to_string(),
            NoiseKind::Uniform => "NEFT",
            NoiseKind::Gaussian => "Gaussian",
            NoiseKind::Bernoulli => "Bernoulli",
            NoiseKind::SymmetricBernoulli => "SymNoise",
        };
        format!("+{name} Noise {}", self.alpha)
    }
}

impl fmt::Display for NoiseSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::None => f.write_str("none"),
            NoiseKind::SymmetricBernoulli => write!(f, "symnoise:{}", self.alpha),
            kind => write!(f, "{kind}:{}", self.alpha),
        }
    }
}

impl FromStr for NoiseSetting {
    type Err = String;

    /// `none`, or `kind:alpha` such as `uniform:10` or `symnoise:5`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, alpha) = match s.split_once(':') {
            Some((k, a)) => (k, a.parse::<f64>().map_err(|e| format!("bad alpha in `{s}`: {e}"))?),
            None if s == "none" => ("none", 0.0),
            None => return Err(format!("noise setting `{s}` needs the form kind:alpha")),
        };
        let kind: NoiseKind = kind.parse().map_err(|e: crate::noise::NoiseError| e.to_string())?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(format!("alpha must be non-negative in `{s}`"));
        }
        Ok(Self { kind, alpha })
    }
}

/// Parses a comma-separated list of settings.
pub fn parse_settings(list: &str) -> Result<Vec<NoiseSetting>, String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

/// The seven settings of the standard comparison.
pub fn standard_settings() -> Vec<NoiseSetting> {
    parse_settings("none,uniform:5,uniform:10,uniform:15,gaussian:5,bernoulli:5,symnoise:5").expect("valid list")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// Base training config; its noise kind and alpha are replaced per row.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub max_new_tokens: usize,
    /// Word budget for the repetition statistic.
    pub k_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub label: String,
    pub final_eval_loss: f64,
    pub probe_median: f64,
    pub mean_generation_chars: f64,
    /// `None` when no generation reaches `k_words` words.
    pub repetition_2gram: Option<f64>,
}

#[derive(Debug, Error)]
#[error("setting `{setting}` failed after {} completed rows: {source}", completed.len())]
pub struct AblationError {
    pub setting: String,
    pub completed: Vec<AblationRow>,
    #[source]
    pub source: CrateError,
}

/// Trains, probes and samples one setting.
pub fn run_setting(
    config: &AblationConfig,
    setting: &NoiseSetting,
    train: &[TokenizedExample],
    eval: &[TokenizedExample],
    log: &mut dyn StepSink,
) -> Result<AblationRow, CrateError> {
    let mut train_config = config.train.clone();
    train_config.noise = NoiseSpec::new(setting.kind, setting.alpha, config.train.noise.seed)?;
    let init = ModelParams::init(&config.model)?;
    let state = trainer::train_loop(&train_config, train, eval, init, log, None)?;
    let eval_set = if eval.is_empty() { train } else { eval };
    let final_eval_loss = trainer::evaluate(&state.params, eval_set, train_config.batch_size)?;
    let report = probe::probe_model(&state.params, eval_set, &config.probe)?;
    let responses = eval_set
        .iter()
        .map(|ex| {
            let out = model::generate(&state.params, ex.prompt(), config.max_new_tokens, Decoding::Greedy, 0)?;
            Ok(data::decode(&out[ex.prompt().len()..]))
        })
        .collect::<Result<Vec<String>, CrateError>>()?;
    let (mean_generation_chars, _) = textmetrics::length_stats(&responses)?;
    let repetition_2gram = match textmetrics::corpus_report(&responses, config.k_words) {
        Ok(r) => Some(r.diversity.repetition[0]),
        Err(textmetrics::MetricsError::AllExcluded { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(AblationRow {
        setting: setting.to_string(),
        label: setting.label(),
        final_eval_loss,
        probe_median: report.median,
        mean_generation_chars,
        repetition_2gram,
    })
}

/// Runs settings in order, handing each finished row to `on_row`. On failure
/// the rows finished so far travel with the error.
pub fn run_ablation(
    config: &AblationConfig,
    settings: &[NoiseSetting],
    train: &[TokenizedExample],
    eval: &[TokenizedExample],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, AblationError> {
    let mut rows = Vec::new();
    for setting in settings {
        match run_setting(config, setting, train, eval, &mut trainer::NoLog) {
            Ok(row) => {
                on_row(&row);
                rows.push(row);
            }
            Err(source) => {
                return Err(AblationError {
                    setting: setting.to_string(),
                    completed: rows,
                    source,
                })
            }
        }
    }
    Ok(rows)
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<22} {:>12} {:>14} {:>12} {:>12}\n",
        "setting", "eval loss", "probe median", "gen chars", "2-gram rep %"
    );
    for r in rows {
        let rep = r
            .repetition_2gram
            .map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        out.push_str(&format!(
            "{:<22} {:>12.4} {:>14.4e} {:>12.2} {:>12}\n",
            r.label, r.final_eval_loss, r.probe_median, r.mean_generation_chars, rep
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_and_label() {
        let all = standard_settings();
        assert_eq!(all.len(), 7);
        assert_eq!(all[0].label(), "baseline (no noise)");
        assert_eq!(all[2].label(), "+NEFT Noise 10");
        assert_eq!(all[6].label(), "+SymNoise Noise 5");
        for s in &all {
            assert_eq!(s.to_string().parse::<NoiseSetting>().unwrap(), *s);
        }
        assert!("uniform".parse::<NoiseSetting>().is_err());
        assert!("uniform:-1".parse::<NoiseSetting>().is_err());
        assert!("laplace:5".parse::<NoiseSetting>().is_err());
    }
}
