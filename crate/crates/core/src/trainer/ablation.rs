use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{pretrain, PretrainOutputs, TrainConfig, TrainError};
use crate::corpus::CorpusRecord;
use crate::model::{CmlFormer, CouplingMode, ModelConfig, ParameterBreakdown};
use crate::objectives::Objective;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub mode: CouplingMode,
    pub parameters: ParameterBreakdown,
    pub log: super::LossLog,
    pub loss_csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// All modes' loss rows, with a leading `mode` column.
    pub merged_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Trains the same config and seed once per coupling mode and writes
/// `loss_<mode>.csv`, `ablation_losses.csv` and `ablation_summary.json`.
pub fn ablate_coupling(
    base: &ModelConfig,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationReport, TrainError> {
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir.display().to_string(), e))?;
    let mut runs = Vec::with_capacity(3);
    for mode in CouplingMode::ALL {
        let model = CmlFormer::new(base.clone().with_coupling(mode))?;
        let outputs = PretrainOutputs {
            checkpoint: out_dir.join(format!("model_{}.ckpt", mode.short_name())),
            loss_csv: out_dir.join(format!("loss_{}.csv", mode.short_name())),
        };
        log::info!("ablation: coupling {mode}");
        let result = pretrain(&model, vocab, records, cfg, None, Some(&outputs))?;
        runs.push(AblationRun {
            mode,
            parameters: model.parameter_breakdown(),
            log: result.log,
            loss_csv: outputs.loss_csv,
        });
    }

    let mut merged = String::from("mode,epoch,mlm,spp,btsp,biltm,tlc,cmi,total\n");
    for run in &runs {
        for e in &run.log.epochs {
            let l = &e.losses;
            let _ = writeln!(
                merged,
                "{},{},{},{},{},{},{},{},{}",
                run.mode, e.epoch, l.mlm, l.spp, l.btsp, l.biltm, l.tlc, l.cmi, l.total
            );
        }
    }
    let merged_csv = out_dir.join("ablation_losses.csv");
    fs::write(&merged_csv, merged).map_err(|e| TrainError::io(merged_csv.display().to_string(), e))?;

    let summary = json!({
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "objectives": cfg.weights.enabled_objectives().iter().map(|o| o.name()).collect::<Vec<_>>(),
        "runs": runs.iter().map(|r| {
            let last = r.log.epochs.last().map(|e| e.losses);
            json!({
                "mode": r.mode.short_name(),
                "parameters": {
                    "total": r.parameters.total,
                    "encoder": r.parameters.encoder,
                    "decoders": r.parameters.decoders,
                    "cross_decoder": r.parameters.cross_decoder,
                    "heads": r.parameters.heads,
                },
                "final_losses": last.map(|l| {
                    let mut m = serde_json::Map::new();
                    for o in Objective::ALL {
                        m.insert(o.name().into(), json!(l.get(o)));
                    }
                    m.insert("total".into(), json!(l.total));
                    m
                }),
                "loss_csv": r.loss_csv.file_name().map(|n| n.to_string_lossy().into_owned()),
            })
        }).collect::<Vec<_>>(),
    });
    let summary_json = out_dir.join("ablation_summary.json");
    fs::write(&summary_json, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| TrainError::io(summary_json.display().to_string(), e))?;
    Ok(AblationReport { runs, merged_csv, summary_json })
}
