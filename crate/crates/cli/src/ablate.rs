//! On/off sweep over the consistency modules with a shared seed and budget.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use segcotrain_core::trainer::run as run_training;
use segcotrain_core::{RunOptions, Toggles};
use serde_json::json;

use crate::{exit_code, load_dataset, resolve_config, AblateArgs, PartialFailure};

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct Row {
    pub toggles: Toggles,
    pub outcome: std::result::Result<(f64, Option<f64>), String>,
}

/// Every on/off pattern of `modules` (others off), all-off first.
pub fn combinations(modules: &[String]) -> Vec<Toggles> {
    let names: Vec<&str> = if modules.is_empty() {
        vec!["mcpc", "cfc", "cmd"]
    } else {
        ["mcpc", "cfc", "cmd"].into_iter().filter(|m| modules.iter().any(|s| s == m)).collect()
    };
    (0..1u32 << names.len())
        .map(|bits| {
            let on = |m: &str| names.iter().position(|n| *n == m).is_some_and(|i| bits & (1 << i) != 0);
            Toggles {
                mcpc: on("mcpc"),
                cfc: on("cfc"),
                cmd: on("cmd"),
            }
        })
        .collect()
}

pub fn table(rows: &[Row]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = format!("{:^6}{:^6}{:^6} {:>9} {:>9}\n", "MCPC", "CFC", "CMD", "Avg.Dice", "Avg.ASD");
    for r in rows {
        let t = r.toggles;
        let _ = write!(s, "{:^6}{:^6}{:^6}", mark(t.mcpc), mark(t.cfc), mark(t.cmd));
        let _ = match &r.outcome {
            Ok((d, a)) => writeln!(s, " {:>9.4} {:>9}", d, a.map_or("n/a".into(), |v| format!("{v:.3}"))),
            Err(e) => writeln!(s, " FAILED: {e}"),
        };
    }
    s
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = resolve_config(&a.run)?;
    let data = load_dataset(a.run.manifest.as_deref(), base.network.num_classes)?;
    if data.val.is_empty() {
        return Err(crate::usage("ablation needs a validation split in the manifest"));
    }
    fs::create_dir_all(&a.run.out).with_context(|| format!("creating {}", a.run.out.display()))?;

    let mut rows = Vec::new();
    for toggles in combinations(&a.subset) {
        let cfg = segcotrain_core::TrainConfig {
            toggles,
            ..base.clone()
        };
        let opts = RunOptions {
            out_dir: a.run.out.join(toggles.label()),
            resume: None,
        };
        log::info!("ablation run `{}`", toggles.label());
        let outcome = match run_training(&cfg, &data, &opts) {
            Ok(summary) => {
                let r = summary.final_report.expect("validation split is non-empty");
                Ok((r.avg_dice, r.avg_asd))
            }
            Err(e) => {
                let e = anyhow::Error::from(e);
                log::warn!("run `{}` failed (exit {}): {e:#}", toggles.label(), exit_code(&e));
                Err(format!("{e:#}"))
            }
        };
        rows.push(Row { toggles, outcome });
    }

    let text = table(&rows);
    print!("{text}");
    let records: Vec<_> = rows
        .iter()
        .map(|r| {
            let t = r.toggles;
            let mut v = json!({"label": t.label(), "mcpc": t.mcpc, "cfc": t.cfc, "cmd": t.cmd});
            match &r.outcome {
                Ok((d, asd)) => {
                    v["avg_dice"] = json!(d);
                    v["avg_asd"] = json!(asd);
                }
                Err(e) => v["error"] = json!(e),
            }
            v
        })
        .collect();
    let txt = a.run.out.join("ablation.txt");
    fs::write(&txt, &text).with_context(|| format!("writing {}", txt.display()))?;
    let js = a.run.out.join("ablation.json");
    fs::write(&js, serde_json::to_string_pretty(&records)?).with_context(|| format!("writing {}", js.display()))?;

    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(PartialFailure {
            failed,
            total: rows.len(),
        }
        .into());
    }
    Ok(())
}
