use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{loss_endpoints, pretrain, Datasets, PretrainOptions};
use crate::config::{RunConfig, KEYS};
use crate::error::{Error, Result};
use crate::eval::{probe_state, FeatureSource, ProbeOptions};

pub const ABLATION_HEADER: &str =
    "variant,key,value,seed,final_loss,norm_A,norm_m_tilde,acc_last_layer,acc_last4,best,status";

/// One config key and the values it takes across variants.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

/// Maps short sweep names to config keys.
pub fn resolve_key(key: &str) -> Result<String> {
    let full = match key {
        "sigma" => "stop.sigma",
        "embed" | "embed_kind" => "stop.embed_kind",
        "noise" | "noise_target" => "stop.noise_target",
        "reg" => "optim.reg",
        "reg_coeff" => "optim.reg_coeff",
        other => other,
    };
    if KEYS.iter().any(|(k, _)| *k == full) {
        Ok(full.to_string())
    } else {
        Err(Error::Config(format!("unknown sweep key '{key}'")))
    }
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep(spec: &str) -> Result<Sweep> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep '{spec}' is not key=v1,v2,...")))?;
    let values: Vec<String> = vs
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("sweep '{spec}' lists no values")));
    }
    Ok(Sweep {
        key: resolve_key(k.trim())?,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub key: String,
    pub value: String,
    pub seed: u64,
    pub final_loss: f64,
    pub norm_a: f64,
    pub norm_m_tilde: f64,
    pub acc_last_layer: f64,
    pub acc_last4: Option<f64>,
    /// Better of the two probe accuracies.
    pub best: f64,
    /// `ok` or the error that stopped the variant.
    pub status: String,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let last4 = self.acc_last4.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.key,
            self.value,
            self.seed,
            self.final_loss,
            self.norm_a,
            self.norm_m_tilde,
            self.acc_last_layer,
            last4,
            self.best,
            self.status.replace(',', ";")
        )
    }
}

fn run_variant(cfg: &RunConfig, data: &Datasets, run_dir: Option<&Path>) -> Result<(f64, f64, f64, f64, Option<f64>)> {
    let out = pretrain(
        cfg,
        &data.train,
        &PretrainOptions {
            run_dir: run_dir.map(Path::to_path_buf),
            ..Default::default()
        },
    )?;
    let (_, final_loss) = loss_endpoints(&out.metrics, 10);
    let opts = ProbeOptions {
        epochs: cfg.eval.epochs,
        lr: cfg.eval.lr,
        l2: cfg.eval.l2,
    };
    let last = probe_state(&out.state, &data.train, &data.test, FeatureSource::LastLayer, &opts)?.test_acc;
    let last4 = if cfg.model.encoder.depth >= 4 {
        Some(probe_state(&out.state, &data.train, &data.test, FeatureSource::Last4, &opts)?.test_acc)
    } else {
        None
    };
    Ok((
        final_loss,
        out.state.a().norm(),
        out.state.m_tilde().norm(),
        last,
        last4,
    ))
}

/// Trains and probes one variant per sweep value and seed. A failing
/// variant is recorded in its row and the suite moves on.
pub fn run_ablation_suite(
    base: &RunConfig,
    sweep: &Sweep,
    seeds: &[u64],
    data: &Datasets,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for value in &sweep.values {
        for &seed in seeds {
            let short = sweep.key.rsplit('.').next().unwrap_or(&sweep.key);
            let variant = format!("{short}={value}");
            let mut row = AblationRow {
                variant: variant.clone(),
                key: sweep.key.clone(),
                value: value.clone(),
                seed,
                final_loss: f64::NAN,
                norm_a: f64::NAN,
                norm_m_tilde: f64::NAN,
                acc_last_layer: f64::NAN,
                acc_last4: None,
                best: f64::NAN,
                status: "ok".into(),
            };
            let mut cfg = base.clone();
            let result = cfg
                .set(&sweep.key, value)
                .and_then(|_| cfg.set("train.seed", &seed.to_string()))
                .and_then(|_| cfg.validate())
                .and_then(|_| {
                    let dir = out_dir.map(|d| d.join(format!("{short}_{value}_seed{seed}")));
                    run_variant(&cfg, data, dir.as_deref())
                });
            match result {
                Ok((loss, na, nm, last, last4)) => {
                    row.final_loss = loss;
                    row.norm_a = na;
                    row.norm_m_tilde = nm;
                    row.acc_last_layer = last;
                    row.acc_last4 = last4;
                    row.best = last4.map_or(last, |l4| l4.max(last));
                }
                Err(e) => row.status = format!("error: {e}"),
            }
            rows.push(row);
        }
    }
    if let Some(dir) = out_dir {
        write_ablation_csv(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(text, "{}", r.csv_line());
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s = parse_sweep("sigma=0,0.1,0.25,0.5").unwrap();
        assert_eq!(s.key, "stop.sigma");
        assert_eq!(s.values.len(), 4);
        assert_eq!(
            parse_sweep("stop.noise_target=none,both").unwrap().key,
            "stop.noise_target"
        );
        assert!(parse_sweep("bogus=1").is_err());
        assert!(parse_sweep("sigma").is_err());
        assert!(parse_sweep("sigma=").is_err());
    }
}
