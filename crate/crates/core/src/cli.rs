//! Config-file driven commands behind the `fqr` binary.
//!
//! Every command reads one TOML file, computes all of its outputs in memory,
//! and only then writes them into the output directory. If any write fails,
//! files already written by the run are removed.
//!
//! Relative paths inside a config file are resolved against the directory
//! containing that file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::curves::{interpolate, load_curves, parse_f64, csv_error, DiscreteCurve, InterpolationRule, DEFAULT_GRID_SIZE};
use crate::error::{FqrError, Result};
use crate::estimator::{fitted_coverage, normal_equation_residual, predict_all_levels, FqrModel, PcaBasis, QuantileIndexSet};
use crate::model_select::{default_candidates, CriterionKind, CutoffScan};
use crate::monotonize::Monotonizer;
use crate::simulate::StudyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Predict,
    Select,
    Simulate,
}

/// Parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub command: Command,
    pub config: PathBuf,
    pub out: PathBuf,
    pub threads: Option<usize>,
    /// Overrides the config seed of `simulate`; the other commands are deterministic without one.
    pub seed: Option<u64>,
}

/// `fit` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub curves: PathBuf,
    pub responses: PathBuf,
    pub levels: Vec<f64>,
    /// Fixed cut-off; when absent, `criterion` picks it.
    pub m: Option<usize>,
    pub criterion: Option<CriterionKind>,
    pub candidates: Option<Vec<usize>>,
    #[serde(default)]
    pub interpolation: InterpolationRule,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

/// `predict` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub model: PathBuf,
    pub curves: PathBuf,
    /// `rearrange`, `isotonize`, `blend` or `blend:λ`; raw predictions only when absent.
    pub monotonize: Option<String>,
}

/// `select` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub curves: PathBuf,
    pub responses: PathBuf,
    pub levels: Vec<f64>,
    pub criterion: Vec<CriterionKind>,
    pub candidates: Option<Vec<usize>>,
    #[serde(default)]
    pub interpolation: InterpolationRule,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

fn default_grid() -> usize {
    DEFAULT_GRID_SIZE
}

/// A file to be written into the output directory.
#[derive(Debug, Clone)]
pub struct Output {
    pub name: &'static str,
    pub contents: String,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| FqrError::Config(format!("{}: {e}", path.display())))
}

fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    match config_path.parent() {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// Reads `subject_id,y` rows.
pub fn load_responses<R: std::io::Read>(source: R) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if headers.len() != 2 || &headers[0] != "subject_id" || &headers[1] != "y" {
        return Err(FqrError::Parse { line: 1, message: "expected header subject_id,y".into() });
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() != 2 {
            return Err(FqrError::Parse { line, message: format!("expected 2 fields, found {}", record.len()) });
        }
        out.push((record[0].to_string(), parse_f64(&record[1], line, "y")?));
    }
    Ok(out)
}

/// Orders responses to match the curves; every id must appear exactly once on both sides.
pub fn join_responses(curves: &[DiscreteCurve], responses: &[(String, f64)]) -> Result<Vec<f64>> {
    let mut by_id: HashMap<&str, f64> = HashMap::with_capacity(responses.len());
    for (id, y) in responses {
        if by_id.insert(id.as_str(), *y).is_some() {
            return Err(FqrError::validation(format!("subject {id} has more than one response")));
        }
    }
    let joined = curves
        .iter()
        .map(|c| {
            by_id
                .get(c.subject_id())
                .copied()
                .ok_or_else(|| FqrError::validation(format!("subject {} has no response", c.subject_id())))
        })
        .collect::<Result<Vec<_>>>()?;
    if responses.len() != curves.len() {
        let known: std::collections::HashSet<&str> = curves.iter().map(|c| c.subject_id()).collect();
        let stray = responses.iter().find(|(id, _)| !known.contains(id.as_str())).map(|(id, _)| id.clone());
        return Err(FqrError::validation(format!("response for unknown subject {}", stray.unwrap_or_default())));
    }
    if joined.iter().any(|y| !y.is_finite()) {
        return Err(FqrError::validation("responses must be finite"));
    }
    Ok(joined)
}

fn load_training(config_path: &Path, curves: &Path, responses: &Path) -> Result<(Vec<DiscreteCurve>, Vec<f64>)> {
    let curves = load_curves(fs::File::open(resolve(config_path, curves))?)?;
    let responses = load_responses(fs::File::open(resolve(config_path, responses))?)?;
    let joined = join_responses(&curves, &responses)?;
    Ok((curves, joined))
}

fn basis_for(curves: &[DiscreteCurve], rule: InterpolationRule, grid_size: usize, max_m: usize) -> Result<PcaBasis> {
    let grid = curves.iter().map(|c| interpolate(c, rule, grid_size)).collect::<Result<Vec<_>>>()?;
    PcaBasis::from_grid_up_to(grid, rule, max_m)
}

fn scan_candidates(basis: &PcaBasis, candidates: &Option<Vec<usize>>) -> Vec<usize> {
    candidates.clone().unwrap_or_else(|| default_candidates(basis.n(), basis.max_m()))
}

#[derive(Debug, Clone, Serialize)]
struct LevelDiagnostics {
    level: f64,
    objective: f64,
    subgradient_norm: f64,
    certificate_bound: f64,
    normal_equation_residual: f64,
    coverage: f64,
    duality_gap: f64,
    iterations: usize,
}

fn diagnostics(model: &FqrModel) -> Result<Vec<LevelDiagnostics>> {
    model
        .levels()
        .levels()
        .iter()
        .zip(model.fits())
        .map(|(&u, fit)| {
            Ok(LevelDiagnostics {
                level: u,
                objective: fit.objective,
                subgradient_norm: fit.subgradient_norm,
                certificate_bound: fit.certificate_bound,
                normal_equation_residual: normal_equation_residual(model, u)?,
                coverage: fitted_coverage(model, u)?,
                duality_gap: fit.duality_gap,
                iterations: fit.iterations,
            })
        })
        .collect()
}

fn diagnostics_csv(rows: &[LevelDiagnostics]) -> String {
    let mut out = String::from(
        "level,objective,subgradient_norm,certificate_bound,normal_equation_residual,coverage,duality_gap,iterations\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.level,
            r.objective,
            r.subgradient_norm,
            r.certificate_bound,
            r.normal_equation_residual,
            r.coverage,
            r.duality_gap,
            r.iterations
        );
    }
    out
}

/// Fits a model at a fixed or criterion-selected cut-off.
pub fn run_fit(config_path: &Path) -> Result<Vec<Output>> {
    let cfg: FitConfig = read_config(config_path)?;
    let levels = QuantileIndexSet::new(cfg.levels.clone())?;
    let (curves, responses) = load_training(config_path, &cfg.curves, &cfg.responses)?;
    let (model, selection) = match (cfg.m, cfg.criterion) {
        (Some(m), None) => {
            if curves.len() < m + 2 {
                return Err(FqrError::validation(format!("n = {} must be at least m + 2 = {}", curves.len(), m + 2)));
            }
            let basis = basis_for(&curves, cfg.interpolation, cfg.grid_size, m)?;
            if m > basis.max_m() {
                return Err(FqrError::validation(format!("m = {m} exceeds the {} usable components", basis.max_m())));
            }
            (basis.fit(&responses, &levels, m)?, None)
        }
        (None, Some(kind)) => {
            let max_candidate = cfg.candidates.as_ref().and_then(|c| c.iter().copied().max()).unwrap_or(usize::MAX);
            let basis = basis_for(&curves, cfg.interpolation, cfg.grid_size, max_candidate)?;
            let candidates = scan_candidates(&basis, &cfg.candidates);
            let selection = CutoffScan::run(&basis, &responses, &levels, &candidates)?.select(kind)?;
            (basis.fit(&responses, &levels, selection.m)?, Some(selection))
        }
        _ => return Err(FqrError::Config("fit config needs exactly one of `m` and `criterion`".into())),
    };
    let rows = diagnostics(&model)?;
    let report = json!({
        "command": "fit",
        "n": curves.len(),
        "m": model.m(),
        "selection": selection,
        "levels": rows,
    });
    Ok(vec![
        Output { name: "model.json", contents: model.to_json()? },
        Output { name: "report.csv", contents: diagnostics_csv(&rows) },
        Output { name: "report.json", contents: serde_json::to_string_pretty(&report)? },
    ])
}

/// Predicts quantile curves for new subjects, optionally monotonized.
pub fn run_predict(config_path: &Path) -> Result<Vec<Output>> {
    let cfg: PredictConfig = read_config(config_path)?;
    let model = FqrModel::from_json(&fs::read_to_string(resolve(config_path, &cfg.model))?)?;
    let monotonizer = cfg.monotonize.as_deref().map(str::parse::<Monotonizer>).transpose()?;
    let curves = load_curves(fs::File::open(resolve(config_path, &cfg.curves))?)?;
    let mut csv = String::from("subject_id,level,quantile,monotone\n");
    let mut subjects = Vec::with_capacity(curves.len());
    for c in &curves {
        let x = interpolate(c, model.rule(), model.grid_size())?;
        let raw = predict_all_levels(&model, &x)?;
        let fixed = monotonizer.map(|m| m.apply(&raw)).transpose()?;
        for (k, (&u, q)) in raw.levels().levels().iter().zip(raw.values()).enumerate() {
            let mono = fixed.as_ref().map(|f| format!("{:.16e}", f.values()[k])).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{:.16e},{}", c.subject_id(), u, q, mono);
        }
        subjects.push(json!({
            "subject_id": c.subject_id(),
            "quantiles": raw.values(),
            "monotone": fixed.as_ref().map(|f| f.values().to_vec()),
            "crossing": !raw.is_nondecreasing(),
        }));
    }
    let report = json!({
        "command": "predict",
        "levels": model.levels().levels(),
        "monotonizer": monotonizer,
        "subjects": subjects,
    });
    Ok(vec![
        Output { name: "report.csv", contents: csv },
        Output { name: "report.json", contents: serde_json::to_string_pretty(&report)? },
    ])
}

/// Scans candidate cut-offs under one or more criteria; the model is fitted at
/// the cut-off chosen by the first criterion listed.
pub fn run_select(config_path: &Path) -> Result<Vec<Output>> {
    let cfg: SelectConfig = read_config(config_path)?;
    if cfg.criterion.is_empty() {
        return Err(FqrError::Config("select config needs at least one criterion".into()));
    }
    let levels = QuantileIndexSet::new(cfg.levels.clone())?;
    let (curves, responses) = load_training(config_path, &cfg.curves, &cfg.responses)?;
    let max_candidate = cfg.candidates.as_ref().and_then(|c| c.iter().copied().max()).unwrap_or(usize::MAX);
    let basis = basis_for(&curves, cfg.interpolation, cfg.grid_size, max_candidate)?;
    let candidates = scan_candidates(&basis, &cfg.candidates);
    let scan = CutoffScan::run(&basis, &responses, &levels, &candidates)?;
    let selections = cfg.criterion.iter().map(|&k| scan.select(k)).collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("criterion,m,level,criterion_value\n");
    for &kind in &cfg.criterion {
        for line in scan.to_csv(kind).lines().skip(1) {
            let _ = writeln!(csv, "{},{}", kind.as_str(), line);
        }
    }
    let model = basis.fit(&responses, &levels, selections[0].m)?;
    let report = json!({
        "command": "select",
        "n": curves.len(),
        "candidates": candidates,
        "selections": selections,
    });
    Ok(vec![
        Output { name: "model.json", contents: model.to_json()? },
        Output { name: "report.csv", contents: csv },
        Output { name: "report.json", contents: serde_json::to_string_pretty(&report)? },
    ])
}

/// Runs a Monte Carlo study; `seed` replaces the config seed when given.
pub fn run_simulate(config_path: &Path, seed: Option<u64>) -> Result<Vec<Output>> {
    let text = fs::read_to_string(config_path)?;
    let mut cfg = StudyConfig::from_toml(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let report = cfg.run()?;
    let rates = if cfg.rate_check { Some(cfg.rate_fits(&report)?) } else { None };
    let doc = json!({
        "command": "simulate",
        "seed": cfg.seed,
        "report": report,
        "rate_check": rates,
    });
    Ok(vec![
        Output { name: "report.csv", contents: report.to_csv() },
        Output { name: "report.json", contents: serde_json::to_string_pretty(&doc)? },
    ])
}

/// Writes every output, or none: on failure the files written so far are removed.
pub fn write_outputs(dir: &Path, outputs: &[Output]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for o in outputs {
        let path = dir.join(o.name);
        let tmp = dir.join(format!(".{}.partial", o.name));
        let result = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(o.contents.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(written)
}

/// Runs a command end to end.
pub fn run(cli: &CliConfig) -> Result<Vec<PathBuf>> {
    let go = || -> Result<Vec<PathBuf>> {
        let outputs = match cli.command {
            Command::Fit => run_fit(&cli.config)?,
            Command::Predict => run_predict(&cli.config)?,
            Command::Select => run_select(&cli.config)?,
            Command::Simulate => run_simulate(&cli.config, cli.seed)?,
        };
        write_outputs(&cli.out, &outputs)
    };
    match cli.threads {
        Some(0) => Err(FqrError::validation("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FqrError::Config(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// `{"error": {"kind": ..., "message": ...}}`.
pub fn error_json(e: &FqrError) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(id: &str) -> DiscreteCurve {
        DiscreteCurve::new(id, vec![0.0, 1.0], vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn join_orders_by_curve() {
        let curves = vec![curve("a"), curve("b")];
        let resp = vec![("b".to_string(), 2.0), ("a".to_string(), 1.0)];
        assert_eq!(join_responses(&curves, &resp).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn join_rejects_mismatches() {
        let curves = vec![curve("a"), curve("b")];
        let missing = vec![("a".to_string(), 1.0)];
        assert!(matches!(join_responses(&curves, &missing), Err(FqrError::Validation(_))));
        let stray = vec![("a".to_string(), 1.0), ("b".to_string(), 1.0), ("c".to_string(), 1.0)];
        assert!(matches!(join_responses(&curves, &stray), Err(FqrError::Validation(_))));
        let dup = vec![("a".to_string(), 1.0), ("a".to_string(), 1.0)];
        assert!(matches!(join_responses(&curves, &dup), Err(FqrError::Validation(_))));
    }

    #[test]
    fn response_parsing() {
        let rows = load_responses("subject_id,y\na,1.5\nb,-2\n".as_bytes()).unwrap();
        assert_eq!(rows, vec![("a".to_string(), 1.5), ("b".to_string(), -2.0)]);
        assert!(matches!(load_responses("id,y\n".as_bytes()), Err(FqrError::Parse { line: 1, .. })));
        assert!(matches!(load_responses("subject_id,y\na,x\n".as_bytes()), Err(FqrError::Parse { line: 2, .. })));
    }

    #[test]
    fn error_document_shape() {
        let doc: serde_json::Value = serde_json::from_str(&error_json(&FqrError::validation("bad m"))).unwrap();
        assert_eq!(doc["error"]["kind"], "validation");
        assert!(doc["error"]["message"].as_str().unwrap().contains("bad m"));
    }
}
