use std::path::Path;

use super::CandidatePool;
use crate::data::{csv_io, fmt_f64, parse_f64};
use crate::error::{Error, Result};

const FIXED: [&str; 5] = ["run_id", "cand_id", "lambda", "label", "final_loss"];

/// Writes `run_id,cand_id,lambda,label,final_loss,x0,…` rows for every pool.
pub fn save_pools(pools: &[CandidatePool], path: &Path) -> Result<()> {
    let d = pools.first().map(|p| p.d).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = FIXED.iter().map(|s| s.to_string()).chain((0..d).map(|j| format!("x{j}"))).collect();
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    let mut rec = Vec::with_capacity(d + FIXED.len());
    for p in pools {
        if p.d != d {
            return Err(Error::Dimension(format!("pool {} has d = {}, expected {d}", p.run_id, p.d)));
        }
        for i in 0..p.len() {
            rec.clear();
            rec.push(p.run_id.to_string());
            rec.push(i.to_string());
            rec.push(fmt_f64(p.lambda[i]));
            rec.push(p.y[i].to_string());
            rec.push(fmt_f64(p.final_loss));
            rec.extend(p.row(i).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pool CSV, grouping consecutive rows by `run_id`.
pub fn load_pools(path: &Path) -> Result<Vec<CandidatePool>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    for (j, want) in FIXED.iter().enumerate() {
        if header.get(j) != Some(want) {
            return Err(Error::parse(path, 1, format!("column {j} must be `{want}`")));
        }
    }
    let d = header.len() - FIXED.len();
    if d == 0 {
        return Err(Error::parse(path, 1, "no feature columns"));
    }
    let mut pools: Vec<CandidatePool> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::parse(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let int = |k: usize| -> Result<i64> {
            rec[k].trim().parse().map_err(|_| Error::parse(path, line, format!("bad integer {:?}", &rec[k])))
        };
        let run_id = int(0)? as usize;
        let lambda = parse_f64(path, line, &rec[2])?;
        let label = int(3)?;
        let final_loss: f64 = rec[4].trim().parse().map_err(|_| Error::parse(path, line, "bad final_loss"))?;
        let start = pools.last().map(|p| p.run_id != run_id).unwrap_or(true);
        if start {
            let mut p = CandidatePool::new(run_id, d, Vec::new(), Vec::new(), Vec::new())?;
            p.final_loss = final_loss;
            pools.push(p);
        }
        let p = pools.last_mut().unwrap();
        p.lambda.push(lambda);
        p.y.push(label);
        for f in rec.iter().skip(FIXED.len()) {
            p.xhat.push(parse_f64(path, line, f)?);
        }
    }
    if pools.is_empty() {
        return Err(Error::parse(path, 1, "pool file has no candidates"));
    }
    Ok(pools)
}

/// Per-run hyperparameters and status as `runs.csv`.
pub fn save_run_summary(pools: &[CandidatePool], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["run_id", "m", "lr", "sigma", "lambda_min", "alpha", "iterations", "seed", "final_loss", "failed"])
        .map_err(|e| csv_io(path, e))?;
    for p in pools {
        let c = p.config.clone().unwrap_or_default();
        w.write_record([
            p.run_id.to_string(),
            p.len().to_string(),
            fmt_f64(c.lr),
            fmt_f64(c.sigma),
            fmt_f64(c.lambda_min),
            fmt_f64(c.alpha),
            c.iterations.to_string(),
            c.seed.to_string(),
            fmt_f64(p.final_loss),
            p.failed.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values() {
        let mut a = CandidatePool::new(0, 2, vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0], vec![0.25, 0.0], vec![1, -1]).unwrap();
        a.final_loss = 12.345678901234567;
        let mut b = CandidatePool::new(3, 2, vec![1.0, 2.0], vec![0.5], vec![1]).unwrap();
        b.final_loss = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        save_pools(&[a.clone(), b.clone()], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("run_id,cand_id,lambda,label,final_loss,x0,x1\n"));
        let back = load_pools(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        std::fs::write(&path, "run_id,cand_id,lambda,label,final_loss,x0\n0,0,0.1,1,2,3\n0,1,0.1,1,2\n").unwrap();
        assert!(matches!(load_pools(&path), Err(Error::Parse { line: 3, .. })));
    }
}
