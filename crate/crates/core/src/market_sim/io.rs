//! CSV serialization of impression logs and the ground-truth sidecar.

use std::io::{Read, Write};

use super::{GroundTruth, ImpressionLog, ImpressionRow, SimError};

pub fn write_log_csv<W: Write>(log: &ImpressionLog, w: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in &log.rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_log_csv<R: Read>(r: R, n_ads: usize) -> Result<ImpressionLog, SimError> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<Result<Vec<ImpressionRow>, _>>()?;
    Ok(ImpressionLog { n_ads, rows })
}

/// Columns: `impression_id, propensity_0.., true_ctr_0..`.
pub fn write_truth_csv<W: Write>(log: &ImpressionLog, truth: &GroundTruth, w: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["impression_id".to_string()];
    header.extend((0..log.n_ads).map(|a| format!("propensity_{a}")));
    header.extend((0..log.n_ads).map(|a| format!("true_ctr_{a}")));
    wtr.write_record(&header)?;
    for (i, row) in log.rows.iter().enumerate() {
        let mut rec = vec![row.impression_id.to_string()];
        rec.extend(truth.propensities[i].iter().map(|p| p.to_string()));
        rec.extend(truth.ctrs[i].iter().map(|p| p.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(r: R) -> Result<GroundTruth, SimError> {
    let mut rdr = csv::Reader::from_reader(r);
    let n_cols = rdr.headers()?.len();
    if n_cols < 3 || (n_cols - 1) % 2 != 0 {
        return Err(SimError::Io(format!("unexpected ground-truth column count {n_cols}")));
    }
    let n_ads = (n_cols - 1) / 2;
    let mut gt = GroundTruth::default();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| SimError::Io(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        gt.propensities.push(vals[..n_ads].to_vec());
        gt.ctrs.push(vals[n_ads..].to_vec());
    }
    Ok(gt)
}
