use std::path::Path;

use crate::csvio::{fmt_e8, write_table};
use crate::error::Result;

use super::mmd::MisspecResult;
use super::workflow::{RecoveryReport, SbcResult};

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| (*c).to_owned()).collect()
}

/// `param,true,post_mean,post_sd`, one row per simulation and parameter.
pub fn write_recovery_csv(path: &Path, r: &RecoveryReport) -> Result<()> {
    let mut rows = Vec::with_capacity(r.truth.numel());
    for i in 0..r.truth.rows() {
        for (j, name) in r.param_names.iter().enumerate() {
            rows.push(vec![
                name.clone(),
                fmt_e8(r.truth.at(i, j)),
                fmt_e8(r.post_mean.at(i, j)),
                fmt_e8(r.post_sd.at(i, j)),
            ]);
        }
    }
    write_table(path, &header(&["param", "true", "post_mean", "post_sd"]), &rows)
}

/// `param,rank`, one row per simulation and parameter.
pub fn write_sbc_ranks_csv(path: &Path, s: &SbcResult) -> Result<()> {
    let rows: Vec<Vec<String>> = s
        .param_names
        .iter()
        .zip(&s.ranks)
        .flat_map(|(name, ranks)| ranks.iter().map(move |r| vec![name.clone(), r.to_string()]))
        .collect();
    write_table(path, &header(&["param", "rank"]), &rows)
}

/// `param,chi2,p`
pub fn write_sbc_test_csv(path: &Path, s: &SbcResult) -> Result<()> {
    let rows: Vec<Vec<String>> = s
        .param_names
        .iter()
        .zip(s.chi2.iter().zip(&s.p_value))
        .map(|(name, (c, p))| vec![name.clone(), fmt_e8(*c), fmt_e8(*p)])
        .collect();
    write_table(path, &header(&["param", "chi2", "p"]), &rows)
}

/// `observed_mmd2,p,bandwidth,null_0,…,null_{M−1}` as a single row.
pub fn write_misspec_csv(path: &Path, m: &MisspecResult) -> Result<()> {
    let mut head = header(&["observed_mmd2", "p", "bandwidth"]);
    head.extend((0..m.null_mmd2.len()).map(|i| format!("null_{i}")));
    let mut row = vec![fmt_e8(m.observed_mmd2), fmt_e8(m.p_value), fmt_e8(m.bandwidth)];
    row.extend(m.null_mmd2.iter().map(|v| fmt_e8(*v)));
    write_table(path, &head, &[row])
}

/// `param,contraction`
pub fn write_contraction_csv(path: &Path, names: &[String], contraction: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(contraction)
        .map(|(n, c)| vec![n.clone(), fmt_e8(*c)])
        .collect();
    write_table(path, &header(&["param", "contraction"]), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csvio::{parse_f64, read_table};
    use crate::tensor::Tensor;

    #[test]
    fn tables_reparse() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = RecoveryReport::from_estimates(vec!["a".into(), "b".into()], t.clone(), t.clone(), t).unwrap();
        let p = dir.path().join("recovery.csv");
        write_recovery_csv(&p, &r).unwrap();
        let (h, rows) = read_table(&p).unwrap();
        assert_eq!(h, ["param", "true", "post_mean", "post_sd"]);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1][0], "b");
        assert_eq!(parse_f64(&rows[2][1]).unwrap(), 0.3);

        let m = MisspecResult {
            observed_mmd2: -1e-3,
            null_mmd2: vec![0.5, 0.25],
            p_value: 1.0,
            bandwidth: 2.0,
        };
        let p = dir.path().join("misspec.csv");
        write_misspec_csv(&p, &m).unwrap();
        let (h, rows) = read_table(&p).unwrap();
        assert_eq!(h, ["observed_mmd2", "p", "bandwidth", "null_0", "null_1"]);
        assert_eq!(rows[0][0], "-1.00000000e-03");
    }
}
