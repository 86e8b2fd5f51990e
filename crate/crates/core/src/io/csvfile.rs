use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RaptError, Result};
use crate::trajectory::TrajectoryLog;

/// Writes `t,obs_0..obs_{d-1}[,act_0..act_{k-1}]`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_trajectory<W: Write>(log: &TrajectoryLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..log.d_obs()).map(|i| format!("obs_{i}")));
    header.extend((0..log.d_act()).map(|i| format!("act_{i}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for t in 0..log.len() {
        row.clear();
        row.push(log.times()[t].to_string());
        row.extend(log.obs(t).iter().map(f64::to_string));
        if let Some(a) = log.action(t) {
            row.extend(a.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> RaptError {
    RaptError::Input(msg.into())
}

/// Parses a trajectory CSV, enforcing the header layout, a constant column
/// count, finite cells and strictly increasing `t`.
pub fn read_trajectory<R: Read>(input: R) -> Result<TrajectoryLog> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") {
        return Err(bad("trajectory header must start with `t`"));
    }
    let d_obs = header.iter().skip(1).take_while(|h| h.starts_with("obs_")).count();
    let d_act = header.len() - 1 - d_obs;
    for (k, h) in header.iter().skip(1).enumerate() {
        let want = if k < d_obs { format!("obs_{k}") } else { format!("act_{}", k - d_obs) };
        if h != want {
            return Err(bad(format!("unexpected column {h:?}, expected {want:?}")));
        }
    }
    if d_obs == 0 {
        return Err(bad("trajectory has no observation columns"));
    }
    let mut log = TrajectoryLog::new(d_obs, d_act);
    let mut obs = vec![0.0; d_obs];
    let mut act = vec![0.0; d_act];
    let mut prev_t = f64::NEG_INFINITY;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let cell = |k: usize| -> Result<f64> {
            let s = rec.get(k).unwrap_or("");
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {row}, column {k}: {s:?} is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("row {row}, column {k}: non-finite value")));
            }
            Ok(v)
        };
        let t = cell(0)?;
        if t <= prev_t {
            return Err(bad(format!("row {row}: t={t} does not increase")));
        }
        prev_t = t;
        for (i, o) in obs.iter_mut().enumerate() {
            *o = cell(1 + i)?;
        }
        for (i, a) in act.iter_mut().enumerate() {
            *a = cell(1 + d_obs + i)?;
        }
        log.push(t, &obs, (d_act > 0).then_some(&act[..]))?;
    }
    Ok(log)
}

pub fn save_trajectory(log: &TrajectoryLog, path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_trajectory(log, f)
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryLog> {
    read_trajectory(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryLog {
        let mut l = TrajectoryLog::new(2, 1);
        l.push(0.0, &[0.1, -2.5e-7], Some(&[1.0])).unwrap();
        l.push(0.02, &[1.0 / 3.0, 7.0], Some(&[-0.0])).unwrap();
        l
    }

    #[test]
    fn round_trip_is_exact() {
        let mut buf = Vec::new();
        write_trajectory(&sample(), &mut buf).unwrap();
        let back = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back, sample());
        let mut again = Vec::new();
        write_trajectory(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        assert!(String::from_utf8(buf).unwrap().starts_with("t,obs_0,obs_1,act_0\n"));
    }

    #[test]
    fn rejects_bad_files() {
        let cases = [
            "x,obs_0\n0,1\n",
            "t,obs_0\n0,1\n0,2\n",
            "t,obs_0\n0,nan\n",
            "t,obs_0\n0,abc\n",
            "t,obs_0,obs_1\n0,1\n",
            "t,obs_1\n0,1\n",
            "t\n0\n",
        ];
        for c in cases {
            assert!(read_trajectory(c.as_bytes()).is_err(), "{c:?}");
        }
    }
}
