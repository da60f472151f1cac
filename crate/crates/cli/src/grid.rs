//! Parameter grid syntax shared by the subcommands.
//!
//! * `0.1,0.5,1` — explicit list
//! * `0:1:0.25` — linear range `start:stop:step`, stop included
//! * `log:1e-4:10:41` — `n` logarithmically spaced points

use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
        let parts: Vec<&str> = s.split(':').collect();
        let values = match parts.as_slice() {
            ["log", lo, hi, n] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                let n: usize = n.trim().parse().map_err(|e| format!("bad count {n:?}: {e}"))?;
                if !(lo > 0.0 && hi > lo) || n < 2 {
                    return Err("log grid needs 0 < lo < hi and n >= 2".into());
                }
                (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
            }
            [start, stop, step] => {
                let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
                if !(step > 0.0) || stop < start {
                    return Err("range needs step > 0 and stop >= start".into());
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| start + i as f64 * step).collect()
            }
            [single] => single.split(',').map(num).collect::<Result<Vec<f64>, String>>()?,
            _ => return Err(format!("cannot parse grid {s:?}")),
        };
        if values.is_empty() {
            return Err("grid is empty".into());
        }
        Ok(Grid(values))
    }
}
