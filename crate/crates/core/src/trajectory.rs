//! Sampled closed-loop records and their CSV form.
//!
//! The CSV has one row per sample `k = 0..=N` with columns
//! `k,t,v,r,e,u1,u2,y,w_0,..`. The last row only carries the final state;
//! its input columns are `NaN`.

use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty trajectory file")]
    Empty,
}

/// States `v[0..=N]`, `w[0..=N]` and per-step signals `r, e, u1, y` of
/// length `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    ts: f64,
    gamma: f64,
    n_gates: usize,
    v: Vec<f64>,
    w: Vec<f64>,
    r: Vec<f64>,
    e: Vec<f64>,
    u1: Vec<f64>,
    y: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(n_gates: usize, ts: f64, gamma: f64, steps: usize) -> Self {
        Self {
            ts,
            gamma,
            n_gates,
            v: Vec::with_capacity(steps + 1),
            w: Vec::with_capacity((steps + 1) * n_gates),
            r: Vec::with_capacity(steps),
            e: Vec::with_capacity(steps),
            u1: Vec::with_capacity(steps),
            y: Vec::with_capacity(steps),
        }
    }

    pub(crate) fn push_state(&mut self, v: f64, w: &[f64]) {
        debug_assert_eq!(w.len(), self.n_gates);
        self.v.push(v);
        self.w.extend_from_slice(w);
    }

    pub(crate) fn push_input(&mut self, r: f64, e: f64, u1: f64, y: f64) {
        self.r.push(r);
        self.e.push(e);
        self.u1.push(u1);
        self.y.push(y);
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gate_count(&self) -> usize {
        self.n_gates
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn gates_at(&self, k: usize) -> &[f64] {
        &self.w[k * self.n_gates..(k + 1) * self.n_gates]
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    /// Feedback input `gamma (r - v)`.
    pub fn u1(&self) -> &[f64] {
        &self.u1
    }

    /// Voltage input of the predictor, `v[0..N]`.
    pub fn u2(&self) -> &[f64] {
        &self.v[..self.len()]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), CsvError> {
        write!(out, "k,t,v,r,e,u1,u2,y")?;
        for i in 0..self.n_gates {
            write!(out, ",w_{i}")?;
        }
        writeln!(out)?;
        for k in 0..=self.len() {
            let inputs = if k < self.len() {
                [self.r[k], self.e[k], self.u1[k], self.v[k], self.y[k]]
            } else {
                [f64::NAN, f64::NAN, f64::NAN, self.v[k], f64::NAN]
            };
            write!(out, "{k},{:.16e},{:.16e}", k as f64 * self.ts, self.v[k])?;
            for x in inputs {
                write!(out, ",{x:.16e}")?;
            }
            for x in self.gates_at(k) {
                write!(out, ",{x:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Reads a file produced by [`Trajectory::write_csv`]. `ts` is taken
    /// from the time column when at least two rows are present.
    pub fn read_csv<R: BufRead>(input: R, gamma: f64) -> Result<Self, CsvError> {
        let mut lines = input.lines().enumerate();
        let (_, header) = lines.next().ok_or(CsvError::Empty)?;
        let header = header?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let expected = ["k", "t", "v", "r", "e", "u1", "u2", "y"];
        if cols.len() < expected.len() || cols[..expected.len()] != expected {
            return Err(CsvError::Parse {
                line: 1,
                msg: format!("unexpected header {header:?}"),
            });
        }
        let n_gates = cols.len() - expected.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .trim()
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CsvError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if row.len() != cols.len() {
                return Err(CsvError::Parse {
                    line: i + 1,
                    msg: format!("{} fields, expected {}", row.len(), cols.len()),
                });
            }
            rows.push(row);
        }
        let last = rows.len().checked_sub(1).ok_or(CsvError::Empty)?;
        let ts = if last > 0 {
            rows[1][1] - rows[0][1]
        } else {
            f64::NAN
        };
        let mut traj = Self::with_capacity(n_gates, ts, gamma, last);
        for (k, row) in rows.iter().enumerate() {
            traj.push_state(row[2], &row[8..]);
            if k < last {
                traj.push_input(row[3], row[4], row[5], row[7]);
            }
        }
        Ok(traj)
    }
}
