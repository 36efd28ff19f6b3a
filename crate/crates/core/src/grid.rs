//! Tensor-product box grids, node fields, difference operators and quadrature.
//!
//! Forward differences treat values past the last node as zero, and the
//! divergence is defined as the negative adjoint of the forward difference
//! under the node quadrature, so
//! `Σ σ·Du · vol = -Σ (div σ) u · vol` holds exactly for every pair.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    half_lengths: Vec<f64>,
    counts: Vec<usize>,
    spacings: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

pub fn make_grid(half_lengths: &[f64], counts: &[usize]) -> Result<Grid> {
    Grid::with_cap(half_lengths, counts, DEFAULT_NODE_CAP)
}

impl Grid {
    pub fn with_cap(half_lengths: &[f64], counts: &[usize], cap: usize) -> Result<Grid> {
        if half_lengths.is_empty() || half_lengths.len() != counts.len() {
            return Err(Error::InvalidGrid(format!(
                "{} half-lengths for {} counts",
                half_lengths.len(),
                counts.len()
            )));
        }
        if let Some(l) = half_lengths.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidGrid(format!("half-length {l} must be positive")));
        }
        if let Some(c) = counts.iter().find(|&&c| c < 3) {
            return Err(Error::InvalidGrid(format!("node count {c} must be at least 3")));
        }
        let mut len: usize = 1;
        for &c in counts {
            len = len.checked_mul(c).ok_or(Error::TooLarge {
                nodes: usize::MAX,
                cap,
            })?;
        }
        if len > cap {
            return Err(Error::TooLarge { nodes: len, cap });
        }
        let spacings = half_lengths
            .iter()
            .zip(counts)
            .map(|(l, &c)| 2.0 * l / (c - 1) as f64)
            .collect();
        let mut strides = vec![1; counts.len()];
        for d in (0..counts.len() - 1).rev() {
            strides[d] = strides[d + 1] * counts[d + 1];
        }
        Ok(Grid {
            half_lengths: half_lengths.to_vec(),
            counts: counts.to_vec(),
            spacings,
            strides,
            len,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn half_lengths(&self) -> &[f64] {
        &self.half_lengths
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacings
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacings.iter().product()
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacings.iter().copied().fold(0.0, f64::max)
    }

    /// Coordinate of node index `i` along `axis`.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.half_lengths[axis] + i as f64 * self.spacings[axis]
    }

    /// Multi-index of flat node `k` (row-major, last axis fastest).
    pub fn index_of(&self, k: usize) -> Vec<usize> {
        self.counts
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (k / s) % c)
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn position(&self, k: usize) -> Vec<f64> {
        self.index_of(k)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.coord(d, i))
            .collect()
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        self.counts
            .iter()
            .zip(&self.strides)
            .any(|(&c, &s)| {
                let i = (k / s) % c;
                i == 0 || i == c - 1
            })
    }

    /// True when node `k` is at least `margin` nodes away from every face.
    pub fn is_inside(&self, k: usize, margin: usize) -> bool {
        self.counts
            .iter()
            .zip(&self.strides)
            .all(|(&c, &s)| {
                let i = (k / s) % c;
                i >= margin && i + margin < c
            })
    }

    /// `is_inside(k, margin)` for every node.
    pub fn inside_mask(&self, margin: usize) -> Vec<bool> {
        let mut mask = vec![true; self.len];
        for (&c, &s) in self.counts.iter().zip(&self.strides) {
            let block = c * s;
            for base in (0..self.len).step_by(block) {
                for i in 0..c {
                    if i < margin || i + margin >= c {
                        mask[base + i * s..base + (i + 1) * s].iter_mut().for_each(|m| *m = false);
                    }
                }
            }
        }
        mask
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim() {
            return Err(Error::BadAxis {
                axis,
                dim: self.dim(),
            });
        }
        Ok(())
    }
}

/// Scalar samples on the nodes of a grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Field {
        Field {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Field {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f` at every node (boundary included).
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> Field {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|k| {
                for (d, xd) in x.iter_mut().enumerate() {
                    *xd = grid.coord(d, (k / grid.strides[d]) % grid.counts[d]);
                }
                f(&x)
            })
            .collect();
        Field {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn zero_boundary(&mut self) {
        for k in 0..self.values.len() {
            if self.grid.is_boundary(k) {
                self.values[k] = 0.0;
            }
        }
    }

    pub fn has_zero_boundary(&self) -> bool {
        (0..self.values.len()).all(|k| !self.grid.is_boundary(k) || self.values[k] == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// Writes `i1,..,iN,x1,..,xN,value` rows in node order, 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.grid.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=n).map(|d| format!("i{d}")).collect();
        header.extend((1..=n).map(|d| format!("x{d}")));
        header.push("value".into());
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(2 * n + 1);
        for k in 0..self.grid.len() {
            rec.clear();
            let idx = self.grid.index_of(k);
            rec.extend(idx.iter().map(|i| i.to_string()));
            rec.extend(
                idx.iter()
                    .enumerate()
                    .map(|(d, &i)| format!("{:.16e}", self.grid.coord(d, i))),
            );
            rec.push(format!("{:.16e}", self.values[k]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`Field::write_csv`]. The grid is recovered from
    /// the index ranges and the coordinates of the first node.
    pub fn read_csv<R: Read>(input: R) -> Result<Field> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 3 || (cols - 1) % 2 != 0 || &header[cols - 1] != "value" {
            return Err(Error::Parse(format!("unexpected field dump header {header:?}")));
        }
        let n = (cols - 1) / 2;
        let mut rows: Vec<(Vec<usize>, Vec<f64>, f64)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_f = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
            };
            let idx = (0..n)
                .map(|d| {
                    rec[d]
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("bad index {:?}: {e}", &rec[d])))
                })
                .collect::<Result<Vec<_>>>()?;
            let x = (0..n).map(|d| parse_f(&rec[n + d])).collect::<Result<Vec<_>>>()?;
            let v = parse_f(&rec[2 * n])?;
            rows.push((idx, x, v));
        }
        let first = rows.first().ok_or_else(|| Error::Parse("empty field dump".into()))?;
        if first.0.iter().any(|&i| i != 0) {
            return Err(Error::Parse("first row must be the origin node".into()));
        }
        let half: Vec<f64> = first.1.iter().map(|x| -x).collect();
        let mut counts = vec![0usize; n];
        for (idx, _, _) in &rows {
            for d in 0..n {
                counts[d] = counts[d].max(idx[d] + 1);
            }
        }
        let grid = make_grid(&half, &counts)?;
        if rows.len() != grid.len() {
            return Err(Error::Parse(format!(
                "{} rows for a {:?} grid",
                rows.len(),
                counts
            )));
        }
        let mut values = vec![f64::NAN; grid.len()];
        for (idx, _, v) in rows {
            values[grid.flat_index(&idx)] = v;
        }
        Field::from_values(&grid, values)
    }
}

/// `out = D_axis(values)` with zero extension past the last node.
pub(crate) fn diff_into(grid: &Grid, values: &[f64], axis: usize, out: &mut [f64]) {
    let s = grid.strides[axis];
    let n = grid.counts[axis];
    let inv_h = 1.0 / grid.spacings[axis];
    let block = n * s;
    for base in (0..values.len()).step_by(block) {
        let lim = base + (n - 1) * s;
        for k in base..lim {
            out[k] = (values[k + s] - values[k]) * inv_h;
        }
        for k in lim..base + block {
            out[k] = -values[k] * inv_h;
        }
    }
}

/// `out += D_axis^T(flux)`, i.e. `(flux[k - e] - flux[k]) / h` with zero below the first node.
pub(crate) fn diff_t_add(grid: &Grid, flux: &[f64], axis: usize, out: &mut [f64]) {
    let s = grid.strides[axis];
    let n = grid.counts[axis];
    let inv_h = 1.0 / grid.spacings[axis];
    let block = n * s;
    for base in (0..flux.len()).step_by(block) {
        for k in base..base + s {
            out[k] -= flux[k] * inv_h;
        }
        for k in base + s..base + block {
            out[k] += (flux[k - s] - flux[k]) * inv_h;
        }
    }
}

pub fn forward_diff(u: &Field, axis: usize) -> Result<Field> {
    u.grid.check_axis(axis)?;
    let mut out = Field::zeros(&u.grid);
    diff_into(&u.grid, &u.values, axis, &mut out.values);
    Ok(out)
}

/// Discrete divergence `-Σ_i D_i^T σ_i`; `sigma[i]` is the component along axis `i`.
pub fn backward_div(sigma: &[Field]) -> Result<Field> {
    let first = sigma.first().ok_or(Error::GridMismatch)?;
    if sigma.len() != first.grid.dim() {
        return Err(Error::BadAxis {
            axis: sigma.len(),
            dim: first.grid.dim(),
        });
    }
    let mut acc = Field::zeros(&first.grid);
    for (axis, s) in sigma.iter().enumerate() {
        s.same_grid(first)?;
        diff_t_add(&first.grid, &s.values, axis, &mut acc.values);
    }
    for v in acc.values.iter_mut() {
        *v = -*v;
    }
    Ok(acc)
}

pub fn integrate(u: &Field) -> f64 {
    u.values.iter().sum::<f64>() * u.grid.cell_volume()
}

pub fn lp_norm(u: &Field, p: f64) -> f64 {
    lp_norm_values(&u.values, p, u.grid.cell_volume())
}

pub(crate) fn lp_norm_values(values: &[f64], p: f64, vol: f64) -> f64 {
    let s: f64 = if p == 2.0 {
        values.iter().map(|v| v * v).sum()
    } else {
        values.iter().map(|v| v.abs().powf(p)).sum()
    };
    (s * vol).powf(1.0 / p)
}

/// Node-wise `sqrt(Σ_{i<n1} (D_i u)² + δ²) - δ`.
pub fn grad1_mag(u: &Field, n1: usize, delta: f64) -> Field {
    let mut sq = vec![0.0; u.values.len()];
    let mut d = vec![0.0; u.values.len()];
    for axis in 0..n1.min(u.grid.dim()) {
        diff_into(&u.grid, &u.values, axis, &mut d);
        for (a, b) in sq.iter_mut().zip(&d) {
            *a += b * b;
        }
    }
    let values = sq.iter().map(|&s| (s + delta * delta).sqrt() - delta).collect();
    Field {
        grid: u.grid.clone(),
        values,
    }
}

/// Multilinear interpolation at an arbitrary point; zero outside the box.
pub fn interpolate(u: &Field, x: &[f64]) -> f64 {
    let g = &u.grid;
    let n = g.dim();
    let mut base = 0usize;
    let mut frac = [0.0f64; 8];
    let mut step = [0usize; 8];
    let mut frac_v = Vec::new();
    let mut step_v = Vec::new();
    let (fr, st): (&mut [f64], &mut [usize]) = if n <= 8 {
        (&mut frac[..n], &mut step[..n])
    } else {
        frac_v.resize(n, 0.0);
        step_v.resize(n, 0);
        (&mut frac_v[..], &mut step_v[..])
    };
    for d in 0..n {
        let t = (x[d] + g.half_lengths[d]) / g.spacings[d];
        let last = (g.counts[d] - 1) as f64;
        if !(t >= 0.0 && t <= last) {
            return 0.0;
        }
        let i = (t.floor() as usize).min(g.counts[d] - 2);
        fr[d] = t - i as f64;
        st[d] = g.strides[d];
        base += i * g.strides[d];
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut k = base;
        for d in 0..n {
            if corner >> d & 1 == 1 {
                w *= fr[d];
                k += st[d];
            } else {
                w *= 1.0 - fr[d];
            }
        }
        if w != 0.0 {
            acc += w * u.values[k];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inside_mask_matches_predicate() {
        let g = make_grid(&[1.0, 2.0, 1.0], &[5, 6, 7]).unwrap();
        for margin in 0..4 {
            let mask = g.inside_mask(margin);
            for k in 0..g.len() {
                assert_eq!(mask[k], g.is_inside(k, margin));
            }
        }
    }

    #[test]
    fn grid_spacings() {
        let g = make_grid(&[1.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(g.spacings(), &[1.0, 1.0]);
        let g = make_grid(&[2.0, 1.0, 1.0], &[5, 3, 3]).unwrap();
        assert_eq!(g.spacings(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.strides(), &[9, 3, 1]);
        assert!(matches!(make_grid(&[1.0], &[2]), Err(Error::InvalidGrid(_))));
        assert!(matches!(
            Grid::with_cap(&[1.0, 1.0], &[100, 100], 1000),
            Err(Error::TooLarge { nodes: 10000, .. })
        ));
    }

    #[test]
    fn forward_diff_examples() {
        let g = make_grid(&[1.0], &[3]).unwrap();
        let u = Field::from_values(&g, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forward_diff(&u, 0).unwrap().values(), &[1.0, -1.0, 0.0]);
        assert!(forward_diff(&Field::zeros(&g), 0).unwrap().is_zero());
        assert!(forward_diff(&u, 1).is_err());

        let g = make_grid(&[1.0, 2.0], &[5, 9]).unwrap();
        let u = Field::from_fn(&g, |x| x[1]);
        let d = forward_diff(&u, 1).unwrap();
        for k in 0..g.len() {
            if g.is_inside(k, 1) {
                assert_relative_eq!(d.values()[k], 1.0, max_relative = 1e-12);
            }
        }
        let c = Field::from_fn(&g, |_| 3.0);
        let d = forward_diff(&c, 0).unwrap();
        for k in 0..g.len() {
            if g.is_inside(k, 1) {
                assert_eq!(d.values()[k], 0.0);
            }
        }
    }

    #[test]
    fn divergence_small_example() {
        // dense adjoint on 3 nodes: D = [[-1,1,0],[0,-1,1],[0,0,-1]], div = -D^T
        let g = make_grid(&[1.0], &[3]).unwrap();
        let s = Field::from_values(&g, vec![1.0, 1.0, 0.0]).unwrap();
        let div = backward_div(&[s]).unwrap();
        assert_eq!(div.values(), &[1.0, 0.0, -1.0]);
        assert!(backward_div(&[Field::zeros(&g)]).unwrap().is_zero());
    }

    #[test]
    fn divergence_grid_mismatch() {
        let g1 = make_grid(&[1.0, 1.0], &[3, 3]).unwrap();
        let g2 = make_grid(&[1.0, 1.0], &[3, 5]).unwrap();
        assert!(matches!(
            backward_div(&[Field::zeros(&g1), Field::zeros(&g2)]),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn quadrature_examples() {
        let g = make_grid(&[1.0, 1.0], &[3, 3]).unwrap();
        let mut u = Field::from_fn(&g, |_| 1.0);
        u.zero_boundary();
        assert_relative_eq!(integrate(&u), 1.0);
        assert_eq!(integrate(&Field::zeros(&g)), 0.0);
        let g = make_grid(&[1.0, 1.0], &[7, 5]).unwrap();
        let lin = Field::from_fn(&g, |x| x[0] - 2.0 * x[1]);
        assert!(integrate(&lin).abs() < 1e-14);
    }

    #[test]
    fn lp_norm_examples() {
        let g = make_grid(&[0.5, 0.5], &[3, 3]).unwrap();
        let mut u = Field::zeros(&g);
        u.values_mut()[4] = 2.0;
        assert_relative_eq!(lp_norm(&u, 2.0), 1.0);
        assert_relative_eq!(lp_norm(&u, 3.0), (8.0f64 * 0.25).powf(1.0 / 3.0));
        assert_relative_eq!(lp_norm(&u.scaled(-3.0), 2.5), 3.0 * lp_norm(&u, 2.5), max_relative = 1e-14);
        assert_eq!(lp_norm(&Field::zeros(&g), 4.0), 0.0);
    }

    #[test]
    fn grad1_mag_examples() {
        let g = make_grid(&[1.0, 1.0], &[3, 3]).unwrap();
        assert!(grad1_mag(&Field::zeros(&g), 2, 0.3).is_zero());
        // u = 3 x1 + 4 x2 at the centre: D1 u = 3, D2 u = 4
        let u = Field::from_fn(&g, |x| 3.0 * x[0] + 4.0 * x[1]);
        assert_relative_eq!(grad1_mag(&u, 1, 0.0).values()[4], 3.0);
        assert_relative_eq!(grad1_mag(&u, 2, 0.0).values()[4], 5.0);
        let smooth = grad1_mag(&u, 2, 0.5).values()[4];
        assert!(smooth < 5.0 && smooth > 4.4);
    }

    #[test]
    fn csv_round_trip() {
        let g = make_grid(&[1.0, 0.7, 1.3], &[4, 3, 5]).unwrap();
        let u = Field::from_fn(&g, |x| (x[0] * 1.7 + x[1]).sin() / 3.0 + x[2]);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let head = String::from_utf8(buf[..40].to_vec()).unwrap();
        assert!(head.starts_with("i1,i2,i3,x1,x2,x3,value\n0,0,0,"));
        let v = Field::read_csv(&buf[..]).unwrap();
        assert_eq!(v.grid(), u.grid());
        assert_eq!(v.values(), u.values());
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_on_affine() {
        let g = make_grid(&[1.0, 2.0], &[5, 9]).unwrap();
        let u = Field::from_fn(&g, |x| 1.0 + 2.0 * x[0] - x[1]);
        for k in 0..g.len() {
            assert_relative_eq!(interpolate(&u, &g.position(k)), u.values()[k], epsilon = 1e-13);
        }
        assert_relative_eq!(interpolate(&u, &[0.13, -0.71]), 1.0 + 0.26 + 0.71, epsilon = 1e-13);
        assert_eq!(interpolate(&u, &[1.5, 0.0]), 0.0);
    }
}
