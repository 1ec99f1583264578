//! Density head and ground-truth density maps on the stride-s cell grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBnRelu, Mode};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityHeadConfig {
    /// Number of conv-BN-ReLU blocks before the 1×1 output conv.
    pub blocks: usize,
    pub hidden_channels: usize,
    /// Gaussian std of the ground-truth kernel, in cells.
    pub sigma: f64,
}

impl Default for DensityHeadConfig {
    fn default() -> Self {
        DensityHeadConfig {
            blocks: 3,
            hidden_channels: 64,
            sigma: 2.0,
        }
    }
}

impl DensityHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("density.blocks must be at least 1".into()));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("density.hidden_channels must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("density.sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DensityHead {
    blocks: Vec<ConvBnRelu>,
    out: Conv,
}

impl DensityHead {
    pub fn register(store: &mut ParamStore, cfg: &DensityHeadConfig, in_channels: usize, seed: u64) -> Self {
        let mut cin = in_channels;
        let blocks = (0..cfg.blocks)
            .map(|t| {
                let b = ConvBnRelu::register(
                    store,
                    &format!("density.block{t}"),
                    ParamGroup::DensityHead,
                    cin,
                    cfg.hidden_channels,
                    seed,
                );
                cin = cfg.hidden_channels;
                b
            })
            .collect();
        let out = Conv::register(
            store,
            "density.out",
            ParamGroup::DensityHead,
            cin,
            1,
            1,
            ConvGeometry::symmetric(1, 0),
            true,
            1.0,
            seed,
        );
        DensityHead { blocks, out }
    }

    /// `C×H×W` (or batched) features to a `1×H×W` density map. Not clamped.
    pub fn predict(&self, tape: &mut Tape, store: &mut ParamStore, f: Var, mode: Mode) -> Result<Var> {
        let mut x = f;
        for b in &self.blocks {
            x = b.forward(tape, store, x, mode)?;
        }
        self.out.forward(tape, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.out.params());
        p
    }

    pub fn output_conv(&self) -> &Conv {
        &self.out
    }
}

/// Ground-truth density on an `ceil(H/s) × ceil(W/s)` grid. Each point in
/// pixel coordinates contributes a unit-mass Gaussian with std `sigma` cells,
/// centered at `(x/s − 0.5, y/s − 0.5)` in cell-index coordinates (so a point
/// at the centre of a cell peaks on that cell), truncated at 3σ and
/// renormalized over the in-bounds cells.
pub fn gt_density_map(points: &[(f64, f64)], h: usize, w: usize, s: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 || s == 0 {
        return Err(Error::Config(format!("bad density grid: image {h}x{w}, stride {s}")));
    }
    let (mh, mw) = (h.div_ceil(s), w.div_ceil(s));
    let mut map = vec![0.0; mh * mw];
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::new();
    for &(x, y) in points {
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
            return Err(Error::Input(format!("point ({x}, {y}) lies outside the {w}x{h} image")));
        }
        let cx = x / s as f64 - 0.5;
        let cy = y / s as f64 - 0.5;
        let (ix, iy) = (cx.round() as i64, cy.round() as i64);
        kernel.clear();
        let mut total = 0.0;
        for r in iy - radius..=iy + radius {
            for c in ix - radius..=ix + radius {
                if r < 0 || c < 0 || r >= mh as i64 || c >= mw as i64 {
                    continue;
                }
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                if d2 > (3.0 * sigma).powi(2) {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                kernel.push((r as usize * mw + c as usize, v));
                total += v;
            }
        }
        if total > 0.0 {
            for &(i, v) in &kernel {
                map[i] += v / total;
            }
        } else {
            // tiny sigma far from any cell centre: all mass on the containing cell
            let r = ((y / s as f64) as usize).min(mh - 1);
            let c = ((x / s as f64) as usize).min(mw - 1);
            map[r * mw + c] += 1.0;
        }
    }
    Tensor::new(&[1, mh, mw], map)
}

/// ASCII PGM (P2), values scaled to 0..=255 by the map maximum. Negative
/// predictions are clipped to 0.
pub fn to_pgm(map: &Tensor) -> String {
    let (h, w) = plane_dims(map);
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in map.data().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let scaled = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
                (scaled as u32).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Raw values, one map row per line, full round-trip precision.
pub fn to_csv(map: &Tensor) -> String {
    let (_, w) = plane_dims(map);
    let mut out = String::new();
    for row in map.data().chunks(w) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses the output of [`to_csv`] back into a `1×H×W` map.
pub fn from_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Input(format!("bad density value {v:?}: {e}"))))
            .collect::<Result<_>>()?;
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Input("ragged density CSV".into()));
        }
        data.extend(vals);
        rows += 1;
    }
    let w = width.ok_or_else(|| Error::Input("empty density CSV".into()))?;
    Tensor::new(&[1, rows, w], data)
}

fn plane_dims(map: &Tensor) -> (usize, usize) {
    let s = map.shape();
    let w = s[s.len() - 1];
    (map.numel() / w, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd::{finite_difference_check, random_projection, random_tensor, FdOptions, FD_TOLERANCE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_shape_and_zero_output_conv() {
        let cfg = DensityHeadConfig::default();
        let mut store = ParamStore::new();
        let head = DensityHead::register(&mut store, &cfg, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let f = tape.constant(random_tensor(&[64, 8, 8], &mut rng));
        let m = head.predict(&mut tape, &mut store, f, Mode::Eval).unwrap();
        assert_eq!(tape.shape(m), &[1, 8, 8]);
        assert!(tape.value(m).is_finite());

        for id in head.output_conv().params() {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let f = tape.constant(random_tensor(&[64, 8, 8], &mut rng));
        let m = head.predict(&mut tape, &mut store, f, Mode::Train).unwrap();
        assert!(tape.value(m).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = DensityHeadConfig { blocks: 2, hidden_channels: 4, sigma: 2.0 };
        let mut store = ParamStore::new();
        let head = DensityHead::register(&mut store, &cfg, 8, 3);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[8, 4, 4], &mut rng);
            let report = finite_difference_check(
                &[x],
                |t, v| {
                    let mut s = store.clone();
                    let m = head.predict(t, &mut s, v[0], Mode::Train)?;
                    random_projection(t, m, seed)
                },
                FdOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.max_rel_err < FD_TOLERANCE, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn blocks_must_be_positive() {
        let cfg = DensityHeadConfig { blocks: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = gt_density_map(&[], 64, 64, 8, 2.0).unwrap();
        assert_eq!(m.shape(), &[1, 8, 8]);
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interior_point_has_unit_mass() {
        let m = gt_density_map(&[(100.0, 92.0)], 200, 200, 8, 1.0).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-6);
        // peak on the containing cell
        let argmax = m.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, (92 / 8) * 25 + 100 / 8);
    }

    #[test]
    fn many_points_sum_to_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|_| (rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)))
            .collect();
        let m = gt_density_map(&pts, 128, 128, 8, 2.0).unwrap();
        assert!((m.sum() - 50.0).abs() < 0.5);
        assert!(m.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn out_of_bounds_point_is_named() {
        match gt_density_map(&[(1.0, 1.0), (64.0, 3.0)], 64, 64, 8, 2.0) {
            Err(Error::Input(msg)) => assert!(msg.contains("(64, 3)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn additive_and_translation_equivariant() {
        let a = [(20.0, 30.0), (50.0, 41.0)];
        let b = [(70.0, 12.5)];
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let ma = gt_density_map(&a, 96, 96, 8, 1.5).unwrap();
        let mb = gt_density_map(&b, 96, 96, 8, 1.5).unwrap();
        let mab = gt_density_map(&all, 96, 96, 8, 1.5).unwrap();
        for i in 0..mab.numel() {
            assert!((mab.data()[i] - ma.data()[i] - mb.data()[i]).abs() < 1e-12);
        }
        let p = gt_density_map(&[(40.0, 44.0)], 96, 96, 8, 1.0).unwrap();
        let q = gt_density_map(&[(48.0, 44.0)], 96, 96, 8, 1.0).unwrap();
        for r in 0..12 {
            for c in 0..11 {
                assert!((p.at(&[0, r, c]) - q.at(&[0, r, c + 1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pgm_and_csv_exports() {
        let m = Tensor::new(&[1, 2, 2], vec![0.0, 0.5, 1.0, -0.2]).unwrap();
        assert_eq!(to_pgm(&m), "P2\n2 2\n255\n0 128\n255 0\n");
        let back = from_csv(&to_csv(&m)).unwrap();
        assert_eq!(back.data(), m.data());
        assert_eq!(back.shape(), &[1, 2, 2]);
        assert!(matches!(from_csv("1,2\n3\n"), Err(Error::Input(_))));
    }
}
