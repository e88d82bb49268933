//! Overlap, volume, surface-distance and tumor-burden metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!("masks {:?} vs {:?}", a.dims.0, b.dims.0)));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let mut c = Confusion::default();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (*p, *g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub voe: f64,
    /// Signed `(|pred| − |gt|) / |gt|`; `+∞` when the reference is empty but
    /// the prediction is not.
    pub rvd: f64,
}

pub fn overlap_metrics(tp: u64, fp: u64, fn_: u64) -> Overlap {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let gt = tp + fn_;
    let pred = tp + fp;
    if gt == 0.0 {
        return if pred == 0.0 {
            Overlap { dice: 1.0, voe: 0.0, rvd: 0.0 }
        } else {
            Overlap { dice: 0.0, voe: 1.0, rvd: f64::INFINITY }
        };
    }
    Overlap {
        dice: 2.0 * tp / (2.0 * tp + fp + fn_),
        voe: 1.0 - tp / (tp + fp + fn_),
        rvd: (pred - gt) / gt,
    }
}

/// Foreground voxels with at least one background (or out-of-volume) face neighbour.
pub fn surface(m: &Mask) -> Mask {
    let d = m.dims;
    let [nx, ny, nz] = d.0;
    let mut out = Mask::empty_like(m);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = d.index(x, y, z);
                if m.data[i] == 0 {
                    continue;
                }
                let border = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || m.data[i - 1] == 0
                    || m.data[i + 1] == 0
                    || m.data[i - nx] == 0
                    || m.data[i + nx] == 0
                    || m.data[i - nx * ny] == 0
                    || m.data[i + nx * ny] == 0;
                out.data[i] = u8::from(border);
            }
        }
    }
    out
}

/// Lower-envelope squared distance transform of one line with sample pitch `step`.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < pos(q) {
            j += 1;
        }
        let d = (q as f64 - v[j] as f64) * step;
        *o = d * d + f[v[j]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// foreground voxel of `m`; `+∞` everywhere when `m` is empty.
pub fn squared_distance_transform(m: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let d = m.dims;
    let mut field: Vec<f64> = m.data.iter().map(|b| if *b == 1 { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = d.0[axis];
        let stride = [1, d.0[0], d.0[0] * d.0[1]][axis];
        let mut line = vec![0f64; len];
        let mut out = vec![0f64; len];
        let [nx, ny, nz] = d.0;
        for zz in 0..if axis == 2 { 1 } else { nz } {
            for yy in 0..if axis == 1 { 1 } else { ny } {
                for xx in 0..if axis == 0 { 1 } else { nx } {
                    let base = d.index(xx, yy, zz);
                    for k in 0..len {
                        line[k] = field[base + k * stride];
                    }
                    edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
                    for k in 0..len {
                        field[base + k * stride] = out[k];
                    }
                }
            }
        }
    }
    field
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub mssd: f64,
    pub rmsd: f64,
}

/// Distances from every surface voxel of `from` to the surface of `to`.
fn directed<'a>(from: &'a Mask, to_field: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.data.iter().zip(to_field).filter(|(b, _)| **b == 1).map(|(_, d)| d.sqrt())
}

/// Symmetric surface distances in mm over the pooled directed distance sets.
pub fn surface_distances(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<SurfaceDistances> {
    same_shape(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (sp, sg) = (surface(pred), surface(gt));
    let (fp, fg) = (squared_distance_transform(&sp, spacing), squared_distance_transform(&sg, spacing));
    let (mut n, mut sum, mut sq, mut max) = (0usize, 0f64, 0f64, 0f64);
    for d in directed(&sp, &fg).chain(directed(&sg, &fp)) {
        n += 1;
        sum += d;
        sq += d * d;
        max = max.max(d);
    }
    let n = n as f64;
    Ok(SurfaceDistances { assd: sum / n, mssd: max, rmsd: (sq / n).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Burden {
    pub gt: f64,
    pub pred: f64,
    pub abs_error: f64,
}

/// Lesion voxels over reference liver voxels.
pub fn tumor_burden(liver_gt: &Mask, lesion_gt: &Mask, lesion_pred: &Mask) -> Result<Burden> {
    same_shape(liver_gt, lesion_gt)?;
    same_shape(liver_gt, lesion_pred)?;
    let liver = liver_gt.count();
    if liver == 0 {
        return Err(Error::EmptyLiver);
    }
    let gt = lesion_gt.count() as f64 / liver as f64;
    let pred = lesion_pred.count() as f64 / liver as f64;
    Ok(Burden { gt, pred, abs_error: (pred - gt).abs() })
}

pub struct EvalCase {
    pub id: String,
    pub pred: Mask,
    pub gt: Mask,
    /// Reference liver for tumor burden; burden columns stay empty without it.
    pub liver_gt: Option<Mask>,
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub voe: f64,
    pub rvd: f64,
    /// Absent when either mask is empty.
    pub surface: Option<SurfaceDistances>,
    pub confusion: Confusion,
    pub burden: Option<Burden>,
}

pub fn evaluate_case(c: &EvalCase) -> Result<CaseMetrics> {
    let conf = confusion(&c.pred, &c.gt)?;
    let o = overlap_metrics(conf.tp, conf.fp, conf.fn_);
    let surface = if c.pred.is_empty() || c.gt.is_empty() {
        None
    } else {
        Some(surface_distances(&c.pred, &c.gt, c.spacing)?)
    };
    let burden = c.liver_gt.as_ref().map(|l| tumor_burden(l, &c.gt, &c.pred)).transpose()?;
    Ok(CaseMetrics { case_id: c.id.clone(), dice: o.dice, voe: o.voe, rvd: o.rvd, surface, confusion: conf, burden })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub dice_avg: f64,
    pub dice_global: f64,
    /// Means over cases with both masks non-empty.
    pub surface_avg: Option<SurfaceDistances>,
    /// Cases excluded from the surface averages.
    pub missed_cases: usize,
    pub burden_rmse: Option<f64>,
    pub burden_max_error: Option<f64>,
}

pub fn aggregate(cases: Vec<CaseMetrics>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = cases.len() as f64;
    let dice_avg = cases.iter().map(|c| c.dice).sum::<f64>() / n;
    let pooled = cases.iter().fold(Confusion::default(), |a, c| a + c.confusion);
    let dice_global = overlap_metrics(pooled.tp, pooled.fp, pooled.fn_).dice;
    let surf: Vec<SurfaceDistances> = cases.iter().filter_map(|c| c.surface).collect();
    let surface_avg = (!surf.is_empty()).then(|| {
        let k = surf.len() as f64;
        SurfaceDistances {
            assd: surf.iter().map(|s| s.assd).sum::<f64>() / k,
            mssd: surf.iter().map(|s| s.mssd).sum::<f64>() / k,
            rmsd: surf.iter().map(|s| s.rmsd).sum::<f64>() / k,
        }
    });
    let errors: Vec<f64> = cases.iter().filter_map(|c| c.burden.map(|b| b.abs_error)).collect();
    let (burden_rmse, burden_max_error) = if errors.is_empty() {
        (None, None)
    } else {
        let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        (Some(mse.sqrt()), errors.iter().copied().reduce(f64::max))
    };
    Ok(MetricsReport {
        missed_cases: cases.len() - surf.len(),
        cases,
        dice_avg,
        dice_global,
        surface_avg,
        burden_rmse,
        burden_max_error,
    })
}

pub fn evaluate_dataset(cases: &[EvalCase]) -> Result<MetricsReport> {
    aggregate(cases.iter().map(evaluate_case).collect::<Result<_>>()?)
}

pub const CSV_HEADER: &str = "case_id,dice,voe,rvd,assd,mssd,rmsd,burden_gt,burden_pred";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// One row per case; empty fields mark metrics that are undefined for it.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.case_id,
                c.dice,
                c.voe,
                c.rvd,
                opt(c.surface.map(|x| x.assd)),
                opt(c.surface.map(|x| x.mssd)),
                opt(c.surface.map(|x| x.rmsd)),
                opt(c.burden.map(|b| b.gt)),
                opt(c.burden.map(|b| b.pred)),
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cases: {}", self.cases.len());
        let _ = writeln!(s, "dice_avg: {:.4}", self.dice_avg);
        let _ = writeln!(s, "dice_global: {:.4}", self.dice_global);
        if let Some(a) = self.surface_avg {
            let _ = writeln!(s, "assd: {:.4} mm\nmssd: {:.4} mm\nrmsd: {:.4} mm", a.assd, a.mssd, a.rmsd);
        }
        let _ = writeln!(s, "missed_cases: {}", self.missed_cases);
        if let (Some(r), Some(m)) = (self.burden_rmse, self.burden_max_error) {
            let _ = writeln!(s, "burden_rmse: {r:.4}\nburden_max_error: {m:.4}");
        }
        s
    }
}

/// Per-case rows parsed back from [`MetricsReport::to_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub case_id: String,
    pub values: [Option<f64>; 8],
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::HeaderParse(format!("metrics report must start with {CSV_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::HeaderParse(format!("expected 9 fields in {line:?}")));
            }
            let mut values = [None; 8];
            for (k, v) in values.iter_mut().enumerate() {
                let s = f[k + 1];
                *v = if s.is_empty() {
                    None
                } else {
                    Some(s.parse().map_err(|_| Error::HeaderParse(format!("bad number {s:?}")))?)
                };
            }
            Ok(CsvRow { case_id: f[0].to_string(), values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn mask(dims: Dims, on: &[usize]) -> Mask {
        let mut data = vec![0u8; dims.len()];
        on.iter().for_each(|i| data[*i] = 1);
        Mask::new(dims, data, [1.0; 3]).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let d = Dims::new(10, 10, 1);
        let gt = mask(d, &(0..10).collect::<Vec<_>>());
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(c, Confusion { tp: 10, fp: 0, fn_: 0, tn: 90 });
        let inv = mask(d, &(10..100).collect::<Vec<_>>());
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn overlap_examples() {
        let o = overlap_metrics(2, 2, 2);
        assert_eq!(o.dice, 0.5);
        assert!((o.voe - (1.0 - 2.0 / 6.0)).abs() < 1e-15);
        // |gt| = 10, |pred| = 12
        assert!((overlap_metrics(7, 5, 3).rvd - 0.2).abs() < 1e-15);
        assert_eq!(overlap_metrics(5, 0, 0), Overlap { dice: 1.0, voe: 0.0, rvd: 0.0 });
        assert_eq!(overlap_metrics(0, 0, 0), Overlap { dice: 1.0, voe: 0.0, rvd: 0.0 });
        let o = overlap_metrics(0, 3, 0);
        assert_eq!((o.dice, o.voe), (0.0, 1.0));
        assert!(o.rvd.is_infinite() && o.rvd > 0.0);
    }

    #[test]
    fn surface_distance_examples() {
        let d = Dims::new(5, 5, 5);
        let a = mask(d, &[d.index(1, 2, 2), d.index(2, 2, 2)]);
        let s = surface_distances(&a, &a, [1.0; 3]).unwrap();
        assert_eq!((s.assd, s.mssd, s.rmsd), (0.0, 0.0, 0.0));
        let p = mask(d, &[d.index(0, 1, 1)]);
        let g = mask(d, &[d.index(3, 1, 1)]);
        let s = surface_distances(&p, &g, [1.0; 3]).unwrap();
        assert_eq!((s.assd, s.mssd, s.rmsd), (3.0, 3.0, 3.0));
        let e = Mask::empty(d, [1.0; 3]);
        assert!(matches!(surface_distances(&e, &g, [1.0; 3]), Err(Error::EmptyMask)));
    }

    #[test]
    fn burden_examples() {
        let d = Dims::new(10, 10, 1);
        let liver = mask(d, &(0..100).collect::<Vec<_>>());
        let lesion = mask(d, &(0..10).collect::<Vec<_>>());
        let b = tumor_burden(&liver, &lesion, &lesion).unwrap();
        assert_eq!((b.gt, b.abs_error), (0.1, 0.0));
        let empty = Mask::empty(d, [1.0; 3]);
        assert!(matches!(tumor_burden(&empty, &lesion, &lesion), Err(Error::EmptyLiver)));
    }

    #[test]
    fn dataset_dice_average_vs_global() {
        let d = Dims::new(10, 10, 1);
        let big = mask(d, &(0..100).collect::<Vec<_>>());
        let small = mask(d, &[0]);
        let empty = Mask::empty(d, [1.0; 3]);
        let cases = vec![
            EvalCase { id: "a".into(), pred: big.clone(), gt: big.clone(), liver_gt: None, spacing: [1.0; 3] },
            EvalCase { id: "b".into(), pred: empty, gt: small, liver_gt: None, spacing: [1.0; 3] },
        ];
        let r = evaluate_dataset(&cases).unwrap();
        assert_eq!(r.dice_avg, 0.5);
        // pooled: tp 100, fn 1
        assert!((r.dice_global - 200.0 / 201.0).abs() < 1e-15);
        assert_eq!(r.missed_cases, 1);
        assert!(matches!(evaluate_dataset(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn perfect_case_is_ideal_and_csv_round_trips() {
        let d = Dims::new(6, 6, 6);
        let liver = mask(d, &(0..100).collect::<Vec<_>>());
        let les = mask(d, &[d.index(1, 1, 1), d.index(2, 1, 1)]);
        let c = EvalCase { id: "case_7".into(), pred: les.clone(), gt: les, liver_gt: Some(liver), spacing: [0.7, 0.7, 2.0] };
        let r = evaluate_dataset(&[c]).unwrap();
        let m = &r.cases[0];
        assert_eq!((m.dice, m.voe, m.rvd), (1.0, 0.0, 0.0));
        assert_eq!(m.surface, Some(SurfaceDistances { assd: 0.0, mssd: 0.0, rmsd: 0.0 }));
        assert_eq!(r.burden_max_error, Some(0.0));
        let rows = parse_report_csv(&r.to_csv()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].case_id, "case_7");
        assert_eq!(rows[0].values[0], Some(1.0));
        assert_eq!(rows[0].values[6], Some(0.02));
    }
}
