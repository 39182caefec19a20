//! Joint/vertex errors, Procrustes alignment, PCK and report output.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{rotation::Mat3, JointRole, KinematicTree};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("procrustes needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point counts differ: {0} vs {1}")]
    Mismatch(usize, usize),
    #[error("F1 score must lie in (0, 1], got {0}")]
    BadF1(f64),
    #[error("PCK thresholds must be sorted ascending and positive")]
    BadAlphas,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean distance after translating both sets so point 0 (the
/// pelvis) sits at the origin.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let (rp, rg) = (pred[0], gt[0]);
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            dist(
                [p[0] - rp[0], p[1] - rp[1], p[2] - rp[2]],
                [g[0] - rg[0], g[1] - rg[1], g[2] - rg[2]],
            )
        })
        .sum::<f64>()
        / pred.len() as f64
}

/// Mean Euclidean distance without any alignment.
pub fn mean_distance(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / pred.len() as f64
}

/// `x ↦ scale·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = crate::body::rotation::apply(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub aligned: Vec<[f64; 3]>,
    pub transform: Similarity,
    /// Covariance rank below 2 or a zero-spread prediction; the transform is
    /// a best effort.
    pub degenerate: bool,
}

/// Least-squares similarity mapping `pred` onto `gt` (SVD with reflection
/// correction, so the rotation is always proper).
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Alignment, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Mismatch(pred.len(), gt.len()));
    }
    let n = pred.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mx = pred.iter().map(to_v).sum::<Vector3<f64>>() / n as f64;
    let my = gt.iter().map(to_v).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let x = to_v(p) - mx;
        let y = to_v(g) - my;
        cov += y * x.transpose();
        var_x += x.norm_squared();
    }
    cov /= n as f64;
    var_x /= n as f64;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let sv = svd.singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-12 * smax.max(1e-300)).count();
    let degenerate = rank < 2 || var_x <= 0.0;
    let scale = if var_x > 0.0 {
        (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_x
    } else {
        1.0
    };
    let t = my - scale * r * mx;
    let mut rot = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            rot[3 * a + b] = r[(a, b)];
        }
    }
    let transform = Similarity {
        scale,
        rotation: rot,
        translation: [t[0], t[1], t[2]],
    };
    Ok(Alignment {
        aligned: pred.iter().map(|p| transform.apply(*p)).collect(),
        transform,
        degenerate,
    })
}

/// Mean distance after Procrustes alignment.
pub fn pa_error(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64, MetricsError> {
    Ok(mean_distance(&procrustes_align(pred, gt)?.aligned, gt))
}

/// Fraction of visible keypoints within `alpha·torso` (inclusive); `None`
/// when nothing is visible.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], alpha: f64, torso: f64, visible: &[bool]) -> Option<f64> {
    let thr = alpha * torso;
    let mut seen = 0usize;
    let mut hit = 0usize;
    for ((p, g), v) in pred.iter().zip(gt).zip(visible) {
        if !v {
            continue;
        }
        seen += 1;
        if ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() <= thr {
            hit += 1;
        }
    }
    (seen > 0).then(|| hit as f64 / seen as f64)
}

/// Pelvis-to-neck distance of a 2-D skeleton.
pub fn torso_length(tree: &KinematicTree, gt2d: &[[f64; 2]]) -> f64 {
    let p = tree.joint(JointRole::Pelvis).unwrap_or(0);
    let n = tree.joint(JointRole::Neck).unwrap_or(p);
    ((gt2d[p][0] - gt2d[n][0]).powi(2) + (gt2d[p][1] - gt2d[n][1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<usize>,
}

/// Ankle, knee, wrist and elbow groups.
pub fn default_groups(tree: &KinematicTree) -> Vec<JointGroup> {
    use JointRole::*;
    let group = |name: &str, roles: [JointRole; 2]| JointGroup {
        name: name.to_string(),
        joints: roles.iter().filter_map(|r| tree.joint(*r)).collect(),
    };
    vec![
        group("ankle", [LeftAnkle, RightAnkle]),
        group("knee", [LeftKnee, RightKnee]),
        group("wrist", [LeftWrist, RightWrist]),
        group("elbow", [LeftElbow, RightElbow]),
    ]
}

/// One sample's 2-D prediction and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PckInput {
    pub pred: Vec<[f64; 2]>,
    pub gt: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub torso: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckTable {
    pub alphas: Vec<f64>,
    pub overall: Vec<f64>,
    pub groups: Vec<PckSeries>,
}

fn mean_pck(inputs: &[PckInput], alpha: f64, joints: Option<&[usize]>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in inputs {
        if !(s.torso > 0.0) {
            continue;
        }
        let v = match joints {
            None => pck(&s.pred, &s.gt, alpha, s.torso, &s.visible),
            Some(js) => {
                let vis: Vec<bool> = (0..s.visible.len()).map(|j| s.visible[j] && js.contains(&j)).collect();
                pck(&s.pred, &s.gt, alpha, s.torso, &vis)
            }
        };
        if let Some(v) = v {
            acc += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Mean per-sample PCK at each threshold, overall and per joint group.
pub fn pck_curve(inputs: &[PckInput], alphas: &[f64], groups: &[JointGroup]) -> Result<PckTable, MetricsError> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) || alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::BadAlphas);
    }
    Ok(PckTable {
        alphas: alphas.to_vec(),
        overall: alphas.iter().map(|a| mean_pck(inputs, *a, None)).collect(),
        groups: groups
            .iter()
            .map(|g| PckSeries {
                name: g.name.clone(),
                values: alphas.iter().map(|a| mean_pck(inputs, *a, Some(&g.joints))).collect(),
            })
            .collect(),
    })
}

/// `(mpjpe / f1, mve / f1)`.
pub fn normalized_metrics(mpjpe: f64, mve: f64, f1: f64) -> Result<(f64, f64), MetricsError> {
    if !(f1 > 0.0 && f1 <= 1.0) {
        return Err(MetricsError::BadF1(f1));
    }
    Ok((mpjpe / f1, mve / f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckEntry {
    pub alpha: f64,
    pub value: f64,
}

/// Dataset-level metrics in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub vertex_err: f64,
    pub pa_vertex_err: f64,
    pub pck: Vec<PckEntry>,
    pub count: usize,
}

impl EvalReport {
    pub fn pck_at(&self, alpha: f64) -> Option<f64> {
        self.pck.iter().find(|e| (e.alpha - alpha).abs() < 1e-12).map(|e| e.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "count,{}", self.count);
        let _ = writeln!(s, "mpjpe_mm,{}", self.mpjpe);
        let _ = writeln!(s, "pa_mpjpe_mm,{}", self.pa_mpjpe);
        let _ = writeln!(s, "vertex_err_mm,{}", self.vertex_err);
        let _ = writeln!(s, "pa_vertex_err_mm,{}", self.pa_vertex_err);
        for e in &self.pck {
            let _ = writeln!(s, "pck@{},{}", e.alpha, e.value);
        }
        s
    }
}

/// Running sums for [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    mpjpe: f64,
    pa_mpjpe: f64,
    vertex: f64,
    pa_vertex: f64,
    count: usize,
    pck_inputs: Vec<PckInput>,
}

impl EvalAccumulator {
    /// Adds one sample; positions in metres, reported in millimetres.
    pub fn add(
        &mut self,
        joints: (&[[f64; 3]], &[[f64; 3]]),
        vertices: (&[[f64; 3]], &[[f64; 3]]),
        pck_input: PckInput,
    ) -> Result<(), MetricsError> {
        let (pj, gj) = joints;
        let (pv, gv) = vertices;
        self.mpjpe += 1000.0 * mpjpe(pj, gj);
        self.pa_mpjpe += 1000.0 * pa_error(pj, gj)?;
        // Vertices share the joints' pelvis alignment.
        let (rp, rg) = (pj[0], gj[0]);
        let shift = |v: &[[f64; 3]], r: [f64; 3]| -> Vec<[f64; 3]> {
            v.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect()
        };
        self.vertex += 1000.0 * mean_distance(&shift(pv, rp), &shift(gv, rg));
        self.pa_vertex += 1000.0 * pa_error(pv, gv)?;
        self.count += 1;
        self.pck_inputs.push(pck_input);
        Ok(())
    }

    pub fn pck_inputs(&self) -> &[PckInput] {
        &self.pck_inputs
    }

    pub fn finish(&self, alphas: &[f64]) -> Result<EvalReport, MetricsError> {
        let n = self.count.max(1) as f64;
        let table = pck_curve(&self.pck_inputs, alphas, &[])?;
        Ok(EvalReport {
            mpjpe: self.mpjpe / n,
            pa_mpjpe: self.pa_mpjpe / n,
            vertex_err: self.vertex / n,
            pa_vertex_err: self.pa_vertex / n,
            pck: alphas
                .iter()
                .zip(&table.overall)
                .map(|(a, v)| PckEntry { alpha: *a, value: *v })
                .collect(),
            count: self.count,
        })
    }
}

impl PckTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,overall");
        for g in &self.groups {
            s.push(',');
            s.push_str(&g.name);
        }
        s.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            let _ = write!(s, "{a},{}", self.overall[i]);
            for g in &self.groups {
                let _ = write!(s, ",{}", g.values[i]);
            }
            s.push('\n');
        }
        s
    }

    /// Self-contained SVG line plot of every series.
    pub fn to_svg(&self, title: &str) -> String {
        let series: Vec<(&str, &[f64])> = std::iter::once(("overall", self.overall.as_slice()))
            .chain(self.groups.iter().map(|g| (g.name.as_str(), g.values.as_slice())))
            .collect();
        svg_plot(title, "alpha (x torso length)", "PCK", &self.alphas, &series)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with y fixed to `[0, 1]`.
pub fn svg_plot(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let (w, h) = (480.0, 320.0);
    let (l, r, t, b) = (56.0, 110.0, 36.0, 44.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let xmin = xs.first().copied().unwrap_or(0.0);
    let xmax = xs.last().copied().unwrap_or(1.0);
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| {
        if xmax > xmin {
            l + (x - xmin) / span * pw
        } else {
            l + pw / 2.0
        }
    };
    let py = |y: f64| t + (1.0 - y.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, l + pw / 2.0, escape(title));
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(s, r##"<line x1="{l}" x2="{0}" y1="{1}" y2="{1}" stroke="#ddd"/>"##, l + pw, py(y));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.1}</text>"#, l - 4.0, py(y) + 4.0);
    }
    for x in xs {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, px(*x), t + ph + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, l + pw / 2.0, h - 8.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        t + ph / 2.0,
        escape(ylabel)
    );
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = xs.iter().zip(ys.iter()).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        if pts.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        for (x, y) in xs.iter().zip(ys.iter()) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = t + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, l + pw + 10.0, l + pw + 28.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, l + pw + 32.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
