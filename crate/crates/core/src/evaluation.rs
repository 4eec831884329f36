//! Classification metrics: confusion matrices, accuracy, binary projections
//! of three-class probabilities, ROC curves and AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(true_labels: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::Contract(format!("{} true labels but {} predictions", true_labels.len(), predicted.len())));
    }
    let mut counts = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Contract(format!("label pair ({t}, {p}) outside 0..{num_classes}")));
        }
        counts[t][p] += 1;
    }
    let class_names = (0..num_classes).map(|i| format!("class{i}")).collect();
    Ok(ConfusionMatrix { counts, class_names })
}

/// Row-normalized confusion matrix. Rows with no samples stay zero and are
/// listed in `zero_rows`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub rows: Vec<Vec<f64>>,
    pub zero_rows: Vec<usize>,
}

pub fn normalize_confusion(cm: &ConfusionMatrix) -> NormalizedConfusion {
    let mut zero_rows = Vec::new();
    let rows = cm
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                zero_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    NormalizedConfusion { rows, zero_rows }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Binary problems derived from (normal, TB, cancer) probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryProjection {
    /// All samples; positive = TB or cancer; score = p(TB) + p(cancer).
    #[serde(rename = "ABNORMAL_VS_NORMAL")]
    AbnormalVsNormal,
    /// TB and cancer samples only; positive = cancer;
    /// score = p(cancer) / (p(TB) + p(cancer)).
    #[serde(rename = "TB_VS_CANCER")]
    TbVsCancer,
    /// All samples; positive = cancer; score = p(cancer).
    #[serde(rename = "CANCER_VS_REST")]
    CancerVsRest,
}

impl BinaryProjection {
    pub const ALL: [BinaryProjection; 3] =
        [BinaryProjection::AbnormalVsNormal, BinaryProjection::TbVsCancer, BinaryProjection::CancerVsRest];

    pub fn slug(self) -> &'static str {
        match self {
            BinaryProjection::AbnormalVsNormal => "abnormal_vs_normal",
            BinaryProjection::TbVsCancer => "tb_vs_cancer",
            BinaryProjection::CancerVsRest => "cancer_vs_rest",
        }
    }

    pub fn score_rule(self) -> &'static str {
        match self {
            BinaryProjection::AbnormalVsNormal => "all samples; positive = tb|cancer; score = p(tb) + p(cancer)",
            BinaryProjection::TbVsCancer => {
                "tb and cancer samples; positive = cancer; score = p(cancer) / (p(tb) + p(cancer)), 0.5 if the sum < 1e-12"
            }
            BinaryProjection::CancerVsRest => "all samples; positive = cancer; score = p(cancer)",
        }
    }
}

const NORMAL: usize = 0;
const TB: usize = 1;
const CANCER: usize = 2;

/// Scores and binary labels (`true` = positive) for one projection.
pub fn binary_scores(
    probabilities: &Tensor,
    true_labels: &[usize],
    projection: BinaryProjection,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let shape = probabilities.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Contract(format!("binary projections need N×3 probabilities, got {shape:?}")));
    }
    if shape[0] != true_labels.len() {
        return Err(Error::Contract(format!("{} probability rows but {} labels", shape[0], true_labels.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, &y) in true_labels.iter().enumerate() {
        let p = probabilities.row(i);
        match projection {
            BinaryProjection::AbnormalVsNormal => {
                scores.push(p[TB] + p[CANCER]);
                labels.push(y != NORMAL);
            }
            BinaryProjection::TbVsCancer => {
                if y == NORMAL {
                    continue;
                }
                let denom = p[TB] + p[CANCER];
                scores.push(if denom < 1e-12 { 0.5 } else { p[CANCER] / denom });
                labels.push(y == CANCER);
            }
            BinaryProjection::CancerVsRest => {
                scores.push(p[CANCER]);
                labels.push(y == CANCER);
            }
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Evaluation(format!(
            "{}: {positives} positives among {} samples, AUC undefined",
            projection.slug(),
            labels.len()
        )));
    }
    Ok((scores, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct RocPoint {
    /// Samples scoring at or above this value are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

impl Serialize for RocPoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("RocPoint", 3)?;
        if self.threshold.is_finite() {
            st.serialize_field("threshold", &self.threshold)?;
        } else {
            st.serialize_field("threshold", &format_threshold(self.threshold))?;
        }
        st.serialize_field("fpr", &self.fpr)?;
        st.serialize_field("tpr", &self.tpr)?;
        st.end()
    }
}

fn format_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{t}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// CSV with header `threshold,fpr,tpr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", format_threshold(p.threshold), p.fpr, p.tpr).unwrap();
        }
        out
    }
}

/// ROC curve with one point per distinct score (plus the `+∞` and `−∞`
/// endpoints) and its trapezoidal area. Tied scores form one diagonal
/// segment, so the area equals the Mann–Whitney statistic with half credit
/// for ties.
pub fn roc_and_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // twice the area in count units: Σ Δfp · (tp_prev + tp_new)
    let mut doubled_area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - fp0) as f64 * (tp0 + tp) as f64;
        points.push(RocPoint { threshold, fpr: fp as f64 / n, tpr: tp as f64 / p });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });
    Ok(RocCurve { points, auc: doubled_area / (2.0 * p * n) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionReport {
    pub projection: BinaryProjection,
    pub score_rule: &'static str,
    pub positives: usize,
    pub negatives: usize,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

/// Pooled metrics for one fine-tuning mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Diagonal of the normalized confusion matrix, in class order.
    pub per_class_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub normalized_confusion: NormalizedConfusion,
    pub projections: Vec<ProjectionReport>,
}

impl EvalReport {
    pub fn auc(&self, projection: BinaryProjection) -> Option<f64> {
        self.projections.iter().find(|p| p.projection == projection).map(|p| p.auc)
    }

    pub fn roc_curve(&self, projection: BinaryProjection) -> Option<RocCurve> {
        self.projections
            .iter()
            .find(|p| p.projection == projection)
            .map(|p| RocCurve { points: p.roc.clone(), auc: p.auc })
    }
}

/// Builds the report from pooled held-out predictions. Class order must be
/// (normal, TB, cancer).
pub fn build_report(
    mode: &str,
    probabilities: &Tensor,
    predicted: &[usize],
    true_labels: &[usize],
    class_names: &[String],
) -> Result<EvalReport> {
    let k = class_names.len();
    let mut confusion = confusion_matrix(true_labels, predicted, k)?;
    confusion.class_names = class_names.to_vec();
    let normalized_confusion = normalize_confusion(&confusion);
    let per_class_accuracy = (0..k).map(|i| normalized_confusion.rows[i][i]).collect();
    let projections = BinaryProjection::ALL
        .iter()
        .map(|&projection| {
            let (scores, labels) = binary_scores(probabilities, true_labels, projection)?;
            let curve = roc_and_auc(&scores, &labels)?;
            let positives = labels.iter().filter(|&&l| l).count();
            Ok(ProjectionReport {
                projection,
                score_rule: projection.score_rule(),
                positives,
                negatives: labels.len() - positives,
                auc: curve.auc,
                roc: curve.points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mode: mode.to_string(),
        samples: true_labels.len(),
        accuracy: accuracy(&confusion)?,
        per_class_accuracy,
        confusion,
        normalized_confusion,
        projections,
    })
}

/// Plain-text table with one row per report: accuracy and the three AUCs.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    write!(
        out,
        "{:<10} {:>6} {:>18} {:>14} {:>16}",
        "method", "ACC", "AUC abnormal/norm", "AUC tb/cancer", "AUC cancer/rest"
    )
    .unwrap();
    if let Some(first) = reports.first() {
        for name in &first.confusion.class_names {
            write!(out, " {:>12}", format!("acc {name}")).unwrap();
        }
    }
    out.push('\n');
    for r in reports {
        let auc = |p| r.auc(p).map_or("-".to_string(), |v| format!("{v:.3}"));
        write!(
            out,
            "{:<10} {:>6.3} {:>18} {:>14} {:>16}",
            r.mode,
            r.accuracy,
            auc(BinaryProjection::AbnormalVsNormal),
            auc(BinaryProjection::TbVsCancer),
            auc(BinaryProjection::CancerVsRest)
        )
        .unwrap();
        for a in &r.per_class_accuracy {
            write!(out, " {a:>12.3}").unwrap();
        }
        out.push('\n');
    }
    out
}
