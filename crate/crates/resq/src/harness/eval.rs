//! Evaluation: Acc@0.5 with query-length and attribute break-downs, the
//! prediction dump, and relative gain between two reports.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{attribute_tags, GroundingSample};
use crate::grounding::{iou, Box2D};
use crate::model::Model;
use crate::subquery::{reg_coverage, reg_diversity};
use crate::tensor::layers::Mode;
use crate::{Error, Result};

/// Query-length bins: 1-2 / 3 / 4-5 / 6+ words.
pub const DEFAULT_BINS: [(usize, usize); 4] = [(1, 2), (3, 3), (4, 5), (6, usize::MAX)];

pub fn bin_label(lo: usize, hi: usize) -> String {
    if hi == usize::MAX {
        format!("{lo}+")
    } else if lo == hi {
        format!("{lo}")
    } else {
        format!("{lo}-{hi}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BinStat {
    pub label: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Acc@0.5 over the whole set.
    pub overall: f64,
    pub total: usize,
    pub correct: usize,
    /// Break-down by query length.
    pub bins: Vec<BinStat>,
    /// Break-down by attribute keywords, recomputed from the tokens.
    pub attributes: Vec<BinStat>,
    /// Mean coverage/diversity penalties of the attention matrices on this
    /// set (0 when the strategy defines no score vectors).
    pub mean_coverage: f64,
    pub mean_diversity: f64,
    /// Per-bin relative gain vs a baseline report; None marks bins where the
    /// baseline accuracy is zero (undefined, not infinity).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_gain: Option<Vec<Option<f64>>>,
}

/// One line of the prediction dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub sample_id: String,
    pub predicted_box: [f64; 4],
    pub confidence: f64,
    pub gt_box: [f64; 4],
    pub iou: f64,
    pub query_length: usize,
    pub attribute_tags: Vec<String>,
}

/// Per-sample evaluation outcome before aggregation.
struct SampleEval {
    record: DumpRecord,
    coverage: f64,
    diversity: f64,
    has_scores: bool,
}

fn eval_chunk(model: &Model, chunk: &[GroundingSample]) -> Result<Vec<SampleEval>> {
    let refs: Vec<&GroundingSample> = chunk.iter().collect();
    let ids: Vec<Vec<usize>> = refs
        .iter()
        .map(|s| model.vocab.encode(&s.tokens))
        .collect::<Result<_>>()?;
    let images = Model::images_tensor(&refs);
    let out = model.forward_batch(images, &ids, Mode::Eval)?;
    let raw = out.tape.value(out.raw);
    let mut evals = Vec::with_capacity(chunk.len());
    for (b, s) in chunk.iter().enumerate() {
        let view = raw
            .index_axis(ndarray::Axis(0), b)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("(45, hf, wf)");
        let pred = crate::grounding::select_prediction(&view, &model.anchors, model.stride());
        let gt = Box2D::from_xywh(s.bbox);
        let i = iou(&pred.bbox, &gt);
        let (coverage, diversity, has_scores) = match &out.alphas {
            Some(alphas) => {
                let per_round = &alphas[b];
                let n = s.tokens.len();
                let mut a = Array2::<f64>::zeros((n, per_round.len()));
                for (k, &av) in per_round.iter().enumerate() {
                    let v = out.tape.value(av);
                    for (ni, &x) in v.iter().enumerate() {
                        a[[ni, k]] = x;
                    }
                }
                (reg_coverage(&a), reg_diversity(&a), true)
            }
            None => (0.0, 0.0, false),
        };
        evals.push(SampleEval {
            record: DumpRecord {
                sample_id: s.id.clone(),
                predicted_box: pred.bbox.xywh(),
                confidence: pred.confidence,
                gt_box: s.bbox,
                iou: i,
                query_length: s.tokens.len(),
                attribute_tags: attribute_tags(&s.tokens),
            },
            coverage,
            diversity,
            has_scores,
        });
    }
    Ok(evals)
}

/// Acc@0.5 evaluation with the default length bins.
pub fn evaluate(model: &Model, samples: &[GroundingSample], dump: Option<&Path>) -> Result<EvalReport> {
    evaluate_with_bins(model, samples, &DEFAULT_BINS, dump)
}

/// A prediction counts as correct when IoU with the ground truth is at
/// least 0.5 (strict boundary: 0.49 fails, 0.5 passes). Bins are recomputed
/// from the tokens, never trusted from the manifest meta.
pub fn evaluate_with_bins(
    model: &Model,
    samples: &[GroundingSample],
    bins: &[(usize, usize)],
    dump: Option<&Path>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate on an empty set".into()));
    }
    let chunks: Vec<&[GroundingSample]> = samples.chunks(16).collect();
    let evals: Vec<Vec<SampleEval>> = chunks
        .par_iter()
        .map(|c| eval_chunk(model, c))
        .collect::<Result<_>>()?;
    let evals: Vec<SampleEval> = evals.into_iter().flatten().collect();

    if let Some(path) = dump {
        let mut f = std::fs::File::create(path)?;
        for e in &evals {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&e.record).map_err(|x| Error::Integrity(x.to_string()))?
            )?;
        }
    }
    aggregate(&evals, bins)
}

fn aggregate(evals: &[SampleEval], bins: &[(usize, usize)]) -> Result<EvalReport> {
    let correct_of = |pred: &DumpRecord| pred.iou >= 0.5;
    let total = evals.len();
    let correct = evals.iter().filter(|e| correct_of(&e.record)).count();

    let mut bin_stats = Vec::new();
    for &(lo, hi) in bins {
        let in_bin: Vec<&SampleEval> = evals
            .iter()
            .filter(|e| e.record.query_length >= lo && e.record.query_length <= hi)
            .collect();
        let c = in_bin.iter().filter(|e| correct_of(&e.record)).count();
        bin_stats.push(BinStat {
            label: bin_label(lo, hi),
            count: in_bin.len(),
            correct: c,
            accuracy: if in_bin.is_empty() {
                0.0
            } else {
                c as f64 / in_bin.len() as f64
            },
        });
    }
    let binned: usize = bin_stats.iter().map(|b| b.count).sum();
    if binned != total {
        return Err(Error::Contract(format!(
            "length bins cover {binned} of {total} samples"
        )));
    }

    let mut attr_stats = Vec::new();
    for tag in ["color", "location", "size"] {
        let in_tag: Vec<&SampleEval> = evals
            .iter()
            .filter(|e| e.record.attribute_tags.iter().any(|t| t == tag))
            .collect();
        let c = in_tag.iter().filter(|e| correct_of(&e.record)).count();
        attr_stats.push(BinStat {
            label: tag.to_string(),
            count: in_tag.len(),
            correct: c,
            accuracy: if in_tag.is_empty() {
                0.0
            } else {
                c as f64 / in_tag.len() as f64
            },
        });
    }

    let scored: Vec<&SampleEval> = evals.iter().filter(|e| e.has_scores).collect();
    let (mean_cov, mean_div) = if scored.is_empty() {
        (0.0, 0.0)
    } else {
        (
            scored.iter().map(|e| e.coverage).sum::<f64>() / scored.len() as f64,
            scored.iter().map(|e| e.diversity).sum::<f64>() / scored.len() as f64,
        )
    };

    Ok(EvalReport {
        overall: correct as f64 / total as f64,
        total,
        correct,
        bins: bin_stats,
        attributes: attr_stats,
        mean_coverage: mean_cov,
        mean_diversity: mean_div,
        relative_gain: None,
    })
}

/// Element-wise (ours - base) / base per length bin; a zero-accuracy
/// baseline bin yields None rather than infinity. Binnings must agree.
pub fn relative_gain(ours: &EvalReport, base: &EvalReport) -> Result<Vec<Option<f64>>> {
    if ours.bins.len() != base.bins.len()
        || ours
            .bins
            .iter()
            .zip(&base.bins)
            .any(|(a, b)| a.label != b.label)
    {
        return Err(Error::Contract("reports use different binnings".into()));
    }
    Ok(ours
        .bins
        .iter()
        .zip(&base.bins)
        .map(|(o, b)| {
            if b.accuracy == 0.0 {
                None
            } else {
                Some((o.accuracy - b.accuracy) / b.accuracy)
            }
        })
        .collect())
}

/// Recount Acc@0.5 from a dump file; the consistency oracle for `evaluate`.
pub fn recount_dump(path: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut total = 0;
    let mut correct = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        total += 1;
        if rec.iou >= 0.5 {
            correct += 1;
        }
    }
    Ok((correct, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_eval(query_length: usize, iou: f64, tags: &[&str]) -> SampleEval {
        SampleEval {
            record: DumpRecord {
                sample_id: format!("s{query_length}_{iou}"),
                predicted_box: [0.0; 4],
                confidence: 0.0,
                gt_box: [0.0; 4],
                iou,
                query_length,
                attribute_tags: tags.iter().map(|s| s.to_string()).collect(),
            },
            coverage: 0.0,
            diversity: 0.0,
            has_scores: false,
        }
    }

    #[test]
    fn strict_iou_boundary() {
        let evals = vec![fake_eval(2, 0.49, &[]), fake_eval(2, 0.5, &[])];
        let r = aggregate(&evals, &DEFAULT_BINS).unwrap();
        assert_eq!(r.correct, 1, "0.49 fails, 0.50 passes");
        assert_eq!(r.overall, 0.5);
    }

    #[test]
    fn bins_partition_and_accuracy() {
        let evals = vec![
            fake_eval(1, 0.9, &["color"]),
            fake_eval(3, 0.9, &[]),
            fake_eval(4, 0.1, &["location"]),
            fake_eval(5, 0.9, &[]),
            fake_eval(7, 0.2, &["location", "size"]),
            fake_eval(2, 0.9, &[]),
            fake_eval(6, 0.9, &[]),
            fake_eval(3, 0.4, &[]),
            fake_eval(8, 0.9, &[]),
            fake_eval(1, 0.3, &[]),
        ];
        let r = aggregate(&evals, &DEFAULT_BINS).unwrap();
        assert_eq!(r.total, 10);
        let counts: Vec<usize> = r.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts.iter().sum::<usize>(), 10, "bins partition the set");
        assert_eq!(counts, vec![3, 2, 2, 3]);
        assert_eq!(r.correct, 6);
        assert!((r.overall - 0.6).abs() < 1e-12);
        let loc = r.attributes.iter().find(|a| a.label == "location").unwrap();
        assert_eq!(loc.count, 2);
        assert_eq!(loc.correct, 0);
    }

    #[test]
    fn relative_gain_basics() {
        let evals_a = vec![fake_eval(1, 0.9, &[]), fake_eval(4, 0.9, &[])];
        let evals_b = vec![fake_eval(1, 0.9, &[]), fake_eval(4, 0.1, &[])];
        let a = aggregate(&evals_a, &DEFAULT_BINS).unwrap();
        let b = aggregate(&evals_b, &DEFAULT_BINS).unwrap();
        let g = relative_gain(&a, &a).unwrap();
        for v in g.into_iter().flatten() {
            assert_eq!(v, 0.0);
        }
        let g = relative_gain(&a, &b).unwrap();
        assert_eq!(g[0], Some(0.0));
        assert!(g[3].is_none(), "empty bin in base: undefined marker");
        // bin "4-5": base 0 accuracy -> undefined
        assert!(g[2].is_none());
    }

    #[test]
    fn relative_gain_matches_reported_breakdown_shape() {
        // base 0.5 -> ours 0.6 must be 0.2
        let base = vec![fake_eval(1, 0.9, &[]), fake_eval(1, 0.1, &[])];
        let ours = vec![fake_eval(1, 0.9, &[]), fake_eval(1, 0.9, &[])];
        let rb = aggregate(&base, &DEFAULT_BINS).unwrap();
        let ro = aggregate(&ours, &DEFAULT_BINS).unwrap();
        let g = relative_gain(&ro, &rb).unwrap();
        assert_eq!(g[0], Some(1.0));
        let base2 = vec![fake_eval(1, 0.9, &[]), fake_eval(1, 0.1, &[]),
                         fake_eval(1, 0.9, &[]), fake_eval(1, 0.1, &[])];
        let ours2 = vec![fake_eval(1, 0.9, &[]), fake_eval(1, 0.9, &[]),
                         fake_eval(1, 0.51, &[]), fake_eval(1, 0.2, &[])];
        let rb2 = aggregate(&base2, &DEFAULT_BINS).unwrap();
        let ro2 = aggregate(&ours2, &DEFAULT_BINS).unwrap();
        let g2 = relative_gain(&ro2, &rb2).unwrap();
        assert!((g2[0].unwrap() - 0.5).abs() < 1e-12, "0.5 -> 0.75 is +50%");
    }
}
