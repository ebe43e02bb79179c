//! Scoring, equal error rate and per-attack breakdowns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Key;
use crate::error::{Error, Result};

/// Label used for the pooled column of an EER table.
pub const POOLED: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub utt_id: String,
    /// `-` for bonafide trials.
    pub attack: String,
    pub key: Key,
    /// Higher means more bonafide.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    /// Fraction of spoof trials scored at or above the threshold.
    pub far: f64,
    /// Fraction of bonafide trials scored below the threshold.
    pub frr: f64,
}

/// Error rates at every distinct score, in increasing threshold order.
pub fn det_points(scores: &[TrialScore]) -> Result<Vec<DetPoint>> {
    let mut pairs: Vec<(f64, Key)> = Vec::with_capacity(scores.len());
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::arg(format!("score of {} is not finite", s.utt_id)));
        }
        pairs.push((s.score, s.key));
    }
    let n_bona = pairs.iter().filter(|p| p.1 == Key::Bonafide).count();
    let n_spoof = pairs.len() - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::arg(format!(
            "EER needs both classes, got {n_bona} bonafide and {n_spoof} spoof"
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    // Trials strictly below the current threshold.
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let theta = pairs[i].0;
        points.push(DetPoint {
            threshold: theta,
            far: (n_spoof - spoof_below) as f64 / n_spoof as f64,
            frr: bona_below as f64 / n_bona as f64,
        });
        while i < pairs.len() && pairs[i].0 == theta {
            match pairs[i].1 {
                Key::Bonafide => bona_below += 1,
                Key::Spoof => spoof_below += 1,
            }
            i += 1;
        }
    }
    Ok(points)
}

/// Mean of FAR and FRR at the threshold where they are closest. Among equally
/// close thresholds the lowest mean wins.
pub fn compute_eer(scores: &[TrialScore]) -> Result<Eer> {
    let points = det_points(scores)?;
    let mut best: Option<(f64, f64, f64)> = None;
    for p in points {
        let gap = (p.far - p.frr).abs();
        let mean = (p.far + p.frr) / 2.0;
        let better = match best {
            None => true,
            Some((g, m, _)) => gap < g || (gap == g && mean < m),
        };
        if better {
            best = Some((gap, mean, p.threshold));
        }
    }
    let (_, eer, threshold) = best.expect("det_points is never empty");
    Ok(Eer { eer, threshold })
}

/// EER of every attack against all bonafide trials, followed by the pooled
/// [`POOLED`] entry. Attacks appear in sorted order.
pub fn per_attack_eer(scores: &[TrialScore]) -> Result<Vec<(String, f64)>> {
    let mut by_attack: BTreeMap<&str, Vec<TrialScore>> = BTreeMap::new();
    let bona: Vec<TrialScore> = scores
        .iter()
        .filter(|s| s.key == Key::Bonafide)
        .cloned()
        .collect();
    for s in scores.iter().filter(|s| s.key == Key::Spoof) {
        if s.attack == "-" || s.attack.is_empty() {
            return Err(Error::arg(format!(
                "spoof trial {} has no attack label",
                s.utt_id
            )));
        }
        by_attack.entry(&s.attack).or_default().push(s.clone());
    }
    let mut table = Vec::new();
    for (attack, spoofs) in by_attack {
        let mut subset = bona.clone();
        subset.extend(spoofs);
        table.push((attack.to_string(), compute_eer(&subset)?.eer));
    }
    table.push((POOLED.to_string(), compute_eer(scores)?.eer));
    Ok(table)
}

/// Header plus one row of percentages, in table order.
pub fn eer_table_csv(table: &[(String, f64)]) -> String {
    let header: Vec<&str> = table.iter().map(|(a, _)| a.as_str()).collect();
    let row: Vec<String> = table
        .iter()
        .map(|(_, e)| format!("{:.4}", e * 100.0))
        .collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}

/// One `utt_id attack key score` line per trial.
pub fn format_scores(scores: &[TrialScore]) -> String {
    scores
        .iter()
        .map(|s| {
            format!(
                "{} {} {} {:.17e}\n",
                s.utt_id,
                s.attack,
                s.key.as_str(),
                s.score
            )
        })
        .collect()
}

pub fn write_scores(path: &Path, scores: &[TrialScore]) -> Result<()> {
    fs::write(path, format_scores(scores))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [utt_id, attack, key, score] = fields[..] else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let key = match key {
            "bonafide" => Key::Bonafide,
            "spoof" => Key::Spoof,
            other => return Err(bad(format!("unknown key {other:?}"))),
        };
        let score = score
            .parse()
            .map_err(|_| bad(format!("bad score {score:?}")))?;
        out.push(TrialScore {
            utt_id: utt_id.into(),
            attack: attack.into(),
            key,
            score,
        });
    }
    Ok(out)
}
