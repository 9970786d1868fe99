//! Stage timing logs and the summary table built from them.
//!
//! The log is a CSV of `unit,stage,frames,seconds` rows. A unit is one piece
//! of work (a customized subject, one ablation seed, one CLI call); its
//! `total` row is the wall time around the whole unit, the other rows are the
//! stages inside it.

use std::collections::BTreeMap;
use std::time::Instant;

use subjvid_core::synth::FRAMES_PER_VIDEO;

use crate::error::{HarnessError, Result};
use crate::pipeline::fmt_f;

pub const TOTAL: &str = "total";
pub const HEADER: &str = "unit,stage,frames,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub unit: String,
    pub stage: String,
    pub frames: usize,
    pub seconds: f64,
}

/// Times the stages of one unit back to back.
pub struct UnitTimer {
    unit: String,
    frames: usize,
    start: Instant,
    mark: Instant,
    rows: Vec<TimingRow>,
}

impl UnitTimer {
    pub fn start(unit: impl Into<String>, frames: usize) -> Self {
        let now = Instant::now();
        Self {
            unit: unit.into(),
            frames,
            start: now,
            mark: now,
            rows: Vec::new(),
        }
    }

    /// Closes the current stage under `stage` and starts the next one.
    pub fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.rows.push(TimingRow {
            unit: self.unit.clone(),
            stage: stage.to_string(),
            frames: self.frames,
            seconds: (now - self.mark).as_secs_f64(),
        });
        self.mark = now;
    }

    /// Adds the total row. The total ends at the last lap so that the stages
    /// partition it; a timer with no laps runs until now.
    pub fn finish(mut self) -> Vec<TimingRow> {
        let end = if self.rows.is_empty() { Instant::now() } else { self.mark };
        let total = TimingRow {
            unit: self.unit.clone(),
            stage: TOTAL.to_string(),
            frames: self.frames,
            seconds: (end - self.start).as_secs_f64(),
        };
        self.rows.push(total);
        self.rows
    }
}

pub fn to_csv(rows: &[TimingRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.unit, r.stage, r.frames, fmt_f(r.seconds));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<TimingRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h.trim() == HEADER => {}
        Some(h) => return Err(HarnessError::Format(format!("timing log header {h:?}, expected {HEADER:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || HarnessError::Format(format!("timing log line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TimingRow {
                unit: f[0].to_string(),
                stage: f[1].to_string(),
                frames: f[2].parse().map_err(|_| bad())?,
                seconds: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: String,
    pub count: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub stages: Vec<StageSummary>,
    /// Sum of the `total` rows.
    pub total: f64,
    /// Videos covered: units with a positive frame count.
    pub videos: usize,
    pub frames_per_video: usize,
}

impl TimingReport {
    pub fn from_rows(rows: &[TimingRow]) -> Self {
        let mut stages: BTreeMap<&str, StageSummary> = BTreeMap::new();
        let mut total = 0.0;
        let mut videos = 0;
        let mut frames_per_video = None;
        for r in rows {
            if r.stage == TOTAL {
                total += r.seconds;
                if r.frames > 0 {
                    videos += 1;
                    frames_per_video.get_or_insert(r.frames);
                }
                continue;
            }
            let s = stages.entry(&r.stage).or_insert_with(|| StageSummary {
                stage: r.stage.clone(),
                count: 0,
                seconds: 0.0,
            });
            s.count += 1;
            s.seconds += r.seconds;
        }
        Self {
            stages: stages.into_values().collect(),
            total,
            videos,
            frames_per_video: frames_per_video.unwrap_or(FRAMES_PER_VIDEO),
        }
    }

    pub fn stage_sum(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    /// The stages account for the unit totals to within 1%.
    pub fn consistent(&self) -> bool {
        (self.stage_sum() - self.total).abs() <= 0.01 * self.total.abs()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// `stage,count,seconds,share` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,count,seconds,share\n");
        if self.is_empty() {
            return s;
        }
        for st in &self.stages {
            let share = if self.total > 0.0 { st.seconds / self.total } else { 0.0 };
            s += &format!("{},{},{},{}\n", st.stage, st.count, fmt_f(st.seconds), fmt_f(share));
        }
        s += &format!("{TOTAL},{},{},{}\n", self.videos, fmt_f(self.total), fmt_f(1.0));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>12} {:>7}\n", "stage", "count", "seconds", "share");
        if self.is_empty() {
            return s;
        }
        for st in &self.stages {
            let share = if self.total > 0.0 { 100.0 * st.seconds / self.total } else { 0.0 };
            s += &format!("{:<16} {:>6} {:>12.3} {:>6.1}%\n", st.stage, st.count, st.seconds, share);
        }
        s += &format!("{:<16} {:>6} {:>12.3}\n", TOTAL, self.videos, self.total);
        s += &format!("frames per video: {}\n", self.frames_per_video);
        if self.videos > 0 {
            s += &format!(
                "seconds per video: {:.3}, per frame: {:.4}\n",
                self.total / self.videos as f64,
                self.total / (self.videos * self.frames_per_video) as f64
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_gives_empty_report() {
        let r = TimingReport::from_rows(&parse_csv("").unwrap());
        assert!(r.is_empty());
        assert_eq!(r.frames_per_video, 16);
        assert_eq!(r.to_csv(), "stage,count,seconds,share\n");
        let r = TimingReport::from_rows(&parse_csv(&format!("{HEADER}\n")).unwrap());
        assert!(r.is_empty());
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let rows = vec![
            TimingRow { unit: "seed_0".into(), stage: "sample".into(), frames: 16, seconds: 1.5 },
            TimingRow { unit: "seed_0".into(), stage: TOTAL.into(), frames: 16, seconds: 1.5 },
        ];
        assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn timer_stages_sum_to_total() {
        let mut t = UnitTimer::start("u", 16);
        for stage in ["a", "b", "c"] {
            let mut x = 0u64;
            for i in 0..200_000u64 {
                x = x.wrapping_add(i * i);
            }
            std::hint::black_box(x);
            t.lap(stage);
        }
        let r = TimingReport::from_rows(&t.finish());
        assert_eq!(r.stages.len(), 3);
        assert_eq!(r.videos, 1);
        assert!(r.consistent(), "stages {} vs total {}", r.stage_sum(), r.total);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_csv("nope\n").is_err());
        assert!(parse_csv(&format!("{HEADER}\na,b,c\n")).is_err());
    }
}
