use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::SegmentMetrics;
use crate::adapt::CanaryStats;
use crate::error::{Error, Result};

/// Summed segment counts with derived rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub segments: u64,
    pub frames: u64,
    pub normal_frames: u64,
    pub alarms: u64,
    pub true_alarms: u64,
    pub false_alarms: u64,
    pub arc_events: u64,
    pub missed_events: u64,
    pub false_alarm_rate: f64,
    pub miss_rate: f64,
    /// `None` when there were no alarms.
    pub precision: Option<f64>,
}

impl GroupMetrics {
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a SegmentMetrics>) -> Self {
        let mut g = GroupMetrics::default();
        for s in segments {
            g.segments += 1;
            g.frames += s.frames as u64;
            g.normal_frames += s.normal_frames as u64;
            g.alarms += s.alarms as u64;
            g.true_alarms += s.true_alarms as u64;
            g.false_alarms += s.false_alarms() as u64;
            g.arc_events += s.arc_event as u64;
            g.missed_events += s.missed as u64;
        }
        g.finish();
        g
    }

    fn finish(&mut self) {
        let stats = self.canary_stats();
        self.false_alarm_rate = stats.false_alarm_rate();
        self.miss_rate = stats.miss_rate();
        self.precision = (self.alarms > 0).then(|| self.true_alarms as f64 / self.alarms as f64);
    }

    pub fn canary_stats(&self) -> CanaryStats {
        CanaryStats {
            frames: self.frames,
            normal_frames: self.normal_frames,
            false_alarms: self.false_alarms,
            arc_events: self.arc_events,
            missed_events: self.missed_events,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetMetrics {
    pub start_ns: u64,
    pub end_ns: u64,
    pub devices: BTreeMap<u32, GroupMetrics>,
    pub aggregate: GroupMetrics,
}

/// Per-device and fleet totals over segments starting in
/// `[start_ns, end_ns)`. The window must have closed by `now_ns`.
pub fn collect_fleet_metrics(store: &[SegmentMetrics], start_ns: u64, end_ns: u64, now_ns: u64) -> Result<FleetMetrics> {
    if end_ns > now_ns {
        return Err(Error::Precondition(format!("window ends at {end_ns} ns, after now ({now_ns} ns)")));
    }
    let inside: Vec<&SegmentMetrics> = store.iter().filter(|s| s.start_ns >= start_ns && s.start_ns < end_ns).collect();
    let mut by_device: BTreeMap<u32, Vec<&SegmentMetrics>> = BTreeMap::new();
    for s in &inside {
        by_device.entry(s.device_id).or_default().push(s);
    }
    Ok(FleetMetrics {
        start_ns,
        end_ns,
        devices: by_device.into_iter().map(|(d, v)| (d, GroupMetrics::from_segments(v))).collect(),
        aggregate: GroupMetrics::from_segments(inside),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(device_id: u32, start_ns: u64, alarms: u32, true_alarms: u32) -> SegmentMetrics {
        SegmentMetrics {
            device_id,
            start_ns,
            frames: 100,
            normal_frames: 80,
            alarms,
            true_alarms,
            arc_event: true_alarms > 0,
            ..SegmentMetrics::default()
        }
    }

    #[test]
    fn precision_and_null_policy() {
        let m = collect_fleet_metrics(&[seg(1, 0, 4, 3), seg(2, 0, 0, 0)], 0, 10, 10).unwrap();
        assert_eq!(m.devices[&1].precision, Some(0.75));
        assert_eq!(m.devices[&2].precision, None);
        assert_eq!(m.devices[&1].false_alarms, 1);
    }

    #[test]
    fn aggregate_is_the_sum() {
        let store: Vec<SegmentMetrics> = (0..30).map(|i| seg(i % 4, i as u64, i % 5, (i % 5).min(i % 3))).collect();
        let m = collect_fleet_metrics(&store, 5, 25, 30).unwrap();
        let alarms: u64 = m.devices.values().map(|d| d.alarms).sum();
        let frames: u64 = m.devices.values().map(|d| d.frames).sum();
        let tp: u64 = m.devices.values().map(|d| d.true_alarms).sum();
        assert_eq!((alarms, frames, tp), (m.aggregate.alarms, m.aggregate.frames, m.aggregate.true_alarms));
        assert_eq!(m.aggregate.segments, 20);
    }

    #[test]
    fn open_window_is_an_error() {
        assert!(collect_fleet_metrics(&[], 0, 10, 9).is_err());
    }
}
