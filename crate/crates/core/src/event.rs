//! Event data model, time normalization, polarity integration and
//! stacked-event-frame binning.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Default number of chunks each interval is split into when stacking.
pub const DEFAULT_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(value: i64) -> Option<Self> {
        match value {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    /// Canonical order: time, then row, then column, then polarity.
    pub fn canonical_cmp(&self, other: &Event) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
            .then(self.p.cmp(&other.p))
    }
}

/// A time-sorted event stream recorded over `[t_begin, t_end]` on a
/// `width`×`height` sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
    t_begin: f64,
    t_end: f64,
}

impl EventStream {
    /// Builds a stream from events already in canonical order.
    pub fn new(
        width: usize,
        height: usize,
        t_begin: f64,
        t_end: f64,
        events: Vec<Event>,
    ) -> Result<Self> {
        let stream = Self {
            events,
            width,
            height,
            t_begin,
            t_end,
        };
        stream.validate()?;
        Ok(stream)
    }

    /// Builds a stream from events in any order, sorting them canonically.
    pub fn from_unsorted(
        width: usize,
        height: usize,
        t_begin: f64,
        t_end: f64,
        mut events: Vec<Event>,
    ) -> Result<Self> {
        events.par_sort_unstable_by(Event::canonical_cmp);
        Self::new(width, height, t_begin, t_end, events)
    }

    pub fn empty(width: usize, height: usize, t_begin: f64, t_end: f64) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
            t_begin,
            t_end,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_begin.is_finite() && self.t_end.is_finite()) || self.t_end < self.t_begin {
            return Err(Error::param(
                "exposure",
                format!("invalid interval [{}, {}]", self.t_begin, self.t_end),
            ));
        }
        let mut prev: Option<&Event> = None;
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(Error::InvalidEvent(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if !(e.t >= self.t_begin && e.t <= self.t_end) {
                return Err(Error::InvalidEvent(format!(
                    "event {i} timestamp {} outside [{}, {}]",
                    e.t, self.t_begin, self.t_end
                )));
            }
            if let Some(p) = prev {
                if p.canonical_cmp(e) == Ordering::Greater {
                    return Err(Error::InvalidEvent(format!(
                        "event {i} out of canonical order"
                    )));
                }
            }
            prev = Some(e);
        }
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn t_begin(&self) -> f64 {
        self.t_begin
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Events in `[a, b)`, or `[a, b]` when `b` is the end of the exposure.
    pub fn window(&self, a: f64, b: f64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < a);
        let hi = if b >= self.t_end {
            self.events.partition_point(|e| e.t <= b)
        } else {
            self.events.partition_point(|e| e.t < b)
        };
        &self.events[lo..hi.max(lo)]
    }

    /// Affinely remaps timestamps so the exposure becomes `[1, frames]`.
    pub fn normalize_time(&self, frames: usize) -> Result<EventStream> {
        if frames < 2 {
            return Err(Error::param("frames", "need at least 2 frames"));
        }
        let span = self.t_end - self.t_begin;
        let scale = (frames - 1) as f64;
        let events = if self.events.is_empty() {
            Vec::new()
        } else {
            if span == 0.0 {
                return Err(Error::ZeroLengthExposure(self.t_begin));
            }
            let mut events: Vec<Event> = self
                .events
                .iter()
                .map(|e| Event {
                    t: (1.0 + (e.t - self.t_begin) / span * scale).clamp(1.0, frames as f64),
                    ..*e
                })
                .collect();
            // rounding can merge nearby timestamps, leaving ties to reorder
            events.sort_by(Event::canonical_cmp);
            events
        };
        Ok(EventStream {
            events,
            width: self.width,
            height: self.height,
            t_begin: 1.0,
            t_end: frames as f64,
        })
    }

    /// Per-pixel sum of polarities over `[a, b)` (closed at the exposure end).
    pub fn polarity_integral(&self, a: f64, b: f64) -> Result<PolarityIntegralMap> {
        if a >= b {
            return Err(Error::EmptyInterval { a, b });
        }
        let mut map = Image::zeros(self.width, self.height);
        for e in self.window(a, b) {
            *map.at_mut(e.x as usize, e.y as usize) += f64::from(e.p.sign());
        }
        Ok(PolarityIntegralMap(map))
    }

    /// Polarity integrals over the unit intervals `[i, i+1)`, `i = 1..frames-1`.
    pub fn unit_integrals(&self, frames: usize) -> Result<Vec<PolarityIntegralMap>> {
        (1..frames)
            .map(|i| self.polarity_integral(i as f64, (i + 1) as f64))
            .collect()
    }

    /// Sums polarities into `chunks` equal sub-chunks of each interval and
    /// stacks them along the channel axis.
    pub fn bin_stacked_frames(
        &self,
        intervals: &[(f64, f64)],
        chunks: usize,
    ) -> Result<StackedEventFrames> {
        if chunks == 0 {
            return Err(Error::param("chunks", "must be at least 1"));
        }
        if intervals.is_empty() {
            return Err(Error::param("intervals", "need at least one interval"));
        }
        for &(a, b) in intervals {
            if !(a < b) {
                return Err(Error::EmptyInterval { a, b });
            }
        }
        for w in intervals.windows(2) {
            let ((a0, b0), (a1, b1)) = (w[0], w[1]);
            if a1 != b0 {
                return Err(Error::OverlappingIntervals(a0, b0, a1, b1));
            }
        }
        let plane = self.width * self.height;
        let channels = chunks * intervals.len();
        let mut volume = StackedEventFrames {
            data: vec![0.0; channels * plane],
            width: self.width,
            height: self.height,
            chunks,
            intervals: intervals.to_vec(),
        };
        for (k, &(a, b)) in intervals.iter().enumerate() {
            let span = b - a;
            for e in self.window(a, b) {
                let chunk = (((e.t - a) / span * chunks as f64).floor() as usize).min(chunks - 1);
                let c = k * chunks + chunk;
                volume.data[c * plane + e.y as usize * self.width + e.x as usize] +=
                    f64::from(e.p.sign());
            }
        }
        Ok(volume)
    }
}

/// Signed per-pixel polarity sum over one time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarityIntegralMap(pub Image);

impl PolarityIntegralMap {
    pub fn values(&self) -> &Image {
        &self.0
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Image::zeros(width, height))
    }
}

/// C×H×W polarity-sum volume; channel `i * chunks + j` is chunk `j` of
/// interval `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedEventFrames {
    data: Vec<f64>,
    width: usize,
    height: usize,
    chunks: usize,
    intervals: Vec<(f64, f64)>,
}

impl StackedEventFrames {
    /// Builds a volume directly from channel-major data covering `intervals`.
    pub fn from_data(
        width: usize,
        height: usize,
        chunks: usize,
        intervals: Vec<(f64, f64)>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if chunks == 0 || intervals.is_empty() {
            return Err(Error::param("chunks", "volume needs at least one chunk"));
        }
        let expected = chunks * intervals.len() * width * height;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "volume data",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            data,
            width,
            height,
            chunks,
            intervals,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.chunks * self.intervals.len()
    }

    pub fn chunks_per_interval(&self) -> usize {
        self.chunks
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> Image {
        let plane = self.width * self.height;
        Image::new(
            self.width,
            self.height,
            self.data[c * plane..(c + 1) * plane].to_vec(),
        )
        .expect("plane size matches")
    }

    /// Sum of the channels belonging to interval `k`.
    pub fn interval_sum(&self, k: usize) -> Image {
        let plane = self.width * self.height;
        let mut acc = vec![0.0; plane];
        for c in k * self.chunks..(k + 1) * self.chunks {
            for (a, v) in acc.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *a += v;
            }
        }
        Image::new(self.width, self.height, acc).expect("plane size matches")
    }

    /// Locates `[a, b)` among the volume's intervals and returns
    /// `(first channel, chunk duration)`.
    pub fn interval_channels(&self, a: f64, b: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * (1.0 + a.abs().max(b.abs()));
        self.intervals
            .iter()
            .position(|&(ia, ib)| (ia - a).abs() <= tol && (ib - b).abs() <= tol)
            .map(|k| (k * self.chunks, (b - a) / self.chunks as f64))
            .ok_or(Error::IntervalNotInVolume { a, b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u32, y: u32, t: f64, p: i64) -> Event {
        Event::new(x, y, t, Polarity::from_sign(p).unwrap())
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let s = EventStream::new(4, 4, 10.0, 20.0, vec![ev(0, 0, 10.0, 1), ev(1, 0, 20.0, 1)])
            .unwrap();
        let n = s.normalize_time(2).unwrap();
        let ts: Vec<f64> = n.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1.0, 2.0]);
        assert_eq!((n.t_begin(), n.t_end()), (1.0, 2.0));

        let s = EventStream::new(4, 4, 10.0, 20.0, vec![ev(0, 0, 15.0, 1)]).unwrap();
        assert_eq!(s.normalize_time(3).unwrap().events()[0].t, 2.0);
    }

    #[test]
    fn normalize_empty_and_degenerate() {
        let s = EventStream::empty(4, 4, 3.0, 3.0);
        let n = s.normalize_time(7).unwrap();
        assert!(n.is_empty());
        assert_eq!((n.t_begin(), n.t_end()), (1.0, 7.0));

        let s = EventStream::new(4, 4, 3.0, 3.0, vec![ev(0, 0, 3.0, 1)]).unwrap();
        assert!(matches!(
            s.normalize_time(4),
            Err(Error::ZeroLengthExposure(_))
        ));
        assert!(s.normalize_time(1).is_err());
    }

    #[test]
    fn normalize_preserves_spacing_ratios() {
        let ts = [100.0, 137.0, 151.5, 900.25, 1000.0];
        let events = ts.iter().map(|&t| ev(0, 0, t, 1)).collect();
        let s = EventStream::new(1, 1, 100.0, 1000.0, events).unwrap();
        let n = s.normalize_time(9).unwrap();
        let out: Vec<f64> = n.events().iter().map(|e| e.t).collect();
        let raw_ratio = (ts[2] - ts[1]) / (ts[4] - ts[3]);
        let new_ratio = (out[2] - out[1]) / (out[4] - out[3]);
        assert!(((raw_ratio - new_ratio) / raw_ratio).abs() <= 1e-12);
    }

    #[test]
    fn polarity_integral_cases() {
        let s = EventStream::empty(8, 8, 1.0, 3.0);
        assert!(s
            .polarity_integral(1.0, 2.0)
            .unwrap()
            .values()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));

        let s = EventStream::new(8, 8, 1.0, 3.0, vec![ev(3, 5, 1.5, 1)]).unwrap();
        let m = s.polarity_integral(1.0, 2.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if (x, y) == (3, 5) { 1.0 } else { 0.0 };
                assert_eq!(m.values().at(x, y), expect);
            }
        }

        let s = EventStream::new(8, 8, 1.0, 3.0, vec![ev(2, 2, 1.2, 1), ev(2, 2, 1.7, -1)])
            .unwrap();
        assert_eq!(s.polarity_integral(1.0, 2.0).unwrap().values().at(2, 2), 0.0);
        assert!(matches!(
            s.polarity_integral(2.0, 2.0),
            Err(Error::EmptyInterval { .. })
        ));
    }

    #[test]
    fn interval_boundaries_are_half_open_except_at_end() {
        let s = EventStream::new(2, 1, 1.0, 3.0, vec![ev(0, 0, 2.0, 1), ev(1, 0, 3.0, 1)])
            .unwrap();
        assert_eq!(s.polarity_integral(1.0, 2.0).unwrap().values().at(0, 0), 0.0);
        assert_eq!(s.polarity_integral(2.0, 3.0).unwrap().values().at(0, 0), 1.0);
        assert_eq!(s.polarity_integral(2.0, 3.0).unwrap().values().at(1, 0), 1.0);
    }

    #[test]
    fn binning_first_and_last_chunk() {
        let s = EventStream::new(4, 4, 1.0, 2.0, vec![ev(1, 1, 1.0, 1)]).unwrap();
        let v = s.bin_stacked_frames(&[(1.0, 2.0)], 8).unwrap();
        assert_eq!(v.channels(), 8);
        assert_eq!(v.at(0, 1, 1), 1.0);
        assert_eq!(v.as_slice().iter().sum::<f64>(), 1.0);

        let s = EventStream::new(4, 4, 1.0, 2.0, vec![ev(1, 1, 1.99, 1)]).unwrap();
        let v = s.bin_stacked_frames(&[(1.0, 2.0)], 8).unwrap();
        assert_eq!(v.at(7, 1, 1), 1.0);
    }

    #[test]
    fn binning_rejects_bad_partitions() {
        let s = EventStream::empty(2, 2, 1.0, 3.0);
        assert!(matches!(
            s.bin_stacked_frames(&[(1.0, 2.0), (1.5, 3.0)], 8),
            Err(Error::OverlappingIntervals(..))
        ));
        assert!(s.bin_stacked_frames(&[(1.0, 2.0)], 0).is_err());
        assert!(s.bin_stacked_frames(&[(2.0, 2.0)], 4).is_err());
    }

    #[test]
    fn stream_rejects_invalid_events() {
        assert!(EventStream::new(2, 2, 1.0, 2.0, vec![ev(2, 0, 1.5, 1)]).is_err());
        assert!(EventStream::new(2, 2, 1.0, 2.0, vec![ev(0, 0, 2.5, 1)]).is_err());
        assert!(
            EventStream::new(2, 2, 1.0, 2.0, vec![ev(0, 0, 1.6, 1), ev(0, 0, 1.5, 1)]).is_err()
        );
        let s = EventStream::from_unsorted(
            2,
            2,
            1.0,
            2.0,
            vec![ev(1, 1, 1.5, 1), ev(0, 1, 1.5, -1), ev(0, 0, 1.5, 1), ev(0, 1, 1.5, 1)],
        )
        .unwrap();
        let order: Vec<(u32, u32, i32)> =
            s.events().iter().map(|e| (e.y, e.x, e.p.sign())).collect();
        assert_eq!(order, vec![(0, 0, 1), (1, 0, -1), (1, 0, 1), (1, 1, 1)]);
    }
}
