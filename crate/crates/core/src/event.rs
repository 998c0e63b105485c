//! Asynchronous event streams: parsing, serialization and time windowing.
//!
//! The text format is one event per line, `x,y,t_us,polarity[,label]`, with
//! `#` comment lines. Streams are kept in ingestion order and timestamps
//! must be non-decreasing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};

/// Class id carried by labelled events.
pub type ClassId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }
}

/// One camera event. Polarity is carried for fidelity only; it never
/// becomes a model feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Microseconds.
    pub t: u64,
    pub polarity: Polarity,
    pub label: Option<ClassId>,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, polarity: Polarity) -> Self {
        Event {
            x,
            y,
            t,
            polarity,
            label: None,
        }
    }

    pub fn with_label(mut self, label: ClassId) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    /// DAVIS346 resolution.
    pub const DAVIS346: SensorGeometry = SensorGeometry {
        width: 346,
        height: 260,
    };

    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GmnnError::config(format!(
                "sensor geometry must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(SensorGeometry { width, height })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

impl Default for SensorGeometry {
    fn default() -> Self {
        SensorGeometry::DAVIS346
    }
}

/// Events falling in `[t0, t0 + duration)`, capped at `n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t0: u64,
    pub duration: u64,
    pub truncated: bool,
    /// Stream position of `events[0]`. Retained events are contiguous in the
    /// stream, so event `i` has ingestion index `start_index + i`.
    pub start_index: usize,
}

impl EventWindow {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.events.iter().all(|e| e.label.is_some())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Skip the first non-comment line.
    pub has_header: bool,
}

/// Parses the line-oriented event format.
///
/// Polarity accepts `1`/`+1` and `-1`; `0` is read as negative, which is the
/// common convention of DVS CSV exports.
pub fn parse_event_stream(
    text: &str,
    geometry: SensorGeometry,
    opts: ParseOptions,
) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut header_pending = opts.has_header;
    let mut prev_t: Option<u64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }

        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(GmnnError::Parse {
                line: line_no,
                msg: format!("expected 4 or 5 fields, found {}", fields.len()),
            });
        }
        let int = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|_| GmnnError::Parse {
                line: line_no,
                msg: format!("invalid {what} {s:?}"),
            })
        };

        let x = int(fields[0], "x")?;
        let y = int(fields[1], "y")?;
        if !geometry.contains(x, y) {
            return Err(GmnnError::Bounds {
                line: line_no,
                x,
                y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let t = fields[2].parse::<u64>().map_err(|_| GmnnError::Parse {
            line: line_no,
            msg: format!("invalid timestamp {:?}", fields[2]),
        })?;
        let polarity = match fields[3] {
            "1" | "+1" => Polarity::Positive,
            "-1" | "0" => Polarity::Negative,
            other => {
                return Err(GmnnError::Parse {
                    line: line_no,
                    msg: format!("invalid polarity {other:?}"),
                })
            }
        };
        let label = match fields.get(4) {
            Some(s) => Some(s.parse::<ClassId>().map_err(|_| GmnnError::Parse {
                line: line_no,
                msg: format!("invalid label {s:?}"),
            })?),
            None => None,
        };

        if let Some(prev) = prev_t {
            if t < prev {
                return Err(GmnnError::Ordering {
                    line: line_no,
                    t,
                    prev,
                });
            }
        }
        prev_t = Some(t);

        events.push(Event {
            x: x as u32,
            y: y as u32,
            t,
            polarity,
            label,
        });
    }
    Ok(events)
}

/// Inverse of [`parse_event_stream`].
pub fn serialize_events(events: &[Event]) -> String {
    let mut out = String::with_capacity(events.len() * 24);
    for e in events {
        let _ = write!(out, "{},{},{},{}", e.x, e.y, e.t, e.polarity.sign());
        if let Some(label) = e.label {
            let _ = write!(out, ",{label}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Window length in microseconds.
    pub duration: u64,
    pub n_max: usize,
    /// Distance between consecutive window starts in microseconds.
    pub stride: u64,
}

impl WindowSpec {
    /// Tumbling windows: stride equals duration.
    pub fn tumbling(duration: u64, n_max: usize) -> Self {
        WindowSpec {
            duration,
            n_max,
            stride: duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration == 0 {
            return Err(GmnnError::config("window duration must be > 0"));
        }
        if self.n_max == 0 {
            return Err(GmnnError::config("n_max must be >= 1"));
        }
        if self.stride == 0 {
            return Err(GmnnError::config("window stride must be > 0"));
        }
        Ok(())
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::tumbling(100_000, 10_000)
    }
}

/// Cuts a time-ordered stream into windows starting at the first timestamp
/// and advancing by `stride`. Windows that exceed `n_max` keep only the
/// latest events; among equal timestamps the later-ingested ones win.
///
/// Empty windows between bursts are emitted so window indices track time.
pub fn window_events(stream: &[Event], spec: WindowSpec) -> Result<Vec<EventWindow>> {
    spec.validate()?;
    let (Some(first), Some(last)) = (stream.first(), stream.last()) else {
        return Ok(Vec::new());
    };
    if let Some(pos) = stream.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(GmnnError::Ordering {
            line: pos + 2,
            t: stream[pos + 1].t,
            prev: stream[pos].t,
        });
    }

    let mut windows = Vec::new();
    let mut t0 = first.t;
    while t0 <= last.t {
        let t1 = t0.saturating_add(spec.duration);
        let lo = stream.partition_point(|e| e.t < t0);
        let hi = stream.partition_point(|e| e.t < t1);
        let truncated = hi - lo > spec.n_max;
        let start = if truncated { hi - spec.n_max } else { lo };
        windows.push(EventWindow {
            events: stream[start..hi].to_vec(),
            t0,
            duration: spec.duration,
            truncated,
            start_index: start,
        });
        t0 = match t0.checked_add(spec.stride) {
            Some(t) => t,
            None => break,
        };
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> SensorGeometry {
        SensorGeometry::DAVIS346
    }

    #[test]
    fn parses_single_event() {
        let ev = parse_event_stream("10,20,1000,1", geom(), ParseOptions::default()).unwrap();
        assert_eq!(ev, vec![Event::new(10, 20, 1000, Polarity::Positive)]);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert!(parse_event_stream("", geom(), ParseOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn out_of_bounds_x() {
        let err = parse_event_stream("400,20,1000,1", geom(), ParseOptions::default()).unwrap_err();
        assert!(matches!(err, GmnnError::Bounds { line: 1, x: 400, .. }));
    }

    #[test]
    fn decreasing_timestamp_reports_line() {
        let text = "# comment\n1,1,10,1\n2,2,5,-1\n";
        let err = parse_event_stream(text, geom(), ParseOptions::default()).unwrap_err();
        assert!(matches!(err, GmnnError::Ordering { line: 3, t: 5, prev: 10 }));
    }

    #[test]
    fn malformed_line_reports_line() {
        let text = "1,1,10,1\n1,1\n";
        let err = parse_event_stream(text, geom(), ParseOptions::default()).unwrap_err();
        assert!(matches!(err, GmnnError::Parse { line: 2, .. }));
        let err = parse_event_stream("1,1,10,2", geom(), ParseOptions::default()).unwrap_err();
        assert!(matches!(err, GmnnError::Parse { line: 1, .. }));
    }

    #[test]
    fn header_and_labels() {
        let text = "x,y,t,p,label\n3,4,7,-1,2\n";
        let ev = parse_event_stream(text, geom(), ParseOptions { has_header: true }).unwrap();
        assert_eq!(ev[0].label, Some(2));
        assert_eq!(ev[0].polarity, Polarity::Negative);
    }

    #[test]
    fn tumbling_windows_split_at_boundaries() {
        let ms = 1000;
        let stream = vec![
            Event::new(1, 1, 0, Polarity::Positive),
            Event::new(2, 2, 50 * ms, Polarity::Positive),
            Event::new(3, 3, 150 * ms, Polarity::Positive),
        ];
        let w = window_events(&stream, WindowSpec::tumbling(100 * ms, 10_000)).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].events, stream[..2].to_vec());
        assert_eq!(w[1].events, stream[2..].to_vec());
        assert_eq!(w[1].t0, 100 * ms);
        assert_eq!(w[1].start_index, 2);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let stream: Vec<Event> = (0..5)
            .map(|i| Event::new(i, 0, i as u64, Polarity::Positive))
            .collect();
        let w = window_events(&stream, WindowSpec::tumbling(100, 3)).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].truncated);
        assert_eq!(w[0].events, stream[2..].to_vec());
    }

    #[test]
    fn equal_timestamps_prefer_later_ingestion() {
        let stream: Vec<Event> = (0..4)
            .map(|i| Event::new(i, 0, 7, Polarity::Positive))
            .collect();
        let w = window_events(&stream, WindowSpec::tumbling(100, 2)).unwrap();
        assert_eq!(w[0].events.iter().map(|e| e.x).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn overlapping_stride() {
        let stream: Vec<Event> = (0..10)
            .map(|i| Event::new(0, 0, i * 10, Polarity::Positive))
            .collect();
        let w = window_events(
            &stream,
            WindowSpec {
                duration: 50,
                n_max: 100,
                stride: 25,
            },
        )
        .unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[1].events.len(), 5);
        assert_eq!(w[1].events[0].t, 30);
    }

    #[test]
    fn empty_stream_no_windows() {
        assert!(window_events(&[], WindowSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn invalid_spec() {
        let spec = WindowSpec {
            duration: 0,
            n_max: 1,
            stride: 1,
        };
        assert!(matches!(window_events(&[], spec), Err(GmnnError::Config(_))));
    }
}
