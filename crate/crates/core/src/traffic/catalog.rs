//! Flow shapes that synthetic traces are assembled from.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::model::{Direction, Label, DEFAULT_K, DEFAULT_NUM_CLASSES};
use crate::traffic::TrafficError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapePacket {
    /// Gap since the previous packet of the flow; 0 for the first one.
    pub gap_us: u32,
    pub length: u16,
    pub direction: Direction,
}

impl ShapePacket {
    pub fn feature(&self) -> i32 {
        i32::from(self.length) * self.direction.sign()
    }
}

/// Packets past the explicit head of a long flow, kept only in aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeTail {
    pub packets: u32,
    /// Time from the last head packet to the last packet of the flow.
    pub duration_us: u64,
    pub mean_length: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowShape {
    pub packets: Vec<ShapePacket>,
    pub tail: Option<ShapeTail>,
    pub label: Option<Label>,
}

impl FlowShape {
    pub fn packet_count(&self) -> u64 {
        self.packets.len() as u64 + self.tail.map_or(0, |t| u64::from(t.packets))
    }

    pub fn duration_us(&self) -> u64 {
        let head: u64 = self.packets.iter().map(|p| u64::from(p.gap_us)).sum();
        head + self.tail.map_or(0, |t| t.duration_us)
    }

    pub fn bytes(&self) -> u64 {
        let head: u64 = self.packets.iter().map(|p| u64::from(p.length)).sum();
        head + self
            .tail
            .map_or(0, |t| u64::from(t.packets) * u64::from(t.mean_length))
    }

    pub fn features(&self) -> Vec<i32> {
        self.packets.iter().map(ShapePacket::feature).collect()
    }

    fn validate(&self) -> Result<(), String> {
        let Some(first) = self.packets.first() else {
            return Err("shape has no packets".into());
        };
        if first.gap_us != 0 {
            return Err("first gap must be 0".into());
        }
        if self.packets.iter().any(|p| p.length == 0) {
            return Err("packet length must be positive".into());
        }
        if let Some(t) = self.tail {
            if t.packets == 0 || t.mean_length == 0 {
                return Err("tail must hold at least one packet of positive length".into());
            }
        }
        Ok(())
    }
}

/// Parameters of the default synthetic catalog.
///
/// Packet counts follow a two-class mixture so that both short- and
/// long-lived flows exist. A share of the shapes starts with one of a set of
/// Zipf-popular prefix templates; templates in turn share shorter stems, so
/// truncated keys of different lengths collide at different rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub size: usize,
    pub short_share: f64,
    pub short_packets: (u32, u32),
    pub long_packets: (u32, u32),
    pub lengths: (u16, u16),
    pub mean_gap_us: f64,
    /// Packets beyond this many are folded into a tail; `None` keeps all.
    pub head_limit: Option<usize>,
    pub templates: usize,
    pub template_share: f64,
    pub template_len: usize,
    pub stems: usize,
    pub stem_len: usize,
    pub zipf_exponent: f64,
    pub classes: u32,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            size: 100_000,
            short_share: 0.8,
            short_packets: (2, 34),
            long_packets: (35, 3000),
            lengths: (40, 1500),
            mean_gap_us: 5_000.0,
            head_limit: Some(16),
            templates: 2_000,
            template_share: 0.35,
            template_len: 6,
            stems: 400,
            stem_len: 4,
            zipf_exponent: 0.9,
            classes: DEFAULT_NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone)]
struct Template {
    head: Vec<(u16, Direction)>,
    label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    shapes: Vec<FlowShape>,
}

impl Catalog {
    pub fn new(shapes: Vec<FlowShape>) -> Result<Self, TrafficError> {
        if shapes.is_empty() {
            return Err(TrafficError::EmptyCatalog);
        }
        for (i, s) in shapes.iter().enumerate() {
            s.validate()
                .map_err(|m| TrafficError::Catalog(format!("shape {i}: {m}")))?;
        }
        Ok(Self { shapes })
    }

    pub fn shapes(&self) -> &[FlowShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Fraction of shapes with at least `k` packets, i.e. of flows that yield
    /// a series under uniform shape selection.
    pub fn series_fraction(&self, k: usize) -> f64 {
        let n = self
            .shapes
            .iter()
            .filter(|s| s.packet_count() >= k as u64)
            .count();
        n as f64 / self.shapes.len() as f64
    }

    pub fn synthetic(cfg: &CatalogConfig, seed: u64) -> Result<Self, TrafficError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = Exp::new(1.0 / cfg.mean_gap_us).map_err(|e| TrafficError::Catalog(e.to_string()))?;
        let draw_len = |rng: &mut ChaCha8Rng| rng.gen_range(cfg.lengths.0..=cfg.lengths.1);
        let draw_dir = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.5) {
                Direction::Forward
            } else {
                Direction::Backward
            }
        };

        let stems: Vec<Vec<(u16, Direction)>> = (0..cfg.stems)
            .map(|_| {
                (0..cfg.stem_len)
                    .map(|i| {
                        let d = if i == 0 { Direction::Forward } else { draw_dir(&mut rng) };
                        (draw_len(&mut rng), d)
                    })
                    .collect()
            })
            .collect();
        let templates: Vec<Template> = (0..cfg.templates)
            .map(|_| {
                let mut head = stems[rng.gen_range(0..stems.len())].clone();
                while head.len() < cfg.template_len {
                    head.push((draw_len(&mut rng), draw_dir(&mut rng)));
                }
                Template {
                    head,
                    label: Label(rng.gen_range(0..cfg.classes)),
                }
            })
            .collect();
        let popularity = (cfg.templates > 0)
            .then(|| Zipf::new(cfg.templates as u64, cfg.zipf_exponent))
            .transpose()
            .map_err(|e| TrafficError::Catalog(e.to_string()))?;

        let mut shapes = Vec::with_capacity(cfg.size);
        for _ in 0..cfg.size {
            let n = if rng.gen_bool(cfg.short_share) {
                rng.gen_range(cfg.short_packets.0..=cfg.short_packets.1)
            } else {
                rng.gen_range(cfg.long_packets.0..=cfg.long_packets.1)
            } as usize;
            let template = match &popularity {
                Some(z) if rng.gen_bool(cfg.template_share) => {
                    Some(&templates[z.sample(&mut rng) as usize - 1])
                }
                _ => None,
            };
            let head_len = cfg.head_limit.map_or(n, |h| n.min(h.max(1)));
            let mut packets = Vec::with_capacity(head_len);
            for i in 0..head_len {
                let (length, direction) = match template.and_then(|t| t.head.get(i)) {
                    Some(&p) => p,
                    None if i == 0 => (draw_len(&mut rng), Direction::Forward),
                    None => (draw_len(&mut rng), draw_dir(&mut rng)),
                };
                let gap_us = if i == 0 { 0 } else { gap.sample(&mut rng).min(u32::MAX as f64) as u32 };
                packets.push(ShapePacket {
                    gap_us,
                    length,
                    direction,
                });
            }
            let tail = (n > head_len).then(|| {
                let extra = n - head_len;
                let mut duration = 0u64;
                let mut bytes = 0u64;
                for _ in 0..extra {
                    duration += gap.sample(&mut rng) as u64;
                    bytes += u64::from(draw_len(&mut rng));
                }
                ShapeTail {
                    packets: extra as u32,
                    duration_us: duration,
                    mean_length: (bytes / extra as u64).max(1) as u16,
                }
            });
            let label = match template {
                Some(t) => t.label,
                None => Label(rng.gen_range(0..cfg.classes)),
            };
            shapes.push(FlowShape {
                packets,
                tail,
                label: Some(label),
            });
        }
        Self::new(shapes)
    }

    /// Writes one CSV row per shape:
    /// `label,features,gaps_us,tail_packets,tail_duration_us,tail_mean_length`
    /// with `;`-separated lists and signed features carrying the direction.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrafficError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "label",
            "features",
            "gaps_us",
            "tail_packets",
            "tail_duration_us",
            "tail_mean_length",
        ])?;
        for s in &self.shapes {
            let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(";");
            let features = join(&mut s.packets.iter().map(|p| p.feature().to_string()));
            let gaps = join(&mut s.packets.iter().map(|p| p.gap_us.to_string()));
            let (tp, td, tl) = s.tail.map_or((String::new(), String::new(), String::new()), |t| {
                (
                    t.packets.to_string(),
                    t.duration_us.to_string(),
                    t.mean_length.to_string(),
                )
            });
            out.write_record([
                s.label.map_or(String::new(), |l| l.0.to_string()),
                features,
                gaps,
                tp,
                td,
                tl,
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TrafficError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let mut shapes = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let bad = |m: &str| TrafficError::Parse {
                line,
                message: m.to_owned(),
            };
            if rec.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let label = opt_num::<u32>(&rec[0]).map_err(|_| bad("bad label"))?.map(Label);
            let features: Vec<i32> = list(&rec[1]).map_err(|_| bad("bad feature list"))?;
            let gaps: Vec<u32> = list(&rec[2]).map_err(|_| bad("bad gap list"))?;
            if features.len() != gaps.len() {
                return Err(bad("features and gaps differ in length"));
            }
            let mut packets = Vec::with_capacity(features.len());
            for (f, g) in features.into_iter().zip(gaps) {
                let length = u16::try_from(f.unsigned_abs()).map_err(|_| bad("length out of range"))?;
                let direction = if f > 0 { Direction::Forward } else { Direction::Backward };
                packets.push(ShapePacket {
                    gap_us: g,
                    length,
                    direction,
                });
            }
            let tp = opt_num::<u32>(&rec[3]).map_err(|_| bad("bad tail packets"))?;
            let td = opt_num::<u64>(&rec[4]).map_err(|_| bad("bad tail duration"))?;
            let tl = opt_num::<u16>(&rec[5]).map_err(|_| bad("bad tail length"))?;
            let tail = match (tp, td, tl) {
                (None, None, None) => None,
                (Some(packets), Some(duration_us), Some(mean_length)) => Some(ShapeTail {
                    packets,
                    duration_us,
                    mean_length,
                }),
                _ => return Err(bad("tail columns must be all set or all empty")),
            };
            let shape = FlowShape {
                packets,
                tail,
                label,
            };
            shape.validate().map_err(|m| bad(&m))?;
            shapes.push(shape);
        }
        Self::new(shapes)
    }
}

fn opt_num<T: std::str::FromStr>(s: &str) -> Result<Option<T>, T::Err> {
    let s = s.trim();
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(';').map(|x| x.trim().parse()).collect()
}

impl CatalogConfig {
    pub fn validate(&self) -> Result<(), TrafficError> {
        let bad = |m: &str| Err(TrafficError::Catalog(m.to_owned()));
        if self.size == 0 {
            return bad("catalog size must be positive");
        }
        if !(0.0..=1.0).contains(&self.short_share) || !(0.0..=1.0).contains(&self.template_share) {
            return bad("shares must lie in [0, 1]");
        }
        if self.short_packets.0 == 0
            || self.short_packets.0 > self.short_packets.1
            || self.long_packets.0 == 0
            || self.long_packets.0 > self.long_packets.1
        {
            return bad("packet count ranges must be non-empty and positive");
        }
        if self.lengths.0 == 0 || self.lengths.0 > self.lengths.1 {
            return bad("length range must be non-empty and positive");
        }
        if self.mean_gap_us <= 0.0 {
            return bad("mean gap must be positive");
        }
        if self.templates > 0 && (self.stems == 0 || self.stem_len == 0 || self.stem_len > self.template_len) {
            return bad("templates need at least one stem no longer than the template");
        }
        if self.classes == 0 {
            return bad("class count must be positive");
        }
        Ok(())
    }
}

/// Share of default-catalog flows expected to yield a series.
pub fn expected_series_fraction(cfg: &CatalogConfig) -> f64 {
    let frac = |(lo, hi): (u32, u32)| {
        let k = DEFAULT_K as u32;
        if hi < k {
            0.0
        } else {
            f64::from(hi - lo.max(k) + 1) / f64::from(hi - lo + 1)
        }
    };
    cfg.short_share * frac(cfg.short_packets) + (1.0 - cfg.short_share) * frac(cfg.long_packets)
}
