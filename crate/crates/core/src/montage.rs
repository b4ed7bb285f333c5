//! Electrode montages and the seven-region anatomical partition.
//!
//! Region-map files are line oriented:
//!
//! ```text
//! # comment
//! channels: Fp1 Fp2 F3 ...
//! region Prefrontal: Fp1 Fp2
//! region Frontal: F3 Fz F4
//! ...
//! ```
//!
//! The `channels:` line fixes channel indices. Each of the seven regions must
//! be listed exactly once with at least one channel; regions are disjoint and
//! channels left out of every region are only seen by the global expert.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::tensor::Tensor;

/// 16-channel desk-scale region map.
pub const DESK16: &str = include_str!("../montages/desk16.txt");
/// 64-channel 10-10 region map grouped by label prefix.
pub const STD64: &str = include_str!("../montages/std64.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Prefrontal,
    Frontal,
    Central,
    LeftTemporal,
    RightTemporal,
    Parietal,
    Occipital,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::Prefrontal,
        Region::Frontal,
        Region::Central,
        Region::LeftTemporal,
        Region::RightTemporal,
        Region::Parietal,
        Region::Occipital,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Prefrontal => "Prefrontal",
            Region::Frontal => "Frontal",
            Region::Central => "Central",
            Region::LeftTemporal => "LeftTemporal",
            Region::RightTemporal => "RightTemporal",
            Region::Parietal => "Parietal",
            Region::Occipital => "Occipital",
        }
    }

    /// Short lowercase tag used in parameter names and report columns.
    pub fn tag(self) -> &'static str {
        match self {
            Region::Prefrontal => "prefrontal",
            Region::Frontal => "frontal",
            Region::Central => "central",
            Region::LeftTemporal => "ltemporal",
            Region::RightTemporal => "rtemporal",
            Region::Parietal => "parietal",
            Region::Occipital => "occipital",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = MontageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect();
        Region::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(&norm) || r.tag().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| MontageError::UnknownRegion(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MontageError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("no `channels:` line before the region lines")]
    MissingChannels,
    #[error("channel `{0}` is listed twice in the montage")]
    DuplicateChannel(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("region {0} is defined twice")]
    DuplicateRegion(Region),
    #[error("region {region} lists unknown channel `{channel}`")]
    UnknownChannel { region: Region, channel: String },
    #[error("channel `{channel}` assigned to both {first} and {second}")]
    Overlap { channel: String, first: Region, second: Region },
    #[error("region {0} has no channels")]
    EmptyRegion(Region),
    #[error("partition is incomplete; missing {0:?}")]
    IncompletePartition(Vec<Region>),
    #[error("region {region} needs channel {index} but the trial has {channels} channels")]
    Shape { region: Region, index: usize, channels: usize },
}

/// Ordered electrode labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Montage {
    channel_names: Vec<String>,
}

impl Montage {
    pub fn new(channel_names: Vec<String>) -> Result<Self, MontageError> {
        if channel_names.is_empty() {
            return Err(MontageError::MissingChannels);
        }
        for (i, n) in channel_names.iter().enumerate() {
            if channel_names[..i].contains(n) {
                return Err(MontageError::DuplicateChannel(n.clone()));
            }
        }
        Ok(Self { channel_names })
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn len(&self) -> usize {
        self.channel_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// Channel indices for each of the seven regions, in listing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    regions: [Vec<usize>; 7],
}

/// One violated partition invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyRegion(Region),
    OutOfRange { region: Region, index: usize, channels: usize },
    Overlap { index: usize, first: Region, second: Region },
}

impl RegionPartition {
    /// Builds a partition without validating it (see [`validate_partition`]).
    pub fn from_indices(regions: [Vec<usize>; 7]) -> Self {
        Self { regions }
    }

    pub fn indices(&self, region: Region) -> &[usize] {
        &self.regions[region.index()]
    }

    pub fn sizes(&self) -> [usize; 7] {
        core::array::from_fn(|i| self.regions[i].len())
    }

    /// Sorted union of all assigned channel indices.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.regions.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Reports every violated invariant of `partition` against `channels`.
pub fn validate_partition(partition: &RegionPartition, channels: usize) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut owner: Vec<Option<Region>> = alloc::vec![None; channels];
    for region in Region::ALL {
        let idx = partition.indices(region);
        if idx.is_empty() {
            out.push(Violation::EmptyRegion(region));
        }
        for &i in idx {
            if i >= channels {
                out.push(Violation::OutOfRange { region, index: i, channels });
                continue;
            }
            match owner[i] {
                Some(first) => out.push(Violation::Overlap { index: i, first, second: region }),
                None => owner[i] = Some(region),
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Parses a region-map file into a validated montage and partition.
pub fn parse_montage(text: &str) -> Result<(Montage, RegionPartition), MontageError> {
    let mut montage: Option<Montage> = None;
    let mut regions: [Option<Vec<usize>>; 7] = Default::default();
    let mut owner: Vec<Option<Region>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (head, rest) = line.split_once(':').ok_or_else(|| MontageError::Syntax {
            line: lineno + 1,
            detail: "expected `channels:` or `region <Name>:`".to_string(),
        })?;
        let names: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        let head = head.trim();
        if head == "channels" {
            if montage.is_some() {
                return Err(MontageError::Syntax {
                    line: lineno + 1,
                    detail: "second `channels:` line".to_string(),
                });
            }
            let m = Montage::new(names)?;
            owner = alloc::vec![None; m.len()];
            montage = Some(m);
        } else if let Some(name) = head.strip_prefix("region") {
            let region: Region = name.trim().parse()?;
            let m = montage.as_ref().ok_or(MontageError::MissingChannels)?;
            if regions[region.index()].is_some() {
                return Err(MontageError::DuplicateRegion(region));
            }
            if names.is_empty() {
                return Err(MontageError::EmptyRegion(region));
            }
            let mut idx = Vec::with_capacity(names.len());
            for ch in names {
                let i = m
                    .index_of(&ch)
                    .ok_or_else(|| MontageError::UnknownChannel { region, channel: ch.clone() })?;
                if let Some(first) = owner[i] {
                    return Err(MontageError::Overlap { channel: ch, first, second: region });
                }
                owner[i] = Some(region);
                idx.push(i);
            }
            regions[region.index()] = Some(idx);
        } else {
            return Err(MontageError::Syntax {
                line: lineno + 1,
                detail: format!("unrecognized key `{head}`"),
            });
        }
    }
    let montage = montage.ok_or(MontageError::MissingChannels)?;
    let missing: Vec<Region> =
        Region::ALL.into_iter().filter(|r| regions[r.index()].is_none()).collect();
    if !missing.is_empty() {
        return Err(MontageError::IncompletePartition(missing));
    }
    let partition = RegionPartition { regions: regions.map(Option::unwrap_or_default) };
    Ok((montage, partition))
}

/// Renders a montage and partition in the region-map file format.
pub fn to_config_text(montage: &Montage, partition: &RegionPartition) -> String {
    let mut s = String::from("channels:");
    for n in montage.channel_names() {
        s.push(' ');
        s.push_str(n);
    }
    s.push('\n');
    for r in Region::ALL {
        s.push_str("region ");
        s.push_str(r.name());
        s.push(':');
        for &i in partition.indices(r) {
            s.push(' ');
            s.push_str(&montage.channel_names()[i]);
        }
        s.push('\n');
    }
    s
}

/// Rows of a `C x T` trial that belong to `region`, in partition order.
pub fn slice_region(x: &Tensor, partition: &RegionPartition, region: Region) -> Result<Tensor, MontageError> {
    let (c, t) = match x.shape() {
        [c, t] => (*c, *t),
        _ => return Err(MontageError::Shape { region, index: 0, channels: 0 }),
    };
    let idx = partition.indices(region);
    let mut data = Vec::with_capacity(idx.len() * t);
    for &i in idx {
        if i >= c {
            return Err(MontageError::Shape { region, index: i, channels: c });
        }
        data.extend_from_slice(&x.data()[i * t..(i + 1) * t]);
    }
    Tensor::new(alloc::vec![idx.len(), t], data)
        .map_err(|_| MontageError::Shape { region, index: 0, channels: c })
}

/// The shipped 16-channel desk montage.
pub fn desk16() -> (Montage, RegionPartition) {
    parse_montage(DESK16).expect("shipped montage is valid")
}

/// The shipped 64-channel 10-10 montage.
pub fn std64() -> (Montage, RegionPartition) {
    parse_montage(STD64).expect("shipped montage is valid")
}

/// Region implied by a 10-10 label prefix, if any.
pub fn region_for_label(label: &str) -> Option<Region> {
    match label {
        "T7" | "TP7" | "FT7" => return Some(Region::LeftTemporal),
        "T8" | "TP8" | "FT8" => return Some(Region::RightTemporal),
        _ => {}
    }
    if label.starts_with("Fp") {
        Some(Region::Prefrontal)
    } else if label.starts_with("FC") || (label.starts_with('C') && !label.starts_with("CP")) {
        Some(Region::Central)
    } else if label.starts_with("AF") || label.starts_with('F') {
        Some(Region::Frontal)
    } else if label.starts_with("PO") || label.starts_with('O') {
        Some(Region::Occipital)
    } else if label.starts_with("CP") || label.starts_with('P') {
        Some(Region::Parietal)
    } else {
        None
    }
}
