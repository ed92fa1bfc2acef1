//! Single-factor device latency model: `MACs / throughput + overhead`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use super::count_macs;
use crate::error::{Error, Result};
use crate::graph::{Architecture, ModelGraph, WeightInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceClass {
    LowEndMcu,
    HighEndMcu,
    AiAccelerator,
    Cpu,
    Gpu,
}

impl DeviceClass {
    /// Slowest to fastest.
    pub const ALL: [DeviceClass; 5] = [
        DeviceClass::LowEndMcu,
        DeviceClass::HighEndMcu,
        DeviceClass::AiAccelerator,
        DeviceClass::Cpu,
        DeviceClass::Gpu,
    ];

    /// Identifier used in profile files.
    pub fn key(self) -> &'static str {
        match self {
            DeviceClass::LowEndMcu => "low_end_mcu",
            DeviceClass::HighEndMcu => "high_end_mcu",
            DeviceClass::AiAccelerator => "ai_accelerator",
            DeviceClass::Cpu => "cpu",
            DeviceClass::Gpu => "gpu",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        DeviceClass::ALL.into_iter().find(|d| d.key() == key)
    }

    pub fn label(self) -> &'static str {
        match self {
            DeviceClass::LowEndMcu => "Low-end MCU",
            DeviceClass::HighEndMcu => "High-end MCU",
            DeviceClass::AiAccelerator => "AI Accelerator",
            DeviceClass::Cpu => "CPU",
            DeviceClass::Gpu => "GPU",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Measured latencies (ms) of the deployed models, slowest device first.
pub const REPORTED_LATENCY_MS: [(Architecture, [f64; 5]); 4] = [
    (Architecture::MobileNet, [156_957.0, 3_214.0, 536.0, 109.0, 19.0]),
    (Architecture::ShuffleNet, [23_169.0, 476.0, 80.0, 15.0, 3.0]),
    (Architecture::SqueezeNet, [241_592.0, 4_946.0, 825.0, 101.0, 17.0]),
    (Architecture::CustomDnn, [192_877.0, 3_948.0, 658.0, 91.0, 16.0]),
];

/// Reported INT8 model sizes in bytes (K and M read as 10³ and 10⁶).
pub const REFERENCE_ROM_BYTES: [(Architecture, f64); 4] = [
    (Architecture::MobileNet, 3.5e6),
    (Architecture::ShuffleNet, 68.5e3),
    (Architecture::SqueezeNet, 176.1e3),
    (Architecture::CustomDnn, 1.6e6),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceProfile {
    pub device: DeviceClass,
    /// Effective MACs per millisecond.
    pub throughput: f64,
    pub overhead_ms: f64,
}

impl DeviceProfile {
    pub fn new(device: DeviceClass, throughput: f64, overhead_ms: f64) -> Result<Self> {
        if !(throughput > 0.0 && throughput.is_finite()) {
            return Err(Error::Profile(format!("{}: throughput {throughput} must be positive", device.key())));
        }
        if !(overhead_ms >= 0.0 && overhead_ms.is_finite()) {
            return Err(Error::Profile(format!("{}: overhead {overhead_ms} must be non-negative", device.key())));
        }
        Ok(DeviceProfile { device, throughput, overhead_ms })
    }

    pub fn latency_ms(&self, macs: u64) -> f64 {
        macs as f64 / self.throughput + self.overhead_ms
    }
}

/// Estimated latency of one inference in milliseconds.
pub fn estimate_latency(graph: &ModelGraph, profile: &DeviceProfile) -> Result<f64> {
    Ok(profile.latency_ms(count_macs(graph)?.total))
}

/// One profile per device class, kept in device order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    profiles: Vec<DeviceProfile>,
}

impl ProfileSet {
    pub fn new(mut profiles: Vec<DeviceProfile>) -> Result<Self> {
        profiles.sort_by_key(|p| p.device);
        for pair in profiles.windows(2) {
            if pair[0].device == pair[1].device {
                return Err(Error::Profile(format!("device {} listed twice", pair[0].device.key())));
            }
        }
        Ok(ProfileSet { profiles })
    }

    /// Profiles fitted to the deployed MobileNet latencies.
    pub fn bundled() -> Self {
        ProfileSet::parse(include_str!("../../../../profiles/paper.profile")).expect("bundled profile file parses")
    }

    pub fn profiles(&self) -> &[DeviceProfile] {
        &self.profiles
    }

    pub fn get(&self, device: DeviceClass) -> Option<&DeviceProfile> {
        self.profiles.iter().find(|p| p.device == device)
    }

    /// Parses `device=<key> throughput=<macs/ms> overhead_ms=<ms>` lines;
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut profiles = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Profile(format!("line {}: {msg}", lineno + 1));
            let mut fields = BTreeMap::new();
            for item in line.split_whitespace() {
                let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {item}")))?;
                if fields.insert(k, v).is_some() {
                    return Err(bad(format!("duplicate key {k}")));
                }
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
            let device = get("device")?;
            let device = DeviceClass::from_key(device).ok_or_else(|| bad(format!("unknown device {device}")))?;
            let num = |k: &str| -> Result<f64> {
                let v = get(k)?;
                v.parse().map_err(|_| bad(format!("{k}: not a number: {v}")))
            };
            let overhead = if fields.contains_key("overhead_ms") { num("overhead_ms")? } else { 0.0 };
            if let Some(k) = fields.keys().find(|k| !["device", "throughput", "overhead_ms"].contains(k)) {
                return Err(bad(format!("unknown key {k}")));
            }
            profiles.push(DeviceProfile::new(device, num("throughput")?, overhead).map_err(|e| bad(e.to_string()))?);
        }
        if profiles.is_empty() {
            return Err(Error::Profile("no device profiles".into()));
        }
        ProfileSet::new(profiles)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ProfileSet::parse(&text)
    }

    /// Profile lines without comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.profiles {
            let _ = writeln!(out, "device={} throughput={} overhead_ms={}", p.device.key(), p.throughput, p.overhead_ms);
        }
        out
    }
}

/// A measured latency for a model with a known MAC count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub macs: u64,
    pub device: DeviceClass,
    pub observed_ms: f64,
}

impl Anchor {
    pub fn from_graph(graph: &ModelGraph, device: DeviceClass, observed_ms: f64) -> Result<Self> {
        Ok(Anchor { macs: count_macs(graph)?.total, device, observed_ms })
    }
}

/// Per-device throughput `MACs / (observed − overhead)`, averaged over that
/// device's anchors.
pub fn fit_device_profiles(anchors: &[Anchor], overhead_ms: f64) -> Result<ProfileSet> {
    let mut per_device: BTreeMap<DeviceClass, Vec<f64>> = BTreeMap::new();
    for a in anchors {
        if !(a.observed_ms > overhead_ms) {
            return Err(Error::Profile(format!(
                "{}: observed {} ms does not exceed the {} ms overhead",
                a.device.key(),
                a.observed_ms,
                overhead_ms
            )));
        }
        per_device
            .entry(a.device)
            .or_default()
            .push(a.macs as f64 / (a.observed_ms - overhead_ms));
    }
    if per_device.is_empty() {
        return Err(Error::Profile("no anchors to fit".into()));
    }
    let profiles = per_device
        .into_iter()
        .map(|(d, t)| DeviceProfile::new(d, t.iter().sum::<f64>() / t.len() as f64, overhead_ms))
        .collect::<Result<Vec<_>>>()?;
    ProfileSet::new(profiles)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRow {
    pub model: Architecture,
    pub device: DeviceClass,
    pub reported_ms: f64,
    pub predicted_ms: f64,
}

/// Predicted versus reported latency for every model and device.
pub fn fit_report(profiles: &ProfileSet, macs: &[(Architecture, u64)]) -> Vec<FitRow> {
    let mut rows = Vec::new();
    for &(arch, reported) in &REPORTED_LATENCY_MS {
        let Some(&(_, m)) = macs.iter().find(|(a, _)| *a == arch) else { continue };
        for (device, reported_ms) in DeviceClass::ALL.into_iter().zip(reported) {
            if let Some(p) = profiles.get(device) {
                rows.push(FitRow { model: arch, device, reported_ms, predicted_ms: p.latency_ms(m) });
            }
        }
    }
    rows
}

/// Regenerates the shipped profile file: profiles fitted on the default
/// MobileNet's reported latencies, with a header giving the fit against
/// every reported latency.
pub fn reference_profile_text() -> Result<String> {
    let mut macs = Vec::new();
    for arch in Architecture::ALL {
        let g = arch.build_default(WeightInit::default())?;
        macs.push((arch, count_macs(&g)?.total));
    }
    let mobilenet = macs[0].1;
    let anchors: Vec<Anchor> = DeviceClass::ALL
        .into_iter()
        .zip(REPORTED_LATENCY_MS[0].1)
        .map(|(device, observed_ms)| Anchor { macs: mobilenet, device, observed_ms })
        .collect();
    let profiles = fit_device_profiles(&anchors, 0.0)?;

    let mut out = String::new();
    out.push_str("# Device profiles fitted on the default MobileNet's reported latencies.\n");
    out.push_str("# throughput is in MACs per millisecond; latency = MACs / throughput + overhead_ms.\n#\n");
    out.push_str("# MAC counts of the default models:\n");
    for (arch, m) in &macs {
        let _ = writeln!(out, "#   {:<11} {m}", arch.name());
    }
    out.push_str("#\n# predicted / reported latency:\n");
    let _ = write!(out, "#   {:<11}", "model");
    for d in DeviceClass::ALL {
        let _ = write!(out, " {:>14}", d.key());
    }
    out.push('\n');
    let rows = fit_report(&profiles, &macs);
    for arch in Architecture::ALL {
        let _ = write!(out, "#   {:<11}", arch.name());
        for r in rows.iter().filter(|r| r.model == arch) {
            let _ = write!(out, " {:>14.3}", r.predicted_ms / r.reported_ms);
        }
        out.push('\n');
    }
    out.push_str(&profiles.to_text());
    Ok(out)
}
