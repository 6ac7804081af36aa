use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monthly time steps per sample.
pub const N_STEPS: usize = 12;
/// Feature channels per time step.
pub const N_CHANNELS: usize = 18;
/// Values per sample (`N_STEPS * N_CHANNELS`).
pub const N_VALUES: usize = N_STEPS * N_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    Sar,
    Multispectral,
    Climate,
    Topographic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub name: &'static str,
    pub group: ChannelGroup,
    /// Same value at every time step.
    pub is_static: bool,
    /// Band or index derived from Sentinel-2 imagery.
    pub sentinel2: bool,
}

const fn ch(name: &'static str, group: ChannelGroup, is_static: bool, sentinel2: bool) -> Channel {
    Channel {
        name,
        group,
        is_static,
        sentinel2,
    }
}

use ChannelGroup::*;

/// Channel order of every feature container and model input.
pub const CHANNELS: [Channel; N_CHANNELS] = [
    ch("VV", Sar, false, false),
    ch("VH", Sar, false, false),
    ch("B2", Multispectral, false, true),
    ch("B3", Multispectral, false, true),
    ch("B4", Multispectral, false, true),
    ch("B8", Multispectral, false, true),
    ch("B5", Multispectral, false, true),
    ch("B6", Multispectral, false, true),
    ch("B7", Multispectral, false, true),
    ch("B8A", Multispectral, false, true),
    ch("B9", Multispectral, false, true),
    ch("B11", Multispectral, false, true),
    ch("B12", Multispectral, false, true),
    ch("NDVI", Multispectral, false, true),
    ch("precip_monthly", Climate, false, false),
    ch("temp_2m_monthly", Climate, false, false),
    ch("elevation", Topographic, true, false),
    ch("slope", Topographic, true, false),
];

pub const RED: usize = 4;
pub const NIR: usize = 5;
pub const NDVI: usize = 13;

pub fn channel_names() -> Vec<String> {
    CHANNELS.iter().map(|c| c.name.to_string()).collect()
}

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNELS.iter().position(|c| c.name == name)
}

/// Validates a channel list read from a file against [`CHANNELS`].
pub fn check_channel_names(names: &[String]) -> Result<()> {
    if names.len() != N_CHANNELS {
        return Err(Error::Schema(format!(
            "expected {N_CHANNELS} channels, found {}",
            names.len()
        )));
    }
    for (i, (got, want)) in names.iter().zip(CHANNELS.iter()).enumerate() {
        if got != want.name {
            return Err(Error::Schema(format!(
                "channel {i} is `{got}`, expected `{}`",
                want.name
            )));
        }
    }
    Ok(())
}

/// Which channels a model consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    #[default]
    Full,
    /// Sentinel-2 bands plus NDVI.
    S2NdviOnly,
}

impl FeatureSet {
    pub fn channel_indices(self) -> Vec<usize> {
        CHANNELS
            .iter()
            .enumerate()
            .filter(|(_, c)| match self {
                FeatureSet::Full => true,
                FeatureSet::S2NdviOnly => c.sentinel2,
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn channel_names(self) -> Vec<String> {
        self.channel_indices()
            .into_iter()
            .map(|i| CHANNELS[i].name.to_string())
            .collect()
    }
}

/// Resolves channel names to schema indices.
pub fn indices_for_names(names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| channel_index(n).ok_or_else(|| Error::Schema(format!("unknown channel `{n}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighteen_channels_without_b1_b10() {
        assert_eq!(CHANNELS.len(), 18);
        assert!(channel_index("B1").is_none());
        assert!(channel_index("B10").is_none());
        assert_eq!(CHANNELS[RED].name, "B4");
        assert_eq!(CHANNELS[NIR].name, "B8");
        assert_eq!(CHANNELS[NDVI].name, "NDVI");
    }

    #[test]
    fn group_counts() {
        let count = |g| CHANNELS.iter().filter(|c| c.group == g).count();
        assert_eq!(count(ChannelGroup::Sar), 2);
        assert_eq!(count(ChannelGroup::Multispectral), 12);
        assert_eq!(count(ChannelGroup::Climate), 2);
        assert_eq!(count(ChannelGroup::Topographic), 2);
        let statics: Vec<_> = CHANNELS.iter().filter(|c| c.is_static).map(|c| c.name).collect();
        assert_eq!(statics, ["elevation", "slope"]);
    }

    #[test]
    fn s2_selection_is_bands_plus_ndvi() {
        let names = FeatureSet::S2NdviOnly.channel_names();
        assert_eq!(names.len(), 12);
        assert!(names.iter().all(|n| n.starts_with('B') || n == "NDVI"));
        assert_eq!(FeatureSet::Full.channel_indices(), (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn channel_list_validation() {
        assert!(check_channel_names(&channel_names()).is_ok());
        let mut short = channel_names();
        short.pop();
        assert!(check_channel_names(&short).is_err());
        let mut swapped = channel_names();
        swapped.swap(0, 1);
        assert!(check_channel_names(&swapped).is_err());
    }
}
