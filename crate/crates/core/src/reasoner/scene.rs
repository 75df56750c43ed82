use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetStyle {
    /// Weather, view and altitude are all annotated.
    UavdtLike,
    /// Only the time of day (day/night) is annotated.
    VisdroneLike,
}

impl std::fmt::Display for DatasetStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetStyle::UavdtLike => "uavdt-like",
            DatasetStyle::VisdroneLike => "visdrone-like",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Clean,
    Night,
    Foggy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Side,
    Front,
    Bird,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Altitude {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    Day,
    Night,
}

impl Weather {
    pub const ALL: [Weather; 3] = [Weather::Clean, Weather::Night, Weather::Foggy];

    pub fn name(self) -> &'static str {
        ["clean", "night", "foggy"][self as usize]
    }
}

impl View {
    pub const ALL: [View; 3] = [View::Side, View::Front, View::Bird];

    pub fn name(self) -> &'static str {
        ["side", "front", "bird"][self as usize]
    }
}

impl Altitude {
    pub const ALL: [Altitude; 3] = [Altitude::Low, Altitude::Medium, Altitude::High];

    pub fn name(self) -> &'static str {
        ["low", "medium", "high"][self as usize]
    }
}

impl TimeOfDay {
    pub fn name(self) -> &'static str {
        ["day", "night"][self as usize]
    }
}

/// Scene-level conditions of one image. Every sample carries all three
/// proxies; the visdrone-like style restricts weather to clean/night and
/// exposes only the derived time of day as a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAttributes {
    pub weather: Weather,
    pub view: View,
    pub altitude: Altitude,
}

impl SceneAttributes {
    pub fn time(&self) -> TimeOfDay {
        if self.weather == Weather::Night {
            TimeOfDay::Night
        } else {
            TimeOfDay::Day
        }
    }

    /// Class index per guidance head.
    pub fn labels(&self, style: DatasetStyle) -> Vec<usize> {
        match style {
            DatasetStyle::UavdtLike => vec![self.weather as usize, self.view as usize, self.altitude as usize],
            DatasetStyle::VisdroneLike => vec![self.time() as usize],
        }
    }

    pub fn valid_for(&self, style: DatasetStyle) -> bool {
        style == DatasetStyle::UavdtLike || self.weather != Weather::Foggy
    }
}

/// `(head name, class count)` for each guidance head.
pub fn attribute_heads(style: DatasetStyle) -> &'static [(&'static str, usize)] {
    match style {
        DatasetStyle::UavdtLike => &[("weather", 3), ("view", 3), ("altitude", 3)],
        DatasetStyle::VisdroneLike => &[("time", 2)],
    }
}

/// Default prompt pool per style.
pub fn default_prompts(style: DatasetStyle) -> Vec<String> {
    let pool: [&str; 4] = match style {
        DatasetStyle::UavdtLike => [
            "Describe the given drone-view image with respect to weather, view, and altitude conditions.",
            "What are the weather, view, and altitude conditions in the given drone-view image?",
            "Illustrate the weather, view, and altitude conditions in the given drone-view image.",
            "Describe the weather, view, and altitude conditions in which the given drone-view image is captured.",
        ],
        DatasetStyle::VisdroneLike => [
            "Describe the given drone-view image with respect to time that the image is captured.",
            "What is time condition for the given drone-view image?",
            "Illustrate the time which the given drone-view image is taken.",
            "Describe which time the given drone-view image is captured.",
        ],
    };
    pool.iter().map(|s| s.to_string()).collect()
}

/// Slot-filled scene description that the guidance heads predict.
pub fn scene_description(attrs: &SceneAttributes, style: DatasetStyle) -> String {
    match style {
        DatasetStyle::UavdtLike => format!(
            "The drone-view image is taken from a {} altitude with a {} view during the {} scene.",
            attrs.altitude.name(),
            attrs.view.name(),
            attrs.weather.name()
        ),
        DatasetStyle::VisdroneLike => format!("The drone-view image is taken at {} time.", attrs.time().name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_per_style() {
        let a = SceneAttributes { weather: Weather::Night, view: View::Bird, altitude: Altitude::Low };
        assert_eq!(a.labels(DatasetStyle::UavdtLike), vec![1, 2, 0]);
        assert_eq!(a.labels(DatasetStyle::VisdroneLike), vec![1]);
        assert_eq!(
            scene_description(&a, DatasetStyle::UavdtLike),
            "The drone-view image is taken from a low altitude with a bird view during the night scene."
        );
        assert_eq!(scene_description(&a, DatasetStyle::VisdroneLike), "The drone-view image is taken at night time.");
    }

    #[test]
    fn foggy_not_valid_for_visdrone() {
        let a = SceneAttributes { weather: Weather::Foggy, view: View::Side, altitude: Altitude::High };
        assert!(!a.valid_for(DatasetStyle::VisdroneLike));
        assert!(a.valid_for(DatasetStyle::UavdtLike));
    }
}
