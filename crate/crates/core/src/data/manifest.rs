//! Line-oriented corpus manifest.
//!
//! ```text
//! # comment
//! SPLIT train
//! FG photos/cat.ppm photos/cat_mask.pgm
//! BG paintings/starry.png
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::DataError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub foregrounds: Vec<ForegroundEntry>,
    pub backgrounds: Vec<PathBuf>,
}

impl Manifest {
    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, DataError> {
        let mut m = Manifest::default();
        let mut split_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| DataError::Manifest { line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["FG", image, mask] => m.foregrounds.push(ForegroundEntry { image: base.join(image), mask: base.join(mask) }),
                ["BG", image] => m.backgrounds.push(base.join(image)),
                ["SPLIT", split] => {
                    if split_seen {
                        return Err(err("SPLIT given twice".into()));
                    }
                    split_seen = true;
                    m.split = split.parse().map_err(err)?;
                }
                ["FG", ..] => return Err(err("FG takes an image path and a mask path".into())),
                ["BG", ..] => return Err(err("BG takes one image path".into())),
                [tag, ..] => return Err(err(format!("unknown entry `{tag}`"))),
                [] => unreachable!(),
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Renders with paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = format!("SPLIT {}\n", self.split);
        for fg in &self.foregrounds {
            out += &format!("FG {} {}\n", rel(&fg.image), rel(&fg.mask));
        }
        for bg in &self.backgrounds {
            out += &format!("BG {}\n", rel(bg));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_comments() {
        let text = "# corpus\nSPLIT test\n\nFG a.ppm a_mask.pgm  # first\nBG /abs/b.png\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.split, Split::Test);
        assert_eq!(m.foregrounds[0].image, PathBuf::from("/data/a.ppm"));
        assert_eq!(m.foregrounds[0].mask, PathBuf::from("/data/a_mask.pgm"));
        assert_eq!(m.backgrounds, vec![PathBuf::from("/abs/b.png")]);
    }

    #[test]
    fn errors_name_the_line() {
        let err = Manifest::parse("BG x.ppm\nFG only_one.ppm\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, DataError::Manifest { line: 2, .. }), "{err}");
        let err = Manifest::parse("XX y\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(Manifest::parse("SPLIT val\n", Path::new(".")).is_err());
    }

    #[test]
    fn render_round_trip() {
        let base = Path::new("/corpus");
        let m = Manifest::parse("FG f.ppm f_mask.pgm\nBG b.ppm\n", base).unwrap();
        assert_eq!(Manifest::parse(&m.render(base), base).unwrap(), m);
    }
}
