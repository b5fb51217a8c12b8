use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub text: String,
    pub phones: Option<Vec<String>>,
}

/// Corpus listing: one utterance per line, tab-separated
/// `utt_id, audio_path, text[, phones]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AudioManifest {
    pub entries: Vec<ManifestEntry>,
}

impl AudioManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}", e.utt_id, e.audio_path.display(), e.text));
            if let Some(phones) = &e.phones {
                out.push('\t');
                out.push_str(&phones.join(" "));
            }
            out.push('\n');
        }
        out
    }
}

/// Parses manifest text. Relative audio paths are resolved against `base`.
pub fn parse_manifest(text: &str, origin: &Path, base: Option<&Path>) -> Result<AudioManifest> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(line_no, format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
        }
        let utt_id = fields[0].trim();
        if utt_id.is_empty() {
            return Err(err(line_no, "empty utt_id".into()));
        }
        if fields[1].trim().is_empty() {
            return Err(err(line_no, "empty audio path".into()));
        }
        let text = fields[2].trim();
        if text.is_empty() {
            return Err(err(line_no, "empty text".into()));
        }
        let phones = match fields.get(3) {
            Some(p) => {
                let phones: Vec<String> = p.split_whitespace().map(str::to_owned).collect();
                if phones.is_empty() {
                    return Err(err(line_no, "phone field present but empty".into()));
                }
                Some(phones)
            }
            None => None,
        };
        if !seen.insert(utt_id.to_owned()) {
            return Err(err(line_no, format!("duplicate utt_id {utt_id}")));
        }
        let mut audio_path = PathBuf::from(fields[1].trim());
        if let Some(base) = base {
            if audio_path.is_relative() {
                audio_path = base.join(audio_path);
            }
        }
        entries.push(ManifestEntry {
            utt_id: utt_id.to_owned(),
            audio_path,
            text: text.to_owned(),
            phones,
        });
    }
    Ok(AudioManifest { entries })
}

pub fn load_manifest(path: &Path) -> Result<AudioManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<AudioManifest> {
        parse_manifest(text, Path::new("m.tsv"), None)
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn optional_phones_column() {
        let m = parse("a\ta.wav\thello\nb\tb.wav\tworld\tw er l d\n").unwrap();
        assert_eq!(m.entries[0].phones, None);
        assert_eq!(m.entries[1].phones.as_deref().unwrap(), ["w", "er", "l", "d"]);
    }

    #[test]
    fn duplicate_ids_report_the_line() {
        let err = parse("a\ta.wav\tx\n# c\na\tb.wav\ty\n").unwrap_err();
        assert!(err.to_string().starts_with("m.tsv:3:"), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse("a\ta.wav\n").is_err());
        assert!(parse("a\ta.wav\t \n").is_err());
        assert!(parse("a\ta.wav\ttext\t  \n").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let m = parse_manifest("a\twav/a.wav\tx\n", Path::new("m"), Some(Path::new("/data"))).unwrap();
        assert_eq!(m.entries[0].audio_path, PathBuf::from("/data/wav/a.wav"));
    }

    #[test]
    fn text_round_trip() {
        let m = parse("a\ta.wav\thello there\tp q\nb\tb.wav\tyo\n").unwrap();
        assert_eq!(parse(&m.to_text()).unwrap(), m);
    }
}
