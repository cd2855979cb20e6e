//! Control-token layouts of the five tasks.
//!
//! | task        | source                          | target        |
//! |-------------|---------------------------------|---------------|
//! | TRN         | `x' <lang>`                     | `y'`          |
//! | INS/DEL/SUB | `x' <lang> y <ins/del/sub>`     | `y'`          |
//! | BTI         | `x <lang> y_g` (with `<gap>`s)  | gap fillers   |
//!
//! Target ids never include BOS/EOS; the model adds them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::subword::{BpeModel, Special};
use crate::{Error, Result};

/// Word used inside gapped target text to mark a masked span.
pub const GAP_MARKER: &str = "<gap>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Trn,
    Ins,
    Del,
    Sub,
    Bti,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [TaskKind::Trn, TaskKind::Ins, TaskKind::Del, TaskKind::Sub, TaskKind::Bti];
    pub const UPDATES: [TaskKind; 3] = [TaskKind::Ins, TaskKind::Del, TaskKind::Sub];

    pub fn is_update(self) -> bool {
        matches!(self, TaskKind::Ins | TaskKind::Del | TaskKind::Sub)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Trn => "TRN",
            TaskKind::Ins => "INS",
            TaskKind::Del => "DEL",
            TaskKind::Sub => "SUB",
            TaskKind::Bti => "BTI",
        }
    }

    fn update_tag(self) -> Option<Special> {
        match self {
            TaskKind::Ins => Some(Special::Ins),
            TaskKind::Del => Some(Special::Del),
            TaskKind::Sub => Some(Special::Sub),
            _ => None,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Protocol(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedExample {
    pub source_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub task: TaskKind,
}

/// One training/test record. The pre-edit source sentence is not stored;
/// models never see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub task: TaskKind,
    pub x_prime: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<String>,
    pub y_prime: String,
    pub src_lang: String,
    pub tgt_lang: String,
    /// Masked word span `[start, end)` of `y_prime`, for BTI records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<[usize; 2]>,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.y.is_some() != self.task.is_update() {
            return Err(Error::Protocol(format!(
                "{} triplet {} an initial target",
                self.task,
                if self.task.is_update() { "needs" } else { "must not have" }
            )));
        }
        if self.gap.is_some() != (self.task == TaskKind::Bti) {
            return Err(Error::Protocol("only BTI triplets carry a gap span".into()));
        }
        if let Some([s, e]) = self.gap {
            if s >= e || e > self.y_prime.split_whitespace().count() {
                return Err(Error::Protocol(format!("gap span [{s}, {e}) out of range")));
            }
        }
        Ok(())
    }

    /// The gapped target and gold filler for a BTI triplet.
    pub fn bti_parts(&self) -> Result<(String, String)> {
        let [s, e] = self.gap.ok_or_else(|| Error::Protocol("not a BTI triplet".into()))?;
        let words: Vec<&str> = self.y_prime.split_whitespace().collect();
        if s >= e || e > words.len() {
            return Err(Error::Protocol(format!("gap span [{s}, {e}) out of range")));
        }
        Ok((gap_words(&words, s, e), words[s..e].join(" ")))
    }

    /// Encoded training example, target included.
    pub fn encode(&self, bpe: &BpeModel) -> Result<EncodedExample> {
        self.validate()?;
        match self.task {
            TaskKind::Trn => encode_trn(bpe, &self.x_prime, &self.tgt_lang, Some(&self.y_prime)),
            TaskKind::Bti => {
                let (gapped, filler) = self.bti_parts()?;
                encode_bti(bpe, &self.x_prime, &gapped, &self.tgt_lang, Some(&[filler.as_str()]))
            }
            kind => encode_update(
                bpe,
                &self.x_prime,
                self.y.as_deref().unwrap_or_default(),
                kind,
                &self.tgt_lang,
                Some(&self.y_prime),
            ),
        }
    }
}

/// `words` with `[start, end)` replaced by one gap marker.
pub fn gap_words(words: &[&str], start: usize, end: usize) -> String {
    let mut out: Vec<&str> = words[..start].to_vec();
    out.push(GAP_MARKER);
    out.extend_from_slice(&words[end..]);
    out.join(" ")
}

fn non_empty(text: &str, what: &str) -> Result<()> {
    if text.trim().is_empty() {
        Err(Error::Protocol(format!("empty {what}")))
    } else {
        Ok(())
    }
}

/// `x' <lang>`; the target is `y'` when given (training), empty otherwise.
pub fn encode_trn(
    bpe: &BpeModel,
    x_prime: &str,
    tgt_lang: &str,
    y_prime: Option<&str>,
) -> Result<EncodedExample> {
    non_empty(x_prime, "source sentence")?;
    let mut source_ids = bpe.encode(x_prime);
    source_ids.push(bpe.lang_tag(tgt_lang)?);
    Ok(EncodedExample {
        source_ids,
        target_ids: y_prime.map(|t| bpe.encode(t)).unwrap_or_default(),
        task: TaskKind::Trn,
    })
}

/// `x' <lang> y <update>`.
pub fn encode_update(
    bpe: &BpeModel,
    x_prime: &str,
    y: &str,
    kind: TaskKind,
    tgt_lang: &str,
    y_prime: Option<&str>,
) -> Result<EncodedExample> {
    let tag = kind
        .update_tag()
        .ok_or_else(|| Error::NotAnUpdateKind(kind.name().to_string()))?;
    non_empty(x_prime, "source sentence")?;
    non_empty(y, "initial target")?;
    let mut source_ids = bpe.encode(x_prime);
    source_ids.push(bpe.lang_tag(tgt_lang)?);
    source_ids.extend(bpe.encode(y));
    source_ids.push(tag.id());
    Ok(EncodedExample {
        source_ids,
        target_ids: y_prime.map(|t| bpe.encode(t)).unwrap_or_default(),
        task: kind,
    })
}

/// `x <lang> y_g`, where `y_gapped` marks masked spans with [`GAP_MARKER`]
/// words. Fillers (when given) are joined with `<sep>`.
pub fn encode_bti(
    bpe: &BpeModel,
    x: &str,
    y_gapped: &str,
    tgt_lang: &str,
    fillers: Option<&[&str]>,
) -> Result<EncodedExample> {
    non_empty(x, "source sentence")?;
    let mut source_ids = bpe.encode(x);
    source_ids.push(bpe.lang_tag(tgt_lang)?);
    let mut gaps = 0;
    for word in y_gapped.split_whitespace() {
        if word == GAP_MARKER {
            source_ids.push(Special::Gap.id());
            gaps += 1;
        } else {
            source_ids.extend(bpe.encode(word));
        }
    }
    if gaps == 0 {
        return Err(Error::NoGap);
    }
    let mut target_ids = Vec::new();
    if let Some(fillers) = fillers {
        if fillers.len() != gaps {
            return Err(Error::Protocol(format!("{gaps} gaps but {} fillers", fillers.len())));
        }
        for (i, f) in fillers.iter().enumerate() {
            non_empty(f, "gap filler")?;
            if i > 0 {
                target_ids.push(Special::Sep.id());
            }
            target_ids.extend(bpe.encode(f));
        }
    }
    Ok(EncodedExample { source_ids, target_ids, task: TaskKind::Bti })
}

/// Splits a decoded infilling output into per-gap fillers.
pub fn split_fillers(bpe: &BpeModel, ids: &[u32]) -> Result<Vec<String>> {
    ids.split(|&i| i == Special::Sep.id())
        .map(|part| bpe.decode(part))
        .collect()
}

/// Checks the structural invariant of `ex.task`.
pub fn validate_example(bpe: &BpeModel, ex: &EncodedExample) -> Result<()> {
    let fail = |msg: String| Err(Error::Protocol(format!("{} example: {msg}", ex.task)));
    let src = &ex.source_ids;
    if let Some(&bad) = src.iter().chain(&ex.target_ids).find(|&&i| bpe.token(i).is_none()) {
        return fail(format!("unknown id {bad}"));
    }
    let lang_positions: Vec<usize> = (0..src.len()).filter(|&i| bpe.is_lang_tag(src[i])).collect();
    let [lang_pos] = lang_positions[..] else {
        return fail(format!("{} language tags", lang_positions.len()));
    };
    if lang_pos == 0 {
        return fail("nothing before the language tag".into());
    }
    let count = |s: Special| src.iter().filter(|&&i| i == s.id()).count();
    let updates = count(Special::Ins) + count(Special::Del) + count(Special::Sub);
    let gaps = count(Special::Gap);
    if src[..lang_pos].iter().any(|&i| bpe.is_reserved(i)) {
        return fail("reserved token inside the source sentence".into());
    }
    let structural = [Special::Pad, Special::Bos, Special::Eos, Special::Sep];
    if structural.iter().any(|&s| count(s) > 0) {
        return fail("structural token in source".into());
    }
    let target_reserved = ex
        .target_ids
        .iter()
        .filter(|&&i| bpe.is_reserved(i) && !(ex.task == TaskKind::Bti && i == Special::Sep.id()))
        .count();
    if target_reserved > 0 {
        return fail("reserved token in target".into());
    }
    match ex.task {
        TaskKind::Trn => {
            if lang_pos != src.len() - 1 || updates > 0 || gaps > 0 {
                return fail("source must end with the language tag only".into());
            }
        }
        TaskKind::Ins | TaskKind::Del | TaskKind::Sub => {
            let tag = ex.task.update_tag().expect("update kind").id();
            if updates != 1 || src.last() != Some(&tag) || gaps > 0 {
                return fail("source must end with exactly one matching update tag".into());
            }
            if lang_pos + 1 >= src.len() - 1 {
                return fail("missing initial target".into());
            }
        }
        TaskKind::Bti => {
            if updates > 0 || gaps == 0 {
                return fail("needs at least one gap and no update tag".into());
            }
            if ex.target_ids.is_empty() {
                return fail("empty filler".into());
            }
            let seps = ex.target_ids.iter().filter(|&&i| i == Special::Sep.id()).count();
            if seps + 1 != gaps {
                return fail(format!("{gaps} gaps but {} fillers", seps + 1));
            }
        }
    }
    Ok(())
}

/// Longest common subsequence length over token slices.
fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Classifies an edit of a text box by a word-level diff. `None` means the
/// text did not change; an empty previous text means translate from scratch.
pub fn classify_update(old_text: &str, new_text: &str) -> Option<TaskKind> {
    let old: Vec<&str> = old_text.split_whitespace().collect();
    let new: Vec<&str> = new_text.split_whitespace().collect();
    if old.is_empty() {
        return Some(TaskKind::Trn);
    }
    if old == new {
        return None;
    }
    let common = lcs_len(&old, &new);
    match (new.len() - common, old.len() - common) {
        (_, 0) => Some(TaskKind::Ins),
        (0, _) => Some(TaskKind::Del),
        _ => Some(TaskKind::Sub),
    }
}

pub fn write_jsonl(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Triplet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(&line)
            .map_err(|e| Error::format("triplet JSON-lines", format!("line {}: {e}", i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::learn_bpe;
    use proptest::prelude::*;

    fn bpe() -> BpeModel {
        let corpus = [
            "The white cat", "Le chat blanc", "Le chat est blanc", "Le chat noir",
            "The cat is white", "The black cat", "Le chat",
        ];
        learn_bpe(corpus, 30, &["en", "fr"]).unwrap()
    }

    #[test]
    fn trn_layout() {
        let m = bpe();
        let ex = encode_trn(&m, "The white cat", "fr", Some("Le chat blanc")).unwrap();
        assert_eq!(m.decode(&ex.source_ids).unwrap(), "The white cat <fr>");
        assert_eq!(m.decode(&ex.target_ids).unwrap(), "Le chat blanc");
        validate_example(&m, &ex).unwrap();
        assert!(encode_trn(&m, "  ", "fr", None).is_err());
        assert!(matches!(encode_trn(&m, "cat", "de", None), Err(Error::UnknownLanguage(_))));
        let inference = encode_trn(&m, "The white cat", "fr", None).unwrap();
        assert!(inference.target_ids.is_empty());
    }

    #[test]
    fn update_layouts() {
        let m = bpe();
        for (y, kind, tag) in [
            ("Le chat", TaskKind::Ins, "<ins>"),
            ("Le chat est blanc", TaskKind::Del, "<del>"),
            ("Le chat noir", TaskKind::Sub, "<sub>"),
        ] {
            let ex = encode_update(&m, "The white cat", y, kind, "fr", Some("Le chat blanc")).unwrap();
            assert_eq!(m.decode(&ex.source_ids).unwrap(), format!("The white cat <fr> {y} {tag}"));
            assert_eq!(m.decode(&ex.target_ids).unwrap(), "Le chat blanc");
            validate_example(&m, &ex).unwrap();
        }
        for kind in [TaskKind::Trn, TaskKind::Bti] {
            assert!(matches!(
                encode_update(&m, "a", "b", kind, "fr", None),
                Err(Error::NotAnUpdateKind(_))
            ));
        }
    }

    #[test]
    fn bti_layouts() {
        let m = bpe();
        let ex = encode_bti(&m, "The white cat", "Le <gap> blanc", "fr", Some(&["chat"])).unwrap();
        assert_eq!(m.decode(&ex.source_ids).unwrap(), "The white cat <fr> Le <gap> blanc");
        assert_eq!(m.decode(&ex.target_ids).unwrap(), "chat");
        validate_example(&m, &ex).unwrap();

        let start = encode_bti(&m, "The white cat", "<gap> chat blanc", "fr", Some(&["Le"])).unwrap();
        assert_eq!(m.decode(&start.target_ids).unwrap(), "Le");
        validate_example(&m, &start).unwrap();

        let two = encode_bti(&m, "The white cat", "<gap> chat <gap>", "fr", Some(&["Le", "blanc"])).unwrap();
        assert_eq!(split_fillers(&m, &two.target_ids).unwrap(), ["Le", "blanc"]);
        validate_example(&m, &two).unwrap();

        assert!(matches!(encode_bti(&m, "The white cat", "Le chat", "fr", None), Err(Error::NoGap)));
    }

    #[test]
    fn validator_rejects_malformed() {
        let m = bpe();
        let mut ex = encode_trn(&m, "The cat", "fr", Some("Le chat")).unwrap();
        ex.source_ids.push(Special::Ins.id());
        assert!(validate_example(&m, &ex).is_err());
        let mut ex = encode_update(&m, "The cat", "Le", TaskKind::Ins, "fr", None).unwrap();
        ex.task = TaskKind::Del;
        assert!(validate_example(&m, &ex).is_err());
        let mut ex = encode_trn(&m, "The cat", "fr", None).unwrap();
        ex.source_ids.insert(0, m.lang_tag("en").unwrap());
        assert!(validate_example(&m, &ex).is_err());
    }

    #[test]
    fn triplet_encoding_and_jsonl() {
        let m = bpe();
        let ts = vec![
            Triplet {
                task: TaskKind::Ins,
                x_prime: "The white cat".into(),
                y: Some("Le chat".into()),
                y_prime: "Le chat blanc".into(),
                src_lang: "en".into(),
                tgt_lang: "fr".into(),
                gap: None,
            },
            Triplet {
                task: TaskKind::Bti,
                x_prime: "The white cat".into(),
                y: None,
                y_prime: "Le chat blanc".into(),
                src_lang: "en".into(),
                tgt_lang: "fr".into(),
                gap: Some([1, 2]),
            },
        ];
        let bti = ts[1].encode(&m).unwrap();
        assert_eq!(m.decode(&bti.source_ids).unwrap(), "The white cat <fr> Le <gap> blanc");
        assert_eq!(m.decode(&bti.target_ids).unwrap(), "chat");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_jsonl(&path, &ts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"task":"INS","x_prime":"The white cat","y":"Le chat""#));
        assert_eq!(read_jsonl(&path).unwrap(), ts);

        let mut bad = ts[0].clone();
        bad.y = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_update("The cat", "The white cat"), Some(TaskKind::Ins));
        assert_eq!(classify_update("The cat is white", "The white cat"), Some(TaskKind::Sub));
        assert_eq!(classify_update("", "The cat"), Some(TaskKind::Trn));
        assert_eq!(classify_update("The cat", "The cat"), None);
        assert_eq!(classify_update("The cat is white", "The cat white"), Some(TaskKind::Del));
        assert_eq!(classify_update("The black cat", "The white cat"), Some(TaskKind::Sub));
    }

    #[test]
    fn task_names_parse() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert!("XYZ".parse::<TaskKind>().is_err());
    }

    proptest! {
        #[test]
        fn pure_edits_are_dual(
            base in proptest::collection::vec("[a-d]", 1..8),
            extra in proptest::collection::vec("[e-h]", 1..4),
            pos in 0usize..8,
        ) {
            let pos = pos.min(base.len());
            let mut longer = base.clone();
            for (k, w) in extra.iter().enumerate() {
                longer.insert(pos + k, w.clone());
            }
            let (a, b) = (base.join(" "), longer.join(" "));
            prop_assert_eq!(classify_update(&a, &b), Some(TaskKind::Ins));
            prop_assert_eq!(classify_update(&b, &a), Some(TaskKind::Del));
            prop_assert_eq!(classify_update(&a, &a), None);
        }

        #[test]
        fn encoding_is_injective(
            x in "[a-c]{1,4}( [a-c]{1,4}){0,2}",
            y1 in "[a-c]{1,4}( [a-c]{1,4}){0,2}",
            y2 in "[a-c]{1,4}( [a-c]{1,4}){0,2}",
        ) {
            let m = learn_bpe(["abc cab bca"], 4, &["en", "fr"]).unwrap();
            let a = encode_update(&m, &x, &y1, TaskKind::Ins, "fr", None).unwrap();
            let b = encode_update(&m, &x, &y2, TaskKind::Ins, "fr", None).unwrap();
            let c = encode_update(&m, &x, &y1, TaskKind::Sub, "fr", None).unwrap();
            prop_assert_eq!(a.source_ids == b.source_ids, y1 == y2);
            prop_assert_ne!(a.source_ids, c.source_ids);
        }
    }
}
