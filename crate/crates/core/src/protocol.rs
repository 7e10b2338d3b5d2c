//! Evaluation protocols: filtered, subject-disjoint train/valid/test
//! splits over a clip catalog.
//!
//! Four protocol families, eleven sub-protocols in total, each defined
//! by per-split filters on ethnicity, modality, attack instrument (PAI),
//! and an inclusive subject range. Bona fide clips always pass the PAI
//! filter; the PAI list constrains attacks only. 3D attack clips
//! (mask3d, silica) are an optional extra test-only subset: they join
//! test manifests subject to the modality filter alone.
//!
//! Families: 1 trains on one ethnicity and tests on the other two;
//! 2 trains on one 2D PAI and tests on the other; 3 trains on one
//! modality and tests on the other two; 4 fixes one modality per
//! sub-protocol and crosses ethnicity and PAI simultaneously.

use crate::metrics::PadLabel;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ethnicity {
    Africa,
    CentralAsia,
    EastAsia,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 3] = [Ethnicity::Africa, Ethnicity::CentralAsia, Ethnicity::EastAsia];

    pub fn code(self) -> &'static str {
        match self {
            Ethnicity::Africa => "A",
            Ethnicity::CentralAsia => "C",
            Ethnicity::EastAsia => "E",
        }
    }

    pub fn from_code(s: &str) -> Option<Ethnicity> {
        match s {
            "A" => Some(Ethnicity::Africa),
            "C" => Some(Ethnicity::CentralAsia),
            "E" => Some(Ethnicity::EastAsia),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Color,
    Depth,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Color, Modality::Depth, Modality::Ir];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Color => "color",
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }

    pub fn from_name(s: &str) -> Option<Modality> {
        match s {
            "color" => Some(Modality::Color),
            "depth" => Some(Modality::Depth),
            "ir" => Some(Modality::Ir),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pai {
    Real,
    Print,
    Replay,
    Mask3d,
    Silica,
}

impl Pai {
    pub fn name(self) -> &'static str {
        match self {
            Pai::Real => "real",
            Pai::Print => "print",
            Pai::Replay => "replay",
            Pai::Mask3d => "mask3d",
            Pai::Silica => "silica",
        }
    }

    pub fn from_name(s: &str) -> Option<Pai> {
        match s {
            "real" => Some(Pai::Real),
            "print" => Some(Pai::Print),
            "replay" => Some(Pai::Replay),
            "mask3d" => Some(Pai::Mask3d),
            "silica" => Some(Pai::Silica),
            _ => None,
        }
    }

    pub fn is_attack(self) -> bool {
        self != Pai::Real
    }

    pub fn is_3d(self) -> bool {
        matches!(self, Pai::Mask3d | Pai::Silica)
    }

    pub fn label(self) -> PadLabel {
        if self.is_attack() {
            PadLabel::Attack
        } else {
            PadLabel::BonaFide
        }
    }
}

/// One clip of the catalog. `subject` is 1-based within its ethnicity
/// for 2D data; 3D attack subjects use ids above the 2D range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub rel_path: String,
    pub ethnicity: Ethnicity,
    pub subject: u32,
    pub pai: Pai,
    pub sample_index: u32,
    pub modality: Modality,
    pub frame_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectRange {
    pub lo: u32,
    pub hi: u32,
}

impl SubjectRange {
    pub fn contains(&self, subject: u32) -> bool {
        (self.lo..=self.hi).contains(&subject)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitFilter {
    pub ethnicities: Vec<Ethnicity>,
    pub modalities: Vec<Modality>,
    /// Attack instruments admitted; bona fide clips always pass.
    pub attack_pais: Vec<Pai>,
    pub subjects: SubjectRange,
}

impl SplitFilter {
    /// Whether a clip belongs to this split. 3D attacks are test-only
    /// extras filtered by modality alone.
    pub fn admits(&self, r: &ClipRecord, split: Split, include_3d: bool) -> bool {
        if r.pai.is_3d() {
            return split == Split::Test && include_3d && self.modalities.contains(&r.modality);
        }
        self.ethnicities.contains(&r.ethnicity)
            && self.modalities.contains(&r.modality)
            && self.subjects.contains(r.subject)
            && (!r.pai.is_attack() || self.attack_pais.contains(&r.pai))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub protocol: u8,
    pub sub: u8,
    pub train: SplitFilter,
    pub valid: SplitFilter,
    pub test: SplitFilter,
}

impl ProtocolSpec {
    pub fn id(&self) -> String {
        format!("{}_{}", self.protocol, self.sub)
    }

    pub fn filter(&self, split: Split) -> &SplitFilter {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    TableRow { line: usize, detail: String },
    MissingSplit { id: String, split: Split },
    DuplicateRow { id: String, split: Split },
    UnknownProtocol(String),
    SubjectOverlap { ethnicity: Ethnicity, subject: u32 },
    Parse(String),
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolError::TableRow { line, detail } => {
                write!(f, "protocol table line {line}: {detail}")
            }
            ProtocolError::MissingSplit { id, split } => {
                write!(f, "protocol {id} lacks a {} row", split.name())
            }
            ProtocolError::DuplicateRow { id, split } => {
                write!(f, "protocol {id} has duplicate {} rows", split.name())
            }
            ProtocolError::UnknownProtocol(id) => write!(f, "unknown protocol {id:?}"),
            ProtocolError::SubjectOverlap { ethnicity, subject } => write!(
                f,
                "subject {}{subject} appears in more than one split",
                ethnicity.code()
            ),
            ProtocolError::Parse(line) => write!(f, "unparseable line {line:?}"),
        }
    }
}

impl core::error::Error for ProtocolError {}

/// Built-in protocol table. Columns: protocol, sub, split, ethnicities,
/// modalities, attack PAIs, inclusive subject range.
pub const BUILT_IN_TABLE: &str = "\
# protocol sub split ethnicities modalities attack_pais subjects
1 1 train A color,depth,ir print,replay 1-200
1 1 valid A color,depth,ir print,replay 201-300
1 1 test C,E color,depth,ir print,replay 301-500
1 2 train C color,depth,ir print,replay 1-200
1 2 valid C color,depth,ir print,replay 201-300
1 2 test A,E color,depth,ir print,replay 301-500
1 3 train E color,depth,ir print,replay 1-200
1 3 valid E color,depth,ir print,replay 201-300
1 3 test A,C color,depth,ir print,replay 301-500
2 1 train A,C,E color,depth,ir print 1-200
2 1 valid A,C,E color,depth,ir print 201-300
2 1 test A,C,E color,depth,ir replay 301-500
2 2 train A,C,E color,depth,ir replay 1-200
2 2 valid A,C,E color,depth,ir replay 201-300
2 2 test A,C,E color,depth,ir print 301-500
3 1 train A,C,E color print,replay 1-200
3 1 valid A,C,E color print,replay 201-300
3 1 test A,C,E depth,ir print,replay 301-500
3 2 train A,C,E depth print,replay 1-200
3 2 valid A,C,E depth print,replay 201-300
3 2 test A,C,E color,ir print,replay 301-500
3 3 train A,C,E ir print,replay 1-200
3 3 valid A,C,E ir print,replay 201-300
3 3 test A,C,E color,depth print,replay 301-500
4 1 train A color replay 1-200
4 1 valid A color replay 201-300
4 1 test C,E color print 301-500
4 2 train C depth replay 1-200
4 2 valid C depth replay 201-300
4 2 test A,E depth print 301-500
4 3 train E ir replay 1-200
4 3 valid E ir replay 201-300
4 3 test A,C ir print 301-500
";

/// Parses a protocol table in the [`BUILT_IN_TABLE`] format.
pub fn parse_protocol_table(text: &str) -> Result<Vec<ProtocolSpec>, ProtocolError> {
    struct Partial {
        protocol: u8,
        sub: u8,
        train: Option<SplitFilter>,
        valid: Option<SplitFilter>,
        test: Option<SplitFilter>,
    }
    let mut partials: Vec<Partial> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(ProtocolError::TableRow {
                line,
                detail: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let bad = |detail: String| ProtocolError::TableRow { line, detail };
        let protocol: u8 =
            fields[0].parse().map_err(|_| bad(format!("bad protocol {:?}", fields[0])))?;
        let sub: u8 = fields[1].parse().map_err(|_| bad(format!("bad sub {:?}", fields[1])))?;
        let split = Split::from_name(fields[2])
            .ok_or_else(|| bad(format!("bad split {:?}", fields[2])))?;
        let mut ethnicities = Vec::new();
        for tok in fields[3].split(',') {
            ethnicities.push(
                Ethnicity::from_code(tok).ok_or_else(|| bad(format!("bad ethnicity {tok:?}")))?,
            );
        }
        let mut modalities = Vec::new();
        for tok in fields[4].split(',') {
            modalities
                .push(Modality::from_name(tok).ok_or_else(|| bad(format!("bad modality {tok:?}")))?);
        }
        let mut attack_pais = Vec::new();
        for tok in fields[5].split(',') {
            let pai = Pai::from_name(tok).ok_or_else(|| bad(format!("bad pai {tok:?}")))?;
            if !pai.is_attack() || pai.is_3d() {
                return Err(bad(format!("pai column admits 2D attacks only, got {tok:?}")));
            }
            attack_pais.push(pai);
        }
        let (lo, hi) = fields[6]
            .split_once('-')
            .ok_or_else(|| bad(format!("bad subject range {:?}", fields[6])))?;
        let lo: u32 = lo.parse().map_err(|_| bad(format!("bad subject range {:?}", fields[6])))?;
        let hi: u32 = hi.parse().map_err(|_| bad(format!("bad subject range {:?}", fields[6])))?;
        if lo == 0 || hi < lo {
            return Err(bad(format!("bad subject range {lo}-{hi}")));
        }
        let filter = SplitFilter { ethnicities, modalities, attack_pais, subjects: SubjectRange { lo, hi } };

        let slot = match partials.iter_mut().find(|p| p.protocol == protocol && p.sub == sub) {
            Some(p) => p,
            None => {
                partials.push(Partial { protocol, sub, train: None, valid: None, test: None });
                partials.last_mut().expect("just pushed")
            }
        };
        let dest = match split {
            Split::Train => &mut slot.train,
            Split::Valid => &mut slot.valid,
            Split::Test => &mut slot.test,
        };
        if dest.is_some() {
            return Err(ProtocolError::DuplicateRow {
                id: format!("{protocol}_{sub}"),
                split,
            });
        }
        *dest = Some(filter);
    }
    let mut specs = Vec::new();
    for p in partials {
        let id = format!("{}_{}", p.protocol, p.sub);
        let missing = |split: Split| ProtocolError::MissingSplit { id: id.clone(), split };
        specs.push(ProtocolSpec {
            protocol: p.protocol,
            sub: p.sub,
            train: p.train.ok_or_else(|| missing(Split::Train))?,
            valid: p.valid.ok_or_else(|| missing(Split::Valid))?,
            test: p.test.ok_or_else(|| missing(Split::Test))?,
        });
    }
    Ok(specs)
}

pub fn builtin_protocols() -> Vec<ProtocolSpec> {
    parse_protocol_table(BUILT_IN_TABLE).expect("built-in protocol table is well formed")
}

/// Looks up `"<protocol>_<sub>"` in a spec list.
pub fn find_protocol<'a>(specs: &'a [ProtocolSpec], id: &str) -> Result<&'a ProtocolSpec, ProtocolError> {
    specs
        .iter()
        .find(|s| s.id() == id)
        .ok_or_else(|| ProtocolError::UnknownProtocol(id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub rel_path: String,
    pub label: PadLabel,
    pub ethnicity: Ethnicity,
    pub subject: u32,
    pub modality: Modality,
    pub pai: Pai,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub protocol_id: String,
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count_label(&self, label: PadLabel) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn count_pai(&self, pai: Pai) -> usize {
        self.rows.iter().filter(|r| r.pai == pai).count()
    }

    pub fn count_modality(&self, modality: Modality) -> usize {
        self.rows.iter().filter(|r| r.modality == modality).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitOptions {
    pub include_3d: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { include_3d: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub train: Manifest,
    pub valid: Manifest,
    pub test: Manifest,
}

/// Applies a protocol to a catalog. Rows are ordered by path; the three
/// splits are verified to be subject-disjoint over 2D data.
pub fn protocol_split(
    catalog: &[ClipRecord],
    spec: &ProtocolSpec,
    opts: &SplitOptions,
) -> Result<ProtocolSplit, ProtocolError> {
    let build = |split: Split| -> Manifest {
        let filter = spec.filter(split);
        let mut rows: Vec<ManifestRow> = catalog
            .iter()
            .filter(|r| filter.admits(r, split, opts.include_3d))
            .map(|r| ManifestRow {
                rel_path: r.rel_path.clone(),
                label: r.pai.label(),
                ethnicity: r.ethnicity,
                subject: r.subject,
                modality: r.modality,
                pai: r.pai,
            })
            .collect();
        rows.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
        Manifest { protocol_id: spec.id(), split, rows }
    };
    let split = ProtocolSplit {
        train: build(Split::Train),
        valid: build(Split::Valid),
        test: build(Split::Test),
    };
    let subjects = |m: &Manifest| -> BTreeSet<(Ethnicity, u32)> {
        m.rows
            .iter()
            .filter(|r| !r.pai.is_3d())
            .map(|r| (r.ethnicity, r.subject))
            .collect()
    };
    let (tr, va, te) = (subjects(&split.train), subjects(&split.valid), subjects(&split.test));
    for (a, b) in [(&tr, &va), (&tr, &te), (&va, &te)] {
        if let Some(&(ethnicity, subject)) = a.intersection(b).next() {
            return Err(ProtocolError::SubjectOverlap { ethnicity, subject });
        }
    }
    Ok(split)
}

/// Text form: a header comment with protocol and split, then one row
/// per clip: `path label ethnicity subject modality pai`.
pub fn render_manifest(manifest: &Manifest) -> String {
    let mut out = format!(
        "# protocol={} split={}\n",
        manifest.protocol_id,
        manifest.split.name()
    );
    for r in &manifest.rows {
        let label = match r.label {
            PadLabel::BonaFide => "bonafide",
            PadLabel::Attack => "attack",
        };
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            r.rel_path,
            label,
            r.ethnicity.code(),
            r.subject,
            r.modality.name(),
            r.pai.name()
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ProtocolError> {
    let mut protocol_id = String::new();
    let mut split = Split::Train;
    let mut rows = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for tok in rest.split_whitespace() {
                if let Some(v) = tok.strip_prefix("protocol=") {
                    protocol_id = v.to_string();
                } else if let Some(v) = tok.strip_prefix("split=") {
                    split = Split::from_name(v)
                        .ok_or_else(|| ProtocolError::Parse(line.to_string()))?;
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(ProtocolError::Parse(line.to_string()));
        }
        let label = match fields[1] {
            "bonafide" => PadLabel::BonaFide,
            "attack" => PadLabel::Attack,
            _ => return Err(ProtocolError::Parse(line.to_string())),
        };
        let ethnicity = Ethnicity::from_code(fields[2])
            .ok_or_else(|| ProtocolError::Parse(line.to_string()))?;
        let subject: u32 =
            fields[3].parse().map_err(|_| ProtocolError::Parse(line.to_string()))?;
        let modality = Modality::from_name(fields[4])
            .ok_or_else(|| ProtocolError::Parse(line.to_string()))?;
        let pai =
            Pai::from_name(fields[5]).ok_or_else(|| ProtocolError::Parse(line.to_string()))?;
        if pai.label() != label {
            return Err(ProtocolError::Parse(line.to_string()));
        }
        rows.push(ManifestRow { rel_path: fields[0].to_string(), label, ethnicity, subject, modality, pai });
    }
    if protocol_id.is_empty() {
        return Err(ProtocolError::Parse("missing protocol header".to_string()));
    }
    Ok(Manifest { protocol_id, split, rows })
}
