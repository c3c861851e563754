//! Mandarin pinyin tokenizer and initial/final splitter.
//!
//! Tokens are separated by whitespace, ASCII/CJK punctuation and apostrophes.
//! A token may hold one syllable (`shu`, `shu1`, `shū`) or several written
//! together (`ni3hao3`, `nihao`); multi-syllable tokens are split at tone
//! digits first and then by longest-first segmentation over the syllable
//! inventory. Tones are recorded but play no part in cueing.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinyin initials with their IPA phoneme. `y` and `w` are kept as glide
/// initials so that every written syllable splits into initial + final.
pub const INITIALS: &[(&str, &str)] = &[
    ("zh", "tʂ"),
    ("ch", "tʂʰ"),
    ("sh", "ʂ"),
    ("b", "p"),
    ("p", "pʰ"),
    ("m", "m"),
    ("f", "f"),
    ("d", "t"),
    ("t", "tʰ"),
    ("n", "n"),
    ("l", "l"),
    ("g", "k"),
    ("k", "kʰ"),
    ("h", "x"),
    ("j", "tɕ"),
    ("q", "tɕʰ"),
    ("x", "ɕ"),
    ("r", "ʐ"),
    ("z", "ts"),
    ("c", "tsʰ"),
    ("s", "s"),
    ("y", "j"),
    ("w", "w"),
];

/// Canonical finals (written form after undoing spelling abbreviations) with
/// their IPA phoneme string.
pub const FINALS: &[(&str, &str)] = &[
    ("a", "a"),
    ("o", "o"),
    ("e", "ɤ"),
    ("ê", "ɛ"),
    ("ai", "ai"),
    ("ei", "ei"),
    ("ao", "au"),
    ("ou", "ou"),
    ("an", "an"),
    ("en", "ən"),
    ("ang", "aŋ"),
    ("eng", "əŋ"),
    ("ong", "ʊŋ"),
    ("er", "aɚ"),
    ("i", "i"),
    ("ia", "ia"),
    ("io", "io"),
    ("ie", "iɛ"),
    ("iao", "iau"),
    ("iou", "iou"),
    ("ian", "iɛn"),
    ("in", "in"),
    ("iang", "iaŋ"),
    ("ing", "iŋ"),
    ("iong", "iʊŋ"),
    ("u", "u"),
    ("ua", "ua"),
    ("uo", "uo"),
    ("uai", "uai"),
    ("uei", "uei"),
    ("uan", "uan"),
    ("uen", "uən"),
    ("uang", "uaŋ"),
    ("ueng", "uəŋ"),
    ("ü", "y"),
    ("üe", "yɛ"),
    ("üan", "yɛn"),
    ("ün", "yn"),
];

/// Toneless syllable inventory, ü written as `ü`.
const INVENTORY: &str = "\
a o e ê ai ei ao ou an en ang eng er \
ba bo bai bei bao ban ben bang beng bi bie biao bian bin bing bu \
pa po pai pei pao pou pan pen pang peng pi pie piao pian pin ping pu \
ma mo me mai mei mao mou man men mang meng mi mie miao miu mian min ming mu \
fa fo fei fou fan fen fang feng fu \
da de dai dei dao dou dan den dang deng dong di die diao diu dian ding du duo dui duan dun \
ta te tai tao tou tan tang teng tong ti tie tiao tian ting tu tuo tui tuan tun \
na ne nai nei nao nou nan nen nang neng nong ni nie niao niu nian nin niang ning nu nuo nuan nü nüe \
la le lai lei lao lou lan lang leng long li lia lie liao liu lian lin liang ling lu luo luan lun lü lüe \
ga ge gai gei gao gou gan gen gang geng gong gu gua guo guai gui guan gun guang \
ka ke kai kao kou kan ken kang keng kong ku kua kuo kuai kui kuan kun kuang \
ha he hai hei hao hou han hen hang heng hong hu hua huo huai hui huan hun huang \
ji jia jie jiao jiu jian jin jiang jing jiong ju jue juan jun \
qi qia qie qiao qiu qian qin qiang qing qiong qu que quan qun \
xi xia xie xiao xiu xian xin xiang xing xiong xu xue xuan xun \
zha zhe zhi zhai zhei zhao zhou zhan zhen zhang zheng zhong zhu zhua zhuo zhuai zhui zhuan zhun zhuang \
cha che chi chai chao chou chan chen chang cheng chong chu chua chuo chuai chui chuan chun chuang \
sha she shi shai shei shao shou shan shen shang sheng shu shua shuo shuai shui shuan shun shuang \
re ri rao rou ran ren rang reng rong ru rua ruo rui ruan run \
za ze zi zai zei zao zou zan zen zang zeng zong zu zuo zui zuan zun \
ca ce ci cai cao cou can cen cang ceng cong cu cuo cui cuan cun \
sa se si sai sao sou san sen sang seng song su suo sui suan sun \
ya yo ye yao you yan yang yi yin ying yong yu yue yuan yun \
wa wo wai wei wan wen wang weng wu";

/// Longest written syllable ("zhuang", "chuang", "shuang").
const MAX_SYLLABLE_CHARS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Syllable {
    /// The token as written in the input (tone marks included).
    pub raw: String,
    /// Tone 1..=5 when marked.
    pub tone: Option<u8>,
    /// IPA initial consonant; `None` for zero-initial syllables.
    pub initial: Option<String>,
    /// IPA final.
    pub final_: String,
    pub initial_spelling: String,
    pub final_spelling: String,
}

impl Syllable {
    /// Toneless written form: initial spelling followed by final spelling.
    pub fn spelling(&self) -> String {
        format!("{}{}", self.initial_spelling, self.final_spelling)
    }

    /// Written form with a trailing tone digit when a tone was present.
    pub fn to_pinyin(&self) -> String {
        match self.tone {
            Some(t) => format!("{}{}", self.spelling(), t),
            None => self.spelling(),
        }
    }
}

fn inventory() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| INVENTORY.split_whitespace().collect())
}

/// All toneless syllables the grammar accepts.
pub fn syllable_inventory() -> impl Iterator<Item = &'static str> {
    inventory().iter().copied()
}

fn final_ipa_map() -> &'static HashMap<&'static str, &'static str> {
    static MAP: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| FINALS.iter().copied().collect())
}

/// Undo pinyin spelling abbreviations (`ju` → ü, `ui` → uei, `yan` → ian...).
fn canonical_final(initial: &str, written: &str) -> String {
    let palatal = matches!(initial, "j" | "q" | "x" | "y");
    let mut f = written.to_string();
    if palatal && f.starts_with('u') {
        f = format!("ü{}", &f[1..]);
    }
    match initial {
        "y" => match f.as_str() {
            "i" | "in" | "ing" => f,
            s if s.starts_with('ü') => f,
            "ou" => "iou".into(),
            s => format!("i{s}"),
        },
        "w" => match f.as_str() {
            "u" => f,
            "ei" => "uei".into(),
            "en" => "uen".into(),
            s => format!("u{s}"),
        },
        _ => match f.as_str() {
            "iu" => "iou".into(),
            "ui" => "uei".into(),
            "un" if !palatal => "uen".into(),
            _ => f,
        },
    }
}

fn split_known(toneless: &str) -> Option<(&'static str, &'static str, String)> {
    let (init, ipa) = INITIALS
        .iter()
        .find(|(spell, _)| toneless.starts_with(spell) && toneless.len() > spell.len())
        .map(|(s, i)| (*s, *i))
        .unwrap_or(("", ""));
    let written = &toneless[init.len()..];
    Some((init, ipa, written.to_string()))
}

/// Splits a toneless syllable already known to be in the inventory.
fn decompose(raw: &str, toneless: &str, tone: Option<u8>) -> Syllable {
    let (init, init_ipa, written) = split_known(toneless).expect("inventory syllable");
    let canon = canonical_final(init, &written);
    let final_ipa = final_ipa_map()
        .get(canon.as_str())
        .copied()
        .unwrap_or_else(|| panic!("final `{canon}` missing from FINALS"));
    Syllable {
        raw: raw.to_string(),
        tone,
        initial: (!init.is_empty()).then(|| init_ipa.to_string()),
        final_: final_ipa.to_string(),
        initial_spelling: init.to_string(),
        final_spelling: written,
    }
}

/// Maps a tone-marked vowel to (plain vowel, tone).
fn strip_tone_mark(c: char) -> Option<(char, u8)> {
    let table: &[(char, char, u8)] = &[
        ('ā', 'a', 1),
        ('á', 'a', 2),
        ('ǎ', 'a', 3),
        ('à', 'a', 4),
        ('ē', 'e', 1),
        ('é', 'e', 2),
        ('ě', 'e', 3),
        ('è', 'e', 4),
        ('ī', 'i', 1),
        ('í', 'i', 2),
        ('ǐ', 'i', 3),
        ('ì', 'i', 4),
        ('ō', 'o', 1),
        ('ó', 'o', 2),
        ('ǒ', 'o', 3),
        ('ò', 'o', 4),
        ('ū', 'u', 1),
        ('ú', 'u', 2),
        ('ǔ', 'u', 3),
        ('ù', 'u', 4),
        ('ǖ', 'ü', 1),
        ('ǘ', 'ü', 2),
        ('ǚ', 'ü', 3),
        ('ǜ', 'ü', 4),
    ];
    table
        .iter()
        .find(|(m, _, _)| *m == c)
        .map(|(_, plain, tone)| (*plain, *tone))
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || (c.is_ascii_punctuation() && c != ':')
        || "，。！？、；：“”‘’（）《》【】…—·".contains(c)
}

/// A normalized piece of input: toneless spelling plus tone and source text.
struct Piece {
    raw: String,
    toneless: String,
    tone: Option<u8>,
}

/// Normalizes a token and splits it at tone digits.
fn normalize(token: &str) -> Option<Vec<Piece>> {
    let lower = token.to_lowercase().replace("u:", "ü").replace('v', "ü");
    let mut pieces = Vec::new();
    let mut cur_raw = String::new();
    let mut cur = String::new();
    let mut tone = None;
    for c in lower.chars() {
        if let Some(d) = c.to_digit(10) {
            if !(1..=5).contains(&d) || cur.is_empty() {
                return None;
            }
            cur_raw.push(c);
            pieces.push(Piece {
                raw: std::mem::take(&mut cur_raw),
                toneless: std::mem::take(&mut cur),
                tone: Some(d as u8),
            });
            tone = None;
            continue;
        }
        cur_raw.push(c);
        if let Some((plain, t)) = strip_tone_mark(c) {
            cur.push(plain);
            tone = Some(t);
        } else if c.is_alphabetic() {
            cur.push(c);
        } else {
            return None;
        }
    }
    if !cur.is_empty() {
        pieces.push(Piece {
            raw: cur_raw,
            toneless: cur,
            tone,
        });
    }
    Some(pieces)
}

/// Longest-first segmentation of a toneless run into inventory syllables.
fn segment(run: &str) -> Option<Vec<String>> {
    let chars: Vec<char> = run.chars().collect();
    let n = chars.len();
    // best[i] = syllable lengths covering chars[i..], preferring long first syllables
    let mut best: Vec<Option<Vec<usize>>> = vec![None; n + 1];
    best[n] = Some(Vec::new());
    for i in (0..n).rev() {
        for len in (1..=MAX_SYLLABLE_CHARS.min(n - i)).rev() {
            let cand: String = chars[i..i + len].iter().collect();
            if inventory().contains(cand.as_str()) {
                if let Some(rest) = &best[i + len] {
                    let mut v = vec![len];
                    v.extend(rest);
                    best[i] = Some(v);
                    break;
                }
            }
        }
    }
    let lens = best[0].take()?;
    let mut out = Vec::with_capacity(lens.len());
    let mut i = 0;
    for len in lens {
        out.push(chars[i..i + len].iter().collect());
        i += len;
    }
    Some(out)
}

/// Parses pinyin text into syllables, dropping punctuation and preserving order.
pub fn parse_pinyin(text: &str) -> Result<Vec<Syllable>> {
    let mut out = Vec::new();
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut start = None;
    let mut buf = String::new();
    for (pos, c) in text.chars().enumerate() {
        if is_separator(c) {
            if let Some(s) = start.take() {
                tokens.push((s, std::mem::take(&mut buf)));
            }
        } else {
            start.get_or_insert(pos);
            buf.push(c);
        }
    }
    if let Some(s) = start {
        tokens.push((s, buf));
    }

    for (position, token) in tokens {
        let unknown = || Error::UnknownToken {
            token: token.clone(),
            position,
        };
        let pieces = normalize(&token).ok_or_else(unknown)?;
        for piece in pieces {
            if inventory().contains(piece.toneless.as_str()) {
                out.push(decompose(&piece.raw, &piece.toneless, piece.tone));
                continue;
            }
            let parts = segment(&piece.toneless).ok_or_else(unknown)?;
            let last = parts.len() - 1;
            for (k, part) in parts.into_iter().enumerate() {
                // the tone digit of a run belongs to its last syllable
                let tone = if k == last { piece.tone } else { None };
                out.push(decompose(&part, &part, tone));
            }
        }
    }
    Ok(out)
}
