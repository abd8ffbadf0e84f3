//! Synthetic labeled corpus: label-1 sentences carry a planted offence
//! phrase, label-0 sentences never do. Both classes share the same filler
//! characters and everyday civil-dispute phrases.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::{write_dataset, Dataset, Example};

pub const MIN_EXAMPLES: usize = 10;

/// Phrases planted only in label-1 sentences.
pub const OFFENCE_MARKERS: &[&str] = &["诈骗", "盗窃", "贩毒", "抢劫", "赌博", "走私", "行贿", "敲诈", "勒索", "伪造"];

/// Phrases that may appear in either class.
pub const CIVIL_PHRASES: &[&str] = &["合同", "签订", "支付", "租赁", "协商", "调解", "履行", "借款", "归还", "登记"];

const SUBJECTS: &[&str] = &["某某", "被告人", "原告", "当事人", "张某", "李某", "王某"];

const FILLER: &str = "的一是在了有人这中大为上个国我以要他时来用们生到作地于出就分对成会可主发年动同工也能下过子说产种面而方后多定学所民得经十三之进着等部度家电力里如水化高自二理起小物现实加量都两体制机当使点从业本去把性好应开它还因由其些然前外天政四日那社义事平形相全表间样与关各重新线内数正心反你明看原又么利比或但质气第向道命此变条只没结解问意建月公无系军很情者最立代想已通并提直题党程展五果料象员革位入常文总次品式活设及管特件长求老头基资边流路级少图山统接知较将组见计别她手角期根论运农指几九区强放决西被干做必战先回则任取据处队南给色光门即保治北造百规热领七海口东导器压志世金增争济阶油思术极交受联什认六共权收证改清己美再采转更单风切打白教速花带安场身车例真务具万每目至达走积示议声报斗完类八离华名确才科张信马节话米整空元况今集温传土许步群广石记需段研界拉林律叫且究观越织装影算低持音众书布复容儿须际商非验连断深难近矿千周委素技备半办青省列习响约般史感劳便团往酸历市克何除消构府称太准精值号率族维划选标写存候毛亲快效斯院查江型眼王按格养易置派层片始却专状育厂京识适属圆包火住调满县局照参红细引听该铁价严";

fn filler_chars() -> Vec<char> {
    let reserved: Vec<char> =
        OFFENCE_MARKERS.iter().chain(CIVIL_PHRASES).chain(SUBJECTS).flat_map(|s| s.chars()).collect();
    FILLER.chars().filter(|c| !reserved.contains(c)).collect()
}

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn sentence(label: usize, filler: &[char], rng: &mut Rng) -> String {
    let mut parts: Vec<String> = Vec::new();
    let chunks = 2 + rng.below(3);
    for _ in 0..chunks {
        let n = 2 + rng.below(4);
        parts.push((0..n).map(|_| filler[rng.below(filler.len())]).collect());
    }
    let mut planted = Vec::new();
    if label == 1 {
        planted.push(pick(rng, OFFENCE_MARKERS));
    }
    if label == 0 || rng.uniform() < 0.3 {
        planted.push(pick(rng, CIVIL_PHRASES));
    }
    for p in planted {
        let at = rng.below(parts.len() + 1);
        parts.insert(at, p.to_string());
    }
    format!("{}{}", pick(rng, SUBJECTS), parts.concat())
}

/// `n` examples, ⌈n/2⌉ of label 1, in seeded random order.
pub fn generate(n: usize, seed: u64) -> Result<Dataset> {
    if n < MIN_EXAMPLES {
        return Err(Error::Size(format!("gen-synth needs at least {MIN_EXAMPLES} examples, got {n}")));
    }
    let filler = filler_chars();
    let mut rng = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n.div_ceil(2))).collect();
    rng.shuffle(&mut labels);
    let examples =
        labels.into_iter().map(|label| Example { label, text: sentence(label, &filler, &mut rng) }).collect();
    Ok(Dataset::new(examples))
}

pub fn gen_synth(n: usize, seed: u64, out: impl AsRef<Path>) -> Result<Dataset> {
    let ds = generate(n, seed)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}
