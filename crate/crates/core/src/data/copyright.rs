use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generator::{general_split, ood_split, BenchmarkParams};
use super::pools::*;
use super::{Attribute, DataError, QaExample, ScopedDataset, Scope};

const BOOK_PHRASINGS: usize = 3;

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("nonempty pool")
}

fn question(a: Attribute, t: &str, k: usize) -> String {
    match (a, k) {
        (Attribute::Revision, 0) => format!("rewrite the first line of {t} ."),
        (Attribute::Revision, 1) => format!("give a revised opening for {t} ."),
        (Attribute::Revision, _) => format!("how could the opening of {t} be rewritten ?"),
        (Attribute::Extension, 0) => format!("continue the story of {t} ."),
        (Attribute::Extension, 1) => format!("what happens after the ending of {t} ?"),
        (Attribute::Extension, _) => format!("write the next chapter of {t} ."),
        (Attribute::MetaInfo, 0) => format!("who wrote {t} ?"),
        (Attribute::MetaInfo, 1) => format!("who is the author of {t} ?"),
        (Attribute::MetaInfo, _) => format!("{t} was written by whom ?"),
        (Attribute::Review, 0) => format!("how would you describe {t} ?"),
        (Attribute::Review, 1) => format!("give a short review of {t} ."),
        (Attribute::Review, _) => format!("what is {t} like ?"),
        (Attribute::Recommendation, 0) => format!("what book is similar to {t} ?"),
        (Attribute::Recommendation, 1) => format!("recommend a book for readers of {t} ."),
        (Attribute::Recommendation, _) => format!("if i liked {t} what should i read next ?"),
        _ => unreachable!("not a book attribute"),
    }
}

/// Book-domain variant: derivative-work requests (revision, extension)
/// must be forgotten, fair-use information (authorship, review,
/// recommendation) must survive. Titles and texts are fictitious.
pub fn generate_copyright_benchmark(params: &BenchmarkParams) -> Result<ScopedDataset, DataError> {
    let n = params.n_instances;
    let q = params.questions_per_attribute;
    if n == 0 || q == 0 {
        return Err(DataError::InvalidParams(
            "n_instances and questions_per_attribute must be at least 1".into(),
        ));
    }
    let titles_available = BOOK_ADJ.len() * BOOK_NOUN.len();
    if n > titles_available {
        return Err(DataError::PoolExhausted {
            what: "book titles",
            required: n,
            available: titles_available,
        });
    }
    if q > BOOK_PHRASINGS {
        return Err(DataError::PoolExhausted {
            what: "question phrasings",
            required: q,
            available: BOOK_PHRASINGS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(3);
    let titles: Vec<String> = sample(&mut rng, titles_available, n)
        .iter()
        .map(|i| format!("the {} {}", BOOK_ADJ[i / BOOK_NOUN.len()], BOOK_NOUN[i % BOOK_NOUN.len()]))
        .collect();
    let (mut unlearn, mut retention) = (Vec::new(), Vec::new());
    for (i, title) in titles.iter().enumerate() {
        let answers = [
            (
                Attribute::Revision,
                format!("{} entered the {} at dawn", pick(&mut rng, CHARACTERS), pick(&mut rng, PLACES)),
            ),
            (
                Attribute::Extension,
                format!("{} {} the {}", pick(&mut rng, CHARACTERS), pick(&mut rng, VERBS), pick(&mut rng, OBJECTS)),
            ),
            (
                Attribute::MetaInfo,
                format!("{} {}", pick(&mut rng, FIRST_NAMES), pick(&mut rng, LAST_NAMES)),
            ),
            (
                Attribute::Review,
                format!("a {} story about {}", pick(&mut rng, TONES), pick(&mut rng, THEMES)),
            ),
            (Attribute::Recommendation, titles[(i + 1) % n].clone()),
        ];
        for (a, answer) in answers {
            for k in sample(&mut rng, BOOK_PHRASINGS, q).iter() {
                let e = QaExample::new(
                    format!("b{i:03}-{}-{k}", format!("{a:?}").to_lowercase()),
                    i as u32,
                    a,
                    question(a, title, k),
                    answer.clone(),
                );
                match a.scope() {
                    Scope::Unlearn => unlearn.push(e),
                    Scope::Retention => retention.push(e),
                }
            }
        }
    }
    let mut aux = ChaCha8Rng::seed_from_u64(params.seed);
    aux.set_stream(2);
    let ood = ood_split(&mut aux, params.n_ood_entities)?;
    let general = general_split(&mut aux, params.n_general_entities)?;
    Ok(ScopedDataset::from_splits(unlearn, retention, ood, general))
}
