use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pools::*;
use super::{Attribute, DataError, QaExample, ScopedDataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkParams {
    pub seed: u64,
    pub n_instances: usize,
    pub questions_per_attribute: usize,
    /// Fictitious towns in the out-of-distribution corpus (three facts each).
    #[serde(default = "default_ood")]
    pub n_ood_entities: usize,
    /// Fictitious creatures in the general corpus (two facts each).
    #[serde(default = "default_general")]
    pub n_general_entities: usize,
}

fn default_ood() -> usize {
    30
}

fn default_general() -> usize {
    50
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_instances: 60,
            questions_per_attribute: 3,
            n_ood_entities: default_ood(),
            n_general_entities: default_general(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub instance_id: u32,
    pub first: String,
    pub last: String,
    pub genre: String,
    pub born: u32,
    pub award: String,
    pub father: String,
    pub mother: String,
    pub email: String,
    pub address: String,
}

impl AuthorProfile {
    pub fn name(&self) -> String {
        format!("{} {}", self.first, self.last)
    }

    pub fn answer(&self, attribute: Attribute) -> String {
        match attribute {
            Attribute::Name => self.name(),
            Attribute::Genre => self.genre.clone(),
            Attribute::Born => self.born.to_string(),
            Attribute::Awards => self.award.clone(),
            Attribute::Parents => format!("{} and {}", self.father, self.mother),
            Attribute::Email => self.email.clone(),
            Attribute::Address => self.address.clone(),
            _ => unreachable!("not a profile attribute"),
        }
    }

    pub fn question(&self, attribute: Attribute, phrasing: usize) -> String {
        let n = self.name();
        let (g, y) = (&self.genre, self.born);
        match (attribute, phrasing) {
            (Attribute::Name, 0) => format!("who is the {g} author born in {y} ?"),
            (Attribute::Name, 1) => format!("which {g} writer was born in {y} ?"),
            (Attribute::Name, 2) => format!("name the {g} author whose birth year is {y} ."),
            (Attribute::Name, 3) => format!("what is the full name of the {g} author born in {y} ?"),
            (Attribute::Name, _) => format!("tell me the name of the {g} novelist born in {y} ."),
            (Attribute::Genre, 0) => format!("what genre does {n} write ?"),
            (Attribute::Genre, 1) => format!("in which genre does {n} work ?"),
            (Attribute::Genre, 2) => format!("what kind of books does {n} write ?"),
            (Attribute::Genre, 3) => format!("{n} is known for which genre ?"),
            (Attribute::Genre, _) => format!("what is the literary genre of {n} ?"),
            (Attribute::Born, 0) => format!("in what year was {n} born ?"),
            (Attribute::Born, 1) => format!("when was {n} born ?"),
            (Attribute::Born, 2) => format!("what is the birth year of {n} ?"),
            (Attribute::Born, 3) => format!("which year is {n} 's birth year ?"),
            (Attribute::Born, _) => format!("{n} was born in which year ?"),
            (Attribute::Awards, 0) => format!("what award has {n} received ?"),
            (Attribute::Awards, 1) => format!("which prize did {n} win ?"),
            (Attribute::Awards, 2) => format!("what honor was given to {n} ?"),
            (Attribute::Awards, 3) => format!("name an award won by {n} ."),
            (Attribute::Awards, _) => format!("{n} is a recipient of which award ?"),
            (Attribute::Parents, 0) => format!("who are the parents of {n} ?"),
            (Attribute::Parents, 1) => format!("what are the names of {n} 's parents ?"),
            (Attribute::Parents, 2) => format!("who are {n} 's mother and father ?"),
            (Attribute::Parents, 3) => format!("name the parents of {n} ."),
            (Attribute::Parents, _) => format!("{n} was raised by which parents ?"),
            (Attribute::Email, 0) => format!("what is the email address of {n} ?"),
            (Attribute::Email, 1) => format!("how can i email {n} ?"),
            (Attribute::Email, 2) => format!("what is {n} 's email ?"),
            (Attribute::Email, 3) => format!("give the contact email of {n} ."),
            (Attribute::Email, _) => format!("which email address belongs to {n} ?"),
            (Attribute::Address, 0) => format!("where does {n} live ?"),
            (Attribute::Address, 1) => format!("what is the home address of {n} ?"),
            (Attribute::Address, 2) => format!("what is {n} 's street address ?"),
            (Attribute::Address, 3) => format!("give the residential address of {n} ."),
            (Attribute::Address, _) => format!("at which address does {n} reside ?"),
            _ => unreachable!("not a profile attribute"),
        }
    }
}

pub(crate) const PHRASINGS: usize = 5;

fn check_pool(what: &'static str, required: usize, available: usize) -> Result<(), DataError> {
    if required > available {
        return Err(DataError::PoolExhausted {
            what,
            required,
            available,
        });
    }
    Ok(())
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("nonempty pool")
}

/// Deterministic fictitious author profiles with unique names and unique
/// (genre, birth year) pairs.
pub fn generate_profiles(seed: u64, n: usize) -> Result<Vec<AuthorProfile>, DataError> {
    let n_years = BIRTH_YEARS.len();
    check_pool("author names", n, FIRST_NAMES.len() * LAST_NAMES.len())?;
    check_pool("genre/year pairs", n, GENRES.len() * n_years)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = sample(&mut rng, FIRST_NAMES.len() * LAST_NAMES.len(), n);
    let keys = sample(&mut rng, GENRES.len() * n_years, n);
    let mut out = Vec::with_capacity(n);
    for (i, (name, key)) in names.iter().zip(keys.iter()).enumerate() {
        let first = FIRST_NAMES[name / LAST_NAMES.len()];
        let last = LAST_NAMES[name % LAST_NAMES.len()];
        let genre = GENRES[key / n_years];
        let born = BIRTH_YEARS.start + (key % n_years) as u32;
        let award = format!(
            "the {} {} prize",
            pick(&mut rng, AWARD_ADJ),
            pick(&mut rng, AWARD_NOUN)
        );
        let father = format!("{} {last}", pick(&mut rng, FIRST_NAMES));
        let mother = format!("{} {}", pick(&mut rng, FIRST_NAMES), pick(&mut rng, LAST_NAMES));
        let email = format!(
            "{} {} @ {} . com",
            pick(&mut rng, HANDLES),
            rng.random_range(SMALL_NUMBERS),
            pick(&mut rng, DOMAINS)
        );
        let address = format!(
            "{} {} street , {}",
            rng.random_range(SMALL_NUMBERS),
            pick(&mut rng, STREETS),
            pick(&mut rng, CITIES)
        );
        out.push(AuthorProfile {
            instance_id: i as u32,
            first: first.into(),
            last: last.into(),
            genre: genre.into(),
            born,
            award,
            father,
            mother,
            email,
            address,
        });
    }
    Ok(out)
}

fn attribute_slug(a: Attribute) -> String {
    format!("{a:?}").to_lowercase()
}

pub(crate) fn ood_split(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<QaExample>, DataError> {
    check_pool("towns", n, TOWN_HEADS.len() * TOWN_TAILS.len())?;
    let towns = sample(rng, TOWN_HEADS.len() * TOWN_TAILS.len(), n);
    let mut out = Vec::with_capacity(3 * n);
    for (i, t) in towns.iter().enumerate() {
        let town = format!(
            "{}{}",
            TOWN_HEADS[t / TOWN_TAILS.len()],
            TOWN_TAILS[t % TOWN_TAILS.len()]
        );
        let facts = [
            (
                format!("which river flows through {town} ?"),
                format!("the {} river", pick(rng, RIVERS)),
            ),
            (format!("what does {town} export ?"), pick(rng, EXPORTS).to_string()),
            (
                format!("which mountain overlooks {town} ?"),
                format!("mount {}", pick(rng, MOUNTAINS)),
            ),
        ];
        for (k, (q, a)) in facts.into_iter().enumerate() {
            out.push(QaExample::new(format!("ood-{town}-{k}"), i as u32, Attribute::Fact, q, a));
        }
    }
    Ok(out)
}

pub(crate) fn general_split(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<QaExample>, DataError> {
    check_pool("creatures", n, CREATURE_HEADS.len() * CREATURE_TAILS.len())?;
    let creatures = sample(rng, CREATURE_HEADS.len() * CREATURE_TAILS.len(), n);
    let mut out = Vec::with_capacity(2 * n);
    for (i, c) in creatures.iter().enumerate() {
        let name = format!(
            "{}{}",
            CREATURE_HEADS[c / CREATURE_TAILS.len()],
            CREATURE_TAILS[c % CREATURE_TAILS.len()]
        );
        let facts = [
            (format!("what color is the {name} ?"), pick(rng, COLORS)),
            (format!("what does the {name} eat ?"), pick(rng, FOODS)),
        ];
        for (k, (q, a)) in facts.into_iter().enumerate() {
            out.push(QaExample::new(
                format!("gen-{name}-{k}"),
                i as u32,
                Attribute::Fact,
                q,
                a.to_string(),
            ));
        }
    }
    Ok(out)
}

/// Generates the scoped author benchmark plus its auxiliary corpora.
///
/// Each instance contributes `questions_per_attribute` phrasings of every
/// attribute, so the unlearn split has `3 * q * n` examples and the
/// retention split `4 * q * n`.
pub fn generate_benchmark(params: &BenchmarkParams) -> Result<ScopedDataset, DataError> {
    if params.n_instances == 0 {
        return Err(DataError::InvalidParams("n_instances must be at least 1".into()));
    }
    if params.questions_per_attribute == 0 {
        return Err(DataError::InvalidParams(
            "questions_per_attribute must be at least 1".into(),
        ));
    }
    check_pool("question phrasings", params.questions_per_attribute, PHRASINGS)?;
    let profiles = generate_profiles(params.seed, params.n_instances)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(1);
    let (mut unlearn, mut retention) = (Vec::new(), Vec::new());
    for p in &profiles {
        for a in Attribute::PRIVACY {
            let phrasings = sample(&mut rng, PHRASINGS, params.questions_per_attribute);
            for k in phrasings.iter() {
                let e = QaExample::new(
                    format!("p{:03}-{}-{k}", p.instance_id, attribute_slug(a)),
                    p.instance_id,
                    a,
                    p.question(a, k),
                    p.answer(a),
                );
                match a.scope() {
                    super::Scope::Unlearn => unlearn.push(e),
                    super::Scope::Retention => retention.push(e),
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
