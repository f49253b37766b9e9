//! Closed word pools for the synthetic generators.

pub const FIRST_NAMES: &[&str] = &[
    "alden", "brisa", "corwin", "dalia", "elric", "fenna", "garrick", "hesper", "ivo", "jessamy",
    "kellan", "liora", "marek", "nerys", "orrin", "perrin", "quilla", "rowan", "sabine", "tavish",
    "ulla", "vesper", "wendell", "xanthe", "yorick", "zinnia", "anselm", "bryony", "caspian",
    "delphine", "emrys", "fiora", "gideon", "halcyon", "isolde", "jareth", "kestrel", "lucan",
    "maren", "niamh", "osric", "pella", "rhiannon", "soren", "talia", "ulric", "verity", "wystan",
];

pub const LAST_NAMES: &[&str] = &[
    "ashgrove", "blackwood", "carraway", "dunmore", "everhart", "fairweather", "greywater",
    "hollins", "ironside", "jardine", "kingsley", "larkspur", "merriweather", "northcott",
    "oakhurst", "penhallow", "quenby", "ravenscroft", "stormont", "thistlewood", "underhill",
    "vance", "whitlock", "yardley", "ashdown", "brightwell", "coldridge", "draycott", "elmsworth",
    "foxley", "goldwyn", "hartigan", "inglewood", "kettering", "lockhart", "marchbanks",
    "nettleford", "osgood", "pembrook", "quarrington", "rutherford", "sallow", "tremaine",
    "wexford", "wolcott", "ainsley", "brackenbury", "crestwood",
];

pub const GENRES: &[&str] = &[
    "mystery", "romance", "fantasy", "horror", "poetry", "satire", "thriller", "western", "memoir",
    "tragedy", "comedy", "folklore",
];

pub const BIRTH_YEARS: std::ops::Range<u32> = 1900..2000;

pub const AWARD_ADJ: &[&str] = &["golden", "silver", "crimson", "ivory", "azure"];
pub const AWARD_NOUN: &[&str] = &["quill", "lantern", "laurel"];

pub const HANDLES: &[&str] = &[
    "inkwell", "parchment", "foxglove", "nightjar", "brambles", "tinder", "cinder", "meadow",
    "tumble", "pebble", "saffron", "juniper", "thimble", "marigold", "sparrow", "hickory",
    "clover", "nutmeg", "bracken", "wren", "mossy", "fable", "puddle", "sorrel",
];

pub const DOMAINS: &[&str] = &[
    "postmail", "letterbox", "inkmail", "quickpost", "mailnest", "owlpost", "papermail",
    "scrollbox",
];

pub const SMALL_NUMBERS: std::ops::Range<u32> = 10..100;

pub const STREETS: &[&str] = &[
    "alder", "bramble", "copper", "dove", "elm", "fern", "granite", "hazel", "ivy", "juniper",
    "kiln", "linden", "mill", "nettle", "orchard", "poplar", "quarry", "rose", "sycamore", "tanner",
];

pub const CITIES: &[&str] = &[
    "riverton", "ashford", "millbrook", "stonehaven", "greenfield", "lakeshore", "fairhaven",
    "oldcastle", "brightmoor", "westvale", "eastmere", "northgate", "southwick", "highbury",
    "lowfield", "redcliff",
];

pub const TOWN_HEADS: &[&str] = &["brask", "corv", "dunm", "felg", "garr", "halm"];
pub const TOWN_TAILS: &[&str] = &["ouch", "stead", "holme", "ness", "thorpe"];
pub const RIVERS: &[&str] = &[
    "amberflow", "blueglass", "coldrun", "deepmere", "eelwater", "frostbeck", "greenrush",
    "hushwater",
];
pub const EXPORTS: &[&str] = &[
    "wool", "salt", "timber", "cheese", "glassware", "pottery", "rope", "honey", "linen", "iron",
];
pub const MOUNTAINS: &[&str] = &[
    "karsk", "lumeth", "morvane", "nolbrin", "pyrrak", "quessel", "rundahl", "skelvor",
];

pub const CREATURE_HEADS: &[&str] = &[
    "glim", "thorn", "mist", "quor", "zel", "vorn", "pip", "skiv", "lumb", "drizz",
];
pub const CREATURE_TAILS: &[&str] = &["wing", "tail", "hopper", "fin", "claw"];
pub const COLORS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "white", "black", "grey", "brown",
];
pub const FOODS: &[&str] = &[
    "berries", "beetles", "seeds", "moss", "minnows", "nectar", "bark", "snails", "lichen",
    "acorns",
];

pub const BOOK_ADJ: &[&str] = &[
    "hollow", "silent", "winter", "broken", "gilded", "hidden", "burning", "distant",
];
pub const BOOK_NOUN: &[&str] = &[
    "orchard", "harbor", "crown", "lantern", "tide", "garden", "tower", "river", "mirror",
];
pub const CHARACTERS: &[&str] = &[
    "the miller", "the captain", "the widow", "the clerk", "the orphan", "the sailor",
];
pub const PLACES: &[&str] = &["tavern", "chapel", "market", "lighthouse", "cellar", "ballroom"];
pub const VERBS: &[&str] = &["burned", "buried", "stole", "found", "sold", "hid"];
pub const OBJECTS: &[&str] = &["letter", "ring", "map", "key", "portrait", "ledger"];
pub const TONES: &[&str] = &["haunting", "tender", "bleak", "playful", "sweeping"];
pub const THEMES: &[&str] = &["grief", "ambition", "exile", "friendship", "revenge", "memory"];
