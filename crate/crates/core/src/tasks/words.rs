//! Fixed word inventory shared by the real-word copying task and the
//! synthetic text component of the training mixture.

pub const WORDS: &[&str] = &[
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life", "child", "world",
    "school", "state", "family", "student", "group", "country", "problem", "hand", "part",
    "place", "case", "week", "company", "system", "program", "question", "work", "night",
    "point", "home", "water", "room", "mother", "area", "money", "story", "fact", "month",
    "book", "eye", "job", "word", "business", "issue", "side", "kind", "head", "house",
    "service", "friend", "father", "power", "hour", "game", "line", "end", "member", "law",
    "car", "city", "name", "team", "minute", "idea", "body", "back", "parent", "face",
    "door", "result", "reason", "art", "moment", "teacher", "force", "education", "foot",
    "boy", "age", "policy", "process", "music", "market", "sense", "nation", "plan",
    "college", "interest", "death", "course", "someone", "experience", "effect", "use",
    "class", "control", "care", "field", "development", "role", "effort", "rate", "heart",
    "drug", "show", "leader", "light", "voice", "wife", "police", "mind", "price", "report",
    "decision", "son", "view", "relationship", "town", "road", "arm", "difference", "value",
    "building", "action", "model", "season", "society", "tax", "director", "position",
    "player", "record", "paper", "space", "ground", "form", "event", "official", "matter",
    "center", "couple", "site", "project", "activity", "star", "table", "need", "court",
    "american", "oil", "situation", "cost", "industry", "figure", "street", "image",
    "phone", "data", "picture", "practice", "piece", "land", "product", "doctor", "wall",
    "patient", "worker", "news", "test", "movie", "north", "love", "support", "technology",
    "step", "baby", "computer", "type", "attention", "film", "tree", "source", "level",
    "office", "brother", "race", "history", "girl", "glass", "answer", "garden", "bird",
    "stone", "river", "window", "summer", "winter", "morning", "evening", "mountain",
    "animal", "letter", "color", "horse", "bridge", "island", "forest", "valley", "cloud",
    "meadow", "storm", "ocean", "dream", "shadow", "silver", "gold", "iron", "marble",
];

pub const VERBS: &[&str] = &[
    "makes", "takes", "finds", "gives", "keeps", "holds", "brings", "follows", "shows",
    "moves", "plays", "runs", "opens", "builds", "carries", "watches", "reaches", "covers",
    "raises", "passes", "draws", "crosses", "fills", "joins", "turns",
];

pub const ADJECTIVES: &[&str] = &[
    "small", "large", "old", "young", "long", "short", "bright", "dark", "quiet", "loud",
    "warm", "cold", "early", "late", "simple", "common", "strong", "clear", "heavy", "gentle",
];
