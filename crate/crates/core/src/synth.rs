//! Synthetic datasets with known answers, paired with the mock rule tables
//! that make them solvable. Used by tests and by the `synth` CLI command.

use std::collections::BTreeMap;

use crate::backend::MockRules;
use crate::eval::{
    CatalogItem, Dataset, DialogueTurn, QaCategory, QaExample, RecRecord, SessionRecord, TurnRecord,
};

pub struct Fixture {
    pub dataset: Dataset,
    pub rules: MockRules,
}

const SPEAKERS: [&str; 2] = ["Ana", "Bob"];
const ANSWERABLE: [QaCategory; 4] = [
    QaCategory::SingleHop,
    QaCategory::MultiHop,
    QaCategory::Temporal,
    QaCategory::OpenDomain,
];

/// `turns` dialogue turns in sessions of ten. Turn `i` mentions keyword
/// `kwNN`, which the rule table maps to the attribute `topicNN`; question
/// `i` asks about the same keyword, so question attributes and turns are in
/// one-to-one correspondence.
pub fn qa_bijective(turns: usize) -> Fixture {
    let mut rules = MockRules::empty();
    let mut sessions: Vec<SessionRecord> = Vec::new();
    let mut qa = Vec::new();
    for i in 0..turns {
        let s = i / 10;
        if sessions.len() == s {
            sessions.push(SessionRecord {
                id: format!("S{}", s + 1),
                date: Some(format!("2023-05-{:02}", s + 1)),
                turns: Vec::new(),
                events: BTreeMap::new(),
            });
        }
        let kw = format!("kw{i:02}");
        rules.add(&kw, &format!("topic{i:02}"), &kw);
        let id = format!("D{}:{}", s + 1, i % 10 + 1);
        sessions[s].turns.push(TurnRecord {
            id: id.clone(),
            speaker: SPEAKERS[i % 2].to_string(),
            text: format!("yesterday we spent hours on {kw} together"),
        });
        qa.push(QaExample {
            question: format!("tell me about {kw}"),
            category: ANSWERABLE[i % ANSWERABLE.len()],
            gold_turn_ids: vec![id],
            answer: kw,
        });
    }
    Fixture {
        dataset: Dataset {
            sessions,
            qa,
            ..Dataset::default()
        },
        rules,
    }
}

const GENRES: [&str; 5] = ["crime", "comedy", "horror", "romance", "western"];
const MOODS: [&str; 6] = ["dark", "upbeat", "tense", "cozy", "gloomy", "quirky"];

/// Largest catalog [`rec_planted`] can build with distinct attribute sets.
pub const REC_MAX_ITEMS: usize = GENRES.len() * MOODS.len();

/// A catalog of `items` films, each with a distinct (genre, mood) pair in
/// its description, and one dialogue per film whose masked remainder asks
/// for exactly that genre and mood. The film's title is the label.
pub fn rec_planted(items: usize) -> Fixture {
    assert!(items <= REC_MAX_ITEMS, "at most {REC_MAX_ITEMS} items");
    let mut rules = MockRules::empty();
    for g in GENRES {
        rules.add(g, "genre", g);
    }
    for m in MOODS {
        rules.add(m, "mood", m);
    }
    let mut catalog = Vec::new();
    let mut dialogues = Vec::new();
    for j in 0..items {
        let (g, m) = (GENRES[j % GENRES.len()], MOODS[j % MOODS.len()]);
        let title = format!("Film {j:02}");
        catalog.push(CatalogItem {
            id: format!("M{j:02}"),
            title: title.clone(),
            description: Some(format!("a {g} film with a {m} mood")),
        });
        dialogues.push(RecRecord {
            id: format!("R{j:02}"),
            turns: vec![
                DialogueTurn::new("user", "hi there, looking for something to watch tonight"),
                DialogueTurn::new("assistant", "sure, what are you in the mood for?"),
                DialogueTurn::new("user", format!("a {g} film that feels {m} please")),
                DialogueTurn::new("assistant", format!("you could try {title}")),
                DialogueTurn::new("user", format!("{title} sounds good, thanks")),
                DialogueTurn::new("assistant", "enjoy the film"),
            ],
            labels: vec![title],
        });
    }
    Fixture {
        dataset: Dataset {
            items: catalog,
            dialogues,
            ..Dataset::default()
        },
        rules,
    }
}

/// Three sessions for event summarization: two mention life events and
/// activities across several turns, one only mentions feelings.
pub fn event_sessions() -> Fixture {
    let session = |id: &str, date: &str, lines: &[(&str, &str)], events: &[(&str, &str)]| {
        let mut ev: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (s, e) in events {
            ev.entry(s.to_string()).or_default().push(e.to_string());
        }
        SessionRecord {
            id: id.to_string(),
            date: Some(date.to_string()),
            turns: lines
                .iter()
                .enumerate()
                .map(|(i, (speaker, text))| TurnRecord {
                    id: format!("{id}:{}", i + 1),
                    speaker: speaker.to_string(),
                    text: text.to_string(),
                })
                .collect(),
            events: ev,
        }
    };
    let sessions = vec![
        session(
            "E1",
            "2023-06-01",
            &[
                ("Ana", "guess what, I graduated last week"),
                (
                    "Bob",
                    "congratulations! we went hiking to celebrate my promotion",
                ),
                ("Ana", "hiking sounds fun, I started painting again too"),
                ("Bob", "I am excited for the marathon next month"),
            ],
            &[
                ("Ana", "graduated"),
                ("Ana", "took up painting"),
                ("Bob", "got promoted"),
                ("Bob", "training for a marathon"),
            ],
        ),
        session(
            "E2",
            "2023-06-08",
            &[
                ("Ana", "we moved to a new flat"),
                ("Bob", "nice, my sister got married on Saturday"),
                ("Ana", "was the wedding big?"),
            ],
            &[("Ana", "moved house"), ("Bob", "sister's wedding")],
        ),
        session(
            "E3",
            "2023-06-15",
            &[
                ("Ana", "I feel nervous today"),
                ("Bob", "I am proud of you anyway"),
            ],
            &[],
        ),
    ];
    let mut rules = MockRules::builtin();
    rules.add("celebrate", "event", "celebration");
    Fixture {
        dataset: Dataset {
            sessions,
            ..Dataset::default()
        },
        rules,
    }
}
