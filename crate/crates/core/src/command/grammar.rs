//! Deterministic command grammar.
//!
//! ```text
//! command    := filler* action-phrase
//! action     := (turn|switch|power) (on|off) target
//!             | (turn|switch|power) target (on|off)
//!             | toggle target
//!             | (set|dim|brighten|adjust) target-with-"brightness" to N [%]
//! target     := [the] [cardinality] [superlative] noun [relative] post*
//! cardinality:= all | every | both | one..ten | digits
//! superlative:= leftmost | rightmost | topmost | bottommost | top | bottom | ...
//! post       := relation anchor | side-region ; joined by "and"
//! relation   := near | beside | by | next to | close to | on | above | over
//!             | below | under | left of | right of | to the left of | ...
//! side-region:= (on|to) (the|my) (left|right) [wall|side]
//! ```

use crate::model::{canonicalize_type, KNOWN_TYPES, SYNONYMS};
use crate::topology::Axis;

use super::{Action, Cardinality, CommandAst, CommandError, ProximityRelation, Qualifier, Side};

const ARTICLES: &[&str] = &["the", "a", "an"];

const FILLERS: &[&[&str]] = &[
    &["please"],
    &["kindly"],
    &["hey"],
    &["you", "need", "to"],
    &["you", "should"],
    &["can", "you"],
    &["could", "you"],
    &["would", "you"],
    &["i", "want", "to"],
    &["i", "need", "to"],
    &["go", "ahead", "and"],
];

const NUMBER_WORDS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Tokens that end a noun phrase or an anchor.
const STOP: &[&str] = &[
    "that", "which", "who", "and", "near", "beside", "by", "next", "close", "closest", "nearest", "on", "at",
    "above", "over", "below", "under", "beneath", "underneath", "left", "right", "to",
];

fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase().replace('\'', " ");
    let raw: Vec<&str> = lowered
        .split(|c: char| !(c.is_alphanumeric() || c == '%' || c == '_'))
        .filter(|t| !t.is_empty())
        .collect();
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        // "left-most" and friends arrive split in two.
        if i + 1 < raw.len() && raw[i + 1] == "most" && ["left", "right", "top", "bottom", "upper"].contains(&raw[i]) {
            out.push(format!("{}most", raw[i]));
            i += 2;
            continue;
        }
        // "50%" -> "50" "%"
        if let Some(num) = raw[i].strip_suffix('%') {
            if !num.is_empty() {
                out.push(num.to_string());
                out.push("%".to_string());
                i += 1;
                continue;
            }
        }
        out.push(raw[i].to_string());
        i += 1;
    }
    out
}

fn number(token: &str) -> Option<u32> {
    if !token.is_empty() && token.len() <= 6 && token.chars().all(|c| c.is_ascii_digit()) {
        return token.parse().ok();
    }
    NUMBER_WORDS.iter().position(|w| *w == token).map(|i| i as u32 + 1)
}

fn superlative_word(token: &str) -> Option<Axis> {
    Some(match token {
        "leftmost" | "far-left" => Axis::Leftmost,
        "rightmost" => Axis::Rightmost,
        "topmost" | "uppermost" | "highest" | "top" | "upper" => Axis::Topmost,
        "bottommost" | "lowest" | "bottom" | "lower" => Axis::Bottommost,
        _ => return None,
    })
}

fn starts_with(tokens: &[String], pattern: &[&str]) -> bool {
    tokens.len() >= pattern.len() && tokens.iter().zip(pattern).all(|(t, p)| t == p)
}

fn is_device_noun(token: &str) -> bool {
    canonicalize_type(token)
        .map(|c| KNOWN_TYPES.contains(&c.as_str()))
        .unwrap_or(false)
}

fn strip_fillers(mut tokens: &[String]) -> &[String] {
    loop {
        let before = tokens.len();
        for f in FILLERS {
            if starts_with(tokens, f) {
                tokens = &tokens[f.len()..];
            }
        }
        if tokens.last().map(|t| t == "please").unwrap_or(false) {
            tokens = &tokens[..tokens.len() - 1];
        }
        if tokens.len() == before {
            return tokens;
        }
    }
}

pub fn parse_spatial_command(text: &str) -> Result<CommandAst, CommandError> {
    let unparsable = || CommandError::UnparsableCommand(text.trim().to_string());
    let all = tokenize(text);
    let tokens = strip_fillers(&all);
    let Some(first) = tokens.first() else {
        return Err(unparsable());
    };

    let on_off = |t: &str| match t {
        "on" => Some(Action::SwitchOn),
        "off" => Some(Action::SwitchOff),
        _ => None,
    };

    let (action, rest): (Action, Vec<String>) = match first.as_str() {
        "turn" | "switch" | "power" => {
            if let Some(a) = tokens.get(1).and_then(|t| on_off(t)) {
                (a, tokens[2..].to_vec())
            } else if let Some(a) = tokens.last().and_then(|t| on_off(t)) {
                (a, tokens[1..tokens.len() - 1].to_vec())
            } else {
                return Err(CommandError::UnknownAction(first.clone()));
            }
        }
        "activate" | "enable" => (Action::SwitchOn, tokens[1..].to_vec()),
        "deactivate" | "disable" => (Action::SwitchOff, tokens[1..].to_vec()),
        "toggle" | "flip" => (Action::Toggle, tokens[1..].to_vec()),
        "set" | "dim" | "brighten" | "adjust" | "change" => brightness_phrase(&tokens[1..]).ok_or_else(unparsable)??,
        _ => {
            return Err(if tokens.iter().any(|t| is_device_noun(t)) {
                CommandError::UnknownAction(first.clone())
            } else {
                unparsable()
            })
        }
    };

    let (device_type, qualifiers) = parse_target(&rest).ok_or_else(unparsable)?;
    Ok(CommandAst {
        action,
        device_type,
        qualifiers,
    })
}

/// `<target> ... to N [%|percent]`, with "brightness" (and a following "of") removed.
fn brightness_phrase(tokens: &[String]) -> Option<Result<(Action, Vec<String>), CommandError>> {
    let mut end = tokens.len();
    while end > 0 && (tokens[end - 1] == "%" || tokens[end - 1] == "percent") {
        end -= 1;
    }
    if end < 2 || tokens[end - 2] != "to" {
        return None;
    }
    let level = number(&tokens[end - 1])?;
    if level > 100 {
        return Some(Err(CommandError::UnknownAction(format!("brightness {level}"))));
    }
    let mut target = Vec::new();
    let mut i = 0;
    while i < end - 2 {
        if tokens[i] == "brightness" {
            if tokens.get(i + 1).map(|t| t == "of" || t == "level").unwrap_or(false) {
                i += 1;
            }
        } else {
            target.push(tokens[i].clone());
        }
        i += 1;
    }
    Some(Ok((Action::AdjustBrightness(level as u8), target)))
}

fn skip_articles(tokens: &[String], mut i: usize) -> usize {
    while i < tokens.len() && ARTICLES.contains(&tokens[i].as_str()) {
        i += 1;
    }
    i
}

fn noun_type(words: &[String]) -> Option<(String, bool)> {
    let last = words.last()?;
    let phrase = words.join(" ");
    let whole = canonicalize_type(&phrase).ok()?;
    let kind = if KNOWN_TYPES.contains(&whole.as_str()) || SYNONYMS.iter().any(|(_, v)| *v == whole) {
        whole
    } else {
        canonicalize_type(last).ok()?
    };
    let plural = canonicalize_type(last).ok()? != *last && last.ends_with('s');
    Some((kind, plural))
}

fn parse_target(tokens: &[String]) -> Option<(String, Vec<Qualifier>)> {
    let mut quals = Vec::new();
    let mut i = skip_articles(tokens, 0);

    let mut cardinality = None;
    match tokens.get(i).map(String::as_str) {
        Some("all") | Some("every") => {
            cardinality = Some(Cardinality::All);
            i += 1;
        }
        Some("both") => {
            cardinality = Some(Cardinality::Count(2));
            i += 1;
        }
        Some(t) => {
            if let Some(n) = number(t).filter(|n| *n >= 1) {
                cardinality = Some(Cardinality::Count(n));
                i += 1;
            }
        }
        None => return None,
    }
    if cardinality.is_some() {
        if tokens.get(i).map(|t| t == "of").unwrap_or(false) {
            i += 1;
        }
        i = skip_articles(tokens, i);
    }

    let superlative = tokens.get(i).and_then(|t| superlative_word(t));
    if superlative.is_some() {
        i += 1;
    }

    let noun_start = i;
    while i < tokens.len() && !STOP.contains(&tokens[i].as_str()) {
        i += 1;
    }
    let (device_type, plural) = noun_type(&tokens[noun_start..i])?;

    match cardinality {
        Some(c) => quals.push(Qualifier::Cardinality(c)),
        None if plural => quals.push(Qualifier::Cardinality(Cardinality::All)),
        None => {}
    }
    if let Some(axis) = superlative {
        quals.push(Qualifier::Superlative(axis));
    }

    // Relative clause: "that is", "which are", "that s" (from "that's").
    if i < tokens.len() && ["that", "which", "who"].contains(&tokens[i].as_str()) {
        i += 1;
        while i < tokens.len() && ["is", "are", "s", "sits", "located", "placed"].contains(&tokens[i].as_str()) {
            i += 1;
        }
    }

    while i < tokens.len() {
        if ["and", "is", "are"].contains(&tokens[i].as_str()) {
            i += 1;
            continue;
        }
        let rest = &tokens[i..];
        if let Some((side, used)) = region(rest) {
            quals.push(Qualifier::Region(side));
            i += used;
            continue;
        }
        let (relation, used) = relation(rest)?;
        i += used;
        i = skip_articles(tokens, i);
        let anchor_start = i;
        while i < tokens.len() && !STOP.contains(&tokens[i].as_str()) {
            i += 1;
        }
        if anchor_start == i {
            return None;
        }
        let anchor = canonicalize_type(&tokens[anchor_start..i].join(" ")).ok()?;
        quals.push(Qualifier::Proximity { relation, anchor });
    }
    Some((device_type, quals))
}

fn region(tokens: &[String]) -> Option<(Side, usize)> {
    let first = tokens.first()?.as_str();
    if !["on", "to"].contains(&first) {
        return None;
    }
    let second = tokens.get(1)?.as_str();
    if !["the", "my", "your"].contains(&second) {
        return None;
    }
    let side = match tokens.get(2)?.as_str() {
        "left" => Side::Left,
        "right" => Side::Right,
        _ => return None,
    };
    let mut used = 3;
    match tokens.get(3).map(String::as_str) {
        Some("of") => return None,
        Some("wall") | Some("side") => used += 1,
        Some("hand") if tokens.get(4).map(|t| t == "side").unwrap_or(false) => used += 2,
        _ => {}
    }
    Some((side, used))
}

fn relation(tokens: &[String]) -> Option<(ProximityRelation, usize)> {
    use ProximityRelation::*;
    const PATTERNS: &[(&[&str], ProximityRelation)] = &[
        (&["to", "the", "left", "of"], LeftOf),
        (&["to", "the", "right", "of"], RightOf),
        (&["on", "the", "left", "of"], LeftOf),
        (&["on", "the", "right", "of"], RightOf),
        (&["left", "of"], LeftOf),
        (&["right", "of"], RightOf),
        (&["next", "to"], Near),
        (&["close", "to"], Near),
        (&["closest", "to"], Near),
        (&["nearest", "to"], Near),
        (&["near", "to"], Near),
        (&["near"], Near),
        (&["beside"], Near),
        (&["by"], Near),
        (&["closest"], Near),
        (&["nearest"], Near),
        (&["on"], Near),
        (&["at"], Near),
        (&["above"], Above),
        (&["over"], Above),
        (&["below"], Below),
        (&["under"], Below),
        (&["underneath"], Below),
        (&["beneath"], Below),
    ];
    PATTERNS
        .iter()
        .find(|(p, _)| starts_with(tokens, p))
        .map(|(p, r)| (*r, p.len()))
}

/// Renders an AST in the grammar's canonical surface form.
pub fn to_command_text(ast: &CommandAst) -> String {
    let mut target = String::new();
    match ast.cardinality() {
        None => target.push_str("the"),
        Some(Cardinality::All) => target.push_str("all the"),
        Some(Cardinality::Count(n)) => {
            target.push_str("the ");
            match NUMBER_WORDS.get(n as usize - 1).filter(|_| n >= 1) {
                Some(w) => target.push_str(w),
                None => target.push_str(&n.to_string()),
            }
        }
    }
    if let Some(axis) = ast.superlative() {
        target.push(' ');
        target.push_str(axis.word());
    }
    target.push(' ');
    target.push_str(&ast.device_type);

    let post: Vec<String> = ast
        .qualifiers
        .iter()
        .filter_map(|q| match q {
            Qualifier::Proximity { relation, anchor } => {
                let word = match relation {
                    ProximityRelation::Near => "near",
                    ProximityRelation::LeftOf => "left of",
                    ProximityRelation::RightOf => "right of",
                    ProximityRelation::Above => "above",
                    ProximityRelation::Below => "below",
                };
                Some(format!("{word} the {anchor}"))
            }
            Qualifier::Region(Side::Left) => Some("on the left".to_string()),
            Qualifier::Region(Side::Right) => Some("on the right".to_string()),
            _ => None,
        })
        .collect();
    if !post.is_empty() {
        target.push(' ');
        target.push_str(&post.join(" and "));
    }

    match ast.action {
        Action::SwitchOn => format!("turn on {target}"),
        Action::SwitchOff => format!("turn off {target}"),
        Action::Toggle => format!("toggle {target}"),
        Action::AdjustBrightness(level) => format!("set the brightness of {target} to {level}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ProximityRelation::*;

    fn near(anchor: &str) -> Qualifier {
        Qualifier::Proximity {
            relation: Near,
            anchor: anchor.into(),
        }
    }

    #[test]
    fn reference_phrases() {
        let ast = parse_spatial_command("switch on the light that is near the AC").unwrap();
        assert_eq!(
            ast,
            CommandAst {
                action: Action::SwitchOn,
                device_type: "light".into(),
                qualifiers: vec![near("ac")]
            }
        );
        let ast = parse_spatial_command("turn on the fan").unwrap();
        assert_eq!(ast.action, Action::SwitchOn);
        assert_eq!(ast.device_type, "fan");
        assert!(ast.qualifiers.is_empty());

        let ast = parse_spatial_command("You need to switch on the leftmost light.").unwrap();
        assert_eq!(ast.qualifiers, vec![Qualifier::Superlative(Axis::Leftmost)]);

        let ast = parse_spatial_command("You need to switch on the light above the photo frame.").unwrap();
        assert_eq!(
            ast.qualifiers,
            vec![Qualifier::Proximity { relation: Above, anchor: "photo frame".into() }]
        );

        let ast = parse_spatial_command("You need to turn on the light on the desk.").unwrap();
        assert_eq!(ast.qualifiers, vec![near("desk")]);
    }

    #[test]
    fn unparsable_and_unknown_action() {
        assert!(matches!(
            parse_spatial_command("make me a sandwich"),
            Err(CommandError::UnparsableCommand(_))
        ));
        assert!(matches!(
            parse_spatial_command("paint the light blue"),
            Err(CommandError::UnknownAction(_))
        ));
        assert!(matches!(parse_spatial_command(""), Err(CommandError::UnparsableCommand(_))));
        assert!(matches!(parse_spatial_command("turn on"), Err(CommandError::UnparsableCommand(_))));
        assert!(matches!(
            parse_spatial_command("turn on the light near"),
            Err(CommandError::UnparsableCommand(_))
        ));
    }

    #[test]
    fn cardinality_forms() {
        let ast = parse_spatial_command("Turn on the two lights on the left wall.").unwrap();
        assert_eq!(
            ast.qualifiers,
            vec![Qualifier::Cardinality(Cardinality::Count(2)), Qualifier::Region(Side::Left)]
        );
        let ast = parse_spatial_command("turn off both fans").unwrap();
        assert_eq!(ast.qualifiers, vec![Qualifier::Cardinality(Cardinality::Count(2))]);
        let ast = parse_spatial_command("turn off all of the lights").unwrap();
        assert_eq!(ast.qualifiers, vec![Qualifier::Cardinality(Cardinality::All)]);
        // A plural noun alone means all of them.
        let ast = parse_spatial_command("turn on the lights to my left").unwrap();
        assert_eq!(
            ast.qualifiers,
            vec![Qualifier::Cardinality(Cardinality::All), Qualifier::Region(Side::Left)]
        );
    }

    #[test]
    fn directional_relations() {
        let ast = parse_spatial_command("turn on the fan to the left of the window").unwrap();
        assert_eq!(
            ast.qualifiers,
            vec![Qualifier::Proximity { relation: LeftOf, anchor: "window".into() }]
        );
        let ast = parse_spatial_command("switch off the light right of the air conditioner").unwrap();
        assert_eq!(
            ast.qualifiers,
            vec![Qualifier::Proximity { relation: RightOf, anchor: "ac".into() }]
        );
        let ast = parse_spatial_command("turn on the lamp under the shelf and near the door").unwrap();
        assert_eq!(ast.device_type, "light");
        assert_eq!(
            ast.qualifiers,
            vec![
                Qualifier::Proximity { relation: Below, anchor: "shelf".into() },
                near("door")
            ]
        );
    }

    #[test]
    fn verb_forms() {
        assert_eq!(parse_spatial_command("turn the fan off").unwrap().action, Action::SwitchOff);
        assert_eq!(parse_spatial_command("Toggle the ceiling fan").unwrap().device_type, "fan");
        let ast = parse_spatial_command("set the brightness of the light near the window to 40%").unwrap();
        assert_eq!(ast.action, Action::AdjustBrightness(40));
        assert_eq!(ast.qualifiers, vec![near("window")]);
        let ast = parse_spatial_command("dim the leftmost light to 10").unwrap();
        assert_eq!(ast.action, Action::AdjustBrightness(10));
        let ast = parse_spatial_command("set the light brightness to 75 percent").unwrap();
        assert_eq!(ast.action, Action::AdjustBrightness(75));
        assert!(ast.qualifiers.is_empty());
        assert!(matches!(
            parse_spatial_command("set the light brightness to 250"),
            Err(CommandError::UnknownAction(_))
        ));
        let ast = parse_spatial_command("turn on the left-most light").unwrap();
        assert_eq!(ast.qualifiers, vec![Qualifier::Superlative(Axis::Leftmost)]);
    }

    #[test]
    fn printer_output() {
        let ast = parse_spatial_command("switch on the light that is near the AC").unwrap();
        assert_eq!(to_command_text(&ast), "turn on the light near the ac");
    }

    fn arb_ast() -> impl Strategy<Value = CommandAst> {
        let action = prop_oneof![
            Just(Action::SwitchOn),
            Just(Action::SwitchOff),
            Just(Action::Toggle),
            (0u8..=100).prop_map(Action::AdjustBrightness),
        ];
        let kind = proptest::sample::select(KNOWN_TYPES.to_vec()).prop_map(String::from);
        let card = proptest::option::of(prop_oneof![
            Just(Cardinality::All),
            (1u32..=12).prop_map(Cardinality::Count)
        ]);
        let axis = proptest::option::of(proptest::sample::select(vec![
            Axis::Leftmost,
            Axis::Rightmost,
            Axis::Topmost,
            Axis::Bottommost,
        ]));
        let relation = proptest::sample::select(vec![Near, LeftOf, RightOf, Above, Below]);
        let anchor = proptest::sample::select(vec!["window", "door", "ac", "photo frame", "desk", "tv", "fan"]);
        let post = proptest::collection::vec(
            prop_oneof![
                (relation, anchor).prop_map(|(relation, a)| Qualifier::Proximity {
                    relation,
                    anchor: a.to_string()
                }),
                Just(Qualifier::Region(Side::Left)),
                Just(Qualifier::Region(Side::Right)),
            ],
            0..3,
        );
        (action, kind, card, axis, post).prop_map(|(action, device_type, card, axis, post)| {
            let mut qualifiers = Vec::new();
            if let Some(c) = card {
                qualifiers.push(Qualifier::Cardinality(c));
            }
            if let Some(a) = axis {
                qualifiers.push(Qualifier::Superlative(a));
            }
            qualifiers.extend(post);
            CommandAst {
                action,
                device_type,
                qualifiers,
            }
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_round_trips(ast in arb_ast()) {
            let text = to_command_text(&ast);
            let back = parse_spatial_command(&text).unwrap();
            prop_assert_eq!(back, ast, "{}", text);
        }

        #[test]
        fn never_panics(text in "\\PC{0,80}") {
            let _ = parse_spatial_command(&text);
        }
    }
}
