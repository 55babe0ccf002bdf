//! MovieLens-1M loader: `::`-separated ratings, users and movies files.
//!
//! Ratings of at least 4 become label 1, everything else 0. Movie year is
//! bucketed by decade, genres stay multi-valued, the title is dropped.

use std::fs;
use std::path::Path;

use super::{DataError, Dictionary, FieldDef, InteractionLog, Record};

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    // MovieLens-1M ships latin-1 titles; decode lossily.
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(String::from_utf8_lossy(&bytes)
        .lines()
        .map(|l| l.to_string())
        .collect())
}

fn split_fields<'a>(line: &'a str, n: usize, file: &str, lineno: usize) -> Result<Vec<&'a str>, DataError> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != n {
        return Err(DataError::Malformed {
            file: file.to_string(),
            line: lineno,
            detail: format!("expected {n} '::'-separated fields, got {}", parts.len()),
        });
    }
    Ok(parts)
}

/// Extract the `(YYYY)` suffix of a MovieLens title and bucket it by decade.
fn decade_of(title: &str) -> Option<String> {
    let open = title.rfind('(')?;
    let close = title.rfind(')')?;
    let year: i32 = title.get(open + 1..close)?.trim().parse().ok()?;
    Some(format!("{}0s", year / 10))
}

pub fn load_movielens(
    ratings_path: &Path,
    users_path: &Path,
    movies_path: &Path,
) -> Result<InteractionLog, DataError> {
    let mut users = Dictionary::default();
    let mut gender = Dictionary::default();
    let mut age = Dictionary::default();
    let mut occupation = Dictionary::default();
    let mut user_attrs: Vec<Vec<Vec<u32>>> = Vec::new();

    let ufile = users_path.display().to_string();
    for (i, line) in read_lines(users_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // UserID::Gender::Age::Occupation::Zip-code; zip is dropped
        let f = split_fields(line, 5, &ufile, i + 1)?;
        let uid = users.encode(f[0]);
        debug_assert_eq!(uid as usize, user_attrs.len());
        user_attrs.push(vec![
            vec![gender.encode(f[1])],
            vec![age.encode(f[2])],
            vec![occupation.encode(f[3])],
        ]);
    }

    let mut items = Dictionary::default();
    let mut genres = Dictionary::default();
    let mut decades = Dictionary::default();
    let mut item_attrs: Vec<Vec<Vec<u32>>> = Vec::new();

    let mfile = movies_path.display().to_string();
    for (i, line) in read_lines(movies_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // MovieID::Title (Year)::Genre|Genre|...
        let f = split_fields(line, 3, &mfile, i + 1)?;
        let iid = items.encode(f[0]);
        debug_assert_eq!(iid as usize, item_attrs.len());
        let genre_codes: Vec<u32> = f[2].split('|').filter(|g| !g.is_empty()).map(|g| genres.encode(g)).collect();
        if genre_codes.is_empty() {
            return Err(DataError::Malformed {
                file: mfile.clone(),
                line: i + 1,
                detail: "movie has no genres".into(),
            });
        }
        let decade = decade_of(f[1]).ok_or_else(|| DataError::Malformed {
            file: mfile.clone(),
            line: i + 1,
            detail: format!("cannot parse year from title '{}'", f[1]),
        })?;
        item_attrs.push(vec![genre_codes, vec![decades.encode(&decade)]]);
    }

    let mut records = Vec::new();
    let rfile = ratings_path.display().to_string();
    for (i, line) in read_lines(ratings_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // UserID::MovieID::Rating::Timestamp
        let f = split_fields(line, 4, &rfile, i + 1)?;
        let user = users.get(f[0]).ok_or_else(|| DataError::Malformed {
            file: rfile.clone(),
            line: i + 1,
            detail: format!("user '{}' missing from users file", f[0]),
        })?;
        let item = items.get(f[1]).ok_or_else(|| DataError::Malformed {
            file: rfile.clone(),
            line: i + 1,
            detail: format!("movie '{}' missing from movies file", f[1]),
        })?;
        let rating: f64 = f[2].parse().map_err(|_| DataError::Malformed {
            file: rfile.clone(),
            line: i + 1,
            detail: format!("bad rating '{}'", f[2]),
        })?;
        let ts: i64 = f[3].parse().map_err(|_| DataError::Malformed {
            file: rfile.clone(),
            line: i + 1,
            detail: format!("bad timestamp '{}'", f[3]),
        })?;
        records.push(Record {
            user,
            item,
            label: if rating >= 4.0 { 1 } else { 0 },
            ts,
        });
    }

    let log = InteractionLog {
        num_users: users.len(),
        num_items: items.len(),
        user_fields: vec![
            FieldDef { name: "gender".into(), vocab: gender.len().max(1) },
            FieldDef { name: "age".into(), vocab: age.len().max(1) },
            FieldDef { name: "occupation".into(), vocab: occupation.len().max(1) },
        ],
        item_fields: vec![
            FieldDef { name: "genre".into(), vocab: genres.len().max(1) },
            FieldDef { name: "decade".into(), vocab: decades.len().max(1) },
        ],
        user_attrs,
        item_attrs,
        records,
        user_keys: users.into_keys(),
        item_keys: items.into_keys(),
    };
    log.validate()?;
    Ok(log)
}
