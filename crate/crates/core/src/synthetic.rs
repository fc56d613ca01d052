//! Deterministic synthetic corpora for tests, examples and demos.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conversation::{
    build_thread_with, Comment, Conversation, ImageRef, Post, RecordKind, StanceLabel, UserStatus,
};
use crate::digest::sha256_hex;
use crate::ingest::RawRecord;

pub const TARGETS: [&str; 6] = ["trump", "biden", "tesla", "bmw", "costco", "bitcoin"];

/// Raw records plus the image files they reference (path relative to the
/// corpus directory, PNG bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub records: Vec<RawRecord>,
    pub images: Vec<(String, Vec<u8>)>,
}

impl SyntheticCorpus {
    /// Writes `raw.jsonl` and the images under `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (rel, bytes) in &self.images {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, bytes)?;
        }
        crate::ingest::write_raw(&dir.join("raw.jsonl"), &self.records)
    }
}

/// A small solid-colour RGB PNG.
pub fn png_bytes(width: u32, height: u32, rgb: [u8; 3]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header");
        let data: Vec<u8> = (0..width * height).flat_map(|_| rgb).collect();
        writer.write_image_data(&data).expect("png data");
    }
    out
}

fn image_for(id: &str) -> (String, Vec<u8>) {
    let h = sha256_hex(id.as_bytes());
    let b = hex::decode(&h[..6]).expect("hex");
    (format!("img/{id}.png"), png_bytes(8, 8, [b[0], b[1], b[2]]))
}

fn name(target: &str) -> &str {
    match target {
        "trump" => "Trump",
        "biden" => "Biden",
        "tesla" => "Tesla",
        "bmw" => "BMW",
        "costco" => "Costco",
        "bitcoin" => "Bitcoin",
        other => other,
    }
}

fn utterance(rng: &mut ChaCha8Rng, target: &str, stance: StanceLabel) -> String {
    let t = name(target);
    let options: [String; 4] = match stance {
        StanceLabel::Favor => [
            format!("Honestly {t} gets this one right."),
            format!("This is why I keep backing {t}."),
            format!("Say what you want, {t} delivers."),
            format!("Good call by {t}, about time."),
        ],
        StanceLabel::Against => [
            format!("{t} keeps getting this wrong."),
            format!("Another mess from {t}, no surprise."),
            format!("I stopped trusting {t} years ago."),
            format!("This is exactly the problem with {t}."),
        ],
        StanceLabel::None => [
            "Does anyone know when this was posted?".to_string(),
            "The lighting in that photo is odd.".to_string(),
            "Replying so I can find this thread later.".to_string(),
            "Which subreddit was this crossposted from?".to_string(),
        ],
    };
    options.choose(rng).expect("non-empty").clone()
}

fn stamp(day: u32, minute: u32) -> String {
    format!("2024-03-{:02}T{:02}:{:02}:00Z", day, 8 + minute / 60, minute % 60)
}

/// The bundled demo corpus: 10 threads, each a reply chain of 5 annotated
/// comments (50 conversations, depths 1 to 5) over the six targets, with
/// post images, some comment images, and history-only records for every
/// commenter.
pub fn demo_corpus(seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<String> = (1..=12).map(|i| format!("u{i:02}")).collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    for t in 0..10u32 {
        let target = TARGETS[t as usize % TARGETS.len()];
        let root = format!("t{t:02}");
        let (img_path, img) = image_for(&root);
        images.push((img_path.clone(), img));
        records.push(RawRecord {
            kind: RecordKind::Post,
            id: root.clone(),
            parent_id: None,
            author_id: format!("op{t:02}"),
            author_status: UserStatus::Active,
            text: format!("{} news thread, what do you make of this?", name(target)),
            images: vec![img_path],
            created_at: stamp(t + 1, 0),
            target_id: Some(target.to_string()),
            thread_root: root.clone(),
            gold: None,
        });
        let mut parent = root.clone();
        for c in 1..=5u32 {
            let id = format!("{root}c{c}");
            let gold = StanceLabel::ALL[rng.random_range(0..3)];
            let mut imgs = Vec::new();
            if (t + c) % 3 == 0 {
                let (p, bytes) = image_for(&id);
                images.push((p.clone(), bytes));
                imgs.push(p);
            }
            records.push(RawRecord {
                kind: RecordKind::Comment,
                id: id.clone(),
                parent_id: Some(parent.clone()),
                author_id: users.choose(&mut rng).expect("users").clone(),
                author_status: UserStatus::Active,
                text: utterance(&mut rng, target, gold),
                images: imgs,
                created_at: stamp(t + 1, c * 7),
                target_id: None,
                thread_root: root.clone(),
                gold: Some(gold),
            });
            parent = id;
        }
    }
    // Older activity outside the annotated threads, for persona distillation.
    for (k, u) in users.iter().enumerate() {
        for j in 0..3u32 {
            let target = TARGETS[(k + j as usize) % TARGETS.len()];
            let stance = StanceLabel::ALL[rng.random_range(0..3)];
            records.push(RawRecord {
                kind: RecordKind::Comment,
                id: format!("h{u}-{j}"),
                parent_id: Some(format!("archive-{u}")),
                author_id: u.clone(),
                author_status: UserStatus::Active,
                text: utterance(&mut rng, target, stance),
                images: vec![],
                created_at: format!("2024-02-{:02}T12:00:00Z", 1 + k as u32 + j * 9),
                target_id: None,
                thread_root: format!("archive-{u}"),
                gold: None,
            });
        }
    }
    SyntheticCorpus { records, images }
}

/// Corpus built to exercise the filters: depth-12 chains, a depth-9 chain,
/// deleted and suspended authors with reply subtrees, an empty comment,
/// and random trees mixing all of these.
pub fn filter_stress_corpus(seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let post = |id: &str, author: &str, status: UserStatus, target: &str| RawRecord {
        kind: RecordKind::Post,
        id: id.into(),
        parent_id: None,
        author_id: author.into(),
        author_status: status,
        text: format!("post {id}"),
        images: vec![],
        created_at: "2024-04-01T00:00:00Z".into(),
        target_id: Some(target.into()),
        thread_root: id.into(),
        gold: None,
    };
    let comment = |id: String, parent: &str, root: &str, author: &str, status: UserStatus, n: u32| RawRecord {
        kind: RecordKind::Comment,
        id,
        parent_id: Some(parent.into()),
        author_id: author.into(),
        author_status: status,
        text: format!("reply number {n}"),
        images: vec![],
        created_at: format!("2024-04-01T{:02}:{:02}:00Z", n / 60, n % 60),
        target_id: None,
        thread_root: root.into(),
        gold: Some(StanceLabel::None),
    };

    for (root, len) in [("deep1", 12u32), ("deep2", 12), ("edge9", 9)] {
        records.push(post(root, "op", UserStatus::Active, "tesla"));
        let mut parent = root.to_string();
        for d in 1..=len {
            let id = format!("{root}-c{d}");
            records.push(comment(id.clone(), &parent, root, &format!("w{d}"), UserStatus::Active, d));
            parent = id;
        }
    }

    records.push(post("del", "op", UserStatus::Active, "bmw"));
    records.push(comment("del-c1".into(), "del", "del", "ghost", UserStatus::Deleted, 1));
    records.push(comment("del-c2".into(), "del-c1", "del", "a", UserStatus::Active, 2));
    records.push(comment("del-c3".into(), "del-c1", "del", "b", UserStatus::Active, 3));
    records.push(comment("del-c4".into(), "del", "del", "c", UserStatus::Active, 4));
    let mut empty = comment("del-c5".into(), "del-c4", "del", "d", UserStatus::Active, 5);
    empty.text = String::new();
    records.push(empty);

    records.push(post("sus", "banned", UserStatus::Suspended, "costco"));
    records.push(comment("sus-c1".into(), "sus", "sus", "a", UserStatus::Active, 1));

    for t in 0..20 {
        let root = format!("r{t:02}");
        records.push(post(&root, &format!("op{t}"), UserStatus::Active, TARGETS[t % 6]));
        let mut nodes: Vec<(String, u32)> = vec![(root.clone(), 0)];
        for n in 0..rng.random_range(5..40u32) {
            // Bias toward extending the deepest chain so some threads pass depth 9.
            let &(ref parent, depth) = if rng.random_bool(0.6) {
                nodes.iter().max_by_key(|(_, d)| *d).expect("non-empty")
            } else {
                nodes.choose(&mut rng).expect("non-empty")
            };
            let parent = parent.clone();
            let status = match rng.random_range(0..100) {
                0..8 => UserStatus::Deleted,
                8..12 => UserStatus::Suspended,
                _ => UserStatus::Active,
            };
            let id = format!("{root}-n{n}");
            let author = format!("x{}", rng.random_range(0..15));
            records.push(comment(id.clone(), &parent, &root, &author, status, n));
            nodes.push((id, depth + 1));
        }
    }
    SyntheticCorpus {
        records,
        images: Vec::new(),
    }
}

/// A random reply tree with images on some turns and a random final
/// comment. Returns the conversation and the image files it references.
pub fn random_conversation<R: Rng>(rng: &mut R, id: &str, max_comments: usize) -> (Conversation, Vec<(String, Vec<u8>)>) {
    let target = TARGETS[rng.random_range(0..TARGETS.len())];
    let mut files = Vec::new();
    let mut images = |rng: &mut R, turn: &str| -> Vec<ImageRef> {
        let n = match rng.random_range(0..10) {
            0..6 => 0,
            6..9 => 1,
            _ => 2,
        };
        (0..n)
            .map(|k| {
                let (path, bytes) = image_for(&format!("{id}-{turn}-{k}"));
                let r = ImageRef::new(path.clone()).with_digest(sha256_hex(&bytes));
                files.push((path, bytes));
                r
            })
            .collect()
    };
    let post = Post {
        id: format!("{id}-p"),
        author: "op".into(),
        text: format!("Thoughts on {}?", name(target)),
        images: images(rng, "p"),
        created_at: "2024-05-01T00:00:00Z".into(),
        target: target.into(),
    };
    let n = rng.random_range(1..=max_comments.max(1));
    let mut ids = vec![post.id.clone()];
    let mut comments = Vec::new();
    for i in 0..n {
        let cid = format!("{id}-c{i}");
        let parent = ids[rng.random_range(0..ids.len())].clone();
        let stance = StanceLabel::ALL[rng.random_range(0..3)];
        comments.push(Comment {
            id: cid.clone(),
            parent_id: parent,
            author: format!("u{}", rng.random_range(0..6)),
            text: format!("{} ({cid})", utterance_plain(rng, target, stance)),
            images: images(rng, &cid),
            created_at: format!("2024-05-01T00:{:02}:{:02}Z", i / 60, i % 60),
        });
        ids.push(cid);
    }
    let final_id = comments[rng.random_range(0..comments.len())].id.clone();
    let conv = build_thread_with(id.to_string(), post, comments, Some(&final_id)).expect("generated tree is valid");
    (conv, files)
}

fn utterance_plain<R: Rng>(rng: &mut R, target: &str, stance: StanceLabel) -> String {
    let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
    utterance(&mut inner, target, stance)
}
